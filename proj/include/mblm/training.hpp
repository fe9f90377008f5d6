#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mblm/config.hpp"
#include "mblm/data.hpp"
#include "mblm/hierarchy.hpp"
#include "mblm/metrics.hpp"

namespace mblm {

// Linear warmup over round(warmup_fraction * total_steps) steps, then cosine
// from peak_lr down to min_lr at total_steps.
double lr_at(std::size_t step, const TrainConfig& config);

// Global L2 norm over every gradient buffer.
double grad_norm(std::span<const Tensor> params);
// Scales all gradients by min(1, max_norm / norm). Returns the norm before clipping.
double clip_grad_norm(std::span<const Tensor> params, double max_norm);

// Decoupled weight decay Adam: p -= lr*wd*p, then the bias-corrected moment step.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, std::pair<double, double> betas, double eps, double weight_decay);

  void step(double lr);
  std::uint64_t steps() const noexcept { return t_; }

  // Moments as "optim.m.<name>" / "optim.v.<name>" tensors.
  void save(Checkpoint& checkpoint) const;
  void load(const Checkpoint& checkpoint, std::uint64_t steps);

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<float>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::uint64_t t_ = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepResult {
  std::size_t step = 0;  // optimizer steps taken after this one
  double loss = 0.0;     // mean over micro-batches, natural log
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
  std::size_t bytes = 0;   // input ids consumed
};

// Owns the optimizer and the schedule position for one model.
class Trainer {
 public:
  Trainer(Mblm& model, const TrainConfig& config);

  // One optimizer step over `micro_batches` (normally config.accumulation of them).
  // A non-finite loss or gradient throws TrainingError and leaves the weights untouched.
  StepResult train_step(std::span<const Batch> micro_batches);

  std::size_t step() const noexcept { return step_; }
  const TrainConfig& config() const noexcept { return config_; }
  Mblm& model() noexcept { return model_; }

  // Parameters, moments and `metadata` JSON (step added) in one container.
  Checkpoint checkpoint(const std::string& metadata_json = "{}") const;
  // Restores weights, moments and step. Returns the stored metadata JSON.
  std::string restore(const Checkpoint& checkpoint);

 private:
  Mblm& model_;
  TrainConfig config_;
  AdamW optimizer_;
  std::size_t step_ = 0;
};

// Mean NLL over non-overlapping windows of `context_length` bytes; a shorter
// tail window covers the remainder. max_bytes = 0 scores everything.
EvalReport evaluate_text(const Mblm& model, std::span<const std::uint8_t> bytes, std::size_t context_length,
                         std::size_t batch = 4, std::size_t max_bytes = 0);

// Predicted answer = argmax over the 256 byte logits at the answer slot.
EvalReport evaluate_vqa(const Mblm& model, const VqaShard& shard, std::size_t batch = 8,
                        std::size_t max_samples = 0);

struct FitOptions {
  std::string out_dir;  // empty: nothing is written
  std::function<EvalReport(const Mblm&, std::size_t step)> evaluate;  // validation hook, optional
  std::size_t checkpoint_every = 0;  // 0: only at the end
  bool resume = false;               // continue from out_dir/last.ckpt when present
  std::size_t max_steps = 0;         // stop this call after so many steps, 0 = no limit
  std::function<void(const StepResult&)> on_step;
};

struct FitResult {
  std::vector<StepResult> steps;  // steps run by this call
  std::vector<EvalReport> evals;
  std::optional<double> best_val_nll;
  std::size_t start_step = 0;
  std::size_t final_step = 0;
  double seconds = 0.0;
  bool stopped_on_time = false;
};

// Runs train_step until total_steps (or max_seconds). Writes last.ckpt,
// best.ckpt (lowest validation nll) and train_log.jsonl under out_dir.
FitResult fit(Trainer& trainer, SampleSource& source, const FitOptions& options);

}  // namespace mblm
