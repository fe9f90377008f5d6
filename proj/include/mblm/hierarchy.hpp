#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mblm/config.hpp"
#include "mblm/numerics/tensor.hpp"
#include "mblm/patching.hpp"
#include "mblm/stage_models.hpp"

namespace mblm {

struct ForwardTrace {
  struct Stage {
    Shape input;
    Shape output;
    std::vector<std::pair<std::size_t, std::size_t>> chunks;  // [begin, end) along K_i
  };
  std::vector<Stage> stages;
  std::size_t padded_length = 0;
  // Floats held for the reverse pass once the forward finished, and the high
  // water mark including the largest recomputed chunk.
  std::size_t stored_activations = 0;
  std::size_t peak_activations = 0;
};

// [begin, end) ranges splitting k rows into min(c, k) parts, remainder last.
std::vector<std::pair<std::size_t, std::size_t>> chunk_bounds(std::size_t k, std::size_t c);

class Mblm {
 public:
  Mblm(const ValidatedConfig& config, std::uint64_t seed);

  const ValidatedConfig& config() const noexcept { return config_; }
  std::size_t num_stages() const noexcept { return config_.num_stages(); }

  // ids row-major [B, L] -> logits [B, L, 257]; row t predicts ids[t] from ids[< t].
  Tensor forward(std::span<const std::int32_t> ids, std::size_t batch, bool training = false,
                 ForwardTrace* trace = nullptr) const;

  // Final-stage output [K_N, P_N, D_N] -> logits [K_N, P_N, 257].
  Tensor head(const Tensor& local_out) const;

  StageModel& stage_model(std::size_t i) { return *models_.at(i); }
  const StageModel& stage_model(std::size_t i) const { return *models_.at(i); }
  StageParams& stage_params(std::size_t i) { return params_.at(i); }
  const StageParams& stage_params(std::size_t i) const { return params_.at(i); }
  Tensor& head_weight() { return head_w_; }
  Tensor& head_bias() { return head_b_; }

  // Every trainable tensor under a stable dotted name.
  std::vector<NamedParam> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  Tensor run_stage(std::size_t i, const Tensor& x, bool training, ForwardTrace* trace) const;

  ValidatedConfig config_;
  std::vector<StageParams> params_;
  std::vector<std::unique_ptr<StageModel>> models_;
  Tensor head_w_;  // [D_N, 257]
  Tensor head_b_;  // [257]
};

// Parameter count of a model built from config, without allocating it.
std::size_t count_parameters(const ValidatedConfig& config);

// Mean natural-log NLL over positions whose mask byte is nonzero.
// logits [B, L, V], targets and mask row-major [B, L].
Tensor lm_loss(const Tensor& logits, std::span<const std::int32_t> targets,
               std::span<const std::uint8_t> mask);

// ---------------------------------------------------------------------------
// Generation

struct SamplingPolicy {
  enum class Kind { greedy, temperature, top_k };
  Kind kind = Kind::greedy;
  double temperature = 1.0;
  std::size_t top_k = 0;

  static SamplingPolicy greedy() { return {}; }
  static SamplingPolicy with_temperature(double t) { return {Kind::temperature, t, 0}; }
  static SamplingPolicy with_top_k(std::size_t k, double t = 1.0) { return {Kind::top_k, t, k}; }
  // "greedy", "temperature:0.8", "top_k:40" or "top_k:40:0.8".
  static SamplingPolicy parse(const std::string& text);
  void check() const;
};

// Picks a byte id from one logits row.
std::int32_t sample_logits(std::span<const float> logits, const SamplingPolicy& policy,
                           std::mt19937_64& rng);

// Appends n bytes to the prompt one at a time, rerunning the full forward on
// the last L_max - 1 bytes each step (the whole history when P_1 may extend).
std::vector<std::uint8_t> generate(const Mblm& model, std::span<const std::uint8_t> prompt,
                                   std::size_t n, const SamplingPolicy& policy,
                                   std::uint64_t seed);

struct BenchRecord {
  std::size_t context_length = 0;
  std::size_t bytes = 0;
  double seconds_per_byte = 0.0;
};

// Time per generated byte at each context length (prompt of length L - 1).
std::vector<BenchRecord> bench_generation(const Mblm& model, std::span<const std::size_t> lengths,
                                          std::size_t bytes_per_length = 4, std::uint64_t seed = 0);
// Least-squares slope of log(seconds_per_byte) against log(context_length).
double growth_exponent(std::span<const BenchRecord> records);

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a checkpoint does not belong to the model it is loaded into.
class CheckpointMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  std::string config_toml;  // canonical model config
  std::string metadata;     // free-form JSON text
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::string& path);

// Snapshot of the model parameters (values copied).
Checkpoint model_checkpoint(const Mblm& model);
// Copies parameter values from a checkpoint. Throws CheckpointMismatch when the
// config differs or a parameter is missing or misshapen.
void load_parameters(Mblm& model, const Checkpoint& checkpoint);

}  // namespace mblm
