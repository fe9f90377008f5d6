#include "mblm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "mblm/numerics/ops.hpp"

namespace mblm {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

double lr_at(std::size_t step, const TrainConfig& c) {
  if (step > c.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total " +
                            std::to_string(c.total_steps));
  }
  const auto warmup = static_cast<std::size_t>(std::llround(c.warmup_fraction * static_cast<double>(c.total_steps)));
  if (step < warmup) return c.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const std::size_t span = c.total_steps - warmup;
  if (span == 0) return c.peak_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return c.min_lr + (c.peak_lr - c.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double grad_norm(std::span<const Tensor> params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<const Tensor> params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (float& g : p.grad_mut()) g *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<NamedParam> params, std::pair<double, double> betas, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(betas.first), beta2_(betas.second), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0f);
    v_.emplace_back(p.tensor.numel(), 0.0f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double decay = 1.0 - lr * weight_decay_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.values_mut();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
      const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + eps_);
      w[i] = static_cast<float>(w[i] * decay - lr * update);
    }
  }
}

void AdamW::save(Checkpoint& c) const {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto& shape = params_[k].tensor.shape();
    c.tensors.emplace_back("optim.m." + params_[k].name, Tensor::from_vector(shape, m_[k]));
    c.tensors.emplace_back("optim.v." + params_[k].name, Tensor::from_vector(shape, v_[k]));
  }
}

void AdamW::load(const Checkpoint& c, std::uint64_t steps) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const auto* m = c.find("optim.m." + params_[k].name);
    const auto* v = c.find("optim.v." + params_[k].name);
    if (!m || !v || m->numel() != m_[k].size() || v->numel() != v_[k].size()) {
      throw CheckpointMismatch("checkpoint: optimizer state missing or misshapen for " + params_[k].name);
    }
    m_[k] = m->to_vector();
    v_[k] = v->to_vector();
  }
  t_ = steps;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(Mblm& model, const TrainConfig& config)
    : model_(model),
      config_(config),
      optimizer_(model.named_parameters(), config.betas, config.eps, config.weight_decay) {
  validate(config_);
}

StepResult Trainer::train_step(std::span<const Batch> micro_batches) {
  if (micro_batches.empty()) throw std::invalid_argument("train_step: no micro-batches");
  if (step_ >= config_.total_steps) throw std::out_of_range("train_step: schedule exhausted");
  const auto params = model_.parameters();
  model_.zero_grad();
  StepResult r;
  const double k = static_cast<double>(micro_batches.size());
  for (std::size_t i = 0; i < micro_batches.size(); ++i) {
    const auto& b = micro_batches[i];
    Tensor loss = lm_loss(model_.forward(b.ids, b.batch, true), b.ids, b.mask);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      model_.zero_grad();
      throw TrainingError("train_step: non-finite loss " + std::to_string(value) + " at step " +
                          std::to_string(step_) + ", micro-batch " + std::to_string(i));
    }
    backward(loss);
    r.loss += value / k;
    r.bytes += b.ids.size();
  }
  if (k > 1) {
    const auto scale = static_cast<float>(1.0 / k);
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (float& g : p.grad_mut()) g *= scale;
    }
  }
  r.grad_norm = clip_grad_norm(params, config_.grad_clip_norm);
  if (!std::isfinite(r.grad_norm)) {
    model_.zero_grad();
    throw TrainingError("train_step: non-finite gradient norm at step " + std::to_string(step_));
  }
  r.lr = lr_at(step_, config_);
  optimizer_.step(r.lr);
  r.step = ++step_;
  return r;
}

Checkpoint Trainer::checkpoint(const std::string& metadata_json) const {
  Checkpoint c = model_checkpoint(model_);
  optimizer_.save(c);
  json meta = json::parse(metadata_json);
  meta["step"] = step_;
  meta["micro_batch"] = config_.micro_batch;
  meta["accumulation"] = config_.accumulation;
  meta["seed"] = config_.seed;
  c.metadata = meta.dump();
  return c;
}

std::string Trainer::restore(const Checkpoint& c) {
  json meta;
  try {
    meta = json::parse(c.metadata);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: unreadable metadata: ") + e.what());
  }
  if (!meta.contains("step")) throw CheckpointError("checkpoint: no training state");
  if (meta.value("micro_batch", std::size_t{0}) != config_.micro_batch ||
      meta.value("accumulation", std::size_t{0}) != config_.accumulation ||
      meta.value("seed", std::uint64_t{0}) != config_.seed) {
    throw CheckpointMismatch("checkpoint: batch layout or seed differs from the training config");
  }
  load_parameters(model_, c);
  step_ = meta["step"].get<std::size_t>();
  if (step_ > config_.total_steps) throw CheckpointMismatch("checkpoint: step beyond train.total_steps");
  optimizer_.load(c, step_);
  return c.metadata;
}

// ---------------------------------------------------------------------------

EvalReport evaluate_text(const Mblm& model, std::span<const std::uint8_t> bytes, std::size_t context_length,
                         std::size_t batch, std::size_t max_bytes) {
  if (context_length == 0) throw std::invalid_argument("evaluate: context length must be > 0");
  model.config().check_length(context_length);
  if (max_bytes > 0 && bytes.size() > max_bytes) bytes = bytes.first(max_bytes);
  if (bytes.empty()) throw std::invalid_argument("evaluate: no bytes to score");
  batch = std::max<std::size_t>(batch, 1);
  NoGradGuard no_grad;

  double total = 0.0;
  std::uint64_t scored = 0, samples = 0;
  auto score = [&](std::size_t begin, std::size_t rows, std::size_t length) {
    std::vector<std::int32_t> ids(bytes.begin() + begin, bytes.begin() + begin + rows * length);
    std::vector<std::uint8_t> mask(ids.size(), 1);
    const double nll = lm_loss(model.forward(ids, rows, false), ids, mask).item();
    total += nll * static_cast<double>(ids.size());
    scored += ids.size();
    samples += rows;
  };
  const std::size_t full = bytes.size() / context_length;
  for (std::size_t w = 0; w < full; w += batch) {
    const std::size_t rows = std::min(batch, full - w);
    score(w * context_length, rows, context_length);
  }
  if (const std::size_t tail = bytes.size() - full * context_length; tail > 0) {
    score(full * context_length, 1, tail);
  }

  EvalReport r;
  r.context_length = context_length;
  r.nll = total / static_cast<double>(scored);
  r.scored = scored;
  r.samples = samples;
  r.stats = corpus_stats(bytes);
  r.config_hash = config_hash(model.config().config());
  return r;
}

EvalReport evaluate_vqa(const Mblm& model, const VqaShard& shard, std::size_t batch, std::size_t max_samples) {
  std::size_t n = shard.samples.size();
  if (max_samples > 0) n = std::min(n, max_samples);
  if (n == 0) throw std::invalid_argument("evaluate: empty shard");
  batch = std::max<std::size_t>(batch, 1);
  const std::size_t length = shard.length;
  NoGradGuard no_grad;

  double total = 0.0;
  std::uint64_t scored = 0;
  std::vector<int> predictions;
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t rows = std::min(batch, n - s);
    Batch b = make_batch(std::span(shard.samples).subspan(s, rows));
    Tensor logits = model.forward(b.ids, rows, false);
    const std::size_t count = static_cast<std::size_t>(
        std::count_if(b.mask.begin(), b.mask.end(), [](std::uint8_t m) { return m != 0; }));
    total += lm_loss(logits, b.ids, b.mask).item() * static_cast<double>(count);
    scored += count;
    const auto v = logits.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = v.subspan((r * length + length - 1) * kVocabSize, 256);
      predictions.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  EvalReport r;
  r.context_length = length;
  r.nll = total / static_cast<double>(std::max<std::uint64_t>(scored, 1));
  r.scored = scored;
  r.samples = n;
  r.vqa = vqa_accuracy(predictions, std::span(shard.answers).first(n), std::span(shard.types).first(n));
  r.config_hash = config_hash(model.config().config());
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

FitResult fit(Trainer& trainer, SampleSource& source, const FitOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  const TrainConfig& cfg = trainer.config();
  FitResult result;

  fs::path dir;
  if (!options.out_dir.empty()) {
    dir = options.out_dir;
    fs::create_directories(dir);
  }
  const fs::path last = dir / "last.ckpt";
  const fs::path best = dir / "best.ckpt";
  const fs::path log = dir / "train_log.jsonl";

  if (options.resume && !dir.empty() && fs::exists(last)) {
    const auto meta = json::parse(trainer.restore(read_checkpoint(last.string())));
    source.restore(meta.at("sampler").get<std::string>());
    std::istringstream(meta.at("op_rng").get<std::string>()) >> op_rng();
    if (meta.contains("best_val_nll")) result.best_val_nll = meta["best_val_nll"].get<double>();
  } else {
    seed_op_rng(cfg.seed);
  }
  result.start_step = trainer.step();

  auto save = [&](const fs::path& path) {
    json meta;
    meta["sampler"] = source.state();
    meta["op_rng"] = rng_state(op_rng());
    if (result.best_val_nll) meta["best_val_nll"] = *result.best_val_nll;
    write_checkpoint(path.string(), trainer.checkpoint(meta.dump()));
  };
  auto run_eval = [&] {
    if (!options.evaluate) return;
    EvalReport r = options.evaluate(trainer.model(), trainer.step());
    r.step = trainer.step();
    if (r.split.empty()) r.split = "val";
    if (!dir.empty()) append_jsonl((dir / "eval_log.jsonl").string(), r.to_json());
    result.evals.push_back(r);
    if (!result.best_val_nll || r.nll < *result.best_val_nll) {
      result.best_val_nll = r.nll;
      if (!dir.empty()) save(best);
    }
  };
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  if (trainer.step() == 0 && !dir.empty()) save(last);

  std::uint64_t bytes_seen = 0;
  std::vector<Batch> micro(cfg.accumulation);
  while (trainer.step() < cfg.total_steps) {
    if (cfg.max_seconds > 0 && elapsed() >= cfg.max_seconds) {
      result.stopped_on_time = true;
      break;
    }
    if (options.max_steps > 0 && result.steps.size() >= options.max_steps) break;
    for (auto& b : micro) b = source.next_batch(cfg.micro_batch);
    const StepResult s = trainer.train_step(micro);
    bytes_seen += s.bytes;
    result.steps.push_back(s);
    if (options.on_step) options.on_step(s);
    if (!dir.empty() && (s.step == 1 || s.step % std::max<std::size_t>(cfg.log_every, 1) == 0 ||
                         s.step == cfg.total_steps)) {
      json line;
      line["step"] = s.step;
      line["loss"] = s.loss;
      line["bpb"] = s.loss / std::numbers::ln2;
      line["lr"] = s.lr;
      line["grad_norm"] = s.grad_norm;
      line["bytes_seen"] = bytes_seen;
      line["seconds"] = elapsed();
      append_jsonl(log.string(), line.dump());
    }
    if (cfg.eval_every > 0 && s.step % cfg.eval_every == 0) run_eval();
    if (!dir.empty() && options.checkpoint_every > 0 && s.step % options.checkpoint_every == 0) save(last);
  }
  if (result.evals.empty() || result.evals.back().step != trainer.step()) run_eval();
  if (!dir.empty()) save(last);
  result.final_step = trainer.step();
  result.seconds = elapsed();
  return result;
}

}  // namespace mblm
