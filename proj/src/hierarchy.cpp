#include "mblm/hierarchy.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "mblm/numerics/checkpoint.hpp"
#include "mblm/numerics/ops.hpp"

namespace mblm {

using namespace ops;

std::vector<std::pair<std::size_t, std::size_t>> chunk_bounds(std::size_t k, std::size_t c) {
  c = std::clamp<std::size_t>(c, 1, std::max<std::size_t>(k, 1));
  const std::size_t base = k / c;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t j = 0; j < c; ++j) {
    const std::size_t begin = j * base;
    out.emplace_back(begin, j + 1 == c ? k : begin + base);
  }
  return out;
}

Mblm::Mblm(const ValidatedConfig& config, std::uint64_t seed) : config_(config) {
  std::mt19937_64 rng(seed);
  const std::size_t n = config_.num_stages();
  for (std::size_t i = 0; i < n; ++i) {
    params_.push_back(init_stage_params(config_, i, rng));
    models_.push_back(make_stage_model(config_.stage(i), rng, "stage" + std::to_string(i) + ".model."));
  }
  const std::size_t d = config_.stage(n - 1).width;
  head_w_ = init_normal({d, kVocabSize}, rng);
  head_b_ = Tensor::zeros({kVocabSize}, true);
}

std::vector<NamedParam> Mblm::named_parameters() const {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string s = "stage" + std::to_string(i) + ".";
    const StageParams& p = params_[i];
    out.push_back({s + "embedding", p.embedding});
    if (p.position.defined()) out.push_back({s + "position", p.position});
    if (p.patch_proj.defined()) out.push_back({s + "patch_proj", p.patch_proj});
    out.push_back({s + "start_token", p.start_token});
    if (p.global_proj.defined()) out.push_back({s + "global_proj", p.global_proj});
    for (const auto& np : models_[i]->parameters()) out.push_back(np);
  }
  out.push_back({"head.weight", head_w_});
  out.push_back({"head.bias", head_b_});
  return out;
}

std::vector<Tensor> Mblm::parameters() const {
  std::vector<Tensor> out;
  for (auto& np : named_parameters()) out.push_back(np.tensor);
  return out;
}

std::size_t Mblm::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void Mblm::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

Tensor Mblm::run_stage(std::size_t i, const Tensor& x, bool training, ForwardTrace* trace) const {
  const StageModel& model = *models_[i];
  const auto bounds = chunk_bounds(x.size(0), config_.stage(i).chunk_count);
  Tensor out;
  if (bounds.size() == 1) {
    out = model.forward(x, training);
  } else {
    const auto weights = model.parameter_tensors();
    const RegionFn f = [&model, training](const std::vector<Tensor>& in) {
      return model.forward(in[0], training);
    };
    std::vector<Tensor> parts;
    for (const auto& [b, e] : bounds) parts.push_back(checkpoint_region(f, {slice(x, 0, b, e)}, weights));
    out = concat(parts, 0);
  }
  if (trace) trace->stages.push_back({x.shape(), out.shape(), bounds});
  return out;
}

Tensor Mblm::head(const Tensor& local_out) const {
  const std::size_t k = local_out.size(0);
  const std::size_t p = local_out.size(1);
  Tensor z = add(matmul(reshape(local_out, {k * p, local_out.size(2)}), head_w_), head_b_);
  return reshape(z, {k, p, kVocabSize});
}

Tensor Mblm::forward(std::span<const std::int32_t> ids, std::size_t batch, bool training,
                     ForwardTrace* trace) const {
  if (batch == 0 || ids.empty() || ids.size() % batch != 0) {
    throw ShapeError("forward: " + std::to_string(ids.size()) + " ids do not form " +
                     std::to_string(batch) + " rows");
  }
  const std::size_t length = ids.size() / batch;
  const std::size_t total = padded_length(config_, length);
  std::vector<std::int32_t> padded(batch * total, kPadId);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(ids.begin() + b * length, length, padded.begin() + b * total);
  }
  reset_activation_stats();
  if (trace) {
    *trace = ForwardTrace{};
    trace->padded_length = total;
  }
  Tensor prev;
  for (std::size_t i = 0; i < config_.num_stages(); ++i) {
    Tensor emb = embed_stage(config_, i, params_[i], padded, batch);
    Tensor x = project_patches(config_, i, params_[i], reshape_to_patches(config_, emb, Tensor{}, length));
    if (i > 0) x = inject_global_output(prev, x, params_[i - 1].global_proj);
    prev = run_stage(i, x, training, trace);
  }
  Tensor logits = unpack_logits(head(prev), batch, length);
  if (trace) {
    trace->stored_activations = activation_stats().retained;
    trace->peak_activations = activation_stats().peak();
  }
  return logits;
}

std::size_t count_parameters(const ValidatedConfig& config) {
  const std::size_t n = config.num_stages();
  const std::size_t d_last = config.stage(n - 1).width;
  std::size_t total = d_last * kVocabSize + kVocabSize;
  for (std::size_t i = 0; i < n; ++i) {
    const StageConfig& s = config.stage(i);
    const std::size_t d = s.width;
    total += kVocabSize * d_last + d;
    if (s.pos_embedding == PosEmbedding::learned_absolute) total += s.patch_size * d_last;
    if (i + 1 < n) total += config.inner_span(i) * d_last * d + d * config.stage(i + 1).width;
    if (s.kind == StageKind::transformer) {
      total += s.layers * (8 * d * d + 2 * d) + d;
    } else {
      total += s.layers * (3 * d * d + 3 * d * s.state_size + 3 * d) + d;
    }
  }
  return total;
}

Tensor lm_loss(const Tensor& logits, std::span<const std::int32_t> targets,
               std::span<const std::uint8_t> mask) {
  if (logits.rank() != 3) throw ShapeError("lm_loss: expected [B, L, V] logits");
  const std::size_t rows = logits.size(0) * logits.size(1);
  return cross_entropy(reshape(logits, {rows, logits.size(2)}), targets, mask);
}

// ---------------------------------------------------------------------------

SamplingPolicy SamplingPolicy::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto colon = text.find(':', start);
    parts.push_back(text.substr(start, colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw std::invalid_argument("policy: bad number '" + s + "'");
    return v;
  };
  SamplingPolicy p;
  if (parts[0] == "greedy" && parts.size() == 1) {
    p = greedy();
  } else if (parts[0] == "temperature" && parts.size() == 2) {
    p = with_temperature(number(parts[1]));
  } else if (parts[0] == "top_k" && (parts.size() == 2 || parts.size() == 3)) {
    const double k = number(parts[1]);
    if (k < 1 || k != std::floor(k)) throw std::invalid_argument("policy: top_k needs a positive integer");
    p = with_top_k(static_cast<std::size_t>(k), parts.size() == 3 ? number(parts[2]) : 1.0);
  } else {
    throw std::invalid_argument("policy: unknown policy '" + text + "'");
  }
  p.check();
  return p;
}

void SamplingPolicy::check() const {
  if (kind != Kind::greedy && !(temperature > 0.0)) {
    throw std::invalid_argument("policy: temperature must be > 0");
  }
  if (kind == Kind::top_k && top_k == 0) throw std::invalid_argument("policy: top_k must be >= 1");
}

std::int32_t sample_logits(std::span<const float> logits, const SamplingPolicy& policy,
                           std::mt19937_64& rng) {
  if (logits.empty()) throw std::invalid_argument("sample: empty logits row");
  policy.check();
  const auto argmax = static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (policy.kind == SamplingPolicy::Kind::greedy) return argmax;

  std::vector<std::int32_t> candidates(logits.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i] = static_cast<std::int32_t>(i);
  if (policy.kind == SamplingPolicy::Kind::top_k && policy.top_k < candidates.size()) {
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::int32_t a, std::int32_t b) { return logits[a] > logits[b]; });
    candidates.resize(policy.top_k);
  }
  const double top = logits[argmax];
  std::vector<double> w(candidates.size());
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    w[i] = std::exp((static_cast<double>(logits[candidates[i]]) - top) / policy.temperature);
    total += w[i];
  }
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    acc += w[i];
    if (u < acc && w[i] > 0.0) return candidates[i];
  }
  for (std::size_t i = candidates.size(); i-- > 0;) {
    if (w[i] > 0.0) return candidates[i];
  }
  return argmax;
}

std::vector<std::uint8_t> generate(const Mblm& model, std::span<const std::uint8_t> prompt,
                                   std::size_t n, const SamplingPolicy& policy,
                                   std::uint64_t seed) {
  policy.check();
  std::vector<std::uint8_t> out;
  if (n == 0) return out;
  const auto& cfg = model.config();
  const std::size_t window = cfg.config().allow_p1_extension ? std::numeric_limits<std::size_t>::max()
                                                             : cfg.max_length() - 1;
  std::vector<std::uint8_t> history(prompt.begin(), prompt.end());
  std::mt19937_64 rng(seed);
  NoGradGuard no_grad;
  std::vector<std::int32_t> ids;
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t begin = history.size() > window ? history.size() - window : 0;
    ids.assign(history.begin() + static_cast<std::ptrdiff_t>(begin), history.end());
    const std::size_t row = ids.size();
    ids.push_back(kPadId);  // placeholder; row `row` only sees ids[< row]
    Tensor logits = model.forward(ids, 1);
    // Restrict to real byte values; the pad id is never emitted.
    const auto values = logits.values().subspan(row * kVocabSize, kVocabSize - 1);
    const auto next = static_cast<std::uint8_t>(sample_logits(values, policy, rng));
    out.push_back(next);
    history.push_back(next);
  }
  return out;
}

std::vector<BenchRecord> bench_generation(const Mblm& model, std::span<const std::size_t> lengths,
                                          std::size_t bytes_per_length, std::uint64_t seed) {
  std::vector<BenchRecord> out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> printable(32, 126);
  for (const std::size_t length : lengths) {
    model.config().check_length(length);
    std::vector<std::uint8_t> prompt(length - 1);
    for (auto& b : prompt) b = static_cast<std::uint8_t>(printable(rng));
    const auto t0 = std::chrono::steady_clock::now();
    generate(model, prompt, bytes_per_length, SamplingPolicy::greedy(), seed);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back({length, bytes_per_length, secs / static_cast<double>(std::max<std::size_t>(bytes_per_length, 1))});
  }
  return out;
}

double growth_exponent(std::span<const BenchRecord> records) {
  if (records.size() < 2) throw std::invalid_argument("growth_exponent: need at least two lengths");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : records) {
    const double x = std::log(static_cast<double>(r.context_length));
    const double y = std::log(r.seconds_per_byte);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(records.size());
  const double den = n * sxx - sx * sx;
  if (den == 0.0) throw std::invalid_argument("growth_exponent: lengths must differ");
  return (n * sxy - sx * sy) / den;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'B', 'L', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void put_str(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint: truncated file");
  return v;
}
std::string get_str(std::istream& is, std::uint64_t limit = 1ull << 32) {
  const auto n = get_u64(is);
  if (n > limit) throw CheckpointError("checkpoint: corrupt string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint: truncated file");
  return s;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot write " + path);
    os.write(kMagic, sizeof kMagic);
    os.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
    put_str(os, checkpoint.config_toml);
    put_str(os, checkpoint.metadata);
    put_u64(os, checkpoint.tensors.size());
    for (const auto& [name, t] : checkpoint.tensors) {
      put_str(os, name);
      put_u64(os, t.rank());
      for (auto d : t.shape()) put_u64(os, d);
      const auto v = t.values();
      os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
    }
    if (!os) throw CheckpointError("checkpoint: write failed for " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("checkpoint: cannot replace " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path);
  char magic[8];
  std::uint32_t version = 0;
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError("checkpoint: " + path + " is not a checkpoint file");
  }
  if (!is.read(reinterpret_cast<char*>(&version), sizeof version) || version != kVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_toml = get_str(is);
  c.metadata = get_str(is);
  const auto count = get_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = get_str(is, 4096);
    const auto rank = get_u64(is);
    if (rank > 8) throw CheckpointError("checkpoint: corrupt rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = get_u64(is);
    std::vector<float> data(numel_of(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
      throw CheckpointError("checkpoint: truncated tensor " + name);
    }
    c.tensors.emplace_back(std::move(name), Tensor::from_vector(std::move(shape), std::move(data)));
  }
  return c;
}

Checkpoint model_checkpoint(const Mblm& model) {
  Checkpoint c;
  c.config_toml = to_toml(model.config().config());
  for (const auto& np : model.named_parameters()) {
    c.tensors.emplace_back(np.name, Tensor::from_vector(np.tensor.shape(), np.tensor.to_vector()));
  }
  return c;
}

void load_parameters(Mblm& model, const Checkpoint& checkpoint) {
  RunConfig stored;
  try {
    stored = parse_config(checkpoint.config_toml);
  } catch (const std::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint: unreadable config: ") + e.what());
  }
  if (config_hash(stored.model) != config_hash(model.config().config())) {
    throw CheckpointMismatch("checkpoint: model config does not match the checkpoint");
  }
  for (auto& np : model.named_parameters()) {
    const Tensor* t = checkpoint.find(np.name);
    if (!t) throw CheckpointMismatch("checkpoint: missing parameter " + np.name);
    if (t->shape() != np.tensor.shape()) {
      throw CheckpointMismatch("checkpoint: parameter " + np.name + " has shape " +
                               shape_string(t->shape()) + ", expected " + shape_string(np.tensor.shape()));
    }
    auto dst = np.tensor.values_mut();
    std::copy(t->values().begin(), t->values().end(), dst.begin());
  }
}

}  // namespace mblm
