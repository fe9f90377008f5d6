#include "mblm/stage_models.hpp"

#include <cmath>
#include <stdexcept>

namespace mblm {

using namespace ops;

Tensor init_normal(Shape shape, std::mt19937_64& rng, float std) {
  std::normal_distribution<float> dist(0.0f, std);
  std::vector<float> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

std::vector<Tensor> StageModel::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

Tensor& StageModel::add_param(std::string name, Tensor t) {
  params_.push_back({std::move(name), std::move(t)});
  return params_.back().tensor;
}

// ---------------------------------------------------------------------------

TransformerStage::TransformerStage(const StageConfig& cfg, std::mt19937_64& rng,
                                   const std::string& prefix)
    : width_(cfg.width),
      heads_(cfg.heads),
      rotary_(cfg.pos_embedding == PosEmbedding::rotary),
      rotary_base_(cfg.rotary_base),
      dropout_(cfg.dropout) {
  if (heads_ == 0 || width_ % heads_ != 0) {
    throw std::invalid_argument("transformer: width " + std::to_string(width_) +
                                " not divisible by " + std::to_string(heads_) + " heads");
  }
  if (rotary_ && (width_ / heads_) % 2 != 0) {
    throw std::invalid_argument("transformer: rotary positions need an even head width");
  }
  const std::size_t d = width_;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    Layer layer;
    layer.attn_norm = add_param(p + "attn_norm", Tensor::full({d}, 1.0f, true));
    layer.wqkv = add_param(p + "wqkv", init_normal({d, 3 * d}, rng));
    layer.wo = add_param(p + "wo", init_normal({d, d}, rng));
    layer.ff_norm = add_param(p + "ff_norm", Tensor::full({d}, 1.0f, true));
    layer.w1 = add_param(p + "w1", init_normal({d, 2 * d}, rng));
    layer.w2 = add_param(p + "w2", init_normal({2 * d, d}, rng));
    layers_.push_back(layer);
  }
  final_norm_ = add_param(prefix + "final_norm", Tensor::full({d}, 1.0f, true));
}

Tensor TransformerStage::attention(const Tensor& h, const Layer& layer, bool training) const {
  const std::size_t k = h.size(0);
  const std::size_t p = h.size(1);
  const std::size_t d = width_;
  const std::size_t dh = d / heads_;
  Tensor qkv = matmul(h, layer.wqkv);
  auto split = [&](std::size_t idx) {
    Tensor t = slice(qkv, 2, idx * d, (idx + 1) * d);
    t = transpose(reshape(t, {k, p, heads_, dh}), 1, 2);
    return reshape(t, {k * heads_, p, dh});
  };
  Tensor q = split(0);
  Tensor kk = split(1);
  Tensor v = split(2);
  if (rotary_) {
    q = rotary(q, rotary_base_);
    kk = rotary(kk, rotary_base_);
  }
  Tensor scores = scale(batched_matmul(q, kk, true), 1.0f / std::sqrt(static_cast<float>(dh)));
  Tensor probs = dropout(softmax_causal_masked(scores), dropout_, training);
  Tensor o = batched_matmul(probs, v);
  o = reshape(transpose(reshape(o, {k, heads_, p, dh}), 1, 2), {k, p, d});
  return matmul(o, layer.wo);
}

Tensor TransformerStage::forward(const Tensor& x, bool training) const {
  if (x.rank() != 3 || x.size(2) != width_) {
    throw ShapeError("transformer: expected [K, P, " + std::to_string(width_) + "], got " +
                     shape_string(x.shape()));
  }
  Tensor h = x;
  for (const auto& layer : layers_) {
    h = add(h, dropout(attention(rms_norm(h, layer.attn_norm), layer, training), dropout_, training));
    Tensor ff = matmul(silu(matmul(rms_norm(h, layer.ff_norm), layer.w1)), layer.w2);
    h = add(h, dropout(ff, dropout_, training));
  }
  return rms_norm(h, final_norm_);
}

// ---------------------------------------------------------------------------

namespace {

float inverse_softplus(float y) { return y + std::log(-std::expm1(-y)); }

}  // namespace

SelectiveSsmStage::SelectiveSsmStage(const StageConfig& cfg, std::mt19937_64& rng,
                                     const std::string& prefix)
    : width_(cfg.width), state_(cfg.state_size), scan_(cfg.scan), dropout_(cfg.dropout) {
  const std::size_t d = width_;
  const std::size_t n = state_;
  std::uniform_real_distribution<float> log_dt(std::log(1e-3f), std::log(1e-1f));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    Layer layer;
    layer.norm = add_param(p + "norm", Tensor::full({d}, 1.0f, true));
    layer.w_in = add_param(p + "w_in", init_normal({d, d}, rng));
    layer.w_dt = add_param(p + "w_dt", init_normal({d, d}, rng));
    std::vector<float> bias(d);
    for (auto& b : bias) b = inverse_softplus(std::exp(log_dt(rng)));
    layer.b_dt = add_param(p + "b_dt", Tensor::from_vector({d}, std::move(bias), true));
    layer.w_b = add_param(p + "w_b", init_normal({d, n}, rng));
    layer.w_c = add_param(p + "w_c", init_normal({d, n}, rng));
    std::vector<float> log_a(d * n);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < n; ++j) log_a[i * n + j] = std::log(static_cast<float>(j + 1));
    }
    layer.log_a = add_param(p + "log_a", Tensor::from_vector({d, n}, std::move(log_a), true));
    layer.d = add_param(p + "d", Tensor::full({d}, 1.0f, true));
    layer.w_out = add_param(p + "w_out", init_normal({d, d}, rng));
    layers_.push_back(layer);
  }
  final_norm_ = add_param(prefix + "final_norm", Tensor::full({d}, 1.0f, true));
}

Tensor SelectiveSsmStage::forward(const Tensor& x, bool training) const {
  if (x.rank() != 3 || x.size(2) != width_) {
    throw ShapeError("selective_ssm: expected [K, P, " + std::to_string(width_) + "], got " +
                     shape_string(x.shape()));
  }
  const std::size_t k = x.size(0);
  const std::size_t p = x.size(1);
  const std::size_t d = width_;
  const std::size_t n = state_;
  Tensor h = x;
  for (const auto& layer : layers_) {
    Tensor u = silu(matmul(rms_norm(h, layer.norm), layer.w_in));
    Tensor dt = softplus(add(matmul(u, layer.w_dt), layer.b_dt));
    Tensor bm = matmul(u, layer.w_b);
    Tensor cm = matmul(u, layer.w_c);
    Tensor a = scale(exp(layer.log_a), -1.0f);
    Tensor abar = exp(mul(repeat(reshape(dt, {k, p, d, 1}), 3, n), a));
    Tensor bx = outer(mul(dt, u), bm);
    Tensor hs = cumulative_scan(reshape(abar, {k, p, d * n}), reshape(bx, {k, p, d * n}), scan_);
    Tensor y = add(contract(reshape(hs, {k, p, d, n}), cm), mul(u, layer.d));
    h = add(h, dropout(matmul(y, layer.w_out), dropout_, training));
  }
  return rms_norm(h, final_norm_);
}

std::unique_ptr<StageModel> make_stage_model(const StageConfig& cfg, std::mt19937_64& rng,
                                             const std::string& prefix) {
  if (cfg.kind == StageKind::transformer) return std::make_unique<TransformerStage>(cfg, rng, prefix);
  return std::make_unique<SelectiveSsmStage>(cfg, rng, prefix);
}

// ---------------------------------------------------------------------------

Discretized ssm_discretize_zoh(double a, double b, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("zoh: step size must be positive");
  const double z = delta * a;
  // (exp(z) - 1) / z
  const double ratio = std::abs(z) < 1e-6 ? 1.0 + z / 2.0 + z * z / 6.0 : std::expm1(z) / z;
  return {std::exp(z), ratio * delta * b};
}

LtiSsm LtiSsm::from_continuous(std::size_t channels, std::size_t state,
                               const std::vector<float>& a, const std::vector<float>& b,
                               const std::vector<float>& c, const std::vector<float>& d,
                               const std::vector<float>& delta) {
  const std::size_t m = channels * state;
  if (a.size() != m || b.size() != m || c.size() != m || d.size() != channels ||
      delta.size() != channels) {
    throw std::invalid_argument("lti: parameter sizes do not match channels x state");
  }
  LtiSsm s;
  s.channels = channels;
  s.state = state;
  s.a_bar.resize(m);
  s.b_bar.resize(m);
  s.c = c;
  s.d = d;
  for (std::size_t i = 0; i < channels; ++i) {
    for (std::size_t j = 0; j < state; ++j) {
      auto z = ssm_discretize_zoh(a[i * state + j], b[i * state + j], delta[i]);
      s.a_bar[i * state + j] = static_cast<float>(z.a_bar);
      s.b_bar[i * state + j] = static_cast<float>(z.b_bar);
    }
  }
  return s;
}

Tensor lti_scan(const Tensor& x, const LtiSsm& ssm, ScanAlgorithm algorithm) {
  if (x.rank() != 3 || x.size(2) != ssm.channels) {
    throw ShapeError("lti_scan: expected [K, P, " + std::to_string(ssm.channels) + "], got " +
                     shape_string(x.shape()));
  }
  const std::size_t k = x.size(0), p = x.size(1), d = ssm.channels, n = ssm.state;
  const auto xv = x.values();
  std::vector<float> av(k * p * d * n), bv(k * p * d * n);
  for (std::size_t r = 0; r < k * p; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        av[(r * d + i) * n + j] = ssm.a_bar[i * n + j];
        bv[(r * d + i) * n + j] = ssm.b_bar[i * n + j] * xv[r * d + i];
      }
    }
  }
  NoGradGuard no_grad;
  Tensor h = cumulative_scan(Tensor::from_vector({k, p, d * n}, std::move(av)),
                             Tensor::from_vector({k, p, d * n}, std::move(bv)), algorithm);
  const auto hv = h.values();
  std::vector<float> y(k * p * d);
  for (std::size_t r = 0; r < k * p; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      float acc = ssm.d[i] * xv[r * d + i];
      for (std::size_t j = 0; j < n; ++j) acc += ssm.c[i * n + j] * hv[(r * d + i) * n + j];
      y[r * d + i] = acc;
    }
  }
  return Tensor::from_vector({k, p, d}, std::move(y));
}

std::vector<float> lti_kernel(const LtiSsm& ssm, std::size_t length) {
  const std::size_t d = ssm.channels, n = ssm.state;
  std::vector<float> kernel(d * length, 0.0f);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double power = 1.0;
      const double cb = static_cast<double>(ssm.c[i * n + j]) * ssm.b_bar[i * n + j];
      for (std::size_t t = 0; t < length; ++t) {
        kernel[i * length + t] += static_cast<float>(cb * power);
        power *= ssm.a_bar[i * n + j];
      }
    }
  }
  return kernel;
}

std::vector<float> lti_convolve(const Tensor& x, const std::vector<float>& kernel,
                                std::size_t kernel_length, const std::vector<float>& d) {
  if (x.rank() != 3) throw ShapeError("lti_convolve: expected [K, P, D]");
  const std::size_t k = x.size(0), p = x.size(1), ch = x.size(2);
  if (kernel_length < p || kernel.size() != ch * kernel_length || d.size() != ch) {
    throw std::invalid_argument("lti_convolve: kernel shorter than sequence or channel mismatch");
  }
  const auto xv = x.values();
  std::vector<float> y(k * p * ch);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t i = 0; i < ch; ++i) {
      for (std::size_t t = 0; t < p; ++t) {
        double acc = static_cast<double>(d[i]) * xv[(r * p + t) * ch + i];
        for (std::size_t j = 0; j <= t; ++j) {
          acc += static_cast<double>(kernel[i * kernel_length + j]) * xv[(r * p + t - j) * ch + i];
        }
        y[(r * p + t) * ch + i] = static_cast<float>(acc);
      }
    }
  }
  return y;
}

}  // namespace mblm
