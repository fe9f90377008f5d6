#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mblm/config.hpp"
#include "mblm/numerics/ops.hpp"
#include "mblm/numerics/tensor.hpp"

namespace mblm {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// normal(0, std) leaf of the given shape.
Tensor init_normal(Shape shape, std::mt19937_64& rng, float std = 0.02f);

// Causal, shape-preserving map over packed patch rows [K, P, D].
class StageModel {
 public:
  virtual ~StageModel() = default;
  virtual Tensor forward(const Tensor& x, bool training) const = 0;
  virtual std::size_t width() const = 0;
  const std::vector<NamedParam>& parameters() const { return params_; }
  std::vector<NamedParam>& parameters() { return params_; }
  std::vector<Tensor> parameter_tensors() const;

 protected:
  Tensor& add_param(std::string name, Tensor t);

 private:
  std::vector<NamedParam> params_;
};

// Pre-norm decoder: x + Attn(norm(x)), then x + FF(norm(x)), final norm.
class TransformerStage final : public StageModel {
 public:
  TransformerStage(const StageConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "");
  Tensor forward(const Tensor& x, bool training) const override;
  std::size_t width() const override { return width_; }

  struct Layer {
    Tensor attn_norm, wqkv, wo;
    Tensor ff_norm, w1, w2;
  };
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const Tensor& final_norm() const { return final_norm_; }

 private:
  Tensor attention(const Tensor& h, const Layer& layer, bool training) const;

  std::size_t width_;
  std::size_t heads_;
  bool rotary_;
  float rotary_base_;
  float dropout_;
  std::vector<Layer> layers_;
  Tensor final_norm_;
};

// Diagonal selective state space layer stack. Per layer:
//   u = silu(norm(x) W_in); delta = softplus(u W_dt + b_dt); B = u W_B; C = u W_C
//   abar = exp(delta * a), bbar x = delta * B * u
//   h_t = abar_t h_{t-1} + bbar_t u_t;  y = C h + d u;  x += y W_out
// with a = -exp(log_a) of shape [D, N].
class SelectiveSsmStage final : public StageModel {
 public:
  SelectiveSsmStage(const StageConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "");
  Tensor forward(const Tensor& x, bool training) const override;
  std::size_t width() const override { return width_; }
  ops::ScanAlgorithm scan_algorithm() const { return scan_; }
  void set_scan_algorithm(ops::ScanAlgorithm s) { scan_ = s; }

  struct Layer {
    Tensor norm, w_in, w_dt, b_dt, w_b, w_c, log_a, d, w_out;
  };
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const Tensor& final_norm() const { return final_norm_; }

 private:
  std::size_t width_;
  std::size_t state_;
  ops::ScanAlgorithm scan_;
  float dropout_;
  std::vector<Layer> layers_;
  Tensor final_norm_;
};

std::unique_ptr<StageModel> make_stage_model(const StageConfig& cfg, std::mt19937_64& rng,
                                             const std::string& prefix = "");

// ---------------------------------------------------------------------------
// Linear time-invariant reference.

struct Discretized {
  double a_bar;
  double b_bar;
};

// Zero-order hold for a diagonal entry: a_bar = exp(delta a),
// b_bar = (exp(delta a) - 1) / (delta a) * delta * b, with a series expansion
// of the ratio once |delta a| < 1e-6.
Discretized ssm_discretize_zoh(double a, double b, double delta);

// Discrete per-channel parameters, each [D, N] except d which is [D].
struct LtiSsm {
  std::size_t channels = 0;
  std::size_t state = 0;
  std::vector<float> a_bar, b_bar, c, d;

  // Continuous a, b, c ([D, N]), d and step sizes ([D]) discretized by ZOH.
  static LtiSsm from_continuous(std::size_t channels, std::size_t state,
                                const std::vector<float>& a, const std::vector<float>& b,
                                const std::vector<float>& c, const std::vector<float>& d,
                                const std::vector<float>& delta);
};

// y_t = sum_n c h_t + d x_t with h_t = a_bar h_{t-1} + b_bar x_t, over x[K, P, D].
Tensor lti_scan(const Tensor& x, const LtiSsm& ssm,
                ops::ScanAlgorithm algorithm = ops::ScanAlgorithm::sequential);
// kernel[d, j] = sum_n c[d, n] a_bar[d, n]^j b_bar[d, n], j < length.
std::vector<float> lti_kernel(const LtiSsm& ssm, std::size_t length);
// Causal convolution of x[K, P, D] with kernel[D, >= P] plus the d x skip term.
std::vector<float> lti_convolve(const Tensor& x, const std::vector<float>& kernel,
                                std::size_t kernel_length, const std::vector<float>& d);

}  // namespace mblm
