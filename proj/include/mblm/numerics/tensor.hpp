#pragma once

// Dense float32 tensors with a dynamic reverse-mode tape.
//
// Every op result that depends on a tensor with requires_grad (while grad mode
// is on) carries a Node that knows how to push its output gradient back into
// its inputs. backward() walks those nodes once in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mblm {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct TensorImpl;

struct Node {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives the op's output (values + accumulated gradient) and writes into
  // the gradient buffers of whichever inputs require it.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::uint64_t version = 0;
  std::shared_ptr<Node> grad_fn;

  // Lazily allocated gradient buffer of the same size as data.
  std::span<float> grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t size(int axis) const;
  std::size_t numel() const;

  std::span<const float> values() const;
  // Direct mutation is for leaves only (initialisation, optimiser updates).
  std::span<float> values_mut();
  std::vector<float> to_vector() const;
  float item() const;
  float at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  // Zeros when nothing has been accumulated yet.
  std::vector<float> grad() const;
  std::span<float> grad_mut();
  void zero_grad();

  // Same values, no history, no gradient requirement.
  Tensor detach() const;
  std::uint64_t version() const;
  const detail::TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Grad mode is thread-local; ops only record history while it is enabled.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Sets grad mode for a scope and restores the previous mode on exit.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

// Reverse pass from a scalar loss. Gradients accumulate into leaves.
void backward(const Tensor& loss);
// Reverse pass from several roots with explicit seed gradients.
void backward(std::span<const Tensor> roots, std::span<const std::vector<float>> seeds);

// Counts floats held by op outputs for the reverse pass. Ops executed inside a
// checkpoint region (forward or recompute) are tallied as region interior
// instead of retained; region_peak is the largest single-region total.
struct ActivationStats {
  std::size_t retained = 0;
  std::size_t region_current = 0;
  std::size_t region_peak = 0;
  int region_depth = 0;

  std::size_t peak() const { return retained + region_peak; }
};

ActivationStats& activation_stats();
void reset_activation_stats();

// Thread-local generator used by stochastic ops (dropout).
std::mt19937_64& op_rng();
void seed_op_rng(std::uint64_t seed);

namespace detail {

using BackwardFn = std::function<void(const TensorImpl& out)>;

// Wraps freshly computed values as an op result, recording history when any
// input requires grad and grad mode is on.
Tensor make_result(const char* name, Shape shape, std::vector<float> data,
                   std::initializer_list<Tensor> inputs, BackwardFn fn);
Tensor make_result(const char* name, Shape shape, std::vector<float> data,
                   const std::vector<Tensor>& inputs, BackwardFn fn);

}  // namespace detail

}  // namespace mblm
