#include "mblm/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mblm {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

std::span<float> TensorImpl::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;
thread_local ActivationStats t_stats;
thread_local std::mt19937_64 t_rng{0x5eedULL};

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<float> data, bool rg) {
  if (numel_of(shape) != data.size()) {
    throw ShapeError("tensor: " + std::to_string(data.size()) + " values do not fill shape " +
                     shape_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = rg;
  return impl;
}

const detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& p) {
  if (!p) throw std::logic_error("tensor: use of undefined tensor");
  return *p;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(new_impl(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = numel_of(shape);
  return Tensor(new_impl(std::move(shape), std::vector<float>(n, value), requires_grad));
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(float value) { return from_vector({}, {value}); }

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::size(int axis) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return checked(impl_).data.size(); }

std::span<const float> Tensor::values() const { return checked(impl_).data; }

std::span<float> Tensor::values_mut() {
  checked(impl_);
  ++impl_->version;
  return impl_->data;
}

std::vector<float> Tensor::to_vector() const { return checked(impl_).data; }

float Tensor::item() const {
  const auto& impl = checked(impl_);
  if (impl.data.size() != 1) {
    throw ShapeError("tensor: item() on shape " + shape_string(impl.shape));
  }
  return impl.data[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& impl = checked(impl_);
  if (index.size() != impl.shape.size()) {
    throw ShapeError("tensor: index rank mismatch for " + shape_string(impl.shape));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl.shape[axis]) throw ShapeError("tensor: index out of range");
    flat = flat * impl.shape[axis] + i;
    ++axis;
  }
  return impl.data[flat];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  checked(impl_);
  if (impl_->grad_fn) throw std::logic_error("tensor: requires_grad can only be set on leaves");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return !checked(impl_).grad_fn; }

bool Tensor::has_grad() const { return checked(impl_).grad.size() == impl_->data.size(); }

std::vector<float> Tensor::grad() const {
  const auto& impl = checked(impl_);
  if (impl.grad.size() == impl.data.size()) return impl.grad;
  return std::vector<float>(impl.data.size(), 0.0f);
}

std::span<float> Tensor::grad_mut() {
  checked(impl_);
  return impl_->grad_buffer();
}

void Tensor::zero_grad() {
  checked(impl_);
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
  const auto& impl = checked(impl_);
  return Tensor(new_impl(impl.shape, impl.data, false));
}

std::uint64_t Tensor::version() const { return checked(impl_).version; }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(t_grad_enabled) {
  t_grad_enabled = enabled;
}
GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

ActivationStats& activation_stats() { return t_stats; }
void reset_activation_stats() { t_stats = ActivationStats{}; }

std::mt19937_64& op_rng() { return t_rng; }
void seed_op_rng(std::uint64_t seed) { t_rng.seed(seed); }

namespace detail {

namespace {

Tensor finish_result(const char* name, Shape shape, std::vector<float> data, bool record,
                     std::vector<std::shared_ptr<TensorImpl>> parents, BackwardFn fn) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const auto& p : parents) {
    for (float v : p->data) {
      if (!std::isfinite(v)) {
        inputs_finite = false;
        break;
      }
    }
  }
  if (inputs_finite) {
    for (float v : data) {
      if (!std::isfinite(v)) throw std::runtime_error(std::string(name) + ": non-finite output");
    }
  }
#endif
  auto impl = new_impl(std::move(shape), std::move(data), record);
  if (record) {
    auto node = std::make_shared<Node>();
    node->name = name;
    node->inputs = std::move(parents);
    node->backward = std::move(fn);
    impl->grad_fn = std::move(node);
  }
  if (t_stats.region_depth > 0) {
    t_stats.region_current += impl->data.size();
    t_stats.region_peak = std::max(t_stats.region_peak, t_stats.region_current);
  } else if (record) {
    t_stats.retained += impl->data.size();
  }
  return Tensor(std::move(impl));
}

}  // namespace

Tensor make_result(const char* name, Shape shape, std::vector<float> data,
                   const std::vector<Tensor>& inputs, BackwardFn fn) {
  bool record = false;
  if (t_grad_enabled) {
    for (const auto& t : inputs) record = record || t.requires_grad();
  }
  std::vector<std::shared_ptr<TensorImpl>> parents;
  if (record) {
    parents.reserve(inputs.size());
    for (const auto& t : inputs) parents.push_back(t.impl());
  }
  return finish_result(name, std::move(shape), std::move(data), record, std::move(parents),
                       std::move(fn));
}

Tensor make_result(const char* name, Shape shape, std::vector<float> data,
                   std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return make_result(name, std::move(shape), std::move(data), std::vector<Tensor>(inputs),
                     std::move(fn));
}

}  // namespace detail

namespace {

// Reverse topological order over nodes reachable from the roots. The list owns
// its entries so nodes stay alive until they are processed.
std::vector<std::shared_ptr<detail::TensorImpl>> topo_order(std::span<const Tensor> roots) {
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  struct Frame {
    std::shared_ptr<detail::TensorImpl> impl;
    std::size_t next;
  };
  std::vector<Frame> stack;
  for (const auto& root : roots) {
    const auto& r = root.impl();
    if (!r || seen.count(r.get())) continue;
    seen.insert(r.get());
    stack.push_back({r, 0});
    while (!stack.empty()) {
      auto& top = stack.back();
      const auto& fn = top.impl->grad_fn;
      if (fn && top.next < fn->inputs.size()) {
        const auto& child = fn->inputs[top.next++];
        if (child->requires_grad && !seen.count(child.get())) {
          seen.insert(child.get());
          stack.push_back({child, 0});
        }
        continue;
      }
      order.push_back(std::move(top.impl));
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

}  // namespace

void backward(std::span<const Tensor> roots, std::span<const std::vector<float>> seeds) {
  if (roots.size() != seeds.size()) throw std::invalid_argument("backward: roots/seeds mismatch");
  for (std::size_t i = 0; i < roots.size(); ++i) {
    if (!roots[i].requires_grad()) continue;
    if (seeds[i].size() != roots[i].numel()) throw ShapeError("backward: seed size mismatch");
    auto g = roots[i].impl()->grad_buffer();
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += seeds[i][j];
  }
  NoGradGuard no_grad;
  auto order = topo_order(roots);
  for (auto& impl : order) {
    if (!impl->grad_fn) {
      impl.reset();
      continue;
    }
    if (impl->grad.size() == impl->data.size()) impl->grad_fn->backward(*impl);
    // Interior gradients and saved state are released as soon as they are consumed.
    impl->grad_fn.reset();
    std::vector<float>().swap(impl->grad);
    impl.reset();
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  }
  if (!std::isfinite(loss.item())) throw std::runtime_error("backward: non-finite loss");
  if (!loss.requires_grad()) return;
  const Tensor roots[] = {loss};
  const std::vector<float> seeds[] = {std::vector<float>{1.0f}};
  backward(std::span<const Tensor>(roots), std::span<const std::vector<float>>(seeds));
}

}  // namespace mblm
