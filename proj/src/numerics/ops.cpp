#include "mblm/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "mblm/numerics/kernels.hpp"

namespace mblm::ops {

namespace {

using detail::make_result;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

std::size_t resolve_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Sizes of the axes before / after `axis`.
std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, std::size_t axis) {
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                   shape_string(b));
}

// The second operand must equal the trailing dims of the first.
std::size_t trailing_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) mismatch(op, a, b);
  return numel_of(b);
}

void add_into(std::span<float> dst, std::span<const float> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class F>
Tensor unary(const char* name, const Tensor& x, F&& f, detail::BackwardFn fn) {
  const auto in = x.values();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(name, x.shape(), std::move(out), {x}, std::move(fn));
}

float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t inner = trailing_broadcast("add", a.shape(), b.shape());
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % inner];
  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result("add", a.shape(), std::move(out), {a, b}, [pa, pb, inner](const TensorImpl& o) {
    if (pa->requires_grad) add_into(pa->grad_buffer(), o.grad);
    if (pb->requires_grad) {
      auto gb = pb->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % inner] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t inner = trailing_broadcast("sub", a.shape(), b.shape());
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % inner];
  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result("sub", a.shape(), std::move(out), {a, b}, [pa, pb, inner](const TensorImpl& o) {
    if (pa->requires_grad) add_into(pa->grad_buffer(), o.grad);
    if (pb->requires_grad) {
      auto gb = pb->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % inner] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t inner = trailing_broadcast("mul", a.shape(), b.shape());
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % inner];
  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result("mul", a.shape(), std::move(out), {a, b}, [pa, pb, inner](const TensorImpl& o) {
    if (pa->requires_grad) {
      auto ga = pa->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * pb->data[i % inner];
    }
    if (pb->requires_grad) {
      auto gb = pb->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % inner] += o.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  ImplPtr pa = a.impl();
  return unary(
      "scale", a, [factor](float v) { return v * factor; },
      [pa, factor](const TensorImpl& o) {
        auto g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
      });
}

Tensor exp(const Tensor& x) {
  ImplPtr px = x.impl();
  return unary(
      "exp", x, [](float v) { return std::exp(v); },
      [px](const TensorImpl& o) {
        auto g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.data[i];
      });
}

Tensor log(const Tensor& x) {
  ImplPtr px = x.impl();
  return unary(
      "log", x, [](float v) { return std::log(v); },
      [px](const TensorImpl& o) {
        auto g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / px->data[i];
      });
}

Tensor softplus(const Tensor& x) {
  ImplPtr px = x.impl();
  return unary(
      "softplus", x, [](float v) { return v > 20.0f ? v : std::log1p(std::exp(v)); },
      [px](const TensorImpl& o) {
        auto g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * sigmoid(px->data[i]);
      });
}

Tensor silu(const Tensor& x) {
  ImplPtr px = x.impl();
  return unary(
      "silu", x, [](float v) { return v * sigmoid(v); },
      [px](const TensorImpl& o) {
        auto g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float v = px->data[i];
          const float s = sigmoid(v);
          g[i] += o.grad[i] * s * (1.0f + v * (1.0f - s));
        }
      });
}

Tensor matmul(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.size(-1) != w.size(0)) {
    mismatch("matmul", x.shape(), w.shape());
  }
  const std::size_t k = w.size(0);
  const std::size_t n = w.size(1);
  const std::size_t m = x.numel() / k;
  std::vector<float> out(m * n);
  kernels::gemm_nn(x.values().data(), w.values().data(), out.data(), m, k, n);
  Shape shape = x.shape();
  shape.back() = n;
  ImplPtr px = x.impl(), pw = w.impl();
  return make_result("matmul", std::move(shape), std::move(out), {x, w},
                     [px, pw, m, k, n](const TensorImpl& o) {
                       if (px->requires_grad) {
                         std::vector<float> gx(m * k);
                         kernels::gemm_nt(o.grad.data(), pw->data.data(), gx.data(), m, n, k);
                         add_into(px->grad_buffer(), gx);
                       }
                       if (pw->requires_grad) {
                         kernels::gemm_tn_acc(px->data.data(), o.grad.data(),
                                              pw->grad_buffer().data(), m, k, n);
                       }
                     });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.size(0) != b.size(0)) {
    mismatch("batched_matmul", a.shape(), b.shape());
  }
  const std::size_t batch = a.size(0);
  const std::size_t m = a.size(1);
  const std::size_t k = a.size(2);
  const std::size_t n = transpose_b ? b.size(1) : b.size(2);
  if ((transpose_b ? b.size(2) : b.size(1)) != k) mismatch("batched_matmul", a.shape(), b.shape());
  std::vector<float> out(batch * m * n);
  const float* ad = a.values().data();
  const float* bd = b.values().data();
  for (std::size_t i = 0; i < batch; ++i) {
    if (transpose_b) {
      kernels::gemm_nt(ad + i * m * k, bd + i * n * k, out.data() + i * m * n, m, k, n);
    } else {
      kernels::gemm_nn(ad + i * m * k, bd + i * k * n, out.data() + i * m * n, m, k, n);
    }
  }
  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result(
      "batched_matmul", {batch, m, n}, std::move(out), {a, b},
      [pa, pb, batch, m, k, n, transpose_b](const TensorImpl& o) {
        const float* g = o.grad.data();
        if (pa->requires_grad) {
          auto ga = pa->grad_buffer();
          std::vector<float> tmp(m * k);
          for (std::size_t i = 0; i < batch; ++i) {
            const float* bb = pb->data.data() + i * k * n;
            if (transpose_b) {
              kernels::gemm_nn(g + i * m * n, bb, tmp.data(), m, n, k);
            } else {
              kernels::gemm_nt(g + i * m * n, bb, tmp.data(), m, n, k);
            }
            add_into(ga.subspan(i * m * k, m * k), tmp);
          }
        }
        if (pb->requires_grad) {
          float* gb = pb->grad_buffer().data();
          for (std::size_t i = 0; i < batch; ++i) {
            const float* aa = pa->data.data() + i * m * k;
            if (transpose_b) {
              kernels::gemm_tn_acc(g + i * m * n, aa, gb + i * n * k, m, n, k);
            } else {
              kernels::gemm_tn_acc(aa, g + i * m * n, gb + i * k * n, m, k, n);
            }
          }
        }
      });
}

Tensor softmax_causal_masked(const Tensor& scores) {
  if (scores.rank() < 2 || scores.size(-1) != scores.size(-2)) {
    throw ShapeError("softmax_causal_masked: expected [..., P, P], got " +
                     shape_string(scores.shape()));
  }
  const std::size_t p = scores.size(-1);
  const std::size_t mats = scores.numel() / (p * p);
  const auto in = scores.values();
  std::vector<float> out(in.size(), 0.0f);
  for (std::size_t b = 0; b < mats; ++b) {
    for (std::size_t i = 0; i < p; ++i) {
      const float* row = in.data() + (b * p + i) * p;
      float* dst = out.data() + (b * p + i) * p;
      float mx = row[0];
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
      float total = 0.0f;
      for (std::size_t j = 0; j <= i; ++j) {
        dst[j] = std::exp(row[j] - mx);
        total += dst[j];
      }
      const float inv = 1.0f / total;
      for (std::size_t j = 0; j <= i; ++j) dst[j] *= inv;
    }
  }
  ImplPtr px = scores.impl();
  return make_result("softmax_causal_masked", scores.shape(), std::move(out), {scores},
                     [px, p, mats](const TensorImpl& o) {
                       auto g = px->grad_buffer();
                       for (std::size_t r = 0; r < mats * p; ++r) {
                         const std::size_t i = r % p;
                         const float* y = o.data.data() + r * p;
                         const float* go = o.grad.data() + r * p;
                         float dot = 0.0f;
                         for (std::size_t j = 0; j <= i; ++j) dot += y[j] * go[j];
                         for (std::size_t j = 0; j <= i; ++j) g[r * p + j] += y[j] * (go[j] - dot);
                       }
                     });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  if (gain.rank() != 1 || x.rank() < 1 || x.size(-1) != gain.size(0)) {
    mismatch("rms_norm", x.shape(), gain.shape());
  }
  const std::size_t d = gain.size(0);
  const std::size_t rows = x.numel() / d;
  const auto in = x.values();
  const auto gv = gain.values();
  std::vector<float> out(in.size());
  std::vector<float> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = in.data() + r * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(row[j]) * row[j];
    inv[r] = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(d) + eps));
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = row[j] * inv[r] * gv[j];
  }
  ImplPtr px = x.impl(), pg = gain.impl();
  return make_result("rms_norm", x.shape(), std::move(out), {x, gain},
                     [px, pg, inv = std::move(inv), d, rows](const TensorImpl& o) {
                       const float* xin = px->data.data();
                       const float* gv2 = pg->data.data();
                       if (px->requires_grad) {
                         auto gx = px->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           const float* go = o.grad.data() + r * d;
                           const float* xr = xin + r * d;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < d; ++j) dot += go[j] * gv2[j] * xr[j];
                           const float ri = inv[r];
                           const float coef =
                               static_cast<float>(dot) * ri * ri * ri / static_cast<float>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             gx[r * d + j] += ri * go[j] * gv2[j] - xr[j] * coef;
                           }
                         }
                       }
                       if (pg->requires_grad) {
                         auto gg = pg->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             gg[j] += o.grad[r * d + j] * xin[r * d + j] * inv[r];
                           }
                         }
                       }
                     });
}

Tensor embedding_gather(const Tensor& table, std::span<const std::int32_t> ids,
                        const Shape& lead_shape) {
  if (table.rank() != 2) throw ShapeError("embedding_gather: table must be [V, D]");
  if (numel_of(lead_shape) != ids.size()) {
    throw ShapeError("embedding_gather: " + std::to_string(ids.size()) + " ids for shape " +
                     shape_string(lead_shape));
  }
  const std::size_t v = table.size(0);
  const std::size_t d = table.size(1);
  const auto tv = table.values();
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) +
                              " out of range for vocabulary " + std::to_string(v));
    }
    std::memcpy(out.data() + i * d, tv.data() + static_cast<std::size_t>(ids[i]) * d,
                d * sizeof(float));
  }
  Shape shape = lead_shape;
  shape.push_back(d);
  ImplPtr pt = table.impl();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_result("embedding_gather", std::move(shape), std::move(out), {table},
                     [pt, saved = std::move(saved), d](const TensorImpl& o) {
                       auto g = pt->grad_buffer();
                       for (std::size_t i = 0; i < saved.size(); ++i) {
                         float* row = g.data() + static_cast<std::size_t>(saved[i]) * d;
                         const float* go = o.grad.data() + i * d;
                         for (std::size_t j = 0; j < d; ++j) row[j] += go[j];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) mismatch("reshape", x.shape(), shape);
  ImplPtr px = x.impl();
  return make_result("reshape", std::move(shape), x.to_vector(), {x},
                     [px](const TensorImpl& o) { add_into(px->grad_buffer(), o.grad); });
}

namespace {

// Copies src (shape [pre, n0, mid, n1, post]) into dst laid out as
// [pre, n1, mid, n0, post]. Applying it twice with n0/n1 swapped inverts it.
void swap_axes_copy(const float* src, float* dst, std::size_t pre, std::size_t n0, std::size_t mid,
                    std::size_t n1, std::size_t post, bool accumulate) {
  for (std::size_t a = 0; a < pre; ++a) {
    for (std::size_t i0 = 0; i0 < n0; ++i0) {
      for (std::size_t m = 0; m < mid; ++m) {
        for (std::size_t i1 = 0; i1 < n1; ++i1) {
          const float* s = src + ((((a * n0 + i0) * mid + m) * n1 + i1) * post);
          float* d = dst + ((((a * n1 + i1) * mid + m) * n0 + i0) * post);
          if (accumulate) {
            for (std::size_t q = 0; q < post; ++q) d[q] += s[q];
          } else {
            std::memcpy(d, s, post * sizeof(float));
          }
        }
      }
    }
  }
}

}  // namespace

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  std::size_t a0 = resolve_axis(axis0, x.rank(), "transpose");
  std::size_t a1 = resolve_axis(axis1, x.rank(), "transpose");
  if (a0 == a1) return x;
  if (a0 > a1) std::swap(a0, a1);
  const Shape& s = x.shape();
  std::size_t pre = 1, mid = 1, post = 1;
  for (std::size_t i = 0; i < a0; ++i) pre *= s[i];
  for (std::size_t i = a0 + 1; i < a1; ++i) mid *= s[i];
  for (std::size_t i = a1 + 1; i < s.size(); ++i) post *= s[i];
  const std::size_t n0 = s[a0], n1 = s[a1];
  std::vector<float> out(x.numel());
  swap_axes_copy(x.values().data(), out.data(), pre, n0, mid, n1, post, false);
  Shape shape = s;
  std::swap(shape[a0], shape[a1]);
  ImplPtr px = x.impl();
  return make_result("transpose", std::move(shape), std::move(out), {x},
                     [px, pre, n0, mid, n1, post](const TensorImpl& o) {
                       swap_axes_copy(o.grad.data(), px->grad_buffer().data(), pre, n1, mid, n0,
                                      post, true);
                     });
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "slice");
  const Shape& s = x.shape();
  if (begin > end || end > s[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis of extent " + std::to_string(s[ax]));
  }
  auto [outer, inner] = outer_inner(s, ax);
  const std::size_t n = s[ax];
  const std::size_t len = end - begin;
  const auto in = x.values();
  std::vector<float> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * len * inner, in.data() + (o * n + begin) * inner,
                len * inner * sizeof(float));
  }
  Shape shape = s;
  shape[ax] = len;
  ImplPtr px = x.impl();
  return make_result("slice", std::move(shape), std::move(out), {x},
                     [px, outer = outer, inner = inner, n, begin, len](const TensorImpl& o) {
                       auto g = px->grad_buffer();
                       for (std::size_t a = 0; a < outer; ++a) {
                         for (std::size_t q = 0; q < len * inner; ++q) {
                           g[(a * n + begin) * inner + q] += o.grad[a * len * inner + q];
                         }
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = resolve_axis(axis, parts[0].rank(), "concat");
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    Shape a = p.shape();
    Shape b = parts[0].shape();
    if (a.size() != b.size()) mismatch("concat", b, a);
    a[ax] = b[ax] = 0;
    if (a != b) mismatch("concat", parts[0].shape(), p.shape());
    extents.push_back(p.shape()[ax]);
    total += p.shape()[ax];
  }
  shape[ax] = total;
  auto [outer, inner] = outer_inner(shape, ax);
  std::vector<float> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto in = parts[i].values();
    const std::size_t len = extents[i];
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * total + offset) * inner, in.data() + o * len * inner,
                  len * inner * sizeof(float));
    }
    offset += len;
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result("concat", std::move(shape), std::move(out), parts,
                     [impls, extents, outer = outer, inner = inner, total](const TensorImpl& o) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < impls.size(); ++i) {
                         const std::size_t len = extents[i];
                         if (impls[i]->requires_grad) {
                           auto g = impls[i]->grad_buffer();
                           for (std::size_t a = 0; a < outer; ++a) {
                             for (std::size_t q = 0; q < len * inner; ++q) {
                               g[a * len * inner + q] += o.grad[(a * total + off) * inner + q];
                             }
                           }
                         }
                         off += len;
                       }
                     });
}

Tensor pad_constant(const Tensor& x, int axis, std::size_t before, std::size_t after, float value) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "pad_constant");
  const Shape& s = x.shape();
  auto [outer, inner] = outer_inner(s, ax);
  const std::size_t n = s[ax];
  const std::size_t total = before + n + after;
  const auto in = x.values();
  std::vector<float> out(outer * total * inner, value);
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + (o * total + before) * inner, in.data() + o * n * inner,
                n * inner * sizeof(float));
  }
  Shape shape = s;
  shape[ax] = total;
  ImplPtr px = x.impl();
  return make_result("pad_constant", std::move(shape), std::move(out), {x},
                     [px, outer = outer, inner = inner, n, total, before](const TensorImpl& o) {
                       auto g = px->grad_buffer();
                       for (std::size_t a = 0; a < outer; ++a) {
                         for (std::size_t q = 0; q < n * inner; ++q) {
                           g[a * n * inner + q] += o.grad[(a * total + before) * inner + q];
                         }
                       }
                     });
}

Tensor repeat(const Tensor& x, int axis, std::size_t n) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "repeat");
  const Shape& s = x.shape();
  if (s[ax] != 1) throw ShapeError("repeat: axis must have extent 1, shape " + shape_string(s));
  auto [outer, inner] = outer_inner(s, ax);
  const auto in = x.values();
  std::vector<float> out(outer * n * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < n; ++r) {
      std::memcpy(out.data() + (o * n + r) * inner, in.data() + o * inner, inner * sizeof(float));
    }
  }
  Shape shape = s;
  shape[ax] = n;
  ImplPtr px = x.impl();
  return make_result("repeat", std::move(shape), std::move(out), {x},
                     [px, outer = outer, inner = inner, n](const TensorImpl& o) {
                       auto g = px->grad_buffer();
                       for (std::size_t a = 0; a < outer; ++a) {
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t q = 0; q < inner; ++q) {
                             g[a * inner + q] += o.grad[(a * n + r) * inner + q];
                           }
                         }
                       }
                     });
}

namespace {

// h_t = a_t * h_{t-1} + b_t over t for every (k, f); arrays are [K, T, F].
// With reverse the recurrence runs from t = T-1 down to 0 and a_t multiplies
// the state coming from t+1.
void run_scan(const float* a, const float* b, float* h, std::size_t kdim, std::size_t tdim,
              std::size_t fdim, ScanAlgorithm algo, bool reverse) {
  auto at = [&](std::size_t t) { return reverse ? tdim - 1 - t : t; };
  if (algo == ScanAlgorithm::sequential) {
    for (std::size_t k = 0; k < kdim; ++k) {
      const std::size_t base = k * tdim * fdim;
      std::memcpy(h + base + at(0) * fdim, b + base + at(0) * fdim, fdim * sizeof(float));
      for (std::size_t s = 1; s < tdim; ++s) {
        const std::size_t cur = base + at(s) * fdim;
        const std::size_t prev = base + at(s - 1) * fdim;
        for (std::size_t f = 0; f < fdim; ++f) h[cur + f] = a[cur + f] * h[prev + f] + b[cur + f];
      }
    }
    return;
  }
  // Inclusive Hillis-Steele scan over pairs (A, B) with the combiner
  // (A1, B1) then (A2, B2) = (A1 * A2, A2 * B1 + B2).
  std::vector<float> acoef(tdim * fdim);
  for (std::size_t k = 0; k < kdim; ++k) {
    const std::size_t base = k * tdim * fdim;
    for (std::size_t s = 0; s < tdim; ++s) {
      std::memcpy(acoef.data() + s * fdim, a + base + at(s) * fdim, fdim * sizeof(float));
      std::memcpy(h + base + at(s) * fdim, b + base + at(s) * fdim, fdim * sizeof(float));
    }
    for (std::size_t offset = 1; offset < tdim; offset *= 2) {
      for (std::size_t s = tdim; s-- > offset;) {
        float* a2 = acoef.data() + s * fdim;
        const float* a1 = acoef.data() + (s - offset) * fdim;
        float* b2 = h + base + at(s) * fdim;
        const float* b1 = h + base + at(s - offset) * fdim;
        for (std::size_t f = 0; f < fdim; ++f) {
          b2[f] = a2[f] * b1[f] + b2[f];
          a2[f] = a1[f] * a2[f];
        }
      }
    }
  }
}

}  // namespace

Tensor cumulative_scan(const Tensor& a, const Tensor& b, ScanAlgorithm algorithm) {
  if (a.shape() != b.shape() || a.rank() < 2) mismatch("cumulative_scan", a.shape(), b.shape());
  const std::size_t kdim = a.size(0);
  const std::size_t tdim = a.size(1);
  const std::size_t fdim = a.numel() / std::max<std::size_t>(1, kdim * tdim);
  std::vector<float> h(a.numel());
  if (tdim > 0) {
    run_scan(a.values().data(), b.values().data(), h.data(), kdim, tdim, fdim, algorithm, false);
  }
  ImplPtr pa = a.impl(), pb = b.impl();
  return make_result(
      "cumulative_scan", a.shape(), std::move(h), {a, b},
      [pa, pb, kdim, tdim, fdim, algorithm](const TensorImpl& o) {
        // Adjoint state: g_t = dL/dh_t + a_{t+1} g_{t+1}, run right to left.
        std::vector<float> shifted(o.data.size(), 0.0f);
        for (std::size_t k = 0; k < kdim; ++k) {
          for (std::size_t t = 0; t + 1 < tdim; ++t) {
            std::memcpy(shifted.data() + (k * tdim + t) * fdim,
                        pa->data.data() + (k * tdim + t + 1) * fdim, fdim * sizeof(float));
          }
        }
        std::vector<float> adj(o.data.size());
        run_scan(shifted.data(), o.grad.data(), adj.data(), kdim, tdim, fdim, algorithm, true);
        if (pb->requires_grad) add_into(pb->grad_buffer(), adj);
        if (pa->requires_grad) {
          auto ga = pa->grad_buffer();
          for (std::size_t k = 0; k < kdim; ++k) {
            for (std::size_t t = 1; t < tdim; ++t) {
              const std::size_t cur = (k * tdim + t) * fdim;
              const std::size_t prev = (k * tdim + t - 1) * fdim;
              for (std::size_t f = 0; f < fdim; ++f) ga[cur + f] += adj[cur + f] * o.data[prev + f];
            }
          }
        }
      });
}

Tensor outer(const Tensor& x, const Tensor& y) {
  const Shape& sx = x.shape();
  const Shape& sy = y.shape();
  if (sx.empty() || sy.empty() || sx.size() != sy.size() ||
      !std::equal(sx.begin(), sx.end() - 1, sy.begin())) {
    mismatch("outer", sx, sy);
  }
  const std::size_t d = sx.back();
  const std::size_t n = sy.back();
  const std::size_t lead = x.numel() / d;
  const auto xv = x.values();
  const auto yv = y.values();
  std::vector<float> out(lead * d * n);
  for (std::size_t l = 0; l < lead; ++l) {
    for (std::size_t i = 0; i < d; ++i) {
      const float xs = xv[l * d + i];
      float* dst = out.data() + (l * d + i) * n;
      const float* yr = yv.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] = xs * yr[j];
    }
  }
  Shape shape = sx;
  shape.push_back(n);
  ImplPtr px = x.impl(), py = y.impl();
  return make_result("outer", std::move(shape), std::move(out), {x, y},
                     [px, py, lead, d, n](const TensorImpl& o) {
                       const float* g = o.grad.data();
                       if (px->requires_grad) {
                         auto gx = px->grad_buffer();
                         for (std::size_t l = 0; l < lead; ++l) {
                           const float* yr = py->data.data() + l * n;
                           for (std::size_t i = 0; i < d; ++i) {
                             const float* gr = g + (l * d + i) * n;
                             float acc = 0.0f;
                             for (std::size_t j = 0; j < n; ++j) acc += gr[j] * yr[j];
                             gx[l * d + i] += acc;
                           }
                         }
                       }
                       if (py->requires_grad) {
                         auto gy = py->grad_buffer();
                         for (std::size_t l = 0; l < lead; ++l) {
                           float* gyr = gy.data() + l * n;
                           for (std::size_t i = 0; i < d; ++i) {
                             const float xs = px->data[l * d + i];
                             const float* gr = g + (l * d + i) * n;
                             for (std::size_t j = 0; j < n; ++j) gyr[j] += gr[j] * xs;
                           }
                         }
                       }
                     });
}

Tensor contract(const Tensor& h, const Tensor& c) {
  const Shape& sh = h.shape();
  const Shape& sc = c.shape();
  if (sh.size() < 2 || sc.size() + 1 != sh.size() || sh.back() != sc.back() ||
      !std::equal(sc.begin(), sc.end() - 1, sh.begin())) {
    mismatch("contract", sh, sc);
  }
  const std::size_t n = sh.back();
  const std::size_t d = sh[sh.size() - 2];
  const std::size_t lead = h.numel() / (d * n);
  const auto hv = h.values();
  const auto cv = c.values();
  std::vector<float> out(lead * d);
  for (std::size_t l = 0; l < lead; ++l) {
    const float* cr = cv.data() + l * n;
    for (std::size_t i = 0; i < d; ++i) {
      const float* hr = hv.data() + (l * d + i) * n;
      float acc = 0.0f;
      for (std::size_t j = 0; j < n; ++j) acc += hr[j] * cr[j];
      out[l * d + i] = acc;
    }
  }
  Shape shape(sh.begin(), sh.end() - 1);
  ImplPtr ph = h.impl(), pc = c.impl();
  return make_result("contract", std::move(shape), std::move(out), {h, c},
                     [ph, pc, lead, d, n](const TensorImpl& o) {
                       const float* g = o.grad.data();
                       if (ph->requires_grad) {
                         auto gh = ph->grad_buffer();
                         for (std::size_t l = 0; l < lead; ++l) {
                           const float* cr = pc->data.data() + l * n;
                           for (std::size_t i = 0; i < d; ++i) {
                             const float gs = g[l * d + i];
                             float* dst = gh.data() + (l * d + i) * n;
                             for (std::size_t j = 0; j < n; ++j) dst[j] += gs * cr[j];
                           }
                         }
                       }
                       if (pc->requires_grad) {
                         auto gc = pc->grad_buffer();
                         for (std::size_t l = 0; l < lead; ++l) {
                           float* gcr = gc.data() + l * n;
                           for (std::size_t i = 0; i < d; ++i) {
                             const float gs = g[l * d + i];
                             const float* hr = ph->data.data() + (l * d + i) * n;
                             for (std::size_t j = 0; j < n; ++j) gcr[j] += gs * hr[j];
                           }
                         }
                       }
                     });
}

namespace {

struct RotaryTable {
  std::vector<float> cos;
  std::vector<float> sin;
};

RotaryTable rotary_table(std::size_t t, std::size_t half, float base) {
  RotaryTable tab{std::vector<float>(t * half), std::vector<float>(t * half)};
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / (2.0 * half));
    for (std::size_t p = 0; p < t; ++p) {
      const double angle = static_cast<double>(p) * freq;
      tab.cos[p * half + i] = static_cast<float>(std::cos(angle));
      tab.sin[p * half + i] = static_cast<float>(std::sin(angle));
    }
  }
  return tab;
}

}  // namespace

Tensor rotary(const Tensor& x, float base) {
  if (x.rank() < 2 || x.size(-1) % 2 != 0) {
    throw ShapeError("rotary: expected [..., T, even width], got " + shape_string(x.shape()));
  }
  const std::size_t t = x.size(-2);
  const std::size_t dh = x.size(-1);
  const std::size_t half = dh / 2;
  const std::size_t mats = x.numel() / (t * dh);
  auto tab = rotary_table(t, half, base);
  const auto in = x.values();
  std::vector<float> out(in.size());
  for (std::size_t m = 0; m < mats; ++m) {
    for (std::size_t p = 0; p < t; ++p) {
      const float* src = in.data() + (m * t + p) * dh;
      float* dst = out.data() + (m * t + p) * dh;
      for (std::size_t i = 0; i < half; ++i) {
        const float c = tab.cos[p * half + i];
        const float s = tab.sin[p * half + i];
        dst[2 * i] = src[2 * i] * c - src[2 * i + 1] * s;
        dst[2 * i + 1] = src[2 * i] * s + src[2 * i + 1] * c;
      }
    }
  }
  ImplPtr px = x.impl();
  return make_result("rotary", x.shape(), std::move(out), {x},
                     [px, tab = std::move(tab), mats, t, dh, half](const TensorImpl& o) {
                       auto g = px->grad_buffer();
                       for (std::size_t m = 0; m < mats; ++m) {
                         for (std::size_t p = 0; p < t; ++p) {
                           const float* go = o.grad.data() + (m * t + p) * dh;
                           float* gx = g.data() + (m * t + p) * dh;
                           for (std::size_t i = 0; i < half; ++i) {
                             const float c = tab.cos[p * half + i];
                             const float s = tab.sin[p * half + i];
                             gx[2 * i] += go[2 * i] * c + go[2 * i + 1] * s;
                             gx[2 * i + 1] += -go[2 * i] * s + go[2 * i + 1] * c;
                           }
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, float p, bool training) {
  if (!training || p <= 0.0f) return x;
  if (p >= 1.0f) throw std::invalid_argument("dropout: probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const float scale_kept = 1.0f / (1.0f - p);
  auto& rng = op_rng();
  const auto in = x.values();
  std::vector<float> mask(in.size());
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    mask[i] = keep(rng) ? scale_kept : 0.0f;
    out[i] = in[i] * mask[i];
  }
  ImplPtr px = x.impl();
  return make_result("dropout", x.shape(), std::move(out), {x},
                     [px, mask = std::move(mask)](const TensorImpl& o) {
                       auto g = px->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.values()) total += v;
  ImplPtr px = x.impl();
  return make_result("sum", {}, {static_cast<float>(total)}, {x}, [px](const TensorImpl& o) {
    auto g = px->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
  if (logits.rank() < 1) throw ShapeError("cross_entropy: logits need a class axis");
  const std::size_t v = logits.size(-1);
  const std::size_t rows = logits.numel() / v;
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows but " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw std::invalid_argument("cross_entropy: empty mask");
  const auto lv = logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) +
                              " out of range for " + std::to_string(v) + " classes");
    }
    const float* row = lv.data() + r * v;
    const float mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(z) + mx - row[targets[r]];
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  ImplPtr pl = logits.impl();
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return make_result(
      "cross_entropy", {}, {static_cast<float>(total * inv_count)}, {logits},
      [pl, tgt = std::move(tgt), msk = std::move(msk), v, rows, inv_count](const TensorImpl& o) {
        auto g = pl->grad_buffer();
        const float scale_out = static_cast<float>(o.grad[0] * inv_count);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!msk[r]) continue;
          const float* row = pl->data.data() + r * v;
          const float mx = *std::max_element(row, row + v);
          double z = 0.0;
          for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - mx));
          const double inv_z = 1.0 / z;
          float* gr = g.data() + r * v;
          for (std::size_t j = 0; j < v; ++j) {
            gr[j] += scale_out * static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) * inv_z);
          }
          gr[tgt[r]] -= scale_out;
        }
      });
}

}  // namespace mblm::ops
