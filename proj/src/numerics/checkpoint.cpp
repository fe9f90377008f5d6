#include "mblm/numerics/checkpoint.hpp"

#include <cstring>
#include <stdexcept>

namespace mblm {

namespace {

struct RegionScope {
  std::size_t saved_current;
  RegionScope() : saved_current(activation_stats().region_current) {
    auto& st = activation_stats();
    ++st.region_depth;
    st.region_current = 0;
  }
  ~RegionScope() {
    auto& st = activation_stats();
    --st.region_depth;
    st.region_current = saved_current;
  }
  RegionScope(const RegionScope&) = delete;
  RegionScope& operator=(const RegionScope&) = delete;
};

}  // namespace

Tensor checkpoint_region(const RegionFn& f, const std::vector<Tensor>& inputs,
                         const std::vector<Tensor>& params) {
  const std::mt19937_64 rng_before = op_rng();
  Tensor out;
  {
    NoGradGuard no_grad;
    RegionScope scope;
    out = f(inputs);
  }

  std::vector<Tensor> parents = inputs;
  parents.insert(parents.end(), params.begin(), params.end());
  std::vector<std::uint64_t> versions;
  for (const auto& p : parents) versions.push_back(p.version());

  auto fn = f;
  auto saved_inputs = inputs;
  auto saved_parents = parents;
  return detail::make_result(
      "checkpoint_region", out.shape(), out.to_vector(), parents,
      [fn, saved_inputs, saved_parents, versions, rng_before](const detail::TensorImpl& o) {
        for (std::size_t i = 0; i < saved_parents.size(); ++i) {
          if (saved_parents[i].version() != versions[i]) {
            throw std::logic_error("checkpoint: region input or parameter modified before backward");
          }
        }
        std::vector<Tensor> detached;
        detached.reserve(saved_inputs.size());
        for (const auto& t : saved_inputs) {
          Tensor d = t.detach();
          d.set_requires_grad(t.requires_grad());
          detached.push_back(std::move(d));
        }

        const std::mt19937_64 rng_now = op_rng();
        op_rng() = rng_before;
        Tensor replay;
        {
          RegionScope scope;
          // The outer reverse pass runs with grad off; the replay must record.
          GradModeGuard enable(true);
          replay = fn(detached);
        }
        op_rng() = rng_now;

        if (replay.numel() != o.data.size() ||
            std::memcmp(replay.values().data(), o.data.data(), o.data.size() * sizeof(float)) != 0) {
          throw std::logic_error("checkpoint: recomputed region output differs from forward (impure region)");
        }
        if (replay.requires_grad()) {
          RegionScope scope;
          GradModeGuard enable(true);
          const Tensor roots[] = {replay};
          const std::vector<float> seeds[] = {o.grad};
          backward(std::span<const Tensor>(roots), std::span<const std::vector<float>>(seeds));
        }
        for (std::size_t i = 0; i < saved_inputs.size(); ++i) {
          if (!saved_inputs[i].requires_grad() || !detached[i].has_grad()) continue;
          auto dst = saved_inputs[i].impl()->grad_buffer();
          auto src = detached[i].impl()->grad;
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
      });
}

}  // namespace mblm
