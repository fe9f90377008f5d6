#pragma once

#include <functional>
#include <vector>

#include "mblm/numerics/tensor.hpp"

namespace mblm {

using RegionFn = std::function<Tensor(const std::vector<Tensor>& inputs)>;

// Evaluates f without keeping its interior activations. Only the inputs and
// the output are held for the reverse pass, which re-executes f with history
// enabled. `params` lists every trainable tensor f reads besides its inputs;
// they receive gradients straight from the recomputation.
//
// The recomputed output must reproduce the forward output bit for bit, and
// neither inputs nor params may have been modified in between; otherwise the
// reverse pass throws std::logic_error. The op RNG state is replayed so that
// stochastic ops inside f see identical draws.
Tensor checkpoint_region(const RegionFn& f, const std::vector<Tensor>& inputs,
                         const std::vector<Tensor>& params);

}  // namespace mblm
