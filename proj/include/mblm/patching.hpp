#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mblm/config.hpp"
#include "mblm/numerics/tensor.hpp"

// Shape plumbing between hierarchy stages. Stage indices are 0-based: stage 0
// is the outermost (global) model and stage N-1 the byte-level local model.
// S_i denotes the number of bytes covered by one stage-i patch element, i.e.
// the product of the patch sizes after stage i.
namespace mblm {

struct StageParams {
  Tensor embedding;    // [257, D_N]
  Tensor position;     // [P_i, D_N], undefined unless learned_absolute
  Tensor patch_proj;   // [S_i * D_N, D_i], undefined at the last stage
  Tensor start_token;  // [D_i]
  Tensor global_proj;  // [D_i, D_{i+1}], undefined at the last stage
};

StageParams init_stage_params(const ValidatedConfig& config, std::size_t stage,
                              std::mt19937_64& rng);

// Byte ids (row-major [B, L]) embedded for one stage: table lookup plus the
// learned position of the stage-i patch element that holds each byte,
// floor(t / S_i) mod P_i. Throws std::out_of_range on ids >= 257.
Tensor embed_stage(const ValidatedConfig& config, std::size_t stage, const StageParams& params,
                   std::span<const std::int32_t> ids, std::size_t batch);

struct NestedEmbedding {
  Tensor values;  // [B, P_1', P_2, ..., P_N, D_N]
  std::size_t length = 0;
  std::size_t pad_count = 0;
};

// Appends pad_row ([D_N]) at the tail of every sequence until the length is
// P_1' * S_0 and exposes the nested patch axes. `length` is the number of real
// bytes when the embedded rows already include (part of) the pad tail; 0 means
// all rows are real.
NestedEmbedding reshape_to_patches(const ValidatedConfig& config, const Tensor& embedded,
                                   const Tensor& pad_row, std::size_t length = 0);

// Packed stage input [K_i, P_i, D_i]: each patch flattened and projected,
// shifted right by one with the start token in front.
Tensor project_patches(const ValidatedConfig& config, std::size_t stage, const StageParams& params,
                       const NestedEmbedding& nested);

// Adds stage_out * global_proj (one vector per next-stage patch) to every
// position of that patch except the start position 0.
Tensor inject_global_output(const Tensor& stage_out, const Tensor& next_input,
                            const Tensor& global_proj);

// z[K_N, P_N, V] -> [B, length, V]; drops the pad tail.
Tensor unpack_logits(const Tensor& z, std::size_t batch, std::size_t length);

// Padded length P_1' * S_0 for a sequence of `length` bytes.
std::size_t padded_length(const ValidatedConfig& config, std::size_t length);

}  // namespace mblm
