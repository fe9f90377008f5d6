#include "mblm/patching.hpp"

#include <stdexcept>
#include <string>

#include "mblm/numerics/ops.hpp"
#include "mblm/stage_models.hpp"

namespace mblm {

using namespace ops;

std::size_t padded_length(const ValidatedConfig& config, std::size_t length) {
  return config.outer_patches(length) * config.inner_span(0);
}

StageParams init_stage_params(const ValidatedConfig& config, std::size_t stage,
                              std::mt19937_64& rng) {
  const std::size_t n = config.num_stages();
  const StageConfig& sc = config.stage(stage);
  const std::size_t d_last = config.stage(n - 1).width;
  StageParams p;
  p.embedding = init_normal({kVocabSize, d_last}, rng);
  if (sc.pos_embedding == PosEmbedding::learned_absolute) {
    p.position = init_normal({sc.patch_size, d_last}, rng);
  }
  if (stage + 1 < n) {
    p.patch_proj = init_normal({config.inner_span(stage) * d_last, sc.width}, rng);
    p.global_proj = init_normal({sc.width, config.stage(stage + 1).width}, rng);
  }
  p.start_token = init_normal({sc.width}, rng);
  return p;
}

Tensor embed_stage(const ValidatedConfig& config, std::size_t stage, const StageParams& params,
                   std::span<const std::int32_t> ids, std::size_t batch) {
  if (batch == 0 || ids.size() % batch != 0) {
    throw ShapeError("embed_stage: " + std::to_string(ids.size()) + " ids do not split into " +
                     std::to_string(batch) + " rows");
  }
  const std::size_t length = ids.size() / batch;
  Tensor out = embedding_gather(params.embedding, ids, {batch, length});
  if (!params.position.defined()) return out;
  const std::size_t span = config.inner_span(stage);
  const std::size_t p = config.stage(stage).patch_size;
  std::vector<std::int32_t> pos(length);
  for (std::size_t t = 0; t < length; ++t) pos[t] = static_cast<std::int32_t>((t / span) % p);
  return add(out, embedding_gather(params.position, pos, {length}));
}

NestedEmbedding reshape_to_patches(const ValidatedConfig& config, const Tensor& embedded,
                                   const Tensor& pad_row, std::size_t length) {
  if (embedded.rank() != 3) {
    throw ShapeError("reshape_to_patches: expected [B, L, D], got " + shape_string(embedded.shape()));
  }
  const std::size_t b = embedded.size(0);
  const std::size_t d = embedded.size(2);
  if (length == 0) length = embedded.size(1);
  const std::size_t total = padded_length(config, length);
  if (embedded.size(1) < length || embedded.size(1) > total) {
    throw ShapeError("reshape_to_patches: " + std::to_string(embedded.size(1)) +
                     " rows do not cover length " + std::to_string(length));
  }
  NestedEmbedding out;
  out.length = length;
  out.pad_count = total - length;
  Tensor values = embedded;
  if (embedded.size(1) < total) {
    if (pad_row.shape() != Shape{d}) {
      throw ShapeError("reshape_to_patches: pad row must be [" + std::to_string(d) + "]");
    }
    Tensor tail = repeat(repeat(reshape(pad_row, {1, 1, d}), 1, total - embedded.size(1)), 0, b);
    values = concat({values, tail}, 1);
  }
  Shape nested{b, total / config.inner_span(0)};
  for (std::size_t i = 1; i < config.num_stages(); ++i) nested.push_back(config.stage(i).patch_size);
  nested.push_back(d);
  out.values = reshape(values, std::move(nested));
  return out;
}

Tensor project_patches(const ValidatedConfig& config, std::size_t stage, const StageParams& params,
                       const NestedEmbedding& nested) {
  const std::size_t n = config.num_stages();
  if (stage >= n) throw std::out_of_range("project_patches: stage index");
  const Tensor& v = nested.values;
  const std::size_t d_last = v.size(-1);
  const std::size_t total = v.numel() / d_last;
  const std::size_t span = config.inner_span(stage);
  // The outer row holds P_1' patches, which may differ from P_1.
  const std::size_t p = stage == 0 ? v.size(1) : config.stage(stage).patch_size;
  const std::size_t width = config.stage(stage).width;
  const std::size_t patches = total / span;
  const std::size_t k = patches / p;

  Tensor x = reshape(v, {patches, span * d_last});
  if (params.patch_proj.defined()) {
    x = matmul(x, params.patch_proj);
  } else if (span * d_last != width) {
    throw ShapeError("project_patches: stage " + std::to_string(stage + 1) +
                     " has no projection but width " + std::to_string(width) + " != " +
                     std::to_string(span * d_last));
  }
  x = reshape(x, {k, p, width});
  Tensor start = repeat(reshape(params.start_token, {1, 1, width}), 0, k);
  if (p == 1) return start;
  return concat({start, slice(x, 1, 0, p - 1)}, 1);
}

Tensor inject_global_output(const Tensor& stage_out, const Tensor& next_input,
                            const Tensor& global_proj) {
  if (stage_out.rank() != 3 || next_input.rank() != 3) {
    throw ShapeError("inject_global_output: expected rank-3 inputs");
  }
  const std::size_t k_next = next_input.size(0);
  const std::size_t p_next = next_input.size(1);
  const std::size_t d_next = next_input.size(2);
  if (stage_out.size(0) * stage_out.size(1) != k_next) {
    throw ShapeError("inject_global_output: " + shape_string(stage_out.shape()) +
                     " does not feed " + shape_string(next_input.shape()));
  }
  if (global_proj.shape() != Shape{stage_out.size(2), d_next}) {
    throw ShapeError("inject_global_output: projection shape " + shape_string(global_proj.shape()));
  }
  if (p_next == 1) return next_input;
  Tensor g = reshape(matmul(stage_out, global_proj), {k_next, 1, d_next});
  g = pad_constant(repeat(g, 1, p_next - 1), 1, 1, 0);
  return add(next_input, g);
}

Tensor unpack_logits(const Tensor& z, std::size_t batch, std::size_t length) {
  if (z.rank() != 3) throw ShapeError("unpack_logits: expected [K, P, V]");
  const std::size_t rows = z.size(0) * z.size(1);
  if (batch == 0 || rows % batch != 0 || rows / batch < length) {
    throw ShapeError("unpack_logits: " + shape_string(z.shape()) + " cannot hold " +
                     std::to_string(batch) + " x " + std::to_string(length));
  }
  Tensor flat = reshape(z, {batch, rows / batch, z.size(2)});
  if (rows / batch == length) return flat;
  return slice(flat, 1, 0, length);
}

}  // namespace mblm
