#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mblm/numerics/ops.hpp"

namespace mblm {

inline constexpr std::size_t kVocabSize = 257;
inline constexpr std::int32_t kPadId = 256;

enum class StageKind { transformer, selective_ssm };
enum class PosEmbedding { none, learned_absolute, rotary };

struct StageConfig {
  StageKind kind = StageKind::transformer;
  std::size_t patch_size = 1;
  std::size_t width = 32;
  std::size_t layers = 1;
  std::size_t chunk_count = 1;
  PosEmbedding pos_embedding = PosEmbedding::learned_absolute;
  float dropout = 0.0f;
  // transformer
  std::size_t heads = 2;
  float rotary_base = 10000.0f;
  // selective_ssm
  std::size_t state_size = 8;
  ops::ScanAlgorithm scan = ops::ScanAlgorithm::sequential;

  bool operator==(const StageConfig&) const = default;
};

struct HierarchyConfig {
  std::vector<StageConfig> stages;
  std::size_t vocab_size = kVocabSize;
  std::int32_t pad_id = kPadId;
  bool allow_p1_extension = false;

  bool operator==(const HierarchyConfig&) const = default;
};

struct TrainConfig {
  double peak_lr = 1e-3;
  double warmup_fraction = 0.10;
  double min_lr = 0.0;
  std::size_t total_steps = 1000;
  std::pair<double, double> betas{0.9, 0.95};
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip_norm = 1.0;
  std::size_t accumulation = 1;
  std::size_t micro_batch = 4;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;    // 0 disables periodic evaluation
  std::size_t eval_batches = 8;
  std::size_t log_every = 10;
  double max_seconds = 0.0;      // wall-clock budget, 0 = unlimited

  std::size_t effective_batch() const { return micro_batch * accumulation; }
  bool operator==(const TrainConfig&) const = default;
};

enum class DataKind { text, vqa };
enum class LossMask { answer, full };

struct DataConfig {
  DataKind kind = DataKind::text;
  std::string corpus;            // file or directory of raw files
  std::size_t context_length = 0;  // 0 = L_max
  double val_fraction = 0.05;
  double test_fraction = 0.05;
  std::string train_shard;       // vqa
  std::string val_shard;         // vqa
  LossMask loss_mask = LossMask::answer;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  HierarchyConfig model;
  TrainConfig train;
  DataConfig data;

  bool operator==(const RunConfig&) const = default;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

// An accepted hierarchy. Immutable; cheap to copy.
class ValidatedConfig {
 public:
  const HierarchyConfig& config() const noexcept { return config_; }
  const std::vector<StageConfig>& stages() const noexcept { return config_.stages; }
  const StageConfig& stage(std::size_t i) const { return config_.stages.at(i); }
  std::size_t num_stages() const noexcept { return config_.stages.size(); }

  // L_max = product of all patch sizes.
  std::size_t max_length() const;
  // Product of patch sizes strictly after stage i (0-based): bytes per stage-i patch.
  std::size_t inner_span(std::size_t i) const;
  // Outer patch count used for a sequence of `length` bytes.
  std::size_t outer_patches(std::size_t length) const;
  // K_i = batch * P_1' * P_2 ... P_{i-1} (0-based i; K_0 = batch).
  std::size_t packed_batch(std::size_t i, std::size_t batch, std::size_t length) const;
  std::size_t packed_batch(std::size_t i, std::size_t batch) const {
    return packed_batch(i, batch, max_length());
  }
  // Throws std::invalid_argument when a sequence of this length is not accepted.
  void check_length(std::size_t length) const;

 private:
  friend ValidatedConfig validate(const HierarchyConfig& config);
  explicit ValidatedConfig(HierarchyConfig c) : config_(std::move(c)) {}
  HierarchyConfig config_;
};

// Every violated invariant, one message each, naming the 1-based stage.
std::vector<std::string> violations(const HierarchyConfig& config);
std::vector<std::string> violations(const TrainConfig& config);
std::vector<std::string> violations(const DataConfig& config);

ValidatedConfig validate(const HierarchyConfig& config);
void validate(const TrainConfig& config);
void validate(const RunConfig& config);

// TOML text with [model], [[model.stages]], [train], [data] tables.
// Unknown keys and mistyped values raise ConfigError.
RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
std::string to_toml(const RunConfig& config);
std::string to_toml(const HierarchyConfig& config);
// Stable 64-bit digest of the canonical TOML form.
std::uint64_t config_hash(const HierarchyConfig& config);

std::string to_string(StageKind kind);
std::string to_string(PosEmbedding pos);

}  // namespace mblm
