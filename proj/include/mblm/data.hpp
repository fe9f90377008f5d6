#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mblm/config.hpp"

namespace mblm {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Text corpora

enum class Split { train, val, test };

struct ByteCorpus {
  std::vector<std::uint8_t> bytes;
  std::vector<std::size_t> offsets;  // start of each source document
  std::vector<std::string> sources;
  Split split = Split::train;
};

// A single file, or every regular file below a directory in path order,
// concatenated without any transformation.
ByteCorpus load_corpus(const std::string& path);

struct CorpusSplits {
  ByteCorpus train, val, test;
};

// Contiguous split: train first, validation next, test at the tail.
CorpusSplits split_corpus(const ByteCorpus& corpus, double val_fraction, double test_fraction);

// One training sequence. Row t of the model predicts target[t] from input[< t],
// so input and target hold the same ids; mask selects scored positions.
struct ByteSample {
  std::vector<std::int32_t> input;
  std::vector<std::int32_t> target;
  std::vector<std::uint8_t> mask;
  std::string provenance;
};

ByteSample sample_window(std::span<const std::uint8_t> bytes, std::size_t length, std::size_t offset);

// Row-major batch of equal-length samples.
struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};

Batch make_batch(std::span<const ByteSample> samples);

class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual Batch next_batch(std::size_t batch) = 0;
  // Opaque sampler position for checkpoint/resume.
  virtual std::string state() const = 0;
  virtual void restore(const std::string& state) = 0;
};

// Uniform random windows over a byte array.
class WindowSampler final : public SampleSource {
 public:
  WindowSampler(std::vector<std::uint8_t> bytes, std::size_t length, std::uint64_t seed);
  ByteSample next();
  Batch next_batch(std::size_t batch) override;
  std::string state() const override;
  void restore(const std::string& state) override;

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t length_;
  std::mt19937_64 rng_;
};

// Epoch-shuffled draws from a fixed sample list.
class ShuffledSamples final : public SampleSource {
 public:
  ShuffledSamples(std::vector<ByteSample> samples, std::uint64_t seed);
  Batch next_batch(std::size_t batch) override;
  std::string state() const override;
  void restore(const std::string& state) override;
  const std::vector<ByteSample>& samples() const { return samples_; }

 private:
  void reshuffle();
  std::vector<ByteSample> samples_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

std::array<std::uint64_t, 256> byte_histogram(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Images

// Row-major raster of rows[y][x] = {R, G, B}. Rows must share one width.
std::vector<std::uint8_t> flatten_image(const std::vector<std::vector<std::array<std::uint8_t, 3>>>& rows);
// Checks an interleaved payload against declared dimensions and returns it.
std::vector<std::uint8_t> flatten_image(std::size_t height, std::size_t width,
                                        std::span<const std::uint8_t> payload);
std::vector<std::vector<std::array<std::uint8_t, 3>>> unflatten_image(std::span<const std::uint8_t> bytes,
                                                                      std::size_t height, std::size_t width);

// level = v >> (8 - k); out = round(level * 255 / (2^k - 1)).
std::uint8_t discretize_value(std::uint8_t v, int bits);
std::vector<std::uint8_t> discretize_colors(std::span<const std::uint8_t> bytes, int bits);

// Raw file bytes, undecoded. Empty files are rejected.
std::vector<std::uint8_t> ingest_filestream(const std::string& path);

// ---------------------------------------------------------------------------
// Visual question answering

inline constexpr std::size_t kAnswerCount = 28;

enum class QuestionType { exists, count, compare_integer, compare_attribute, query_attribute };
std::string to_string(QuestionType type);  // E, C, CI, CA, QA
QuestionType parse_question_type(const std::string& text);

struct VqaRecord {
  std::vector<std::uint8_t> image;  // raw interleaved RGB or an opaque codec stream
  std::size_t height = 0;           // 0 for codec streams
  std::size_t width = 0;
  std::string question;
  int answer_id = 0;
  QuestionType type = QuestionType::exists;
};

enum class ImageMode { raw, discretized, filestream };

struct ImageEncoding {
  ImageMode mode = ImageMode::raw;
  int bits = 3;
};

// [left pad][image][pad][question][answer]; the answer byte is the final id and
// the mask covers it alone (LossMask::answer) or every non-pad id (full).
ByteSample assemble_vqa_sample(const VqaRecord& record, std::size_t length, ImageEncoding encoding,
                               LossMask loss = LossMask::answer);

// One answer per line; line index = answer id.
std::vector<std::string> load_answer_table(const std::string& path);
int answer_id(const std::vector<std::string>& table, const std::string& answer);

// JSON lines with question, answer (string) or answer_id, question_type and
// either image_path (filestream) or raw_path + rgb_dims [H, W]. Relative paths
// resolve against the file's directory. Errors name the 1-based line.
std::vector<VqaRecord> read_vqa_jsonl(const std::string& path, const std::vector<std::string>& answers);

struct VqaShard {
  std::size_t length = 0;
  std::vector<ByteSample> samples;
  std::vector<QuestionType> types;
  std::vector<int> answers;
};

VqaShard make_vqa_shard(const std::vector<VqaRecord>& records, std::size_t length, ImageEncoding encoding,
                        LossMask loss = LossMask::answer);
void write_vqa_shard(const std::string& path, const VqaShard& shard);
VqaShard read_vqa_shard(const std::string& path);

struct SynthVqaOptions {
  std::size_t grid = 3;       // cells per side
  std::size_t cell = 2;       // pixels per cell side
  std::size_t max_squares = 4;
  int noise = 12;             // per-channel jitter of raw pixels
};

// Colored squares on a grid with exists / count questions. Answer ids index
// the 28-entry answer table.
std::vector<VqaRecord> synth_vqa(std::size_t count, std::uint64_t seed,
                                 const std::vector<std::string>& answers, const SynthVqaOptions& options = {});

}  // namespace mblm
