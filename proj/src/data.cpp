#include "mblm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mblm {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("data: cannot read " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

ByteCorpus load_corpus(const std::string& path) {
  std::error_code ec;
  if (path.empty() || !fs::exists(path, ec)) throw DataError("data: corpus path not found");
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.emplace_back(path);
  }
  ByteCorpus c;
  for (const auto& f : files) {
    auto bytes = read_file(f);
    if (bytes.empty()) continue;
    c.offsets.push_back(c.bytes.size());
    c.sources.push_back(f.string());
    c.bytes.insert(c.bytes.end(), bytes.begin(), bytes.end());
  }
  if (c.bytes.empty()) throw DataError("data: corpus at " + path + " is empty");
  return c;
}

CorpusSplits split_corpus(const ByteCorpus& corpus, double val_fraction, double test_fraction) {
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0) {
    throw std::invalid_argument("data: split fractions must be >= 0 and sum below 1");
  }
  const std::size_t n = corpus.bytes.size();
  const auto n_test = static_cast<std::size_t>(std::floor(n * test_fraction));
  const auto n_val = static_cast<std::size_t>(std::floor(n * val_fraction));
  const std::size_t cut_val = n - n_test - n_val;
  const std::size_t cut_test = n - n_test;
  CorpusSplits s;
  auto part = [&](ByteCorpus& out, std::size_t begin, std::size_t end, Split tag) {
    out.split = tag;
    out.bytes.assign(corpus.bytes.begin() + begin, corpus.bytes.begin() + end);
    for (std::size_t i = 0; i < corpus.offsets.size(); ++i) {
      const std::size_t doc_begin = corpus.offsets[i];
      const std::size_t doc_end = i + 1 < corpus.offsets.size() ? corpus.offsets[i + 1] : n;
      if (doc_end <= begin || doc_begin >= end) continue;
      out.offsets.push_back(std::max(doc_begin, begin) - begin);
      out.sources.push_back(corpus.sources[i]);
    }
  };
  part(s.train, 0, cut_val, Split::train);
  part(s.val, cut_val, cut_test, Split::val);
  part(s.test, cut_test, n, Split::test);
  return s;
}

ByteSample sample_window(std::span<const std::uint8_t> bytes, std::size_t length, std::size_t offset) {
  if (length == 0 || offset > bytes.size() || bytes.size() - offset < length) {
    throw std::out_of_range("data: window [" + std::to_string(offset) + ", " +
                            std::to_string(offset + length) + ") exceeds corpus of " +
                            std::to_string(bytes.size()) + " bytes");
  }
  ByteSample s;
  s.input.assign(bytes.begin() + offset, bytes.begin() + offset + length);
  s.target = s.input;
  s.mask.assign(length, 1);
  s.provenance = "text@" + std::to_string(offset);
  return s;
}

Batch make_batch(std::span<const ByteSample> samples) {
  Batch b;
  b.batch = samples.size();
  if (samples.empty()) return b;
  b.length = samples[0].input.size();
  for (const auto& s : samples) {
    if (s.input.size() != b.length || s.mask.size() != b.length) {
      throw std::invalid_argument("data: samples in one batch must share a length");
    }
    b.ids.insert(b.ids.end(), s.input.begin(), s.input.end());
    b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
  }
  return b;
}

WindowSampler::WindowSampler(std::vector<std::uint8_t> bytes, std::size_t length, std::uint64_t seed)
    : bytes_(std::move(bytes)), length_(length), rng_(seed) {
  if (length_ == 0 || bytes_.size() < length_) {
    throw DataError("data: corpus of " + std::to_string(bytes_.size()) +
                    " bytes is shorter than the context length " + std::to_string(length_));
  }
}

ByteSample WindowSampler::next() {
  std::uniform_int_distribution<std::size_t> pick(0, bytes_.size() - length_);
  return sample_window(bytes_, length_, pick(rng_));
}

Batch WindowSampler::next_batch(std::size_t batch) {
  std::vector<ByteSample> s;
  for (std::size_t i = 0; i < batch; ++i) s.push_back(next());
  return make_batch(s);
}

std::string WindowSampler::state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void WindowSampler::restore(const std::string& state) {
  std::istringstream is(state);
  is >> rng_;
  if (!is) throw DataError("data: bad sampler state");
}

ShuffledSamples::ShuffledSamples(std::vector<ByteSample> samples, std::uint64_t seed)
    : samples_(std::move(samples)), rng_(seed) {
  if (samples_.empty()) throw DataError("data: no samples");
  reshuffle();
}

void ShuffledSamples::reshuffle() {
  order_.resize(samples_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

Batch ShuffledSamples::next_batch(std::size_t batch) {
  std::vector<ByteSample> s;
  for (std::size_t i = 0; i < batch; ++i) {
    if (cursor_ == order_.size()) reshuffle();
    s.push_back(samples_[order_[cursor_++]]);
  }
  return make_batch(s);
}

std::string ShuffledSamples::state() const {
  std::ostringstream os;
  os << cursor_ << ' ' << rng_;
  for (auto i : order_) os << ' ' << i;
  return os.str();
}

void ShuffledSamples::restore(const std::string& state) {
  std::istringstream is(state);
  is >> cursor_ >> rng_;
  for (auto& i : order_) is >> i;
  if (!is || cursor_ > order_.size()) throw DataError("data: bad sampler state");
}

std::array<std::uint64_t, 256> byte_histogram(std::span<const std::uint8_t> bytes) {
  std::array<std::uint64_t, 256> h{};
  for (auto b : bytes) ++h[b];
  return h;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> flatten_image(const std::vector<std::vector<std::array<std::uint8_t, 3>>>& rows) {
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument("image: dimensions must be >= 1");
  const std::size_t w = rows[0].size();
  std::vector<std::uint8_t> out;
  out.reserve(rows.size() * w * 3);
  for (const auto& row : rows) {
    if (row.size() != w) throw std::invalid_argument("image: ragged rows");
    for (const auto& px : row) out.insert(out.end(), px.begin(), px.end());
  }
  return out;
}

std::vector<std::uint8_t> flatten_image(std::size_t height, std::size_t width,
                                        std::span<const std::uint8_t> payload) {
  if (height == 0 || width == 0) throw std::invalid_argument("image: dimensions must be >= 1");
  if (payload.size() != height * width * 3) {
    throw std::invalid_argument("image: " + std::to_string(height) + "x" + std::to_string(width) +
                                "x3 needs " + std::to_string(height * width * 3) + " bytes, got " +
                                std::to_string(payload.size()));
  }
  return {payload.begin(), payload.end()};
}

std::vector<std::vector<std::array<std::uint8_t, 3>>> unflatten_image(std::span<const std::uint8_t> bytes,
                                                                      std::size_t height, std::size_t width) {
  flatten_image(height, width, bytes);
  std::vector<std::vector<std::array<std::uint8_t, 3>>> rows(height, std::vector<std::array<std::uint8_t, 3>>(width));
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) rows[y][x][c] = bytes[(y * width + x) * 3 + c];
    }
  }
  return rows;
}

std::uint8_t discretize_value(std::uint8_t v, int bits) {
  if (bits < 1 || bits > 8) throw std::invalid_argument("image: bits must be in [1, 8]");
  const int level = v >> (8 - bits);
  const int top = (1 << bits) - 1;
  return static_cast<std::uint8_t>((level * 255 * 2 + top) / (2 * top));
}

std::vector<std::uint8_t> discretize_colors(std::span<const std::uint8_t> bytes, int bits) {
  std::array<std::uint8_t, 256> lut{};
  for (int v = 0; v < 256; ++v) lut[v] = discretize_value(static_cast<std::uint8_t>(v), bits);
  std::vector<std::uint8_t> out(bytes.size());
  std::transform(bytes.begin(), bytes.end(), out.begin(), [&](std::uint8_t v) { return lut[v]; });
  return out;
}

std::vector<std::uint8_t> ingest_filestream(const std::string& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw DataError("data: filestream not found: " + path);
  auto bytes = read_file(path);
  if (bytes.empty()) throw DataError("empty filestream");
  return bytes;
}

// ---------------------------------------------------------------------------

std::string to_string(QuestionType type) {
  switch (type) {
    case QuestionType::exists: return "E";
    case QuestionType::count: return "C";
    case QuestionType::compare_integer: return "CI";
    case QuestionType::compare_attribute: return "CA";
    case QuestionType::query_attribute: return "QA";
  }
  return "?";
}

QuestionType parse_question_type(const std::string& text) {
  for (auto t : {QuestionType::exists, QuestionType::count, QuestionType::compare_integer,
                 QuestionType::compare_attribute, QuestionType::query_attribute}) {
    if (to_string(t) == text) return t;
  }
  throw std::invalid_argument("unknown question type '" + text + "'");
}

ByteSample assemble_vqa_sample(const VqaRecord& record, std::size_t length, ImageEncoding encoding,
                               LossMask loss) {
  if (record.answer_id < 0 || record.answer_id >= static_cast<int>(kAnswerCount)) {
    throw std::invalid_argument("answer out of range 0–27");
  }
  if (record.question.empty()) throw std::invalid_argument("vqa: empty question");
  std::vector<std::uint8_t> image;
  switch (encoding.mode) {
    case ImageMode::raw: image = flatten_image(record.height, record.width, record.image); break;
    case ImageMode::discretized:
      image = discretize_colors(flatten_image(record.height, record.width, record.image), encoding.bits);
      break;
    case ImageMode::filestream: image = record.image; break;
  }
  const std::size_t used = image.size() + 1 + record.question.size() + 1;
  if (used > length) {
    throw std::invalid_argument("vqa: image and question need " + std::to_string(used) +
                                " bytes, context holds " + std::to_string(length));
  }
  ByteSample s;
  s.input.assign(length - used, kPadId);
  s.input.insert(s.input.end(), image.begin(), image.end());
  s.input.push_back(kPadId);
  s.input.insert(s.input.end(), record.question.begin(), record.question.end());
  s.input.push_back(record.answer_id);
  s.target = s.input;
  s.mask.assign(length, 0);
  if (loss == LossMask::answer) {
    s.mask[length - 1] = 1;
  } else {
    for (std::size_t t = 0; t < length; ++t) s.mask[t] = s.input[t] != kPadId;
  }
  s.provenance = "vqa:" + to_string(record.type);
  return s;
}

std::vector<std::string> load_answer_table(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("data: answer table not found: " + path);
  std::vector<std::string> table;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) table.push_back(line);
  }
  if (table.size() != kAnswerCount) {
    throw DataError("data: answer table has " + std::to_string(table.size()) + " entries, expected 28");
  }
  return table;
}

int answer_id(const std::vector<std::string>& table, const std::string& answer) {
  const auto it = std::find(table.begin(), table.end(), answer);
  if (it == table.end()) throw std::invalid_argument("unknown answer '" + answer + "'");
  return static_cast<int>(it - table.begin());
}

std::vector<VqaRecord> read_vqa_jsonl(const std::string& path, const std::vector<std::string>& answers) {
  std::ifstream is(path);
  if (!is) throw DataError("data: records not found: " + path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  std::vector<VqaRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      VqaRecord r;
      r.question = j.at("question").get<std::string>();
      if (j.contains("answer_id")) {
        r.answer_id = j.at("answer_id").get<int>();
      } else {
        r.answer_id = answer_id(answers, j.at("answer").get<std::string>());
      }
      r.type = parse_question_type(j.at("question_type").get<std::string>());
      if (j.contains("image_path")) {
        r.image = ingest_filestream(resolve(j.at("image_path").get<std::string>()).string());
      } else {
        const auto dims = j.at("rgb_dims").get<std::vector<std::size_t>>();
        if (dims.size() != 2) throw std::invalid_argument("rgb_dims must be [H, W]");
        r.height = dims[0];
        r.width = dims[1];
        r.image = flatten_image(r.height, r.width,
                                ingest_filestream(resolve(j.at("raw_path").get<std::string>()).string()));
      }
      if (r.answer_id < 0 || r.answer_id >= static_cast<int>(kAnswerCount)) {
        throw std::invalid_argument("answer out of range 0–27");
      }
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

VqaShard make_vqa_shard(const std::vector<VqaRecord>& records, std::size_t length, ImageEncoding encoding,
                        LossMask loss) {
  VqaShard shard;
  shard.length = length;
  for (const auto& r : records) {
    shard.samples.push_back(assemble_vqa_sample(r, length, encoding, loss));
    shard.types.push_back(r.type);
    shard.answers.push_back(r.answer_id);
  }
  return shard;
}

namespace {

constexpr char kShardMagic[8] = {'M', 'B', 'L', 'M', 'S', 'H', 'R', 'D'};
constexpr std::uint32_t kShardVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("shard: truncated file");
  return v;
}

}  // namespace

void write_vqa_shard(const std::string& path, const VqaShard& shard) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("shard: cannot write " + path);
  os.write(kShardMagic, sizeof kShardMagic);
  put<std::uint32_t>(os, kShardVersion);
  put<std::uint64_t>(os, shard.length);
  put<std::uint64_t>(os, shard.samples.size());
  for (std::size_t i = 0; i < shard.samples.size(); ++i) {
    const auto& s = shard.samples[i];
    for (auto id : s.input) put<std::uint16_t>(os, static_cast<std::uint16_t>(id));
    os.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(shard.types[i]));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(shard.answers[i]));
  }
  if (!os) throw DataError("shard: write failed for " + path);
}

VqaShard read_vqa_shard(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("data: shard not found: " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kShardMagic, sizeof magic) != 0) {
    throw DataError("shard: " + path + " is not a sample shard");
  }
  if (get<std::uint32_t>(is) != kShardVersion) throw DataError("shard: unsupported version");
  VqaShard shard;
  shard.length = get<std::uint64_t>(is);
  const auto count = get<std::uint64_t>(is);
  if (shard.length == 0 || shard.length > (1u << 24)) throw DataError("shard: corrupt length");
  for (std::uint64_t i = 0; i < count; ++i) {
    ByteSample s;
    s.input.resize(shard.length);
    for (auto& id : s.input) {
      id = get<std::uint16_t>(is);
      if (id > kPadId) throw DataError("shard: corrupt id");
    }
    s.mask.resize(shard.length);
    if (!is.read(reinterpret_cast<char*>(s.mask.data()), static_cast<std::streamsize>(shard.length))) {
      throw DataError("shard: truncated file");
    }
    const auto type = get<std::uint8_t>(is);
    const auto answer = get<std::uint8_t>(is);
    if (type > static_cast<std::uint8_t>(QuestionType::query_attribute)) throw DataError("shard: corrupt type");
    s.target = s.input;
    s.provenance = "vqa:" + to_string(static_cast<QuestionType>(type));
    shard.samples.push_back(std::move(s));
    shard.types.push_back(static_cast<QuestionType>(type));
    shard.answers.push_back(answer);
  }
  return shard;
}

// ---------------------------------------------------------------------------

std::vector<VqaRecord> synth_vqa(std::size_t count, std::uint64_t seed,
                                 const std::vector<std::string>& answers, const SynthVqaOptions& o) {
  struct Color {
    const char* name;
    std::array<int, 3> rgb;
  };
  // Channel means sit mid-bucket for 3-bit levels so jitter never crosses one.
  static const Color kColors[] = {{"red", {208, 48, 48}},
                                  {"green", {48, 208, 48}},
                                  {"blue", {48, 48, 208}},
                                  {"yellow", {208, 208, 48}}};
  const std::size_t cells = o.grid * o.grid;
  if (o.max_squares < 1 || o.max_squares > cells) throw std::invalid_argument("synth: bad square count");
  const std::size_t side = o.grid * o.cell;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> jitter(-o.noise, o.noise);
  std::uniform_int_distribution<int> color_pick(0, 3);
  std::uniform_int_distribution<std::size_t> square_count(1, o.max_squares);
  std::bernoulli_distribution coin(0.5);

  std::vector<VqaRecord> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    std::vector<int> grid(cells, -1);
    std::vector<std::size_t> slots(cells);
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    std::shuffle(slots.begin(), slots.end(), rng);
    const std::size_t k = square_count(rng);
    for (std::size_t i = 0; i < k; ++i) grid[slots[i]] = color_pick(rng);

    VqaRecord r;
    r.height = side;
    r.width = side;
    r.image.resize(side * side * 3);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const int c = grid[(y / o.cell) * o.grid + x / o.cell];
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const int base = c < 0 ? 0 : kColors[c].rgb[ch];
          r.image[(y * side + x) * 3 + ch] =
              static_cast<std::uint8_t>(std::clamp(base + (c < 0 ? std::abs(jitter(rng)) : jitter(rng)), 0, 255));
        }
      }
    }
    int present[4] = {0, 0, 0, 0};
    for (int c : grid) {
      if (c >= 0) ++present[c];
    }
    const int asked = color_pick(rng);
    if (coin(rng)) {
      r.type = QuestionType::exists;
      r.question = std::string("Is there a ") + kColors[asked].name + " square?";
      r.answer_id = answer_id(answers, present[asked] > 0 ? "yes" : "no");
    } else {
      r.type = QuestionType::count;
      r.question = std::string("How many ") + kColors[asked].name + " squares are there?";
      r.answer_id = answer_id(answers, std::to_string(present[asked]));
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mblm
