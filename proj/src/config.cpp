#include "mblm/config.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <toml.hpp>

namespace mblm {

namespace {

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> violations)
    : std::runtime_error("config: " + join(violations, "; ")), violations_(std::move(violations)) {}

std::string to_string(StageKind kind) {
  return kind == StageKind::transformer ? "transformer" : "selective_ssm";
}

std::string to_string(PosEmbedding pos) {
  switch (pos) {
    case PosEmbedding::none:
      return "none";
    case PosEmbedding::learned_absolute:
      return "learned_absolute";
    case PosEmbedding::rotary:
      return "rotary";
  }
  return "none";
}

namespace {

std::string scan_name(ops::ScanAlgorithm s) {
  return s == ops::ScanAlgorithm::sequential ? "sequential" : "associative";
}

}  // namespace

// ---------------------------------------------------------------------------
// validation

std::vector<std::string> violations(const HierarchyConfig& c) {
  std::vector<std::string> out;
  if (c.stages.empty()) out.push_back("stages: at least one stage is required");
  if (c.vocab_size != kVocabSize) {
    out.push_back("vocab_size must be " + std::to_string(kVocabSize));
  }
  if (c.pad_id != kPadId) out.push_back("pad_id must be " + std::to_string(kPadId));
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& s = c.stages[i];
    const std::string at = " at stage " + std::to_string(i + 1);
    if (s.patch_size < 1) out.push_back("patch_size must be ≥ 1" + at);
    if (s.width < 1) out.push_back("width must be ≥ 1" + at);
    if (s.layers < 1) out.push_back("layers must be ≥ 1" + at);
    if (s.chunk_count < 1) out.push_back("chunk_count must be ≥ 1" + at);
    if (i == 0 && s.chunk_count != 1) out.push_back("chunk_count must be 1" + at);
    if (!(s.dropout >= 0.0f && s.dropout < 1.0f)) out.push_back("dropout must be in [0, 1)" + at);
    if (s.kind == StageKind::transformer) {
      if (s.heads < 1) {
        out.push_back("heads must be ≥ 1" + at);
      } else if (s.width % s.heads != 0) {
        out.push_back("width must be divisible by heads" + at);
      } else if (s.pos_embedding == PosEmbedding::rotary && (s.width / s.heads) % 2 != 0) {
        out.push_back("rotary needs an even head width" + at);
      }
    } else {
      if (s.state_size < 1) out.push_back("state_size must be ≥ 1" + at);
      if (s.pos_embedding == PosEmbedding::rotary) {
        out.push_back("rotary positions require a transformer stage" + at);
      }
    }
  }
  if (c.allow_p1_extension && !c.stages.empty() &&
      c.stages[0].pos_embedding == PosEmbedding::learned_absolute) {
    out.push_back("allow_p1_extension requires no absolute positional embedding at stage 1");
  }
  return out;
}

std::vector<std::string> violations(const TrainConfig& c) {
  std::vector<std::string> out;
  if (!(c.peak_lr > 0.0)) out.push_back("train.peak_lr must be > 0");
  if (!(c.warmup_fraction > 0.0 && c.warmup_fraction < 1.0)) {
    out.push_back("train.warmup_fraction must be in (0, 1)");
  }
  if (!(c.min_lr >= 0.0 && c.min_lr <= c.peak_lr)) {
    out.push_back("train.min_lr must be in [0, peak_lr]");
  }
  if (!(c.grad_clip_norm > 0.0)) out.push_back("train.grad_clip_norm must be > 0");
  if (c.accumulation < 1) out.push_back("train.accumulation must be ≥ 1");
  if (c.micro_batch < 1) out.push_back("train.micro_batch must be ≥ 1");
  auto beta_ok = [](double b) { return b >= 0.0 && b < 1.0; };
  if (!beta_ok(c.betas.first) || !beta_ok(c.betas.second)) {
    out.push_back("train.betas must lie in [0, 1)");
  }
  if (!(c.eps > 0.0)) out.push_back("train.eps must be > 0");
  if (!(c.weight_decay >= 0.0)) out.push_back("train.weight_decay must be ≥ 0");
  if (!(c.max_seconds >= 0.0)) out.push_back("train.max_seconds must be ≥ 0");
  return out;
}

std::vector<std::string> violations(const DataConfig& c) {
  std::vector<std::string> out;
  if (!(c.val_fraction >= 0.0 && c.test_fraction >= 0.0 &&
        c.val_fraction + c.test_fraction < 1.0)) {
    out.push_back("data: val_fraction + test_fraction must be in [0, 1)");
  }
  return out;
}

ValidatedConfig validate(const HierarchyConfig& config) {
  auto v = violations(config);
  if (!v.empty()) throw ConfigError(std::move(v));
  return ValidatedConfig(config);
}

void validate(const TrainConfig& config) {
  auto v = violations(config);
  if (!v.empty()) throw ConfigError(std::move(v));
}

void validate(const RunConfig& config) {
  auto v = violations(config.model);
  for (auto& m : violations(config.train)) v.push_back(std::move(m));
  for (auto& m : violations(config.data)) v.push_back(std::move(m));
  if (v.empty() && config.data.context_length > 0) {
    std::size_t lmax = 1;
    for (const auto& s : config.model.stages) lmax *= s.patch_size;
    if (config.data.context_length > lmax && !config.model.allow_p1_extension) {
      v.push_back("data.context_length exceeds L_max = " + std::to_string(lmax));
    }
  }
  if (!v.empty()) throw ConfigError(std::move(v));
}

std::size_t ValidatedConfig::max_length() const {
  std::size_t n = 1;
  for (const auto& s : config_.stages) n *= s.patch_size;
  return n;
}

std::size_t ValidatedConfig::inner_span(std::size_t i) const {
  std::size_t n = 1;
  for (std::size_t j = i + 1; j < config_.stages.size(); ++j) n *= config_.stages[j].patch_size;
  return n;
}

void ValidatedConfig::check_length(std::size_t length) const {
  if (length < 1) throw std::invalid_argument("length: sequence must contain at least one byte");
  if (length > max_length() && !config_.allow_p1_extension) {
    throw std::invalid_argument("length: " + std::to_string(length) + " exceeds L_max = " +
                                std::to_string(max_length()) + " (P_1 extension disabled)");
  }
}

std::size_t ValidatedConfig::outer_patches(std::size_t length) const {
  check_length(length);
  const std::size_t span = inner_span(0);
  return (length + span - 1) / span;
}

std::size_t ValidatedConfig::packed_batch(std::size_t i, std::size_t batch,
                                          std::size_t length) const {
  if (i >= config_.stages.size()) throw std::out_of_range("packed_batch: stage index");
  if (i == 0) return batch;
  std::size_t k = batch * outer_patches(length);
  for (std::size_t j = 1; j < i; ++j) k *= config_.stages[j].patch_size;
  return k;
}

// ---------------------------------------------------------------------------
// TOML

namespace {

class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  void expect_keys(const toml::table& t, const std::string& where,
                   const std::set<std::string>& allowed) {
    for (const auto& [k, v] : t) {
      (void)v;
      if (!allowed.count(std::string(k.str()))) {
        errors_.push_back(where + ": unknown key '" + std::string(k.str()) + "'");
      }
    }
  }

  void count(const toml::table& t, const std::string& where, const char* key, std::size_t& out) {
    const auto* node = t.get(key);
    if (!node) return;
    if (auto v = node->value_exact<int64_t>()) {
      if (*v < 0) {
        errors_.push_back(where + "." + key + " must be a non-negative integer");
      } else {
        out = static_cast<std::size_t>(*v);
      }
      return;
    }
    errors_.push_back(where + "." + key + " must be an integer");
  }

  void u64(const toml::table& t, const std::string& where, const char* key, std::uint64_t& out) {
    std::size_t v = out;
    count(t, where, key, v);
    out = v;
  }

  template <class F>
  void real(const toml::table& t, const std::string& where, const char* key, F& out) {
    const auto* node = t.get(key);
    if (!node) return;
    if (auto v = node->value<double>(); v && (node->is_floating_point() || node->is_integer())) {
      out = static_cast<F>(*v);
      return;
    }
    errors_.push_back(where + "." + key + " must be a number");
  }

  void flag(const toml::table& t, const std::string& where, const char* key, bool& out) {
    const auto* node = t.get(key);
    if (!node) return;
    if (auto v = node->value_exact<bool>()) {
      out = *v;
      return;
    }
    errors_.push_back(where + "." + key + " must be a boolean");
  }

  void text(const toml::table& t, const std::string& where, const char* key, std::string& out) {
    const auto* node = t.get(key);
    if (!node) return;
    if (auto v = node->value_exact<std::string>()) {
      out = *v;
      return;
    }
    errors_.push_back(where + "." + key + " must be a string");
  }

  template <class E>
  void choice(const toml::table& t, const std::string& where, const char* key, E& out,
              const std::vector<std::pair<std::string, E>>& options) {
    std::string name;
    bool present = t.contains(key);
    text(t, where, key, name);
    if (!present || name.empty()) return;
    for (const auto& [n, e] : options) {
      if (n == name) {
        out = e;
        return;
      }
    }
    std::vector<std::string> names;
    for (const auto& o : options) names.push_back(o.first);
    errors_.push_back(where + "." + key + " must be one of {" + join(names, ", ") + "}, got '" +
                      name + "'");
  }

 private:
  std::vector<std::string>& errors_;
};

StageConfig read_stage(const toml::table& t, const std::string& where, Reader& r) {
  StageConfig s;
  r.expect_keys(t, where,
                {"kind", "patch_size", "width", "layers", "chunk_count", "pos_embedding", "dropout",
                 "heads", "rotary_base", "state_size", "scan"});
  r.choice(t, where, "kind", s.kind,
           {{"transformer", StageKind::transformer}, {"selective_ssm", StageKind::selective_ssm}});
  // Selective SSM stages default to no positional information.
  if (s.kind == StageKind::selective_ssm) s.pos_embedding = PosEmbedding::none;
  r.count(t, where, "patch_size", s.patch_size);
  r.count(t, where, "width", s.width);
  r.count(t, where, "layers", s.layers);
  r.count(t, where, "chunk_count", s.chunk_count);
  r.choice(t, where, "pos_embedding", s.pos_embedding,
           {{"none", PosEmbedding::none},
            {"learned_absolute", PosEmbedding::learned_absolute},
            {"rotary", PosEmbedding::rotary}});
  r.real(t, where, "dropout", s.dropout);
  r.count(t, where, "heads", s.heads);
  r.real(t, where, "rotary_base", s.rotary_base);
  r.count(t, where, "state_size", s.state_size);
  r.choice(t, where, "scan", s.scan,
           {{"sequential", ops::ScanAlgorithm::sequential},
            {"associative", ops::ScanAlgorithm::associative}});
  return s;
}

RunConfig read_run(const toml::table& root) {
  std::vector<std::string> errors;
  Reader r(errors);
  RunConfig cfg;
  r.expect_keys(root, "config", {"model", "train", "data"});

  if (const auto* model = root["model"].as_table()) {
    r.expect_keys(*model, "model", {"stages", "allow_p1_extension", "vocab_size", "pad_id"});
    r.flag(*model, "model", "allow_p1_extension", cfg.model.allow_p1_extension);
    r.count(*model, "model", "vocab_size", cfg.model.vocab_size);
    std::size_t pad = static_cast<std::size_t>(cfg.model.pad_id);
    r.count(*model, "model", "pad_id", pad);
    cfg.model.pad_id = static_cast<std::int32_t>(pad);
    if (const auto* node = model->get("stages")) {
      if (const auto* arr = node->as_array()) {
        for (std::size_t i = 0; i < arr->size(); ++i) {
          const std::string where = "model.stages[" + std::to_string(i + 1) + "]";
          if (const auto* st = (*arr)[i].as_table()) {
            cfg.model.stages.push_back(read_stage(*st, where, r));
          } else {
            errors.push_back(where + " must be a table");
          }
        }
      } else {
        errors.push_back("model.stages must be an array of tables");
      }
    }
  } else if (root.contains("model")) {
    errors.push_back("model must be a table");
  }

  if (const auto* train = root["train"].as_table()) {
    auto& t = cfg.train;
    r.expect_keys(*train, "train",
                  {"peak_lr", "warmup_fraction", "min_lr", "total_steps", "betas", "eps",
                   "weight_decay", "grad_clip_norm", "accumulation", "micro_batch", "seed",
                   "eval_every", "eval_batches", "log_every", "max_seconds"});
    r.real(*train, "train", "peak_lr", t.peak_lr);
    r.real(*train, "train", "warmup_fraction", t.warmup_fraction);
    r.real(*train, "train", "min_lr", t.min_lr);
    r.count(*train, "train", "total_steps", t.total_steps);
    if (const auto* node = train->get("betas")) {
      const auto* arr = node->as_array();
      if (arr && arr->size() == 2 && (*arr)[0].value<double>() && (*arr)[1].value<double>()) {
        t.betas = {*(*arr)[0].value<double>(), *(*arr)[1].value<double>()};
      } else {
        errors.push_back("train.betas must be an array of two numbers");
      }
    }
    r.real(*train, "train", "eps", t.eps);
    r.real(*train, "train", "weight_decay", t.weight_decay);
    r.real(*train, "train", "grad_clip_norm", t.grad_clip_norm);
    r.count(*train, "train", "accumulation", t.accumulation);
    r.count(*train, "train", "micro_batch", t.micro_batch);
    r.u64(*train, "train", "seed", t.seed);
    r.count(*train, "train", "eval_every", t.eval_every);
    r.count(*train, "train", "eval_batches", t.eval_batches);
    r.count(*train, "train", "log_every", t.log_every);
    r.real(*train, "train", "max_seconds", t.max_seconds);
  }

  if (const auto* data = root["data"].as_table()) {
    auto& d = cfg.data;
    r.expect_keys(*data, "data",
                  {"kind", "corpus", "context_length", "val_fraction", "test_fraction",
                   "train_shard", "val_shard", "loss_mask"});
    r.choice(*data, "data", "kind", d.kind, {{"text", DataKind::text}, {"vqa", DataKind::vqa}});
    r.text(*data, "data", "corpus", d.corpus);
    r.count(*data, "data", "context_length", d.context_length);
    r.real(*data, "data", "val_fraction", d.val_fraction);
    r.real(*data, "data", "test_fraction", d.test_fraction);
    r.text(*data, "data", "train_shard", d.train_shard);
    r.text(*data, "data", "val_shard", d.val_shard);
    r.choice(*data, "data", "loss_mask", d.loss_mask,
             {{"answer", LossMask::answer}, {"full", LossMask::full}});
  }

  if (!errors.empty()) throw ConfigError(std::move(errors));
  return cfg;
}

bool is_index(const std::string& s) {
  return !s.empty() && s.find_first_not_of("0123456789") == std::string::npos;
}

// Applies "a.b.c=value" to the parsed document. The value is read as a TOML
// literal when possible and as a bare string otherwise.
void apply_override(toml::table& root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError({"override '" + spec + "' must look like key=value"});
  }
  const std::string key = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  std::vector<std::string> path;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) path.push_back(part);

  toml::node_view<toml::node> cursor{root};
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    const auto& part = path[i];
    if (is_index(part)) {
      auto* arr = cursor.as_array();
      const std::size_t idx = std::stoul(part);
      if (!arr || idx >= arr->size()) {
        throw ConfigError({"override '" + key + "': no element " + part});
      }
      cursor = toml::node_view<toml::node>{arr->get(idx)};
    } else {
      auto* tbl = cursor.as_table();
      if (!tbl) throw ConfigError({"override '" + key + "': '" + part + "' is not a table"});
      if (!tbl->contains(part)) tbl->insert(part, toml::table{});
      cursor = toml::node_view<toml::node>{tbl->get(part)};
    }
  }

  toml::table parsed;
  try {
    parsed = toml::parse("v = " + raw);
  } catch (const toml::parse_error&) {
    parsed = toml::table{{"v", raw}};
  }
  const auto& leaf = path.back();
  if (auto* tbl = cursor.as_table()) {
    tbl->insert_or_assign(leaf, *parsed.get("v"));
  } else if (auto* arr = cursor.as_array(); arr && is_index(leaf)) {
    const std::size_t idx = std::stoul(leaf);
    if (idx >= arr->size()) throw ConfigError({"override '" + key + "': no element " + leaf});
    arr->replace(arr->begin() + static_cast<std::ptrdiff_t>(idx), *parsed.get("v"));
  } else {
    throw ConfigError({"override '" + key + "': parent is not a table"});
  }
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError({os.str()});
  }
  for (const auto& o : overrides) apply_override(root, o);
  RunConfig cfg = read_run(root);
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError({"cannot read config file '" + path + "'"});
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), overrides);
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  std::string s = os.str();
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quoted(const std::string& s) {
  std::ostringstream os;
  os << toml::value<std::string>(s);
  return os.str();
}

void write_model(std::ostringstream& os, const HierarchyConfig& m) {
  os << "[model]\n";
  os << "allow_p1_extension = " << (m.allow_p1_extension ? "true" : "false") << "\n";
  os << "vocab_size = " << m.vocab_size << "\n";
  os << "pad_id = " << m.pad_id << "\n";
  for (const auto& s : m.stages) {
    os << "\n[[model.stages]]\n";
    os << "kind = \"" << to_string(s.kind) << "\"\n";
    os << "patch_size = " << s.patch_size << "\n";
    os << "width = " << s.width << "\n";
    os << "layers = " << s.layers << "\n";
    os << "chunk_count = " << s.chunk_count << "\n";
    os << "pos_embedding = \"" << to_string(s.pos_embedding) << "\"\n";
    os << "dropout = " << num(s.dropout) << "\n";
    os << "heads = " << s.heads << "\n";
    os << "rotary_base = " << num(s.rotary_base) << "\n";
    os << "state_size = " << s.state_size << "\n";
    os << "scan = \"" << scan_name(s.scan) << "\"\n";
  }
}

}  // namespace

std::string to_toml(const HierarchyConfig& config) {
  std::ostringstream os;
  write_model(os, config);
  return os.str();
}

std::string to_toml(const RunConfig& c) {
  std::ostringstream os;
  write_model(os, c.model);
  const auto& t = c.train;
  os << "\n[train]\n";
  os << "peak_lr = " << num(t.peak_lr) << "\n";
  os << "warmup_fraction = " << num(t.warmup_fraction) << "\n";
  os << "min_lr = " << num(t.min_lr) << "\n";
  os << "total_steps = " << t.total_steps << "\n";
  os << "betas = [" << num(t.betas.first) << ", " << num(t.betas.second) << "]\n";
  os << "eps = " << num(t.eps) << "\n";
  os << "weight_decay = " << num(t.weight_decay) << "\n";
  os << "grad_clip_norm = " << num(t.grad_clip_norm) << "\n";
  os << "accumulation = " << t.accumulation << "\n";
  os << "micro_batch = " << t.micro_batch << "\n";
  os << "seed = " << t.seed << "\n";
  os << "eval_every = " << t.eval_every << "\n";
  os << "eval_batches = " << t.eval_batches << "\n";
  os << "log_every = " << t.log_every << "\n";
  os << "max_seconds = " << num(t.max_seconds) << "\n";
  const auto& d = c.data;
  os << "\n[data]\n";
  os << "kind = \"" << (d.kind == DataKind::text ? "text" : "vqa") << "\"\n";
  os << "corpus = " << quoted(d.corpus) << "\n";
  os << "context_length = " << d.context_length << "\n";
  os << "val_fraction = " << num(d.val_fraction) << "\n";
  os << "test_fraction = " << num(d.test_fraction) << "\n";
  os << "train_shard = " << quoted(d.train_shard) << "\n";
  os << "val_shard = " << quoted(d.val_shard) << "\n";
  os << "loss_mask = \"" << (d.loss_mask == LossMask::answer ? "answer" : "full") << "\"\n";
  return os.str();
}

std::uint64_t config_hash(const HierarchyConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_toml(config)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace mblm
