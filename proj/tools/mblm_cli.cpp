// mblm: train, eval, generate, serialize and bench over TOML configs.
//
// Exit codes: 0 success, 1 runtime failure, 2 config or IO error,
// 3 checkpoint does not match the config.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mblm/config.hpp"
#include "mblm/data.hpp"
#include "mblm/hierarchy.hpp"
#include "mblm/metrics.hpp"
#include "mblm/training.hpp"

using namespace mblm;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  bool dry_run = false;
};

RunConfig load_run(const Common& c) {
  if (c.config.empty()) throw UsageError("--config is required");
  auto overrides = c.overrides;
  if (c.seed) overrides.push_back("train.seed=" + std::to_string(*c.seed));
  RunConfig rc = load_config(c.config, overrides);
  validate(rc);
  return rc;
}

std::size_t context_of(const RunConfig& rc, const ValidatedConfig& vc) {
  return rc.data.context_length > 0 ? rc.data.context_length : vc.max_length();
}

std::vector<std::size_t> parse_lengths(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--lengths must be a comma separated list of positive integers");
    }
    out.push_back(std::stoul(part));
    if (out.back() == 0) throw UsageError("--lengths must be positive");
  }
  if (out.empty()) throw UsageError("--lengths is empty");
  return out;
}

void print_plan(const RunConfig& rc, const ValidatedConfig& vc) {
  const std::size_t length = context_of(rc, vc);
  nlohmann::ordered_json j;
  j["max_length"] = vc.max_length();
  j["context_length"] = length;
  j["micro_batch"] = rc.train.micro_batch;
  std::vector<std::size_t> packed;
  for (std::size_t i = 0; i < vc.num_stages(); ++i) packed.push_back(vc.packed_batch(i, rc.train.micro_batch, length));
  j["packed_batch"] = packed;
  j["parameters"] = count_parameters(vc);
  std::printf("L_max %zu\n", vc.max_length());
  for (std::size_t i = 0; i < packed.size(); ++i) {
    std::printf("stage %zu  P %zu  D %zu  K %zu\n", i + 1, vc.stage(i).patch_size, vc.stage(i).width, packed[i]);
  }
  std::printf("parameters %zu\n", count_parameters(vc));
  std::printf("%s\n", j.dump().c_str());
}

Checkpoint checkpoint_for(const std::string& path, Mblm& model) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  Checkpoint c = read_checkpoint(path);
  load_parameters(model, c);
  return c;
}

void emit(const std::string& out_file, const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (!out_file.empty()) append_jsonl(out_file, line);
}

// ---------------------------------------------------------------------------

int cmd_train(const Common& c, bool resume, std::size_t max_steps) {
  const RunConfig rc = load_run(c);
  const ValidatedConfig vc = validate(rc.model);
  if (c.dry_run) {
    print_plan(rc, vc);
    return 0;
  }
  const std::size_t length = context_of(rc, vc);
  const fs::path out = c.out.empty() ? fs::path("runs/latest") : fs::path(c.out);
  fs::create_directories(out);
  {
    std::ofstream cfg(out / "config.toml");
    cfg << to_toml(rc);
  }
  Mblm model(vc, rc.train.seed);
  Trainer trainer(model, rc.train);
  FitOptions opts;
  opts.out_dir = out.string();
  opts.resume = resume;
  opts.max_steps = max_steps;
  opts.checkpoint_every = rc.train.eval_every;
  opts.on_step = [&](const StepResult& s) {
    if (s.step == 1 || s.step % std::max<std::size_t>(rc.train.log_every, 1) == 0 || s.step == rc.train.total_steps) {
      std::fprintf(stderr, "step %zu  loss %.4f  bpb %.4f  lr %.3g  grad %.3f\n", s.step, s.loss,
                   s.loss / std::log(2.0), s.lr, s.grad_norm);
    }
  };

  EvalReport final_report;
  if (rc.data.kind == DataKind::text) {
    const ByteCorpus corpus = load_corpus(rc.data.corpus);
    const CorpusSplits splits = split_corpus(corpus, rc.data.val_fraction, rc.data.test_fraction);
    WindowSampler sampler(splits.train.bytes, length, rc.train.seed);
    const std::size_t eval_bytes = rc.train.eval_batches * rc.train.micro_batch * length;
    if (!splits.val.bytes.empty()) {
      opts.evaluate = [&](const Mblm& m, std::size_t) {
        return evaluate_text(m, splits.val.bytes, length, rc.train.micro_batch, eval_bytes);
      };
    }
    fit(trainer, sampler, opts);
    const auto& test = splits.test.bytes.empty() ? splits.val.bytes : splits.test.bytes;
    if (!test.empty()) {
      final_report = evaluate_text(model, test, length, rc.train.micro_batch);
      final_report.split = splits.test.bytes.empty() ? "val" : "test";
    }
  } else {
    const VqaShard train = read_vqa_shard(rc.data.train_shard);
    if (train.length != length) {
      throw ConfigError({"data.context_length " + std::to_string(length) + " differs from the shard length " +
                         std::to_string(train.length)});
    }
    std::optional<VqaShard> val;
    if (!rc.data.val_shard.empty()) val = read_vqa_shard(rc.data.val_shard);
    ShuffledSamples sampler(train.samples, rc.train.seed);
    if (val) {
      const std::size_t n = rc.train.eval_batches * rc.train.micro_batch;
      opts.evaluate = [&](const Mblm& m, std::size_t) { return evaluate_vqa(m, *val, rc.train.micro_batch, n); };
    }
    fit(trainer, sampler, opts);
    if (val) {
      final_report = evaluate_vqa(model, *val, rc.train.micro_batch);
      final_report.split = "val";
    }
  }
  if (final_report.samples > 0) {
    final_report.step = trainer.step();
    emit((out / "final_eval.jsonl").string(), final_report.to_json());
  }
  return 0;
}

int cmd_eval(const Common& c, const std::string& lengths_text, const std::string& split, std::size_t max_bytes) {
  const RunConfig rc = load_run(c);
  const ValidatedConfig vc = validate(rc.model);
  if (c.dry_run) {
    print_plan(rc, vc);
    return 0;
  }
  Mblm model(vc, rc.train.seed);
  const Checkpoint ckpt = checkpoint_for(c.checkpoint, model);
  std::uint64_t step = 0;
  try {
    step = nlohmann::json::parse(ckpt.metadata).value("step", std::uint64_t{0});
  } catch (const std::exception&) {
  }
  const std::string out_file = c.out.empty() ? "" : (fs::path(c.out) / "eval.jsonl").string();
  if (!c.out.empty()) fs::create_directories(c.out);

  if (rc.data.kind == DataKind::vqa) {
    const std::string path = rc.data.val_shard.empty() ? rc.data.train_shard : rc.data.val_shard;
    EvalReport r = evaluate_vqa(model, read_vqa_shard(path), rc.train.micro_batch);
    r.split = rc.data.val_shard.empty() ? "train" : "val";
    r.step = step;
    emit(out_file, r.to_json());
    return 0;
  }
  const std::vector<std::size_t> lengths =
      lengths_text.empty() ? std::vector<std::size_t>{context_of(rc, vc)} : parse_lengths(lengths_text);
  const ByteCorpus corpus = load_corpus(rc.data.corpus);
  const CorpusSplits splits = split_corpus(corpus, rc.data.val_fraction, rc.data.test_fraction);
  const ByteCorpus* part = split == "train" ? &splits.train : split == "val" ? &splits.val : &splits.test;
  if (split != "train" && split != "val" && split != "test") throw UsageError("--split must be train, val or test");
  for (std::size_t length : lengths) {
    EvalReport r = evaluate_text(model, part->bytes, length, rc.train.micro_batch, max_bytes);
    r.split = split;
    r.step = step;
    emit(out_file, r.to_json());
  }
  return 0;
}

int cmd_generate(const Common& c, const std::string& prompt_file, const std::string& prompt_text, std::size_t n,
                 const std::string& policy_text, bool quiet) {
  const RunConfig rc = load_run(c);
  const ValidatedConfig vc = validate(rc.model);
  const SamplingPolicy policy = SamplingPolicy::parse(policy_text);
  policy.check();
  if (c.dry_run) {
    print_plan(rc, vc);
    return 0;
  }
  std::vector<std::uint8_t> prompt(prompt_text.begin(), prompt_text.end());
  if (!prompt_file.empty()) prompt = ingest_filestream(prompt_file);
  if (!vc.config().allow_p1_extension && prompt.size() >= vc.max_length()) {
    throw UsageError("prompt of " + std::to_string(prompt.size()) + " bytes does not fit the context " +
                     std::to_string(vc.max_length()));
  }
  Mblm model(vc, rc.train.seed);
  checkpoint_for(c.checkpoint, model);
  const auto bytes = generate(model, prompt, n, policy, rc.train.seed);
  const std::vector<std::uint8_t> tail(bytes.end() - static_cast<std::ptrdiff_t>(n), bytes.end());
  if (!c.out.empty()) {
    if (fs::path(c.out).has_parent_path()) fs::create_directories(fs::path(c.out).parent_path());
    std::ofstream os(c.out, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("generate: cannot write " + c.out);
    os.write(reinterpret_cast<const char*>(tail.data()), static_cast<std::streamsize>(tail.size()));
  }
  if (!quiet) {
    // Lossy view: printable ASCII and newlines pass, everything else becomes '?'.
    std::string view;
    for (auto b : tail) view.push_back((b >= 32 && b < 127) || b == '\n' || b == '\t' ? static_cast<char>(b) : '?');
    std::printf("%s\n", view.c_str());
  }
  return 0;
}

int cmd_serialize(const Common& c, const std::string& input, const std::string& answers_path, const std::string& mode,
                  int bits, std::size_t length, std::size_t synth, const std::string& loss) {
  if (c.out.empty()) throw UsageError("--out is required");
  ImageEncoding enc;
  if (mode == "raw") enc.mode = ImageMode::raw;
  else if (mode == "discretized") enc.mode = ImageMode::discretized;
  else if (mode == "filestream") enc.mode = ImageMode::filestream;
  else throw UsageError("--mode must be raw, discretized or filestream");
  enc.bits = bits;
  if (bits < 1 || bits > 8) throw UsageError("--bits must be in [1, 8]");
  LossMask mask = loss == "full" ? LossMask::full : LossMask::answer;
  if (loss != "full" && loss != "answer") throw UsageError("--loss must be answer or full");

  if (!c.config.empty()) {
    const RunConfig rc = load_run(c);
    const ValidatedConfig vc = validate(rc.model);
    if (length == 0) length = context_of(rc, vc);
  }
  if (length == 0) throw UsageError("--length or --config is required");

  const auto table = load_answer_table(answers_path);
  std::vector<VqaRecord> records;
  if (synth > 0) {
    records = synth_vqa(synth, c.seed.value_or(0), table);
  } else {
    if (input.empty()) throw UsageError("--input or --synth is required");
    records = read_vqa_jsonl(input, table);
  }
  if (enc.mode == ImageMode::filestream) {
    for (const auto& r : records) {
      if (r.height != 0) throw UsageError("filestream mode needs image_path records");
    }
  }
  const VqaShard shard = make_vqa_shard(records, length, enc, mask);
  if (c.dry_run) {
    std::printf("%zu samples of %zu bytes\n", shard.samples.size(), length);
    return 0;
  }
  if (fs::path(c.out).has_parent_path()) fs::create_directories(fs::path(c.out).parent_path());
  write_vqa_shard(c.out, shard);
  nlohmann::ordered_json j;
  j["shard"] = c.out;
  j["samples"] = shard.samples.size();
  j["length"] = length;
  j["mode"] = mode;
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

int cmd_bench(const Common& c, const std::string& lengths_text, std::size_t bytes) {
  const RunConfig rc = load_run(c);
  const ValidatedConfig vc = validate(rc.model);
  const auto lengths = lengths_text.empty() ? std::vector<std::size_t>{vc.max_length()} : parse_lengths(lengths_text);
  if (c.dry_run) {
    print_plan(rc, vc);
    return 0;
  }
  Mblm model(vc, rc.train.seed);
  if (!c.checkpoint.empty()) checkpoint_for(c.checkpoint, model);
  const auto records = bench_generation(model, lengths, bytes, rc.train.seed);
  const std::string out_file = c.out.empty() ? "" : (fs::path(c.out) / "bench.jsonl").string();
  if (!c.out.empty()) fs::create_directories(c.out);
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["context_length"] = r.context_length;
    j["bytes"] = r.bytes;
    j["seconds_per_byte"] = r.seconds_per_byte;
    emit(out_file, j.dump());
  }
  if (records.size() >= 2) {
    nlohmann::ordered_json j;
    j["growth_exponent"] = growth_exponent(records);
    j["stages"] = vc.num_stages();
    emit(out_file, j.dump());
  }
  return 0;
}

void add_common(CLI::App* app, Common& c, bool needs_config = true) {
  auto* opt = app->add_option("--config", c.config, "TOML run config");
  if (needs_config) opt->required();
  app->add_option("--override", c.overrides, "dotted.key=value, repeatable");
  app->add_option("--seed", c.seed, "replaces train.seed");
  app->add_option("--out", c.out, "output directory (file for generate and serialize)");
  app->add_flag("--dry-run", c.dry_run, "validate and print the plan without running");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale byte language model"};
  app.require_subcommand(1);
  Common c;

  auto* train = app.add_subcommand("train", "fit a model");
  add_common(train, c);
  bool resume = false;
  train->add_flag("--resume", resume, "continue from <out>/last.ckpt");
  std::size_t max_steps = 0;
  train->add_option("--max-steps", max_steps, "stop this invocation after so many steps");

  auto* eval = app.add_subcommand("eval", "score a checkpoint");
  add_common(eval, c);
  eval->add_option("--checkpoint", c.checkpoint)->required();
  std::string lengths, split = "test";
  std::size_t max_bytes = 0;
  eval->add_option("--lengths", lengths, "comma separated context lengths");
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--max-bytes", max_bytes, "score at most this many bytes");

  auto* gen = app.add_subcommand("generate", "sample bytes");
  add_common(gen, c);
  gen->add_option("--checkpoint", c.checkpoint)->required();
  std::string prompt_file, prompt_text, policy = "greedy";
  std::size_t n = 256;
  bool quiet = false;
  gen->add_option("--prompt", prompt_file, "prompt file");
  gen->add_option("--prompt-text", prompt_text, "prompt given inline");
  gen->add_option("-n,--bytes", n, "bytes to generate");
  gen->add_option("--policy", policy, "greedy | temperature:T | top_k:K[:T]");
  gen->add_flag("--quiet", quiet, "do not print the text view");

  auto* ser = app.add_subcommand("serialize", "build a VQA sample shard");
  add_common(ser, c, false);
  std::string input, answers = "data/vqa/answers.txt", mode = "raw", loss = "answer";
  int bits = 3;
  std::size_t length = 0, synth = 0;
  ser->add_option("--input", input, "JSON lines records");
  ser->add_option("--answers", answers, "answer table");
  ser->add_option("--mode", mode, "raw | discretized | filestream");
  ser->add_option("--bits", bits, "color bits for discretized mode");
  ser->add_option("--length", length, "sample length (defaults to the config context)");
  ser->add_option("--synth", synth, "generate this many colored-square records instead of reading --input");
  ser->add_option("--loss", loss, "answer | full");

  auto* bench = app.add_subcommand("bench", "time generation against context length");
  add_common(bench, c);
  bench->add_option("--checkpoint", c.checkpoint);
  std::size_t bench_bytes = 4;
  bench->add_option("--lengths", lengths, "comma separated context lengths");
  bench->add_option("--bytes", bench_bytes, "bytes generated per length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(c, resume, max_steps);
    if (*eval) return cmd_eval(c, lengths, split, max_bytes);
    if (*gen) return cmd_generate(c, prompt_file, prompt_text, n, policy, quiet);
    if (*ser) return cmd_serialize(c, input, answers, mode, bits, length, synth, loss);
    if (*bench) return cmd_bench(c, lengths, bench_bytes);
  } catch (const CheckpointMismatch& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::string line;
    for (const auto& v : e.violations()) line += (line.empty() ? "config: " : "; ") + v;
    std::fprintf(stderr, "%s\n", line.c_str());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
