#include "mblm/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace mblm {

namespace {

void check_nll(double nll) {
  if (!(nll >= 0.0)) throw std::invalid_argument("metrics: nll must be a non-negative number");
}

bool is_space(std::uint8_t b) { return b == ' ' || b == '\n' || b == '\r' || b == '\t' || b == '\f'; }

}  // namespace

double CorpusStats::bytes_per_word() const {
  if (bytes == 0 || words == 0) throw std::invalid_argument("metrics: byte and word counts must be > 0");
  return static_cast<double>(bytes) / static_cast<double>(words);
}

std::uint64_t count_words(std::span<const std::uint8_t> bytes) {
  std::uint64_t n = 0;
  bool in_word = false;
  for (auto b : bytes) {
    const bool word = !is_space(b);
    n += word && !in_word;
    in_word = word;
  }
  return n;
}

CorpusStats corpus_stats(std::span<const std::uint8_t> bytes) {
  return {bytes.size(), count_words(bytes), std::nullopt};
}

double bpb_from_byte_nll(double nll) {
  check_nll(nll);
  return nll / std::numbers::ln2;
}

double bpb_from_subword_nll(double nll, const CorpusStats& stats) {
  check_nll(nll);
  if (!stats.subwords || *stats.subwords == 0 || stats.bytes == 0) {
    throw std::invalid_argument("metrics: subword and byte counts must be > 0");
  }
  return static_cast<double>(*stats.subwords) / static_cast<double>(stats.bytes) * nll / std::numbers::ln2;
}

double word_log_ppl_from_byte_nll(double nll, const CorpusStats& stats) {
  check_nll(nll);
  return stats.bytes_per_word() * nll;
}

double word_ppl_from_byte_nll(double nll, const CorpusStats& stats) {
  return std::exp(word_log_ppl_from_byte_nll(nll, stats));
}

double word_ppl_from_subword_ppl(double ppl, double subwords_per_word) {
  if (!(ppl >= 1.0)) throw std::invalid_argument("metrics: subword perplexity below 1 implies a negative nll");
  if (!(subwords_per_word > 0.0)) throw std::invalid_argument("metrics: subwords per word must be > 0");
  return std::pow(ppl, subwords_per_word);
}

double VqaAccuracy::of(QuestionType type) const {
  const auto i = static_cast<std::size_t>(type);
  if (total[i] == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(correct[i]) / static_cast<double>(total[i]);
}

std::size_t VqaAccuracy::count() const {
  std::size_t n = 0;
  for (auto t : total) n += t;
  return n;
}

double VqaAccuracy::overall() const {
  std::size_t c = 0;
  for (auto v : correct) c += v;
  const auto n = count();
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(c) / static_cast<double>(n);
}

VqaAccuracy vqa_accuracy(std::span<const int> predictions, std::span<const int> answers,
                         std::span<const QuestionType> types) {
  if (predictions.size() != answers.size() || answers.size() != types.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(answers.size()) + " records");
  }
  VqaAccuracy acc;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto t = static_cast<std::size_t>(types[i]);
    if (t >= kQuestionTypes) throw std::invalid_argument("metrics: unknown question type");
    ++acc.total[t];
    acc.correct[t] += predictions[i] == answers[i];
  }
  return acc;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["split"] = split;
  j["step"] = step;
  j["context_length"] = context_length;
  j["samples"] = samples;
  j["scored"] = scored;
  j["nll"] = nll;
  j["bpb"] = bpb();
  if (stats) {
    j["bytes"] = stats->bytes;
    j["words"] = stats->words;
    if (stats->words > 0) {
      const double log_ppl = word_log_ppl_from_byte_nll(nll, *stats);
      j["word_log_ppl"] = log_ppl;
      if (std::isfinite(std::exp(log_ppl))) j["word_ppl"] = std::exp(log_ppl);
    }
    if (stats->subwords) j["subwords"] = *stats->subwords;
  }
  if (vqa) {
    j["accuracy"] = vqa->overall();
    nlohmann::ordered_json by_type, counts;
    for (auto t : {QuestionType::exists, QuestionType::count, QuestionType::compare_integer,
                   QuestionType::compare_attribute, QuestionType::query_attribute}) {
      const auto i = static_cast<std::size_t>(t);
      if (vqa->total[i] == 0) continue;
      by_type[to_string(t)] = vqa->of(t);
      counts[to_string(t)] = vqa->total[i];
    }
    j["accuracy_by_type"] = by_type;
    j["count_by_type"] = counts;
  }
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash));
  j["config_hash"] = hash;
  return j.dump();
}

void append_jsonl(const std::string& path, const std::string& line) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("metrics: cannot append to " + path);
  os << line << '\n';
}

}  // namespace mblm
