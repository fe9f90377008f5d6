#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "mblm/data.hpp"

namespace mblm {

// Byte, word and optional subword counts of an evaluation corpus.
struct CorpusStats {
  std::uint64_t bytes = 0;
  std::uint64_t words = 0;
  std::optional<std::uint64_t> subwords;

  double bytes_per_word() const;
};

// Words are maximal runs without space, \n, \r, \t or \f.
std::uint64_t count_words(std::span<const std::uint8_t> bytes);
CorpusStats corpus_stats(std::span<const std::uint8_t> bytes);

// All NLLs are natural-log means per unit.
double bpb_from_byte_nll(double nll);
double bpb_from_subword_nll(double nll, const CorpusStats& stats);
// ln(PPL_word) = (L_B / L_W) * nll; the ppl itself may overflow to inf.
double word_log_ppl_from_byte_nll(double nll, const CorpusStats& stats);
double word_ppl_from_byte_nll(double nll, const CorpusStats& stats);
double word_ppl_from_subword_ppl(double ppl, double subwords_per_word);

inline constexpr std::size_t kQuestionTypes = 5;

struct VqaAccuracy {
  std::array<std::size_t, kQuestionTypes> correct{};
  std::array<std::size_t, kQuestionTypes> total{};

  // NaN for a type without samples.
  double of(QuestionType type) const;
  double overall() const;
  std::size_t count() const;
};

VqaAccuracy vqa_accuracy(std::span<const int> predictions, std::span<const int> answers,
                         std::span<const QuestionType> types);

struct EvalReport {
  std::string split;
  std::size_t context_length = 0;
  std::uint64_t step = 0;
  double nll = 0.0;
  std::uint64_t scored = 0;  // positions that contributed to nll
  std::uint64_t samples = 0;
  std::optional<CorpusStats> stats;
  std::optional<VqaAccuracy> vqa;
  std::uint64_t config_hash = 0;

  double bpb() const { return bpb_from_byte_nll(nll); }
  std::string to_json() const;  // single line
};

void append_jsonl(const std::string& path, const std::string& line);

}  // namespace mblm
