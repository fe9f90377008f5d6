#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include <json.hpp>

#include "mblm/metrics.hpp"

using namespace mblm;

namespace {

// Test split of the long-book benchmark: bytes and whitespace words.
const CorpusStats kBookTest{41289101, 6966499, std::nullopt};

double nll_of_bpb(double bpb) { return bpb * std::log(2.0); }

}  // namespace

TEST_CASE("bpb from byte nll") {
  CHECK(bpb_from_byte_nll(std::log(2.0)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(bpb_from_byte_nll(std::log(256.0)) == doctest::Approx(8.0).epsilon(1e-15));
  CHECK(bpb_from_byte_nll(5.545) == doctest::Approx(8.0).epsilon(1e-3));
  CHECK(bpb_from_byte_nll(1.697) == doctest::Approx(2.448).epsilon(1e-3));
  CHECK(bpb_from_byte_nll(0.0) == 0.0);
  CHECK_THROWS_AS(bpb_from_byte_nll(-0.1), std::invalid_argument);
  CHECK_THROWS_AS(bpb_from_byte_nll(std::nan("")), std::invalid_argument);
}

TEST_CASE("bpb from subword nll") {
  CorpusStats same{100, 20, 100};
  CHECK(bpb_from_subword_nll(std::log(2.0), same) == doctest::Approx(1.0));
  CHECK(bpb_from_subword_nll(std::log(2.0), CorpusStats{4, 1, 2}) == doctest::Approx(0.5));
  for (double nll : {0.1, 0.9, 2.5}) {
    CHECK(bpb_from_subword_nll(nll, same) == doctest::Approx(bpb_from_byte_nll(nll)));
  }
  CHECK_THROWS_AS(bpb_from_subword_nll(1.0, CorpusStats{10, 2, std::nullopt}), std::invalid_argument);
  CHECK_THROWS_AS(bpb_from_subword_nll(1.0, CorpusStats{10, 2, 0}), std::invalid_argument);

  // Subword nll that spends the same bits on the same bytes lands on the same bpb.
  CorpusStats book = kBookTest;
  book.subwords = 11830000;
  const double byte_nll = nll_of_bpb(1.164);
  const double sub_nll = byte_nll * book.bytes / static_cast<double>(*book.subwords);
  CHECK(bpb_from_subword_nll(sub_nll, book) == doctest::Approx(1.164).epsilon(1e-12));
  CHECK(word_ppl_from_byte_nll(byte_nll, book) ==
        doctest::Approx(word_ppl_from_subword_ppl(std::exp(sub_nll), *book.subwords / double(book.words)))
            .epsilon(1e-9));
}

TEST_CASE("word perplexity from byte nll") {
  CHECK(kBookTest.bytes_per_word() == doctest::Approx(5.9268).epsilon(1e-4));
  CHECK(word_ppl_from_byte_nll(0.0, kBookTest) == 1.0);

  struct Pair {
    double bpb, ppl;
  };
  // Published (bpb, word ppl) pairs.
  for (auto [bpb, ppl] : {Pair{1.370, 278.79}, Pair{1.240, 163.29}, Pair{1.164, 119.37}, Pair{2.092, 5420.66},
                          Pair{2.089, 5351.71}}) {
    CAPTURE(bpb);
    const double got = word_ppl_from_byte_nll(nll_of_bpb(bpb), kBookTest);
    CHECK(std::abs(got - ppl) / ppl < 0.01);
  }
  CHECK(word_ppl_from_byte_nll(nll_of_bpb(1.164), kBookTest) == doctest::Approx(119.4).epsilon(0.01));
  CHECK(word_ppl_from_byte_nll(nll_of_bpb(1.370), kBookTest) == doctest::Approx(278.2).epsilon(0.01));

  SUBCASE("log space survives overflow") {
    const double nll = 200.0;
    CHECK(std::isinf(word_ppl_from_byte_nll(nll, kBookTest)));
    CHECK(word_log_ppl_from_byte_nll(nll, kBookTest) == doctest::Approx(200.0 * 5.9268).epsilon(1e-4));
  }
  CHECK_THROWS_AS(word_ppl_from_byte_nll(1.0, CorpusStats{10, 0, std::nullopt}), std::invalid_argument);
}

TEST_CASE("word perplexity from subword perplexity") {
  CHECK(word_ppl_from_subword_ppl(1.0, 3.7) == 1.0);
  CHECK(word_ppl_from_subword_ppl(10.0, 1.6982) == doctest::Approx(std::pow(10.0, 1.6982)));
  CHECK(word_ppl_from_subword_ppl(10.0, 1.6982) == doctest::Approx(49.9).epsilon(1e-3));
  CHECK(word_ppl_from_subword_ppl(37.5, 1.0) == 37.5);
  CHECK_THROWS_AS(word_ppl_from_subword_ppl(0.9, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(word_ppl_from_subword_ppl(2.0, 0.0), std::invalid_argument);
}

TEST_CASE("conversion round trip and monotonicity") {
  std::mt19937_64 g(4);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    const double nll = u(g);
    const double via_bits = std::exp(kBookTest.bytes_per_word() * std::log(2.0) * bpb_from_byte_nll(nll));
    CHECK(word_ppl_from_byte_nll(nll, kBookTest) == doctest::Approx(via_bits).epsilon(1e-9));
  }
  for (double a = 0.0; a < 3.0; a += 0.05) {
    const double b = a + 1e-3;
    CHECK(bpb_from_byte_nll(b) > bpb_from_byte_nll(a));
    CHECK(word_ppl_from_byte_nll(b, kBookTest) > word_ppl_from_byte_nll(a, kBookTest));
    CHECK(word_ppl_from_subword_ppl(1.0 + b, 1.7) > word_ppl_from_subword_ppl(1.0 + a, 1.7));
  }
}

TEST_CASE("word counting splits on common whitespace") {
  auto words = [](const std::string& s) {
    return count_words(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  };
  CHECK(words("") == 0);
  CHECK(words("   \n\t") == 0);
  CHECK(words("one") == 1);
  CHECK(words("one two\nthree\r\nfour\tfive\fsix") == 6);
  CHECK(words("  lead and trail  ") == 3);
  CHECK(words("non-breaking\xc2\xa0space") == 1);
  const std::string text = "It was the best of times,\nit was the worst of times.";
  auto s = corpus_stats(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  CHECK(s.bytes == text.size());
  CHECK(s.words == 12);
  CHECK(s.bytes >= s.words);
}

TEST_CASE("vqa accuracy") {
  using Q = QuestionType;
  std::vector<int> answers{1, 2, 3, 4, 5};
  std::vector<Q> types{Q::exists, Q::exists, Q::exists, Q::exists, Q::count};

  auto all = vqa_accuracy(answers, answers, types);
  CHECK(all.overall() == 1.0);
  CHECK(all.of(Q::exists) == 1.0);
  CHECK(all.of(Q::count) == 1.0);
  CHECK(std::isnan(all.of(Q::query_attribute)));

  std::vector<int> pred{1, 2, 3, 9, 9};
  auto acc = vqa_accuracy(pred, answers, types);
  CHECK(acc.of(Q::exists) == doctest::Approx(0.75));
  CHECK(acc.of(Q::count) == 0.0);
  CHECK(acc.overall() == doctest::Approx(0.6));
  CHECK(acc.count() == 5);

  CHECK_THROWS_AS(vqa_accuracy(std::vector<int>{1}, answers, types), std::invalid_argument);
  std::vector<Q> bad(5, static_cast<Q>(9));
  CHECK_THROWS_AS(vqa_accuracy(answers, answers, bad), std::invalid_argument);

  SUBCASE("random byte guesses sit near 1/256") {
    const std::size_t n = 200000;
    std::mt19937_64 g(12);
    std::vector<int> a(n), p(n);
    std::vector<Q> t(n, Q::exists);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(g() % 28);
      p[i] = static_cast<int>(g() % 256);
    }
    const double base = 1.0 / 256.0;
    const double sigma = std::sqrt(base * (1 - base) / n);
    CHECK(std::abs(vqa_accuracy(p, a, t).overall() - base) < 4 * sigma);
  }
}

TEST_CASE("eval report json line") {
  EvalReport r;
  r.split = "test";
  r.context_length = 512;
  r.nll = std::log(2.0);
  r.scored = 1000;
  r.samples = 2;
  r.stats = CorpusStats{600, 100, std::nullopt};
  r.config_hash = 0xabcULL;
  const auto line = r.to_json();
  CHECK(line.find('\n') == std::string::npos);
  auto j = nlohmann::json::parse(line);
  CHECK(j["bpb"].get<double>() == doctest::Approx(1.0));
  CHECK(j["word_ppl"].get<double>() == doctest::Approx(64.0));
  CHECK(j["word_log_ppl"].get<double>() == doctest::Approx(6 * std::log(2.0)));
  CHECK(j["config_hash"] == "0000000000000abc");
  CHECK(!j.contains("accuracy"));

  r.vqa = vqa_accuracy(std::vector<int>{1, 0}, std::vector<int>{1, 1},
                       std::vector<QuestionType>{QuestionType::exists, QuestionType::count});
  j = nlohmann::json::parse(r.to_json());
  CHECK(j["accuracy"].get<double>() == 0.5);
  CHECK(j["accuracy_by_type"]["E"].get<double>() == 1.0);
  CHECK(j["count_by_type"]["C"].get<int>() == 1);
  CHECK(!j["accuracy_by_type"].contains("QA"));
}
