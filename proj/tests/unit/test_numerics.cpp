#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "grad_check.hpp"
#include "mblm/numerics/checkpoint.hpp"
#include "mblm/numerics/kernels.hpp"
#include "mblm/numerics/ops.hpp"

using mblm::Tensor;
using namespace mblm::ops;
using testutil::check_gradients;
using testutil::probe_loss;
using testutil::randn;

TEST_CASE("matmul shape rule") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 4});
  CHECK(matmul(a, b).shape() == mblm::Shape{2, 4});
}

TEST_CASE("matmul values against a triple loop") {
  std::mt19937_64 rng(1);
  auto a = randn({5, 7}, rng, 1.0f, false);
  auto b = randn({7, 3}, rng, 1.0f, false);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 7; ++k) acc += double(a.at({i, k})) * b.at({k, j});
      CHECK(c.at({i, j}) == doctest::Approx(acc).epsilon(1e-5));
    }
  }
}

TEST_CASE("shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 4});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const mblm::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,4)") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), mblm::ShapeError);
}

TEST_CASE("causal softmax ignores masked logits") {
  for (float masked : {0.0f, 1e9f, -1e9f, 123.0f}) {
    auto s = Tensor::from_vector({1, 2, 2}, {0.3f, masked, 0.1f, 0.2f});
    auto p = softmax_causal_masked(s);
    CHECK(p.at({0, 0, 0}) == 1.0f);
    CHECK(p.at({0, 0, 1}) == 0.0f);
    CHECK(p.at({0, 1, 0}) + p.at({0, 1, 1}) == doctest::Approx(1.0));
  }
}

TEST_CASE("rms_norm of a constant vector") {
  auto gain = Tensor::full({5}, 1.0f);
  for (float c : {3.0f, -0.7f, 12.5f}) {
    auto y = rms_norm(Tensor::full({5}, c), gain);
    for (float v : y.values()) CHECK(v == doctest::Approx(c > 0 ? 1.0 : -1.0).epsilon(1e-4));
  }
}

TEST_CASE("backward of sum of squares") {
  auto x = Tensor::from_vector({3}, {1, 2, 3}, true);
  mblm::backward(sum(mul(x, x)));
  CHECK(x.grad() == std::vector<float>{2, 4, 6});
}

TEST_CASE("uniform cross entropy is ln 257") {
  auto logits = Tensor::zeros({4, 257}, true);
  std::vector<std::int32_t> targets{0, 65, 200, 256};
  std::vector<std::uint8_t> mask(4, 1);
  auto loss = cross_entropy(logits, targets, mask);
  CHECK(loss.item() == doctest::Approx(std::log(257.0)).epsilon(1e-6));
  CHECK(loss.item() == doctest::Approx(5.549).epsilon(1e-3));
}

TEST_CASE("cross entropy guards") {
  auto logits = Tensor::zeros({2, 4});
  std::vector<std::int32_t> targets{1, 2};
  std::vector<std::uint8_t> none(2, 0);
  CHECK_THROWS_AS(cross_entropy(logits, targets, none), std::invalid_argument);
  std::vector<std::int32_t> bad{1, 9};
  std::vector<std::uint8_t> all(2, 1);
  CHECK_THROWS_AS(cross_entropy(logits, bad, all), std::out_of_range);
}

TEST_CASE("backward rejects non-scalar and non-finite losses") {
  auto x = Tensor::from_vector({2}, {1, 2}, true);
  CHECK_THROWS_AS(mblm::backward(scale(x, 2.0f)), mblm::ShapeError);
  auto y = Tensor::from_vector({1}, {1}, true);
  CHECK_THROWS(mblm::backward(log(scale(y, 0.0f))));
}

TEST_CASE("unused leaves get zero gradient") {
  auto x = Tensor::from_vector({2}, {1, 2}, true);
  auto unused = Tensor::from_vector({3}, {1, 2, 3}, true);
  mblm::backward(sum(x));
  CHECK(unused.grad() == std::vector<float>{0, 0, 0});
  CHECK_FALSE(unused.has_grad());
}

TEST_CASE("shared subexpression accumulates once per use") {
  auto x = Tensor::from_vector({1}, {3}, true);
  auto y = mul(x, x);
  auto z = add(y, y);  // 2x^2
  mblm::backward(sum(z));
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("six-parameter MLP matches finite differences") {
  std::mt19937_64 rng(7);
  auto w1 = randn({1, 2}, rng);
  auto b1 = randn({2}, rng);
  auto w2 = randn({2, 1}, rng);
  auto x = randn({4, 1}, rng, 1.0f, false);
  auto loss = [&] {
    auto y = matmul(silu(add(matmul(x, w1), b1)), w2);
    return sum(mul(y, y));
  };
  auto r = check_gradients(loss, {w1, b1, w2});
  CHECK(r.worst < 1e-3);
}

TEST_CASE("every op passes a finite-difference check") {
  std::mt19937_64 rng(11);
  auto fd = [](const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
    return check_gradients([&] { return probe_loss(f()); }, std::move(leaves)).worst;
  };

  SUBCASE("elementwise") {
    auto a = randn({3, 4}, rng);
    auto b = randn({4}, rng);
    CHECK(fd([&] { return add(a, b); }, {a, b}) < 1e-3);
    CHECK(fd([&] { return sub(a, b); }, {a, b}) < 1e-3);
    CHECK(fd([&] { return mul(a, b); }, {a, b}) < 1e-3);
    CHECK(fd([&] { return scale(a, -1.5f); }, {a}) < 1e-3);
    CHECK(fd([&] { return exp(a); }, {a}) < 1e-3);
    CHECK(fd([&] { return softplus(a); }, {a}) < 1e-3);
    CHECK(fd([&] { return silu(a); }, {a}) < 1e-3);
    auto pos = testutil::uniform({3, 4}, rng, 0.5f, 2.0f);
    CHECK(fd([&] { return log(pos); }, {pos}) < 1e-3);
  }
  SUBCASE("matmul family") {
    auto x = randn({2, 3, 4}, rng);
    auto w = randn({4, 2}, rng);
    CHECK(fd([&] { return matmul(x, w); }, {x, w}) < 1e-3);
    auto a = randn({2, 3, 4}, rng);
    auto b = randn({2, 4, 3}, rng);
    auto bt = randn({2, 3, 4}, rng);
    CHECK(fd([&] { return batched_matmul(a, b); }, {a, b}) < 1e-3);
    CHECK(fd([&] { return batched_matmul(a, bt, true); }, {a, bt}) < 1e-3);
  }
  SUBCASE("normalisation") {
    auto s = randn({2, 4, 4}, rng);
    CHECK(fd([&] { return softmax_causal_masked(s); }, {s}) < 1e-3);
    auto x = randn({3, 5}, rng);
    auto g = randn({5}, rng);
    CHECK(fd([&] { return rms_norm(x, g); }, {x, g}) < 1e-3);
  }
  SUBCASE("gather and shape ops") {
    auto table = randn({6, 3}, rng);
    std::vector<std::int32_t> ids{0, 5, 5, 2};
    CHECK(fd([&] { return embedding_gather(table, ids, {2, 2}); }, {table}) < 1e-3);
    auto x = randn({2, 3, 4}, rng);
    CHECK(fd([&] { return reshape(x, {6, 4}); }, {x}) < 1e-3);
    CHECK(fd([&] { return transpose(x, 0, 2); }, {x}) < 1e-3);
    CHECK(fd([&] { return transpose(x, 1, 2); }, {x}) < 1e-3);
    CHECK(fd([&] { return slice(x, 1, 1, 3); }, {x}) < 1e-3);
    auto y = randn({2, 1, 4}, rng);
    CHECK(fd([&] { return concat({x, y}, 1); }, {x, y}) < 1e-3);
    CHECK(fd([&] { return pad_constant(x, 2, 1, 2, 0.5f); }, {x}) < 1e-3);
    CHECK(fd([&] { return repeat(y, 1, 3); }, {y}) < 1e-3);
  }
  SUBCASE("scan") {
    auto a = testutil::uniform({2, 5, 3}, rng, -0.9f, 0.9f);
    auto b = randn({2, 5, 3}, rng);
    CHECK(fd([&] { return cumulative_scan(a, b); }, {a, b}) < 1e-3);
    CHECK(fd([&] { return cumulative_scan(a, b, ScanAlgorithm::associative); }, {a, b}) < 1e-3);
  }
  SUBCASE("ssm helpers and rotary") {
    auto x = randn({2, 3, 2}, rng);
    auto y = randn({2, 3, 4}, rng);
    CHECK(fd([&] { return outer(x, y); }, {x, y}) < 1e-3);
    auto h = randn({2, 3, 2, 4}, rng);
    CHECK(fd([&] { return contract(h, y); }, {h, y}) < 1e-3);
    auto q = randn({2, 4, 4}, rng);
    CHECK(fd([&] { return rotary(q); }, {q}) < 1e-3);
  }
  SUBCASE("reductions and loss") {
    auto x = randn({2, 5}, rng);
    CHECK(fd([&] { return scale(mean(x), 1.0f); }, {x}) < 1e-3);
    auto logits = randn({4, 7}, rng);
    std::vector<std::int32_t> t{1, 0, 6, 3};
    std::vector<std::uint8_t> m{1, 0, 1, 1};
    CHECK(check_gradients([&] { return cross_entropy(logits, t, m); }, {logits}).worst < 1e-3);
  }
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(3);
  auto x = randn({4, 16}, rng, 1.0f, false);
  auto w = randn({16, 8}, rng, 1.0f, false);
  auto a = softplus(matmul(x, w)).to_vector();
  auto b = softplus(matmul(x, w)).to_vector();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("gemm rows do not depend on the row count") {
  std::mt19937_64 rng(5);
  const std::size_t k = 37, n = 70;
  auto a = randn({13, k}, rng, 1.0f, false);
  auto b = randn({k, n}, rng, 1.0f, false);
  std::vector<float> full(13 * n);
  mblm::kernels::gemm_nn(a.values().data(), b.values().data(), full.data(), 13, k, n);
  for (std::size_t m : {1, 5, 7}) {
    std::vector<float> part(m * n);
    mblm::kernels::gemm_nn(a.values().data() + (13 - m) * k, b.values().data(), part.data(), m, k,
                           n);
    CHECK(std::memcmp(part.data(), full.data() + (13 - m) * n, m * n * sizeof(float)) == 0);
  }
}

TEST_CASE("associative scan equals the left fold") {
  std::mt19937_64 rng(13);
  for (std::size_t t = 1; t <= 64; ++t) {
    auto a = testutil::uniform({2, t, 3}, rng, -1.0f, 1.0f, false);
    auto b = randn({2, t, 3}, rng, 1.0f, false);
    auto seq = cumulative_scan(a, b, ScanAlgorithm::sequential);
    auto par = cumulative_scan(a, b, ScanAlgorithm::associative);
    // Explicit left fold in double.
    double worst = 0;
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t f = 0; f < 3; ++f) {
        double h = 0;
        for (std::size_t s = 0; s < t; ++s) {
          h = a.at({k, s, f}) * h + b.at({k, s, f});
          worst = std::max(worst, std::abs(h - par.at({k, s, f})));
          worst = std::max(worst, std::abs(h - seq.at({k, s, f})));
        }
      }
    }
    CHECK(worst <= 1e-6 * 8);
  }
}

TEST_CASE("scan gradients agree between algorithms") {
  std::mt19937_64 rng(17);
  auto a = testutil::uniform({1, 17, 2}, rng, -0.95f, 0.95f);
  auto b = randn({1, 17, 2}, rng);
  mblm::backward(probe_loss(cumulative_scan(a, b, ScanAlgorithm::sequential)));
  auto ga = a.grad(), gb = b.grad();
  a.zero_grad();
  b.zero_grad();
  mblm::backward(probe_loss(cumulative_scan(a, b, ScanAlgorithm::associative)));
  for (std::size_t i = 0; i < ga.size(); ++i) {
    CHECK(a.grad()[i] == doctest::Approx(ga[i]).epsilon(1e-5));
    CHECK(b.grad()[i] == doctest::Approx(gb[i]).epsilon(1e-5));
  }
}

TEST_CASE("embedding rejects out-of-vocabulary ids") {
  auto table = Tensor::zeros({257, 4});
  std::vector<std::int32_t> ids{3, 257};
  CHECK_THROWS_AS(embedding_gather(table, ids, {2}), std::out_of_range);
}

namespace {

struct Mlp {
  std::vector<Tensor> w;
  std::vector<Tensor> b;
  Tensor operator()(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < w.size(); ++i) h = silu(add(matmul(h, w[i]), b[i]));
    return h;
  }
  std::vector<Tensor> params() const {
    std::vector<Tensor> p = w;
    p.insert(p.end(), b.begin(), b.end());
    return p;
  }
};

Mlp make_mlp(std::mt19937_64& rng, std::size_t width, std::size_t layers) {
  Mlp m;
  for (std::size_t i = 0; i < layers; ++i) {
    m.w.push_back(randn({width, width}, rng, 0.5f));
    m.b.push_back(randn({width}, rng, 0.1f));
  }
  return m;
}

}  // namespace

TEST_CASE("identity checkpoint region stores nothing inside") {
  auto x = Tensor::from_vector({3}, {1, 2, 3}, true);
  mblm::reset_activation_stats();
  auto y = mblm::checkpoint_region([](const std::vector<Tensor>& in) { return in[0]; }, {x}, {});
  CHECK(mblm::activation_stats().region_peak == 0);
  mblm::backward(sum(mul(y, y)));
  CHECK(x.grad() == std::vector<float>{2, 4, 6});
}

TEST_CASE("checkpointed MLP gradients match the plain path") {
  std::mt19937_64 rng(21);
  auto mlp = make_mlp(rng, 8, 3);
  auto x = randn({4, 8}, rng);

  mblm::backward(probe_loss(mlp(x)));
  std::vector<std::vector<float>> plain;
  for (auto& p : mlp.params()) {
    plain.push_back(p.grad());
    p.zero_grad();
  }
  auto gx = x.grad();
  x.zero_grad();

  auto y = mblm::checkpoint_region([&](const std::vector<Tensor>& in) { return mlp(in[0]); }, {x},
                                   mlp.params());
  mblm::backward(probe_loss(y));
  auto params = mlp.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = params[i].grad();
    for (std::size_t j = 0; j < g.size(); ++j) CHECK(std::abs(g[j] - plain[i][j]) <= 1e-6);
  }
  for (std::size_t j = 0; j < gx.size(); ++j) CHECK(std::abs(x.grad()[j] - gx[j]) <= 1e-6);
}

TEST_CASE("sequential regions bound stored interior activations") {
  std::mt19937_64 rng(23);
  auto mlp = make_mlp(rng, 16, 3);
  auto x = randn({60, 16}, rng);

  mblm::reset_activation_stats();
  auto base = mlp(x);
  const std::size_t baseline_interior = mblm::activation_stats().retained;
  (void)base;

  for (std::size_t c : {2, 3, 5, 10}) {
    mblm::reset_activation_stats();
    const std::size_t rows = 60 / c;
    std::vector<Tensor> outs;
    for (std::size_t i = 0; i < c; ++i) {
      auto part = slice(x, 0, i * rows, (i + 1) * rows);
      outs.push_back(mblm::checkpoint_region(
          [&](const std::vector<Tensor>& in) { return mlp(in[0]); }, {part}, mlp.params()));
    }
    const auto interior = mblm::activation_stats().region_peak;
    CHECK(static_cast<double>(interior) <= (1.0 / c + 1e-9) * baseline_interior);
    mblm::backward(probe_loss(concat(outs, 0)));
    CHECK(mblm::activation_stats().region_peak == interior);
  }
}

TEST_CASE("impure region is rejected at backward") {
  auto x = Tensor::from_vector({2}, {1, 2}, true);
  int calls = 0;
  auto y = mblm::checkpoint_region(
      [&](const std::vector<Tensor>& in) { return scale(in[0], static_cast<float>(++calls)); }, {x},
      {});
  CHECK_THROWS_AS(mblm::backward(sum(y)), std::logic_error);
}

TEST_CASE("region input mutated before backward is rejected") {
  auto w = Tensor::from_vector({2}, {1, 2}, true);
  auto x = Tensor::from_vector({2}, {3, 4}, true);
  auto y = mblm::checkpoint_region([&](const std::vector<Tensor>& in) { return mul(in[0], w); },
                                   {x}, {w});
  w.values_mut()[0] = 5.0f;
  CHECK_THROWS_AS(mblm::backward(sum(y)), std::logic_error);
}

TEST_CASE("dropout inside a region replays the same mask") {
  mblm::seed_op_rng(42);
  auto x = Tensor::full({64}, 1.0f, true);
  auto y = mblm::checkpoint_region(
      [](const std::vector<Tensor>& in) { return dropout(in[0], 0.5f, true); }, {x}, {});
  mblm::backward(sum(y));
  auto g = x.grad();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == y.values()[i]);
}
