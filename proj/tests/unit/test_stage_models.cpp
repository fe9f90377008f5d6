#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "grad_check.hpp"
#include "reference.hpp"
#include "mblm/stage_models.hpp"

using namespace mblm;
using namespace testutil;

namespace {

bool bit_equal(std::span<const float> a, std::span<const float> b, std::size_t count) {
  return std::memcmp(a.data(), b.data(), count * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("single position attention is the value path") {
  std::mt19937_64 rng(1);
  TransformerStage m(transformer_cfg(4, 2, 1), rng);
  auto& layer = m.layers()[0];
  std::fill(layer.w2.values_mut().begin(), layer.w2.values_mut().end(), 0.0f);
  auto x = randn({3, 1, 4}, rng, 1.0f, false);
  auto y = m.forward(x, false);
  for (std::size_t k = 0; k < 3; ++k) {
    Mat xr(4);
    for (std::size_t j = 0; j < 4; ++j) xr[j] = x.at({k, 0, j});
    Mat n1 = rms(xr, to_d(layer.attn_norm), 1, 4);
    Mat wv(16);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) wv[i * 4 + j] = layer.wqkv.at({i, 8 + j});
    Mat o = mm(mm(n1, wv, 1, 4, 4), to_d(layer.wo), 1, 4, 4);
    for (std::size_t j = 0; j < 4; ++j) o[j] += xr[j];
    Mat expect = rms(o, Mat(4, 1.0), 1, 4);
    for (std::size_t j = 0; j < 4; ++j) CHECK(y.at({k, 0, j}) == doctest::Approx(expect[j]).epsilon(1e-5));
  }
}

TEST_CASE("hand-set single head transformer trace") {
  std::mt19937_64 rng(2);
  TransformerStage m(transformer_cfg(2, 1, 1), rng);
  auto& layer = m.layers()[0];
  // q = k = v = normalized input, identity output and one simple ff path.
  const float qkv[] = {1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 1};
  std::copy(std::begin(qkv), std::end(qkv), layer.wqkv.values_mut().begin());
  const float wo[] = {1, 0, 0, 1};
  std::copy(std::begin(wo), std::end(wo), layer.wo.values_mut().begin());
  std::fill(layer.w1.values_mut().begin(), layer.w1.values_mut().end(), 0.5f);
  std::fill(layer.w2.values_mut().begin(), layer.w2.values_mut().end(), 0.25f);
  auto x = Tensor::from_vector({1, 2, 2}, {1.0f, 0.0f, 0.0f, 2.0f});
  auto y = m.forward(x, false);
  auto expect = transformer_reference(m, {1, 0, 0, 2}, 2, 2, 1);
  // Row 0 attends only to itself: h0 = x0 + norm(x0) = (1 + sqrt2', 0).
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
}

TEST_CASE("transformer matches the double-precision reference") {
  std::mt19937_64 rng(3);
  for (auto pos : {PosEmbedding::none}) {
    TransformerStage m(transformer_cfg(8, 2, 2, pos), rng);
    for (auto& np : m.parameters()) {
      auto v = np.tensor.values_mut();
      std::normal_distribution<float> dist(0.0f, 0.4f);
      for (auto& e : v) e += dist(rng);
    }
    auto x = randn({2, 5, 8}, rng, 1.0f, false);
    auto y = m.forward(x, false);
    const Mat xd = to_d(x);
    for (std::size_t k = 0; k < 2; ++k) {
      Mat xr(xd.begin() + k * 40, xd.begin() + (k + 1) * 40);
      auto ref = transformer_reference(m, xr, 5, 8, 2);
      for (std::size_t i = 0; i < 40; ++i) CHECK(y.values()[k * 40 + i] == doctest::Approx(ref[i]).epsilon(1e-4));
    }
  }
}

TEST_CASE("selective SSM matches the double-precision recurrence") {
  std::mt19937_64 rng(4);
  SelectiveSsmStage m(ssm_cfg(6, 3, 2), rng);
  for (auto& layer : m.layers()) {
    for (auto* t : {&layer.w_in, &layer.w_dt, &layer.w_b, &layer.w_c, &layer.w_out}) {
      std::normal_distribution<float> dist(0.0f, 0.4f);
      for (auto& e : t->values_mut()) e = dist(rng);
    }
  }
  auto x = randn({3, 7, 6}, rng, 1.0f, false);
  auto y = m.forward(x, false);
  const Mat xd = to_d(x);
  for (std::size_t k = 0; k < 3; ++k) {
    Mat xr(xd.begin() + k * 42, xd.begin() + (k + 1) * 42);
    auto ref = ssm_reference(m, xr, 7, 6, 3);
    for (std::size_t i = 0; i < 42; ++i) CHECK(y.values()[k * 42 + i] == doctest::Approx(ref[i]).epsilon(1e-4));
  }
}

TEST_CASE("stage models are causal") {
  std::mt19937_64 rng(5);
  std::vector<std::unique_ptr<StageModel>> models;
  models.push_back(std::make_unique<TransformerStage>(transformer_cfg(8, 2, 2), rng));
  models.push_back(std::make_unique<TransformerStage>(transformer_cfg(8, 2, 1, PosEmbedding::rotary), rng));
  models.push_back(std::make_unique<SelectiveSsmStage>(ssm_cfg(8, 4, 2), rng));
  models.push_back(std::make_unique<SelectiveSsmStage>(ssm_cfg(8, 4, 1, ops::ScanAlgorithm::associative), rng));
  for (const auto& m : models) {
    auto x = randn({2, 9, 8}, rng, 1.0f, false);
    auto base = m->forward(x, false);
    for (std::size_t t = 0; t < 9; ++t) {
      auto xv = x.to_vector();
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t j = 0; j < 8; ++j) xv[(k * 9 + t) * 8 + j] += 0.75f;
      auto y = m->forward(Tensor::from_vector({2, 9, 8}, xv), false);
      for (std::size_t k = 0; k < 2; ++k) {
        const std::size_t off = k * 9 * 8;
        CHECK(bit_equal(y.values().subspan(off), base.values().subspan(off), t * 8));
        CHECK_FALSE(bit_equal(y.values().subspan(off + t * 8), base.values().subspan(off + t * 8), 8));
      }
    }
  }
}

TEST_CASE("stage models preserve shape") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> pick(1, 6);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t k = pick(rng), p = pick(rng), d = 4 * pick(rng);
    TransformerStage t(transformer_cfg(d, 2, 1, PosEmbedding::rotary), rng);
    SelectiveSsmStage s(ssm_cfg(d, pick(rng), 1), rng);
    auto x = randn({k, p, d}, rng, 1.0f, false);
    CHECK(t.forward(x, false).shape() == x.shape());
    CHECK(s.forward(x, false).shape() == x.shape());
  }
}

TEST_CASE("transformer rejects width not divisible by heads") {
  std::mt19937_64 rng(7);
  CHECK_THROWS_AS(TransformerStage(transformer_cfg(6, 4, 1), rng), std::invalid_argument);
}

TEST_CASE("zero input through SSM with zero biases gives zero") {
  std::mt19937_64 rng(8);
  SelectiveSsmStage m(ssm_cfg(4, 2, 1), rng);
  for (auto& l : m.layers()) std::fill(l.b_dt.values_mut().begin(), l.b_dt.values_mut().end(), 0.0f);
  // rms_norm(0) = 0, silu(0) = 0, so the layer adds nothing; the final norm of 0 is 0.
  auto y = m.forward(Tensor::zeros({2, 5, 4}), false);
  for (float v : y.values()) CHECK(v == 0.0f);
}

TEST_CASE("zero-order hold") {
  auto z = ssm_discretize_zoh(-1.0, 1.0, 0.1);
  CHECK(std::abs(z.a_bar - 0.904837) < 5e-7);
  CHECK(std::abs(z.b_bar - 0.0951626) < 5e-8);
  auto small = ssm_discretize_zoh(-1.0, 1.0, 1e-12);
  CHECK(small.a_bar == doctest::Approx(1.0));
  CHECK(small.b_bar == doctest::Approx(0.0));
  auto flat = ssm_discretize_zoh(1e-9, 2.0, 0.5);
  CHECK(flat.b_bar == doctest::Approx(1.0).epsilon(1e-9));
  auto zero = ssm_discretize_zoh(0.0, 2.0, 0.5);
  CHECK(zero.b_bar == 1.0);
  CHECK_THROWS(ssm_discretize_zoh(-1.0, 1.0, 0.0));
}

namespace {

LtiSsm scalar_lti(float a_bar, float b_bar, float c, float d) {
  LtiSsm s;
  s.channels = 1;
  s.state = 1;
  s.a_bar = {a_bar};
  s.b_bar = {b_bar};
  s.c = {c};
  s.d = {d};
  return s;
}

LtiSsm random_lti(std::mt19937_64& rng, std::size_t d, std::size_t n) {
  std::uniform_real_distribution<float> neg(-2.0f, -0.05f), any(-1.0f, 1.0f), step(0.01f, 0.5f);
  std::vector<float> a(d * n), b(d * n), c(d * n), dd(d), delta(d);
  for (auto& v : a) v = neg(rng);
  for (auto& v : b) v = any(rng);
  for (auto& v : c) v = any(rng);
  for (auto& v : dd) v = any(rng);
  for (auto& v : delta) v = step(rng);
  return LtiSsm::from_continuous(d, n, a, b, c, dd, delta);
}

}  // namespace

TEST_CASE("LTI impulse response and kernel") {
  auto s = scalar_lti(0.5f, 1.0f, 1.0f, 0.0f);
  auto x = Tensor::from_vector({1, 3, 1}, {1, 0, 0});
  auto y = lti_scan(x, s);
  CHECK(y.to_vector() == std::vector<float>{1.0f, 0.5f, 0.25f});
  auto kern = lti_kernel(s, 3);
  CHECK(kern == std::vector<float>{1.0f, 0.5f, 0.25f});
  auto conv = lti_convolve(x, kern, 3, {0.0f});
  CHECK(conv == kern);
}

TEST_CASE("LTI sequential, associative and convolution agree") {
  std::mt19937_64 rng(9);
  for (std::size_t len = 1; len <= 64; ++len) {
    auto s = random_lti(rng, 3, 4);
    auto x = randn({2, len, 3}, rng, 1.0f, false);
    auto seq = lti_scan(x, s, ops::ScanAlgorithm::sequential);
    auto par = lti_scan(x, s, ops::ScanAlgorithm::associative);
    auto conv = lti_convolve(x, lti_kernel(s, len), len, s.d);
    for (std::size_t i = 0; i < conv.size(); ++i) {
      CHECK(std::abs(seq.values()[i] - par.values()[i]) <= 1e-5);
      CHECK(std::abs(seq.values()[i] - conv[i]) <= 1e-5);
    }
  }
}

TEST_CASE("selective scan algorithms agree on a non power of two length") {
  std::mt19937_64 rng(10);
  SelectiveSsmStage seq(ssm_cfg(6, 4, 2), rng);
  SelectiveSsmStage par = seq;
  par.set_scan_algorithm(ops::ScanAlgorithm::associative);
  auto x = randn({3, 17, 6}, rng, 1.0f, false);
  auto a = seq.forward(x, false);
  auto b = par.forward(x, false);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) <= 1e-5);

  auto one = randn({2, 1, 6}, rng, 1.0f, false);
  CHECK(bit_equal(seq.forward(one, false).values(), par.forward(one, false).values(), 12));
}

TEST_CASE("scan combiner is associative") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  using Pair = std::pair<double, double>;
  auto op = [](Pair x, Pair y) { return Pair{x.first * y.first, y.first * x.second + y.second}; };
  for (int i = 0; i < 1000; ++i) {
    Pair x{u(rng), u(rng)}, y{u(rng), u(rng)}, z{u(rng), u(rng)};
    auto l = op(op(x, y), z);
    auto r = op(x, op(y, z));
    CHECK(std::abs(l.first - r.first) <= 1e-6);
    CHECK(std::abs(l.second - r.second) <= 1e-6);
  }
}

TEST_CASE("stable LTI state stays within the geometric bound") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (double a : {-0.1, -1.0, -4.0}) {
    const double delta = 0.2, b = 0.7;
    auto z = ssm_discretize_zoh(a, b, delta);
    auto s = scalar_lti(float(z.a_bar), float(z.b_bar), 1.0f, 0.0f);
    std::vector<float> xs(5000);
    for (auto& v : xs) v = u(rng);
    auto y = lti_scan(Tensor::from_vector({1, 5000, 1}, xs), s);
    const double bound = std::abs(z.b_bar) * 1.0 / (1.0 - std::exp(delta * a));
    for (float v : y.values()) CHECK(std::abs(v) <= bound * (1 + 1e-5));
  }
}

TEST_CASE("stage model gradients match finite differences") {
  std::mt19937_64 rng(13);
  SUBCASE("transformer") {
    TransformerStage m(transformer_cfg(4, 2, 1, PosEmbedding::rotary), rng);
    std::size_t count = 0;
    for (auto& p : m.parameters()) {
      count += p.tensor.numel();
      std::normal_distribution<float> dist(0.0f, 0.3f);
      for (auto& e : p.tensor.values_mut()) e += dist(rng);
    }
    CHECK(count <= 200);
    auto x = randn({2, 3, 4}, rng);
    auto leaves = m.parameter_tensors();
    leaves.push_back(x);
    auto r = testutil::check_gradients([&] { return testutil::probe_loss(m.forward(x, false)); }, leaves);
    CHECK(r.worst < 1e-3);
  }
  SUBCASE("selective ssm") {
    // Float finite differences of this loss cannot resolve the delta path, so
    // the numeric side runs through the double-precision recurrence.
    SelectiveSsmStage m(ssm_cfg(4, 2, 1), rng);
    std::size_t count = 0;
    for (auto& p : m.parameters()) {
      count += p.tensor.numel();
      std::normal_distribution<float> dist(0.0f, 0.3f);
      for (auto& e : p.tensor.values_mut()) e += dist(rng);
    }
    CHECK(count <= 200);
    auto x = randn({2, 3, 4}, rng);
    auto leaves = m.parameter_tensors();
    leaves.push_back(x);
    for (auto& l : leaves) l.zero_grad();
    backward(testutil::probe_loss(m.forward(x, false)));

    std::mt19937_64 probe_rng(99);
    const Mat w = to_d(randn({2, 3, 4}, probe_rng, 1.0f, false));
    auto ref_loss = [&] {
      const Mat xd = to_d(x);
      double total = 0.0;
      for (std::size_t k = 0; k < 2; ++k) {
        Mat xr(xd.begin() + k * 12, xd.begin() + (k + 1) * 12);
        auto y = ssm_reference(m, xr, 3, 4, 2);
        for (std::size_t i = 0; i < 12; ++i) total += y[i] * w[k * 12 + i];
      }
      return total;
    };
    double worst = 0.0;
    for (auto& leaf : leaves) {
      const auto analytic = leaf.grad();
      double diff = 0.0, na = 0.0, nn = 0.0;
      for (std::size_t i = 0; i < analytic.size(); ++i) {
        const float orig = leaf.values()[i];
        const float up = orig + 1e-3f, down = orig - 1e-3f;
        leaf.values_mut()[i] = up;
        const double lu = ref_loss();
        leaf.values_mut()[i] = down;
        const double ld = ref_loss();
        leaf.values_mut()[i] = orig;
        const double numeric = (lu - ld) / (static_cast<double>(up) - down);
        diff += (analytic[i] - numeric) * (analytic[i] - numeric);
        na += static_cast<double>(analytic[i]) * analytic[i];
        nn += numeric * numeric;
      }
      worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-6}));
    }
    CHECK(worst < 1e-3);
  }
}
