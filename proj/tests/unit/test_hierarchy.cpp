#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "grad_check.hpp"
#include "mblm/hierarchy.hpp"
#include "mblm/numerics/ops.hpp"

using namespace mblm;
using testutil::hierarchy;
using testutil::random_ids;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(float)) == 0;
}

// Random valid hierarchy with N stages, P_i <= 6, widths <= 16, mixed kinds.
HierarchyConfig random_hierarchy(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> patch(1, 6), width(1, 4), kind(0, 1), pos(0, 2);
  HierarchyConfig c;
  for (std::size_t i = 0; i < n; ++i) {
    StageConfig s;
    s.patch_size = patch(rng);
    s.width = 4 * width(rng);
    s.kind = kind(rng) ? StageKind::selective_ssm : StageKind::transformer;
    s.heads = 2;
    s.state_size = 1 + width(rng);
    s.scan = kind(rng) ? ops::ScanAlgorithm::associative : ops::ScanAlgorithm::sequential;
    switch (pos(rng)) {
      case 0: s.pos_embedding = PosEmbedding::none; break;
      case 1: s.pos_embedding = PosEmbedding::learned_absolute; break;
      default:
        s.pos_embedding = s.kind == StageKind::transformer ? PosEmbedding::rotary : PosEmbedding::none;
    }
    if (i > 0) s.chunk_count = 1 + width(rng);
    c.stages.push_back(s);
  }
  return c;
}

void perturb_weights(Mblm& m, std::mt19937_64& rng, float scale) {
  std::normal_distribution<float> dist(0.0f, scale);
  for (auto& t : m.parameters()) {
    for (auto& v : t.values_mut()) v += dist(rng);
  }
}

}  // namespace

TEST_CASE("chunk bounds split evenly with the remainder last") {
  using B = std::vector<std::pair<std::size_t, std::size_t>>;
  CHECK(chunk_bounds(10, 1) == B{{0, 10}});
  CHECK(chunk_bounds(10, 3) == B{{0, 3}, {3, 6}, {6, 10}});
  CHECK(chunk_bounds(4, 9) == B{{0, 1}, {1, 2}, {2, 3}, {3, 4}});
  CHECK(chunk_bounds(6, 6).size() == 6);
}

TEST_CASE("forward produces one logits row per byte") {
  Mblm m(validate(hierarchy({5, 3, 2}, {8, 8, 4})), 1);
  std::mt19937_64 rng(1);
  auto ids = random_ids(60, rng);
  ForwardTrace trace;
  auto logits = m.forward(ids, 2, false, &trace);
  CHECK(logits.shape() == Shape{2, 30, 257});
  REQUIRE(trace.stages.size() == 3);
  CHECK(trace.stages[0].input == Shape{2, 5, 8});
  CHECK(trace.stages[1].input == Shape{10, 3, 8});
  CHECK(trace.stages[2].input == Shape{30, 2, 4});
  CHECK(trace.stages[2].output == Shape{30, 2, 4});
  CHECK(trace.padded_length == 30);

  auto short_ids = random_ids(27, rng);
  CHECK(m.forward(short_ids, 1).shape() == Shape{1, 27, 257});
  auto long_ids = random_ids(31, rng);
  CHECK_THROWS_AS(m.forward(long_ids, 1), std::invalid_argument);
  auto bad = random_ids(4, rng);
  bad[2] = 300;
  CHECK_THROWS_AS(m.forward(bad, 1), std::out_of_range);
}

TEST_CASE("a single stage model equals the bare stage model") {
  for (auto kind : {StageKind::transformer, StageKind::selective_ssm}) {
    CAPTURE(to_string(kind));
    auto h = hierarchy({16}, {8});
    h.stages[0].kind = kind;
    if (kind == StageKind::selective_ssm) h.stages[0].pos_embedding = PosEmbedding::none;
    auto cfg = validate(h);
    Mblm m(cfg, 7);
    std::mt19937_64 rng(2);
    perturb_weights(m, rng, 0.1f);
    auto ids = random_ids(3 * 16, rng);

    const auto& p = m.stage_params(0);
    auto emb = embed_stage(cfg, 0, p, ids, 3);
    auto x = project_patches(cfg, 0, p, reshape_to_patches(cfg, emb, Tensor{}));
    auto bare = m.head(m.stage_model(0).forward(x, false));
    auto logits = m.forward(ids, 3);
    CHECK(bit_equal(ops::reshape(bare, {3, 16, 257}), logits));
    CHECK(m.named_parameters().size() == m.stage_model(0).parameters().size() + 5 -
                                             (kind == StageKind::selective_ssm ? 1 : 0));
  }
}

TEST_CASE("chunked stages match unchunked stages") {
  auto base = hierarchy({2, 5, 4}, {8, 8, 8});
  base.stages[1].kind = StageKind::selective_ssm;
  base.stages[1].pos_embedding = PosEmbedding::none;
  auto chunked = base;
  chunked.stages[1].chunk_count = 3;
  chunked.stages[2].chunk_count = 10;
  Mblm a(validate(base), 3);
  Mblm b(validate(chunked), 3);
  std::mt19937_64 rng(3);
  auto ids = random_ids(2 * 40, rng);

  ForwardTrace ta, tb;
  auto la = a.forward(ids, 2, true, &ta);
  auto loss_a = ops::mean(la);
  backward(loss_a);
  auto lb = b.forward(ids, 2, true, &tb);
  auto loss_b = ops::mean(lb);
  backward(loss_b);

  CHECK(tb.stages[1].chunks.size() == 3);
  CHECK(tb.stages[2].chunks.size() == 10);
  double worst = 0.0;
  for (std::size_t i = 0; i < la.numel(); ++i) worst = std::max(worst, std::abs(double(la.values()[i]) - lb.values()[i]));
  CHECK(worst <= 1e-6);

  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto ga = pa[i].grad();
    auto gb = pb[i].grad();
    double diff = 0, norm = 0;
    for (std::size_t j = 0; j < ga.size(); ++j) {
      diff += (double(ga[j]) - gb[j]) * (double(ga[j]) - gb[j]);
      norm += double(ga[j]) * ga[j];
    }
    CHECK(std::sqrt(diff) <= 1e-5 * std::max(std::sqrt(norm), 1e-12));
  }
  CHECK(tb.peak_activations < ta.peak_activations);
}

TEST_CASE("logit row t never depends on bytes at or after t") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = 1 + trial % 3;
    auto cfg = validate(random_hierarchy(rng, n));
    CAPTURE(to_toml(cfg.config()));
    Mblm m(cfg, trial);
    perturb_weights(m, rng, 0.2f);
    const std::size_t length = std::uniform_int_distribution<std::size_t>(1, cfg.max_length())(rng);
    auto ids = random_ids(2 * length, rng);
    auto ref = m.forward(ids, 2);
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, length - 1)(rng);
    auto changed = ids;
    changed[length + t] = (changed[length + t] + 1 + trial) % 256;
    auto out = m.forward(changed, 2);
    const std::size_t row = 257;
    // Row b=1 positions <= t equal; row b=0 untouched entirely.
    CHECK(std::memcmp(out.values().data(), ref.values().data(), length * row * sizeof(float)) == 0);
    CHECK(std::memcmp(out.values().data() + length * row, ref.values().data() + length * row,
                      (t + 1) * row * sizeof(float)) == 0);
  }
}

TEST_CASE("deeper hierarchies store fewer activations") {
  const std::size_t length = 256;
  std::mt19937_64 rng(5);
  auto ids = random_ids(2 * length, rng);
  auto stored = [&](std::vector<std::size_t> patches) {
    Mblm m(validate(hierarchy(patches, std::vector<std::size_t>(patches.size(), 8))), 1);
    ForwardTrace trace;
    m.forward(ids, 2, true, &trace);
    return trace.stored_activations;
  };
  const auto one = stored({256});
  const auto two = stored({4, 64});
  const auto three = stored({4, 4, 16});
  CHECK(two < one);
  CHECK(three < two);
}

TEST_CASE("random valid configs instantiate and run") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto h = random_hierarchy(rng, 1 + trial % 3);
    auto cfg = validate(h);
    Mblm m(cfg, trial);
    CHECK(m.parameter_count() == count_parameters(cfg));
    const std::size_t length = std::uniform_int_distribution<std::size_t>(1, cfg.max_length())(rng);
    auto ids = random_ids(length, rng);
    auto logits = m.forward(ids, 1);
    CHECK(logits.shape() == Shape{1, length, 257});
    bool finite = true;
    for (float v : logits.values()) finite = finite && std::isfinite(v);
    CHECK(finite);
  }
}

TEST_CASE("language modelling loss") {
  SUBCASE("uniform logits") {
    auto logits = Tensor::zeros({2, 3, 257});
    std::vector<std::int32_t> targets{1, 2, 3, 4, 5, 256};
    std::vector<std::uint8_t> mask(6, 1);
    CHECK(lm_loss(logits, targets, mask).item() == doctest::Approx(std::log(257.0)).epsilon(1e-6));
  }
  SUBCASE("confident logits") {
    std::vector<float> v(2 * 257, -30.0f);
    v[65] = 30.0f;
    v[257 + 66] = 30.0f;
    std::vector<std::int32_t> targets{65, 66};
    std::vector<std::uint8_t> mask{1, 1};
    CHECK(lm_loss(Tensor::from_vector({1, 2, 257}, v), targets, mask).item() < 1e-6);
  }
  SUBCASE("matches a per-position log-softmax oracle") {
    std::mt19937_64 rng(7);
    auto logits = testutil::randn({2, 4, 257}, rng, 2.0f, false);
    auto targets = random_ids(8, rng, 256);
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 1, 1};
    double total = 0;
    int count = 0;
    for (std::size_t r = 0; r < 8; ++r) {
      if (!mask[r]) continue;
      double mx = -1e30, z = 0;
      for (std::size_t v = 0; v < 257; ++v) mx = std::max(mx, double(logits.values()[r * 257 + v]));
      for (std::size_t v = 0; v < 257; ++v) z += std::exp(double(logits.values()[r * 257 + v]) - mx);
      total += -(double(logits.values()[r * 257 + targets[r]]) - mx - std::log(z));
      ++count;
    }
    CHECK(lm_loss(logits, targets, mask).item() == doctest::Approx(total / count).epsilon(1e-6));
  }
  SUBCASE("empty mask") {
    std::vector<std::int32_t> targets{1};
    std::vector<std::uint8_t> mask{0};
    CHECK_THROWS_AS(lm_loss(Tensor::zeros({1, 1, 257}), targets, mask), std::invalid_argument);
  }
}

TEST_CASE("a gradient step lowers the loss on a fixed batch") {
  Mblm m(validate(hierarchy({4, 4}, {8, 8})), 8);
  std::mt19937_64 rng(8);
  auto ids = random_ids(32, rng, 20);
  std::vector<std::uint8_t> mask(32, 1);
  auto step_loss = [&] { return lm_loss(m.forward(ids, 2, true), ids, mask); };
  auto before = step_loss();
  m.zero_grad();
  backward(before);
  for (auto& t : m.parameters()) {
    auto g = t.grad();
    auto v = t.values_mut();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.5f * g[i];
  }
  CHECK(step_loss().item() < before.item());
}

TEST_CASE("two stage hierarchy gradients match finite differences") {
  // Every parameter, including the 257-row tables; the local stage runs in
  // two recomputed chunks.
  auto h = hierarchy({3, 2}, {4, 2});
  h.stages[1].chunk_count = 2;
  Mblm m(validate(h), 9);
  std::mt19937_64 rng(9);
  perturb_weights(m, rng, 0.3f);
  auto ids = random_ids(12, rng, 8);
  auto r = testutil::check_gradients([&] { return testutil::probe_loss(m.forward(ids, 2)); },
                                     m.parameters(), 1e-2, 1e-6, true);
  CHECK(r.worst < 1e-3);
}

TEST_CASE("generation") {
  auto cfg = validate(hierarchy({5, 3, 2}, {8, 8, 4}));
  Mblm m(cfg, 10);
  std::mt19937_64 rng(10);
  perturb_weights(m, rng, 0.2f);
  const std::vector<std::uint8_t> prompt{'h', 'e', 'l', 'l', 'o', ' ', 'w'};

  SUBCASE("forced argmax") {
    Mblm forced(cfg, 10);
    std::fill(forced.head_weight().values_mut().begin(), forced.head_weight().values_mut().end(), 0.0f);
    forced.head_bias().values_mut()[65] = 5.0f;
    auto out = generate(forced, prompt, 5, SamplingPolicy::greedy(), 0);
    CHECK(std::string(out.begin(), out.end()) == "AAAAA");
  }
  SUBCASE("n = 0") { CHECK(generate(m, prompt, 0, SamplingPolicy::greedy(), 0).empty()); }
  SUBCASE("returns exactly n bytes and slides the window") {
    auto out = generate(m, prompt, 40, SamplingPolicy::with_top_k(5), 1);
    CHECK(out.size() == 40);
  }
  SUBCASE("reads the row at the prompt length") {
    CHECK(padded_length(cfg, prompt.size() + 1) == 12);
    std::vector<std::int32_t> ids(prompt.begin(), prompt.end());
    ids.push_back(0);
    auto logits = m.forward(ids, 1);
    auto row = logits.values().subspan(7 * 257, 256);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    CHECK(generate(m, prompt, 1, SamplingPolicy::greedy(), 0)[0] == best);
  }
  SUBCASE("long prompts keep the last L_max - 1 bytes") {
    std::vector<std::uint8_t> long_prompt(50);
    for (std::size_t i = 0; i < 50; ++i) long_prompt[i] = static_cast<std::uint8_t>('a' + i % 26);
    std::vector<std::uint8_t> tail(long_prompt.end() - 29, long_prompt.end());
    CHECK(generate(m, long_prompt, 3, SamplingPolicy::greedy(), 0) ==
          generate(m, tail, 3, SamplingPolicy::greedy(), 0));
  }
  SUBCASE("low temperature equals greedy") {
    CHECK(generate(m, prompt, 8, SamplingPolicy::with_temperature(1e-6), 3) ==
          generate(m, prompt, 8, SamplingPolicy::greedy(), 3));
  }
  SUBCASE("seeded sampling is reproducible") {
    auto a = generate(m, prompt, 12, SamplingPolicy::with_temperature(1.5), 4);
    CHECK(a == generate(m, prompt, 12, SamplingPolicy::with_temperature(1.5), 4));
    CHECK(a != generate(m, prompt, 12, SamplingPolicy::with_temperature(1.5), 5));
  }
  SUBCASE("invalid policies") {
    CHECK_THROWS_AS(generate(m, prompt, 1, SamplingPolicy::with_temperature(0.0), 0), std::invalid_argument);
    CHECK_THROWS_AS(SamplingPolicy::parse("top_k:0"), std::invalid_argument);
    CHECK_THROWS_AS(SamplingPolicy::parse("beam"), std::invalid_argument);
    CHECK(SamplingPolicy::parse("top_k:40:0.5").top_k == 40);
    CHECK(SamplingPolicy::parse("temperature:0.7").temperature == doctest::Approx(0.7));
  }
}

TEST_CASE("top-k sampling only draws from the k best") {
  std::vector<float> logits{0.0f, 3.0f, 2.9f, -1.0f, 2.8f};
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    auto v = sample_logits(logits, SamplingPolicy::with_top_k(2), rng);
    CHECK((v == 1 || v == 2));
  }
}

TEST_CASE("generation benchmark records") {
  Mblm m(validate(hierarchy({4, 4}, {8, 8})), 12);
  const std::vector<std::size_t> one{8};
  auto records = bench_generation(m, one, 2);
  REQUIRE(records.size() == 1);
  CHECK(records[0].context_length == 8);
  CHECK(records[0].seconds_per_byte > 0.0);
  std::vector<BenchRecord> quad{{10, 1, 3.0}, {20, 1, 12.0}, {40, 1, 48.0}};
  CHECK(growth_exponent(quad) == doctest::Approx(2.0));
}

TEST_CASE("checkpoints round trip and reject other configs") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "mblm_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  auto cfg = validate(hierarchy({4, 4}, {8, 8}));
  Mblm a(cfg, 13);
  auto ck = model_checkpoint(a);
  ck.metadata = R"({"step": 3})";
  write_checkpoint(path, ck);

  Mblm b(cfg, 14);
  auto back = read_checkpoint(path);
  CHECK(back.metadata == ck.metadata);
  load_parameters(b, back);
  std::vector<std::int32_t> ids{1, 2, 3, 4, 5};
  CHECK(bit_equal(a.forward(ids, 1), b.forward(ids, 1)));

  Mblm other(validate(hierarchy({4, 4}, {8, 16})), 1);
  CHECK_THROWS_AS(load_parameters(other, back), CheckpointMismatch);

  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "not a checkpoint";
  }
  CHECK_THROWS_AS(read_checkpoint((dir / "junk.ckpt").string()), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
  fs::remove_all(dir);
}
