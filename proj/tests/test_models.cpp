#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>
#include <set>

#include "ssmr/gradcheck.hpp"
#include "ssmr/model.hpp"
#include "ssmr/ops.hpp"
#include "ssmr/random.hpp"

using namespace ssmr;

namespace {

Tensor random_images(Rng& rng, std::int64_t batch, std::int64_t size, std::int64_t channels = 1, double lo = 0.0,
                     double hi = 1.0) {
  std::vector<float> v(static_cast<std::size_t>(batch * size * size * channels));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor({batch, size, size, channels}, std::move(v));
}

ModelConfig toy(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.image_size = 8;
  c.patch_size = 2;
  c.depths = {1, 1};
  c.dims = {8, 16};
  c.n_state = 4;
  c.n_classes = 3;
  c.window = 2;
  if (arch == Arch::vssm_flat_bidir) {
    c.depths = {1};
    c.dims = {8};
  }
  return c;
}

const Arch kAllArchs[] = {Arch::vssm_hier, Arch::vssm_flat_bidir, Arch::attn_window};

}  // namespace

TEST_CASE("default geometry") {
  ModelConfig c;
  CHECK(c.grid() == 8);
  CHECK(c.stage_grids() == std::vector<std::int64_t>{8, 4});
  auto m = Model::build(c);
  Rng rng(1);
  auto logits = m.forward(random_images(rng, 2, 32));
  CHECK(logits.shape() == Shape{2, 10});
  MESSAGE("vssm_hier parameters: " << m.parameter_count());
}

TEST_CASE("config validation names the violated invariant") {
  auto rejects = [](ModelConfig c, const char* fragment) {
    try {
      c.validate();
      return false;
    } catch (const ValidationError& e) {
      return std::string(e.what()).find(fragment) != std::string::npos;
    }
  };
  ModelConfig c;
  c.patch_size = 5;
  CHECK(rejects(c, "divisible by patch_size"));
  c = ModelConfig{};
  c.dims = {32};
  CHECK(rejects(c, "dims length"));
  c = ModelConfig{};
  c.depths = {1, 1, 1, 1, 1};
  c.dims = {8, 8, 8, 8, 8};
  CHECK(rejects(c, "2^(stages-1)"));
  c = ModelConfig{};
  c.arch = Arch::vssm_flat_bidir;
  CHECK(rejects(c, "exactly one stage"));
  c = ModelConfig{};
  c.arch = Arch::attn_window;
  c.window = 3;
  CHECK(rejects(c, "window"));
  CHECK_THROWS_AS(Model::build(c), ValidationError);
}

TEST_CASE("config text round-trip") {
  ModelConfig c = toy(Arch::attn_window);
  c.seed = 99;
  const auto text = c.to_text();
  CHECK(ModelConfig::from_text(text) == c);
  CHECK(text.rfind("arch=attn_window\n", 0) == 0);
  CHECK_THROWS_AS(ModelConfig::from_text("bogus=1\n"), ValidationError);
  CHECK_THROWS_AS(ModelConfig::from_text("n_state=eight\n"), ValidationError);
}

TEST_CASE("build is deterministic in the seed") {
  for (auto arch : kAllArchs) {
    auto c = toy(arch);
    auto a = Model::build(c);
    auto b = Model::build(c);
    REQUIRE(a.params().size() == b.params().size());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      CHECK(a.params()[i].name == b.params()[i].name);
      CHECK(a.params()[i].value.same_values(b.params()[i].value));
    }
    c.seed = 1;
    auto other = Model::build(c);
    CHECK_FALSE(other.param("embed.weight").same_values(a.param("embed.weight")));
  }
}

TEST_CASE("a_log starts at log(1..N)") {
  auto m = Model::build(ModelConfig{});
  const auto& a_log = m.param("stage0.block0.mixer.dir0.a_log");
  REQUIRE(a_log.numel() == 8);
  for (std::int64_t n = 0; n < 8; ++n) CHECK(a_log[n] == doctest::Approx(std::log(n + 1.0)));
}

TEST_CASE("stream tagging is exhaustive and exclusive") {
  for (auto arch : kAllArchs) {
    auto m = Model::build(toy(arch));
    std::map<std::string, std::set<StreamTag>> per_direction;
    for (const auto& p : m.params()) {
      CHECK(p.tag == expected_stream_tag(p.name));
      const auto dir = p.name.find(".mixer.dir");
      if (dir == std::string::npos) {
        CHECK_FALSE(p.tag.has_value());
        continue;
      }
      const auto owner = p.name.substr(0, p.name.rfind('.'));
      if (p.tag) {
        // one tensor per stream within a direction, except delta's projection and bias
        CHECK((per_direction[owner].insert(*p.tag).second || *p.tag == StreamTag::Delta));
      }
    }
    for (const auto& [owner, tags] : per_direction) {
      CHECK(tags == std::set<StreamTag>{StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta});
    }
    CHECK(per_direction.empty() == (arch == Arch::attn_window));
  }
}

TEST_CASE("zero batch gives identical finite rows") {
  for (auto arch : kAllArchs) {
    auto m = Model::build(toy(arch));
    auto logits = m.forward(Tensor::zeros({3, 8, 8, 1}));
    for (std::int64_t k = 0; k < 3; ++k) {
      CHECK(std::isfinite(logits[k]));
      CHECK(logits[3 + k] == logits[k]);
      CHECK(logits[6 + k] == logits[k]);
    }
  }
}

TEST_CASE("batch permutation equivariance") {
  Rng rng(4);
  for (auto arch : kAllArchs) {
    auto m = Model::build(toy(arch));
    auto images = random_images(rng, 4, 8);
    const std::vector<std::int64_t> perm{2, 0, 3, 1};
    std::vector<float> shuffled;
    const auto per = 64;
    for (auto p : perm) {
      auto src = images.data().subspan(static_cast<std::size_t>(p * per), per);
      shuffled.insert(shuffled.end(), src.begin(), src.end());
    }
    auto base = m.forward(images);
    auto moved = m.forward(Tensor({4, 8, 8, 1}, shuffled));
    for (std::size_t r = 0; r < perm.size(); ++r)
      for (std::int64_t k = 0; k < 3; ++k)
        CHECK(moved[static_cast<std::int64_t>(r) * 3 + k] == base[perm[r] * 3 + k]);
  }
}

TEST_CASE("forward rejects bad inputs") {
  auto m = Model::build(toy(Arch::vssm_hier));
  auto bright = Tensor::full({1, 8, 8, 1}, 0.5f).to_vector();
  bright[5] = 1.5f;
  CHECK_THROWS_AS(m.forward(Tensor({1, 8, 8, 1}, bright)), ValidationError);
  CHECK_THROWS_AS(m.forward(Tensor::zeros({1, 6, 6, 1})), ShapeError);
  CHECK_THROWS_AS(check_pixel_range(Tensor({1}, {-0.01f})), ValidationError);
}

TEST_CASE("classifier loss gradient matches finite differences") {
  Rng rng(11);
  for (auto arch : kAllArchs) {
    auto m = Model::build(toy(arch));
    const std::vector<int> labels{1, 2};
    auto loss = [&](const auto& x) {
      return cross_entropy(m.forward(x), std::span<const int>(labels));
    };
    auto r = grad_check(loss, random_images(rng, 2, 8, 1, 0.1, 0.9), 1e-3, 1e-3);
    MESSAGE(to_string(arch) << " classifier grad check relative error " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("parameter gradients through forward_bound") {
  auto m = Model::build(toy(Arch::vssm_hier));
  Rng rng(2);
  Tape tape;
  std::vector<NodeId> nodes;
  const std::vector<int> labels{0, 1};
  auto logits = m.forward_bound(random_images(rng, 2, 8), tape, nodes);
  auto loss = cross_entropy(logits, std::span<const int>(labels));
  REQUIRE(nodes.size() == m.params().size());
  auto grads = tape.backward(loss, nodes);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    CHECK(grads.at(nodes[i]).shape() == m.params()[i].value.shape());
    CHECK(tape.tag_of(nodes[i]) == m.params()[i].tag);
  }
  double head = 0.0;
  for (float g : grads.at(nodes[nodes.size() - 2]).data()) head += std::abs(g);
  CHECK(head > 0.0);
}

TEST_CASE("window attention tiling and normalization") {
  ModelConfig c;
  c.arch = Arch::attn_window;
  auto m = Model::build(c);
  Rng rng(8);
  auto maps = m.attention_rollout(random_images(rng, 2, 32));
  REQUIRE(maps.size() == 4);
  // stage 0: 8x8 grid, 4x4 windows -> 4 windows per image, one head at dim 32
  CHECK(maps[0].shape() == Shape{2 * 4 * 1, 16, 16});
  // stage 1: 4x4 grid is a single window, two heads at dim 64
  CHECK(maps[2].shape() == Shape{2 * 1 * 2, 16, 16});
  for (const auto& map : maps) {
    const auto t = map.dim(2);
    for (std::int64_t row = 0; row < map.numel() / t; ++row) {
      double s = 0.0;
      for (std::int64_t j = 0; j < t; ++j) s += map[row * t + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
  }

  ModelConfig one = c;
  one.depths = {1};
  one.dims = {32};
  auto single_stage = Model::build(one);
  CHECK(single_stage.attention_rollout(random_images(rng, 1, 32))[0].dim(0) == 4);
}

TEST_CASE("attention edge cases") {
  ModelConfig c;
  c.arch = Arch::attn_window;
  c.image_size = 4;
  c.patch_size = 4;
  c.depths = {1};
  c.dims = {32};
  auto single = Model::build(c);
  Rng rng(3);
  auto maps = single.attention_rollout(random_images(rng, 1, 4));
  REQUIRE(maps[0].shape() == Shape{1, 1, 1});
  CHECK(maps[0][0] == 1.0f);

  // zero query/key projections give equal logits, so attention is uniform
  ModelConfig u;
  u.arch = Arch::attn_window;
  u.depths = {1};
  u.dims = {32};
  auto uniform = Model::build(u);
  uniform.load_param("stage0.block0.attn.q_proj", Tensor::zeros({32, 32}));
  uniform.load_param("stage0.block0.attn.k_proj", Tensor::zeros({32, 32}));
  auto flat = uniform.attention_rollout(random_images(rng, 1, 32))[0];
  for (float v : flat.data()) CHECK(v == doctest::Approx(1.0 / 16.0));
  // every query attends 1/16 to one chosen token -> 16 queries * 1/16 = 1
  auto paid = uniform.attention_to_patches(random_images(rng, 1, 32), {9});
  CHECK(paid.item() == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("ssm models have no attention") {
  auto m = Model::build(ModelConfig{});
  Rng rng(1);
  CHECK_THROWS_AS(m.attention_rollout(random_images(rng, 1, 32)), ValidationError);
  CHECK_THROWS_AS(m.attention_to_patches(random_images(rng, 1, 32), {0}), ValidationError);
}

TEST_CASE("load_param checks names and shapes") {
  auto m = Model::build(toy(Arch::vssm_hier));
  CHECK_THROWS_AS(m.load_param("nope", Tensor::zeros({1})), ValidationError);
  CHECK_THROWS_AS(m.load_param("head.bias", Tensor::zeros({4})), ShapeError);
  m.load_param("head.bias", Tensor::full({3}, 2.f));
  CHECK(m.param("head.bias")[1] == 2.f);
}
