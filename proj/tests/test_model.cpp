#include "advin/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "advin/ops.hpp"
#include "advin/rng.hpp"
#include "support/model_check.hpp"
#include "support/reference.hpp"

namespace advin {
namespace {

Tensor random_images(std::uint64_t seed, std::size_t n, const ArchitectureSpec& spec) {
  Rng rng(seed);
  Tensor x({n, spec.channels, spec.height, spec.width});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform01());
  return x;
}

ArchitectureSpec res_spec() {
  ArchitectureSpec s;
  s.arch = Architecture::kMiniRes;
  return s;
}

TEST(Spec, ValidationAndNames) {
  ArchitectureSpec s;
  s.classes = 1;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  s.height = 4;  // MiniConv pools three times
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_EQ(parse_architecture("miniconv"), Architecture::kMiniConv);
  EXPECT_EQ(parse_architecture(to_string(Architecture::kMiniRes)), Architecture::kMiniRes);
  EXPECT_THROW(parse_architecture("resnet18"), std::invalid_argument);
  EXPECT_EQ(spec_from_json(spec_to_json(res_spec())), res_spec());
}

TEST(Layout, ParameterCounts) {
  EXPECT_EQ(parameter_layout(ArchitectureSpec{}).size(), 8u);
  EXPECT_EQ(parameter_layout(res_spec()).size(), 14u);
  const auto m = init_model(ArchitectureSpec{}, 1);
  // 1->8->16->32 convs, 32*2*2 -> 10 dense
  EXPECT_EQ(m.parameter_count(), (8u * 9 + 8) + (16u * 8 * 9 + 16) + (32u * 16 * 9 + 32) + (128u * 10 + 10));
}

TEST(Init, DeterministicInSeed) {
  const auto a = init_model(ArchitectureSpec{}, 7);
  const auto b = init_model(ArchitectureSpec{}, 7);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), init_model(ArchitectureSpec{}, 8).hash());
}

TEST(Init, LayerMeansNearZero) {
  for (const auto& spec : {ArchitectureSpec{}, res_spec()}) {
    const auto m = init_model(spec, 3);
    for (std::size_t k = 0; k < m.params().size(); ++k) {
      const auto& t = m.params()[k];
      double s = 0.0;
      for (float v : t.data()) s += v;
      EXPECT_NEAR(s / static_cast<double>(t.numel()), 0.0, 0.05) << m.layout()[k].name;
    }
  }
}

TEST(Init, WeightsWithinBound) {
  const auto m = init_model(res_spec(), 4);
  for (std::size_t k = 0; k < m.params().size(); ++k) {
    const auto& slot = m.layout()[k];
    if (slot.fan_in == 0) {
      EXPECT_EQ(m.params()[k].abs_max(), 0.0f);
      continue;
    }
    // shifting to zero mean can move a value by at most the bound itself
    EXPECT_LE(m.params()[k].abs_max(), 2.0 * std::sqrt(6.0 / slot.fan_in));
  }
}

TEST(Init, WidthMultiplierDoublesChannels) {
  auto one = res_spec(), two = res_spec();
  two.width_multiplier = 2.0;
  const auto l1 = parameter_layout(one), l2 = parameter_layout(two);
  ASSERT_EQ(l1.size(), l2.size());
  for (std::size_t k = 0; k + 2 < l1.size(); ++k) {
    if (l1[k].shape.size() != 4) continue;
    EXPECT_EQ(l2[k].shape[0], 2 * l1[k].shape[0]) << l1[k].name;
  }
}

TEST(Logits, ZeroInputIsFinite) {
  for (const auto& spec : {ArchitectureSpec{}, res_spec()}) {
    const auto m = init_model(spec, 5);
    const Tensor z = logits(m, Tensor({2, spec.channels, spec.height, spec.width}));
    EXPECT_EQ(z.shape(), (Shape{2, spec.classes}));
    EXPECT_TRUE(z.all_finite());
  }
}

TEST(Logits, BatchIndependenceAndEquivariance) {
  for (const auto& spec : {ArchitectureSpec{}, res_spec()}) {
    const auto m = init_model(spec, 6);
    const Tensor x = random_images(1, 5, spec);
    const Tensor z = logits(m, x);
    for (std::size_t i = 0; i < 5; ++i) {
      const Tensor zi = logits(m, x.row(i));
      for (std::size_t k = 0; k < spec.classes; ++k)
        EXPECT_NEAR(zi[k], z[i * spec.classes + k], 1e-5);
    }
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<Tensor> rows;
    for (auto i : perm) rows.push_back(x.row(i));
    const Tensor zp = logits(m, stack(rows));
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t k = 0; k < spec.classes; ++k)
        EXPECT_NEAR(zp[r * spec.classes + k], z[perm[r] * spec.classes + k], 1e-5);
    const Tensor dup = logits(m, stack(std::vector<Tensor>{x.row(2), x.row(2)}));
    for (std::size_t k = 0; k < spec.classes; ++k) EXPECT_EQ(dup[k], dup[spec.classes + k]);
  }
}

TEST(Logits, MatchesDoubleOracle) {
  for (const auto& spec : {ArchitectureSpec{}, res_spec()}) {
    const auto m = init_model(spec, 9);
    const Tensor x = random_images(2, 3, spec);
    std::vector<ref::Array> p;
    for (const auto& t : m.params()) p.push_back(ref::from_tensor(t));
    const auto want = ref::model_forward(spec, p, ref::from_tensor(x));
    const Tensor got = logits(m, x);
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want.v[i], 1e-4);
  }
}

TEST(Residual, ZeroBranchIsShortcut) {
  Rng rng(12);
  Tensor xt({2, 4, 6, 6});
  for (auto& v : xt.data()) v = static_cast<float>(rng.uniform01());
  Tape tape;
  Var x = tape.constant(xt);
  Var w1 = tape.constant(Tensor({4, 4, 3, 3})), b1 = tape.constant(Tensor({4}));
  Var w2 = tape.constant(Tensor({4, 4, 3, 3})), b2 = tape.constant(Tensor({4}));
  // identity shortcut: relu(0 + x) == x for nonnegative x
  EXPECT_EQ(residual_block(x, w1, b1, w2, b2, Var{}, Var{}, 1).value(), xt);

  Tensor pw({4, 4, 1, 1});
  for (auto& v : pw.data()) v = static_cast<float>(rng.normal());
  Var sw = tape.constant(pw), sb = tape.constant(Tensor({4}));
  const Tensor got = residual_block(x, w1, b1, w2, b2, sw, sb, 2).value();
  const Tensor want = relu(conv2d(x, sw, sb, {2, 0})).value();
  EXPECT_EQ(got.shape(), (Shape{2, 4, 3, 3}));
  EXPECT_EQ(got, want);
}

TEST(Checkpoint, RoundTripPreservesLogitsBitExactly) {
  const auto dir = std::filesystem::temp_directory_path() / "advin_test_model";
  std::filesystem::create_directories(dir);
  for (const auto& spec : {ArchitectureSpec{}, res_spec()}) {
    const auto m = init_model(spec, 13);
    const auto path = dir / (to_string(spec.arch) + ".ckpt");
    save_checkpoint(path, m, {{"note", "x"}});
    const auto c = load_checkpoint(path);
    EXPECT_EQ(c.model.spec(), spec);
    EXPECT_EQ(c.model.seed(), 13u);
    EXPECT_EQ(c.model.hash(), m.hash());
    EXPECT_EQ(c.metadata["note"], "x");
    const Tensor x = random_images(4, 3, spec);
    EXPECT_EQ(logits(c.model, x), logits(m, x));
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "advin_bad.ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(ModelState, RejectsMismatchedParams) {
  const auto m = init_model(ArchitectureSpec{}, 1);
  auto p = m.params();
  p.back() = Tensor({9});
  EXPECT_THROW(m.with_params(p), ShapeError);
  p.pop_back();
  EXPECT_THROW(m.with_params(p), std::invalid_argument);
  EXPECT_THROW(m.param("nope"), std::out_of_range);
  EXPECT_EQ(m.param("fc.bias").shape(), (Shape{10}));
}

TEST(GradientOracle, MiniConv) {
  ref::GradCheck r;
  for (std::uint64_t s = 0; s < 3; ++s) ref::check_model_instance(ref::small_spec(Architecture::kMiniConv), s, r);
  EXPECT_EQ(r.failures, 0u) << r.first_failure;
}

TEST(GradientOracle, MiniRes) {
  ref::GradCheck r;
  for (std::uint64_t s = 0; s < 3; ++s) ref::check_model_instance(ref::small_spec(Architecture::kMiniRes), s, r);
  EXPECT_EQ(r.failures, 0u) << r.first_failure;
}

}  // namespace
}  // namespace advin
