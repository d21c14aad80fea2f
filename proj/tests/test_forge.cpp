#include "advin/forge.hpp"

#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "advin/ops.hpp"
#include "advin/rng.hpp"

namespace advin {
namespace {

namespace fs = std::filesystem;

ArchitectureSpec spec8(std::size_t classes) {
  ArchitectureSpec s;
  s.height = s.width = 8;
  s.classes = classes;
  return s;
}

// Two classes: bright left half or bright right half.
LabeledDataset separable(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({n, 1, 8, 8});
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 2);
    for (std::size_t p = 0; p < 64; ++p) {
      const bool lit = (p % 8 < 4) == (y[i] == 0);
      x[i * 64 + p] = static_cast<float>(std::clamp((lit ? 0.7 : 0.3) + 0.05 * rng.normal(), 0.0, 1.0));
    }
  }
  return LabeledDataset(std::move(x), std::move(y), 2, Split::kTrain);
}

ForgeConfig small_config(std::size_t classes) {
  ForgeConfig c;
  c.source_spec = spec8(classes);
  c.label_map.classes = classes;
  c.poison_steps = 10;
  c.train_steps = 10;
  c.source_train.batch_size = 32;
  c.max_rounds = 20;
  c.seed = 3;
  return c;
}

LabeledDataset glyphs8(std::uint64_t seed) {
  GlyphSetConfig g;
  g.classes = 4;
  g.side = 8;
  g.max_offset = 1;
  g.train_per_class = 20;
  g.test_per_class = 1;
  g.seed = seed;
  return make_glyphset(g).train;
}

ModelState constant_model(const std::vector<float>& bias) {
  const auto a = spec8(bias.size());
  std::vector<Tensor> p;
  for (const auto& slot : parameter_layout(a)) p.emplace_back(slot.shape);
  p.back() = Tensor({bias.size()}, bias);
  return ModelState(a, 0, std::move(p));
}

PoisonedDataset with_targets(const LabeledDataset& clean, std::vector<int> targets) {
  PoisonedDataset d{clean, Tensor(clean.images().shape()), std::move(targets), 0.0, {}, std::nullopt, {}, {}};
  d.label_map.classes = clean.classes();
  return d;
}

void expect_budget(const PoisonedDataset& d) {
  const auto a = audit_perturbation(d.deltas, d.clean.images(), d.epsilon_p);
  EXPECT_EQ(a.total(), 0u);
  EXPECT_EQ(a.checked, d.deltas.numel());
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(Psr, TrivialModels) {
  const auto clean = separable(6, 1);
  std::vector<int> flipped(6);
  for (std::size_t i = 0; i < 6; ++i) flipped[i] = 1 - clean.label(i);
  const auto d = with_targets(clean, flipped);
  // constant prediction 1: succeeds exactly on the class-0 examples
  EXPECT_DOUBLE_EQ(psr(constant_model({0, 1}), d), 0.5);
  const auto all_zero = with_targets(clean, std::vector<int>(6, 0));
  EXPECT_DOUBLE_EQ(psr(constant_model({1, 0}), all_zero), 1.0);
  EXPECT_DOUBLE_EQ(psr(constant_model({0, 1}), all_zero), 0.0);
}

TEST(Psr, HandCountedFive) {
  const auto clean = subset(make_glyphset({.classes = 3, .train_per_class = 5, .side = 8}).train, 5, 0);
  const auto five = LabeledDataset(clean.images().slice_rows(0, 5),
                                   std::vector<int>(clean.labels().begin(), clean.labels().begin() + 5), 3,
                                   Split::kTrain);
  // constant prediction 2; three of five targets are 2
  EXPECT_DOUBLE_EQ(psr(constant_model({0, 1, 3}), with_targets(five, {2, 0, 2, 1, 2})), 0.6);
  EXPECT_THROW(psr(constant_model({0, 1}), with_targets(five, {0, 0, 0, 0, 0})), std::invalid_argument);
}

TEST(Config, ValidationAndJson) {
  ForgeConfig c;
  c.epsilon_p = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.eta = 1.2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.poison_steps = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.min_rounds = c.max_rounds + 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.min_rounds = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  ForgeConfig a = small_config(2);
  a.epsilon_p = 16.0 / 255;
  a.patch = 4;
  a.label_map.strategy = LabelStrategy::kNearSwap;
  const auto b = forge_config_from_json(forge_config_to_json(a));
  EXPECT_EQ(b.epsilon_p, a.epsilon_p);
  EXPECT_EQ(b.patch, 4u);
  EXPECT_EQ(b.poison_steps, a.poison_steps);
  EXPECT_EQ(b.label_map.strategy, LabelStrategy::kNearSwap);
  EXPECT_EQ(b.source_spec, a.source_spec);
  EXPECT_EQ(b.seed, a.seed);
  EXPECT_EQ(forge_config_to_json(b), forge_config_to_json(a));
  for (auto m : {ForgeMethod::kAdvin, ForgeMethod::kStdin, ForgeMethod::kErrorMin, ForgeMethod::kAdvExample})
    EXPECT_EQ(parse_forge_method(to_string(m)), m);
}

TEST(Advin, SeparableSetReachesThreshold) {
  const auto clean = separable(64, 2);
  const auto r = advin_generate(clean, small_config(2));
  const auto& p = r.poisoned.provenance;
  EXPECT_EQ(p.method, ForgeMethod::kAdvin);
  EXPECT_TRUE(p.reached_threshold);
  EXPECT_GE(p.rounds, 1u);
  EXPECT_GE(p.psr, 0.99);
  EXPECT_EQ(psr(r.source, r.poisoned), p.psr);
  expect_budget(r.poisoned);
  const auto g = class_map(r.poisoned.label_map);
  for (std::size_t i = 0; i < clean.size(); ++i) EXPECT_EQ(r.poisoned.targets[i], g[clean.label(i)]);
  EXPECT_EQ(r.poisoned.poisoned_view().labels(), clean.labels());
}

TEST(Advin, ZeroEtaStopsAfterOneRound) {
  const auto clean = separable(32, 3);
  auto c = small_config(2);
  c.eta = 0.0;
  for (const auto& r : {advin_generate(clean, c), stdin_generate(clean, c), error_min_generate(clean, c)}) {
    EXPECT_EQ(r.poisoned.provenance.rounds, 1u);
    EXPECT_TRUE(r.poisoned.provenance.reached_threshold);
    expect_budget(r.poisoned);
  }
}

TEST(Advin, RoundCapIsFlagged) {
  const auto clean = separable(32, 3);
  auto c = small_config(2);
  c.eta = 1.0;
  c.source_train.lr = 0.0;  // the source never learns the flipped labels
  c.max_rounds = 2;
  const auto r = advin_generate(clean, c);
  EXPECT_EQ(r.poisoned.provenance.rounds, 2u);
  EXPECT_FALSE(r.poisoned.provenance.reached_threshold);
}

TEST(Advin, MinRoundsDelaysTheStop) {
  const auto clean = separable(32, 3);
  auto c = small_config(2);
  c.eta = 0.0;
  c.min_rounds = 3;
  const auto r = advin_generate(clean, c);
  EXPECT_EQ(r.poisoned.provenance.rounds, 3u);
  EXPECT_TRUE(r.poisoned.provenance.reached_threshold);
  c.min_rounds = 1;
  EXPECT_EQ(advin_generate(clean, c).poisoned.provenance.rounds, 1u);
}

TEST(Advin, PatchRestrictsSupport) {
  const auto clean = separable(16, 4);
  auto c = small_config(2);
  c.eta = 0.0;
  c.patch = 4;
  const auto r = advin_generate(clean, c);
  const Tensor mask = make_patch_mask({1, 8, 8}, 4);
  const auto a = audit_perturbation(r.poisoned.deltas, clean.images(), c.epsilon_p, &mask);
  EXPECT_EQ(a.total(), 0u);
}

TEST(Advin, ModelStrategiesNeedALabelModel) {
  const auto clean = separable(16, 4);
  auto c = small_config(2);
  c.label_map.strategy = LabelStrategy::kLeastLikely;
  EXPECT_THROW(advin_generate(clean, c), std::invalid_argument);
  c.eta = 0.0;
  const auto m = constant_model({3, 1});
  const auto r = advin_generate(clean, c, &m);
  for (std::size_t i = 0; i < clean.size(); ++i) EXPECT_EQ(r.poisoned.targets[i], 1 - clean.label(i));
}

TEST(Stdin, DiffersFromAdvin) {
  const auto clean = glyphs8(2);
  auto c = small_config(4);
  c.max_rounds = 2;
  c.eta = 1.0;
  c.epsilon_p = 1.0 / 255;  // one round on a fresh source cannot reach PSR 1
  const auto a = advin_generate(clean, c);
  const auto s = stdin_generate(clean, c);
  ASSERT_EQ(a.poisoned.provenance.rounds, 2u);
  ASSERT_EQ(s.poisoned.provenance.rounds, 2u);
  EXPECT_EQ(s.poisoned.provenance.method, ForgeMethod::kStdin);
  EXPECT_NE(a.poisoned.deltas, s.poisoned.deltas);
  expect_budget(s.poisoned);
}

TEST(ErrorMin, LowersTrainingLoss) {
  const auto clean = glyphs8(5);
  auto c = small_config(4);
  c.epsilon_p = 8.0 / 255;
  const auto r = error_min_generate(clean, c);
  EXPECT_EQ(r.poisoned.targets, clean.labels());
  const auto poisoned = r.poisoned.poisoned_view();
  auto mean = [](const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += x;
    return s / v.size();
  };
  const double on_poison = mean(cross_entropy_rows(logits(r.source, poisoned.images()), clean.labels()));
  const double on_clean = mean(cross_entropy_rows(logits(r.source, clean.images()), clean.labels()));
  EXPECT_LT(on_poison, on_clean);
  expect_budget(r.poisoned);
}

TEST(AdvExample, TargetLossNeverRises) {
  const auto clean = glyphs8(6);
  TrainConfig t;
  t.epochs = 5;
  t.batch_size = 16;
  t.trace_robust = false;
  const auto pre = train_standard(clean, spec8(4), t).model;
  auto c = small_config(4);
  c.poison_steps = 200;
  const auto d = adv_example_generate(clean, pre, c);
  EXPECT_EQ(d.provenance.method, ForgeMethod::kAdvExample);
  EXPECT_EQ(d.provenance.rounds, 1u);
  const auto before = cross_entropy_rows(logits(pre, clean.images()), d.targets);
  const auto after = cross_entropy_rows(logits(pre, d.poisoned_images()), d.targets);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_LE(after[i], before[i]);
  EXPECT_GT(psr(pre, d), psr(init_model(spec8(4), 77), d));
  expect_budget(d);

  c.epsilon_p = 0.0;
  const auto zero = adv_example_generate(clean, pre, c);
  EXPECT_EQ(zero.poisoned_view().images(), clean.images());
}

TEST(Archive, RoundTripAndHash) {
  const auto clean = separable(16, 7);
  auto c = small_config(2);
  c.eta = 0.0;
  const auto r = advin_generate(clean, c);
  TempDir a("advin_archive_a"), b("advin_archive_b");
  const auto h = save_archive(a.path(), r.poisoned);
  EXPECT_EQ(h, archive_hash(a.path()));
  EXPECT_EQ(save_archive(b.path(), advin_generate(clean, c).poisoned), h);

  const auto meta = read_archive_metadata(a.path());
  EXPECT_EQ(meta["method"], "advin");
  EXPECT_EQ(meta["examples"], 16);
  EXPECT_EQ(meta["provenance"]["rounds"], 1);

  const auto back = load_archive(a.path(), clean);
  EXPECT_EQ(back.deltas, r.poisoned.deltas);
  EXPECT_EQ(back.targets, r.poisoned.targets);
  EXPECT_EQ(back.provenance.psr, r.poisoned.provenance.psr);
  EXPECT_EQ(back.provenance.method, ForgeMethod::kAdvin);
  EXPECT_THROW(load_archive(a.path(), separable(16, 8)), FormatError);
  EXPECT_THROW(load_archive(a.path() / "missing", clean), std::runtime_error);
}

TEST(Archive, PngExport) {
  const auto clean = separable(10, 7);
  auto c = small_config(2);
  c.eta = 0.0;
  const auto r = advin_generate(clean, c);
  TempDir dir("advin_png");
  export_png(dir.path(), r.poisoned, 6);
  for (const char* name : {"poisoned.png", "noise.png"}) {
    std::ifstream is(dir.path() / name, std::ios::binary);
    char sig[8] = {};
    is.read(sig, 8);
    EXPECT_EQ(std::string(sig + 1, 3), "PNG") << name;
  }
}

}  // namespace
}  // namespace advin
