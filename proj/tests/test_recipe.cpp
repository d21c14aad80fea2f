#include "advin/recipe.hpp"

#include <cstdlib>

#include <gtest/gtest.h>

#include "advin/rng.hpp"

namespace advin {
namespace {

TEST(Fraction, ParsesExactly) {
  EXPECT_EQ(parse_fraction("8/255"), 8.0 / 255.0);
  EXPECT_EQ(parse_fraction("32/255"), 32.0 / 255.0);
  EXPECT_EQ(parse_fraction("0.99"), 0.99);
  EXPECT_EQ(parse_fraction("0"), 0.0);
  EXPECT_THROW(parse_fraction("1/0"), std::invalid_argument);
  EXPECT_THROW(parse_fraction("eight"), std::invalid_argument);
  EXPECT_THROW(parse_fraction("8/255x"), std::invalid_argument);
}

TEST(Fraction, ResolvedInsideJson) {
  const auto j = resolve_fractions({{"a", "2/255"}, {"b", {{"c", "1/4"}}}, {"s", "nextcycle"}});
  EXPECT_EQ(j["a"].get<double>(), 2.0 / 255.0);
  EXPECT_EQ(j["b"]["c"].get<double>(), 0.25);
  EXPECT_EQ(j["s"], "nextcycle");
}

TEST(Recipe, SeedsDeriveFromTheRecipeSeed) {
  const auto r = recipe_from_json({{"seed", 7}});
  EXPECT_EQ(r.forge.seed, derive_seed(7, "forge"));
  EXPECT_EQ(r.train_st.seed, derive_seed(7, "train"));
  EXPECT_EQ(r.train_at.seed, r.train_st.seed);
  EXPECT_EQ(r.eval_seed, derive_seed(7, "eval"));
  EXPECT_EQ(r.dataset.glyphset.seed, derive_seed(7, "dataset"));
  EXPECT_FALSE(r.train_st.inner.has_value());
  ASSERT_TRUE(r.train_at.inner.has_value());
  EXPECT_EQ(r.train_at.inner->epsilon, 8.0 / 255.0);
  EXPECT_THROW(recipe_from_json(nlohmann::json::object()), nlohmann::json::exception);
}

TEST(Recipe, ExplicitValuesWin) {
  nlohmann::json j = {{"seed", 7},
                      {"method", "stdin"},
                      {"dataset", {{"source", "glyphset"}, {"glyphset", {{"seed", 1}, {"side", 8}}}}},
                      {"forge",
                       {{"epsilon_p", "16/255"},
                        {"eta", 0.9},
                        {"seed", 11},
                        {"label_map", {{"strategy", "random"}}},
                        {"source_train", {{"lr", 0.02}}}}},
                      {"train", {{"at", {{"warmup_epochs", 3}}}}},
                      {"poison_rate", 0.4}};
  const auto r = recipe_from_json(j);
  EXPECT_EQ(r.method, ForgeMethod::kStdin);
  EXPECT_EQ(r.dataset.glyphset.seed, 1u);
  EXPECT_EQ(r.dataset.glyphset.side, 8u);
  EXPECT_EQ(r.forge.epsilon_p, 16.0 / 255.0);
  EXPECT_EQ(r.forge.seed, 11u);
  EXPECT_EQ(r.forge.label_map.strategy, LabelStrategy::kRandom);
  EXPECT_EQ(r.forge.source_train.lr, 0.02);
  EXPECT_EQ(r.forge.source_train.batch_size, ForgeConfig::default_source_train().batch_size);
  EXPECT_EQ(r.train_at.warmup_epochs, 3u);
  EXPECT_EQ(r.poison_rate, 0.4);

  // a round trip through JSON is a fixed point
  const auto again = recipe_from_json(recipe_to_json(r));
  EXPECT_EQ(recipe_to_json(again), recipe_to_json(r));
}

TEST(Recipe, FitsSpecsToTheData) {
  auto r = recipe_from_json({{"seed", 1},
                             {"dataset", {{"glyphset", {{"classes", 4}, {"side", 8}, {"train_per_class", 3},
                                                         {"test_per_class", 2}, {"max_offset", 1}}}}},
                             {"target", {{"arch", "minires"}, {"width", 0.5}}}});
  const auto tt = load_source(r.dataset);
  r.fit_to(tt.train);
  EXPECT_EQ(r.forge.source_spec.classes, 4u);
  EXPECT_EQ(r.forge.source_spec.height, 8u);
  EXPECT_EQ(r.forge.label_map.classes, 4u);
  const auto t = r.target_spec(tt.train);
  EXPECT_EQ(t.arch, Architecture::kMiniRes);
  EXPECT_EQ(t.width_multiplier, 0.5);
  EXPECT_EQ(t.input_shape(), (Shape{1, 8, 8}));
}

TEST(Recipe, BadValuesThrow) {
  EXPECT_THROW(recipe_from_json({{"seed", 1}, {"method", "advin2"}}), std::invalid_argument);
  EXPECT_THROW(recipe_from_json({{"seed", 1}, {"poison_rate", 1.5}}), std::invalid_argument);
  EXPECT_THROW(recipe_from_json({{"seed", 1}, {"dataset", {{"source", "svhn"}}}}), std::invalid_argument);
  EXPECT_THROW(recipe_from_json({{"seed", 1}, {"train", {{"at", {{"inner", nullptr}}}}}}),
               std::invalid_argument);
}

TEST(DataPath, RelativeToDataDir) {
  ::setenv("ADVIN_DATA_DIR", "/data/root", 1);
  EXPECT_EQ(resolve_data_path("cifar"), std::filesystem::path("/data/root/cifar"));
  EXPECT_EQ(resolve_data_path("/abs/x"), std::filesystem::path("/abs/x"));
  ::unsetenv("ADVIN_DATA_DIR");
  EXPECT_EQ(resolve_data_path("cifar"), std::filesystem::path("cifar"));
}

TEST(TrainJson, RoundTrip) {
  TrainConfig c;
  c.epochs = 4;
  c.lr = 0.02;
  c.schedule.kind = LrSchedule::Kind::kMultiStep;
  c.schedule.milestones = {2, 3};
  c.inner = default_inner_attack(4.0 / 255);
  c.warmup_epochs = 1;
  const auto b = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(train_config_to_json(b), train_config_to_json(c));
  EXPECT_THROW(train_config_from_json({{"schedule", {{"kind", "step"}}}}), std::invalid_argument);
}

}  // namespace
}  // namespace advin
