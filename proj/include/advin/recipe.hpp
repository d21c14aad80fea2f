#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "advin/attack.hpp"
#include "advin/dataset.hpp"
#include "advin/forge.hpp"
#include "advin/model.hpp"
#include "advin/train.hpp"

namespace advin {

/// "8/255", "0.5" or "3". Fractions divide two doubles, so "8/255" is the
/// same double as the literal 8.0 / 255.0.
double parse_fraction(std::string_view text);

/// Replaces every string value shaped like a fraction by its number.
nlohmann::json resolve_fractions(nlohmann::json j);

/// Where the clean data comes from.
///   glyphset: generated from `glyphset` (its seed is part of the descriptor)
///   cifar10:  binary batches under `path`
///   file:     save_dataset files `path` (train) and `test_path`
/// Relative paths resolve against ADVIN_DATA_DIR when it is set.
struct DatasetSource {
  std::string kind = "glyphset";
  GlyphSetConfig glyphset;
  std::filesystem::path path;
  std::filesystem::path test_path;
  std::size_t subset_per_class = 0;  // 0 keeps the full train split
  std::uint64_t subset_seed = 0;
};

nlohmann::json dataset_source_to_json(const DatasetSource& s);
DatasetSource dataset_source_from_json(const nlohmann::json& j);
TrainTest load_source(const DatasetSource& s);
std::filesystem::path resolve_data_path(const std::filesystem::path& p);

/// One experiment. Component seeds default to derive_seed(seed, component)
/// with components "dataset", "subset", "forge", "label-map", "train" (shared
/// by ST and AT so both start from the same weights), "eval" and "mix"; an
/// explicit "seed" key inside a section wins.
struct Recipe {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  DatasetSource dataset;
  ForgeMethod method = ForgeMethod::kAdvin;
  ForgeConfig forge;
  /// Checkpoint for LL/MC labels and the adv-example pretrained model.
  std::optional<std::filesystem::path> label_model;
  Architecture target_arch = Architecture::kMiniConv;
  double target_width = 1.0;
  TrainConfig train_st;
  TrainConfig train_at;
  AttackConfig eval = default_eval_attack();
  std::uint64_t eval_seed = 0;
  double poison_rate = 1.0;
  std::uint64_t mix_seed = 0;
  std::filesystem::path output_dir = "advin-out";

  /// Source and target specs sized for the data.
  ArchitectureSpec target_spec(const LabeledDataset& data) const;
  void fit_to(const LabeledDataset& data);
};

Recipe recipe_from_json(const nlohmann::json& j);
nlohmann::json recipe_to_json(const Recipe& r);
Recipe load_recipe(const std::filesystem::path& file);

}  // namespace advin
