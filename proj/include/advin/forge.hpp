#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advin/attack.hpp"
#include "advin/dataset.hpp"
#include "advin/label_map.hpp"
#include "advin/model.hpp"
#include "advin/train.hpp"

namespace advin {

enum class ForgeMethod { kAdvin, kStdin, kErrorMin, kAdvExample };
std::string to_string(ForgeMethod m);
ForgeMethod parse_forge_method(std::string_view name);

struct ForgeConfig {
  double epsilon_p = 32.0 / 255.0;
  std::size_t poison_steps = 60;  // T
  double step_size = 2.0 / 255.0;
  std::size_t train_steps = 30;  // M
  double eta = 0.99;
  std::size_t max_rounds = 50;
  /// Rounds always run before the PSR check may stop the loop.
  std::size_t min_rounds = 1;
  LabelMapSpec label_map;
  ArchitectureSpec source_spec;
  /// Optimizer settings for the source model; `inner` is ignored, the
  /// source AT inner attack comes from the two fields below.
  TrainConfig source_train = default_source_train();
  double source_at_epsilon = 8.0 / 255.0;
  std::size_t source_at_steps = 10;
  /// Side of a centered square noise patch; 0 covers the whole image.
  std::size_t patch = 0;
  /// Examples scored per PSR check; 0 scores the full set.
  std::size_t psr_sample = 0;
  std::size_t attack_batch = 250;
  std::uint64_t seed = 0;

  static TrainConfig default_source_train();
  void validate() const;
};

struct Provenance {
  ForgeMethod method = ForgeMethod::kAdvin;
  std::uint64_t source_seed = 0;
  double psr = 0.0;
  std::size_t rounds = 0;
  bool reached_threshold = false;
};

/// Clean examples plus per-example perturbations and inducing labels,
/// index-aligned with the clean set. True labels are never altered.
struct PoisonedDataset {
  LabeledDataset clean;
  Tensor deltas;             // (N,C,H,W)
  std::vector<int> targets;  // y' per example (== y for error-min)
  double epsilon_p = 0.0;
  LabelMapSpec label_map;
  std::optional<std::vector<int>> class_map;
  Provenance provenance;
  nlohmann::json config = nlohmann::json::object();

  std::size_t size() const { return clean.size(); }
  /// x + delta for every example.
  Tensor poisoned_images() const;
  /// (x + delta, y) as a plain dataset, ready for training.
  LabeledDataset poisoned_view() const;
  /// (x + delta, y'), what the source model is trained on.
  LabeledDataset inducing_view() const;
};

/// Fraction of examples with argmax f(x + delta) == y'. `sample` > 0 scores
/// only that many examples drawn with `seed`.
double psr(const ModelState& model, const PoisonedDataset& data, std::size_t sample = 0,
           std::uint64_t seed = 0);

struct ForgeResult {
  PoisonedDataset poisoned;
  ModelState source;
};

/// Inducing adversarial training: alternate T-step targeted PGD refreshes of
/// every delta with M steps of adversarial training of the source on
/// (x + delta, y'), until psr >= eta (checked from round min_rounds on) or
/// max_rounds. `label_model` supplies
/// y' for strategies that need a model (LL, MC).
ForgeResult advin_generate(const LabeledDataset& clean, const ForgeConfig& cfg,
                           const ModelState* label_model = nullptr);
/// The same loop with standard training of the source.
ForgeResult stdin_generate(const LabeledDataset& clean, const ForgeConfig& cfg,
                           const ModelState* label_model = nullptr);
/// Min-min noise: minimize CE toward the true label, standard training of the
/// source, stop once the source fits (x + delta, y) at rate eta.
ForgeResult error_min_generate(const LabeledDataset& clean, const ForgeConfig& cfg);
/// One-shot targeted PGD (T steps from delta = 0) against a fixed model.
PoisonedDataset adv_example_generate(const LabeledDataset& clean, const ModelState& pretrained,
                                     const ForgeConfig& cfg);

nlohmann::json forge_config_to_json(const ForgeConfig& cfg);
ForgeConfig forge_config_from_json(const nlohmann::json& j);

/// Directory with metadata.json and deltas.bin (one tensor record per
/// example). Returns the archive hash.
std::uint64_t save_archive(const std::filesystem::path& dir, const PoisonedDataset& data);
/// Rebuilds the poisoned set against `clean`; throws FormatError if the
/// recorded dataset hash does not match.
PoisonedDataset load_archive(const std::filesystem::path& dir, const LabeledDataset& clean);
/// FNV-1a over the archive files, metadata first.
std::uint64_t archive_hash(const std::filesystem::path& dir);
nlohmann::json read_archive_metadata(const std::filesystem::path& dir);

/// Tiles the first `limit` poisoned images into `dir/poisoned.png` and the
/// matching deltas, rescaled from [-eps, eps] to [0, 1], into `dir/noise.png`.
void export_png(const std::filesystem::path& dir, const PoisonedDataset& data,
                std::size_t limit = 64);

}  // namespace advin
