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
#include "advin/model.hpp"

namespace advin {

/// PGD-20, eps 8/255, step 2/255, random start.
AttackConfig default_eval_attack();

struct EvalReport {
  std::size_t examples = 0;
  double natural_accuracy = 0.0;
  double robust_accuracy = 0.0;
  AttackConfig attack;
  std::uint64_t seed = 0;
  /// K x K counts, rows = true class, cols = prediction under attack.
  std::vector<std::vector<std::size_t>> confusion;
  /// Per true class, the most frequent wrong prediction under attack
  /// (smallest index on ties, including all-zero rows).
  std::vector<int> bias_target;
  std::optional<double> psr;
};

/// Natural and robust accuracy over `test`. An example counts as robust only
/// if it is classified correctly both clean and under attack (the attacker
/// may always play delta = 0); the confusion matrix records the prediction
/// the attacker achieved under that rule. Deterministic in `seed`.
EvalReport evaluate(const LogitFn& model, const LabeledDataset& test, const AttackConfig& attack,
                    std::uint64_t seed = 0, std::size_t batch_size = 200);
EvalReport evaluate(const ModelState& model, const LabeledDataset& test,
                    const AttackConfig& attack, std::uint64_t seed = 0,
                    std::size_t batch_size = 200);

/// Clean accuracy only.
double natural_accuracy(const ModelState& model, const LabeledDataset& data,
                        std::size_t batch_size = 500);

/// Per row, the off-diagonal column with the largest count (smallest index
/// on ties). Needs K >= 2.
std::vector<int> bias_targets(const std::vector<std::vector<std::size_t>>& confusion);

/// Fraction of classes y whose bias_target equals g(y).
double bias_diagnostic(const EvalReport& report, const std::vector<int>& g);

nlohmann::json report_to_json(const EvalReport& report);
/// One row per true class: class, count, robust-correct, bias target, then the
/// confusion row.
std::string report_to_csv(const EvalReport& report);
/// Heatmap of the row-normalized confusion matrix.
std::string confusion_svg(const EvalReport& report);

nlohmann::json attack_to_json(const AttackConfig& cfg);
AttackConfig attack_from_json(const nlohmann::json& j);

}  // namespace advin
