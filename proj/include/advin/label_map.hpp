#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "advin/model.hpp"
#include "advin/tensor.hpp"

namespace advin {

// Inducing-label strategies. Labels are 0-indexed throughout, so the cyclic
// rule "y+1 mod K" over 1..K becomes (y+1) mod K over 0..K-1, and the
// odd/even pair swap becomes {0<->1, 2<->3, ...}.
enum class LabelStrategy {
  kRandom,          // uniform over all K classes, y itself included
  kLeastLikely,     // argmax_{y'!=y} CE(f(x), y'): smallest non-true logit
  kMostConfusing,   // argmin_{y'!=y} CE(f(x), y'): largest non-true logit
  kNextCycle,       // (y+1) mod K
  kNearSwap,        // adjacent pairs, K even
  kSimilarSwap,     // pairing from confusion mass, most similar
  kDissimilarSwap,  // pairing from confusion mass, least similar
};

std::string to_string(LabelStrategy s);
LabelStrategy parse_label_strategy(std::string_view name);

/// True for strategies that depend only on y (a class-level map g).
bool is_class_level(LabelStrategy s);

struct LabelMapSpec {
  LabelStrategy strategy = LabelStrategy::kNextCycle;
  std::size_t classes = 10;
  std::uint64_t seed = 0;  // Random only
  /// K x K confusion counts (rows: true, cols: predicted); Similar/DissimilarSwap only.
  std::optional<std::vector<std::vector<double>>> confusion;

  void validate() const;
};

/// y' for one example. `model` is required for LL and MC; `index` selects
/// the Random stream so each example draws independently and reproducibly.
int assign(const LabelMapSpec& spec, const ModelState* model, const Tensor& x, int y,
           std::size_t index = 0);

/// Batched form of assign over x (N,C,H,W).
std::vector<int> assign_all(const LabelMapSpec& spec, const ModelState* model, const Tensor& x,
                            const std::vector<int>& labels);

/// The class-level map g as a vector of length K. Throws for per-example
/// strategies (Random, LL, MC).
std::vector<int> class_map(const LabelMapSpec& spec);

enum class PairingPolarity { kMostSimilar, kMostDissimilar };

/// Perfect matching of the K classes on the symmetrized off-diagonal mass
/// s(a,b) = C[a][b] + C[b][a], maximizing (MostSimilar) or minimizing
/// (MostDissimilar) total weight. Exact (bitmask DP) for K <= 20, greedy
/// beyond; ties go to the lexicographically smallest pairing. Returns the
/// involution g as a length-K vector.
std::vector<int> pair_by_confusion(const std::vector<std::vector<double>>& confusion,
                                   PairingPolarity polarity);

nlohmann::json label_map_spec_to_json(const LabelMapSpec& spec);
LabelMapSpec label_map_spec_from_json(const nlohmann::json& j);

}  // namespace advin
