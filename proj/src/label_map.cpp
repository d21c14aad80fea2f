#include "advin/label_map.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

#include "advin/ops.hpp"
#include "advin/rng.hpp"

namespace advin {

namespace {

constexpr std::size_t kExactPairingLimit = 20;

struct StrategyName {
  LabelStrategy strategy;
  const char* name;
};

constexpr StrategyName kStrategyNames[] = {
    {LabelStrategy::kRandom, "random"},
    {LabelStrategy::kLeastLikely, "ll"},
    {LabelStrategy::kMostConfusing, "mc"},
    {LabelStrategy::kNextCycle, "nextcycle"},
    {LabelStrategy::kNearSwap, "nearswap"},
    {LabelStrategy::kSimilarSwap, "similarswap"},
    {LabelStrategy::kDissimilarSwap, "dissimilarswap"},
};

void check_label(int y, std::size_t k) {
  if (y < 0 || static_cast<std::size_t>(y) >= k) {
    throw std::out_of_range("label " + std::to_string(y) + " outside [0," + std::to_string(k) +
                            ")");
  }
}

std::vector<std::vector<double>> symmetrized(const std::vector<std::vector<double>>& c) {
  const std::size_t k = c.size();
  for (const auto& row : c) {
    if (row.size() != k) throw std::invalid_argument("confusion matrix is not square");
    for (double v : row) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument("confusion matrix entries must be finite and nonnegative");
      }
    }
  }
  std::vector<std::vector<double>> s(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      if (a != b) s[a][b] = c[a][b] + c[b][a];
    }
  }
  return s;
}

// DP over subsets of classes: each subset pairs its lowest class first and
// tries partners in ascending order. Only a strictly better score replaces an
// earlier candidate, which gives the lexicographic tie-break.
std::vector<int> exact_pairing(const std::vector<std::vector<double>>& s, bool maximize) {
  const std::size_t k = s.size();
  const std::size_t full = (std::size_t{1} << k) - 1;
  const double worst = maximize ? -std::numeric_limits<double>::infinity()
                                : std::numeric_limits<double>::infinity();
  std::vector<double> best(full + 1, worst);
  std::vector<int> choice(full + 1, -1);
  best[0] = 0.0;
  // Every sub-mask is numerically smaller, so ascending order is a valid DP order.
  for (std::size_t mask = 1; mask <= full; ++mask) {
    if (std::popcount(mask) % 2 != 0) continue;
    const int lo = std::countr_zero(mask);
    const std::size_t rest = mask & ~(std::size_t{1} << lo);
    for (std::size_t j = static_cast<std::size_t>(lo) + 1; j < k; ++j) {
      if (!(rest >> j & 1)) continue;
      const std::size_t sub = rest & ~(std::size_t{1} << j);
      const double v = best[sub] + s[static_cast<std::size_t>(lo)][j];
      if (maximize ? v > best[mask] : v < best[mask]) {
        best[mask] = v;
        choice[mask] = static_cast<int>(j);
      }
    }
  }
  std::vector<int> g(k, -1);
  std::size_t mask = full;
  while (mask) {
    const int lo = std::countr_zero(mask);
    const int j = choice[mask];
    g[static_cast<std::size_t>(lo)] = j;
    g[static_cast<std::size_t>(j)] = lo;
    mask &= ~(std::size_t{1} << lo);
    mask &= ~(std::size_t{1} << j);
  }
  return g;
}

std::vector<int> greedy_pairing(const std::vector<std::vector<double>>& s, bool maximize) {
  const std::size_t k = s.size();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) pairs.emplace_back(a, b);
  }
  std::stable_sort(pairs.begin(), pairs.end(), [&](const auto& p, const auto& q) {
    const double vp = s[p.first][p.second], vq = s[q.first][q.second];
    return maximize ? vp > vq : vp < vq;
  });
  std::vector<int> g(k, -1);
  for (const auto& [a, b] : pairs) {
    if (g[a] != -1 || g[b] != -1) continue;
    g[a] = static_cast<int>(b);
    g[b] = static_cast<int>(a);
  }
  return g;
}

}  // namespace

std::string to_string(LabelStrategy s) {
  for (const auto& e : kStrategyNames) {
    if (e.strategy == s) return e.name;
  }
  return "?";
}

LabelStrategy parse_label_strategy(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (const auto& e : kStrategyNames) {
    if (lower == e.name) return e.strategy;
  }
  throw std::invalid_argument("unknown label strategy '" + std::string(name) + "'");
}

bool is_class_level(LabelStrategy s) {
  return s != LabelStrategy::kRandom && s != LabelStrategy::kLeastLikely &&
         s != LabelStrategy::kMostConfusing;
}

void LabelMapSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("label map: need at least 2 classes");
  const bool swap = strategy == LabelStrategy::kNearSwap ||
                    strategy == LabelStrategy::kSimilarSwap ||
                    strategy == LabelStrategy::kDissimilarSwap;
  if (swap && classes % 2 != 0) {
    throw std::invalid_argument(to_string(strategy) + " needs an even class count, got " +
                                std::to_string(classes));
  }
  if (strategy == LabelStrategy::kSimilarSwap || strategy == LabelStrategy::kDissimilarSwap) {
    if (!confusion) throw std::invalid_argument(to_string(strategy) + " needs a confusion matrix");
    if (confusion->size() != classes) {
      throw std::invalid_argument("confusion matrix has " + std::to_string(confusion->size()) +
                                  " rows for " + std::to_string(classes) + " classes");
    }
  }
}

std::vector<int> class_map(const LabelMapSpec& spec) {
  spec.validate();
  const std::size_t k = spec.classes;
  std::vector<int> g(k);
  switch (spec.strategy) {
    case LabelStrategy::kNextCycle:
      for (std::size_t y = 0; y < k; ++y) g[y] = static_cast<int>((y + 1) % k);
      return g;
    case LabelStrategy::kNearSwap:
      for (std::size_t y = 0; y < k; ++y) g[y] = static_cast<int>(y % 2 == 0 ? y + 1 : y - 1);
      return g;
    case LabelStrategy::kSimilarSwap:
      return pair_by_confusion(*spec.confusion, PairingPolarity::kMostSimilar);
    case LabelStrategy::kDissimilarSwap:
      return pair_by_confusion(*spec.confusion, PairingPolarity::kMostDissimilar);
    default:
      throw std::invalid_argument(to_string(spec.strategy) + " is not a class-level map");
  }
}

int assign(const LabelMapSpec& spec, const ModelState* model, const Tensor& x, int y,
           std::size_t index) {
  spec.validate();
  check_label(y, spec.classes);
  switch (spec.strategy) {
    case LabelStrategy::kRandom: {
      Rng rng(derive_seed(spec.seed, "label-random", index));
      return static_cast<int>(rng.below(spec.classes));
    }
    case LabelStrategy::kLeastLikely:
    case LabelStrategy::kMostConfusing: {
      if (!model) throw std::invalid_argument(to_string(spec.strategy) + " needs a model");
      const Tensor out = logits(*model, x);
      if (out.dim(1) != spec.classes) {
        throw std::invalid_argument("model class count differs from label map");
      }
      // CE(f(x), c) = logsumexp - logit_c, so ranking by CE is ranking by
      // logit reversed; ties resolve to the smallest class index.
      const bool least = spec.strategy == LabelStrategy::kLeastLikely;
      int best = -1;
      for (std::size_t c = 0; c < spec.classes; ++c) {
        if (static_cast<int>(c) == y) continue;
        if (best < 0 || (least ? out[c] < out[static_cast<std::size_t>(best)]
                               : out[c] > out[static_cast<std::size_t>(best)])) {
          best = static_cast<int>(c);
        }
      }
      return best;
    }
    default:
      return class_map(spec)[static_cast<std::size_t>(y)];
  }
}

std::vector<int> assign_all(const LabelMapSpec& spec, const ModelState* model, const Tensor& x,
                            const std::vector<int>& labels) {
  spec.validate();
  if (x.rank() != 4 || x.dim(0) != labels.size()) {
    throw ShapeError("assign_all: batch " + to_string(x.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  std::vector<int> out(labels.size());
  if (is_class_level(spec.strategy)) {
    const auto g = class_map(spec);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      check_label(labels[i], spec.classes);
      out[i] = g[static_cast<std::size_t>(labels[i])];
    }
    return out;
  }
  if (spec.strategy == LabelStrategy::kRandom) {
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = assign(spec, model, x.row(i), labels[i], i);
    return out;
  }
  if (!model) throw std::invalid_argument(to_string(spec.strategy) + " needs a model");
  const Tensor all = logits(*model, x);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check_label(labels[i], spec.classes);
    const auto row = all.row(i);
    const bool least = spec.strategy == LabelStrategy::kLeastLikely;
    int best = -1;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      if (static_cast<int>(c) == labels[i]) continue;
      if (best < 0 || (least ? row[c] < row[static_cast<std::size_t>(best)]
                             : row[c] > row[static_cast<std::size_t>(best)])) {
        best = static_cast<int>(c);
      }
    }
    out[i] = best;
  }
  return out;
}

std::vector<int> pair_by_confusion(const std::vector<std::vector<double>>& confusion,
                                   PairingPolarity polarity) {
  const std::size_t k = confusion.size();
  if (k < 2 || k % 2 != 0) {
    throw std::invalid_argument("pair_by_confusion: need an even class count, got " +
                                std::to_string(k));
  }
  const auto s = symmetrized(confusion);
  const bool maximize = polarity == PairingPolarity::kMostSimilar;
  return k <= kExactPairingLimit ? exact_pairing(s, maximize) : greedy_pairing(s, maximize);
}

nlohmann::json label_map_spec_to_json(const LabelMapSpec& spec) {
  nlohmann::json j{{"strategy", to_string(spec.strategy)},
                   {"classes", spec.classes},
                   {"seed", spec.seed}};
  if (spec.confusion) j["confusion"] = *spec.confusion;
  return j;
}

LabelMapSpec label_map_spec_from_json(const nlohmann::json& j) {
  LabelMapSpec s;
  s.strategy = parse_label_strategy(j.at("strategy").get<std::string>());
  s.classes = j.at("classes").get<std::size_t>();
  s.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("confusion")) s.confusion = j.at("confusion").get<std::vector<std::vector<double>>>();
  s.validate();
  return s;
}

}  // namespace advin
