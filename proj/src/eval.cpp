#include "advin/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "advin/ops.hpp"

namespace advin {

AttackConfig default_eval_attack() {
  AttackConfig a;
  a.epsilon = 8.0 / 255.0;
  a.step_size = 2.0 / 255.0;
  a.steps = 20;
  a.mode = AttackMode::kMaximizeTrueLoss;
  a.random_init = true;
  return a;
}

namespace {

std::vector<int> predict(const LogitFn& model, const Tensor& x) {
  Tape tape;
  return argmax_rows(model(tape.constant(x)).value());
}

}  // namespace

std::vector<int> bias_targets(const std::vector<std::vector<std::size_t>>& confusion) {
  const std::size_t k = confusion.size();
  std::vector<int> out(k);
  for (std::size_t row = 0; row < k; ++row) {
    if (confusion[row].size() != k) throw ShapeError("bias_targets: confusion matrix is not square");
    std::size_t best = row == 0 ? 1 : 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (c != row && confusion[row][c] > confusion[row][best]) best = c;
    }
    out[row] = static_cast<int>(best);
  }
  return out;
}

EvalReport evaluate(const LogitFn& model, const LabeledDataset& test, const AttackConfig& attack,
                    std::uint64_t seed, std::size_t batch_size) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  if (attack.mode != AttackMode::kMaximizeTrueLoss) {
    throw std::invalid_argument("evaluate: attack must maximize the true-label loss");
  }
  const std::size_t k = test.classes();
  EvalReport r;
  r.examples = test.size();
  r.attack = attack;
  r.seed = seed;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t natural = 0, robust = 0;
  const bool attacking = attack.steps > 0 && attack.epsilon > 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += batch_size) {
    const std::size_t end = std::min(test.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto [x, y] = test.batch(idx);
    const auto clean = predict(model, x);
    std::vector<int> adv = clean;
    if (attacking) {
      const auto res = pgd_batch(model, x, y, attack, nullptr, seed, start);
      Tensor xa = x;
      for (std::size_t i = 0; i < xa.numel(); ++i) xa[i] += res.delta[i];
      adv = predict(model, xa);
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
      const bool ok = clean[i] == y[i];
      natural += ok;
      // A wrong clean prediction is already a successful attack.
      const int seen = ok ? adv[i] : clean[i];
      robust += seen == y[i];
      ++r.confusion[static_cast<std::size_t>(y[i])][static_cast<std::size_t>(seen)];
    }
  }
  r.natural_accuracy = static_cast<double>(natural) / static_cast<double>(test.size());
  r.robust_accuracy = static_cast<double>(robust) / static_cast<double>(test.size());
  r.bias_target = bias_targets(r.confusion);
  return r;
}

EvalReport evaluate(const ModelState& model, const LabeledDataset& test,
                    const AttackConfig& attack, std::uint64_t seed, std::size_t batch_size) {
  if (model.spec().classes != test.classes()) {
    throw std::invalid_argument("evaluate: model has " + std::to_string(model.spec().classes) +
                                " classes, test set " + std::to_string(test.classes()));
  }
  return evaluate(classifier(model), test, attack, seed, batch_size);
}

double natural_accuracy(const ModelState& model, const LabeledDataset& data,
                        std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("natural_accuracy: empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto [x, y] = data.batch(idx);
    const auto pred = argmax_rows(logits(model, x));
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double bias_diagnostic(const EvalReport& report, const std::vector<int>& g) {
  const std::size_t k = report.bias_target.size();
  if (k == 0 || g.size() != k) {
    throw std::invalid_argument("bias_diagnostic: label map length " + std::to_string(g.size()) +
                                " vs " + std::to_string(k) + " classes");
  }
  std::size_t hits = 0;
  for (std::size_t y = 0; y < k; ++y) hits += report.bias_target[y] == g[y];
  return static_cast<double>(hits) / static_cast<double>(k);
}

nlohmann::json attack_to_json(const AttackConfig& cfg) {
  nlohmann::json j{{"epsilon", cfg.epsilon},
                   {"step_size", cfg.step_size},
                   {"steps", cfg.steps},
                   {"mode", to_string(cfg.mode)},
                   {"random_init", cfg.random_init}};
  if (cfg.mask) {
    std::size_t ones = 0;
    for (float v : cfg.mask->data()) ones += v != 0.0f;
    j["mask_support"] = ones;
  }
  return j;
}

AttackConfig attack_from_json(const nlohmann::json& j) {
  AttackConfig a;
  a.epsilon = j.at("epsilon").get<double>();
  a.step_size = j.at("step_size").get<double>();
  a.steps = j.at("steps").get<std::size_t>();
  a.mode = parse_attack_mode(j.value("mode", std::string("maximize-true")));
  a.random_init = j.value("random_init", false);
  return a;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j{{"examples", r.examples},
                   {"natural_accuracy", r.natural_accuracy},
                   {"robust_accuracy", r.robust_accuracy},
                   {"attack", attack_to_json(r.attack)},
                   {"seed", r.seed},
                   {"confusion", r.confusion},
                   {"bias_target", r.bias_target}};
  if (r.psr) j["psr"] = *r.psr;
  return j;
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  const std::size_t k = r.confusion.size();
  os << "class,count,robust_correct,bias_target";
  for (std::size_t c = 0; c < k; ++c) os << ",pred_" << c;
  os << '\n';
  for (std::size_t y = 0; y < k; ++y) {
    const auto& row = r.confusion[y];
    os << y << ',' << std::accumulate(row.begin(), row.end(), std::size_t{0}) << ',' << row[y]
       << ',' << r.bias_target[y];
    for (auto v : row) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

std::string confusion_svg(const EvalReport& r) {
  const std::size_t k = r.confusion.size();
  const int cell = 36, margin = 40;
  const int size = margin + static_cast<int>(k) * cell + 10;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
     << "\" font-family=\"monospace\" font-size=\"10\">\n";
  for (std::size_t y = 0; y < k; ++y) {
    const auto& row = r.confusion[y];
    const double total = static_cast<double>(std::accumulate(row.begin(), row.end(), std::size_t{0}));
    os << "<text x=\"4\" y=\"" << margin + static_cast<int>(y) * cell + cell / 2 + 4 << "\">" << y
       << "</text>\n";
    os << "<text x=\"" << margin + static_cast<int>(y) * cell + cell / 2 - 3 << "\" y=\"30\">" << y
       << "</text>\n";
    for (std::size_t c = 0; c < k; ++c) {
      const double frac = total > 0 ? static_cast<double>(row[c]) / total : 0.0;
      const int shade = 255 - static_cast<int>(std::lround(frac * 255.0));
      const int px = margin + static_cast<int>(c) * cell, py = margin + static_cast<int>(y) * cell;
      os << "<rect x=\"" << px << "\" y=\"" << py << "\" width=\"" << cell << "\" height=\""
         << cell << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"#ccc\"/>\n";
      os << "<text x=\"" << px + 3 << "\" y=\"" << py + cell / 2 + 4 << "\" fill=\""
         << (frac > 0.5 ? "white" : "black") << "\">" << row[c] << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace advin
