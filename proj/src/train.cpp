#include "advin/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "advin/ops.hpp"
#include "advin/rng.hpp"

namespace advin {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be at least 1");
  if (!(lr >= 0.0)) throw std::invalid_argument("train: negative learning rate");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum in [0,1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: negative weight decay");
  if (schedule.kind == LrSchedule::Kind::kMultiStep &&
      !(schedule.factor > 0.0 && schedule.factor < 1.0)) {
    throw std::invalid_argument("train: schedule factor must lie in (0,1)");
  }
  if (warmup_epochs > 0 && !inner) throw std::invalid_argument("train: warm-up without an inner attack");
}

AttackConfig default_inner_attack(double epsilon) {
  AttackConfig a;
  a.epsilon = epsilon;
  a.step_size = epsilon > 0.0 ? epsilon / 4.0 : 1.0 / 255.0;
  a.steps = 10;
  a.mode = AttackMode::kMaximizeTrueLoss;
  a.random_init = true;
  return a;
}

double learning_rate(const TrainConfig& cfg, std::size_t epoch) {
  switch (cfg.schedule.kind) {
    case LrSchedule::Kind::kConstant:
      return cfg.lr;
    case LrSchedule::Kind::kMultiStep: {
      double lr = cfg.lr;
      for (auto m : cfg.schedule.milestones) {
        if (epoch >= m) lr *= cfg.schedule.factor;
      }
      return lr;
    }
    case LrSchedule::Kind::kCosine:
      return cfg.lr * 0.5 *
             (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                             static_cast<double>(cfg.epochs)));
  }
  return cfg.lr;
}

std::string TrainTrace::to_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,train_loss,train_acc_or_robust,nat_test,rob_test\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',';
    if (e.natural_test) os << *e.natural_test;
    os << ',';
    if (e.robust_test) os << *e.robust_test;
    os << '\n';
  }
  return os.str();
}

DefenseLoss standard_loss() {
  return [](Tape&, std::span<const Var> params, const ModelState& current, const Tensor& x,
            std::span<const int> labels, std::uint64_t, std::size_t) {
    Var input = params.front().tape().constant(x);
    Var out = forward(current.spec(), params, input);
    return BatchObjective{softmax_cross_entropy(out, labels), out};
  };
}

DefenseLoss madry_loss(AttackConfig inner) {
  if (inner.mode != AttackMode::kMaximizeTrueLoss) {
    throw std::invalid_argument("madry_loss: inner attack must maximize the true-label loss");
  }
  return [inner](Tape& tape, std::span<const Var> params, const ModelState& current,
                 const Tensor& x, std::span<const int> labels, std::uint64_t seed,
                 std::size_t first_index) {
    const auto res = pgd_batch(classifier(current), x, labels, inner, nullptr, seed, first_index);
    Tensor adv = x;
    for (std::size_t i = 0; i < adv.numel(); ++i) adv[i] += res.delta[i];
    Var out = forward(current.spec(), params, tape.constant(std::move(adv)));
    return BatchObjective{softmax_cross_entropy(out, labels), out};
  };
}

std::vector<Tensor> SgdMomentum::step(const std::vector<Tensor>& params,
                                      const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd: params/grads mismatch");
  const bool first = velocity_.empty();
  if (first) velocity_.resize(params.size());
  const float mu = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_),
              rate = static_cast<float>(lr);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i];
    const Tensor& g = grads[i];
    if (p.shape() != g.shape()) throw ShapeError("sgd: gradient shape mismatch");
    Tensor& v = velocity_[i];
    if (first) v = Tensor::zeros(p.shape());
    Tensor next = p;
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const float d = g[k] + wd * p[k];
      v[k] = first ? d : mu * v[k] + d;
      next[k] = p[k] - rate * v[k];
    }
    out.push_back(std::move(next));
  }
  return out;
}

Trainer::Trainer(ModelState init, const TrainConfig& cfg, DefenseLoss loss)
    : model_(std::move(init)), opt_(cfg.momentum, cfg.weight_decay), loss_(std::move(loss)) {}

StepStats Trainer::step(const Tensor& x, std::span<const int> labels, double lr,
                        std::uint64_t seed, std::size_t first_index) {
  Tape tape;
  auto params = bind_parameters(tape, model_, true);
  const BatchObjective obj = loss_(tape, params, model_, x, labels, seed, first_index);
  const Gradients grads = tape.backward(obj.loss);
  std::vector<Tensor> g;
  g.reserve(params.size());
  for (const Var& p : params) g.push_back(grads[p]);

  StepStats s;
  s.count = labels.size();
  s.loss = obj.loss.value()[0];
  const auto pred = argmax_rows(obj.logits.value());
  for (std::size_t i = 0; i < labels.size(); ++i) s.correct += pred[i] == labels[i];

  model_ = model_.with_params(opt_.step(model_.params(), g, lr));
  ++steps_;
  return s;
}

TrainResult train_with(const LabeledDataset& data, const ArchitectureSpec& spec,
                       const TrainConfig& cfg, const DefenseLoss& loss,
                       const LabeledDataset* test) {
  return train_with(data, spec, cfg, [&](std::size_t) { return loss; }, test);
}

AttackConfig warmup_attack(const TrainConfig& cfg, std::size_t epoch) {
  if (!cfg.inner) throw std::invalid_argument("warmup_attack: no inner attack configured");
  AttackConfig a = *cfg.inner;
  if (epoch < cfg.warmup_epochs) {
    const double f = static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
    a.epsilon *= f;
    if (f > 0.0) a.step_size *= f;
  }
  return a;
}

TrainResult train_with(const LabeledDataset& data, const ArchitectureSpec& spec,
                       const TrainConfig& cfg,
                       const std::function<DefenseLoss(std::size_t)>& loss_for_epoch,
                       const LabeledDataset* test) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.classes() != spec.classes) {
    throw std::invalid_argument("train: dataset has " + std::to_string(data.classes()) +
                                " classes, architecture " + std::to_string(spec.classes));
  }
  Trainer trainer(init_model(spec, cfg.seed), cfg, loss_for_epoch(0));
  TrainTrace trace;
  std::vector<std::size_t> order(data.size());
  std::optional<LabeledDataset> trace_test;
  if (test && cfg.trace_limit > 0 && cfg.trace_limit < test->size()) {
    std::vector<std::size_t> idx(cfg.trace_limit);
    std::iota(idx.begin(), idx.end(), 0);
    auto [x, y] = test->batch(idx);
    trace_test.emplace(std::move(x), std::move(y), test->classes(), Split::kTest);
  }
  const LabeledDataset* scored = trace_test ? &*trace_test : test;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, "shuffle", epoch));
    rng.shuffle(std::span<std::size_t>(order));
    if (epoch > 0) trainer.set_loss(loss_for_epoch(epoch));
    const double lr = learning_rate(cfg, epoch);
    const std::uint64_t attack_seed = derive_seed(cfg.seed, "train-attack", epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto [x, y] = data.batch(idx);
      const StepStats s = trainer.step(x, y, lr, attack_seed, start);
      loss_sum += s.loss * static_cast<double>(s.count);
      correct += s.correct;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(data.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    if (scored) {
      AttackConfig a = cfg.trace_attack;
      if (!cfg.trace_robust) a.steps = 0;
      const auto report =
          evaluate(trainer.model(), *scored, a, derive_seed(cfg.seed, "trace-eval", epoch));
      rec.natural_test = report.natural_accuracy;
      if (cfg.trace_robust) rec.robust_test = report.robust_accuracy;
    }
    trace.epochs.push_back(rec);
  }
  trace.metadata["config"] = train_config_to_json(cfg);
  trace.metadata["dataset_hash"] = hex64(data.hash());
  trace.metadata["spec"] = spec_to_json(spec);
  return {trainer.model(), std::move(trace)};
}

TrainResult train_standard(const LabeledDataset& data, const ArchitectureSpec& spec,
                           const TrainConfig& cfg, const LabeledDataset* test) {
  if (cfg.inner) throw std::invalid_argument("train_standard: config carries an inner attack");
  return train_with(data, spec, cfg, standard_loss(), test);
}

TrainResult train_adversarial(const LabeledDataset& data, const ArchitectureSpec& spec,
                              const TrainConfig& cfg, const LabeledDataset* test) {
  if (!cfg.inner) throw std::invalid_argument("train_adversarial: no inner attack configured");
  if (cfg.warmup_epochs == 0) return train_with(data, spec, cfg, madry_loss(*cfg.inner), test);
  return train_with(
      data, spec, cfg, [&](std::size_t e) { return madry_loss(warmup_attack(cfg, e)); }, test);
}

MixedDataset mix(const LabeledDataset& clean, const LabeledDataset& poisoned, double rate,
                 std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("mix: rate outside [0,1]");
  if (clean.size() != poisoned.size() || clean.labels() != poisoned.labels() ||
      clean.images().shape() != poisoned.images().shape()) {
    throw std::invalid_argument("mix: clean and poisoned datasets are not index-aligned");
  }
  const std::size_t n = clean.size();
  // The epsilon guards against products like 0.29 * 100 = 28.999999999999996.
  const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "mix"));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<long>(count));
  std::sort(chosen.begin(), chosen.end());

  Tensor images = clean.images();
  const std::size_t per = images.numel() / n;
  for (auto i : chosen) {
    std::copy(poisoned.images().raw() + i * per, poisoned.images().raw() + (i + 1) * per,
              images.raw() + i * per);
  }
  return {LabeledDataset(std::move(images), clean.labels(), clean.classes(), clean.split()),
          std::move(chosen)};
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j{{"epochs", cfg.epochs},       {"batch_size", cfg.batch_size},
                   {"lr", cfg.lr},               {"momentum", cfg.momentum},
                   {"weight_decay", cfg.weight_decay}, {"seed", cfg.seed},
                   {"warmup_epochs", cfg.warmup_epochs}};
  switch (cfg.schedule.kind) {
    case LrSchedule::Kind::kConstant: j["schedule"] = {{"kind", "constant"}}; break;
    case LrSchedule::Kind::kMultiStep:
      j["schedule"] = {{"kind", "multistep"},
                       {"milestones", cfg.schedule.milestones},
                       {"factor", cfg.schedule.factor}};
      break;
    case LrSchedule::Kind::kCosine: j["schedule"] = {{"kind", "cosine"}}; break;
  }
  j["inner"] = cfg.inner ? attack_to_json(*cfg.inner) : nlohmann::json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    const std::string kind = s.value("kind", "constant");
    if (kind == "constant") {
      c.schedule.kind = LrSchedule::Kind::kConstant;
    } else if (kind == "multistep") {
      c.schedule.kind = LrSchedule::Kind::kMultiStep;
      c.schedule.milestones = s.value("milestones", std::vector<std::size_t>{});
      c.schedule.factor = s.value("factor", c.schedule.factor);
    } else if (kind == "cosine") {
      c.schedule.kind = LrSchedule::Kind::kCosine;
    } else {
      throw std::invalid_argument("unknown lr schedule '" + kind + "'");
    }
  }
  if (j.contains("inner")) {
    if (j.at("inner").is_null()) {
      c.inner.reset();
    } else {
      c.inner = attack_from_json(j.at("inner"));
    }
  }
  return c;
}

}  // namespace advin
