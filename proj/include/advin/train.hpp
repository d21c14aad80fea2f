#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "advin/attack.hpp"
#include "advin/dataset.hpp"
#include "advin/eval.hpp"
#include "advin/model.hpp"

namespace advin {

struct LrSchedule {
  enum class Kind { kConstant, kMultiStep, kCosine };
  Kind kind = Kind::kConstant;
  std::vector<std::size_t> milestones;  // MultiStep: epochs at which lr *= factor
  double factor = 0.1;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule schedule;
  /// Inner attack for adversarial training; absent for standard training.
  std::optional<AttackConfig> inner;
  /// Inner radius and step ramp linearly over the first `warmup_epochs`
  /// epochs: epoch e (0-based) uses e/warmup_epochs of the full values, so
  /// the first epoch is standard training.
  std::size_t warmup_epochs = 0;
  std::uint64_t seed = 0;

  /// Per-epoch test metrics in the trace. Robust test accuracy uses
  /// `trace_attack`; `trace_limit` caps how many test examples are scored
  /// (0 = all).
  bool trace_robust = true;
  AttackConfig trace_attack = default_eval_attack();
  std::size_t trace_limit = 0;

  void validate() const;
};

/// Madry-convention inner attack: 10 steps of eps/4 with a random start.
AttackConfig default_inner_attack(double epsilon);

double learning_rate(const TrainConfig& cfg, std::size_t epoch);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  /// Robust training accuracy on the perturbed batches for AT; plain
  /// training accuracy for ST.
  double train_accuracy = 0.0;
  std::optional<double> natural_test;
  std::optional<double> robust_test;
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  nlohmann::json metadata = nlohmann::json::object();

  /// Header `epoch,train_loss,train_acc_or_robust,nat_test,rob_test`, one row
  /// per epoch; missing test metrics are empty fields.
  std::string to_csv() const;
};

/// Objective on one batch: the differentiable loss and the logits that the
/// batch accuracy is measured on.
struct BatchObjective {
  Var loss;
  Var logits;
};

/// Pluggable training objective. Receives the parameters bound on `tape`,
/// the current model (for attacks), and a seed/offset for per-example RNG.
using DefenseLoss = std::function<BatchObjective(
    Tape& tape, std::span<const Var> params, const ModelState& current, const Tensor& x,
    std::span<const int> labels, std::uint64_t seed, std::size_t first_index)>;

/// Mean cross-entropy on the clean batch.
DefenseLoss standard_loss();
/// Mean cross-entropy on PGD-perturbed inputs (min-max objective).
DefenseLoss madry_loss(AttackConfig inner);

/// SGD with momentum and decoupled-from-nothing L2 decay, PyTorch-style:
/// d = g + wd * p; v = mu * v + d; p -= lr * v.
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}
  std::vector<Tensor> step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                           double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

struct StepStats {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

/// Stateful optimizer loop over a model; each step is one minibatch update.
class Trainer {
 public:
  Trainer(ModelState init, const TrainConfig& cfg, DefenseLoss loss);

  StepStats step(const Tensor& x, std::span<const int> labels, double lr, std::uint64_t seed,
                 std::size_t first_index);
  void set_loss(DefenseLoss loss) { loss_ = std::move(loss); }
  const ModelState& model() const { return model_; }
  std::size_t steps_taken() const { return steps_; }

 private:
  ModelState model_;
  SgdMomentum opt_;
  DefenseLoss loss_;
  std::size_t steps_ = 0;
};

struct TrainResult {
  ModelState model;
  TrainTrace trace;
};

/// Minimizes mean CE on `data`. `test`, when given, fills the per-epoch test
/// columns of the trace.
TrainResult train_standard(const LabeledDataset& data, const ArchitectureSpec& spec,
                           const TrainConfig& cfg, const LabeledDataset* test = nullptr);
/// Min-max training with cfg.inner as the inner maximization, ramped over
/// cfg.warmup_epochs.
TrainResult train_adversarial(const LabeledDataset& data, const ArchitectureSpec& spec,
                              const TrainConfig& cfg, const LabeledDataset* test = nullptr);
/// Shared loop behind both; `loss` is the defense-loss seam.
TrainResult train_with(const LabeledDataset& data, const ArchitectureSpec& spec,
                       const TrainConfig& cfg, const DefenseLoss& loss,
                       const LabeledDataset* test = nullptr);
/// Per-epoch variant: `loss_for_epoch(e)` supplies the objective for epoch e.
TrainResult train_with(const LabeledDataset& data, const ArchitectureSpec& spec,
                       const TrainConfig& cfg,
                       const std::function<DefenseLoss(std::size_t)>& loss_for_epoch,
                       const LabeledDataset* test = nullptr);

/// The inner attack for epoch e under cfg.warmup_epochs.
AttackConfig warmup_attack(const TrainConfig& cfg, std::size_t epoch);

struct MixedDataset {
  LabeledDataset data;
  std::vector<std::size_t> poisoned_indices;  // ascending
};

/// floor(rate * N) uniformly chosen rows take their poisoned form; the rest
/// stay clean. Both inputs must be index-aligned (same size and labels).
MixedDataset mix(const LabeledDataset& clean, const LabeledDataset& poisoned, double rate,
                 std::uint64_t seed);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
/// Missing keys keep the values in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

}  // namespace advin
