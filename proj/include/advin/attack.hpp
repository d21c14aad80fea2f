#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advin/model.hpp"
#include "advin/tensor.hpp"

namespace advin {

enum class AttackMode {
  kMaximizeTrueLoss,    // untargeted attack / AT inner max
  kMinimizeTrueLoss,    // error-minimizing noise
  kMinimizeTargetLoss,  // targeted poison toward an inducing label
};

std::string to_string(AttackMode mode);
AttackMode parse_attack_mode(std::string_view name);

/// L-infinity PGD settings. Radii are in pixel units on the [0,1] scale.
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  std::size_t steps = 10;
  AttackMode mode = AttackMode::kMaximizeTrueLoss;
  bool random_init = false;
  /// {0,1}-valued, shaped like a single image. Absent means full support.
  std::optional<Tensor> mask;

  /// Throws std::invalid_argument on bad radii, steps, or mask.
  void validate(const Shape& image_shape) const;
};

/// Projects `delta` onto the eps-ball, the pixel box (x + delta in [0,1]) and
/// the mask support. `x` and `delta` are a single image (C,H,W) or a batch
/// (N,C,H,W); the mask applies to every image. Idempotent, and exact in
/// float32: the result satisfies every constraint with no rounding slack.
Tensor project(const Tensor& delta, const Tensor& x, const AttackConfig& cfg);

/// Binary mask with a centered patch x patch block of ones in every channel.
Tensor make_patch_mask(const Shape& image_shape, std::size_t patch);

struct PgdResult {
  Tensor delta;                     // same shape as x
  std::vector<float> initial_loss;  // objective at the starting delta
  std::vector<float> best_loss;     // objective at the returned delta
};

/// Batched PGD over x (N,C,H,W). Examples are independent: each has its own
/// random-init stream derived from (seed, first_index + i), and the best
/// iterate per example is returned (max CE for kMaximizeTrueLoss, min CE
/// otherwise). `labels` are true labels, or targets for kMinimizeTargetLoss.
PgdResult pgd_batch(const LogitFn& model, const Tensor& x, std::span<const int> labels,
                    const AttackConfig& cfg, const Tensor* init = nullptr,
                    std::uint64_t seed = 0, std::size_t first_index = 0);

/// Single image (C,H,W).
PgdResult pgd(const LogitFn& model, const Tensor& x, int label, const AttackConfig& cfg,
              const Tensor* init = nullptr, std::uint64_t seed = 0);
PgdResult pgd(const ModelState& model, const Tensor& x, int label, const AttackConfig& cfg,
              const Tensor* init = nullptr, std::uint64_t seed = 0);

/// Counts of constraint violations, for auditing produced perturbations.
struct ProjectionAudit {
  std::size_t checked = 0;
  std::size_t radius_violations = 0;
  std::size_t box_violations = 0;
  std::size_t mask_violations = 0;
  std::size_t total() const { return radius_violations + box_violations + mask_violations; }
};
ProjectionAudit audit_perturbation(const Tensor& delta, const Tensor& x, double epsilon,
                                   const Tensor* mask = nullptr);

/// Process-wide tally of audits over every delta returned by pgd_batch while
/// enabled. Off by default; test binaries switch it on.
void enable_global_audit(bool on);
ProjectionAudit global_audit();

}  // namespace advin
