#include "advin/attack.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

#include "advin/ops.hpp"
#include "advin/rng.hpp"

namespace advin {

std::string to_string(AttackMode mode) {
  switch (mode) {
    case AttackMode::kMaximizeTrueLoss: return "maximize-true";
    case AttackMode::kMinimizeTrueLoss: return "minimize-true";
    case AttackMode::kMinimizeTargetLoss: return "minimize-target";
  }
  return "?";
}

AttackMode parse_attack_mode(std::string_view name) {
  if (name == "maximize-true") return AttackMode::kMaximizeTrueLoss;
  if (name == "minimize-true") return AttackMode::kMinimizeTrueLoss;
  if (name == "minimize-target") return AttackMode::kMinimizeTargetLoss;
  throw std::invalid_argument("unknown attack mode '" + std::string(name) + "'");
}

void AttackConfig::validate(const Shape& image_shape) const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
    throw std::invalid_argument("attack: epsilon " + std::to_string(epsilon) +
                                " outside [0,1]");
  }
  if (!(step_size > 0.0)) throw std::invalid_argument("attack: step size must be positive");
  if (mask) {
    if (mask->shape() != image_shape) {
      throw ShapeError("attack: mask shape " + to_string(mask->shape()) +
                       " differs from image shape " + to_string(image_shape));
    }
    for (float v : mask->data()) {
      if (v != 0.0f && v != 1.0f) throw std::invalid_argument("attack: mask is not binary");
    }
  }
}

namespace {

// Image shape for a single (C,H,W) or batched (N,C,H,W) tensor.
Shape image_shape_of(const Tensor& x) {
  if (x.rank() == 3) return x.shape();
  if (x.rank() == 4) return Shape(x.shape().begin() + 1, x.shape().end());
  throw ShapeError("attack: expected (C,H,W) or (N,C,H,W), got " + to_string(x.shape()));
}

float clamp_one(float d, float x, float eps) {
  d = std::clamp(d, -eps, eps);
  // The box test is on the float sum itself, so a delta that is already
  // valid passes through bit-for-bit.
  if (x + d > 1.0f) {
    d = 1.0f - x;
    while (x + d > 1.0f) d = std::nextafter(d, -1.0f);
  } else if (x + d < 0.0f) {
    d = -x;
  }
  return d;
}

std::atomic<bool> g_audit_on{false};
std::atomic<std::size_t> g_checked{0}, g_radius{0}, g_box{0}, g_mask{0};

}  // namespace

Tensor project(const Tensor& delta, const Tensor& x, const AttackConfig& cfg) {
  if (delta.shape() != x.shape()) {
    throw ShapeError("project: delta " + to_string(delta.shape()) + " vs image " +
                     to_string(x.shape()));
  }
  const Shape img = image_shape_of(x);
  const std::size_t per = shape_numel(img);
  const float eps = static_cast<float>(cfg.epsilon);
  const float* mask = nullptr;
  if (cfg.mask) {
    if (cfg.mask->shape() != img) {
      throw ShapeError("project: mask " + to_string(cfg.mask->shape()) + " vs image " +
                       to_string(img));
    }
    mask = cfg.mask->raw();
  }
  Tensor out(delta.shape());
  for (std::size_t i = 0; i < delta.numel(); ++i) {
    if (mask && mask[i % per] == 0.0f) continue;
    out[i] = clamp_one(delta[i], x[i], eps);
  }
  return out;
}

Tensor make_patch_mask(const Shape& image_shape, std::size_t patch) {
  if (image_shape.size() != 3) {
    throw ShapeError("make_patch_mask: expected (C,H,W), got " + to_string(image_shape));
  }
  const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
  if (patch == 0 || patch > h || patch > w) {
    throw std::invalid_argument("make_patch_mask: patch " + std::to_string(patch) +
                                " does not fit image " + to_string(image_shape));
  }
  // Centered placement: top-left corner at (side/2 - patch/2).
  const std::size_t top = h / 2 - patch / 2, left = w / 2 - patch / 2;
  Tensor mask(image_shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = top; y < top + patch; ++y) {
      for (std::size_t xx = left; xx < left + patch; ++xx) mask[(ch * h + y) * w + xx] = 1.0f;
    }
  }
  return mask;
}

PgdResult pgd_batch(const LogitFn& model, const Tensor& x, std::span<const int> labels,
                    const AttackConfig& cfg, const Tensor* init, std::uint64_t seed,
                    std::size_t first_index) {
  if (x.rank() != 4) throw ShapeError("pgd: expected batch (N,C,H,W), got " + to_string(x.shape()));
  const Shape img = image_shape_of(x);
  cfg.validate(img);
  const std::size_t n = x.dim(0), per = shape_numel(img);
  if (labels.size() != n) {
    throw ShapeError("pgd: " + std::to_string(labels.size()) + " labels for batch " +
                     to_string(x.shape()));
  }
  for (float v : x.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("pgd: image outside [0,1]");
  }

  Tensor delta(x.shape());
  if (init) {
    if (init->shape() != x.shape()) {
      throw ShapeError("pgd: init " + to_string(init->shape()) + " vs batch " +
                       to_string(x.shape()));
    }
    delta = project(*init, x, cfg);
  } else if (cfg.random_init) {
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(seed, "pgd-init", first_index + i));
      for (std::size_t k = 0; k < per; ++k) {
        delta[i * per + k] = static_cast<float>(rng.uniform(-cfg.epsilon, cfg.epsilon));
      }
    }
    delta = project(delta, x, cfg);
  }

  const bool maximize = cfg.mode == AttackMode::kMaximizeTrueLoss;
  const float step = static_cast<float>(cfg.step_size);
  PgdResult result;
  result.delta = delta;
  result.best_loss.assign(n, 0.0f);

  for (std::size_t t = 0; t <= cfg.steps; ++t) {
    Tape tape;
    Tensor adv = x;
    for (std::size_t k = 0; k < adv.numel(); ++k) adv[k] += delta[k];
    Var input = tape.leaf(std::move(adv), true);
    Var out = model(input);
    const auto losses = cross_entropy_rows(out.value(), labels);
    if (t == 0) result.initial_loss = losses;
    for (std::size_t i = 0; i < n; ++i) {
      const bool better = t == 0 || (maximize ? losses[i] > result.best_loss[i]
                                              : losses[i] < result.best_loss[i]);
      if (!better) continue;
      result.best_loss[i] = losses[i];
      if (t > 0) {
        std::copy(delta.raw() + i * per, delta.raw() + (i + 1) * per,
                  result.delta.raw() + i * per);
      }
    }
    if (t == cfg.steps) break;

    Var loss = softmax_cross_entropy(out, labels, Reduction::kSum);
    const Gradients grads = tape.backward(loss);
    const Tensor& g = grads[input];
    const float dir = maximize ? step : -step;
    for (std::size_t k = 0; k < delta.numel(); ++k) {
      const float s = g[k] > 0.0f ? 1.0f : (g[k] < 0.0f ? -1.0f : 0.0f);
      delta[k] += dir * s;
    }
    delta = project(delta, x, cfg);
  }

  if (g_audit_on.load(std::memory_order_relaxed)) {
    const auto a = audit_perturbation(result.delta, x, cfg.epsilon,
                                      cfg.mask ? &*cfg.mask : nullptr);
    g_checked += a.checked;
    g_radius += a.radius_violations;
    g_box += a.box_violations;
    g_mask += a.mask_violations;
  }
  return result;
}

PgdResult pgd(const LogitFn& model, const Tensor& x, int label, const AttackConfig& cfg,
              const Tensor* init, std::uint64_t seed) {
  if (x.rank() != 3) throw ShapeError("pgd: expected image (C,H,W), got " + to_string(x.shape()));
  Shape batched{1};
  batched.insert(batched.end(), x.shape().begin(), x.shape().end());
  Tensor init_batched;
  if (init) init_batched = init->reshaped(batched);
  const int labels[1] = {label};
  PgdResult r = pgd_batch(model, x.reshaped(batched), labels, cfg,
                          init ? &init_batched : nullptr, seed, 0);
  r.delta = r.delta.reshaped(x.shape());
  return r;
}

PgdResult pgd(const ModelState& model, const Tensor& x, int label, const AttackConfig& cfg,
              const Tensor* init, std::uint64_t seed) {
  return pgd(classifier(model), x, label, cfg, init, seed);
}

ProjectionAudit audit_perturbation(const Tensor& delta, const Tensor& x, double epsilon,
                                   const Tensor* mask) {
  if (delta.shape() != x.shape()) {
    throw ShapeError("audit: delta " + to_string(delta.shape()) + " vs image " +
                     to_string(x.shape()));
  }
  ProjectionAudit a;
  const float eps = static_cast<float>(epsilon);
  const std::size_t per = mask ? mask->numel() : 1;
  for (std::size_t i = 0; i < delta.numel(); ++i) {
    ++a.checked;
    const float d = delta[i];
    if (!(std::fabs(d) <= eps)) ++a.radius_violations;
    const float v = x[i] + d;
    if (!(v >= 0.0f && v <= 1.0f)) ++a.box_violations;
    if (mask && (*mask)[i % per] == 0.0f && d != 0.0f) ++a.mask_violations;
  }
  return a;
}

void enable_global_audit(bool on) { g_audit_on = on; }

ProjectionAudit global_audit() {
  ProjectionAudit a;
  a.checked = g_checked;
  a.radius_violations = g_radius;
  a.box_violations = g_box;
  a.mask_violations = g_mask;
  return a;
}

}  // namespace advin
