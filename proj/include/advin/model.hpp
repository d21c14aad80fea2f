#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "advin/autograd.hpp"
#include "advin/tensor.hpp"

namespace advin {

enum class Architecture { kMiniConv, kMiniRes };

std::string to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);

/// MiniConv: three conv(3x3)->ReLU->maxpool(2) blocks, then a dense layer.
/// MiniRes: stem conv, an identity residual block, a strided residual block
/// with a 1x1 projection shortcut, global average pooling, dense layer.
/// No normalization layers in either.
struct ArchitectureSpec {
  Architecture arch = Architecture::kMiniConv;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 10;
  double width_multiplier = 1.0;

  void validate() const;
  Shape input_shape() const { return {channels, height, width}; }
  /// Per-stage conv channel counts after applying the width multiplier.
  std::vector<std::size_t> stage_channels() const;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct ParamSlot {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;  // 0 for biases
};

/// Names, shapes and fan-ins of every parameter, in canonical order.
std::vector<ParamSlot> parameter_layout(const ArchitectureSpec& spec);

/// Parameters of one network plus the spec that fixes their shapes.
/// Immutable once built; training produces new states.
class ModelState {
 public:
  ModelState(ArchitectureSpec spec, std::uint64_t seed, std::vector<Tensor> params);

  const ArchitectureSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<ParamSlot>& layout() const { return layout_; }
  const Tensor& param(std::string_view name) const;
  std::size_t parameter_count() const;

  ModelState with_params(std::vector<Tensor> params) const;

  /// FNV-1a over the serialized parameter records.
  std::uint64_t hash() const;

 private:
  ArchitectureSpec spec_;
  std::uint64_t seed_;
  std::vector<ParamSlot> layout_;
  std::vector<Tensor> params_;
};

/// Weights uniform in +-sqrt(6/fan_in), shifted to zero mean per tensor;
/// biases zero. Deterministic in
/// (spec, seed).
ModelState init_model(const ArchitectureSpec& spec, std::uint64_t seed);

/// Puts every parameter on the tape (as leaves), in layout order.
std::vector<Var> bind_parameters(Tape& tape, const ModelState& model,
                                 bool requires_grad);

/// Logits (N,K) for a batch x (N,C,H,W) given parameters bound on x's tape.
Var forward(const ArchitectureSpec& spec, std::span<const Var> params, Var x);

/// Residual block: relu(conv(relu(conv(x, w1, b1, stride)), w2, b2) + s(x))
/// where s is identity when `shortcut_w` is invalid, else a 1x1 strided conv.
Var residual_block(Var x, Var w1, Var b1, Var w2, Var b2, Var shortcut_w,
                   Var shortcut_b, std::size_t stride);

/// Logits without recording gradients. Accepts (N,C,H,W) or a single (C,H,W).
Tensor logits(const ModelState& model, const Tensor& x);

/// Anything that maps a batch Var to logits on the same tape. Used by the
/// attack and evaluation code so hand-built toy models work too.
using LogitFn = std::function<Var(Var x)>;
LogitFn classifier(const ModelState& model);

// Checkpoint: "ADVC", u32 LE header length, UTF-8 JSON header, then one
// tensor record per parameter in layout order.
void save_checkpoint(const std::filesystem::path& path, const ModelState& model,
                     const nlohmann::json& metadata = nlohmann::json::object());
struct Checkpoint {
  ModelState model;
  nlohmann::json metadata;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json spec_to_json(const ArchitectureSpec& spec);
ArchitectureSpec spec_from_json(const nlohmann::json& j);

}  // namespace advin
