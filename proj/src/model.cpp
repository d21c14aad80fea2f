#include "advin/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <fstream>
#include <stdexcept>

#include "advin/ops.hpp"
#include "advin/rng.hpp"

namespace advin {

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::kMiniConv: return "MiniConv";
    case Architecture::kMiniRes: return "MiniRes";
  }
  return "?";
}

Architecture parse_architecture(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "miniconv") return Architecture::kMiniConv;
  if (lower == "minires") return Architecture::kMiniRes;
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

void ArchitectureSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("architecture: need at least 2 classes");
  if (channels == 0) throw std::invalid_argument("architecture: zero input channels");
  if (!(width_multiplier > 0.0) || !std::isfinite(width_multiplier)) {
    throw std::invalid_argument("architecture: width multiplier must be positive");
  }
  const std::size_t min_side = arch == Architecture::kMiniConv ? 8 : 2;
  if (height < min_side || width < min_side) {
    throw std::invalid_argument(to_string(arch) + ": input " +
                                to_string(input_shape()) + " smaller than " +
                                std::to_string(min_side) + "x" + std::to_string(min_side));
  }
}

std::vector<std::size_t> ArchitectureSpec::stage_channels() const {
  auto scaled = [this](double base) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base * width_multiplier)));
  };
  if (arch == Architecture::kMiniConv) return {scaled(8), scaled(16), scaled(32)};
  return {scaled(8), scaled(16)};
}

std::vector<ParamSlot> parameter_layout(const ArchitectureSpec& spec) {
  spec.validate();
  const auto ch = spec.stage_channels();
  std::vector<ParamSlot> out;
  auto conv = [&](const std::string& name, std::size_t in, std::size_t o, std::size_t k) {
    out.push_back({name + ".weight", {o, in, k, k}, in * k * k});
    out.push_back({name + ".bias", {o}, 0});
  };
  auto dense = [&](const std::string& name, std::size_t in, std::size_t o) {
    out.push_back({name + ".weight", {o, in}, in});
    out.push_back({name + ".bias", {o}, 0});
  };
  if (spec.arch == Architecture::kMiniConv) {
    conv("conv1", spec.channels, ch[0], 3);
    conv("conv2", ch[0], ch[1], 3);
    conv("conv3", ch[1], ch[2], 3);
    const std::size_t h = spec.height / 8, w = spec.width / 8;
    dense("fc", ch[2] * h * w, spec.classes);
  } else {
    conv("stem", spec.channels, ch[0], 3);
    conv("block1.conv1", ch[0], ch[0], 3);
    conv("block1.conv2", ch[0], ch[0], 3);
    conv("block2.conv1", ch[0], ch[1], 3);
    conv("block2.conv2", ch[1], ch[1], 3);
    conv("block2.shortcut", ch[0], ch[1], 1);
    dense("fc", ch[1], spec.classes);
  }
  return out;
}

ModelState::ModelState(ArchitectureSpec spec, std::uint64_t seed, std::vector<Tensor> params)
    : spec_(spec), seed_(seed), layout_(parameter_layout(spec)), params_(std::move(params)) {
  if (params_.size() != layout_.size()) {
    throw std::invalid_argument("ModelState: " + to_string(spec_.arch) + " expects " +
                                std::to_string(layout_.size()) + " parameters, got " +
                                std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].shape() != layout_[i].shape) {
      throw ShapeError("ModelState: parameter " + layout_[i].name + " has shape " +
                       to_string(params_[i].shape()) + ", expected " +
                       to_string(layout_[i].shape));
    }
  }
}

const Tensor& ModelState::param(std::string_view name) const {
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].name == name) return params_[i];
  }
  throw std::out_of_range("ModelState: no parameter named '" + std::string(name) + "'");
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

ModelState ModelState::with_params(std::vector<Tensor> params) const {
  return ModelState(spec_, seed_, std::move(params));
}

std::uint64_t ModelState::hash() const {
  std::vector<std::uint8_t> bytes;
  for (const auto& p : params_) append_tensor_record(bytes, p);
  return fnv1a64(bytes);
}

ModelState init_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  const auto layout = parameter_layout(spec);
  std::vector<Tensor> params;
  params.reserve(layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    Tensor t(layout[i].shape);
    if (layout[i].fan_in > 0) {
      Rng rng(derive_seed(seed, "init", i));
      const double bound = std::sqrt(6.0 / static_cast<double>(layout[i].fan_in));
      std::vector<double> draw(t.numel());
      for (auto& v : draw) v = rng.uniform(-bound, bound);
      // Re-centred so small layers start with an exactly zero-mean weight.
      const double mean = std::accumulate(draw.begin(), draw.end(), 0.0) / static_cast<double>(draw.size());
      for (std::size_t k = 0; k < draw.size(); ++k) t[k] = static_cast<float>(draw[k] - mean);
    }
    params.push_back(std::move(t));
  }
  return ModelState(spec, seed, std::move(params));
}

std::vector<Var> bind_parameters(Tape& tape, const ModelState& model, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(model.params().size());
  for (const auto& p : model.params()) vars.push_back(tape.leaf(p, requires_grad));
  return vars;
}

Var residual_block(Var x, Var w1, Var b1, Var w2, Var b2, Var shortcut_w,
                   Var shortcut_b, std::size_t stride) {
  Var h = relu(conv2d(x, w1, b1, {stride, 1}));
  h = conv2d(h, w2, b2, {1, 1});
  Var skip = shortcut_w.valid() ? conv2d(x, shortcut_w, shortcut_b, {stride, 0}) : x;
  return relu(add(h, skip));
}

Var forward(const ArchitectureSpec& spec, std::span<const Var> p, Var x) {
  const Shape& xs = x.shape();
  const Shape want = spec.input_shape();
  if (xs.size() != 4 || !std::equal(want.begin(), want.end(), xs.begin() + 1)) {
    throw ShapeError(to_string(spec.arch) + ": input " + to_string(xs) +
                     " does not match (N," + to_string(want).substr(1));
  }
  const std::size_t expected = spec.arch == Architecture::kMiniConv ? 8 : 14;
  if (p.size() != expected) {
    throw std::invalid_argument(to_string(spec.arch) + ": expected " +
                                std::to_string(expected) + " parameter vars");
  }
  if (spec.arch == Architecture::kMiniConv) {
    Var h = x;
    for (std::size_t s = 0; s < 3; ++s) {
      h = max_pool2d(relu(conv2d(h, p[2 * s], p[2 * s + 1], {1, 1})), 2, 2);
    }
    return linear(flatten(h), p[6], p[7]);
  }
  Var h = relu(conv2d(x, p[0], p[1], {1, 1}));
  h = residual_block(h, p[2], p[3], p[4], p[5], Var{}, Var{}, 1);
  h = residual_block(h, p[6], p[7], p[8], p[9], p[10], p[11], 2);
  return linear(global_avg_pool(h), p[12], p[13]);
}

Tensor logits(const ModelState& model, const Tensor& x) {
  Tape tape;
  Tensor batch = x;
  if (x.rank() == 3) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    batch = x.reshaped(std::move(s));
  }
  auto params = bind_parameters(tape, model, false);
  return forward(model.spec(), params, tape.constant(std::move(batch))).value();
}

LogitFn classifier(const ModelState& model) {
  return [&model](Var x) {
    auto params = bind_parameters(x.tape(), model, false);
    return forward(model.spec(), params, x);
  };
}

nlohmann::json spec_to_json(const ArchitectureSpec& spec) {
  return {{"arch", to_string(spec.arch)},
          {"input", {spec.channels, spec.height, spec.width}},
          {"classes", spec.classes},
          {"width", spec.width_multiplier}};
}

ArchitectureSpec spec_from_json(const nlohmann::json& j) {
  ArchitectureSpec s;
  s.arch = parse_architecture(j.at("arch").get<std::string>());
  const auto in = j.at("input").get<std::vector<std::size_t>>();
  if (in.size() != 3) throw FormatError("architecture input must have 3 dims");
  s.channels = in[0];
  s.height = in[1];
  s.width = in[2];
  s.classes = j.at("classes").get<std::size_t>();
  s.width_multiplier = j.value("width", 1.0);
  s.validate();
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& model,
                     const nlohmann::json& metadata) {
  nlohmann::json header;
  header["format"] = "advin-checkpoint";
  header["spec"] = spec_to_json(model.spec());
  header["seed"] = model.seed();
  header["params"] = nlohmann::json::array();
  for (const auto& slot : model.layout()) {
    header["params"].push_back({{"name", slot.name}, {"shape", slot.shape}});
  }
  header["metadata"] = metadata;
  const std::string text = header.dump();

  std::vector<std::uint8_t> bytes{'A', 'D', 'V', 'C'};
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(len >> (8 * b)));
  bytes.insert(bytes.end(), text.begin(), text.end());
  for (const auto& p : model.params()) append_tensor_record(bytes, p);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || bytes[0] != 'A' || bytes[1] != 'D' || bytes[2] != 'V' ||
      bytes[3] != 'C') {
    throw FormatError(path.string() + ": not an advin checkpoint");
  }
  std::uint32_t len = 0;
  for (int b = 0; b < 4; ++b) len |= std::uint32_t{bytes[4 + static_cast<std::size_t>(b)]} << (8 * b);
  if (8 + std::size_t{len} > bytes.size()) throw FormatError(path.string() + ": truncated header");
  const auto header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  const ArchitectureSpec spec = spec_from_json(header.at("spec"));
  std::size_t offset = 8 + len;
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < header.at("params").size(); ++i) {
    params.push_back(parse_tensor_record(bytes, offset));
  }
  if (offset != bytes.size()) throw FormatError(path.string() + ": trailing bytes");
  return {ModelState(spec, header.at("seed").get<std::uint64_t>(), std::move(params)),
          header.value("metadata", nlohmann::json::object())};
}

}  // namespace advin
