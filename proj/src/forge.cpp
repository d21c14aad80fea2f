#include "advin/forge.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>

#include "advin/ops.hpp"
#include "advin/png.hpp"
#include "advin/rng.hpp"

namespace advin {

std::string to_string(ForgeMethod m) {
  switch (m) {
    case ForgeMethod::kAdvin: return "advin";
    case ForgeMethod::kStdin: return "stdin";
    case ForgeMethod::kErrorMin: return "error-min";
    case ForgeMethod::kAdvExample: return "adv-example";
  }
  return "?";
}

ForgeMethod parse_forge_method(std::string_view name) {
  for (auto m : {ForgeMethod::kAdvin, ForgeMethod::kStdin, ForgeMethod::kErrorMin,
                 ForgeMethod::kAdvExample}) {
    if (name == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown forge method '" + std::string(name) +
                              "' (expected advin, stdin, error-min or adv-example)");
}

TrainConfig ForgeConfig::default_source_train() {
  TrainConfig t;
  t.batch_size = 64;
  t.lr = 0.1;
  return t;
}

void ForgeConfig::validate() const {
  if (!(epsilon_p >= 0.0 && epsilon_p <= 1.0)) throw std::invalid_argument("forge: epsilon_p outside [0,1]");
  if (!(step_size > 0.0)) throw std::invalid_argument("forge: step size must be positive");
  if (poison_steps < 1) throw std::invalid_argument("forge: poison steps T must be at least 1");
  if (train_steps < 1) throw std::invalid_argument("forge: train steps M must be at least 1");
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("forge: eta outside [0,1]");
  if (max_rounds < 1) throw std::invalid_argument("forge: max rounds must be at least 1");
  if (min_rounds < 1 || min_rounds > max_rounds) {
    throw std::invalid_argument("forge: min rounds must lie in [1, max rounds]");
  }
  if (attack_batch < 1) throw std::invalid_argument("forge: attack batch must be at least 1");
  if (!(source_at_epsilon >= 0.0)) throw std::invalid_argument("forge: negative source AT radius");
  source_spec.validate();
  source_train.validate();
  label_map.validate();
}

Tensor PoisonedDataset::poisoned_images() const {
  Tensor out = clean.images();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += deltas[i];
  return out;
}

LabeledDataset PoisonedDataset::poisoned_view() const {
  return LabeledDataset(poisoned_images(), clean.labels(), clean.classes(), clean.split(),
                        clean.source_indices());
}

LabeledDataset PoisonedDataset::inducing_view() const {
  return LabeledDataset(poisoned_images(), targets, clean.classes(), clean.split(),
                        clean.source_indices());
}

namespace {

constexpr std::size_t kScoreBatch = 500;

std::size_t count_hits(const ModelState& model, const Tensor& images,
                       const std::vector<int>& targets, std::span<const std::size_t> rows) {
  const std::size_t per = images.numel() / images.dim(0);
  Shape shape = images.shape();
  std::size_t hits = 0;
  for (std::size_t start = 0; start < rows.size(); start += kScoreBatch) {
    const std::size_t end = std::min(rows.size(), start + kScoreBatch);
    shape[0] = end - start;
    Tensor x(shape);
    for (std::size_t r = start; r < end; ++r) {
      std::copy_n(images.raw() + rows[r] * per, per, x.raw() + (r - start) * per);
    }
    const auto pred = argmax_rows(logits(model, x));
    for (std::size_t r = start; r < end; ++r) hits += pred[r - start] == targets[rows[r]];
  }
  return hits;
}

}  // namespace

double psr(const ModelState& model, const PoisonedDataset& data, std::size_t sample,
           std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("psr: empty poisoned dataset");
  if (model.spec().classes != data.clean.classes()) {
    throw std::invalid_argument("psr: model has " + std::to_string(model.spec().classes) +
                                " classes, data " + std::to_string(data.clean.classes()));
  }
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  if (sample > 0 && sample < rows.size()) {
    Rng rng(derive_seed(seed, "psr-sample"));
    rng.shuffle(std::span<std::size_t>(rows));
    rows.resize(sample);
    std::sort(rows.begin(), rows.end());
  }
  const std::size_t hits = count_hits(model, data.poisoned_images(), data.targets, rows);
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

namespace {

AttackConfig poison_attack(const ForgeConfig& cfg, AttackMode mode, const Shape& image_shape) {
  AttackConfig a;
  a.epsilon = cfg.epsilon_p;
  a.step_size = cfg.step_size;
  a.steps = cfg.poison_steps;
  a.mode = mode;
  if (cfg.patch > 0) a.mask = make_patch_mask(image_shape, cfg.patch);
  return a;
}

/// PGD over the whole set in chunks; `delta` is the warm start when given.
Tensor refresh(const LogitFn& model, const LabeledDataset& clean, const std::vector<int>& labels,
               const AttackConfig& attack, const Tensor* delta, std::uint64_t seed,
               std::size_t chunk) {
  Tensor out(clean.images().shape());
  const std::size_t per = out.numel() / clean.size();
  for (std::size_t start = 0; start < clean.size(); start += chunk) {
    const std::size_t end = std::min(clean.size(), start + chunk);
    const Tensor x = clean.images().slice_rows(start, end);
    std::optional<Tensor> init;
    if (delta) init = delta->slice_rows(start, end);
    const auto res = pgd_batch(model, x, std::span<const int>(labels).subspan(start, end - start),
                               attack, init ? &*init : nullptr, seed, start);
    std::copy_n(res.delta.raw(), res.delta.numel(), out.raw() + start * per);
  }
  return out;
}

std::vector<int> inducing_labels(const LabeledDataset& clean, const LabelMapSpec& spec,
                                 const ModelState* label_model) {
  if (spec.classes != clean.classes()) {
    throw std::invalid_argument("forge: label map has " + std::to_string(spec.classes) +
                                " classes, dataset " + std::to_string(clean.classes()));
  }
  const bool needs_model =
      spec.strategy == LabelStrategy::kLeastLikely || spec.strategy == LabelStrategy::kMostConfusing;
  if (needs_model && !label_model) {
    throw std::invalid_argument("forge: strategy '" + to_string(spec.strategy) +
                                "' needs a model to assign inducing labels");
  }
  return assign_all(spec, label_model, clean.images(), clean.labels());
}

enum class SourceUpdate { kAdversarial, kStandard };

ForgeResult run_loop(const LabeledDataset& clean, const ForgeConfig& cfg, ForgeMethod method,
                     AttackMode mode, SourceUpdate update, std::vector<int> targets,
                     std::optional<std::vector<int>> class_map) {
  cfg.validate();
  if (clean.size() == 0) throw std::invalid_argument("forge: empty dataset");
  if (cfg.source_spec.classes != clean.classes() ||
      cfg.source_spec.input_shape() != clean.image_shape()) {
    throw std::invalid_argument("forge: source architecture does not match the dataset");
  }
  const std::uint64_t source_seed = derive_seed(cfg.seed, "source");
  ModelState init = init_model(cfg.source_spec, source_seed);

  DefenseLoss loss = standard_loss();
  if (update == SourceUpdate::kAdversarial) {
    AttackConfig inner = default_inner_attack(cfg.source_at_epsilon);
    inner.steps = cfg.source_at_steps;
    loss = madry_loss(inner);
  }
  Trainer trainer(std::move(init), cfg.source_train, loss);

  const AttackConfig attack = poison_attack(cfg, mode, clean.image_shape());
  AttackConfig first = attack;
  first.random_init = true;

  PoisonedDataset out{clean, Tensor(clean.images().shape()), targets, cfg.epsilon_p,
                      cfg.label_map, std::move(class_map), {}, forge_config_to_json(cfg)};
  out.provenance.method = method;
  out.provenance.source_seed = source_seed;

  std::vector<std::size_t> order(clean.size());
  std::size_t cursor = order.size(), epoch = 0, global_step = 0;
  const std::uint64_t poison_seed = derive_seed(cfg.seed, "poison-init");

  for (std::size_t round = 1; round <= cfg.max_rounds; ++round) {
    const LogitFn source = classifier(trainer.model());
    out.deltas = round == 1
                     ? refresh(source, clean, targets, first, nullptr, poison_seed, cfg.attack_batch)
                     : refresh(source, clean, targets, attack, &out.deltas, poison_seed,
                               cfg.attack_batch);
    const Tensor poisoned = out.poisoned_images();
    const std::size_t per = poisoned.numel() / clean.size();
    Shape batch_shape = poisoned.shape();
    for (std::size_t s = 0; s < cfg.train_steps; ++s) {
      if (cursor >= order.size()) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg.seed, "source-shuffle", epoch++));
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      const std::size_t end = std::min(order.size(), cursor + cfg.source_train.batch_size);
      batch_shape[0] = end - cursor;
      Tensor x(batch_shape);
      std::vector<int> y(end - cursor);
      for (std::size_t r = cursor; r < end; ++r) {
        std::copy_n(poisoned.raw() + order[r] * per, per, x.raw() + (r - cursor) * per);
        y[r - cursor] = targets[order[r]];
      }
      trainer.step(x, y, cfg.source_train.lr, derive_seed(cfg.seed, "source-attack", global_step++),
                   0);
      cursor = end;
    }
    out.provenance.rounds = round;
    out.provenance.psr = psr(trainer.model(), out, cfg.psr_sample, cfg.seed);
    if (round >= cfg.min_rounds && out.provenance.psr >= cfg.eta) {
      out.provenance.reached_threshold = true;
      break;
    }
  }
  return {std::move(out), trainer.model()};
}

std::optional<std::vector<int>> maybe_class_map(const LabelMapSpec& spec) {
  if (!is_class_level(spec.strategy)) return std::nullopt;
  return class_map(spec);
}

}  // namespace

ForgeResult advin_generate(const LabeledDataset& clean, const ForgeConfig& cfg,
                           const ModelState* label_model) {
  cfg.validate();
  return run_loop(clean, cfg, ForgeMethod::kAdvin, AttackMode::kMinimizeTargetLoss,
                  SourceUpdate::kAdversarial, inducing_labels(clean, cfg.label_map, label_model),
                  maybe_class_map(cfg.label_map));
}

ForgeResult stdin_generate(const LabeledDataset& clean, const ForgeConfig& cfg,
                           const ModelState* label_model) {
  cfg.validate();
  return run_loop(clean, cfg, ForgeMethod::kStdin, AttackMode::kMinimizeTargetLoss,
                  SourceUpdate::kStandard, inducing_labels(clean, cfg.label_map, label_model),
                  maybe_class_map(cfg.label_map));
}

ForgeResult error_min_generate(const LabeledDataset& clean, const ForgeConfig& cfg) {
  cfg.validate();
  std::vector<int> identity(clean.classes());
  std::iota(identity.begin(), identity.end(), 0);
  return run_loop(clean, cfg, ForgeMethod::kErrorMin, AttackMode::kMinimizeTrueLoss,
                  SourceUpdate::kStandard, clean.labels(), identity);
}

PoisonedDataset adv_example_generate(const LabeledDataset& clean, const ModelState& pretrained,
                                     const ForgeConfig& cfg) {
  cfg.validate();
  if (clean.size() == 0) throw std::invalid_argument("forge: empty dataset");
  if (pretrained.spec().classes != clean.classes() ||
      pretrained.spec().input_shape() != clean.image_shape()) {
    throw std::invalid_argument("forge: pretrained model does not match the dataset");
  }
  auto targets = inducing_labels(clean, cfg.label_map, &pretrained);
  const AttackConfig attack = poison_attack(cfg, AttackMode::kMinimizeTargetLoss, clean.image_shape());
  PoisonedDataset out{clean, Tensor(clean.images().shape()), targets, cfg.epsilon_p,
                      cfg.label_map, maybe_class_map(cfg.label_map), {}, forge_config_to_json(cfg)};
  out.deltas = refresh(classifier(pretrained), clean, out.targets, attack, nullptr,
                       derive_seed(cfg.seed, "poison-init"), cfg.attack_batch);
  out.provenance.method = ForgeMethod::kAdvExample;
  out.provenance.source_seed = pretrained.seed();
  out.provenance.rounds = 1;
  out.provenance.psr = psr(pretrained, out, cfg.psr_sample, cfg.seed);
  out.provenance.reached_threshold = out.provenance.psr >= cfg.eta;
  return out;
}

nlohmann::json forge_config_to_json(const ForgeConfig& cfg) {
  return {{"epsilon_p", cfg.epsilon_p},
          {"poison_steps", cfg.poison_steps},
          {"step_size", cfg.step_size},
          {"train_steps", cfg.train_steps},
          {"eta", cfg.eta},
          {"max_rounds", cfg.max_rounds},
          {"min_rounds", cfg.min_rounds},
          {"label_map", label_map_spec_to_json(cfg.label_map)},
          {"source_spec", spec_to_json(cfg.source_spec)},
          {"source_train", train_config_to_json(cfg.source_train)},
          {"source_at_epsilon", cfg.source_at_epsilon},
          {"source_at_steps", cfg.source_at_steps},
          {"patch", cfg.patch},
          {"psr_sample", cfg.psr_sample},
          {"attack_batch", cfg.attack_batch},
          {"seed", cfg.seed}};
}

ForgeConfig forge_config_from_json(const nlohmann::json& j) {
  ForgeConfig c;
  c.epsilon_p = j.value("epsilon_p", c.epsilon_p);
  c.poison_steps = j.value("poison_steps", c.poison_steps);
  c.step_size = j.value("step_size", c.step_size);
  c.train_steps = j.value("train_steps", c.train_steps);
  c.eta = j.value("eta", c.eta);
  c.max_rounds = j.value("max_rounds", c.max_rounds);
  c.min_rounds = j.value("min_rounds", c.min_rounds);
  if (j.contains("label_map")) c.label_map = label_map_spec_from_json(j.at("label_map"));
  if (j.contains("source_spec")) c.source_spec = spec_from_json(j.at("source_spec"));
  if (j.contains("source_train")) {
    c.source_train = train_config_from_json(j.at("source_train"), c.source_train);
    c.source_train.inner.reset();
  }
  c.source_at_epsilon = j.value("source_at_epsilon", c.source_at_epsilon);
  c.source_at_steps = j.value("source_at_steps", c.source_at_steps);
  c.patch = j.value("patch", c.patch);
  c.psr_sample = j.value("psr_sample", c.psr_sample);
  c.attack_batch = j.value("attack_batch", c.attack_batch);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

nlohmann::json provenance_to_json(const Provenance& p) {
  return {{"method", to_string(p.method)},
          {"source_seed", p.source_seed},
          {"psr", p.psr},
          {"rounds", p.rounds},
          {"reached_threshold", p.reached_threshold}};
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("archive: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

std::uint64_t save_archive(const std::filesystem::path& dir, const PoisonedDataset& data) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta{{"method", to_string(data.provenance.method)},
                      {"config", data.config},
                      {"provenance", provenance_to_json(data.provenance)},
                      {"epsilon_p", data.epsilon_p},
                      {"label_map_spec", label_map_spec_to_json(data.label_map)},
                      {"label_map", data.class_map ? nlohmann::json(*data.class_map) : nlohmann::json(nullptr)},
                      {"dataset_hash", hex64(data.clean.hash())},
                      {"examples", data.size()},
                      {"image_shape", data.clean.image_shape()},
                      {"targets", data.targets}};
  {
    std::ofstream os(dir / "metadata.json", std::ios::binary);
    if (!os) throw std::runtime_error("archive: cannot write " + (dir / "metadata.json").string());
    os << meta.dump(2) << '\n';
  }
  std::vector<std::uint8_t> bytes;
  for (std::size_t i = 0; i < data.size(); ++i) append_tensor_record(bytes, data.deltas.row(i));
  {
    std::ofstream os(dir / "deltas.bin", std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("archive: cannot write " + (dir / "deltas.bin").string());
  }
  return archive_hash(dir);
}

nlohmann::json read_archive_metadata(const std::filesystem::path& dir) {
  const auto bytes = read_bytes(dir / "metadata.json");
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("archive: malformed metadata.json: " + std::string(e.what()));
  }
}

std::uint64_t archive_hash(const std::filesystem::path& dir) {
  const auto meta = read_bytes(dir / "metadata.json");
  const auto deltas = read_bytes(dir / "deltas.bin");
  return fnv1a64(deltas, fnv1a64(meta));
}

PoisonedDataset load_archive(const std::filesystem::path& dir, const LabeledDataset& clean) {
  const auto meta = read_archive_metadata(dir);
  if (meta.at("dataset_hash").get<std::string>() != hex64(clean.hash())) {
    throw FormatError("archive: built for dataset " + meta.at("dataset_hash").get<std::string>() +
                      ", got " + hex64(clean.hash()));
  }
  const auto bytes = read_bytes(dir / "deltas.bin");
  std::vector<Tensor> rows;
  rows.reserve(clean.size());
  std::size_t offset = 0;
  while (offset < bytes.size()) rows.push_back(parse_tensor_record(bytes, offset));
  if (rows.size() != clean.size()) {
    throw FormatError("archive: " + std::to_string(rows.size()) + " deltas for " +
                      std::to_string(clean.size()) + " examples");
  }
  PoisonedDataset out{clean, stack(rows), meta.at("targets").get<std::vector<int>>(),
                      meta.at("epsilon_p").get<double>(),
                      label_map_spec_from_json(meta.at("label_map_spec")), std::nullopt, {},
                      meta.at("config")};
  if (!meta.at("label_map").is_null()) out.class_map = meta.at("label_map").get<std::vector<int>>();
  const auto& p = meta.at("provenance");
  out.provenance.method = parse_forge_method(p.at("method").get<std::string>());
  out.provenance.source_seed = p.at("source_seed").get<std::uint64_t>();
  out.provenance.psr = p.at("psr").get<double>();
  out.provenance.rounds = p.at("rounds").get<std::size_t>();
  out.provenance.reached_threshold = p.at("reached_threshold").get<bool>();
  if (out.targets.size() != clean.size()) throw FormatError("archive: target count mismatch");
  return out;
}

void export_png(const std::filesystem::path& dir, const PoisonedDataset& data, std::size_t limit) {
  std::filesystem::create_directories(dir);
  const std::size_t n = std::min(limit, data.size());
  if (n == 0) throw std::invalid_argument("export_png: nothing to export");
  write_png_grid(dir / "poisoned.png", data.poisoned_images().slice_rows(0, n));
  Tensor noise = data.deltas.slice_rows(0, n);
  const float eps = static_cast<float>(data.epsilon_p);
  for (auto& v : noise.data()) v = eps > 0.0f ? 0.5f + 0.5f * v / eps : 0.5f;
  write_png_grid(dir / "noise.png", noise);
}

}  // namespace advin
