#include "advin/recipe.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include "advin/eval.hpp"
#include "advin/rng.hpp"

namespace advin {

namespace {

std::optional<double> parse_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<double> try_fraction(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) return parse_number(text);
  const auto num = parse_number(text.substr(0, slash));
  const auto den = parse_number(text.substr(slash + 1));
  if (!num || !den || *den == 0.0) return std::nullopt;
  return *num / *den;
}

std::uint64_t seed_or(const nlohmann::json& j, std::uint64_t fallback) {
  return j.is_object() && j.contains("seed") ? j.at("seed").get<std::uint64_t>() : fallback;
}

GlyphSetConfig glyphset_from_json(const nlohmann::json& j, std::uint64_t seed) {
  GlyphSetConfig g;
  g.classes = j.value("classes", g.classes);
  g.train_per_class = j.value("train_per_class", g.train_per_class);
  g.test_per_class = j.value("test_per_class", g.test_per_class);
  g.side = j.value("side", g.side);
  g.channels = j.value("channels", g.channels);
  g.noise_std = j.value("noise_std", g.noise_std);
  g.max_offset = j.value("max_offset", g.max_offset);
  g.background = j.value("background", g.background);
  g.foreground = j.value("foreground", g.foreground);
  g.seed = seed_or(j, seed);
  g.validate();
  return g;
}

nlohmann::json glyphset_to_json(const GlyphSetConfig& g) {
  return {{"classes", g.classes},       {"train_per_class", g.train_per_class},
          {"test_per_class", g.test_per_class}, {"side", g.side},
          {"channels", g.channels},     {"noise_std", g.noise_std},
          {"max_offset", g.max_offset}, {"background", g.background},
          {"foreground", g.foreground}, {"seed", g.seed}};
}

// Placeholder shape fields; fit_to() replaces them with the data's.
nlohmann::json complete_spec(nlohmann::json s) {
  if (!s.contains("arch")) s["arch"] = "miniconv";
  if (!s.contains("input")) s["input"] = {1, 16, 16};
  if (!s.contains("classes")) s["classes"] = 10;
  return s;
}

}  // namespace

double parse_fraction(std::string_view text) {
  const auto v = try_fraction(text);
  if (!v) throw std::invalid_argument("not a number or fraction: '" + std::string(text) + "'");
  return *v;
}

nlohmann::json resolve_fractions(nlohmann::json j) {
  if (j.is_string()) {
    if (const auto v = try_fraction(j.get<std::string>())) return *v;
  } else if (j.is_structured()) {
    for (auto& e : j) e = resolve_fractions(std::move(e));
  }
  return j;
}

std::filesystem::path resolve_data_path(const std::filesystem::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  if (const char* root = std::getenv("ADVIN_DATA_DIR"); root && *root) {
    return std::filesystem::path(root) / p;
  }
  return p;
}

nlohmann::json dataset_source_to_json(const DatasetSource& s) {
  nlohmann::json j{{"source", s.kind}};
  if (s.kind == "glyphset") j["glyphset"] = glyphset_to_json(s.glyphset);
  if (!s.path.empty()) j["path"] = s.path.string();
  if (!s.test_path.empty()) j["test_path"] = s.test_path.string();
  if (s.subset_per_class > 0) {
    j["subset_per_class"] = s.subset_per_class;
    j["subset_seed"] = s.subset_seed;
  }
  return j;
}

DatasetSource dataset_source_from_json(const nlohmann::json& j) {
  DatasetSource s;
  s.kind = j.value("source", s.kind);
  if (s.kind == "glyphset") {
    s.glyphset = glyphset_from_json(j.value("glyphset", nlohmann::json::object()), 0);
  } else if (s.kind == "cifar10") {
    s.path = j.value("path", std::string("cifar-10-batches-bin"));
  } else if (s.kind == "file") {
    s.path = j.at("path").get<std::string>();
    s.test_path = j.at("test_path").get<std::string>();
  } else {
    throw std::invalid_argument("unknown dataset source '" + s.kind +
                                "' (expected glyphset, cifar10 or file)");
  }
  s.subset_per_class = j.value("subset_per_class", s.subset_per_class);
  s.subset_seed = j.value("subset_seed", s.subset_seed);
  return s;
}

TrainTest load_source(const DatasetSource& s) {
  TrainTest tt = [&]() -> TrainTest {
    if (s.kind == "glyphset") return make_glyphset(s.glyphset);
    if (s.kind == "cifar10") return load_cifar10(resolve_data_path(s.path));
    if (s.kind == "file") {
      return {load_dataset(resolve_data_path(s.path), Split::kTrain),
              load_dataset(resolve_data_path(s.test_path), Split::kTest)};
    }
    throw std::invalid_argument("unknown dataset source '" + s.kind + "'");
  }();
  if (s.subset_per_class > 0) tt.train = subset(tt.train, s.subset_per_class, s.subset_seed);
  return tt;
}

ArchitectureSpec Recipe::target_spec(const LabeledDataset& data) const {
  ArchitectureSpec a;
  a.arch = target_arch;
  a.width_multiplier = target_width;
  const Shape s = data.image_shape();
  a.channels = s.at(0);
  a.height = s.at(1);
  a.width = s.at(2);
  a.classes = data.classes();
  a.validate();
  return a;
}

void Recipe::fit_to(const LabeledDataset& data) {
  const Shape s = data.image_shape();
  forge.source_spec.channels = s.at(0);
  forge.source_spec.height = s.at(1);
  forge.source_spec.width = s.at(2);
  forge.source_spec.classes = data.classes();
  forge.label_map.classes = data.classes();
  forge.validate();
}

Recipe recipe_from_json(const nlohmann::json& raw) {
  const nlohmann::json j = resolve_fractions(raw);
  Recipe r;
  r.name = j.value("name", r.name);
  r.seed = j.at("seed").get<std::uint64_t>();

  const auto ds = j.value("dataset", nlohmann::json::object());
  r.dataset = dataset_source_from_json(ds);
  if (r.dataset.kind == "glyphset") {
    r.dataset.glyphset = glyphset_from_json(ds.value("glyphset", nlohmann::json::object()),
                                            derive_seed(r.seed, "dataset"));
  }
  if (!ds.contains("subset_seed")) r.dataset.subset_seed = derive_seed(r.seed, "subset");

  r.method = parse_forge_method(j.value("method", std::string("advin")));
  nlohmann::json f = j.value("forge", nlohmann::json::object());
  if (!f.contains("seed")) f["seed"] = derive_seed(r.seed, "forge");
  nlohmann::json lm = f.value("label_map", nlohmann::json::object());
  if (!lm.contains("strategy")) lm["strategy"] = "nextcycle";
  if (!lm.contains("classes")) lm["classes"] = 10;
  if (!lm.contains("seed")) lm["seed"] = derive_seed(r.seed, "label-map");
  f["label_map"] = lm;
  f["source_spec"] = complete_spec(f.value("source_spec", nlohmann::json::object()));
  r.forge = forge_config_from_json(f);

  if (j.contains("label_model") && !j.at("label_model").is_null()) {
    r.label_model = j.at("label_model").get<std::string>();
  }

  const auto target = j.value("target", nlohmann::json::object());
  r.target_arch = parse_architecture(target.value("arch", std::string("miniconv")));
  r.target_width = target.value("width", 1.0);

  const auto train = j.value("train", nlohmann::json::object());
  TrainConfig st;
  st.seed = derive_seed(r.seed, "train");
  r.train_st = train_config_from_json(train.value("st", nlohmann::json::object()), st);
  r.train_st.inner.reset();
  TrainConfig at;
  at.seed = derive_seed(r.seed, "train");
  at.inner = default_inner_attack(8.0 / 255.0);
  r.train_at = train_config_from_json(train.value("at", nlohmann::json::object()), at);
  if (!r.train_at.inner) throw std::invalid_argument("recipe: train.at needs an inner attack");
  r.train_st.validate();
  r.train_at.validate();

  const auto ev = j.value("eval", nlohmann::json::object());
  if (ev.contains("attack")) r.eval = attack_from_json(ev.at("attack"));
  r.eval_seed = seed_or(ev, derive_seed(r.seed, "eval"));

  r.poison_rate = j.value("poison_rate", r.poison_rate);
  if (!(r.poison_rate >= 0.0 && r.poison_rate <= 1.0)) {
    throw std::invalid_argument("recipe: poison_rate outside [0,1]");
  }
  r.mix_seed = j.contains("mix_seed") ? j.at("mix_seed").get<std::uint64_t>()
                                      : derive_seed(r.seed, "mix");
  r.output_dir = j.value("output_dir", r.output_dir.string());
  return r;
}

nlohmann::json recipe_to_json(const Recipe& r) {
  nlohmann::json j{{"name", r.name},
                   {"seed", r.seed},
                   {"dataset", dataset_source_to_json(r.dataset)},
                   {"method", to_string(r.method)},
                   {"forge", forge_config_to_json(r.forge)},
                   {"label_model", r.label_model ? nlohmann::json(r.label_model->string())
                                                 : nlohmann::json(nullptr)},
                   {"target", {{"arch", to_string(r.target_arch)}, {"width", r.target_width}}},
                   {"train",
                    {{"st", train_config_to_json(r.train_st)},
                     {"at", train_config_to_json(r.train_at)}}},
                   {"eval", {{"attack", attack_to_json(r.eval)}, {"seed", r.eval_seed}}},
                   {"poison_rate", r.poison_rate},
                   {"mix_seed", r.mix_seed},
                   {"output_dir", r.output_dir.string()}};
  return j;
}

Recipe load_recipe(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot open recipe " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("recipe " + file.string() + ": " + e.what());
  }
  return recipe_from_json(j);
}

}  // namespace advin
