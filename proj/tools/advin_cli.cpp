#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advin/eval.hpp"
#include "advin/forge.hpp"
#include "advin/png.hpp"
#include "advin/recipe.hpp"
#include "advin/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace advin;

namespace {

// Exit codes: 1 usage or bad input, 2 runtime failure, 3 round cap hit.
struct CliError : std::runtime_error {
  CliError(std::string kind, const std::string& msg, int code)
      : std::runtime_error(msg), kind(std::move(kind)), code(code) {}
  std::string kind;
  int code;
};

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw CliError("io", "cannot write " + path.string(), 2);
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// Flags shared by every command that builds a recipe. Each set flag becomes a
// JSON override applied on top of the recipe file.
struct RecipeFlags {
  std::string recipe;
  std::optional<std::uint64_t> seed;
  std::string dataset, data_path, test_path;
  std::optional<std::size_t> subset;

  void add(CLI::App& app) {
    app.add_option("--recipe", recipe, "Experiment recipe (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Recipe seed");
    app.add_option("--dataset", dataset, "glyphset, cifar10 or file");
    app.add_option("--data-path", data_path, "CIFAR directory or train file (relative to ADVIN_DATA_DIR)");
    app.add_option("--test-path", test_path, "Test file for --dataset file");
    app.add_option("--subset", subset, "Examples per class kept from the train split");
  }

  json base() const {
    json j = json::object();
    if (!recipe.empty()) {
      std::ifstream is(recipe);
      try {
        j = json::parse(is, nullptr, true, true);
      } catch (const json::exception& e) {
        throw CliError("recipe", recipe + ": " + e.what(), 1);
      }
    }
    if (seed) j["seed"] = *seed;
    if (!j.contains("seed")) j["seed"] = 0;
    if (!dataset.empty()) j["dataset"]["source"] = dataset;
    if (!data_path.empty()) j["dataset"]["path"] = data_path;
    if (!test_path.empty()) j["dataset"]["test_path"] = test_path;
    if (subset) j["dataset"]["subset_per_class"] = *subset;
    return j;
  }
};

void set_if(json& j, const char* pointer, const std::string& text) {
  if (!text.empty()) j[json::json_pointer(pointer)] = resolve_fractions(json(text));
}

TrainTest load_data(const DatasetSource& src) {
  const auto tt = load_source(src);
  std::cout << "dataset " << src.kind << " train=" << hex64(tt.train.hash())
            << " test=" << hex64(tt.test.hash()) << " examples=" << tt.train.size() << "/"
            << tt.test.size() << "\n";
  return tt;
}

// The archive records where its clean data came from.
DatasetSource archive_source(const fs::path& dir) {
  if (!fs::exists(dir / "metadata.json")) throw CliError("missing-archive", "no archive at " + dir.string(), 1);
  const auto meta = read_archive_metadata(dir);
  if (!meta.at("config").contains("dataset")) {
    throw CliError("archive", dir.string() + " does not record its dataset", 1);
  }
  return dataset_source_from_json(meta.at("config").at("dataset"));
}

std::optional<ModelState> maybe_load_model(const std::optional<fs::path>& path) {
  if (!path) return std::nullopt;
  return load_checkpoint(*path).model;
}

// ---------------------------------------------------------------- poison

struct PoisonOutcome {
  PoisonedDataset data;
  std::uint64_t hash;
  double seconds;
};

PoisonOutcome run_poison(Recipe r, const fs::path& out) {
  const auto tt = load_data(r.dataset);
  r.fit_to(tt.train);
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<ModelState> label_model = maybe_load_model(r.label_model);
  const bool needs_model = r.method == ForgeMethod::kAdvExample ||
                           r.forge.label_map.strategy == LabelStrategy::kLeastLikely ||
                           r.forge.label_map.strategy == LabelStrategy::kMostConfusing;
  if (needs_model && !label_model) {
    // no checkpoint given: adversarially train one on the clean data
    std::cout << "training a label/pretrained model (train.at)\n";
    TrainConfig c = r.train_at;
    c.trace_robust = false;
    label_model = train_adversarial(tt.train, r.target_spec(tt.train), c).model;
  }
  const ModelState* lm = label_model ? &*label_model : nullptr;
  std::optional<PoisonedDataset> pd;
  switch (r.method) {
    case ForgeMethod::kAdvin: pd = advin_generate(tt.train, r.forge, lm).poisoned; break;
    case ForgeMethod::kStdin: pd = stdin_generate(tt.train, r.forge, lm).poisoned; break;
    case ForgeMethod::kErrorMin: pd = error_min_generate(tt.train, r.forge).poisoned; break;
    case ForgeMethod::kAdvExample: pd = adv_example_generate(tt.train, *label_model, r.forge); break;
  }
  const double secs = seconds_since(t0);
  pd->config["dataset"] = dataset_source_to_json(r.dataset);
  pd->config["recipe"] = r.name;
  const std::uint64_t hash = save_archive(out, *pd);
  const auto& p = pd->provenance;
  std::printf("poison method=%s psr=%.4f rounds=%zu reached=%s wall=%.1fs archive=%s\n",
              to_string(p.method).c_str(), p.psr, p.rounds, p.reached_threshold ? "yes" : "no", secs,
              hex64(hash).c_str());
  return {std::move(*pd), hash, secs};
}

// ---------------------------------------------------------------- train

struct TrainFlags {
  std::string mode = "st";
  std::string eps_t, poison_rate, lr;
  std::optional<std::size_t> epochs, batch, warmup;
  std::string archive;
  std::string arch;
  bool no_trace_robust = false;
  std::optional<std::size_t> trace_limit;
};

struct TrainOutcome {
  ModelState model;
  TrainTrace trace;
  LabeledDataset test;
};

TrainOutcome run_train(const Recipe& r, const TrainFlags& f, const fs::path& out) {
  const bool at = f.mode == "at";
  DatasetSource src = r.dataset;
  if (!f.archive.empty()) src = archive_source(f.archive);
  const auto tt = load_data(src);
  LabeledDataset data = tt.train;
  nlohmann::json meta{{"mode", f.mode}, {"recipe", r.name}};
  double rate = 0.0;
  std::size_t poisoned = 0;
  if (!f.archive.empty()) {
    const auto pd = load_archive(f.archive, tt.train);
    rate = r.poison_rate;
    auto m = mix(tt.train, pd.poisoned_view(), rate, r.mix_seed);
    poisoned = m.poisoned_indices.size();
    data = std::move(m.data);
    meta["archive"] = hex64(archive_hash(f.archive));
    meta["method"] = to_string(pd.provenance.method);
  }
  meta["poison_rate"] = rate;
  meta["poisoned_examples"] = poisoned;
  meta["poisoned_fraction"] = data.size() ? static_cast<double>(poisoned) / data.size() : 0.0;

  TrainConfig c = at ? r.train_at : r.train_st;
  if (f.no_trace_robust) c.trace_robust = false;
  if (f.trace_limit) c.trace_limit = *f.trace_limit;
  const auto spec = r.target_spec(data);
  const auto t0 = std::chrono::steady_clock::now();
  auto res = at ? train_adversarial(data, spec, c, &tt.test) : train_standard(data, spec, c, &tt.test);
  res.trace.metadata["poisoning"] = meta;
  fs::create_directories(out);
  save_checkpoint(out / "model.ckpt", res.model, meta);
  write_text(out / "trace.csv", res.trace.to_csv());
  write_text(out / "trace.json", res.trace.metadata.dump(2) + "\n");
  const auto& last = res.trace.epochs.back();
  std::printf("train mode=%s epochs=%zu train_acc=%.4f poisoned=%zu/%zu wall=%.1fs model=%s\n",
              f.mode.c_str(), res.trace.epochs.size(), last.train_accuracy, poisoned, data.size(),
              seconds_since(t0), hex64(res.model.hash()).c_str());
  return {std::move(res.model), std::move(res.trace), tt.test};
}

// ---------------------------------------------------------------- eval

struct EvalFlags {
  std::string checkpoint, archive, eps, step_size, svg;
  std::optional<std::size_t> steps;
  bool no_random_init = false;
  std::string split = "test";
};

EvalReport run_eval(const Recipe& r, const ModelState& model, const LabeledDataset& test,
                    const std::optional<PoisonedDataset>& pd, const fs::path& out,
                    const std::string& svg) {
  EvalReport rep = evaluate(model, test, r.eval, r.eval_seed);
  json j = report_to_json(rep);
  if (pd) {
    rep.psr = psr(model, *pd);
    j = report_to_json(rep);
    if (pd->class_map) j["bias_diagnostic"] = bias_diagnostic(rep, *pd->class_map);
  }
  fs::create_directories(out);
  write_text(out / "report.json", j.dump(2) + "\n");
  write_text(out / "report.csv", report_to_csv(rep));
  if (!svg.empty()) {
    const auto counts = test.class_counts();
    for (std::size_t y = 0; y < rep.confusion.size(); ++y) {
      const auto row = std::accumulate(rep.confusion[y].begin(), rep.confusion[y].end(), std::size_t{0});
      if (row != counts[y]) throw CliError("eval", "confusion row " + std::to_string(y) + " does not sum to its class count", 2);
    }
    write_text(svg, confusion_svg(rep));
  }
  std::printf("eval natural=%.4f robust=%.4f examples=%zu", rep.natural_accuracy, rep.robust_accuracy,
              rep.examples);
  if (rep.psr) std::printf(" psr=%.4f", *rep.psr);
  std::printf("\n");
  return rep;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(const fs::path& sweep_file, const fs::path& out) {
  std::ifstream is(sweep_file);
  if (!is) throw CliError("sweep", "cannot open " + sweep_file.string(), 1);
  const json sweep = json::parse(is, nullptr, true, true);
  json base = sweep.contains("recipe_file")
                  ? json::parse(std::ifstream(sweep.at("recipe_file").get<std::string>()), nullptr, true, true)
                  : sweep.value("recipe", json::object());
  if (!base.contains("seed")) base["seed"] = 0;
  const auto pointer = json::json_pointer(sweep.at("parameter").get<std::string>());
  const auto stages = sweep.value("stages", std::vector<std::string>{"poison"});
  const auto has = [&](const char* s) { return std::find(stages.begin(), stages.end(), s) != stages.end(); };
  TrainFlags tf;
  tf.mode = sweep.value("mode", std::string("at"));
  tf.no_trace_robust = true;

  std::string table = "value,method,psr,rounds,reached,archive";
  if (has("train")) table += ",train_acc,model";
  if (has("eval")) table += ",natural,robust";
  table += "\n";
  std::size_t i = 0;
  for (const auto& v : sweep.at("values")) {
    json rj = base;
    rj[pointer] = v;
    const Recipe r = recipe_from_json(rj);
    const fs::path dir = out / ("run_" + std::to_string(i++));
    std::cout << "== " << sweep.at("parameter").get<std::string>() << " = " << v.dump() << "\n";
    const auto po = run_poison(r, dir / "archive");
    const auto& p = po.data.provenance;
    table += csv_escape(v.is_string() ? v.get<std::string>() : v.dump()) + "," + to_string(p.method) + "," +
             std::to_string(p.psr) + "," + std::to_string(p.rounds) + "," +
             (p.reached_threshold ? "1" : "0") + "," + hex64(po.hash);
    if (has("train")) {
      tf.archive = (dir / "archive").string();
      const auto to = run_train(r, tf, dir / "train");
      table += "," + std::to_string(to.trace.epochs.back().train_accuracy) + "," + hex64(to.model.hash());
      if (has("eval")) {
        const auto rep = run_eval(r, to.model, to.test, std::nullopt, dir / "eval", "");
        table += "," + std::to_string(rep.natural_accuracy) + "," + std::to_string(rep.robust_accuracy);
      }
    }
    table += "\n";
  }
  write_text(out / "table.csv", table);
  std::cout << "ablate rows=" << i << " table=" << (out / "table.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advin: adversarially inducing noise experiments"};
  app.require_subcommand(1);

  // poison
  auto* poison = app.add_subcommand("poison", "Generate a poison archive");
  RecipeFlags poison_rf;
  poison_rf.add(*poison);
  std::string method, eps_p, eta, strategy, source_lr, step_size_p, label_model, poison_out;
  std::optional<std::size_t> patch, steps_t, train_m, max_rounds, min_rounds;
  poison->add_option("--method", method, "advin, stdin, error-min or adv-example");
  poison->add_option("--eps-p", eps_p, "Poison radius, e.g. 32/255");
  poison->add_option("--eta", eta, "PSR threshold");
  poison->add_option("--strategy", strategy, "Label strategy (random, ll, mc, nextcycle, nearswap, ...)");
  poison->add_option("--patch", patch, "Centered noise patch side");
  poison->add_option("--steps", steps_t, "PGD steps T per refresh");
  poison->add_option("--step-size", step_size_p, "PGD step size");
  poison->add_option("--train-steps", train_m, "Source training steps M per round");
  poison->add_option("--max-rounds", max_rounds, "Round cap");
  poison->add_option("--min-rounds", min_rounds, "Rounds before the PSR check may stop");
  poison->add_option("--source-lr", source_lr, "Source model learning rate");
  poison->add_option("--label-model", label_model, "Checkpoint for LL/MC labels or adv-example")
      ->check(CLI::ExistingFile);
  poison->add_option("--out", poison_out, "Archive directory (default <output_dir>/archive)");

  // train
  auto* train = app.add_subcommand("train", "Train a target model");
  RecipeFlags train_rf;
  train_rf.add(*train);
  TrainFlags tf;
  std::string train_out;
  train->add_option("--mode", tf.mode, "st or at")->check(CLI::IsMember({"st", "at"}));
  train->add_option("--eps-t", tf.eps_t, "AT radius (inner step is eps/4)");
  train->add_option("--archive", tf.archive, "Poison archive to train on");
  train->add_option("--poison-rate", tf.poison_rate, "Fraction of examples taken poisoned");
  train->add_option("--epochs", tf.epochs);
  train->add_option("--lr", tf.lr);
  train->add_option("--batch-size", tf.batch);
  train->add_option("--warmup", tf.warmup, "AT warm-up epochs");
  train->add_option("--arch", tf.arch, "miniconv or minires");
  train->add_flag("--no-trace-robust", tf.no_trace_robust, "Skip per-epoch robust test accuracy");
  train->add_option("--trace-limit", tf.trace_limit, "Test examples scored per epoch");
  train->add_option("--out", train_out, "Output directory (default <output_dir>/<mode>)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  RecipeFlags eval_rf;
  eval_rf.add(*eval);
  EvalFlags ef;
  std::string eval_out;
  eval->add_option("--checkpoint", ef.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--archive", ef.archive, "Archive: its dataset is used and PSR reported");
  eval->add_option("--eps", ef.eps, "Attack radius, e.g. 8/255");
  eval->add_option("--attack-steps", ef.steps);
  eval->add_option("--step-size", ef.step_size);
  eval->add_flag("--no-random-init", ef.no_random_init);
  eval->add_option("--split", ef.split, "test or train")->check(CLI::IsMember({"test", "train"}));
  eval->add_option("--confusion-svg", ef.svg, "Write the confusion heatmap here");
  eval->add_option("--out", eval_out, "Output directory (default <output_dir>/eval)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run a one-parameter sweep");
  std::string sweep_file, ablate_out = "advin-ablate";
  ablate->add_option("--sweep", sweep_file)->required()->check(CLI::ExistingFile);
  ablate->add_option("--out", ablate_out);

  // export-images
  auto* exp = app.add_subcommand("export-images", "Write PNG grids of an archive or dataset");
  RecipeFlags exp_rf;
  exp_rf.add(*exp);
  std::string exp_archive, exp_out = "advin-images", save_train, save_test;
  std::size_t limit = 64;
  exp->add_option("--archive", exp_archive);
  exp->add_option("--limit", limit);
  exp->add_option("--out", exp_out);
  exp->add_option("--save-train", save_train, "Also save the clean train split as a dataset file");
  exp->add_option("--save-test", save_test, "Also save the clean test split as a dataset file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*poison) {
      json j = poison_rf.base();
      if (!method.empty()) j["method"] = method;
      set_if(j, "/forge/epsilon_p", eps_p);
      set_if(j, "/forge/eta", eta);
      set_if(j, "/forge/step_size", step_size_p);
      set_if(j, "/forge/source_train/lr", source_lr);
      if (!strategy.empty()) j["forge"]["label_map"]["strategy"] = strategy;
      if (patch) j["forge"]["patch"] = *patch;
      if (steps_t) j["forge"]["poison_steps"] = *steps_t;
      if (train_m) j["forge"]["train_steps"] = *train_m;
      if (max_rounds) j["forge"]["max_rounds"] = *max_rounds;
      if (min_rounds) j["forge"]["min_rounds"] = *min_rounds;
      if (!label_model.empty()) j["label_model"] = label_model;
      const Recipe r = recipe_from_json(j);
      const auto po = run_poison(r, poison_out.empty() ? r.output_dir / "archive" : fs::path(poison_out));
      if (!po.data.provenance.reached_threshold && r.method != ForgeMethod::kAdvExample) {
        throw CliError("round-cap", "PSR " + std::to_string(po.data.provenance.psr) + " below eta after " +
                                        std::to_string(po.data.provenance.rounds) + " rounds",
                       3);
      }
      return 0;
    }
    if (*train) {
      json j = train_rf.base();
      const char* sec = tf.mode == "at" ? "/train/at" : "/train/st";
      const std::string s(sec);
      if (!tf.eps_t.empty()) {
        if (tf.mode != "at") throw CliError("usage", "--eps-t needs --mode at", 1);
        const double e = parse_fraction(tf.eps_t);
        AttackConfig inner = default_inner_attack(e);
        j[json::json_pointer(s + "/inner")] = attack_to_json(inner);
      }
      set_if(j, "/poison_rate", tf.poison_rate);
      set_if(j, (s + "/lr").c_str(), tf.lr);
      if (tf.epochs) j[json::json_pointer(s + "/epochs")] = *tf.epochs;
      if (tf.batch) j[json::json_pointer(s + "/batch_size")] = *tf.batch;
      if (tf.warmup) j[json::json_pointer(s + "/warmup_epochs")] = *tf.warmup;
      if (!tf.arch.empty()) j["target"]["arch"] = tf.arch;
      if (!tf.archive.empty() && !fs::exists(fs::path(tf.archive) / "metadata.json")) {
        throw CliError("missing-archive", "no archive at " + tf.archive, 1);
      }
      const Recipe r = recipe_from_json(j);
      run_train(r, tf, train_out.empty() ? r.output_dir / tf.mode : fs::path(train_out));
      return 0;
    }
    if (*eval) {
      json j = eval_rf.base();
      AttackConfig a = default_eval_attack();
      if (j.contains("eval") && j["eval"].contains("attack")) a = attack_from_json(resolve_fractions(j["eval"]["attack"]));
      if (!ef.eps.empty()) a.epsilon = parse_fraction(ef.eps);
      if (!ef.step_size.empty()) a.step_size = parse_fraction(ef.step_size);
      if (ef.steps) a.steps = *ef.steps;
      if (ef.no_random_init) a.random_init = false;
      j["eval"]["attack"] = attack_to_json(a);
      const Recipe r = recipe_from_json(j);
      const auto ck = load_checkpoint(ef.checkpoint);
      DatasetSource src = ef.archive.empty() ? r.dataset : archive_source(ef.archive);
      const auto tt = load_data(src);
      std::optional<PoisonedDataset> pd;
      if (!ef.archive.empty()) pd = load_archive(ef.archive, tt.train);
      run_eval(r, ck.model, ef.split == "test" ? tt.test : tt.train, pd,
               eval_out.empty() ? r.output_dir / "eval" : fs::path(eval_out), ef.svg);
      return 0;
    }
    if (*ablate) return cmd_ablate(sweep_file, ablate_out);
    if (*exp) {
      if (!exp_archive.empty()) {
        const auto tt = load_data(archive_source(exp_archive));
        export_png(exp_out, load_archive(exp_archive, tt.train), limit);
        std::cout << "export " << (fs::path(exp_out) / "poisoned.png").string() << " "
                  << (fs::path(exp_out) / "noise.png").string() << "\n";
      } else {
        const Recipe r = recipe_from_json(exp_rf.base());
        const auto tt = load_data(r.dataset);
        fs::create_directories(exp_out);
        const std::size_t n = std::min(limit, tt.train.size());
        write_png_grid(fs::path(exp_out) / "clean.png", tt.train.images().slice_rows(0, n));
        if (!save_train.empty()) save_dataset(save_train, tt.train);
        if (!save_test.empty()) save_dataset(save_test, tt.test);
        std::cout << "export " << (fs::path(exp_out) / "clean.png").string() << "\n";
      }
      return 0;
    }
  } catch (const CliError& e) {
    std::cerr << json{{"error", e.kind}, {"message", e.what()}}.dump() << "\n";
    return e.code;
  } catch (const std::invalid_argument& e) {
    std::cerr << json{{"error", "invalid-argument"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "runtime"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }
  return 0;
}
