// End-to-end acceptance run: one PASS/FAIL line per criterion.
//   acceptance [--audit-dir DIR] [--work DIR] [--known-failure N]...
// Exit status is nonzero when a criterion fails that was not listed with
// --known-failure, or when the run itself breaks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "advin/attack.hpp"
#include "advin/dataset.hpp"
#include "advin/eval.hpp"
#include "advin/forge.hpp"
#include "advin/label_map.hpp"
#include "advin/train.hpp"
#include "support/model_check.hpp"
#include "support/toy.hpp"

namespace fs = std::filesystem;
using namespace advin;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Verdict {
  int id;
  bool pass;
  std::string detail;
};

// GlyphSet regime shared by criteria 4-10.
constexpr std::uint64_t kDataSeed = 1;
constexpr std::uint64_t kForgeSeed = 7;
constexpr std::uint64_t kTrainSeed = 3;
constexpr std::uint64_t kEvalSeed = 5;
constexpr double kRadius = 8.0 / 255.0;
constexpr double kSourceLr = 0.02;
constexpr std::size_t kMinRounds = 3;
constexpr double kErrorMinEps = 8.0 / 255.0;

TrainConfig st_config() {
  TrainConfig c;
  c.epochs = 15;
  c.batch_size = 64;
  c.lr = 0.05;
  c.seed = kTrainSeed;
  c.trace_robust = false;
  return c;
}

TrainConfig at_config() {
  TrainConfig c = st_config();
  c.inner = default_inner_attack(kRadius);
  c.warmup_epochs = 5;
  return c;
}

ForgeConfig forge_config(LabelStrategy strategy) {
  ForgeConfig f;
  f.seed = kForgeSeed;
  f.label_map.strategy = strategy;
  f.source_train.lr = kSourceLr;
  f.min_rounds = kMinRounds;
  return f;
}

struct Trained {
  TrainResult run;
  EvalReport report;
  double seconds = 0.0;

  double train_accuracy() const { return run.trace.epochs.back().train_accuracy; }
  bool loss_decreased() const {
    return run.trace.epochs.back().train_loss < run.trace.epochs.front().train_loss;
  }
};

Trained fit(const LabeledDataset& train, const LabeledDataset& test, bool adversarial) {
  const auto t0 = Clock::now();
  ArchitectureSpec spec;
  spec.classes = train.classes();
  Trained t{adversarial ? train_adversarial(train, spec, at_config())
                        : train_standard(train, spec, st_config()),
            {}, 0.0};
  t.report = evaluate(t.run.model, test, default_eval_attack(), kEvalSeed);
  t.seconds = seconds_since(t0);
  return t;
}

std::string describe(const char* tag, const Trained& t) {
  return fmt("%s nat=%.3f rob=%.3f train_acc=%.3f (%.0fs)", tag, t.report.natural_accuracy,
             t.report.robust_accuracy, t.train_accuracy(), t.seconds);
}

Verdict gradient_oracle() {
  const auto t0 = Clock::now();
  ref::GradCheck g;
  for (auto arch : {Architecture::kMiniConv, Architecture::kMiniRes}) {
    for (std::uint64_t s = 0; s < 20; ++s) ref::check_model_instance(ref::small_spec(arch), 100 + s, g);
  }
  const double t = seconds_since(t0);
  return {1, g.failures == 0 && t < 60.0,
          fmt("%zu coordinates, %zu kinks, %zu failures, worst rel err %.2e, %.1fs%s", g.checked,
              g.kinks, g.failures, g.worst, t,
              g.failures ? (" first: " + g.first_failure).c_str() : "")};
}

Verdict pgd_oracle() {
  const auto t0 = Clock::now();
  std::size_t misses = 0;
  double worst_gap = -1e300;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto p = ref::make_toy(s);
    const int labels[] = {p.label};
    const auto r = pgd_batch(p.model(), p.x, labels, ref::toy_attack(p.epsilon));
    const double d[3] = {r.delta[0], r.delta[1], r.delta[2]};
    const double gap = p.grid_max() - p.loss(d);
    worst_gap = std::max(worst_gap, gap);
    if (gap > 1e-3) ++misses;
  }
  const double t = seconds_since(t0);
  return {2, misses == 0 && t < 60.0,
          fmt("50 toys, %zu below grid optimum - 1e-3, worst gap %.2e, %.2fs", misses, worst_gap, t)};
}

Verdict projection_audit(const fs::path& dir) {
  ProjectionAudit total = global_audit();
  std::size_t files = 0;
  if (!dir.empty() && fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() != ".audit") continue;
      std::ifstream is(e.path());
      ProjectionAudit a;
      if (!(is >> a.checked >> a.radius_violations >> a.box_violations >> a.mask_violations)) {
        return {3, false, "unreadable audit file " + e.path().string()};
      }
      total.checked += a.checked;
      total.radius_violations += a.radius_violations;
      total.box_violations += a.box_violations;
      total.mask_violations += a.mask_violations;
      ++files;
    }
  }
  return {3, files > 0 && total.total() == 0 && total.checked > 0,
          fmt("%zu test binaries + this run: %zu perturbations, %zu radius / %zu box / %zu mask "
              "violations",
              files, total.checked, total.radius_violations, total.box_violations,
              total.mask_violations)};
}

std::uint64_t archive_of(const PoisonedDataset& p, const fs::path& dir) {
  fs::remove_all(dir);
  return save_archive(dir, p);
}

struct Pipeline {
  ForgeResult forge;
  double forge_seconds = 0.0;
  std::uint64_t archive = 0;
  std::optional<Trained> st;
  std::optional<Trained> at;
};

Pipeline run_advin(const TrainTest& data, LabelStrategy strategy, const fs::path& dir,
                   bool with_st) {
  const auto t0 = Clock::now();
  Pipeline p{advin_generate(data.train, forge_config(strategy)), 0.0, 0, std::nullopt,
             std::nullopt};
  p.forge_seconds = seconds_since(t0);
  p.archive = archive_of(p.forge.poisoned, dir);
  const LabeledDataset view = p.forge.poisoned.poisoned_view();
  if (with_st) p.st.emplace(fit(view, data.test, false));
  p.at.emplace(fit(view, data.test, true));
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path audit_dir;
  if (const char* env = std::getenv("ADVIN_AUDIT_DIR")) audit_dir = env;
  fs::path work = fs::temp_directory_path() / "advin-acceptance";
  std::set<int> known;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--audit-dir" && i + 1 < argc) {
      audit_dir = argv[++i];
    } else if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--known-failure" && i + 1 < argc) {
      known.insert(std::atoi(argv[++i]));
    } else {
      std::fprintf(stderr, "usage: acceptance [--audit-dir DIR] [--work DIR] [--known-failure N]...\n");
      return 2;
    }
  }
  fs::create_directories(work);
  enable_global_audit(true);

  std::vector<Verdict> verdicts;
  auto report = [&](Verdict v) {
    std::printf("criterion %d: %s  %s\n", v.id, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    verdicts.push_back(std::move(v));
  };

  try {
    report(gradient_oracle());
    report(pgd_oracle());

    GlyphSetConfig g;
    g.seed = kDataSeed;
    const TrainTest data = make_glyphset(g);

    const Trained clean_st = fit(data.train, data.test, false);
    const Trained clean_at = fit(data.train, data.test, true);
    std::printf("baseline: %s; %s\n", describe("ST", clean_st).c_str(),
                describe("AT", clean_at).c_str());

    const Pipeline nc = run_advin(data, LabelStrategy::kNextCycle, work / "nextcycle", true);
    const auto& prov = nc.forge.poisoned.provenance;
    const double rescored = psr(nc.forge.source, nc.forge.poisoned);
    report({4, prov.reached_threshold && prov.psr >= 0.99 && prov.rounds <= 50 &&
                   rescored == prov.psr && nc.forge_seconds < 600.0,
            fmt("rounds=%zu psr=%.4f rescored=%.4f reached=%d (%.0fs)", prov.rounds, prov.psr,
                rescored, int(prov.reached_threshold), nc.forge_seconds)});

    const bool losses = clean_st.loss_decreased() && clean_at.loss_decreased() &&
                        nc.st->loss_decreased() && nc.at->loss_decreased();
    report({5, nc.at->report.robust_accuracy <= 0.5 * clean_at.report.robust_accuracy &&
                   nc.at->report.natural_accuracy <= clean_at.report.natural_accuracy - 0.15 &&
                   nc.forge_seconds + nc.at->seconds < 1200.0 && losses,
            describe("AT", *nc.at) + fmt(" vs clean rob=%.3f nat=%.3f; training loss fell: %s",
                                        clean_at.report.robust_accuracy,
                                        clean_at.report.natural_accuracy, losses ? "yes" : "no")});
    report({6, nc.st->report.natural_accuracy <= clean_st.report.natural_accuracy - 0.30 &&
                   nc.st->train_accuracy() >= 0.90,
            describe("ST", *nc.st) +
                fmt(" vs clean nat=%.3f", clean_st.report.natural_accuracy)});

    {
      ForgeConfig f;
      f.seed = kForgeSeed;
      f.epsilon_p = kErrorMinEps;
      const auto t0 = Clock::now();
      const ForgeResult em = error_min_generate(data.train, f);
      const double forge_s = seconds_since(t0);
      const LabeledDataset view = em.poisoned.poisoned_view();
      const Trained st = fit(view, data.test, false);
      const Trained at = fit(view, data.test, true);
      const bool fell = st.loss_decreased() && at.loss_decreased();
      report({7, at.report.robust_accuracy >= clean_at.report.robust_accuracy - 0.10 &&
                     st.report.natural_accuracy <= clean_st.report.natural_accuracy - 0.20 && fell,
              fmt("error-min eps=%.0f/255 rounds=%zu (%.0fs); ", kErrorMinEps * 255,
                  em.poisoned.provenance.rounds, forge_s) +
                  describe("AT", at) + "; " + describe("ST", st) +
                  fmt("; clean AT rob=%.3f, clean ST nat=%.3f",
                      clean_at.report.robust_accuracy, clean_st.report.natural_accuracy)});
    }

    {
      const Pipeline rnd = run_advin(data, LabelStrategy::kRandom, work / "random", false);
      report({8, nc.at->report.robust_accuracy <= rnd.at->report.robust_accuracy - 0.05,
              fmt("AT rob nextcycle=%.3f random=%.3f (both %zu/%zu rounds, eps_p=%.0f/255)",
                  nc.at->report.robust_accuracy, rnd.at->report.robust_accuracy,
                  nc.forge.poisoned.provenance.rounds, rnd.forge.poisoned.provenance.rounds,
                  nc.forge.poisoned.epsilon_p * 255)});
    }

    {
      const auto& map = *nc.forge.poisoned.class_map;
      const double at_bias = bias_diagnostic(nc.at->report, map);
      const double st_bias = bias_diagnostic(nc.st->report, map);
      report({9, at_bias >= 0.6,
              fmt("bias_diagnostic AT=%.2f (ST=%.2f)", at_bias, st_bias)});
    }

    {
      const Pipeline again = run_advin(data, LabelStrategy::kNextCycle, work / "nextcycle-2", true);
      const bool same = again.archive == nc.archive &&
                        again.forge.source.hash() == nc.forge.source.hash() &&
                        again.st->run.model.hash() == nc.st->run.model.hash() &&
                        again.at->run.model.hash() == nc.at->run.model.hash();
      report({10, same,
              fmt("archive %016llx/%016llx st %016llx/%016llx at %016llx/%016llx",
                  (unsigned long long)nc.archive, (unsigned long long)again.archive,
                  (unsigned long long)nc.st->run.model.hash(),
                  (unsigned long long)again.st->run.model.hash(),
                  (unsigned long long)nc.at->run.model.hash(),
                  (unsigned long long)again.at->run.model.hash())});
    }

    report(projection_audit(audit_dir));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance run aborted: %s\n", e.what());
    return 2;
  }

  int unexpected = 0;
  for (const auto& v : verdicts) {
    if (v.pass) continue;
    if (known.count(v.id)) {
      std::printf("criterion %d failed as recorded (--known-failure)\n", v.id);
    } else {
      ++unexpected;
    }
  }
  std::sort(verdicts.begin(), verdicts.end(),
            [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  std::printf("\nsummary\n");
  for (const auto& v : verdicts) std::printf("criterion %d: %s\n", v.id, v.pass ? "PASS" : "FAIL");
  std::printf("%zu/%zu criteria pass\n",
              static_cast<std::size_t>(std::count_if(verdicts.begin(), verdicts.end(),
                                                     [](const Verdict& v) { return v.pass; })),
              verdicts.size());
  return unexpected == 0 ? 0 : 1;
}
