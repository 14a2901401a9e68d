/*
 * Copyright 2026 The btmuda Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */


// Acceptance suite: one verdict line per criterion. Arguments restrict the
// run to the listed criterion numbers (default: all).

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>

#include "btmuda/config.hpp"
#include "btmuda/evaluation.hpp"
#include "btmuda/gradcheck_suite.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace btmuda;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Collects sub-checks of one criterion and prints the failing ones.
class Criterion {
 public:
  void check(bool ok, const std::string& what) {
    std::printf("    %s %s\n", ok ? "ok  " : "FAIL", what.c_str());
    ok_ = ok_ && ok;
  }
  bool ok() const { return ok_; }

 private:
  bool ok_ = true;
};

std::string fmt(const char* format, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

Matrix<double> row(std::initializer_list<double> v) {
  Matrix<double> m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

template <typename Scalar>
ImageBatch<Scalar> images(Index count, Index side, std::uint64_t seed) {
  return {count, side, side, test::random_matrix(count * side * side, 1, seed, 0, 1).cast<Scalar>()};
}

bool criterion_gradients() {
  Criterion c;
  const GradCheckSettings settings;
  const auto t0 = Clock::now();
  const auto outcomes = run_gradcheck_suite(settings, 0);
  const double secs = seconds_since(t0);
  for (const auto& o : outcomes) {
    std::string where;
    if (!o.passed)
      where = fmt(" at %s[%lld] (analytic %.3e, numeric %.3e)", o.report.worst_param.c_str(), static_cast<long long>(o.report.worst_element),
                  o.report.worst_analytic, o.report.worst_numeric);
    c.check(o.report.max_rel_error <= settings.tolerance,
            fmt("%-6s max rel err %.3e <= %.0e over %zu elements%s", o.loss.c_str(), o.report.max_rel_error, settings.tolerance,
                o.report.checked, where.c_str()));
  }
  c.check(secs < 60, fmt("runtime %.1f s < 60 s", secs));
  return c.ok();
}

bool criterion_oracles() {
  Criterion c;
  Tape<double> t;
  const double skl = symmetric_kl(t.constant(row({0.5, 0.5})), t.constant(row({0.25, 0.75}))).item();
  c.check(std::abs(skl - 0.13732653608351372) <= 1e-6, fmt("symmetric KL %.9f", skl));

  KernelConfig unit;
  unit.scales = {1.0};
  unit.fixed_bandwidth = 1.0;
  const double mmd = mmd_squared(t.constant(row({1, 0})), t.constant(row({0, 1})), unit).item();
  c.check(std::abs(mmd - 1.2642411176571154) <= 1e-6, fmt("single-point MMD^2 %.9f (2 - 2/e)", mmd));

  const double rest = restriction_loss<double>({t.constant(row({0.3, 0.7})), t.constant(row({0.6, 0.4}))}).item();
  c.check(std::abs(rest - 0.6) <= 1e-15, fmt("restriction loss %.17g vs 0.6 (|diff| <= 1e-15)", rest));

  const double b0 = beta_schedule(0, 2000), bT = beta_schedule(2000, 2000);
  c.check(std::abs(b0 - 0.26102288838050802) <= 1e-6, fmt("beta(0) %.9f", b0));
  c.check(bT == 0.5, fmt("beta(iter_total) %.17g == 0.5", bT));

  const double l0 = lambda_schedule(0.0), l1 = lambda_schedule(1.0);
  c.check(l0 == 0.0, fmt("lambda(0) %.17g == 0", l0));
  c.check(std::abs(l1 - 0.99990920426259513) <= 1e-6, fmt("lambda(1) %.9f", l1));

  Var<double> zero = t.constant(Matrix<double>::Zero(4, 2));
  const double cls = classification_loss<double>({{zero, zero}}, {zero}, {{0, 1, 1, 0}}).item();
  c.check(std::abs(cls - 2 * std::log(2.0)) <= 1e-6, fmt("uniform classification loss, M=1: %.12f vs 2 ln 2", cls));
  return c.ok();
}

bool criterion_invariants() {
  Criterion c;
  const ModelConfig cfg;
  const auto params = init_params<double>(cfg, 11);
  Tape<double> tape;
  ParamBindings<double> p(tape, params);

  double worst_row = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Var<double> h = patch_embed(p, cfg, images<double>(3, 32, 100 + s));
    const Var<double> other = patch_embed(p, cfg, images<double>(3, 32, 200 + s));
    std::vector<Matrix<double>> w;
    self_attention(p, cfg, 1, h, &w);
    cross_attention(p, cfg, 2, h, other, {1, 2, 0}, &w);
    for (const auto& m : w) worst_row = std::max(worst_row, (m.rowwise().sum().array() - 1.0).abs().maxCoeff());
  }
  c.check(worst_row <= 1e-6, fmt("attention rows sum to 1: max deviation %.2e", worst_row));

  const Var<double> h = patch_embed(p, cfg, images<double>(2, 32, 7));
  c.check(test::bit_equal(self_attention(p, cfg, 1, h).value(), cross_attention(p, cfg, 1, h, h, identity_map(2)).value()),
          "cross-attention on identical inputs equals self-attention (bit-exact)");

  const auto target = images<double>(2, 32, 8);
  const auto a = transformer_forward(p, cfg, images<double>(2, 32, 9), target);
  const auto b = transformer_forward(p, cfg, images<double>(2, 32, 10), target);
  c.check(test::bit_equal(a.target.value(), b.target.value()) && test::bit_equal(a.target.value(), target_only_forward(p, cfg, target).value()),
          "target branch independent of the paired source images (bit-exact)");

  bool pairs_ok = true;
  std::string counts;
  for (int m = 1; m <= 3; ++m) {
    const auto n = classifier_pairs(2 * m).size();
    pairs_ok = pairs_ok && n == static_cast<std::size_t>(m * (2 * m - 1));
    counts += fmt(" M=%d:%zu", m, n);
  }
  c.check(pairs_ok, "restriction pair count M(2M-1):" + counts);

  const KernelConfig kernel;
  std::mt19937_64 rng(3);
  double min_mmd = 1, max_same = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 1 + static_cast<Index>(rng() % 30), m = 1 + static_cast<Index>(rng() % 30), d = 1 + static_cast<Index>(rng() % 8);
    const Matrix<double> x = test::random_matrix(n, d, rng()), y = test::random_matrix(m, d, rng());
    Tape<double> t;
    min_mmd = std::min(min_mmd, mmd_squared(t.constant(x), t.constant(y), kernel).item());
    max_same = std::max(max_same, std::abs(mmd_squared(t.constant(x), t.constant(x), kernel).item()));
  }
  c.check(min_mmd >= -1e-9, fmt("MMD^2 >= -1e-9 over 200 random pairs (min %.3e)", min_mmd));
  c.check(max_same <= 1e-12, fmt("MMD^2 of a set with itself is 0 (max |value| %.2e)", max_same));

  SynthConfig synth;
  synth.samples_per_domain = 64;
  synth.eval_samples = 64;
  const Dataset data = gen_domain(synth, domain_specs(synth).back(), Split::Eval);
  const auto fparams = init_params<float>(cfg, 12);
  const TargetOutputs out = infer(fparams, cfg, data);
  const double dev = (out.fusion_probs.rowwise().sum().array() - 1.0).abs().maxCoeff();
  c.check((out.fusion_probs.array() >= 0).all() && dev <= 1e-6, fmt("fused probabilities on the simplex (max |sum - 1| %.2e)", dev));
  return c.ok();
}

bool criterion_equivalences() {
  Criterion c;
  std::mt19937_64 rng(29);
  double worst_auc = 0;
  int with_ties = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 200)(rng);
    const int levels = std::uniform_int_distribution<int>(2, 20)(rng);
    std::vector<double> scores(static_cast<std::size_t>(n));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      scores[static_cast<std::size_t>(i)] = std::uniform_int_distribution<int>(0, levels)(rng) / static_cast<double>(levels);
      labels[static_cast<std::size_t>(i)] = std::bernoulli_distribution(0.5)(rng);
    }
    labels[0] = 0;
    labels[1] = 1;
    with_ties += std::set<double>(scores.begin(), scores.end()).size() < scores.size();
    worst_auc = std::max(worst_auc, std::abs(metric_auc(scores, labels) - test::auc_oracle(scores, labels)));
  }
  c.check(worst_auc <= 1e-12, fmt("AUC vs pairwise oracle, 100 instances (%d with ties): max diff %.2e", with_ties, worst_auc));

  const KernelConfig kernel;
  double worst_mmd = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = std::uniform_int_distribution<Index>(1, 50)(rng), m = std::uniform_int_distribution<Index>(1, 50)(rng);
    const Index d = std::uniform_int_distribution<Index>(1, 16)(rng);
    const Matrix<double> x = test::random_matrix(n, d, rng()), y = test::random_matrix(m, d, rng(), -0.5, 1.5);
    Tape<double> t;
    worst_mmd = std::max(worst_mmd, std::abs(mmd_squared(t.constant(x), t.constant(y), kernel).item() - test::mmd_oracle(x, y, kernel.scales)));
  }
  c.check(worst_mmd <= 1e-9, fmt("MMD^2 vs double-loop oracle, 50 instances n, m <= 50: max diff %.2e", worst_mmd));
  return c.ok();
}

bool criterion_adaptation() {
  Criterion c;
  const std::vector<std::string> presets{"exp6", "exp7", "exp10"};
  std::map<std::string, double> mean;
  double slowest = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RunConfig cfg = parse_run_config(nlohmann::json::object());
    cfg.synthetic->seed = seed;
    const BenchmarkData data = make_synthetic_benchmark(*cfg.synthetic);
    for (const auto& name : presets) {
      TrainConfig tc = cfg.train;
      tc.preset = preset_by_name(name);
      tc.seed = seed;
      test::TempDir dir;
      const auto t0 = Clock::now();
      const auto params = btmuda::train(tc, data, dir.path());
      const double secs = seconds_since(t0);
      slowest = std::max(slowest, secs);
      const auto reports = evaluate_both(params, tc.effective_model(), *data.target_eval);
      mean[name] += reports[0].accuracy / 3;
      std::printf("    seed %llu %-5s target accuracy fusion %.2f%% average %.2f%%  (%.0f s)\n", static_cast<unsigned long long>(seed),
                  name.c_str(), reports[0].accuracy, reports[1].accuracy, secs);
      std::fflush(stdout);
    }
  }
  c.check(mean["exp10"] >= mean["exp6"] + 5, fmt("mean exp10 %.2f%% >= mean exp6 %.2f%% + 5", mean["exp10"], mean["exp6"]));
  c.check(mean["exp7"] >= mean["exp6"], fmt("mean exp7 %.2f%% >= mean exp6 %.2f%%", mean["exp7"], mean["exp6"]));
  c.check(slowest <= 900, fmt("slowest run %.0f s <= 900 s", slowest));
  return c.ok();
}

TrainConfig short_run() {
  TrainConfig cfg = parse_run_config(nlohmann::json::object()).train;
  cfg.schedule.iter_total = 30;
  cfg.checkpoint_every = 10;
  cfg.seed = 4;
  return cfg;
}

BenchmarkData short_data() {
  SynthConfig s;
  s.samples_per_domain = 96;
  s.eval_samples = 64;
  s.seed = 4;
  return make_synthetic_benchmark(s);
}

bool criterion_determinism() {
  Criterion c;
  const TrainConfig cfg = short_run();
  const BenchmarkData data = short_data();
  test::TempDir a, b, resumed, from_periodic;
  btmuda::train(cfg, data, a.path());
  btmuda::train(cfg, data, b.path());
  c.check(test::read_file(a / kTrainLog) == test::read_file(b / kTrainLog), "repeated run: training log bit-identical");
  c.check(test::read_file(a / kFinalCheckpoint) == test::read_file(b / kFinalCheckpoint), "repeated run: checkpoint bit-identical");

  TrainHooks stop;
  stop.stop_after = 13;
  btmuda::train(cfg, data, resumed.path(), stop);
  TrainHooks resume;
  resume.resume = resumed / kFinalCheckpoint;
  btmuda::train(cfg, data, resumed.path(), resume);
  c.check(test::read_file(a / kTrainLog) == test::read_file(resumed / kTrainLog) &&
              test::read_file(a / kFinalCheckpoint) == test::read_file(resumed / kFinalCheckpoint),
          "stop at iteration 13 and resume: log and checkpoint equal the uninterrupted run");

  fs::copy_file(a / kTrainLog, from_periodic / kTrainLog);
  TrainHooks periodic;
  periodic.resume = a / periodic_checkpoint_name(20);
  btmuda::train(cfg, data, from_periodic.path(), periodic);
  c.check(test::read_file(a / kFinalCheckpoint) == test::read_file(from_periodic / kFinalCheckpoint),
          "resume from the iteration-20 checkpoint: final checkpoint equal");
  return c.ok();
}

bool criterion_round_trips() {
  Criterion c;
  const TrainConfig cfg = short_run();
  const BenchmarkData data = short_data();
  test::TempDir dir;
  TrainConfig brief = cfg;
  brief.schedule.iter_total = 5;
  const auto params = btmuda::train(brief, data, dir.path());
  save_checkpoint(params, dir / "again.btmu");
  const auto loaded = load_checkpoint<float>(dir / "again.btmu");
  save_checkpoint(loaded, dir / "again2.btmu");
  c.check(loaded == params && test::read_file(dir / kFinalCheckpoint) == test::read_file(dir / "again.btmu") &&
              test::read_file(dir / "again.btmu") == test::read_file(dir / "again2.btmu"),
          "checkpoint save/load/save byte-identical");

  write_dataset(dir / "S1", data.sources[0], true);
  const Dataset back = load_dataset(dir / "S1", 32);
  float worst = 0;
  bool ids = back.size() == data.sources[0].size();
  for (std::size_t i = 0; ids && i < back.size(); ++i) {
    ids = back.samples[i].id == data.sources[0].samples[i].id && back.samples[i].label == data.sources[0].samples[i].label;
    worst = std::max(worst, (back.samples[i].image - data.sources[0].samples[i].image).cwiseAbs().maxCoeff());
  }
  c.check(ids && worst <= 1.0f / 255.0f, fmt("PNG round trip: max pixel error %.6f <= 1/255, ids and labels kept", worst));

  bool replay = true;
  for (const auto& r : evaluate_both(params, brief.effective_model(), *data.target_eval)) {
    write_predictions_csv(dir / "pred.csv", r.table);
    const MetricsReport again = report_from_table(read_predictions_csv(dir / "pred.csv"), r.mode);
    replay = replay && again.accuracy == r.accuracy && again.auc == r.auc && again.f1 == r.f1 && again.n == r.n;
  }
  c.check(replay, "metrics recomputed from the per-sample CSVs equal the reports exactly");
  return c.ok();
}

}  // namespace

int main(int argc, char** argv) {
  struct Entry {
    int number;
    const char* title;
    std::function<bool()> run;
  };
  const std::vector<Entry> all{
      {1, "gradient fidelity", criterion_gradients},
      {2, "loss-value oracles", criterion_oracles},
      {3, "structural invariants", criterion_invariants},
      {4, "oracle equivalences", criterion_equivalences},
      {5, "directional adaptation", criterion_adaptation},
      {6, "determinism and resume", criterion_determinism},
      {7, "round trips", criterion_round_trips},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  std::vector<std::pair<const Entry*, bool>> verdicts;
  for (const auto& e : all) {
    if (!only.empty() && only.count(e.number) == 0) continue;
    std::printf("criterion %d: %s\n", e.number, e.title);
    std::fflush(stdout);
    bool ok = false;
    try {
      ok = e.run();
    } catch (const std::exception& ex) {
      std::printf("    FAIL exception: %s\n", ex.what());
    }
    verdicts.emplace_back(&e, ok);
    std::printf("[%s] criterion %d: %s\n\n", ok ? "PASS" : "FAIL", e.number, e.title);
    std::fflush(stdout);
  }
  std::size_t passed = 0;
  for (const auto& v : verdicts) passed += v.second;
  std::printf("%zu of %zu criteria passed\n", passed, verdicts.size());
  return passed == verdicts.size() ? 0 : 1;
}
