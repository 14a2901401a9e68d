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

// btmuda command-line driver.
//
// Exit codes: 0 ok, 1 internal error, 2 config, 3 I/O or data, 4 numeric,
// 5 evaluation labels missing, 6 gradient check failed.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"

#include "btmuda/config.hpp"
#include "btmuda/evaluation.hpp"
#include "btmuda/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace btmuda;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kIo = 3, kNumeric = 4, kLabels = 5, kGradCheck = 6 };

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) return parse_run_config(nlohmann::json::object());
  return load_run_config(path);
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// The run's effective configuration, stored beside a checkpoint.
RunConfig checkpoint_config(const std::string& explicit_path, const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  if (!explicit_path.empty()) return load_run_config(explicit_path);
  const fs::path beside = ckpt.parent_path() / kEffectiveConfig;
  if (!fs::exists(beside)) throw ConfigError("no " + std::string(kEffectiveConfig) + " beside " + ckpt.string() + "; pass --config");
  return load_run_config(beside);
}

ParamStore<float> load_model(const fs::path& ckpt, const ModelConfig& model) {
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  ParamStore<float> params = load_checkpoint<float>(ckpt);
  validate_layout(params, init_params<float>(model, 0));
  return params;
}

// A domain directory (containing images/) or a benchmark root, in which case
// the labelled target split T_eval is preferred over T.
Dataset load_eval_data(const fs::path& path, int image_size) {
  if (!fs::exists(path)) throw IoError("data path not found: " + path.string());
  if (fs::is_directory(path / "images")) return load_dataset(path, image_size);
  if (fs::is_directory(path / "T_eval")) return load_dataset(path / "T_eval", image_size);
  if (fs::is_directory(path / "T")) return load_dataset(path / "T", image_size);
  throw DataError(path.string() + " is neither a domain directory nor a benchmark root");
}

int cmd_gen_synth(const std::string& config_path, const fs::path& out) {
  RunConfig cfg = config_or_default(config_path);
  if (!cfg.synthetic) throw ConfigError("gen-synth needs a data.synthetic section");
  make_dir(out);
  write_synthetic_benchmark(*cfg.synthetic, out);
  cfg.output_dir = out.string();
  write_run_config(cfg, out / kEffectiveConfig);
  std::cout << "wrote " << cfg.synthetic->num_sources << " source domains, T and T_eval to " << out << "\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& data, const fs::path& out, const std::string& resume,
              bool deterministic) {
  RunConfig cfg = config_or_default(config_path);
  if (deterministic) cfg.deterministic = true;
  if (!data.empty()) {
    cfg.synthetic.reset();
    cfg.data_dir = data;
  }
  cfg.output_dir = out.string();
  cfg.validate();

  BenchmarkData bench;
  if (cfg.data_dir) {
    if (!fs::is_directory(*cfg.data_dir)) throw IoError("data directory not found: " + *cfg.data_dir);
    bench = load_benchmark(*cfg.data_dir, cfg.train.model.num_sources, cfg.train.model.image_size);
  } else {
    bench = make_synthetic_benchmark(*cfg.synthetic);
  }
  make_dir(out);
  write_run_config(cfg, out / kEffectiveConfig);

  TrainHooks hooks;
  if (!resume.empty()) hooks.resume = resume;
  const auto t0 = std::chrono::steady_clock::now();
  hooks.on_step = [&](const LogRow& r) {
    if ((r.iter + 1) % 100 != 0 && r.iter + 1 != cfg.train.schedule.iter_total) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("iter %6lld  total %.4f  dtl %.4f  con %.4f  mmd %.4f  rest %.4f  cls %.4f  lr %.2e  (%.0fs)\n",
                static_cast<long long>(r.iter + 1), r.losses.total, r.losses.dtl, r.losses.con, r.losses.mmd, r.losses.rest,
                r.losses.cls, r.lr, secs);
    std::fflush(stdout);
  };
  train(cfg.train, bench, out, hooks);
  std::cout << "checkpoint: " << (out / kFinalCheckpoint).string() << "\nlog: " << (out / kTrainLog).string() << "\n";
  return kOk;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, const std::string& mode, const fs::path& report, const std::string& config_path) {
  const RunConfig cfg = checkpoint_config(config_path, ckpt);
  const ModelConfig model = cfg.train.effective_model();
  const ParamStore<float> params = load_model(ckpt, model);
  const Dataset ds = load_eval_data(data, model.image_size);

  std::vector<MetricsReport> reports;
  if (mode == "both") {
    const auto both = evaluate_both(params, model, ds);
    reports.assign(both.begin(), both.end());
  } else {
    reports.push_back(evaluate(params, model, ds, parse_mode(mode)));
  }
  if (!report.parent_path().empty()) make_dir(report.parent_path());
  write_report_csv(report, reports);
  for (const auto& r : reports) {
    fs::path table = report;
    table.replace_filename(report.stem().string() + "_" + mode_name(r.mode) + "_predictions.csv");
    write_predictions_csv(table, r.table);
  }
  std::cout << format_report(reports);
  return kOk;
}

int cmd_gradcheck(const std::string& config_path) {
  const RunConfig cfg = config_or_default(config_path);
  const auto t0 = std::chrono::steady_clock::now();
  const auto outcomes = run_gradcheck_suite(cfg.gradcheck, cfg.train.seed, cfg.train.kernel);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::printf("%-7s %12s %12s %12s %12s  %s\n", "loss", "max_rel_err", "cnn", "transformer", "fusion", "result");
  const GradCheckOutcome* worst = nullptr;
  for (const auto& o : outcomes) {
    auto group = [&o](const char* g) {
      auto it = o.per_group.find(g);
      return it == o.per_group.end() ? 0.0 : it->second;
    };
    std::printf("%-7s %12.3e %12.3e %12.3e %12.3e  %s\n", o.loss.c_str(), o.report.max_rel_error, group("cnn"), group("transformer"),
                group("fusion"), o.passed ? "pass" : "FAIL");
    if (!o.passed && (worst == nullptr || o.report.max_rel_error > worst->report.max_rel_error)) worst = &o;
  }
  std::printf("checked %zu elements per loss, tolerance %.1e, %.1fs\n", outcomes.front().report.checked, cfg.gradcheck.tolerance, secs);
  if (worst != nullptr) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "gradient check failed: %s, worst parameter %s[%lld] (analytic %.6e, numeric %.6e)", worst->loss.c_str(),
                  worst->report.worst_param.c_str(), static_cast<long long>(worst->report.worst_element), worst->report.worst_analytic,
                  worst->report.worst_numeric);
    throw GradCheckFailed(buf);
  }
  return kOk;
}

int cmd_export(const fs::path& ckpt, const fs::path& data, const fs::path& out, const std::string& config_path) {
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  const RunConfig cfg = checkpoint_config(config_path, ckpt);
  const ModelConfig model = cfg.train.effective_model();
  const ParamStore<float> params = load_model(ckpt, model);
  if (!fs::exists(data)) throw IoError("data path not found: " + data.string());
  const Dataset ds = fs::is_directory(data / "images") ? load_dataset(data, model.image_size) : load_eval_data(data, model.image_size);
  if (!out.parent_path().empty()) make_dir(out.parent_path());
  const std::size_t rows = export_features(params, model, ds, out);
  std::cout << "wrote " << rows << " rows to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-source unsupervised domain adaptation with a CNN and a three-branch transformer"};
  app.require_subcommand(1);

  std::string config, out, data, ckpt, mode = "fusion", report, resume;
  bool deterministic = false;

  auto* gen = app.add_subcommand("gen-synth", "Generate the synthetic multi-domain benchmark");
  gen->add_option("--config", config, "Run configuration (JSON)");
  gen->add_option("--out", out, "Output root")->required();

  auto* tr = app.add_subcommand("train", "Train one experiment preset");
  tr->add_option("--config", config, "Run configuration (JSON)");
  tr->add_option("--data", data, "Benchmark root with S1..SM and T (default: the config's data section)");
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_option("--resume", resume, "Continue from this checkpoint");
  tr->add_flag("--deterministic", deterministic, "Require bit-reproducible execution");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a labelled target split");
  ev->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  ev->add_option("--data", data, "Domain directory or benchmark root")->required();
  ev->add_option("--mode", mode, "fusion, average or both")->check(CLI::IsMember({"fusion", "average", "both"}));
  ev->add_option("--report", report, "Report CSV path")->required();
  ev->add_option("--config", config, "Run configuration (default: config.json beside the checkpoint)");

  auto* gc = app.add_subcommand("gradcheck", "Check analytic gradients of every loss on a tiny 64-bit model");
  gc->add_option("--config", config, "Run configuration (JSON)");

  auto* ex = app.add_subcommand("export-features", "Write aligned features of a dataset as CSV");
  ex->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  ex->add_option("--data", data, "Domain directory or benchmark root")->required();
  ex->add_option("--out", out, "Output CSV")->required();
  ex->add_option("--config", config, "Run configuration (default: config.json beside the checkpoint)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_synth(config, out);
    if (*tr) return cmd_train(config, data, out, resume, deterministic);
    if (*ev) return cmd_eval(ckpt, data, mode, report, config);
    if (*gc) return cmd_gradcheck(config);
    if (*ex) return cmd_export(ckpt, data, out, config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const LabelsMissing& e) {
    std::cerr << "labels missing: " << e.what() << "\n";
    return kLabels;
  } catch (const MetricUndefined& e) {
    std::cerr << "metric undefined: " << e.what() << "\n";
    return kLabels;
  } catch (const GradCheckFailed& e) {
    std::cerr << e.what() << "\n";
    return kGradCheck;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
