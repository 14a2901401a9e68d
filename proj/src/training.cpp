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

#include "btmuda/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace btmuda {

namespace fs = std::filesystem;

void ScheduleConfig::validate() const {
  if (!(alpha >= 0)) throw ConfigError("schedule.alpha must be >= 0");
  if (!(beta_max > 0)) throw ConfigError("schedule.beta_max must be positive");
  if (!(delta >= 0)) throw ConfigError("schedule.delta must be >= 0");
  if (!(theta > 0)) throw ConfigError("schedule.theta must be positive");
  if (iter_total < 0) throw ConfigError("schedule.iter_total must be >= 0");
}

double beta_schedule(std::int64_t e, std::int64_t iter_total, double beta_max, double delta) {
  require(iter_total > 0 && e >= 0 && e <= iter_total, "beta_schedule: e must lie in [0, iter_total]");
  const double r = 1.0 - static_cast<double>(e) / static_cast<double>(iter_total);
  return beta_max * std::exp(-delta * r * r);
}

double lambda_schedule(double p, double theta) {
  require(p >= 0 && p <= 1, "lambda_schedule: progress must lie in [0, 1]");
  return 2.0 / (1.0 + std::exp(-theta * p)) - 1.0;
}

void TrainConfig::validate() const {
  model.validate();
  effective_model().validate();
  schedule.validate();
  optim.validate();
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (kernel.scales.empty()) throw ConfigError("mmd.scales must not be empty");
  for (double s : kernel.scales)
    if (!(s > 0)) throw ConfigError("mmd.scales entries must be positive");
  if (kernel.fixed_bandwidth && !(*kernel.fixed_bandwidth > 0)) throw ConfigError("mmd.bandwidth must be positive");
  if (preset.use_con && !(preset.use_cnn && preset.use_transformer)) throw ConfigError("preset " + preset.name + ": L_con needs both paths");
}

std::string format_log_row(const LogRow& row) {
  const LossBundle& b = row.losses;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", static_cast<long long>(row.iter),
                b.dtl, b.con, b.mmd, b.rest, b.cls, b.alpha, b.beta, b.lambda, b.total, row.lr);
  return buf;
}

LogRow parse_log_row(const std::string& line) {
  std::istringstream in(line);
  std::string cell;
  std::vector<std::string> cells;
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (cells.size() != 11) throw DataError("training log row has " + std::to_string(cells.size()) + " columns, expected 11");
  try {
    LogRow r;
    r.iter = std::stoll(cells[0]);
    LossBundle& b = r.losses;
    double* fields[] = {&b.dtl, &b.con, &b.mmd, &b.rest, &b.cls, &b.alpha, &b.beta, &b.lambda, &b.total, &r.lr};
    for (std::size_t i = 0; i < 10; ++i) *fields[i] = std::stod(cells[i + 1]);
    return r;
  } catch (const std::logic_error&) {
    throw DataError("training log row is not numeric: " + line);
  }
}

namespace {

ImageBatch<float> to_batch(const std::vector<LabeledSample>& samples, const TrainConfig& cfg, std::int64_t step, std::uint64_t domain) {
  const Index side = cfg.model.image_size;
  ImageBatch<float> b{static_cast<Index>(samples.size()), side, side, Matrix<float>(static_cast<Index>(samples.size()) * side * side, 1)};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng = make_rng(cfg.seed, {tag(Stream::Augment), static_cast<std::uint64_t>(step), domain, i});
    const LabeledSample s = augment(samples[i], rng, cfg.augment);
    if (s.image.rows() != side || s.image.cols() != side)
      throw DataError("sample '" + s.id + "' is " + std::to_string(s.image.rows()) + "x" + std::to_string(s.image.cols()) +
                      ", model expects " + std::to_string(side));
    b.pixels.middleRows(static_cast<Index>(i) * side * side, side * side) =
        Eigen::Map<const Matrix<float>>(s.image.data(), side * side, 1);
  }
  return b;
}

}  // namespace

StepBatch<float> make_step_batch(const DomainBatches& batches, const TrainConfig& cfg, std::int64_t step) {
  StepBatch<float> out;
  for (std::size_t j = 0; j < batches.sources.size(); ++j) {
    out.sources.push_back(to_batch(batches.sources[j], cfg, step, j + 1));
    auto& labels = out.labels.emplace_back();
    for (const auto& s : batches.sources[j]) {
      if (!s.label) throw DataError("source sample '" + s.id + "' has no label");
      labels.push_back(*s.label);
    }
  }
  out.target = to_batch(batches.target, cfg, step, 0);
  return out;
}

LogRow train_step(ParamStore<float>& params, const TrainConfig& cfg, const StepBatch<float>& batch, std::int64_t e) {
  const std::int64_t T = cfg.schedule.iter_total;
  require(T > 0 && e >= 0 && e < T, "train_step: iteration out of range");
  const ModelConfig model = cfg.effective_model();
  const double progress = static_cast<double>(e) / static_cast<double>(T);

  LogRow row;
  row.iter = e;
  LossBundle& b = row.losses;
  b.alpha = cfg.schedule.alpha;
  b.beta = beta_schedule(e, T, cfg.schedule.beta_max, cfg.schedule.delta);
  b.lambda = lambda_schedule(progress, cfg.schedule.theta);
  row.lr = annealed_learning_rate(cfg.optim, progress);

  Tape<float> tape;
  ParamBindings<float> p(tape, params);
  StepGraph<float> g = build_step(p, model, cfg.preset, cfg.kernel, batch);
  b.dtl = g.dtl.item();
  b.con = g.con.item();
  b.mmd = g.mmd.item();
  b.rest = g.rest.item();
  b.cls = g.cls.item();
  b.total = total_loss(b, b.alpha, b.beta, b.lambda);

  Var<float> total = total_loss(g.dtl, g.con, g.mmd, g.rest, g.cls, b.alpha, b.beta, b.lambda);
  tape.backward(total);
  const auto grads = p.gradients(params);
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].allFinite()) throw NumericError("non-finite gradient for " + params.entries()[i].name + " at iteration " + std::to_string(e));
  sgd_step(params, grads, e, T, cfg.optim);
  return row;
}

std::string periodic_checkpoint_name(std::int64_t iteration) { return "checkpoint_" + std::to_string(iteration) + ".btmu"; }

namespace {

void check_data(const TrainConfig& cfg, const BenchmarkData& data) {
  if (static_cast<int>(data.sources.size()) != cfg.model.num_sources)
    throw ConfigError("model.num_sources is " + std::to_string(cfg.model.num_sources) + " but the data has " +
                      std::to_string(data.sources.size()) + " source domains");
  auto check = [&](const Dataset& d) {
    for (const auto& s : d.samples)
      if (s.image.rows() != cfg.model.image_size || s.image.cols() != cfg.model.image_size)
        throw DataError("domain '" + d.domain + "': image size does not match model.image_size");
  };
  for (const auto& d : data.sources) check(d);
  check(data.target);
}

// Rows of an existing log strictly before `start`; throws when rows are missing.
std::vector<std::string> kept_log_rows(const fs::path& path, std::int64_t start) {
  std::vector<std::string> rows;
  if (start == 0) return rows;
  std::ifstream in(path);
  if (!in) throw IoError("cannot resume: training log " + path.string() + " not found");
  std::string line;
  std::getline(in, line);
  if (line != kLogHeader) throw DataError(path.string() + ": unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (parse_log_row(line).iter < start) rows.push_back(line);
  }
  if (static_cast<std::int64_t>(rows.size()) != start)
    throw DataError(path.string() + ": expected " + std::to_string(start) + " rows before the resume point, found " +
                    std::to_string(rows.size()));
  return rows;
}

}  // namespace

ParamStore<float> train(const TrainConfig& cfg, const BenchmarkData& data, const fs::path& out_dir, const TrainHooks& hooks) {
  cfg.validate();
  check_data(cfg, data);
  const ModelConfig model = cfg.effective_model();
  const std::int64_t T = cfg.schedule.iter_total;

  ParamStore<float> params = init_params<float>(model, cfg.seed);
  params.iter_total = T;
  if (hooks.resume) {
    ParamStore<float> loaded = load_checkpoint<float>(*hooks.resume);
    validate_layout(loaded, params);
    if (loaded.iter_total != T)
      throw ConfigError("checkpoint was trained for iter_total " + std::to_string(loaded.iter_total) + ", config says " + std::to_string(T));
    params = std::move(loaded);
  }
  const std::int64_t start = params.iteration;
  if (start < 0 || start > T) throw ConfigError("checkpoint iteration " + std::to_string(start) + " outside [0, iter_total]");

  const BatchSource source(data.sources, data.target, cfg.batch_size, cfg.seed);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const fs::path log_path = out_dir / kTrainLog;
  const auto kept = kept_log_rows(log_path, start);
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  log << kLogHeader << "\n";
  for (const auto& r : kept) log << r << "\n";

  for (std::int64_t e = start; e < T; ++e) {
    if (hooks.stop_after && e >= *hooks.stop_after) break;
    const StepBatch<float> batch = make_step_batch(source.sample(e), cfg, e);
    const LogRow row = train_step(params, cfg, batch, e);
    log << format_log_row(row) << "\n";
    if (!log) throw IoError("write failed: " + log_path.string());
    if (hooks.on_step) hooks.on_step(row);
    if (cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0 && e + 1 < T)
      save_checkpoint(params, out_dir / periodic_checkpoint_name(e + 1));
  }
  log.close();
  save_checkpoint(params, out_dir / kFinalCheckpoint);
  return params;
}

}  // namespace btmuda
