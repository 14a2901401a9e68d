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

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "btmuda/data.hpp"
#include "btmuda/network.hpp"
#include "btmuda/optim.hpp"

namespace btmuda {

struct ScheduleConfig {
  double alpha = 1.0;
  double beta_max = 0.5;
  double delta = 0.65;
  double theta = 10.0;
  std::int64_t iter_total = 2000;

  void validate() const;
};

// beta_max * exp(-delta * (1 - e / iter_total)^2)
double beta_schedule(std::int64_t e, std::int64_t iter_total, double beta_max = 0.5, double delta = 0.65);

// 2 / (1 + exp(-theta * p)) - 1, rising from 0 towards 1.
double lambda_schedule(double p, double theta = 10.0);

struct TrainConfig {
  ModelConfig model;
  Preset preset = preset_by_name("exp10");
  ScheduleConfig schedule;
  OptimConfig optim;
  KernelConfig kernel;
  std::size_t batch_size = 16;
  AugmentFlags augment;
  std::uint64_t seed = 0;
  // Checkpoint interval in iterations; 0 writes only the final checkpoint.
  std::int64_t checkpoint_every = 500;

  // Model configuration with the preset's path switches applied.
  ModelConfig effective_model() const { return apply_preset(model, preset); }
  void validate() const;
};

// One row of the training log.
struct LogRow {
  std::int64_t iter = 0;
  LossBundle losses;
  double lr = 0;
};

inline constexpr const char* kLogHeader = "iter,L_dtl,L_con,L_mmd,L_rest,L_cls,alpha,beta,lambda,total,lr";

std::string format_log_row(const LogRow& row);
LogRow parse_log_row(const std::string& line);

// Augmented float batches for iteration `step`. Augmentation randomness
// depends only on (seed, step, domain, slot).
StepBatch<float> make_step_batch(const DomainBatches& batches, const TrainConfig& cfg, std::int64_t step);

// Forward pass, loss weighting for iteration e, backward pass and one SGD
// update. Throws NumericError naming the loss or gradient that went
// non-finite; params are untouched in that case.
LogRow train_step(ParamStore<float>& params, const TrainConfig& cfg, const StepBatch<float>& batch, std::int64_t e);

struct TrainHooks {
  // Resume from this checkpoint instead of initializing.
  std::optional<std::filesystem::path> resume;
  // Stop (with a checkpoint) once this many iterations are done.
  std::optional<std::int64_t> stop_after;
  std::function<void(const LogRow&)> on_step;
};

inline constexpr const char* kFinalCheckpoint = "checkpoint.btmu";
inline constexpr const char* kTrainLog = "train_log.csv";

std::string periodic_checkpoint_name(std::int64_t iteration);

// Runs iterations [start, iter_total) and writes <out>/checkpoint.btmu,
// periodic <out>/checkpoint_<iter>.btmu and <out>/train_log.csv. On resume
// the log is truncated to the rows before the checkpoint's iteration.
ParamStore<float> train(const TrainConfig& cfg, const BenchmarkData& data, const std::filesystem::path& out_dir,
                        const TrainHooks& hooks = {});

}  // namespace btmuda
