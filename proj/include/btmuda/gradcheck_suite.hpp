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

#include <map>
#include <string>
#include <vector>

#include "btmuda/config.hpp"
#include "btmuda/grad_check.hpp"

namespace btmuda {

// d_model 8, one layer, 4x4 images, M = 2, every component enabled.
ModelConfig tiny_model_config();

struct TinyProblem {
  ModelConfig model;
  Preset preset;
  KernelConfig kernel;
  ParamStore<double> params;
  StepBatch<double> batch;
  // Teacher distributions at the initial point, held fixed.
  std::vector<Matrix<double>> teacher;
  double beta = 0;
  double lambda = 0;
};

// Batch of 2 per domain drawn from random images; deterministic in seed.
TinyProblem make_tiny_problem(std::uint64_t seed, const KernelConfig& kernel = {});

struct GradCheckOutcome {
  std::string loss;  // L_dtl, L_con, L_mmd, L_rest, L_cls or total
  GradCheckReport report;
  // Max relative error per parameter group (cnn, transformer, fusion).
  std::map<std::string, double> per_group;
  bool passed = false;
};

std::string parameter_group(const std::string& name);

std::vector<GradCheckOutcome> run_gradcheck_suite(const GradCheckSettings& settings, std::uint64_t seed, const KernelConfig& kernel = {});

}  // namespace btmuda
