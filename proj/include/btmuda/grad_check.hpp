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

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "btmuda/param_store.hpp"
#include "btmuda/rng.hpp"

namespace btmuda {

struct GradCheckOptions {
  double step = 1e-5;
  // 0 checks every element; otherwise a random subsample of
  // max(sample, 200) elements.
  std::size_t sample = 0;
  std::uint64_t seed = 0;
  Fault fault = Fault::None;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  Index worst_element = -1;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::size_t checked = 0;
  // Max relative error per parameter name.
  std::map<std::string, double> per_param;
};

// Scalar-valued computation of the bound parameters.
using Objective = std::function<Var<double>(const ParamBindings<double>&)>;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

// Compares reverse-mode gradients against central differences
// (f(x+h) - f(x-h)) / 2h. Throws ContractViolation when two evaluations at
// the same point disagree.
inline GradCheckReport grad_check(const Objective& objective, ParamStore<double> params, const GradCheckOptions& opt = {}) {
  auto evaluate = [&](const ParamStore<double>& at) {
    Tape<double> tape;
    tape.set_fault(opt.fault);
    ParamBindings<double> p(tape, at);
    return objective(p).item();
  };

  std::vector<Matrix<double>> analytic;
  double base = 0;
  {
    Tape<double> tape;
    tape.set_fault(opt.fault);
    ParamBindings<double> p(tape, params);
    Var<double> root = objective(p);
    base = root.item();
    tape.backward(root);
    analytic = p.gradients(params);
  }
  const double again = evaluate(params);
  if (std::memcmp(&base, &again, sizeof(double)) != 0)
    throw ContractViolation("grad_check: objective is not deterministic (" + std::to_string(base) + " vs " + std::to_string(again) + ")");

  // (entry, element) coordinates to probe.
  std::vector<std::pair<std::size_t, Index>> probes;
  for (std::size_t e = 0; e < params.size(); ++e)
    for (Index i = 0; i < params.entries()[e].value.size(); ++i) probes.emplace_back(e, i);
  if (opt.sample > 0) {
    const std::size_t want = std::max<std::size_t>(opt.sample, 200);
    if (want < probes.size()) {
      Rng rng = make_rng(opt.seed, {tag(Stream::Probe)});
      std::shuffle(probes.begin(), probes.end(), rng);
      probes.resize(want);
      std::sort(probes.begin(), probes.end());
    }
  }

  GradCheckReport report;
  for (const auto& [e, i] : probes) {
    auto& entry = params.entries()[e];
    double& x = entry.value.data()[i];
    const double saved = x;
    x = saved + opt.step;
    const double up = evaluate(params);
    x = saved - opt.step;
    const double down = evaluate(params);
    x = saved;
    const double numeric = (up - down) / (2 * opt.step);
    const double a = analytic[e].data()[i];
    const double err = relative_error(a, numeric);
    auto& slot = report.per_param[entry.name];
    slot = std::max(slot, err);
    ++report.checked;
    if (report.worst_param.empty() || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_param = entry.name;
      report.worst_element = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace btmuda
