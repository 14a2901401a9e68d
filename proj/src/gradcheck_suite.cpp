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

#include "btmuda/gradcheck_suite.hpp"

namespace btmuda {

ModelConfig tiny_model_config() {
  ModelConfig m;
  m.image_size = 4;
  m.num_sources = 2;
  m.align_dim = 4;
  m.cnn.widths = {4, 4};
  m.cnn.feature_dim = 6;
  m.vit.patch = 2;
  m.vit.d_model = 8;
  m.vit.heads = 2;
  m.vit.layers = 1;
  m.vit.ffn_hidden = 16;
  m.vit.mean_pool = true;
  return m;
}

TinyProblem make_tiny_problem(std::uint64_t seed, const KernelConfig& kernel) {
  TinyProblem t;
  t.model = tiny_model_config();
  t.preset = preset_by_name("exp10");
  t.kernel = kernel;
  t.params = init_params<double>(t.model, seed);

  Rng rng = make_rng(seed, {tag(Stream::Probe), 0x7e57});
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  const Index B = 2, side = t.model.image_size;
  auto images = [&] {
    ImageBatch<double> b{B, side, side, Matrix<double>(B * side * side, 1)};
    for (Index i = 0; i < b.pixels.size(); ++i) b.pixels(i, 0) = pixel(rng);
    return b;
  };
  for (int j = 0; j < t.model.num_sources; ++j) {
    t.batch.sources.push_back(images());
    t.batch.labels.push_back({j % 2, 1 - j % 2});
  }
  t.batch.target = images();

  Tape<double> tape;
  ParamBindings<double> p(tape, t.params);
  t.teacher = build_step(p, t.model, t.preset, t.kernel, t.batch).teacher_probs;
  // Mid-training weights so every term of the total carries a distinct scale.
  t.beta = 0.5 * std::exp(-0.65 * 0.25);
  t.lambda = 2.0 / (1.0 + std::exp(-5.0)) - 1.0;
  return t;
}

std::string parameter_group(const std::string& name) {
  if (name.rfind("cnn/", 0) == 0 || name.find("/1_") != std::string::npos) return "cnn";
  if (name.rfind("vit/", 0) == 0 || name.find("/2_") != std::string::npos || name.rfind("heads/distill", 0) == 0) return "transformer";
  return "fusion";
}

std::vector<GradCheckOutcome> run_gradcheck_suite(const GradCheckSettings& settings, std::uint64_t seed, const KernelConfig& kernel) {
  const TinyProblem t = make_tiny_problem(seed, kernel);
  GradCheckOptions opt;
  opt.step = settings.step;
  opt.sample = settings.sample;
  opt.seed = seed;
  opt.fault = settings.inject_fault;

  const std::vector<std::string> names = {"L_dtl", "L_con", "L_mmd", "L_rest", "L_cls", "total"};
  std::vector<GradCheckOutcome> out;
  for (std::size_t which = 0; which < names.size(); ++which) {
    Objective objective = [&t, which](const ParamBindings<double>& p) {
      StepGraph<double> g = build_step(p, t.model, t.preset, t.kernel, t.batch, &t.teacher);
      switch (which) {
        case 0: return g.dtl;
        case 1: return g.con;
        case 2: return g.mmd;
        case 3: return g.rest;
        case 4: return g.cls;
        default: return total_loss(g.dtl, g.con, g.mmd, g.rest, g.cls, 1.0, t.beta, t.lambda);
      }
    };
    GradCheckOutcome o;
    o.loss = names[which];
    o.report = grad_check(objective, t.params, opt);
    for (const auto& [name, err] : o.report.per_param) {
      double& slot = o.per_group[parameter_group(name)];
      slot = std::max(slot, err);
    }
    o.passed = o.report.max_rel_error <= settings.tolerance;
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace btmuda
