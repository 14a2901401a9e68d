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

#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"

#include "btmuda/training.hpp"
#include "support.hpp"

using namespace btmuda;
namespace fs = std::filesystem;

namespace {

TrainConfig small_train_config(const std::string& preset = "exp10") {
  TrainConfig cfg;
  cfg.preset = preset_by_name(preset);
  ModelConfig& m = cfg.model;
  m.image_size = 16;
  m.align_dim = 8;
  m.cnn.widths = {4, 8};
  m.cnn.feature_dim = 8;
  m.vit.patch = 4;
  m.vit.d_model = 8;
  m.vit.heads = 2;
  m.vit.layers = 2;
  m.vit.ffn_hidden = 16;
  cfg.batch_size = 4;
  cfg.schedule.iter_total = 6;
  cfg.checkpoint_every = 2;
  cfg.seed = 3;
  return cfg;
}

BenchmarkData small_data() {
  SynthConfig s;
  s.samples_per_domain = 12;
  s.eval_samples = 12;
  s.image_size = 16;
  return make_synthetic_benchmark(s);
}

std::vector<std::string> lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

StepBatch<float> first_batch(const TrainConfig& cfg, const BenchmarkData& data) {
  BatchSource src(data.sources, data.target, cfg.batch_size, cfg.seed);
  return make_step_batch(src.sample(0), cfg, 0);
}

}  // namespace

TEST_CASE("schedules") {
  // 0.5 exp(-0.65)
  CHECK(std::abs(beta_schedule(0, 2000) - 0.26102288838050802) <= 1e-6);
  CHECK(beta_schedule(2000, 2000) == 0.5);
  CHECK(lambda_schedule(0.0) == 0.0);
  // 2 / (1 + exp(-10)) - 1
  CHECK(std::abs(lambda_schedule(1.0) - 0.99990920426259513) <= 1e-6);
  double prev = -1;
  for (int e = 0; e <= 2000; e += 100) {
    const double b = beta_schedule(e, 2000);
    CHECK(b > prev);
    prev = b;
  }
}

TEST_CASE("preset table") {
  CHECK(all_presets().size() == 10);
  const Preset& six = preset_by_name("exp6");
  CHECK_FALSE(six.use_mmd);
  CHECK_FALSE(six.use_rest);
  CHECK_FALSE(six.use_three_branch);
  CHECK_FALSE(six.use_con);
  const Preset& ten = preset_by_name("exp10");
  CHECK(ten.use_mmd);
  CHECK(ten.use_con);
  CHECK_THROWS_AS(preset_by_name("exp11"), ConfigError);
}

TEST_CASE("train_step") {
  const BenchmarkData data = small_data();

  SUBCASE("source-only preset zeroes every adaptation loss") {
    const TrainConfig cfg = small_train_config("exp6");
    auto params = init_params<float>(cfg.effective_model(), cfg.seed);
    const LogRow row = train_step(params, cfg, first_batch(cfg, data), 0);
    CHECK(row.losses.dtl == 0.0);
    CHECK(row.losses.con == 0.0);
    CHECK(row.losses.mmd == 0.0);
    CHECK(row.losses.rest == 0.0);
    CHECK(row.losses.cls > 0.0);
    CHECK_FALSE(params.contains("heads/distill/weight"));
  }
  SUBCASE("full preset activates every loss") {
    const TrainConfig cfg = small_train_config("exp10");
    auto params = init_params<float>(cfg.effective_model(), cfg.seed);
    const LogRow row = train_step(params, cfg, first_batch(cfg, data), 0);
    CHECK(row.losses.dtl > 0.0);
    CHECK(row.losses.con > 0.0);
    CHECK(row.losses.mmd > 0.0);
    CHECK(row.losses.rest > 0.0);
    CHECK(row.losses.cls > 0.0);
  }
  SUBCASE("identical calls give identical parameters") {
    const TrainConfig cfg = small_train_config();
    auto a = init_params<float>(cfg.effective_model(), cfg.seed);
    auto b = a;
    const auto batch = first_batch(cfg, data);
    train_step(a, cfg, batch, 0);
    train_step(b, cfg, batch, 0);
    CHECK(a == b);
  }
  SUBCASE("with alpha at zero the distillation head only decays") {
    TrainConfig cfg = small_train_config("exp10");
    cfg.schedule.alpha = 0;
    auto params = init_params<float>(cfg.effective_model(), cfg.seed);
    const Matrix<float> before = params.value("heads/distill/weight");
    train_step(params, cfg, first_batch(cfg, data), 0);
    const float lr = static_cast<float>(annealed_learning_rate(cfg.optim, 0.0));
    const Matrix<float> decayed = before - lr * static_cast<float>(cfg.optim.weight_decay) * before;
    CHECK((params.value("heads/distill/weight") - decayed).cwiseAbs().maxCoeff() < 1e-7f);
  }
  SUBCASE("one step on a fixed batch lowers the classification loss") {
    TrainConfig cfg = small_train_config("exp6");
    cfg.optim.learning_rate = 0.05;
    cfg.augment = AugmentFlags::none();
    auto params = init_params<float>(cfg.effective_model(), cfg.seed);
    const auto batch = first_batch(cfg, data);
    const double before = train_step(params, cfg, batch, 0).losses.cls;
    const double after = train_step(params, cfg, batch, 1).losses.cls;
    CHECK(after < before);
  }
  SUBCASE("target labels never reach a batch") {
    const TrainConfig cfg = small_train_config();
    BenchmarkData labelled = data;
    labelled.target = *data.target_eval;
    BatchSource src(labelled.sources, labelled.target, cfg.batch_size, cfg.seed);
    for (int step = 0; step < 5; ++step)
      for (const auto& s : src.sample(step).target) CHECK_FALSE(s.label.has_value());
  }
  SUBCASE("overflow aborts and names the failing stage") {
    const TrainConfig cfg = small_train_config("exp10");
    auto params = init_params<float>(cfg.effective_model(), cfg.seed);
    params.value("heads/cls/1_1/weight").setConstant(std::numeric_limits<float>::max());
    const auto before = params;
    CHECK_THROWS_WITH_AS(train_step(params, cfg, first_batch(cfg, data), 0), doctest::Contains("predictions"), NumericError);
    CHECK(params == before);
  }
}

TEST_CASE("train") {
  const BenchmarkData data = small_data();
  const TrainConfig cfg = small_train_config();

  SUBCASE("log rows, weighting identity and periodic checkpoints") {
    test::TempDir dir;
    const auto params = train(cfg, data, dir.path());
    const auto rows = lines(dir / kTrainLog);
    REQUIRE(rows.size() == 7);
    CHECK(rows[0] == kLogHeader);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const LogRow r = parse_log_row(rows[i]);
      CHECK(r.iter == static_cast<std::int64_t>(i - 1));
      const LossBundle& b = r.losses;
      CHECK(std::abs(b.total - (b.alpha * b.dtl + b.beta * b.con + b.lambda * (b.mmd + b.rest) + b.cls)) <= 1e-6);
      CHECK(b.beta == beta_schedule(r.iter, 6));
      CHECK(b.lambda == lambda_schedule(r.iter / 6.0));
    }
    CHECK(fs::exists(dir / "checkpoint_2.btmu"));
    CHECK(fs::exists(dir / "checkpoint_4.btmu"));
    CHECK_FALSE(fs::exists(dir / "checkpoint_6.btmu"));
    CHECK(load_checkpoint<float>(dir / kFinalCheckpoint) == params);
    CHECK(params.iteration == 6);
  }
  SUBCASE("zero iterations keep the initialization") {
    TrainConfig zero = cfg;
    zero.schedule.iter_total = 0;
    test::TempDir dir;
    const auto params = train(zero, data, dir.path());
    auto init = init_params<float>(zero.effective_model(), zero.seed);
    CHECK(lines(dir / kTrainLog).size() == 1);
    for (std::size_t i = 0; i < init.size(); ++i)
      CHECK(test::bit_equal(params.entries()[i].value, init.entries()[i].value));
  }
  SUBCASE("deterministic reruns and bit-exact resume") {
    test::TempDir a, b, c;
    train(cfg, data, a.path());
    train(cfg, data, b.path());
    CHECK(test::read_file(a / kTrainLog) == test::read_file(b / kTrainLog));
    CHECK(test::read_file(a / kFinalCheckpoint) == test::read_file(b / kFinalCheckpoint));

    TrainHooks stop;
    stop.stop_after = 3;
    train(cfg, data, c.path(), stop);
    CHECK(lines(c / kTrainLog).size() == 4);
    TrainHooks resume;
    resume.resume = c / kFinalCheckpoint;
    train(cfg, data, c.path(), resume);
    CHECK(test::read_file(a / kTrainLog) == test::read_file(c / kTrainLog));
    CHECK(test::read_file(a / kFinalCheckpoint) == test::read_file(c / kFinalCheckpoint));

    TrainHooks from_periodic;
    from_periodic.resume = a / "checkpoint_4.btmu";
    test::TempDir d;
    fs::copy_file(a / kTrainLog, d / kTrainLog);
    train(cfg, data, d.path(), from_periodic);
    CHECK(test::read_file(a / kFinalCheckpoint) == test::read_file(d / kFinalCheckpoint));
  }
  SUBCASE("resume rejects a checkpoint of another model") {
    test::TempDir a;
    train(cfg, data, a.path());
    TrainConfig other = cfg;
    other.model.align_dim = 4;
    TrainHooks resume;
    resume.resume = a / kFinalCheckpoint;
    CHECK_THROWS_AS(train(other, data, a.path(), resume), ConfigError);
  }
  SUBCASE("data and config errors surface before the first step") {
    test::TempDir dir;
    TrainConfig wrong = cfg;
    wrong.model.num_sources = 3;
    CHECK_THROWS_AS(train(wrong, data, dir.path()), ConfigError);
    TrainConfig big = cfg;
    big.batch_size = 64;
    CHECK_THROWS_AS(train(big, data, dir.path()), DataError);
    CHECK_FALSE(fs::exists(dir / kTrainLog));
  }
}

TEST_CASE("log rows round-trip") {
  LogRow r;
  r.iter = 42;
  r.losses.dtl = 0.1;
  r.losses.cls = 0.5;
  r.losses.total = 1.23456789012345678;
  r.lr = 1.6e-4;
  const LogRow back = parse_log_row(format_log_row(r));
  CHECK(back.iter == 42);
  CHECK(back.losses.total == r.losses.total);
  CHECK(back.lr == r.lr);
  CHECK_THROWS_AS(parse_log_row("1,2,3"), DataError);
}
