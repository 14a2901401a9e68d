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

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "json.hpp"

#include "btmuda/data.hpp"
#include "btmuda/losses.hpp"
#include "support.hpp"

using namespace btmuda;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config(int samples = 64) {
  SynthConfig cfg;
  cfg.samples_per_domain = samples;
  cfg.eval_samples = samples;
  return cfg;
}

bool same_images(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.samples[i].id != b.samples[i].id || a.samples[i].label != b.samples[i].label ||
        !test::bit_equal(Matrix<float>(a.samples[i].image), Matrix<float>(b.samples[i].image)))
      return false;
  return true;
}

double mean_intensity(const Dataset& d) {
  double s = 0;
  for (const auto& x : d.samples) s += x.image.cast<double>().mean();
  return s / static_cast<double>(d.size());
}

Matrix<double> flatten(const Dataset& d) {
  Matrix<double> m(static_cast<Index>(d.size()), d.samples.front().image.size());
  for (std::size_t i = 0; i < d.size(); ++i)
    m.row(static_cast<Index>(i)) = Eigen::Map<const RowVector<float>>(d.samples[i].image.data(), d.samples[i].image.size()).cast<double>();
  return m;
}

}  // namespace

TEST_CASE("gen_domain") {
  const SynthConfig cfg = small_config(1000);
  const auto specs = domain_specs(cfg);
  REQUIRE(specs.size() == 3);
  CHECK(specs[0].id == "S1");
  CHECK(specs[2].id == "T");
  CHECK(specs[2].role == DomainRole::Target);

  const Dataset a = gen_domain(cfg, specs[0]);
  SUBCASE("deterministic") { CHECK(same_images(a, gen_domain(cfg, specs[0]))); }
  SUBCASE("exact class balance") {
    int ones = 0;
    for (const auto& s : a.samples) ones += *s.label;
    CHECK(a.size() == 1000);
    CHECK(ones == 500);
  }
  SUBCASE("pixels lie in [0, 1] at the configured size") {
    for (const auto& s : a.samples) {
      CHECK(s.image.rows() == 32);
      CHECK(s.image.minCoeff() >= 0.0f);
      CHECK(s.image.maxCoeff() <= 1.0f);
    }
  }
  SUBCASE("independent of the worker count") {
    ::setenv("BTMUDA_THREADS", "1", 1);
    const Dataset serial = gen_domain(cfg, specs[0]);
    ::setenv("BTMUDA_THREADS", "3", 1);
    const Dataset threaded = gen_domain(cfg, specs[0]);
    ::unsetenv("BTMUDA_THREADS");
    CHECK(same_images(serial, threaded));
  }
  SUBCASE("train and eval splits differ") { CHECK_FALSE(same_images(a, gen_domain(cfg, specs[0], Split::Eval))); }
}

TEST_CASE("without shifts every domain has the same mean intensity") {
  SynthConfig cfg = small_config(10000);
  cfg.s_inter = 0;
  cfg.s_intra = 0;
  std::vector<double> means;
  for (const auto& spec : domain_specs(cfg)) means.push_back(mean_intensity(gen_domain(cfg, spec)));
  for (double m : means) CHECK(std::abs(m - means.front()) <= 0.01);
}

TEST_CASE("inter-domain MMD grows with s_inter") {
  KernelConfig kernel;
  std::vector<double> mmd;
  for (double s : {0.0, 0.5, 1.0}) {
    SynthConfig cfg = small_config(1000);
    cfg.s_inter = s;
    const auto specs = domain_specs(cfg);
    Tape<double> tape;
    mmd.push_back(mmd_squared(tape.constant(flatten(gen_domain(cfg, specs[0]))), tape.constant(flatten(gen_domain(cfg, specs[1]))), kernel).item());
  }
  CHECK(mmd[0] < mmd[1]);
  CHECK(mmd[1] < mmd[2]);
}

TEST_CASE("SynthConfig validation names the field") {
  SynthConfig cfg;
  cfg.s_inter = 2.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("s_inter"), ConfigError);
  cfg = SynthConfig{};
  cfg.image_size = 8;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("image_size"), ConfigError);
}

TEST_CASE("batch sampling") {
  const SynthConfig cfg = small_config(16);
  const auto specs = domain_specs(cfg);
  const std::vector<Dataset> sources{gen_domain(cfg, specs[0]), gen_domain(cfg, specs[1])};
  const Dataset target = gen_domain(cfg, specs[2]);

  SUBCASE("one batch per source plus a label-free target batch") {
    BatchSource src(sources, target, 8, 1);
    const DomainBatches b = src.sample(0);
    REQUIRE(b.sources.size() == 2);
    CHECK(b.sources[0].size() == 8);
    CHECK(b.sources[1].size() == 8);
    CHECK(b.target.size() == 8);
    for (const auto& s : b.target) CHECK_FALSE(s.label.has_value());
    for (const auto& s : b.sources[0]) CHECK(s.label.has_value());
  }
  SUBCASE("two epochs visit each sample exactly twice") {
    EpochSampler sampler(16, 3, 1);
    std::map<std::size_t, int> seen;
    for (int step = 0; step < 4; ++step)
      for (std::size_t i : sampler.batch(step, 8)) ++seen[i];
    CHECK(seen.size() == 16);
    for (const auto& [i, n] : seen) CHECK(n == 2);
  }
  SUBCASE("replaying a step gives the same batch") {
    EpochSampler a(16, 3, 1), b(16, 3, 1);
    a.batch(0, 8);
    a.batch(5, 8);
    CHECK(a.batch(3, 8) == b.batch(3, 8));
  }
  SUBCASE("empty and undersized domains") {
    CHECK_THROWS_AS(EpochSampler(0, 0, 0), DataError);
    Dataset empty;
    CHECK_THROWS_AS(BatchSource(sources, empty, 8, 0), DataError);
    CHECK_THROWS_AS(BatchSource(sources, target, 32, 0), DataError);
  }
}

TEST_CASE("augmentation") {
  const SynthConfig cfg = small_config(4);
  const Dataset d = gen_domain(cfg, domain_specs(cfg)[0]);
  const LabeledSample& s = d.samples[1];

  SUBCASE("all flags off is the identity") {
    Rng rng(1);
    const LabeledSample out = augment(s, rng, AugmentFlags::none());
    CHECK(test::bit_equal(Matrix<float>(out.image), Matrix<float>(s.image)));
  }
  SUBCASE("flip is an involution") {
    CHECK(test::bit_equal(Matrix<float>(flip_horizontal(flip_horizontal(s.image))), Matrix<float>(s.image)));
  }
  SUBCASE("brightness shifts every pixel") {
    const Image half = Image::Constant(8, 8, 0.5f);
    CHECK((adjust_brightness(half, 0.2).array() - 0.7f).abs().maxCoeff() < 1e-6f);
  }
  SUBCASE("label and domain are preserved; pixels stay in range") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const LabeledSample out = augment(s, rng, AugmentFlags{});
      CHECK(out.label == s.label);
      CHECK(out.domain == s.domain);
      CHECK(out.id == s.id);
      CHECK(out.image.minCoeff() >= 0.0f);
      CHECK(out.image.maxCoeff() <= 1.0f);
    }
  }
  SUBCASE("zero rotation and a full crop keep the image") {
    CHECK((rotate(s.image, 0.0) - s.image).cwiseAbs().maxCoeff() < 1e-6f);
    CHECK((resized_crop(s.image, 1.0, 0.5, 0.5) - s.image).cwiseAbs().maxCoeff() < 1e-6f);
  }
}

TEST_CASE("PNG datasets") {
  test::TempDir dir;
  const SynthConfig cfg = small_config(12);
  const Dataset d = gen_domain(cfg, domain_specs(cfg)[0]);

  SUBCASE("round trip within one quantization step") {
    write_dataset(dir / "S1", d, true);
    const Dataset back = load_dataset(dir / "S1", 32);
    REQUIRE(back.size() == d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
      CHECK(back.samples[i].id == d.samples[i].id);
      CHECK(back.samples[i].label == d.samples[i].label);
      CHECK((back.samples[i].image - d.samples[i].image).cwiseAbs().maxCoeff() <= 1.0f / 255.0f);
    }
  }
  SUBCASE("no labels.csv gives unlabelled samples") {
    write_dataset(dir / "T", d, false);
    const Dataset back = load_dataset(dir / "T", 32);
    CHECK(back.size() == d.size());
    for (const auto& s : back.samples) CHECK_FALSE(s.label.has_value());
    CHECK_FALSE(back.labelled());
  }
  SUBCASE("images are resized on load") {
    write_dataset(dir / "S1", d, true);
    CHECK(load_dataset(dir / "S1", 16).samples[0].image.rows() == 16);
  }
  SUBCASE("empty directory") {
    fs::create_directories(dir / "E" / "images");
    CHECK_THROWS_AS(load_dataset(dir / "E", 32), DataError);
    CHECK_THROWS_AS(load_dataset(dir / "missing", 32), DataError);
  }
  SUBCASE("label outside {0, 1}") {
    write_dataset(dir / "S1", d, true);
    std::ofstream(dir / "S1" / "labels.csv") << "filename,label\n" << d.samples[0].id << ".png,2\n";
    CHECK_THROWS_WITH_AS(load_dataset(dir / "S1", 32), doctest::Contains("not 0 or 1"), DataError);
  }
  SUBCASE("corrupt PNG names the file") {
    write_dataset(dir / "S1", d, true);
    std::ofstream(dir / "S1" / "images" / (d.samples[3].id + ".png"), std::ios::trunc) << "not a png";
    CHECK_THROWS_WITH_AS(load_dataset(dir / "S1", 32), doctest::Contains(d.samples[3].id.c_str()), DataError);
  }
}

TEST_CASE("synthetic benchmark on disk") {
  test::TempDir a, b;
  const SynthConfig cfg = small_config(8);
  write_synthetic_benchmark(cfg, a.path());
  write_synthetic_benchmark(cfg, b.path());
  for (const char* sub : {"S1", "S2", "T", "T_eval"}) CHECK(fs::is_directory(a / sub));
  CHECK_FALSE(fs::exists(a / "T" / "labels.csv"));

  std::set<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(a.path()))
    if (e.is_regular_file()) {
      const auto rel = fs::relative(e.path(), a.path());
      files.insert(rel.string());
      CHECK(test::read_file(e.path()) == test::read_file(b.path() / rel));
    }
  CHECK(files.count("manifest.json") == 1);

  std::ifstream in(a / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  CHECK(manifest["synthetic"]["s_inter"].get<double>() == cfg.s_inter);
  CHECK(manifest["domains"].size() == 3);

  const BenchmarkData loaded = load_benchmark(a.path(), 2, 32);
  CHECK(loaded.sources.size() == 2);
  CHECK_FALSE(loaded.target.labelled());
  REQUIRE(loaded.target_eval.has_value());
  CHECK(loaded.target_eval->labelled());
}
