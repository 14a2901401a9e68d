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
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "btmuda/tensor.hpp"

#include "btmuda/rng.hpp"

namespace btmuda {

// Single-channel image, pixels in [0, 1].
using Image = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Class 1 (annulus) is the "positive" class for every metric.
inline constexpr int kNumClasses = 2;
inline constexpr int kPositiveClass = 1;

struct LabeledSample {
  std::string id;
  std::string domain;
  Image image;
  std::optional<int> label;
};

struct Dataset {
  std::string domain;
  std::vector<LabeledSample> samples;

  std::size_t size() const { return samples.size(); }
  bool labelled() const;
};

///////////////////////////////////////////
// Synthetic benchmark
///////////////////////////////////////////

struct Style {
  double gain = 0.6;      // foreground contrast
  double bias = 0.15;     // background level
  double texture = 0.0;   // amplitude of the background grating
  double blur = 0.0;      // Gaussian blur sigma in pixels
};

enum class DomainRole { Source, Target };

struct DomainSpec {
  std::string id;
  DomainRole role = DomainRole::Source;
  int index = 0;  // 1..M for sources, 0 for the target
  Style style;
  double texture_angle = 0.0;      // radians
  double texture_frequency = 3.0;  // cycles per image width
};

struct SynthConfig {
  int num_sources = 2;
  int samples_per_domain = 1000;
  int eval_samples = 1000;
  int image_size = 32;
  double s_inter = 0.7;
  double s_intra = 0.5;
  double label_balance = 0.5;  // fraction of class-1 samples
  double pixel_noise = 0.03;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Style of sources S1..SM and the target T, shifted away from a shared base
// style in proportion to s_inter.
std::vector<DomainSpec> domain_specs(const SynthConfig& cfg);

enum class Split : std::uint64_t { Train = 0, Eval = 1 };

// Disc (class 0) or annulus (class 1) images in the domain's style, with
// per-sample style jitter proportional to s_intra. Sample i depends only on
// (seed, domain, split, i); the class counts match label_balance exactly.
// count = 0 means cfg.samples_per_domain (cfg.eval_samples for Split::Eval).
Dataset gen_domain(const SynthConfig& cfg, const DomainSpec& spec, Split split = Split::Train, std::size_t count = 0);

///////////////////////////////////////////
// Batches
///////////////////////////////////////////

// Shuffled-epoch index stream over n samples: position t of the stream is
// element t % n of the permutation for epoch t / n. Stateless given
// (n, seed, stream), so any step can be replayed independently.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream);

  std::vector<std::size_t> batch(std::int64_t step, std::size_t batch_size) const;

 private:
  const std::vector<std::size_t>& permutation(std::int64_t epoch) const;

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t stream_;
  mutable std::unordered_map<std::int64_t, std::vector<std::size_t>> cache_;
};

struct DomainBatches {
  std::vector<std::vector<LabeledSample>> sources;
  std::vector<LabeledSample> target;  // labels always stripped
};

// One equal-size batch per source plus one target batch for a given step.
class BatchSource {
 public:
  BatchSource(const std::vector<Dataset>& sources, const Dataset& target, std::size_t batch_size, std::uint64_t seed);

  DomainBatches sample(std::int64_t step) const;
  std::size_t batch_size() const { return batch_size_; }

 private:
  const std::vector<Dataset>* sources_;
  const Dataset* target_;
  std::size_t batch_size_;
  std::vector<EpochSampler> samplers_;
};

///////////////////////////////////////////
// Augmentation
///////////////////////////////////////////

struct AugmentFlags {
  bool flip = true;
  bool rotate = true;
  bool crop = true;
  bool color = true;

  static AugmentFlags none() { return {false, false, false, false}; }
  bool any() const { return flip || rotate || crop || color; }
};

Image flip_horizontal(const Image& img);
// Bilinear rotation about the centre; samples outside the image clamp to the edge.
Image rotate(const Image& img, double degrees);
// Square crop covering `area` of the image at fractional offset (fx, fy) in
// [0, 1], resized back to the original size.
Image resized_crop(const Image& img, double area, double fx, double fy);
Image adjust_brightness(const Image& img, double delta);
Image adjust_contrast(const Image& img, double factor);
Image resize_bilinear(const Image& img, int height, int width);

// Random flip (p = 0.5), rotation in +-15 degrees, resized crop (area 0.8-1),
// brightness and contrast jitter of +-0.2; output clipped to [0, 1]. Hue
// jitter has no effect on single-channel images. Identity when every flag is
// off.
LabeledSample augment(const LabeledSample& sample, Rng& rng, const AugmentFlags& flags);

///////////////////////////////////////////
// On-disk datasets
///////////////////////////////////////////
//
// <root>/<domain>/images/*.png (8-bit grayscale) and
// <root>/<domain>/labels.csv with header "filename,label". labels.csv is
// optional for unlabelled target splits.

void write_png_gray(const std::filesystem::path& path, const Image& img);
Image read_png_gray(const std::filesystem::path& path);

void write_dataset(const std::filesystem::path& domain_dir, const Dataset& data, bool with_labels);

// Loads one domain directory, converting to grayscale, resizing to
// image_size x image_size and scaling to [0, 1].
Dataset load_dataset(const std::filesystem::path& domain_dir, int image_size);

// Generates S1..SM, T (unlabelled) and T_eval (labelled) under root and
// writes manifest.json with the configuration and every domain's style.
void write_synthetic_benchmark(const SynthConfig& cfg, const std::filesystem::path& root);

struct BenchmarkData {
  std::vector<Dataset> sources;
  Dataset target;
  std::optional<Dataset> target_eval;
};

// In-memory equivalent of write_synthetic_benchmark.
BenchmarkData make_synthetic_benchmark(const SynthConfig& cfg);

// Reads S1..SM and T (and T_eval when present) from a benchmark root.
BenchmarkData load_benchmark(const std::filesystem::path& root, int num_sources, int image_size);

}  // namespace btmuda
