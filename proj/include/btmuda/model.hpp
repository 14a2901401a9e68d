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

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "btmuda/param_store.hpp"
#include "btmuda/rng.hpp"

namespace btmuda {

struct CnnConfig {
  std::vector<int> widths{16, 32, 64, 64};
  int kernel = 3;
  int feature_dim = 64;
};

struct TransformerConfig {
  int patch = 8;
  int d_model = 64;
  int heads = 4;
  int layers = 2;
  int ffn_hidden = 256;
  // Mean-pool the final tokens instead of reading the class token.
  bool mean_pool = false;
};

// Architecture of the whole network. The path flags and the distillation
// head follow the experiment preset; disabled parts own no parameters.
struct ModelConfig {
  int image_size = 32;
  int num_sources = 2;
  int num_classes = 2;
  int align_dim = 64;
  bool use_cnn = true;
  bool use_transformer = true;
  bool three_branch = true;
  double norm_eps = 1e-5;
  CnnConfig cnn;
  TransformerConfig vit;

  // Extractor paths in flat-index order: 1 = CNN, 2 = Transformer.
  std::vector<int> paths() const {
    std::vector<int> p;
    if (use_cnn) p.push_back(1);
    if (use_transformer) p.push_back(2);
    return p;
  }

  int num_classifiers() const { return static_cast<int>(paths().size()) * num_sources; }

  // 0-based position of classifier (k, j) among the enabled classifiers. With
  // both paths this is (k-1)*M + j - 1.
  int flat_index(int k, int j) const {
    const auto p = paths();
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] == k) {
        if (j < 1 || j > num_sources) break;
        return static_cast<int>(i) * num_sources + (j - 1);
      }
    throw ContractViolation("no classifier for path " + std::to_string(k) + ", source " + std::to_string(j));
  }

  int feature_dim(int k) const {
    if (k == 1) return cnn.feature_dim;
    if (k == 2) return vit.d_model;
    throw ContractViolation("unknown path " + std::to_string(k));
  }

  int tokens() const {
    const int side = image_size / vit.patch;
    return side * side + 1;
  }

  void validate() const {
    if (num_sources < 1) throw ConfigError("model.num_sources must be >= 1");
    if (num_classes != 2) throw ConfigError("model.num_classes must be 2");
    if (!use_cnn && !use_transformer) throw ConfigError("at least one extractor path must be enabled");
    if (align_dim < 1) throw ConfigError("model.align_dim must be positive");
    if (three_branch && !use_transformer) throw ConfigError("three-branch mode requires the transformer path");
    if (use_cnn) {
      if (cnn.widths.size() < 2) throw ConfigError("model.cnn.widths needs at least 2 stages");
      if (cnn.kernel != 3) throw ConfigError("model.cnn.kernel must be 3");
      for (int w : cnn.widths)
        if (w < 1) throw ConfigError("model.cnn.widths entries must be positive");
      int side = image_size;
      for (std::size_t i = 0; i < cnn.widths.size(); ++i) side = (side + 2 - 3) / 2 + 1;
      if (side < 1) throw ConfigError("model.cnn: spatial size vanishes after all stages");
      if (cnn.feature_dim < 1) throw ConfigError("model.cnn.feature_dim must be positive");
    }
    if (use_transformer) {
      if (vit.patch < 1 || image_size % vit.patch != 0) throw ConfigError("model.vit.patch must divide the image size");
      if (vit.heads < 1 || vit.d_model % vit.heads != 0) throw ConfigError("model.vit.heads must divide model.vit.d_model");
      if (vit.layers < 1) throw ConfigError("model.vit.layers must be >= 1");
      if (vit.ffn_hidden < 1) throw ConfigError("model.vit.ffn_hidden must be positive");
    }
  }
};

// Classifier (k, j) in the 1-based flat numbering (k-1)*M + j used when all
// 2M classifiers are present.
inline int classifier_number(int k, int j, int num_sources) { return (k - 1) * num_sources + j; }

///////////////////////////////////////////
// Parameter layout
///////////////////////////////////////////

enum class InitKind { FanIn, Small, Ones };

struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  InitKind init = InitKind::Small;
  int fan_in = 1;
};

inline std::string align_name(int k, int j) { return "heads/align/" + std::to_string(k) + "_" + std::to_string(j); }
inline std::string classifier_name(int k, int j) { return "heads/cls/" + std::to_string(k) + "_" + std::to_string(j); }
inline std::string vit_layer_name(int l) { return "vit/layer" + std::to_string(l); }
inline std::string cnn_stage_name(int i) { return "cnn/stage" + std::to_string(i); }

inline std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  auto affine = [&out](const std::string& base, int in, int outw) {
    out.push_back({base + "/weight", in, outw, InitKind::FanIn, in});
    out.push_back({base + "/bias", 1, outw, InitKind::Small, 1});
  };
  auto norm = [&out](const std::string& base, int width) {
    out.push_back({base + "/gain", 1, width, InitKind::Ones, 1});
    out.push_back({base + "/bias", 1, width, InitKind::Small, 1});
  };

  if (cfg.use_cnn) {
    int in = 1;
    for (std::size_t i = 0; i < cfg.cnn.widths.size(); ++i) {
      const int w = cfg.cnn.widths[i];
      const std::string base = cnn_stage_name(static_cast<int>(i) + 1);
      affine(base, cfg.cnn.kernel * cfg.cnn.kernel * in, w);
      norm(base + "/norm", w);
      in = w;
    }
    affine("cnn/proj", in, cfg.cnn.feature_dim);
  }
  if (cfg.use_transformer) {
    const int d = cfg.vit.d_model;
    affine("vit/patch_embed", cfg.vit.patch * cfg.vit.patch, d);
    out.push_back({"vit/pos", cfg.tokens(), d, InitKind::Small, 1});
    out.push_back({"vit/cls", 1, d, InitKind::Small, 1});
    for (int l = 1; l <= cfg.vit.layers; ++l) {
      const std::string base = vit_layer_name(l);
      affine(base + "/wq", d, d);
      // Keys carry no bias: it would shift every score of a query equally,
      // which the softmax cancels.
      out.push_back({base + "/wk/weight", d, d, InitKind::FanIn, d});
      affine(base + "/wv", d, d);
      affine(base + "/wo", d, d);
      affine(base + "/ffn1", d, cfg.vit.ffn_hidden);
      affine(base + "/ffn2", cfg.vit.ffn_hidden, d);
      norm(base + "/norm1", d);
      norm(base + "/norm2", d);
    }
  }
  for (int k : cfg.paths())
    for (int j = 1; j <= cfg.num_sources; ++j) affine(align_name(k, j), cfg.feature_dim(k), cfg.align_dim);
  for (int k : cfg.paths())
    for (int j = 1; j <= cfg.num_sources; ++j) affine(classifier_name(k, j), cfg.align_dim, cfg.num_classes);
  if (cfg.three_branch) affine("heads/distill", cfg.vit.d_model, cfg.num_classes);
  affine("heads/fusion", cfg.num_classifiers() * cfg.align_dim, cfg.num_classes);
  return out;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Standard deviation of N(0, 1) truncated to [-2, 2].
inline constexpr double kTruncatedStd = 0.8796256610342398;

}  // namespace detail

// Fan-in weights: N(0, 1) truncated at +-2 and rescaled to std 1/sqrt(fan_in).
// Biases, positional embeddings and the class token: N(0, 0.02^2).
// Normalization gains: 1.
template <typename Scalar>
ParamStore<Scalar> init_params(const std::vector<ParamSpec>& layout, std::uint64_t seed) {
  ParamStore<Scalar> store;
  for (const auto& spec : layout) {
    Rng rng = make_rng(seed, {tag(Stream::Init), detail::fnv1a(spec.name)});
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix<Scalar> m(spec.rows, spec.cols);
    for (Index i = 0; i < m.size(); ++i) {
      double v = 0;
      switch (spec.init) {
        case InitKind::FanIn: {
          double z;
          do z = normal(rng);
          while (std::abs(z) > 2.0);
          v = z / detail::kTruncatedStd / std::sqrt(static_cast<double>(spec.fan_in));
          break;
        }
        case InitKind::Small:
          v = 0.02 * normal(rng);
          break;
        case InitKind::Ones:
          v = 1.0;
          break;
      }
      m.data()[i] = static_cast<Scalar>(v);
    }
    store.add(spec.name, std::move(m));
  }
  return store;
}

template <typename Scalar>
ParamStore<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  return init_params<Scalar>(parameter_layout(cfg), seed);
}

///////////////////////////////////////////
// Image batches
///////////////////////////////////////////

// `count` single-channel images stacked as one NHWC column (one row per pixel).
template <typename Scalar>
struct ImageBatch {
  Index count = 0;
  Index height = 0;
  Index width = 0;
  Matrix<Scalar> pixels;

  Index pixels_per_image() const { return height * width; }
};

}  // namespace btmuda
