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

#include <numeric>
#include <optional>
#include <vector>

#include "btmuda/model.hpp"
#include "btmuda/ops.hpp"

namespace btmuda {

// Non-overlapping P x P patches, one row per patch (grid row-major, pixels
// row-major inside the patch): (count * N) x P^2.
template <typename Scalar>
Matrix<Scalar> extract_patches(const ImageBatch<Scalar>& images, Index patch) {
  if (patch < 1 || images.height % patch != 0 || images.width % patch != 0)
    throw ContractViolation("extract_patches: patch size must divide the image size");
  const Index gy = images.height / patch, gx = images.width / patch;
  Matrix<Scalar> out(images.count * gy * gx, patch * patch);
  for (Index b = 0; b < images.count; ++b)
    for (Index py = 0; py < gy; ++py)
      for (Index px = 0; px < gx; ++px) {
        const Index row = (b * gy + py) * gx + px;
        for (Index y = 0; y < patch; ++y)
          for (Index x = 0; x < patch; ++x)
            out(row, y * patch + x) =
                images.pixels((b * images.height + py * patch + y) * images.width + px * patch + x, 0);
      }
  return out;
}

// Patch projection, class token at index 0, then positional embeddings.
// Returns count * (N + 1) rows of width d_model.
template <typename Scalar>
Var<Scalar> patch_embed(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const ImageBatch<Scalar>& images) {
  if (images.height != cfg.image_size || images.width != cfg.image_size)
    throw ContractViolation("patch_embed: images do not match the configured size");
  Tape<Scalar>& tape = p.tape();
  Var<Scalar> patches = tape.constant(extract_patches(images, cfg.vit.patch));
  Var<Scalar> tokens = linear(patches, p("vit/patch_embed/weight"), p("vit/patch_embed/bias"));
  tokens = prepend_token(tokens, p("vit/cls"), static_cast<Index>(cfg.tokens() - 1));
  return add_tiled_rows(tokens, p("vit/pos"));
}

template <typename Scalar>
struct Projections {
  Var<Scalar> q, k, v;
};

// Q, K and V maps of layer l; shared by every branch.
template <typename Scalar>
Projections<Scalar> project(const ParamBindings<Scalar>& p, int layer, const Var<Scalar>& h) {
  const std::string base = vit_layer_name(layer);
  return {linear(h, p(base + "/wq/weight"), p(base + "/wq/bias")), matmul(h, p(base + "/wk/weight")),
          linear(h, p(base + "/wv/weight"), p(base + "/wv/bias"))};
}

inline std::vector<Index> identity_map(Index n) {
  std::vector<Index> m(static_cast<std::size_t>(n));
  std::iota(m.begin(), m.end(), Index{0});
  return m;
}

// Multi-head attention from precomputed projections followed by the output map.
template <typename Scalar>
Var<Scalar> attend(const ParamBindings<Scalar>& p, const ModelConfig& cfg, int layer, const Var<Scalar>& q,
                   const Var<Scalar>& k, const Var<Scalar>& v, std::vector<Index> kv_of,
                   std::vector<Matrix<Scalar>>* weights_out = nullptr) {
  const std::string base = vit_layer_name(layer);
  Var<Scalar> heads = attention(q, k, v, cfg.vit.heads, cfg.tokens(), std::move(kv_of), weights_out);
  return linear(heads, p(base + "/wo/weight"), p(base + "/wo/bias"));
}

// softmax(Q K^T / sqrt(d_k)) V per sequence and head, then the output map.
template <typename Scalar>
Var<Scalar> self_attention(const ParamBindings<Scalar>& p, const ModelConfig& cfg, int layer, const Var<Scalar>& h,
                           std::vector<Matrix<Scalar>>* weights_out = nullptr) {
  const auto pr = project(p, layer, h);
  return attend(p, cfg, layer, pr.q, pr.k, pr.v, identity_map(h.rows() / cfg.tokens()), weights_out);
}

// Queries from `query_seq`, keys and values from `kv_seq` (sequence
// kv_of[s] for query sequence s), through the same maps as self_attention.
template <typename Scalar>
Var<Scalar> cross_attention(const ParamBindings<Scalar>& p, const ModelConfig& cfg, int layer, const Var<Scalar>& query_seq,
                            const Var<Scalar>& kv_seq, std::vector<Index> kv_of,
                            std::vector<Matrix<Scalar>>* weights_out = nullptr) {
  const auto q = project(p, layer, query_seq);
  const auto kv = project(p, layer, kv_seq);
  return attend(p, cfg, layer, q.q, kv.k, kv.v, std::move(kv_of), weights_out);
}

// Post-norm tail of a layer: x = LN1(pre); out = LN2(x + FFN(x)).
template <typename Scalar>
Var<Scalar> block_tail(const ParamBindings<Scalar>& p, const ModelConfig& cfg, int layer, const Var<Scalar>& pre) {
  const std::string base = vit_layer_name(layer);
  const Scalar eps = static_cast<Scalar>(cfg.norm_eps);
  Var<Scalar> x = layer_norm_rows(pre, p(base + "/norm1/gain"), p(base + "/norm1/bias"), eps);
  Var<Scalar> f = gelu(linear(x, p(base + "/ffn1/weight"), p(base + "/ffn1/bias")));
  f = linear(f, p(base + "/ffn2/weight"), p(base + "/ffn2/bias"));
  return layer_norm_rows(add(x, f), p(base + "/norm2/gain"), p(base + "/norm2/bias"), eps);
}

// Token sequences entering layer `layer` (1-based). `source` stacks the
// source sequences, `target` the target sequences; source sequence s is
// paired with target sequence kv_of[s]. `cross` is the source-target state
// H_l^{S-T}, absent before layer 2 and whenever the branch is disabled.
template <typename Scalar>
struct TriBranchState {
  int layer = 1;
  std::optional<Var<Scalar>> source;
  Var<Scalar> target;
  std::optional<Var<Scalar>> cross;
  std::vector<Index> kv_of;
};

// One shared-weight layer over all branches. The target branch reads only
// target tokens. The source-target branch sums the query-side residual
// H_l^S, the cross-attention output and (from layer 2 on) H_l^{S-T}.
template <typename Scalar>
TriBranchState<Scalar> layer_forward(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const TriBranchState<Scalar>& in) {
  const int l = in.layer;
  TriBranchState<Scalar> out;
  out.layer = l + 1;
  out.kv_of = in.kv_of;

  const auto pt = project(p, l, in.target);
  const Index target_seqs = in.target.rows() / cfg.tokens();
  out.target = block_tail(p, cfg, l, add(in.target, attend(p, cfg, l, pt.q, pt.k, pt.v, identity_map(target_seqs))));

  if (!in.source) return out;
  const auto ps = project(p, l, *in.source);
  const Index source_seqs = in.source->rows() / cfg.tokens();
  out.source = block_tail(p, cfg, l, add(*in.source, attend(p, cfg, l, ps.q, ps.k, ps.v, identity_map(source_seqs))));

  if (cfg.three_branch) {
    Var<Scalar> pre = add(*in.source, attend(p, cfg, l, ps.q, pt.k, pt.v, in.kv_of));
    if (l >= 2) {
      require(in.cross.has_value(), "layer_forward: source-target state missing at layer >= 2");
      pre = add(pre, *in.cross);
    }
    out.cross = block_tail(p, cfg, l, pre);
  }
  return out;
}

template <typename Scalar>
Var<Scalar> pool_tokens(const ModelConfig& cfg, const Var<Scalar>& h) {
  return cfg.vit.mean_pool ? group_mean_rows(h, cfg.tokens()) : strided_rows(h, cfg.tokens(), 0);
}

// Per-image representations after the last layer (count x d_model each).
template <typename Scalar>
struct TransformerFeatures {
  std::optional<Var<Scalar>> source;
  Var<Scalar> target;
  std::optional<Var<Scalar>> cross;
};

// Three-branch pass. `sources` may stack several source batches; source
// image i is paired with target image i % targets.count. The target branch
// is computed once regardless of how many source batches are stacked.
template <typename Scalar>
TransformerFeatures<Scalar> transformer_forward(const ParamBindings<Scalar>& p, const ModelConfig& cfg,
                                                const ImageBatch<Scalar>& sources, const ImageBatch<Scalar>& targets) {
  require(cfg.use_transformer, "transformer_forward: transformer path disabled");
  if (targets.count < 1 || sources.count % targets.count != 0)
    throw ContractViolation("transformer_forward: source count must be a multiple of the target count");
  TriBranchState<Scalar> state;
  state.target = patch_embed(p, cfg, targets);
  state.source = patch_embed(p, cfg, sources);
  state.kv_of.resize(static_cast<std::size_t>(sources.count));
  for (Index s = 0; s < sources.count; ++s) state.kv_of[static_cast<std::size_t>(s)] = s % targets.count;
  for (int l = 1; l <= cfg.vit.layers; ++l) state = layer_forward(p, cfg, state);

  TransformerFeatures<Scalar> f;
  f.target = pool_tokens(cfg, state.target);
  f.source = pool_tokens(cfg, *state.source);
  if (state.cross) f.cross = pool_tokens(cfg, *state.cross);
  return f;
}

// Target branch alone (inference path).
template <typename Scalar>
Var<Scalar> target_only_forward(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const ImageBatch<Scalar>& targets) {
  require(cfg.use_transformer, "target_only_forward: transformer path disabled");
  TriBranchState<Scalar> state;
  state.target = patch_embed(p, cfg, targets);
  for (int l = 1; l <= cfg.vit.layers; ++l) state = layer_forward(p, cfg, state);
  return pool_tokens(cfg, state.target);
}

}  // namespace btmuda
