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

#include "btmuda/model.hpp"
#include "btmuda/ops.hpp"

namespace btmuda {

// Local-feature path: stride-2 conv stages, each conv -> channel LayerNorm ->
// ReLU, plus a subsampled identity skip when the stage keeps its width;
// then global average pooling and an affine projection. Returns count x d_f.
template <typename Scalar>
Var<Scalar> cnn_forward(const ParamBindings<Scalar>& p, const ModelConfig& cfg, const ImageBatch<Scalar>& images) {
  require(cfg.use_cnn, "cnn_forward: CNN path disabled");
  if (images.height != cfg.image_size || images.width != cfg.image_size || images.pixels.cols() != 1 ||
      images.pixels.rows() != images.count * images.height * images.width)
    throw ContractViolation("cnn_forward: images do not match the configured size");
  Tape<Scalar>& tape = p.tape();
  const Scalar eps = static_cast<Scalar>(cfg.norm_eps);

  Var<Scalar> x = tape.constant(images.pixels);
  MapGeometry geom{images.count, images.height, images.width, 1};
  for (std::size_t i = 0; i < cfg.cnn.widths.size(); ++i) {
    const std::string base = cnn_stage_name(static_cast<int>(i) + 1);
    const Index width = cfg.cnn.widths[i];
    Var<Scalar> y = conv2d(x, geom, p(base + "/weight"), p(base + "/bias"), cfg.cnn.kernel, 2, 1);
    y = relu(layer_norm_rows(y, p(base + "/norm/gain"), p(base + "/norm/bias"), eps));
    if (width == geom.channels) y = add(y, subsample2d(x, geom, 2));
    geom = MapGeometry{geom.count, conv_out_extent(geom.height, cfg.cnn.kernel, 2, 1),
                       conv_out_extent(geom.width, cfg.cnn.kernel, 2, 1), width};
    x = y;
  }
  Var<Scalar> pooled = group_mean_rows(x, geom.height * geom.width);
  return linear(pooled, p("cnn/proj/weight"), p("cnn/proj/bias"));
}

}  // namespace btmuda
