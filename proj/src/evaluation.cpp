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

#include "btmuda/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "btmuda/parallel.hpp"

namespace btmuda {

namespace fs = std::filesystem;

///////////////////////////////////////////
// Metrics
///////////////////////////////////////////

int decide(double p0, double p1) { return p1 > p0 ? 1 : 0; }

double metric_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.empty()) throw DataError("accuracy of an empty set");
  require(predictions.size() == labels.size(), "metric_accuracy: prediction/label count mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

double metric_accuracy(const Matrix<double>& probs, const std::vector<int>& labels) {
  require(probs.cols() == 2, "metric_accuracy: expected two classes");
  std::vector<int> pred(static_cast<std::size_t>(probs.rows()));
  for (Index i = 0; i < probs.rows(); ++i) pred[static_cast<std::size_t>(i)] = decide(probs(i, 0), probs(i, 1));
  return metric_accuracy(pred, labels);
}

double metric_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "metric_auc: score/label count mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of (average) ranks of the positives, doubled to stay integral.
  std::uint64_t twice_rank_sum = 0, positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_avg = i + 1 + j;  // 2 * mean of ranks i+1 .. j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == kPositiveClass) {
        twice_rank_sum += twice_avg;
        ++positives;
      }
    i = j;
  }
  const std::uint64_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw MetricUndefined("AUC needs both classes present");
  // U = rank_sum - P(P+1)/2, in halves.
  const std::uint64_t twice_u = twice_rank_sum - positives * (positives + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

double metric_f1(const std::vector<int>& predictions, const std::vector<int>& labels) {
  require(predictions.size() == labels.size(), "metric_f1: prediction/label count mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pp = predictions[i] == kPositiveClass, lp = labels[i] == kPositiveClass;
    tp += pp && lp;
    fp += pp && !lp;
    fn += !pp && lp;
  }
  const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

///////////////////////////////////////////
// Inference
///////////////////////////////////////////

std::string mode_name(InferMode mode) { return mode == InferMode::Fusion ? "fusion" : "average"; }

InferMode parse_mode(const std::string& name) {
  if (name == "fusion") return InferMode::Fusion;
  if (name == "average") return InferMode::Average;
  throw ConfigError("--mode must be 'fusion' or 'average' (got '" + name + "')");
}

TargetOutputs infer(const ParamStore<float>& params, const ModelConfig& cfg, const std::vector<const Image*>& images, std::size_t chunk) {
  cfg.validate();
  validate_layout(params, init_params<float>(cfg, 0));
  require(chunk > 0, "infer: chunk size must be positive");
  const Index n = static_cast<Index>(images.size());
  const Index side = cfg.image_size;
  const int slots = cfg.num_classifiers();

  TargetOutputs out;
  out.aligned.assign(static_cast<std::size_t>(slots), Matrix<float>(n, cfg.align_dim));
  out.fused_input.resize(n, static_cast<Index>(slots) * cfg.align_dim);
  out.fusion_probs.resize(n, cfg.num_classes);
  out.average_probs.resize(n, cfg.num_classes);

  const std::size_t chunks = (images.size() + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c) {
    const Index begin = static_cast<Index>(c * chunk);
    const Index count = std::min<Index>(static_cast<Index>(chunk), n - begin);
    ImageBatch<float> batch{count, side, side, Matrix<float>(count * side * side, 1)};
    for (Index i = 0; i < count; ++i) {
      const Image& img = *images[static_cast<std::size_t>(begin + i)];
      if (img.rows() != side || img.cols() != side) throw DataError("image size does not match model.image_size");
      batch.pixels.middleRows(i * side * side, side * side) = Eigen::Map<const Matrix<float>>(img.data(), side * side, 1);
    }
    Tape<float> tape;
    ParamBindings<float> p(tape, params);
    const auto aligned = aligned_target_features(p, cfg, batch);
    const Var<float> fused = fuse_predict(p, cfg, aligned);
    out.fusion_probs.middleRows(begin, count) = softmax_rows_value(fused.value()).cast<double>();
    out.fused_input.middleRows(begin, count) = concat_cols(aligned).value();

    Matrix<double> avg = Matrix<double>::Zero(count, cfg.num_classes);
    for (int k : cfg.paths())
      for (int j = 1; j <= cfg.num_sources; ++j) {
        const auto slot = static_cast<std::size_t>(cfg.flat_index(k, j));
        out.aligned[slot].middleRows(begin, count) = aligned[slot].value();
        avg += softmax_rows_value(classify(p, cfg, aligned[slot], k, j).value()).cast<double>();
      }
    out.average_probs.middleRows(begin, count) = avg / static_cast<double>(slots);
  });
  return out;
}

TargetOutputs infer(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data, std::size_t chunk) {
  std::vector<const Image*> images;
  for (const auto& s : data.samples) images.push_back(&s.image);
  return infer(params, cfg, images, chunk);
}

Matrix<double> infer_fusion(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data) {
  return infer(params, cfg, data).fusion_probs;
}

Matrix<double> infer_average(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data) {
  return infer(params, cfg, data).average_probs;
}

///////////////////////////////////////////
// Reports
///////////////////////////////////////////

std::vector<Prediction> prediction_table(const Dataset& data, const Matrix<double>& probs) {
  require(probs.rows() == static_cast<Index>(data.size()) && probs.cols() == 2, "prediction_table: probability shape mismatch");
  std::vector<Prediction> table;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto r = static_cast<Index>(i);
    table.push_back({data.samples[i].id, probs(r, 1), decide(probs(r, 0), probs(r, 1)), data.samples[i].label});
  }
  return table;
}

MetricsReport report_from_table(std::vector<Prediction> table, InferMode mode) {
  if (table.empty()) throw DataError("cannot evaluate an empty dataset");
  std::vector<int> pred, labels;
  std::vector<double> scores;
  for (const auto& row : table) {
    if (!row.label) throw LabelsMissing("evaluation split has no label for sample '" + row.id + "'");
    pred.push_back(row.prediction);
    labels.push_back(*row.label);
    scores.push_back(row.p_class1);
  }
  MetricsReport r;
  r.accuracy = metric_accuracy(pred, labels);
  r.auc = metric_auc(scores, labels);
  r.f1 = metric_f1(pred, labels);
  r.n = table.size();
  r.mode = mode;
  r.table = std::move(table);
  return r;
}

namespace {

void require_labels(const Dataset& data) {
  if (data.size() == 0) throw DataError("cannot evaluate an empty dataset");
  for (const auto& s : data.samples)
    if (!s.label) throw LabelsMissing("domain '" + data.domain + "' has no labels; evaluation needs a labelled split");
}

}  // namespace

std::array<MetricsReport, 2> evaluate_both(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data) {
  require_labels(data);
  const TargetOutputs out = infer(params, cfg, data);
  return {report_from_table(prediction_table(data, out.fusion_probs), InferMode::Fusion),
          report_from_table(prediction_table(data, out.average_probs), InferMode::Average)};
}

MetricsReport evaluate(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data, InferMode mode) {
  require_labels(data);
  const TargetOutputs out = infer(params, cfg, data);
  return report_from_table(prediction_table(data, mode == InferMode::Fusion ? out.fusion_probs : out.average_probs), mode);
}

void write_predictions_csv(const fs::path& path, const std::vector<Prediction>& table) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << kPredictionHeader << "\n";
  char buf[64];
  for (const auto& row : table) {
    std::snprintf(buf, sizeof buf, "%.17g", row.p_class1);
    os << row.id << "," << buf << "," << row.prediction << ",";
    if (row.label) os << *row.label;
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path.string());
}

std::vector<Prediction> read_predictions_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kPredictionHeader) throw DataError(path.string() + ": expected header '" + kPredictionHeader + "'");
  std::vector<Prediction> table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() == 3) cells.emplace_back();
    if (cells.size() != 4) throw DataError(path.string() + ": malformed row '" + line + "'");
    try {
      Prediction p{cells[0], std::stod(cells[1]), std::stoi(cells[2]), std::nullopt};
      if (!cells[3].empty()) p.label = std::stoi(cells[3]);
      table.push_back(std::move(p));
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ": malformed row '" + line + "'");
    }
  }
  return table;
}

void write_report_csv(const fs::path& path, const std::vector<MetricsReport>& reports) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << kReportHeader << "\n";
  char buf[160];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%zu,%s", r.accuracy, r.auc, r.f1, r.n, mode_name(r.mode).c_str());
    os << buf << "\n";
  }
  if (!os) throw IoError("write failed: " + path.string());
}

std::string format_report(const std::vector<MetricsReport>& reports) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %8s %8s %8s %8s\n", "mode", "ACC(%)", "AUC", "F1", "n");
  os << buf;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-8s %8.2f %8.4f %8.4f %8zu\n", mode_name(r.mode).c_str(), r.accuracy, r.auc, r.f1, r.n);
    os << buf;
  }
  return os.str();
}

std::size_t export_features(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data, const fs::path& path) {
  if (data.size() == 0) throw DataError("cannot export features of an empty dataset");
  const TargetOutputs out = infer(params, cfg, data);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "id,domain,label";
  for (int k : cfg.paths())
    for (int j = 1; j <= cfg.num_sources; ++j)
      for (int d = 0; d < cfg.align_dim; ++d) os << ",a" << k << "_" << j << "_" << d;
  os << "\n";
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.samples[i];
    os << s.id << "," << s.domain << ",";
    if (s.label) os << *s.label;
    for (Index c = 0; c < out.fused_input.cols(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(out.fused_input(static_cast<Index>(i), c)));
      os << buf;
    }
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path.string());
  return data.size();
}

}  // namespace btmuda
