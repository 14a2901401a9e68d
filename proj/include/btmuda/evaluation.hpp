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

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "btmuda/data.hpp"
#include "btmuda/network.hpp"

namespace btmuda {

///////////////////////////////////////////
// Metrics
///////////////////////////////////////////

// argmax over one probability row; ties go to class 0.
int decide(double p0, double p1);

// 100 * correct / total over argmax decisions of an n x 2 probability matrix.
double metric_accuracy(const Matrix<double>& probs, const std::vector<int>& labels);
double metric_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

// Mann-Whitney AUC with average ranks: the fraction of (positive, negative)
// pairs where the positive scores higher, ties counting one half.
double metric_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// F1 of class 1; 0 when precision + recall = 0.
double metric_f1(const std::vector<int>& predictions, const std::vector<int>& labels);

///////////////////////////////////////////
// Inference
///////////////////////////////////////////

enum class InferMode { Fusion, Average };

std::string mode_name(InferMode mode);
InferMode parse_mode(const std::string& name);

// Cached target-branch outputs for a set of images.
struct TargetOutputs {
  // Aligned features of every alignment module, flat order (n x align_dim each).
  std::vector<Matrix<float>> aligned;
  // Concatenated aligned features exactly as the fusion head consumes them.
  Matrix<float> fused_input;
  Matrix<double> fusion_probs;
  Matrix<double> average_probs;
};

// One extractor pass producing both inference modes. Images are processed
// in chunks of `chunk` in parallel; results are ordered like `images`.
TargetOutputs infer(const ParamStore<float>& params, const ModelConfig& cfg, const std::vector<const Image*>& images,
                    std::size_t chunk = 64);
TargetOutputs infer(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data, std::size_t chunk = 64);

// softmax(C^f(concat of all aligned features)).
Matrix<double> infer_fusion(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data);
// Mean of the source-specific classifiers' softmax outputs.
Matrix<double> infer_average(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data);

///////////////////////////////////////////
// Reports
///////////////////////////////////////////

struct Prediction {
  std::string id;
  double p_class1 = 0;
  int prediction = 0;
  std::optional<int> label;
};

struct MetricsReport {
  double accuracy = 0;  // percent
  double auc = 0;
  double f1 = 0;
  std::size_t n = 0;
  InferMode mode = InferMode::Fusion;
  std::vector<Prediction> table;
};

std::vector<Prediction> prediction_table(const Dataset& data, const Matrix<double>& probs);

// Metrics of a labelled prediction table; LabelsMissing when any label is absent.
MetricsReport report_from_table(std::vector<Prediction> table, InferMode mode);

// Reports for both modes from a single extractor pass.
std::array<MetricsReport, 2> evaluate_both(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data);
MetricsReport evaluate(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data, InferMode mode);

inline constexpr const char* kPredictionHeader = "id,p_class1,prediction,label";
inline constexpr const char* kReportHeader = "acc_percent,auc,f1,n,mode";

void write_predictions_csv(const std::filesystem::path& path, const std::vector<Prediction>& table);
std::vector<Prediction> read_predictions_csv(const std::filesystem::path& path);
void write_report_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports);
// Aligned text table of the reports.
std::string format_report(const std::vector<MetricsReport>& reports);

// id, domain, label (blank when absent), then every aligned feature in flat
// order: 3 + (paths * M * align_dim) columns. Returns the number of rows.
std::size_t export_features(const ParamStore<float>& params, const ModelConfig& cfg, const Dataset& data,
                            const std::filesystem::path& path);

}  // namespace btmuda
