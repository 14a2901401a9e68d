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

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "btmuda/training.hpp"

namespace btmuda {

struct GradCheckSettings {
  double step = 1e-5;
  double tolerance = 1e-4;
  // 0 probes every parameter element.
  std::size_t sample = 0;
  // Test fixture: corrupt a backward rule to exercise the failure path.
  Fault inject_fault = Fault::None;
};

// Everything one command needs, resolved against defaults. Every key of the
// JSON document is optional; unknown keys are errors.
struct RunConfig {
  TrainConfig train;
  // Exactly one data source: a synthetic benchmark or a directory.
  std::optional<SynthConfig> synthetic;
  std::optional<std::string> data_dir;
  bool deterministic = true;
  std::string output_dir;
  GradCheckSettings gradcheck;

  void validate() const;
};

// Throws ConfigError naming the offending key path (e.g. data.synthetic.s_inter).
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const RunConfig& cfg);
void write_run_config(const RunConfig& cfg, const std::filesystem::path& path);

inline constexpr const char* kEffectiveConfig = "config.json";

}  // namespace btmuda
