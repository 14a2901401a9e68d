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

#include "btmuda/config.hpp"

#include <fstream>
#include <set>
#include <type_traits>

namespace btmuda {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// One JSON object of the schema; remembers which keys were consumed so the
// rest can be rejected.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError((path_.empty() ? std::string("config") : path_) + " must be a JSON object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void read(const char* key, T& out) {
    const json* v = find(key);
    if (v == nullptr) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer()) fail(key, "an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v->is_number_unsigned()) {
          out = v->get<T>();
        } else {
          if (v->get<std::int64_t>() < 0) fail(key, "a non-negative integer");
          out = static_cast<T>(v->get<std::int64_t>());
        }
      } else {
        out = v->get<T>();
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v->is_array()) fail(key, "an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) fail(key, "an array of integers");
        out.push_back(e.get<int>());
      }
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v->is_array()) fail(key, "an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) fail(key, "an array of numbers");
        out.push_back(e.get<double>());
      }
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  void read_optional(const char* key, std::optional<double>& out) {
    const json* v = find(key);
    if (v == nullptr) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    if (!v->is_number()) fail(key, "a number or null");
    out = v->get<double>();
  }

  std::optional<Section> child(const char* key) {
    const json* v = find(key);
    if (v == nullptr) return std::nullopt;
    return Section(*v, key_path(key));
  }

  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (seen_.count(k) == 0) throw ConfigError("unknown config key '" + key_path(k) + "'");
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ConfigError(key_path(key) + " must be " + expected);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_model(Section& s, ModelConfig& m) {
  s.read("image_size", m.image_size);
  s.read("num_sources", m.num_sources);
  s.read("num_classes", m.num_classes);
  s.read("align_dim", m.align_dim);
  s.read("norm_eps", m.norm_eps);
  if (auto c = s.child("cnn")) {
    c->read("widths", m.cnn.widths);
    c->read("kernel", m.cnn.kernel);
    c->read("feature_dim", m.cnn.feature_dim);
    c->finish();
  }
  if (auto v = s.child("vit")) {
    v->read("patch", m.vit.patch);
    v->read("d_model", m.vit.d_model);
    v->read("heads", m.vit.heads);
    v->read("layers", m.vit.layers);
    v->read("ffn_hidden", m.vit.ffn_hidden);
    v->read("mean_pool", m.vit.mean_pool);
    v->finish();
  }
  s.finish();
}

void read_synthetic(Section& s, SynthConfig& c) {
  s.read("num_sources", c.num_sources);
  s.read("samples_per_domain", c.samples_per_domain);
  s.read("eval_samples", c.eval_samples);
  s.read("image_size", c.image_size);
  s.read("s_inter", c.s_inter);
  s.read("s_intra", c.s_intra);
  s.read("label_balance", c.label_balance);
  s.read("pixel_noise", c.pixel_noise);
  s.read("seed", c.seed);
  s.finish();
}

std::string fault_name(Fault f) { return f == Fault::GeluBackward ? "gelu_backward" : "none"; }

Fault parse_fault(const std::string& name) {
  if (name == "none") return Fault::None;
  if (name == "gelu_backward") return Fault::GeluBackward;
  throw ConfigError("gradcheck.inject_fault must be 'none' or 'gelu_backward'");
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  if (synthetic && data_dir) throw ConfigError("data: give either 'synthetic' or 'directory', not both");
  if (synthetic) {
    synthetic->validate();
    if (synthetic->num_sources != train.model.num_sources)
      throw ConfigError("data.synthetic.num_sources (" + std::to_string(synthetic->num_sources) + ") must equal model.num_sources (" +
                        std::to_string(train.model.num_sources) + ")");
    if (synthetic->image_size != train.model.image_size)
      throw ConfigError("data.synthetic.image_size must equal model.image_size");
  }
  if (!(gradcheck.step > 0)) throw ConfigError("gradcheck.step must be positive");
  if (!(gradcheck.tolerance > 0)) throw ConfigError("gradcheck.tolerance must be positive");
}

RunConfig parse_run_config(const json& doc) {
  RunConfig cfg;
  Section root(doc, "");
  std::string preset = cfg.train.preset.name;
  root.read("preset", preset);
  cfg.train.preset = preset_by_name(preset);
  root.read("seed", cfg.train.seed);
  root.read("deterministic", cfg.deterministic);
  root.read("output_dir", cfg.output_dir);

  if (auto s = root.child("model")) read_model(*s, cfg.train.model);
  if (auto s = root.child("schedule")) {
    s->read("alpha", cfg.train.schedule.alpha);
    s->read("beta_max", cfg.train.schedule.beta_max);
    s->read("delta", cfg.train.schedule.delta);
    s->read("theta", cfg.train.schedule.theta);
    s->read("iter_total", cfg.train.schedule.iter_total);
    s->finish();
  }
  if (auto s = root.child("optim")) {
    s->read("learning_rate", cfg.train.optim.learning_rate);
    s->read("momentum", cfg.train.optim.momentum);
    s->read("weight_decay", cfg.train.optim.weight_decay);
    s->read("anneal_a", cfg.train.optim.anneal_a);
    s->read("anneal_b", cfg.train.optim.anneal_b);
    s->finish();
  }
  if (auto s = root.child("mmd")) {
    s->read("scales", cfg.train.kernel.scales);
    s->read_optional("bandwidth", cfg.train.kernel.fixed_bandwidth);
    s->finish();
  }
  if (auto s = root.child("train")) {
    s->read("batch_size", cfg.train.batch_size);
    s->read("checkpoint_every", cfg.train.checkpoint_every);
    if (auto a = s->child("augment")) {
      a->read("flip", cfg.train.augment.flip);
      a->read("rotate", cfg.train.augment.rotate);
      a->read("crop", cfg.train.augment.crop);
      a->read("color", cfg.train.augment.color);
      a->finish();
    }
    s->finish();
  }
  if (auto s = root.child("data")) {
    if (auto syn = s->child("synthetic")) {
      cfg.synthetic = SynthConfig{};
      read_synthetic(*syn, *cfg.synthetic);
    }
    std::string dir;
    if (s->has("directory")) {
      s->read("directory", dir);
      cfg.data_dir = dir;
    }
    s->finish();
  }
  if (!cfg.synthetic && !cfg.data_dir) {
    cfg.synthetic = SynthConfig{};
    cfg.synthetic->num_sources = cfg.train.model.num_sources;
    cfg.synthetic->image_size = cfg.train.model.image_size;
  }
  if (auto s = root.child("gradcheck")) {
    s->read("step", cfg.gradcheck.step);
    s->read("tolerance", cfg.gradcheck.tolerance);
    s->read("sample", cfg.gradcheck.sample);
    std::string fault = fault_name(cfg.gradcheck.inject_fault);
    s->read("inject_fault", fault);
    cfg.gradcheck.inject_fault = parse_fault(fault);
    s->finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

ordered_json to_json(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  const ModelConfig& m = t.model;
  ordered_json j;
  j["preset"] = t.preset.name;
  j["seed"] = t.seed;
  j["deterministic"] = cfg.deterministic;
  j["output_dir"] = cfg.output_dir;
  j["model"] = {{"image_size", m.image_size},
                {"num_sources", m.num_sources},
                {"num_classes", m.num_classes},
                {"align_dim", m.align_dim},
                {"norm_eps", m.norm_eps},
                {"cnn", {{"widths", m.cnn.widths}, {"kernel", m.cnn.kernel}, {"feature_dim", m.cnn.feature_dim}}},
                {"vit",
                 {{"patch", m.vit.patch},
                  {"d_model", m.vit.d_model},
                  {"heads", m.vit.heads},
                  {"layers", m.vit.layers},
                  {"ffn_hidden", m.vit.ffn_hidden},
                  {"mean_pool", m.vit.mean_pool}}}};
  j["schedule"] = {{"alpha", t.schedule.alpha},
                   {"beta_max", t.schedule.beta_max},
                   {"delta", t.schedule.delta},
                   {"theta", t.schedule.theta},
                   {"iter_total", t.schedule.iter_total}};
  j["optim"] = {{"learning_rate", t.optim.learning_rate},
                {"momentum", t.optim.momentum},
                {"weight_decay", t.optim.weight_decay},
                {"anneal_a", t.optim.anneal_a},
                {"anneal_b", t.optim.anneal_b}};
  j["mmd"] = {{"scales", t.kernel.scales}, {"bandwidth", nullptr}};
  if (t.kernel.fixed_bandwidth) j["mmd"]["bandwidth"] = *t.kernel.fixed_bandwidth;
  j["train"] = {{"batch_size", t.batch_size},
                {"checkpoint_every", t.checkpoint_every},
                {"augment", {{"flip", t.augment.flip}, {"rotate", t.augment.rotate}, {"crop", t.augment.crop}, {"color", t.augment.color}}}};
  if (cfg.synthetic) {
    const SynthConfig& s = *cfg.synthetic;
    j["data"]["synthetic"] = {{"num_sources", s.num_sources},     {"samples_per_domain", s.samples_per_domain},
                              {"eval_samples", s.eval_samples},   {"image_size", s.image_size},
                              {"s_inter", s.s_inter},             {"s_intra", s.s_intra},
                              {"label_balance", s.label_balance}, {"pixel_noise", s.pixel_noise},
                              {"seed", s.seed}};
  } else {
    j["data"]["directory"] = *cfg.data_dir;
  }
  j["gradcheck"] = {{"step", cfg.gradcheck.step},
                    {"tolerance", cfg.gradcheck.tolerance},
                    {"sample", cfg.gradcheck.sample},
                    {"inject_fault", fault_name(cfg.gradcheck.inject_fault)}};
  return j;
}

void write_run_config(const RunConfig& cfg, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << to_json(cfg).dump(2) << "\n";
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace btmuda
