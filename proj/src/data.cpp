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

#include "btmuda/data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "btmuda/errors.hpp"
#include "btmuda/parallel.hpp"

namespace btmuda {

namespace fs = std::filesystem;

bool Dataset::labelled() const {
  return !samples.empty() && std::all_of(samples.begin(), samples.end(), [](const auto& s) { return s.label.has_value(); });
}

///////////////////////////////////////////
// Synthetic benchmark
///////////////////////////////////////////

void SynthConfig::validate() const {
  if (num_sources < 1) throw ConfigError("data.synthetic.num_sources must be >= 1");
  if (samples_per_domain < 1) throw ConfigError("data.synthetic.samples_per_domain must be >= 1");
  if (eval_samples < 1) throw ConfigError("data.synthetic.eval_samples must be >= 1");
  if (image_size < 16) throw ConfigError("data.synthetic.image_size must be >= 16 (got " + std::to_string(image_size) + ")");
  if (!(s_inter >= 0 && s_inter <= 1)) throw ConfigError("data.synthetic.s_inter must lie in [0, 1]");
  if (!(s_intra >= 0 && s_intra <= 1)) throw ConfigError("data.synthetic.s_intra must lie in [0, 1]");
  if (!(label_balance >= 0 && label_balance <= 1)) throw ConfigError("data.synthetic.label_balance must lie in [0, 1]");
  if (!(pixel_noise >= 0)) throw ConfigError("data.synthetic.pixel_noise must be >= 0");
}

namespace {

// Style offset of a domain at s_inter = 1, plus its grating geometry.
struct StyleShift {
  double gain, bias, texture, blur, angle, frequency;
};

constexpr double kPi = std::numbers::pi;

constexpr std::array<StyleShift, 3> kSourceShifts{{
    {+0.15, -0.10, 0.12, 0.00, 0.0, 3.0},
    {-0.05, +0.10, 0.06, 0.90, kPi / 2, 4.0},
    {+0.10, +0.05, 0.18, 0.45, kPi / 6, 2.5},
}};
constexpr StyleShift kTargetShift{-0.43, +0.36, 0.29, 1.86, kPi / 4, 5.0};

StyleShift extra_source_shift(int index) {
  Rng rng = make_rng(0, {tag(Stream::Synth), 0xd0a1, static_cast<std::uint64_t>(index)});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return {0.15 * u(rng), 0.10 * u(rng), 0.12 + 0.06 * u(rng), 0.45 + 0.45 * u(rng), kPi * (0.5 + 0.5 * u(rng)),
          3.5 + 1.5 * u(rng)};
}

DomainSpec make_spec(std::string id, DomainRole role, int index, const StyleShift& shift, double s) {
  const Style base;
  DomainSpec d;
  d.id = std::move(id);
  d.role = role;
  d.index = index;
  d.style = {base.gain + s * shift.gain, base.bias + s * shift.bias, base.texture + s * shift.texture, base.blur + s * shift.blur};
  d.texture_angle = shift.angle;
  d.texture_frequency = shift.frequency;
  return d;
}

Image gaussian_blur(const Image& img, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& w : k) w /= total;
  const Index h = img.rows(), w = img.cols();
  auto clampi = [](Index v, Index hi) { return std::clamp<Index>(v, 0, hi - 1); };
  Image tmp(h, w), out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * img(y, clampi(x + i, w));
      tmp(y, x) = static_cast<float>(acc);
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * tmp(clampi(y + i, h), x);
      out(y, x) = static_cast<float>(acc);
    }
  return out;
}

Image render(const SynthConfig& cfg, const DomainSpec& spec, int label, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double S = cfg.image_size, j = cfg.s_intra;

  const double gain = spec.style.gain + 0.2 * j * u(rng);
  const double bias = spec.style.bias + 0.1 * j * u(rng);
  const double texture = std::max(0.0, spec.style.texture * (1 + 0.5 * j * u(rng)));
  const double blur = std::max(0.0, spec.style.blur + 0.5 * j * u(rng));
  const double phase = 2 * kPi * unit(rng);

  const double cx = S * (0.5 + 0.15 * u(rng)), cy = S * (0.5 + 0.15 * u(rng));
  double outer, inner = 0;
  if (label == 0) {
    outer = S * (0.24 + 0.06 * u(rng));
  } else {
    outer = S * (0.26 + 0.06 * u(rng));
    inner = outer * (0.52 + 0.07 * u(rng));
  }

  const double ca = std::cos(spec.texture_angle), sa = std::sin(spec.texture_angle);
  const double freq = 2 * kPi * spec.texture_frequency / S;
  Image img(cfg.image_size, cfg.image_size);
  for (int y = 0; y < cfg.image_size; ++y)
    for (int x = 0; x < cfg.image_size; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      double mask = std::clamp(outer - d + 0.5, 0.0, 1.0);
      if (label == 1) mask -= std::clamp(inner - d + 0.5, 0.0, 1.0);
      const double grating = std::sin(freq * (x * ca + y * sa) + phase);
      img(y, x) = static_cast<float>(bias + gain * mask + texture * grating);
    }
  if (blur > 0.05) img = gaussian_blur(img, blur);
  for (Index i = 0; i < img.size(); ++i) {
    const double v = img.data()[i] + cfg.pixel_noise * noise(rng);
    img.data()[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return img;
}

}  // namespace

std::vector<DomainSpec> domain_specs(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<DomainSpec> out;
  for (int j = 1; j <= cfg.num_sources; ++j) {
    const StyleShift shift = j <= static_cast<int>(kSourceShifts.size()) ? kSourceShifts[static_cast<std::size_t>(j - 1)] : extra_source_shift(j);
    out.push_back(make_spec("S" + std::to_string(j), DomainRole::Source, j, shift, cfg.s_inter));
  }
  out.push_back(make_spec("T", DomainRole::Target, 0, kTargetShift, cfg.s_inter));
  return out;
}

Dataset gen_domain(const SynthConfig& cfg, const DomainSpec& spec, Split split, std::size_t count) {
  cfg.validate();
  if (count == 0) count = static_cast<std::size_t>(split == Split::Eval ? cfg.eval_samples : cfg.samples_per_domain);
  const auto domain_key = static_cast<std::uint64_t>(spec.index);
  const auto split_key = static_cast<std::uint64_t>(split);

  const auto positives = static_cast<std::size_t>(std::llround(cfg.label_balance * static_cast<double>(count)));
  std::vector<int> labels(count, 0);
  std::fill(labels.begin() + static_cast<std::ptrdiff_t>(count - positives), labels.end(), 1);
  Rng label_rng = make_rng(cfg.seed, {tag(Stream::Labels), domain_key, split_key});
  std::shuffle(labels.begin(), labels.end(), label_rng);

  Dataset out;
  out.domain = spec.id + (split == Split::Eval ? "_eval" : "");
  out.samples.resize(count);
  parallel_for(count, [&](std::size_t i) {
    Rng rng = make_rng(cfg.seed, {tag(Stream::Synth), domain_key, split_key, i});
    char id[64];
    std::snprintf(id, sizeof id, "%s_%06zu", out.domain.c_str(), i);
    out.samples[i] = {id, out.domain, render(cfg, spec, labels[i], rng), labels[i]};
  });
  return out;
}

///////////////////////////////////////////
// Batches
///////////////////////////////////////////

EpochSampler::EpochSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream) : n_(n), seed_(seed), stream_(stream) {
  if (n == 0) throw DataError("cannot sample batches from an empty dataset");
}

const std::vector<std::size_t>& EpochSampler::permutation(std::int64_t epoch) const {
  auto it = cache_.find(epoch);
  if (it != cache_.end()) return it->second;
  if (cache_.size() > 4) cache_.clear();
  std::vector<std::size_t> perm(n_);
  for (std::size_t i = 0; i < n_; ++i) perm[i] = i;
  Rng rng = make_rng(seed_, {tag(Stream::Shuffle), stream_, static_cast<std::uint64_t>(epoch)});
  std::shuffle(perm.begin(), perm.end(), rng);
  return cache_.emplace(epoch, std::move(perm)).first->second;
}

std::vector<std::size_t> EpochSampler::batch(std::int64_t step, std::size_t batch_size) const {
  require(step >= 0, "EpochSampler: negative step");
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  const auto n = static_cast<std::int64_t>(n_);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::int64_t pos = step * static_cast<std::int64_t>(batch_size) + static_cast<std::int64_t>(i);
    out.push_back(permutation(pos / n)[static_cast<std::size_t>(pos % n)]);
  }
  return out;
}

BatchSource::BatchSource(const std::vector<Dataset>& sources, const Dataset& target, std::size_t batch_size, std::uint64_t seed)
    : sources_(&sources), target_(&target), batch_size_(batch_size) {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (sources.empty()) throw DataError("no source domains");
  auto check = [batch_size](const Dataset& d) {
    if (d.size() == 0) throw DataError("domain '" + d.domain + "' is empty");
    if (d.size() < batch_size)
      throw DataError("domain '" + d.domain + "' has " + std::to_string(d.size()) + " samples, fewer than the batch size " +
                      std::to_string(batch_size));
  };
  for (std::size_t j = 0; j < sources.size(); ++j) {
    check(sources[j]);
    if (!sources[j].labelled()) throw DataError("source domain '" + sources[j].domain + "' has unlabelled samples");
    samplers_.emplace_back(sources[j].size(), seed, j + 1);
  }
  check(target);
  samplers_.emplace_back(target.size(), seed, 0);
}

DomainBatches BatchSource::sample(std::int64_t step) const {
  DomainBatches out;
  for (std::size_t j = 0; j < sources_->size(); ++j) {
    auto& batch = out.sources.emplace_back();
    for (std::size_t i : samplers_[j].batch(step, batch_size_)) batch.push_back((*sources_)[j].samples[i]);
  }
  for (std::size_t i : samplers_.back().batch(step, batch_size_)) {
    LabeledSample s = target_->samples[i];
    s.label.reset();
    out.target.push_back(std::move(s));
  }
  return out;
}

///////////////////////////////////////////
// Augmentation
///////////////////////////////////////////

namespace {

float sample_bilinear(const Image& img, double y, double x) {
  const Index h = img.rows(), w = img.cols();
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<Index>(std::floor(y)), x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = (1 - fx) * img(y0, x0) + fx * img(y0, x1);
  const double bottom = (1 - fx) * img(y1, x0) + fx * img(y1, x1);
  return static_cast<float>((1 - fy) * top + fy * bottom);
}

}  // namespace

Image flip_horizontal(const Image& img) { return img.rowwise().reverse(); }

Image rotate(const Image& img, double degrees) {
  const double a = degrees * kPi / 180.0, c = std::cos(a), s = std::sin(a);
  const double cy = (static_cast<double>(img.rows()) - 1) / 2, cx = (static_cast<double>(img.cols()) - 1) / 2;
  Image out(img.rows(), img.cols());
  for (Index y = 0; y < img.rows(); ++y)
    for (Index x = 0; x < img.cols(); ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      out(y, x) = sample_bilinear(img, cy + s * dx + c * dy, cx + c * dx - s * dy);
    }
  return out;
}

Image resized_crop(const Image& img, double area, double fx, double fy) {
  require(area > 0 && area <= 1, "resized_crop: area must lie in (0, 1]");
  const double h = static_cast<double>(img.rows()), w = static_cast<double>(img.cols());
  const double side_y = std::sqrt(area) * h, side_x = std::sqrt(area) * w;
  const double oy = std::clamp(fy, 0.0, 1.0) * (h - side_y), ox = std::clamp(fx, 0.0, 1.0) * (w - side_x);
  Image out(img.rows(), img.cols());
  for (Index y = 0; y < img.rows(); ++y)
    for (Index x = 0; x < img.cols(); ++x)
      out(y, x) = sample_bilinear(img, oy + (static_cast<double>(y) + 0.5) * side_y / h - 0.5,
                                  ox + (static_cast<double>(x) + 0.5) * side_x / w - 0.5);
  return out;
}

Image adjust_brightness(const Image& img, double delta) {
  return img.unaryExpr([delta](float v) { return static_cast<float>(static_cast<double>(v) + delta); });
}

Image adjust_contrast(const Image& img, double factor) {
  const double m = img.cast<double>().mean();
  return img.unaryExpr([m, factor](float v) { return static_cast<float>(m + factor * (static_cast<double>(v) - m)); });
}

Image resize_bilinear(const Image& img, int height, int width) {
  require(height > 0 && width > 0, "resize_bilinear: target size must be positive");
  if (img.rows() == height && img.cols() == width) return img;
  const double sy = static_cast<double>(img.rows()) / height, sx = static_cast<double>(img.cols()) / width;
  Image out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out(y, x) = sample_bilinear(img, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
  return out;
}

LabeledSample augment(const LabeledSample& sample, Rng& rng, const AugmentFlags& flags) {
  LabeledSample out = sample;
  if (!flags.any()) return out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image& img = out.image;
  if (flags.flip && unit(rng) < 0.5) img = flip_horizontal(img);
  if (flags.rotate) img = rotate(img, -15.0 + 30.0 * unit(rng));
  if (flags.crop) {
    const double area = 0.8 + 0.2 * unit(rng);
    const double fx = unit(rng);
    img = resized_crop(img, area, fx, unit(rng));
  }
  if (flags.color) {
    img = adjust_brightness(img, -0.2 + 0.4 * unit(rng));
    img = adjust_contrast(img, 0.8 + 0.4 * unit(rng));
  }
  img = img.cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

///////////////////////////////////////////
// On-disk datasets
///////////////////////////////////////////

void write_png_gray(const fs::path& path, const Image& img) {
  std::vector<png_byte> bytes(static_cast<std::size_t>(img.size()));
  for (Index i = 0; i < img.size(); ++i)
    bytes[static_cast<std::size_t>(i)] = static_cast<png_byte>(std::lround(std::clamp(img.data()[i], 0.0f, 1.0f) * 255.0f));
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.cols());
  image.height = static_cast<png_uint_32>(img.rows());
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write " + path.string() + ": " + msg);
  }
}

Image read_png_gray(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw DataError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("corrupt PNG " + path.string() + ": " + msg);
  }
  Image out(static_cast<Index>(image.height), static_cast<Index>(image.width));
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(bytes[static_cast<std::size_t>(i)]) / 255.0f;
  return out;
}

void write_dataset(const fs::path& domain_dir, const Dataset& data, bool with_labels) {
  std::error_code ec;
  fs::create_directories(domain_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (domain_dir / "images").string() + ": " + ec.message());
  for (const auto& s : data.samples) write_png_gray(domain_dir / "images" / (s.id + ".png"), s.image);
  if (!with_labels) return;
  std::ofstream csv(domain_dir / "labels.csv");
  if (!csv) throw IoError("cannot write " + (domain_dir / "labels.csv").string());
  csv << "filename,label\n";
  for (const auto& s : data.samples) {
    if (!s.label) throw DataError("sample '" + s.id + "' has no label to write");
    csv << s.id << ".png," << *s.label << "\n";
  }
  if (!csv) throw IoError("write failed: " + (domain_dir / "labels.csv").string());
}

namespace {

std::vector<std::pair<std::string, int>> read_labels(const fs::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv_path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "filename,label") throw DataError(csv_path.string() + ": expected header 'filename,label'");
  std::vector<std::pair<std::string, int>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw DataError(csv_path.string() + ":" + std::to_string(lineno) + ": missing label column");
    const std::string name = line.substr(0, comma), value = line.substr(comma + 1);
    if (value != "0" && value != "1")
      throw DataError(csv_path.string() + ":" + std::to_string(lineno) + ": label '" + value + "' for " + name + " is not 0 or 1");
    rows.emplace_back(name, value == "1" ? 1 : 0);
  }
  return rows;
}

}  // namespace

Dataset load_dataset(const fs::path& domain_dir, int image_size) {
  const fs::path images = domain_dir / "images";
  if (!fs::is_directory(images)) throw DataError("missing image directory " + images.string());
  Dataset out;
  out.domain = domain_dir.filename().string();

  std::vector<std::pair<std::string, std::optional<int>>> entries;
  if (fs::exists(domain_dir / "labels.csv")) {
    for (auto& [name, label] : read_labels(domain_dir / "labels.csv")) entries.emplace_back(name, label);
  } else {
    for (const auto& f : fs::directory_iterator(images))
      if (f.is_regular_file() && f.path().extension() == ".png") entries.emplace_back(f.path().filename().string(), std::nullopt);
    std::sort(entries.begin(), entries.end());
  }
  if (entries.empty()) throw DataError("no images in " + domain_dir.string());

  out.samples.resize(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const auto& [name, label] = entries[i];
    const fs::path file = images / name;
    if (!fs::exists(file)) throw DataError("image listed in labels.csv not found: " + file.string());
    out.samples[i] = {fs::path(name).stem().string(), out.domain, resize_bilinear(read_png_gray(file), image_size, image_size), label};
  });
  return out;
}

BenchmarkData make_synthetic_benchmark(const SynthConfig& cfg) {
  BenchmarkData out;
  for (const auto& spec : domain_specs(cfg)) {
    if (spec.role == DomainRole::Source) {
      out.sources.push_back(gen_domain(cfg, spec));
    } else {
      out.target = gen_domain(cfg, spec);
      for (auto& s : out.target.samples) s.label.reset();
      out.target_eval = gen_domain(cfg, spec, Split::Eval);
    }
  }
  return out;
}

void write_synthetic_benchmark(const SynthConfig& cfg, const fs::path& root) {
  const BenchmarkData data = make_synthetic_benchmark(cfg);
  for (const auto& d : data.sources) write_dataset(root / d.domain, d, true);
  write_dataset(root / "T", data.target, false);
  write_dataset(root / "T_eval", *data.target_eval, true);

  nlohmann::ordered_json manifest;
  manifest["synthetic"] = {{"num_sources", cfg.num_sources},     {"samples_per_domain", cfg.samples_per_domain},
                           {"eval_samples", cfg.eval_samples},   {"image_size", cfg.image_size},
                           {"s_inter", cfg.s_inter},             {"s_intra", cfg.s_intra},
                           {"label_balance", cfg.label_balance}, {"pixel_noise", cfg.pixel_noise},
                           {"seed", cfg.seed}};
  manifest["positive_class"] = kPositiveClass;
  manifest["classes"] = {"disc", "annulus"};
  for (const auto& spec : domain_specs(cfg)) {
    manifest["domains"].push_back({{"id", spec.id},
                                   {"role", spec.role == DomainRole::Source ? "source" : "target"},
                                   {"index", spec.index},
                                   {"gain", spec.style.gain},
                                   {"bias", spec.style.bias},
                                   {"texture", spec.style.texture},
                                   {"blur", spec.style.blur},
                                   {"texture_angle", spec.texture_angle},
                                   {"texture_frequency", spec.texture_frequency}});
  }
  manifest["splits"] = {{"T", "target training split, unlabelled"}, {"T_eval", "target evaluation split, labelled"}};
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

BenchmarkData load_benchmark(const fs::path& root, int num_sources, int image_size) {
  if (!fs::is_directory(root)) throw DataError("data root not found: " + root.string());
  BenchmarkData out;
  for (int j = 1; j <= num_sources; ++j) {
    Dataset d = load_dataset(root / ("S" + std::to_string(j)), image_size);
    if (!d.labelled()) throw DataError("source domain S" + std::to_string(j) + " has no labels.csv");
    out.sources.push_back(std::move(d));
  }
  out.target = load_dataset(root / "T", image_size);
  for (auto& s : out.target.samples) s.label.reset();
  if (fs::is_directory(root / "T_eval")) out.target_eval = load_dataset(root / "T_eval", image_size);
  return out;
}

}  // namespace btmuda
