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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "btmuda/tensor.hpp"

namespace btmuda {

// Named trainable parameters, each paired with its SGD momentum buffer, plus
// the iteration counter. Insertion order is preserved and defines the
// serialization order.
template <typename Scalar>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix<Scalar> value;
    Matrix<Scalar> momentum;
  };

  void add(const std::string& name, Matrix<Scalar> value) {
    if (index_.count(name) != 0) throw ContractViolation("ParamStore: duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    Matrix<Scalar> momentum = Matrix<Scalar>::Zero(value.rows(), value.cols());
    entries_.push_back(Entry{name, std::move(value), std::move(momentum)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Entry& entry(const std::string& name) const { return entries_[position(name)]; }
  Entry& entry(const std::string& name) { return entries_[position(name)]; }

  const Matrix<Scalar>& value(const std::string& name) const { return entry(name).value; }
  Matrix<Scalar>& value(const std::string& name) { return entry(name).value; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  std::int64_t iteration = 0;
  std::int64_t iter_total = 0;

  // Same names, shapes and values in another precision.
  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& e : entries_) {
      out.add(e.name, e.value.template cast<Other>());
      out.entry(e.name).momentum = e.momentum.template cast<Other>();
    }
    out.iteration = iteration;
    out.iter_total = iter_total;
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.iteration != b.iteration || a.iter_total != b.iter_total || a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.value.rows() != y.value.rows() || x.value.cols() != y.value.cols()) return false;
      if (std::memcmp(x.value.data(), y.value.data(), sizeof(Scalar) * static_cast<std::size_t>(x.value.size())) != 0) return false;
      if (std::memcmp(x.momentum.data(), y.momentum.data(), sizeof(Scalar) * static_cast<std::size_t>(x.momentum.size())) != 0)
        return false;
    }
    return true;
  }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("ParamStore: unknown parameter " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters placed on a tape as gradient-carrying leaves.
template <typename Scalar>
class ParamBindings {
 public:
  ParamBindings(Tape<Scalar>& tape, const ParamStore<Scalar>& store) : tape_(&tape) {
    for (const auto& e : store.entries()) {
      vars_.emplace(e.name, tape.variable(e.value));
      order_.push_back(e.name);
    }
  }

  const Var<Scalar>& operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractViolation("missing parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  Tape<Scalar>& tape() const { return *tape_; }

  // Gradients aligned with the store's entry order; zeros where a parameter
  // did not influence the root.
  std::vector<Matrix<Scalar>> gradients(const ParamStore<Scalar>& store) const {
    std::vector<Matrix<Scalar>> out;
    out.reserve(store.size());
    for (const auto& e : store.entries()) {
      const Matrix<Scalar>& g = tape_->grad(vars_.at(e.name));
      out.push_back(g.size() == 0 ? Matrix<Scalar>::Zero(e.value.rows(), e.value.cols()) : g);
    }
    return out;
  }

 private:
  Tape<Scalar>* tape_;
  std::unordered_map<std::string, Var<Scalar>> vars_;
  std::vector<std::string> order_;
};

///////////////////////////////////////////
// Checkpoint files
///////////////////////////////////////////
//
// Layout (all integers little-endian):
//   "BTMU" | u32 version | u8 bytes-per-element (4 or 8) | i64 iteration |
//   i64 iter_total | u64 record count |
//   records: u32 name length | name | u32 rank | u64 extents[rank] | elements
// Parameter records come first, then one momentum record per parameter named
// "optim/momentum/<name>".

inline constexpr char kCheckpointMagic[4] = {'B', 'T', 'M', 'U'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kMomentumPrefix = "optim/momentum/";

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get() {
    T v;
    read(&v, sizeof(T));
    return v;
  }

  void read(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw IoError("checkpoint truncated at offset " + std::to_string(pos_) + " (need " + std::to_string(n) + " bytes)");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

template <typename Scalar>
void put_record(std::ostream& os, const std::string& name, const Matrix<Scalar>& m) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, 2);
  put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(m.size())));
}

}  // namespace detail

template <typename Scalar>
std::string serialize_checkpoint(const ParamStore<Scalar>& store) {
  std::ostringstream os(std::ios::binary);
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(Scalar)));
  detail::put<std::int64_t>(os, store.iteration);
  detail::put<std::int64_t>(os, store.iter_total);
  detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(2 * store.size()));
  for (const auto& e : store.entries()) detail::put_record(os, e.name, e.value);
  for (const auto& e : store.entries()) detail::put_record(os, kMomentumPrefix + e.name, e.momentum);
  return os.str();
}

template <typename Scalar>
ParamStore<Scalar> deserialize_checkpoint(std::string bytes) {
  detail::Reader in(std::move(bytes));
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError("checkpoint: bad magic at offset 0");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
  const auto width = in.get<std::uint8_t>();
  if (width != sizeof(Scalar))
    throw ConfigError("checkpoint: stored precision is " + std::to_string(8 * width) + "-bit, expected " +
                      std::to_string(8 * sizeof(Scalar)) + "-bit");
  ParamStore<Scalar> store;
  store.iteration = in.get<std::int64_t>();
  store.iter_total = in.get<std::int64_t>();
  const auto count = in.get<std::uint64_t>();
  std::map<std::string, Matrix<Scalar>> momenta;
  for (std::uint64_t r = 0; r < count; ++r) {
    const std::size_t at = in.offset();
    const auto len = in.get<std::uint32_t>();
    if (len > 4096) throw IoError("checkpoint: implausible name length at offset " + std::to_string(at));
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = in.get<std::uint32_t>();
    if (rank != 2) throw IoError("checkpoint: record " + name + " has rank " + std::to_string(rank) + " at offset " + std::to_string(at));
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (rows == 0 || cols == 0 || rows * cols > (1ULL << 32))
      throw IoError("checkpoint: bad extents for " + name + " at offset " + std::to_string(at));
    Matrix<Scalar> m(static_cast<Index>(rows), static_cast<Index>(cols));
    in.read(m.data(), sizeof(Scalar) * static_cast<std::size_t>(m.size()));
    if (name.rfind(kMomentumPrefix, 0) == 0) {
      momenta.emplace(name.substr(kMomentumPrefix.size()), std::move(m));
    } else {
      store.add(name, std::move(m));
    }
  }
  if (!in.done()) throw IoError("checkpoint: trailing bytes at offset " + std::to_string(in.offset()));
  for (auto& [name, m] : momenta) {
    if (!store.contains(name)) throw IoError("checkpoint: momentum for unknown parameter " + name);
    auto& e = store.entry(name);
    if (e.value.rows() != m.rows() || e.value.cols() != m.cols()) throw IoError("checkpoint: momentum shape mismatch for " + name);
    e.momentum = std::move(m);
  }
  return store;
}

template <typename Scalar>
void save_checkpoint(const ParamStore<Scalar>& store, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(store);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<Scalar>(std::move(bytes));
}

// Throws ConfigError naming every parameter whose presence or shape differs
// from the reference layout.
template <typename Scalar, typename Other>
void validate_layout(const ParamStore<Scalar>& loaded, const ParamStore<Other>& reference) {
  std::vector<std::string> bad;
  for (const auto& e : reference.entries()) {
    if (!loaded.contains(e.name)) {
      bad.push_back(e.name + " (missing)");
      continue;
    }
    const auto& m = loaded.value(e.name);
    if (m.rows() != e.value.rows() || m.cols() != e.value.cols())
      bad.push_back(e.name + " (" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + " vs " +
                    std::to_string(e.value.rows()) + "x" + std::to_string(e.value.cols()) + ")");
  }
  for (const auto& e : loaded.entries())
    if (!reference.contains(e.name)) bad.push_back(e.name + " (unexpected)");
  if (!bad.empty()) {
    std::string msg = "checkpoint does not match the configured model:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw ConfigError(msg);
  }
}

}  // namespace btmuda
