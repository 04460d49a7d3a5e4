// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary checkpoint, all integers and doubles little-endian:
//   "DUALGENCKPT"  u32 version
//   u64 len, RunConfig text
//   u64 train step
//   u64 len, rng state text
//   u32 n_params, then per parameter: u32 name len, name, u32 rank, u64 dims[rank], f64 values
//   u64 optimizer step, then per parameter: f64 m[size], f64 v[size]

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "dualgen/config.hpp"
#include "dualgen/train.hpp"

namespace dualgen {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagicError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct VersionMismatchError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct TruncatedCheckpointError : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct ShapeMismatchError : CheckpointError {
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[] = "DUALGENCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  TrainState state;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const std::string& s) { out_ += s; }
  void str(const std::string& s) {
    u64(s.size());
    raw(s);
  }
  std::string take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& in) : in_(in) {}
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(get(8, what)); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) { return raw(u64(what), what); }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n)
      throw TruncatedCheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                                     std::to_string(pos_));
  }
  std::uint64_t get(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const RunConfig& cfg, const TrainState& s) {
  detail::ByteWriter w;
  w.raw(std::string(kCheckpointMagic, sizeof kCheckpointMagic - 1));
  w.u32(kCheckpointVersion);
  w.str(cfg.to_string());
  w.u64(s.step);
  w.str(s.rng.state());
  const auto& params = s.model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.shape().size()));
    for (auto d : p.tensor.shape()) w.u64(d);
    for (double v : p.tensor.values()) w.f64(v);
  }
  w.u64(s.optim.step);
  if (s.optim.m.size() != params.size()) throw std::logic_error("serialize_checkpoint: optimizer/model mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (double v : s.optim.m[k]) w.f64(v);
    for (double v : s.optim.v[k]) w.f64(v);
  }
  return w.take();
}

// Rebuilds the model skeleton from the stored config, then overwrites every
// parameter; names and shapes must match the skeleton exactly.
inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  const std::size_t magic_len = sizeof kCheckpointMagic - 1;
  if (bytes.size() < magic_len || bytes.compare(0, magic_len, kCheckpointMagic) != 0)
    throw BadMagicError("not a checkpoint: magic bytes do not match");
  r.raw(magic_len, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint version " + std::to_string(version) + " but this build reads version " +
                               std::to_string(kCheckpointVersion));
  Checkpoint ck;
  ck.config = parse_run_config(r.str("config"));
  ck.state.model = init_model(ck.config.model, ck.config.seed);
  ck.state.step = r.u64("step");
  ck.state.rng.set_state(r.str("rng state"));

  const auto& params = ck.state.model.parameters();
  const std::uint32_t n = r.u32("parameter count");
  if (n != params.size())
    throw ShapeMismatchError("checkpoint has " + std::to_string(n) + " parameters, config implies " +
                             std::to_string(params.size()));
  for (const auto& p : params) {
    const std::string name = r.raw(r.u32("parameter name length"), "parameter name");
    if (name != p.name) throw ShapeMismatchError("checkpoint parameter '" + name + "' where '" + p.name + "' expected");
    const std::uint32_t rank = r.u32("rank");
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.u64("dims");
    if (shape != p.tensor.shape())
      throw ShapeMismatchError("checkpoint parameter '" + name + "' has shape " + ad::shape_str(shape) +
                               ", config implies " + ad::shape_str(p.tensor.shape()));
    auto vals = ad::Tensor(p.tensor).mutable_values();
    for (double& v : vals) v = r.f64("parameter values");
  }
  ck.state.optim = OptimState::for_model(ck.state.model, ck.config.adam);
  ck.state.optim.step = r.u64("optimizer step");
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (double& v : ck.state.optim.m[k]) v = r.f64("optimizer moments");
    for (double& v : ck.state.optim.v[k]) v = r.f64("optimizer moments");
  }
  if (!r.at_end()) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

// Writes to "<path>.tmp" and renames over the target.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& s) {
  write_file_atomic(path, serialize_checkpoint(cfg, s));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace dualgen
