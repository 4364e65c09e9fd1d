#pragma once

// Versioned little-endian checkpoint container:
//
//   "BNCECKPT"  u32 version  u32 scalar bytes (4 or 8)
//   string      serialized RunConfig
//   u32         tensor count, then per tensor: string name, u64 rows,
//               u64 cols, rows*cols scalars in row-major order
//   TrainState  u64 epoch, f64 lr, f64 best, u64 stalls, u64 step,
//               u64 words, f64 seconds, string rng state
//
// Strings are a u64 length followed by the bytes.

#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <type_traits>

#include "bnce/config.hpp"
#include "bnce/io.hpp"
#include "bnce/model.hpp"
#include "bnce/rng.hpp"

namespace bnce {

inline constexpr char kCheckpointMagic[8] = {'B', 'N', 'C', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
  std::uint64_t epoch = 0;  // completed epochs
  double lr = 0.0;
  double best_validation = std::numeric_limits<double>::infinity();
  std::uint64_t epochs_since_improvement = 0;
  std::uint64_t step = 0;
  std::uint64_t words = 0;  // processed targets
  double seconds = 0.0;     // training wall time
  Rng rng;                  // noise sampler stream

  bool operator==(const TrainState&) const = default;
};

template <typename T>
struct Checkpoint {
  RunConfig config;
  Model<T> model;
  TrainState state;
};

namespace detail {

template <typename T>
void write_scalar(std::ostream& out, T v) {
  if constexpr (std::is_same_v<T, float>) io::write_f32(out, v);
  else io::write_f64(out, v);
}

template <typename T>
T read_scalar(std::istream& in) {
  if constexpr (std::is_same_v<T, float>) return io::read_f32(in);
  else return io::read_f64(in);
}

inline std::uint32_t read_header(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw io::FormatError("checkpoint: bad magic");
  const auto version = io::read_u32(in);
  if (version != kCheckpointVersion)
    throw io::FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto bytes = io::read_u32(in);
  if (bytes != 4 && bytes != 8) throw io::FormatError("checkpoint: bad scalar size " + std::to_string(bytes));
  return bytes;
}

}  // namespace detail

template <typename T>
void write_checkpoint(std::ostream& out, const RunConfig& cfg, const Model<T>& model, const TrainState& st) {
  out.write(kCheckpointMagic, 8);
  io::write_u32(out, kCheckpointVersion);
  io::write_u32(out, static_cast<std::uint32_t>(sizeof(T)));
  RunConfig stored = cfg;
  stored.model = model.config();
  io::write_string(out, serialize_config(stored));
  auto params = model.params();  // visit() needs mutable access
  std::uint32_t count = 0;
  params.visit([&](const std::string&, Matrix<T>&) { ++count; });
  io::write_u32(out, count);
  params.visit([&](const std::string& name, Matrix<T>& m) {
    io::write_string(out, name);
    io::write_u64(out, static_cast<std::uint64_t>(m.rows()));
    io::write_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) detail::write_scalar<T>(out, m.data()[i]);
  });
  io::write_u64(out, st.epoch);
  io::write_f64(out, st.lr);
  io::write_f64(out, st.best_validation);
  io::write_u64(out, st.epochs_since_improvement);
  io::write_u64(out, st.step);
  io::write_u64(out, st.words);
  io::write_f64(out, st.seconds);
  std::ostringstream rng_text;
  rng_text << st.rng;
  io::write_string(out, rng_text.str());
  if (!out) throw io::FormatError("checkpoint: write failed");
}

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in) {
  const auto bytes = detail::read_header(in);
  if (bytes != sizeof(T))
    throw io::FormatError("checkpoint: stored scalars are " + std::to_string(bytes) + " bytes, expected " +
                          std::to_string(sizeof(T)));
  Checkpoint<T> ck;
  ck.config = parse_config(io::read_string(in));
  // Build the shapes from the config, then overwrite every tensor.
  ck.model = Model<T>(ck.config.model, 0);
  const auto count = io::read_u32(in);
  std::uint32_t seen = 0;
  auto& params = ck.model.params();
  std::string failure;
  params.visit([&](const std::string& name, Matrix<T>& m) {
    if (!failure.empty()) return;
    if (seen++ >= count) {
      failure = "missing tensor " + name;
      return;
    }
    const auto stored = io::read_string(in);
    const auto rows = io::read_u64(in);
    const auto cols = io::read_u64(in);
    if (stored != name || rows != static_cast<std::uint64_t>(m.rows()) ||
        cols != static_cast<std::uint64_t>(m.cols())) {
      failure = "tensor " + stored + " (" + std::to_string(rows) + "x" + std::to_string(cols) +
                ") does not match " + name + " " + shape_of(m);
      return;
    }
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = detail::read_scalar<T>(in);
  });
  if (!failure.empty()) throw io::FormatError("checkpoint: " + failure);
  if (seen != count) throw io::FormatError("checkpoint: unexpected extra tensors");
  ck.state.epoch = io::read_u64(in);
  ck.state.lr = io::read_f64(in);
  ck.state.best_validation = io::read_f64(in);
  ck.state.epochs_since_improvement = io::read_u64(in);
  ck.state.step = io::read_u64(in);
  ck.state.words = io::read_u64(in);
  ck.state.seconds = io::read_f64(in);
  std::istringstream rng_text(io::read_string(in));
  rng_text >> ck.state.rng;
  if (!rng_text) throw io::FormatError("checkpoint: bad rng state");
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const Model<T>& model, const TrainState& st) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io::FormatError("cannot write " + path);
  write_checkpoint(out, cfg, model, st);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError("cannot open " + path);
  return read_checkpoint<T>(in);
}

/// Scalar precision stored in a checkpoint file.
inline Precision peek_precision(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError("cannot open " + path);
  return detail::read_header(in) == 4 ? Precision::f32 : Precision::f64;
}

}  // namespace bnce
