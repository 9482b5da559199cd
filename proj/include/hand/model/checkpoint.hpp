#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hand/core/error.hpp"
#include "hand/core/tensor.hpp"
#include "hand/model/config.hpp"
#include "hand/model/network.hpp"

namespace hand::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'H', 'A', 'N', 'D', 'C', 'K', 'P', 'T'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Versioned container: config + learnable parameters + normalization
// buffers + training step count + master seed. Round-trips bit-exactly.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig config;
  std::uint64_t train_steps = 0;
  std::uint64_t master_seed = 0;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> buffers;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  write_u32(os, static_cast<std::uint32_t>(v));
  write_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  write_u32(os, bits);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_tensor(std::ostream& os, const NamedTensor& nt) {
  write_string(os, nt.name);
  write_u32(os, static_cast<std::uint32_t>(nt.tensor.rank()));
  for (int i = 0; i < nt.tensor.rank(); ++i)
    write_u32(os, static_cast<std::uint32_t>(nt.tensor.dim(i)));
  for (std::int64_t i = 0; i < nt.tensor.numel(); ++i) write_f32(os, nt.tensor[i]);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw input_error("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t lo = read_u32(is);
  std::uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

inline float read_f32(std::istream& is) {
  std::uint32_t bits = read_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::string read_string(std::istream& is) {
  std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw input_error("checkpoint: truncated file");
  return s;
}

inline NamedTensor read_tensor(std::istream& is) {
  NamedTensor nt;
  nt.name = read_string(is);
  std::uint32_t rank = read_u32(is);
  std::vector<int> shape(rank);
  for (auto& d : shape) d = static_cast<int>(read_u32(is));
  nt.tensor = Tensor(shape);
  for (std::int64_t i = 0; i < nt.tensor.numel(); ++i) nt.tensor[i] = read_f32(is);
  return nt;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw input_error("cannot write checkpoint: " + path);
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, ckpt.version);
  const auto& c = ckpt.config;
  detail::write_u32(os, static_cast<std::uint32_t>(c.input_size));
  detail::write_u32(os, static_cast<std::uint32_t>(c.init_channels));
  for (int ch : c.encoder_channels) detail::write_u32(os, static_cast<std::uint32_t>(ch));
  detail::write_u32(os, static_cast<std::uint32_t>(c.token_dim));
  detail::write_u32(os, static_cast<std::uint32_t>(c.transformer_layers));
  detail::write_u32(os, static_cast<std::uint32_t>(c.attention_heads));
  detail::write_u32(os, static_cast<std::uint32_t>(c.discriminator_hidden.size()));
  for (int w : c.discriminator_hidden) detail::write_u32(os, static_cast<std::uint32_t>(w));
  detail::write_f32(os, c.dropout_rate);
  detail::write_u64(os, ckpt.train_steps);
  detail::write_u64(os, ckpt.master_seed);
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& p : ckpt.parameters) detail::write_tensor(os, p);
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.buffers.size()));
  for (const auto& b : ckpt.buffers) detail::write_tensor(os, b);
  if (!os) throw input_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw input_error("not a checkpoint file: " + path);
  Checkpoint ckpt;
  ckpt.version = detail::read_u32(is);
  if (ckpt.version != kCheckpointVersion)
    throw version_error("checkpoint format version " + std::to_string(ckpt.version) +
                        " is not supported (this build reads version " +
                        std::to_string(kCheckpointVersion) + ")");
  auto& c = ckpt.config;
  c.input_size = static_cast<int>(detail::read_u32(is));
  c.init_channels = static_cast<int>(detail::read_u32(is));
  for (auto& ch : c.encoder_channels) ch = static_cast<int>(detail::read_u32(is));
  c.token_dim = static_cast<int>(detail::read_u32(is));
  c.transformer_layers = static_cast<int>(detail::read_u32(is));
  c.attention_heads = static_cast<int>(detail::read_u32(is));
  c.discriminator_hidden.resize(detail::read_u32(is));
  for (auto& w : c.discriminator_hidden) w = static_cast<int>(detail::read_u32(is));
  c.dropout_rate = detail::read_f32(is);
  ckpt.train_steps = detail::read_u64(is);
  ckpt.master_seed = detail::read_u64(is);
  ckpt.parameters.resize(detail::read_u32(is));
  for (auto& p : ckpt.parameters) p = detail::read_tensor(is);
  ckpt.buffers.resize(detail::read_u32(is));
  for (auto& b : ckpt.buffers) b = detail::read_tensor(is);
  return ckpt;
}

inline Checkpoint snapshot(const HandNet& net, std::uint64_t train_steps,
                           std::uint64_t master_seed) {
  Checkpoint ckpt;
  ckpt.config = net.config();
  ckpt.train_steps = train_steps;
  ckpt.master_seed = master_seed;
  for (const auto& p : net.parameters())
    ckpt.parameters.push_back({p.name, p.var.value()});
  for (const auto& b : net.buffers()) ckpt.buffers.push_back({b.first, *b.second});
  return ckpt;
}

// Rebuilds a network from a checkpoint; every stored tensor must match a
// constructed parameter or buffer by name and shape.
inline HandNet restore(const Checkpoint& ckpt) {
  HandNet net(ckpt.config, ckpt.master_seed);
  auto& params = net.parameters();
  if (params.size() != ckpt.parameters.size())
    throw input_error("checkpoint: parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ckpt.parameters[i].name)
      throw input_error("checkpoint: parameter name mismatch at index " + std::to_string(i) +
                        ": " + params[i].name + " vs " + ckpt.parameters[i].name);
    if (!params[i].var.value().same_shape(ckpt.parameters[i].tensor))
      throw input_error("checkpoint: shape mismatch for " + params[i].name);
    params[i].var.value() = ckpt.parameters[i].tensor;
  }
  auto& bufs = net.buffers();
  if (bufs.size() != ckpt.buffers.size())
    throw input_error("checkpoint: buffer count mismatch");
  for (size_t i = 0; i < bufs.size(); ++i) {
    if (bufs[i].first != ckpt.buffers[i].name)
      throw input_error("checkpoint: buffer name mismatch: " + bufs[i].first);
    *bufs[i].second = ckpt.buffers[i].tensor;
  }
  return net;
}

}  // namespace hand::model
