#pragma once

// Binary checkpoint: config snapshot, physical tensors, AdamW moments, step
// and rng state. Aliases are not stored; the config snapshot implies them.

#include <array>
#include <string>
#include <vector>

#include "cobit/binary_io.hpp"
#include "cobit/config.hpp"
#include "cobit/model.hpp"
#include "cobit/optimizer.hpp"

namespace cobit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values, m, v;
};

struct Checkpoint {
  std::string config;  // config_text of the run
  std::vector<CheckpointTensor> tensors;
  std::uint64_t step = 0;
  std::array<std::uint8_t, 16> rng{};
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  io::Writer w;
  w.bytes("CBIT", 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.config.size()));
  w.bytes(c.config.data(), c.config.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.name.size() > 0xffff) throw Error("tensor name too long: " + t.name);
    w.le<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.f32s(t.values.data(), t.values.size());
  }
  for (const auto& t : c.tensors) {
    w.f32s(t.m.data(), t.m.size());
    w.f32s(t.v.data(), t.v.size());
  }
  w.le<std::uint64_t>(c.step);
  w.bytes(c.rng.data(), c.rng.size());
  return w.data();
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
  io::Reader r(std::move(bytes), what);
  if (r.str(4) != "CBIT") throw FormatError(what + ": bad magic");
  if (const auto v = r.le<std::uint32_t>(); v != kCheckpointVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(v));
  Checkpoint c;
  c.config = r.str(r.le<std::uint32_t>());
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str(r.le<std::uint16_t>());
    const auto rank = r.le<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.le<std::uint32_t>());
    r.need(numel(t.shape) * 4);
    t.values.resize(numel(t.shape));
    r.f32s(t.values.data(), t.values.size());
    c.tensors.push_back(std::move(t));
  }
  for (auto& t : c.tensors) {
    r.need(t.values.size() * 8);
    t.m.resize(t.values.size());
    t.v.resize(t.values.size());
    r.f32s(t.m.data(), t.m.size());
    r.f32s(t.v.data(), t.v.size());
  }
  c.step = r.le<std::uint64_t>();
  r.bytes(c.rng.data(), c.rng.size());
  if (!r.at_end()) throw FormatError(what + ": trailing bytes");
  return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::string& path) {
  io::write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file(path), "checkpoint '" + path + "'");
}

/// Snapshot of a model and its optimizer (missing moments are zeros).
inline Checkpoint make_checkpoint(const RunConfig& cfg, const ParameterStore<float>& params,
                                  const OptimizerState<float>& opt, const Pcg32& rng) {
  Checkpoint c;
  c.config = config_text(cfg);
  for (const auto& [name, t] : params.tensors()) {
    CheckpointTensor ct{name, t.shape(), {t.values().begin(), t.values().end()}, {}, {}};
    auto moment = [&](const auto& table) {
      auto it = table.find(name);
      return it == table.end() || it->second.empty() ? std::vector<float>(t.numel(), 0.f) : it->second;
    };
    ct.m = moment(opt.m);
    ct.v = moment(opt.v);
    c.tensors.push_back(std::move(ct));
  }
  c.step = opt.step;
  c.rng = rng.state_bytes();
  return c;
}

/// Copies a checkpoint into a model built from its config. Every name and
/// shape is checked before anything is written.
inline void restore_checkpoint(const Checkpoint& c, ParameterStore<float>& params, OptimizerState<float>& opt,
                               Pcg32& rng) {
  if (c.tensors.size() != params.tensors().size())
    throw FormatError("checkpoint has " + std::to_string(c.tensors.size()) + " tensors, model has " +
                      std::to_string(params.tensors().size()));
  for (const auto& t : c.tensors) {
    auto it = params.tensors().find(t.name);
    if (it == params.tensors().end()) throw FormatError("checkpoint tensor '" + t.name + "' is unknown to the model");
    if (it->second.shape() != t.shape)
      throw FormatError("checkpoint tensor '" + t.name + "' has shape " + to_string(t.shape) + ", model expects " +
                        to_string(it->second.shape()));
  }
  for (const auto& t : c.tensors) {
    Tensor<float> p = params.tensors().at(t.name);
    std::copy(t.values.begin(), t.values.end(), p.mutable_values().begin());
    opt.m[t.name] = t.m;
    opt.v[t.name] = t.v;
  }
  opt.step = c.step;
  rng = Pcg32::from_state_bytes(c.rng);
}

}  // namespace cobit
