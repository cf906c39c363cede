#pragma once

// Model checkpoints in the tagged container format (magic "DOSE3CKP").
// Entries:
//   meta.arch      i64[6]  in_channels, base_width, depth, heads, temb dim, groups
//   meta.schedule  f64[3]  steps, beta_min, beta_max
//   meta.version   u8[n]   model version tag
//   param/<name>   f32     parameter values
// plus optional optimizer state (adam.m/<name>, adam.v/<name>, train.state).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dose3/container.hpp"
#include "dose3/nn/optim.hpp"
#include "dose3/nn/unet.hpp"

namespace dose3::nn {

inline constexpr const char* kCheckpointMagic = "DOSE3CKP";

/// Optimizer and loop counters needed to resume training.
struct TrainingState {
  std::int64_t adam_step = 0;
  std::int64_t epoch = 0;  // epochs completed
  std::vector<std::vector<float>> m, v;
};

namespace detail {

inline std::vector<std::uint32_t> dims_of(const Tensor& t) {
  return std::vector<std::uint32_t>(t.shape.begin(), t.shape.end());
}

inline ArchConfig arch_from(const std::map<std::string, io::Entry>& e) {
  auto it = e.find("meta.arch");
  if (it == e.end()) throw Error(ErrorKind::ArchMismatch, "checkpoint has no architecture record");
  const auto v = io::entry_values<std::int64_t>(it->second, io::DType::I64);
  if (v.size() != 6) throw Error(ErrorKind::ArchMismatch, "architecture record has the wrong size");
  ArchConfig a;
  a.in_channels = static_cast<int>(v[0]);
  a.base_width = static_cast<int>(v[1]);
  a.depth = static_cast<int>(v[2]);
  a.attention_heads = static_cast<int>(v[3]);
  a.time_embed_dim = static_cast<int>(v[4]);
  a.norm_groups = static_cast<int>(v[5]);
  return a;
}

}  // namespace detail

inline void save_checkpoint(const EstimatorModel& model, const std::string& path, const TrainingState* state = nullptr) {
  std::vector<io::Entry> entries;
  const auto& a = model.arch;
  entries.push_back(io::i64_entry(
      "meta.arch", {a.in_channels, a.base_width, a.depth, a.attention_heads, a.time_embed_dim, a.norm_groups}));
  entries.push_back(io::f64_entry("meta.schedule", {3},
                                  {static_cast<double>(model.schedule.steps), model.schedule.beta_min,
                                   model.schedule.beta_max}));
  entries.push_back(io::string_entry("meta.version", model.version));
  for (const auto& p : model.params) entries.push_back(io::f32_entry("param/" + p.name, detail::dims_of(p.value), p.value.data));
  if (state != nullptr) {
    if (state->m.size() != model.params.size() || state->v.size() != model.params.size()) {
      throw Error(ErrorKind::ShapeError, "training state does not match the model");
    }
    entries.push_back(io::i64_entry("train.state", {state->adam_step, state->epoch}));
    for (std::size_t k = 0; k < model.params.size(); ++k) {
      const auto dims = detail::dims_of(model.params[k].value);
      entries.push_back(io::f32_entry("adam.m/" + model.params[k].name, dims, state->m[k]));
      entries.push_back(io::f32_entry("adam.v/" + model.params[k].name, dims, state->v[k]));
    }
  }
  io::write_container(path, kCheckpointMagic, entries);
}

struct LoadedCheckpoint {
  EstimatorModel model;
  std::optional<TrainingState> state;
};

/// Loads model and optional training state. The parameter set must match the
/// architecture recorded in the file exactly.
inline LoadedCheckpoint load_checkpoint_full(const std::string& path) {
  const auto entries = io::read_container(path, kCheckpointMagic);
  const ArchConfig arch = detail::arch_from(entries);
  ScheduleConfig sched;
  if (auto it = entries.find("meta.schedule"); it != entries.end()) {
    const auto v = io::entry_values<double>(it->second, io::DType::F64);
    if (v.size() != 3) throw Error(ErrorKind::ArchMismatch, "schedule record has the wrong size");
    sched = {static_cast<int>(v[0]), v[1], v[2]};
  }
  LoadedCheckpoint out{make_model(arch, 0, sched), std::nullopt};
  if (auto it = entries.find("meta.version"); it != entries.end()) out.model.version = io::entry_string(it->second);

  std::size_t param_entries = 0;
  for (const auto& [name, e] : entries) param_entries += name.rfind("param/", 0) == 0;
  if (param_entries != out.model.params.size()) {
    throw Error(ErrorKind::ArchMismatch, "checkpoint holds " + std::to_string(param_entries) + " parameters, architecture has " +
                                             std::to_string(out.model.params.size()));
  }
  auto load_tensor = [&](const std::string& key, const Tensor& like) {
    auto it = entries.find(key);
    if (it == entries.end()) throw Error(ErrorKind::ArchMismatch, "checkpoint is missing '" + key + "'");
    if (it->second.shape != detail::dims_of(like)) throw Error(ErrorKind::ArchMismatch, "'" + key + "' has the wrong shape");
    return io::entry_values<float>(it->second, io::DType::F32);
  };
  for (auto& p : out.model.params) {
    const auto v = load_tensor("param/" + p.name, p.value);
    p.value.data.assign(v.begin(), v.end());
  }

  if (auto it = entries.find("train.state"); it != entries.end()) {
    const auto v = io::entry_values<std::int64_t>(it->second, io::DType::I64);
    if (v.size() != 2) throw Error(ErrorKind::ArchMismatch, "training state record has the wrong size");
    TrainingState st;
    st.adam_step = v[0];
    st.epoch = v[1];
    for (const auto& p : out.model.params) {
      st.m.push_back(load_tensor("adam.m/" + p.name, p.value));
      st.v.push_back(load_tensor("adam.v/" + p.name, p.value));
    }
    out.state = std::move(st);
  }
  return out;
}

inline EstimatorModel load_checkpoint(const std::string& path) { return load_checkpoint_full(path).model; }

/// Loads and checks the stored architecture against `expected`.
inline EstimatorModel load_checkpoint(const std::string& path, const ArchConfig& expected) {
  EstimatorModel m = load_checkpoint(path);
  if (!(m.arch == expected)) throw Error(ErrorKind::ArchMismatch, "checkpoint architecture differs from the requested one");
  return m;
}

}  // namespace dose3::nn
