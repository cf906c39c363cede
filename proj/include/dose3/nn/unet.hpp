#pragma once

// The noise estimator: a 1-D convolutional UNet over pose sequences.
//
//   input [6, B, L]  (3 translation + 3 rotation-tangent channels)
//   conv_in                                     -> base_width
//   per level i < depth:  ResBlock -> Attention -> (skip) -> strided conv /2
//   bottleneck:           ResBlock -> Attention -> ResBlock
//   per level i reversed: upsample x2 + conv -> concat skip -> ResBlock -> Attention
//   GroupNorm -> SiLU -> conv_out (zero-initialized) -> [6, B, L]
//
// Level widths are base_width * 2^i. Every ResBlock receives the timestep
// embedding through its own projection, added after its first convolution.
// Attention blocks are pre-normalized and residual.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "dose3/diffusion.hpp"
#include "dose3/error.hpp"
#include "dose3/lie.hpp"
#include "dose3/nn/ops.hpp"
#include "dose3/nn/tensor.hpp"
#include "dose3/rng.hpp"

namespace dose3::nn {

struct ArchConfig {
  int in_channels = 6;
  int base_width = 64;
  int depth = 3;
  int attention_heads = 4;
  int time_embed_dim = 128;
  int norm_groups = 8;

  int width(int level) const { return base_width << level; }

  void validate() const {
    if (in_channels != 6) throw Error(ErrorKind::ConfigError, "in_channels must be 6 (3 translation + 3 rotation)");
    if (base_width < 1 || depth < 0 || depth > 8 || attention_heads < 1 || norm_groups < 1) {
      throw Error(ErrorKind::ConfigError, "architecture sizes must be positive");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw Error(ErrorKind::ConfigError, "time_embed_dim must be even");
    for (int i = 0; i < std::max(depth, 1); ++i) {
      const int w = width(i);
      if (w % norm_groups != 0) throw Error(ErrorKind::ConfigError, "level width not divisible by norm_groups");
      if (w % attention_heads != 0) throw Error(ErrorKind::ConfigError, "level width not divisible by attention_heads");
    }
  }

  void validate_length(int len) const {
    if (len < 1 || len % (1 << depth) != 0) {
      throw Error(ErrorKind::ShapeError,
                  "sequence length " + std::to_string(len) + " not divisible by 2^depth = " + std::to_string(1 << depth));
    }
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

struct EstimatorModel {
  ArchConfig arch;
  ScheduleConfig schedule;
  std::string version = "dose3-unet-1";
  std::vector<Parameter> params;
  std::map<std::string, std::size_t> index;

  Parameter* find(const std::string& name) {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &params[it->second];
  }
  const Parameter* find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &params[it->second];
  }

  void zero_grad() {
    for (auto& p : params) p.grad.assign(p.value.numel(), 0.0f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.numel();
    return n;
  }
};

/// Sinusoidal features, interleaved: e[2i] = sin(t f_i), e[2i+1] = cos(t f_i),
/// with f_i = 10000^(-i / (dim/2)).
inline Tensor time_embedding(int t, int dim) {
  if (t < 0) throw Error(ErrorKind::ConfigError, "timestep must be >= 0");
  if (dim < 2 || dim % 2 != 0) throw Error(ErrorKind::ConfigError, "embedding dim must be even");
  Tensor e({dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / half);
    e.data[2 * i] = static_cast<float>(std::sin(t * f));
    e.data[2 * i + 1] = static_cast<float>(std::cos(t * f));
  }
  return e;
}

namespace detail {

enum class Init { Fan, Zero, One };

// Builds the UNet graph on a tape. In registration mode (non-const model and
// an init stream) missing parameters are created with their initial values.
template <class Model>
class UNetGraph {
  static constexpr bool kMutable = !std::is_const_v<Model>;

 public:
  UNetGraph(Tape& tape, Model& model, RngState* init = nullptr) : tape_(tape), model_(model), init_(init) {}

  Var run(Var x, std::span<const int> steps) {
    const ArchConfig& a = model_.arch;
    const auto& xs = tape_.shape(x);
    if (xs.size() != 3 || xs[0] != a.in_channels) {
      throw Error(ErrorKind::ShapeError, "estimator input must be [6, B, L], got " + shape_string(xs));
    }
    const int batch = xs[1];
    a.validate_length(xs[2]);
    if (static_cast<int>(steps.size()) != batch) throw Error(ErrorKind::ShapeError, "one timestep per batch item");

    const int td = a.time_embed_dim;
    Tensor emb({td, batch});
    for (int b = 0; b < batch; ++b) {
      Tensor e = time_embedding(steps[b], td);
      for (int i = 0; i < td; ++i) emb.data[static_cast<std::size_t>(i) * batch + b] = e.data[i];
    }
    Var temb = tape_.constant(std::move(emb));
    temb = linear_layer("temb.fc1", temb, td, td);
    temb = silu(tape_, temb);
    temb = linear_layer("temb.fc2", temb, td, td);
    temb_act_ = silu(tape_, temb);

    Var h = conv_layer("conv_in", x, a.in_channels, a.base_width, 3, 1, 1);
    int ch = a.base_width;
    std::vector<Var> skips;
    std::vector<int> skip_ch;
    for (int i = 0; i < a.depth; ++i) {
      const std::string p = "down" + std::to_string(i);
      h = res_block(p + ".res", h, ch, a.width(i));
      ch = a.width(i);
      h = attention_block(p + ".attn", h, ch);
      skips.push_back(h);
      skip_ch.push_back(ch);
      h = conv_layer(p + ".down", h, ch, ch, 3, 2, 1);
    }
    h = res_block("mid.res1", h, ch, ch);
    h = attention_block("mid.attn", h, ch);
    h = res_block("mid.res2", h, ch, ch);
    for (int i = a.depth - 1; i >= 0; --i) {
      const std::string p = "up" + std::to_string(i);
      h = upsample2(tape_, h);
      h = conv_layer(p + ".up", h, ch, ch, 3, 1, 1);
      h = concat_channels(tape_, h, skips[i]);
      h = res_block(p + ".res", h, ch + skip_ch[i], a.width(i));
      ch = a.width(i);
      h = attention_block(p + ".attn", h, ch);
    }
    h = norm_layer("out.norm", h, ch);
    h = silu(tape_, h);
    return conv_layer("conv_out", h, ch, a.in_channels, 3, 1, 1, Init::Zero);
  }

  Var attention_block(const std::string& name, Var x, int c) {
    Var h = norm_layer(name + ".norm", x, c);
    h = conv_layer(name + ".qkv", h, c, 3 * c, 1, 1, 0);
    h = attention(tape_, h, model_.arch.attention_heads);
    h = conv_layer(name + ".proj", h, c, c, 1, 1, 0);
    return add(tape_, x, h);
  }

  Var res_block(const std::string& name, Var x, int cin, int cout) {
    Var h = norm_layer(name + ".norm1", x, cin);
    h = silu(tape_, h);
    h = conv_layer(name + ".conv1", h, cin, cout, 3, 1, 1);
    Var e = linear_layer(name + ".temb", temb_act_, model_.arch.time_embed_dim, cout);
    h = add_broadcast(tape_, h, e);
    h = norm_layer(name + ".norm2", h, cout);
    h = silu(tape_, h);
    h = conv_layer(name + ".conv2", h, cout, cout, 3, 1, 1);
    Var skip = cin == cout ? x : conv_layer(name + ".skip", x, cin, cout, 1, 1, 0);
    return add(tape_, h, skip);
  }

 private:
  Var conv_layer(const std::string& name, Var x, int cin, int cout, int k, int stride, int pad, Init init = Init::Fan) {
    Var w = param(name + ".w", {cout, cin, k}, init, cin * k);
    Var b = param(name + ".b", {cout}, init, cin * k);
    return conv1d(tape_, x, w, b, stride, pad);
  }

  Var linear_layer(const std::string& name, Var x, int in, int out) {
    Var w = param(name + ".w", {out, in}, Init::Fan, in);
    Var b = param(name + ".b", {out}, Init::Fan, in);
    return linear(tape_, x, w, b);
  }

  Var norm_layer(const std::string& name, Var x, int c) {
    Var g = param(name + ".g", {c}, Init::One, 0);
    Var b = param(name + ".b", {c}, Init::Zero, 0);
    return group_norm(tape_, x, g, b, model_.arch.norm_groups);
  }

  Var param(const std::string& name, std::vector<int> shape, Init init, int fan_in) {
    if constexpr (kMutable) {
      if (init_ != nullptr && model_.find(name) == nullptr) {
        Parameter p{name, Tensor(shape), {}};
        const float bound = 1.0f / std::sqrt(static_cast<float>(std::max(fan_in, 1)));
        for (auto& v : p.value.data) {
          switch (init) {
            case Init::Fan: v = static_cast<float>((2.0 * init_->uniform() - 1.0) * bound); break;
            case Init::Zero: v = 0.0f; break;
            case Init::One: v = 1.0f; break;
          }
        }
        model_.index[name] = model_.params.size();
        model_.params.push_back(std::move(p));
      }
    }
    auto* p = model_.find(name);
    if (p == nullptr) throw Error(ErrorKind::ArchMismatch, "model has no parameter '" + name + "'");
    if (p->value.shape != shape) {
      throw Error(ErrorKind::ArchMismatch, "parameter '" + name + "' has shape " + shape_string(p->value.shape) +
                                               ", architecture expects " + shape_string(shape));
    }
    if constexpr (kMutable) {
      // registration may still reallocate the parameter list, so copy
      if (init_ != nullptr) return tape_.constant(p->value);
      if (tape_.grad_enabled()) return tape_.parameter(*p);
    }
    return tape_.constant_ref(p->value);
  }

  Tape& tape_;
  Model& model_;
  RngState* init_;
  Var temb_act_;
};

inline Tensor encode_windows(std::span<const DiffusedWindow> windows) {
  const int batch = static_cast<int>(windows.size());
  const int len = batch ? static_cast<int>(windows[0].trans.size()) : 0;
  Tensor x({6, batch, len});
  for (int b = 0; b < batch; ++b) {
    const auto& w = windows[b];
    if (static_cast<int>(w.trans.size()) != len || static_cast<int>(w.rot.size()) != len) {
      throw Error(ErrorKind::ShapeError, "all windows in a batch must have the same length");
    }
    for (int l = 0; l < len; ++l) {
      const Vec3 tv = w.trans[l];
      const Vec3 rv = log_so3_principal(w.rot[l]);
      for (int c = 0; c < 3; ++c) {
        x.data[(static_cast<std::size_t>(c) * batch + b) * len + l] = static_cast<float>(tv[c]);
        x.data[(static_cast<std::size_t>(c + 3) * batch + b) * len + l] = static_cast<float>(rv[c]);
      }
    }
  }
  return x;
}

}  // namespace detail

/// Creates a model with freshly initialized parameters.
inline EstimatorModel make_model(const ArchConfig& arch, std::uint64_t init_seed = 0, ScheduleConfig schedule = {}) {
  arch.validate();
  EstimatorModel m;
  m.arch = arch;
  m.schedule = schedule;
  RngState rng(init_seed, 0x1417);
  Tape tape(false);
  const int len = 1 << arch.depth;
  Var x = tape.constant(Tensor({6, 1, len}));
  const int step = 0;
  detail::UNetGraph<EstimatorModel>(tape, m, &rng).run(x, std::span<const int>(&step, 1));
  return m;
}

/// Records the estimator on `tape`; gradients flow into model parameters
/// when the tape has gradients enabled.
inline Var unet_forward(Tape& tape, EstimatorModel& model, Var x, std::span<const int> steps) {
  return detail::UNetGraph<EstimatorModel>(tape, model).run(x, steps);
}

inline Var unet_forward(Tape& tape, const EstimatorModel& model, Var x, std::span<const int> steps) {
  return detail::UNetGraph<const EstimatorModel>(tape, model).run(x, steps);
}

struct ScorePair {
  std::vector<Vec3> score_trans;
  std::vector<Vec3> score_rot;
};

/// Single-window evaluation from translation and rotation-tangent inputs.
inline ScorePair forward(const EstimatorModel& model, std::span<const Vec3> xt_trans, std::span<const Vec3> xt_rot_tangent,
                         int t) {
  if (xt_trans.size() != xt_rot_tangent.size()) throw Error(ErrorKind::ShapeError, "translation/rotation lengths differ");
  const int len = static_cast<int>(xt_trans.size());
  Tensor x({6, 1, len});
  for (int l = 0; l < len; ++l)
    for (int c = 0; c < 3; ++c) {
      x.data[static_cast<std::size_t>(c) * len + l] = static_cast<float>(xt_trans[l][c]);
      x.data[static_cast<std::size_t>(c + 3) * len + l] = static_cast<float>(xt_rot_tangent[l][c]);
    }
  Tape tape(false);
  const Tensor& y = tape.value(unet_forward(tape, model, tape.constant(std::move(x)), std::span<const int>(&t, 1)));
  ScorePair out;
  out.score_trans.resize(len);
  out.score_rot.resize(len);
  for (int l = 0; l < len; ++l)
    for (int c = 0; c < 3; ++c) {
      out.score_trans[l][c] = y.data[static_cast<std::size_t>(c) * len + l];
      out.score_rot[l][c] = y.data[static_cast<std::size_t>(c + 3) * len + l];
    }
  return out;
}

/// Batched evaluation on diffused windows (rotations are encoded through the
/// principal logarithm). Splits into chunks of at most `max_batch`.
inline std::vector<ScoreWindow> predict(const EstimatorModel& model, std::span<const DiffusedWindow> windows,
                                        std::span<const int> steps, int max_batch = 32) {
  if (windows.size() != steps.size()) throw Error(ErrorKind::ShapeError, "one timestep per window");
  std::vector<ScoreWindow> out;
  out.reserve(windows.size());
  for (std::size_t start = 0; start < windows.size(); start += max_batch) {
    const std::size_t n = std::min<std::size_t>(max_batch, windows.size() - start);
    Tape tape(false);
    Var x = tape.constant(detail::encode_windows(windows.subspan(start, n)));
    const Tensor& y = tape.value(unet_forward(tape, model, x, steps.subspan(start, n)));
    const int batch = static_cast<int>(n), len = y.dim(2);
    for (int b = 0; b < batch; ++b) {
      ScoreWindow s;
      s.trans.resize(len);
      s.rot.resize(len);
      for (int l = 0; l < len; ++l)
        for (int c = 0; c < 3; ++c) {
          s.trans[l][c] = y.data[(static_cast<std::size_t>(c) * batch + b) * len + l];
          s.rot[l][c] = y.data[(static_cast<std::size_t>(c + 3) * batch + b) * len + l];
        }
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace dose3::nn
