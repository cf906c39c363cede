#pragma once

// Differentiable layer primitives over activations laid out as [C, B, L]
// (channel-major, then batch, then sequence position). With that layout a
// convolution is a single GEMM of the weights against an im2col buffer of
// shape [C_in * K, B * L_out] and the product lands directly in [C_out, B, L_out].

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dose3/nn/tensor.hpp"

namespace dose3::nn {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

namespace detail {

inline void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.shape.size() != rank) {
    throw Error(ErrorKind::ShapeError, std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                           shape_string(t.shape));
  }
}

inline void accumulate(Buffer& dst, const Buffer& src) {
  Eigen::Map<Eigen::VectorXf>(dst.data(), static_cast<Eigen::Index>(dst.size())) +=
      Eigen::Map<const Eigen::VectorXf>(src.data(), static_cast<Eigen::Index>(src.size()));
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace detail

/// 1-D convolution, zero padding. x [Cin,B,L], w [Cout,Cin,K], b [Cout].
inline Var conv1d(Tape& tape, Var x, Var w, Var b, int stride = 1, int pad = 0) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  detail::expect_rank(xv, 3, "conv1d input");
  detail::expect_rank(wv, 3, "conv1d weight");
  const int cin = xv.dim(0), batch = xv.dim(1), len = xv.dim(2);
  const int cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin) {
    throw Error(ErrorKind::ShapeError, "conv1d: weight " + shape_string(wv.shape) + " vs input " + shape_string(xv.shape));
  }
  if (tape.value(b).numel() != static_cast<std::size_t>(cout)) throw Error(ErrorKind::ShapeError, "conv1d bias size");
  const int lout = (len + 2 * pad - k) / stride + 1;
  if (lout < 1) throw Error(ErrorKind::ShapeError, "conv1d: sequence too short for kernel");
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const Eigen::Index rows = static_cast<Eigen::Index>(cin) * k;
  const Eigen::Index cols = static_cast<Eigen::Index>(batch) * lout;

  Buffer col;
  if (!pointwise) {
    col.assign(static_cast<std::size_t>(rows * cols), 0.0f);
    for (int ci = 0; ci < cin; ++ci)
      for (int j = 0; j < k; ++j) {
        float* dst = col.data() + (static_cast<std::size_t>(ci) * k + j) * cols;
        for (int bi = 0; bi < batch; ++bi) {
          const float* src = xv.data.data() + (static_cast<std::size_t>(ci) * batch + bi) * len;
          for (int lo = 0; lo < lout; ++lo) {
            const int li = lo * stride + j - pad;
            if (li >= 0 && li < len) dst[bi * lout + lo] = src[li];
          }
        }
      }
  }
  const float* colp = pointwise ? xv.data.data() : col.data();

  Tensor out({cout, batch, lout});
  MatrixMap o(out.data.data(), cout, cols);
  o.noalias() = ConstMatrixMap(wv.data.data(), cout, rows) * ConstMatrixMap(colp, rows, cols);
  o.colwise() += Eigen::Map<const Eigen::VectorXf>(tape.value(b).data.data(), cout);

  const bool ng = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
  Var y = tape.record(std::move(out), ng, [=](Tape& tp, Var self) {
    const auto& gy = tp.grad(self);
    ConstMatrixMap dy(gy.data(), cout, cols);
    const float* cp = pointwise ? tp.value(x).data.data() : tp.aux(self).data();
    ConstMatrixMap cm(cp, rows, cols);
    if (tp.needs_grad(w)) MatrixMap(tp.grad(w).data(), cout, rows).noalias() += dy * cm.transpose();
    if (tp.needs_grad(b)) Eigen::Map<Eigen::VectorXf>(tp.grad(b).data(), cout) += dy.rowwise().sum();
    if (tp.needs_grad(x)) {
      const Tensor& wv2 = tp.value(w);
      auto& gx = tp.grad(x);
      if (pointwise) {
        MatrixMap(gx.data(), rows, cols).noalias() += ConstMatrixMap(wv2.data.data(), cout, rows).transpose() * dy;
      } else {
        RowMatrix dcol = ConstMatrixMap(wv2.data.data(), cout, rows).transpose() * dy;
        for (int ci = 0; ci < cin; ++ci)
          for (int j = 0; j < k; ++j) {
            const float* src = dcol.data() + (static_cast<std::size_t>(ci) * k + j) * cols;
            for (int bi = 0; bi < batch; ++bi) {
              float* dst = gx.data() + (static_cast<std::size_t>(ci) * batch + bi) * len;
              for (int lo = 0; lo < lout; ++lo) {
                const int li = lo * stride + j - pad;
                if (li >= 0 && li < len) dst[li] += src[bi * lout + lo];
              }
            }
          }
      }
    }
  });
  if (tape.needs_grad(y) && !pointwise) tape.aux(y) = std::move(col);
  return y;
}

/// Dense layer over [In, B] -> [Out, B]; w [Out, In], b [Out].
inline Var linear(Tape& tape, Var x, Var w, Var b) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  detail::expect_rank(xv, 2, "linear input");
  detail::expect_rank(wv, 2, "linear weight");
  const int in = xv.dim(0), batch = xv.dim(1), outc = wv.dim(0);
  if (wv.dim(1) != in) throw Error(ErrorKind::ShapeError, "linear: weight/input mismatch");
  Tensor out({outc, batch});
  MatrixMap o(out.data.data(), outc, batch);
  o.noalias() = ConstMatrixMap(wv.data.data(), outc, in) * ConstMatrixMap(xv.data.data(), in, batch);
  o.colwise() += Eigen::Map<const Eigen::VectorXf>(tape.value(b).data.data(), outc);
  const bool ng = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
  return tape.record(std::move(out), ng, [=](Tape& tp, Var self) {
    ConstMatrixMap dy(tp.grad(self).data(), outc, batch);
    if (tp.needs_grad(w))
      MatrixMap(tp.grad(w).data(), outc, in).noalias() += dy * ConstMatrixMap(tp.value(x).data.data(), in, batch).transpose();
    if (tp.needs_grad(b)) Eigen::Map<Eigen::VectorXf>(tp.grad(b).data(), outc) += dy.rowwise().sum();
    if (tp.needs_grad(x))
      MatrixMap(tp.grad(x).data(), in, batch).noalias() += ConstMatrixMap(tp.value(w).data.data(), outc, in).transpose() * dy;
  });
}

inline Var silu(Tape& tape, Var x) {
  const Tensor& xv = tape.value(x);
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = xv.data[i] * detail::sigmoid(xv.data[i]);
  return tape.record(std::move(out), tape.needs_grad(x), [=](Tape& tp, Var self) {
    const auto& xs = tp.value(x).data;
    const auto& gy = tp.grad(self);
    auto& gx = tp.grad(x);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const float s = detail::sigmoid(xs[i]);
      gx[i] += gy[i] * s * (1.0f + xs[i] * (1.0f - s));
    }
  });
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (av.shape != bv.shape) {
    throw Error(ErrorKind::ShapeError, "add: " + shape_string(av.shape) + " vs " + shape_string(bv.shape));
  }
  Tensor out(av.shape);
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
  return tape.record(std::move(out), tape.needs_grad(a) || tape.needs_grad(b), [=](Tape& tp, Var self) {
    const auto& gy = tp.grad(self);
    if (tp.needs_grad(a)) detail::accumulate(tp.grad(a), gy);
    if (tp.needs_grad(b)) detail::accumulate(tp.grad(b), gy);
  });
}

/// x [C,B,L] + e [C,B] broadcast over L.
inline Var add_broadcast(Tape& tape, Var x, Var e) {
  const Tensor& xv = tape.value(x);
  const Tensor& ev = tape.value(e);
  detail::expect_rank(xv, 3, "add_broadcast input");
  const int c = xv.dim(0), batch = xv.dim(1), len = xv.dim(2);
  if (ev.shape != std::vector<int>{c, batch}) {
    throw Error(ErrorKind::ShapeError, "add_broadcast: " + shape_string(ev.shape) + " vs " + shape_string(xv.shape));
  }
  Tensor out = xv;
  for (int i = 0; i < c * batch; ++i)
    for (int l = 0; l < len; ++l) out.data[static_cast<std::size_t>(i) * len + l] += ev.data[i];
  return tape.record(std::move(out), tape.needs_grad(x) || tape.needs_grad(e), [=](Tape& tp, Var self) {
    const auto& gy = tp.grad(self);
    if (tp.needs_grad(x)) detail::accumulate(tp.grad(x), gy);
    if (tp.needs_grad(e)) {
      auto& ge = tp.grad(e);
      for (int i = 0; i < c * batch; ++i) {
        float s = 0.0f;
        for (int l = 0; l < len; ++l) s += gy[static_cast<std::size_t>(i) * len + l];
        ge[i] += s;
      }
    }
  });
}

/// Group normalization of x [C,B,L] over (channels in group, L) per batch item,
/// followed by per-channel affine gamma/beta.
inline Var group_norm(Tape& tape, Var x, Var gamma, Var beta, int groups, float eps = 1e-5f) {
  const Tensor& xv = tape.value(x);
  detail::expect_rank(xv, 3, "group_norm input");
  const int c = xv.dim(0), batch = xv.dim(1), len = xv.dim(2);
  if (groups < 1 || c % groups != 0) {
    throw Error(ErrorKind::ConfigError, "group_norm: " + std::to_string(c) + " channels not divisible into " +
                                            std::to_string(groups) + " groups");
  }
  const int cg = c / groups;
  const std::size_t bl = static_cast<std::size_t>(batch) * len;
  const auto& gv = tape.value(gamma).data;
  const auto& bv = tape.value(beta).data;
  // aux: normalized values [C,B,L] followed by rstd [groups, B]
  Buffer cache(xv.numel() + static_cast<std::size_t>(groups) * batch);
  Tensor out(xv.shape);
  const double n = static_cast<double>(cg) * len;
  for (int g = 0; g < groups; ++g)
    for (int bi = 0; bi < batch; ++bi) {
      double sum = 0.0, sq = 0.0;
      for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
        const float* p = xv.data.data() + ci * bl + static_cast<std::size_t>(bi) * len;
        for (int l = 0; l < len; ++l) sum += p[l];
      }
      const double mean = sum / n;
      for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
        const float* p = xv.data.data() + ci * bl + static_cast<std::size_t>(bi) * len;
        for (int l = 0; l < len; ++l) sq += (p[l] - mean) * (p[l] - mean);
      }
      const float rstd = static_cast<float>(1.0 / std::sqrt(sq / n + eps));
      cache[xv.numel() + static_cast<std::size_t>(g) * batch + bi] = rstd;
      for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
        const std::size_t off = ci * bl + static_cast<std::size_t>(bi) * len;
        for (int l = 0; l < len; ++l) {
          const float xh = static_cast<float>((xv.data[off + l] - mean) * rstd);
          cache[off + l] = xh;
          out.data[off + l] = xh * gv[ci] + bv[ci];
        }
      }
    }
  const bool ng = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
  Var y = tape.record(std::move(out), ng, [=](Tape& tp, Var self) {
    const auto& gy = tp.grad(self);
    const auto& xh = tp.aux(self);
    const std::size_t total = static_cast<std::size_t>(c) * bl;
    if (tp.needs_grad(gamma) || tp.needs_grad(beta)) {
      Buffer dg(c, 0.0f), db(c, 0.0f);
      for (int ci = 0; ci < c; ++ci) {
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = ci * bl; i < (ci + 1) * bl; ++i) {
          sg += gy[i] * xh[i];
          sb += gy[i];
        }
        dg[ci] = static_cast<float>(sg);
        db[ci] = static_cast<float>(sb);
      }
      if (tp.needs_grad(gamma)) detail::accumulate(tp.grad(gamma), dg);
      if (tp.needs_grad(beta)) detail::accumulate(tp.grad(beta), db);
    }
    if (tp.needs_grad(x)) {
      const auto& gam = tp.value(gamma).data;
      auto& gx = tp.grad(x);
      for (int g = 0; g < groups; ++g)
        for (int bi = 0; bi < batch; ++bi) {
          double s1 = 0.0, s2 = 0.0;
          for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
            const std::size_t off = ci * bl + static_cast<std::size_t>(bi) * len;
            for (int l = 0; l < len; ++l) {
              const double d = gy[off + l] * gam[ci];
              s1 += d;
              s2 += d * xh[off + l];
            }
          }
          const double rstd = xh[total + static_cast<std::size_t>(g) * batch + bi];
          const double m1 = s1 / n, m2 = s2 / n;
          for (int ci = g * cg; ci < (g + 1) * cg; ++ci) {
            const std::size_t off = ci * bl + static_cast<std::size_t>(bi) * len;
            for (int l = 0; l < len; ++l) {
              const double d = gy[off + l] * gam[ci];
              gx[off + l] += static_cast<float>(rstd * (d - m1 - xh[off + l] * m2));
            }
          }
        }
    }
  });
  if (tape.needs_grad(y)) tape.aux(y) = std::move(cache);
  return y;
}

/// Multi-head softmax self-attention over L. qkv [3C,B,L] holds the query,
/// key and value projections stacked along channels; returns [C,B,L].
inline Var attention(Tape& tape, Var qkv, int heads) {
  const Tensor& in = tape.value(qkv);
  detail::expect_rank(in, 3, "attention input");
  const int c3 = in.dim(0), batch = in.dim(1), len = in.dim(2);
  if (c3 % 3 != 0) throw Error(ErrorKind::ShapeError, "attention: channel count must be 3C");
  const int c = c3 / 3;
  if (heads < 1 || c % heads != 0) {
    throw Error(ErrorKind::ConfigError,
                "attention: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) + " heads");
  }
  const int dh = c / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const Eigen::Index stride = static_cast<Eigen::Index>(batch) * len;
  const std::size_t plane = static_cast<std::size_t>(len) * len;
  const bool ng = tape.needs_grad(qkv);
  Buffer probs(ng ? plane * batch * heads : 0);
  Tensor out({c, batch, len});
  RowMatrix p(len, len);
  auto block = [&](const float* base, int which, int h, int bi) {
    return ConstStridedMap(base + (static_cast<std::size_t>(which) * c + h * dh) * stride + static_cast<std::size_t>(bi) * len,
                           dh, len, Eigen::OuterStride<>(stride));
  };
  for (int bi = 0; bi < batch; ++bi)
    for (int h = 0; h < heads; ++h) {
      auto q = block(in.data.data(), 0, h, bi);
      auto k = block(in.data.data(), 1, h, bi);
      auto v = block(in.data.data(), 2, h, bi);
      p.noalias() = (q.transpose() * k) * scale;  // [query, key]
      for (int i = 0; i < len; ++i) {
        const float mx = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
      }
      StridedMap o(out.data.data() + static_cast<std::size_t>(h) * dh * stride + static_cast<std::size_t>(bi) * len, dh, len,
                   Eigen::OuterStride<>(stride));
      o.noalias() = v * p.transpose();
      if (ng) MatrixMap(probs.data() + (static_cast<std::size_t>(bi) * heads + h) * plane, len, len) = p;
    }
  Var y = tape.record(std::move(out), ng, [=](Tape& tp, Var self) {
    const auto& gy = tp.grad(self);
    const auto& x = tp.value(qkv).data;
    const auto& pr = tp.aux(self);
    auto& gx = tp.grad(qkv);
    RowMatrix dp(len, len), ds(len, len);
    for (int bi = 0; bi < batch; ++bi)
      for (int h = 0; h < heads; ++h) {
        auto blk = [&](const float* base, int which) {
          return ConstStridedMap(base + (static_cast<std::size_t>(which) * c + h * dh) * stride + static_cast<std::size_t>(bi) * len,
                                 dh, len, Eigen::OuterStride<>(stride));
        };
        auto gblk = [&](int which) {
          return StridedMap(gx.data() + (static_cast<std::size_t>(which) * c + h * dh) * stride + static_cast<std::size_t>(bi) * len,
                            dh, len, Eigen::OuterStride<>(stride));
        };
        ConstMatrixMap pm(pr.data() + (static_cast<std::size_t>(bi) * heads + h) * plane, len, len);
        auto q = blk(x.data(), 0);
        auto k = blk(x.data(), 1);
        auto v = blk(x.data(), 2);
        ConstStridedMap dout(gy.data() + static_cast<std::size_t>(h) * dh * stride + static_cast<std::size_t>(bi) * len, dh, len,
                             Eigen::OuterStride<>(stride));
        gblk(2).noalias() += dout * pm;
        dp.noalias() = dout.transpose() * v;
        for (int i = 0; i < len; ++i) {
          const float dot = pm.row(i).dot(dp.row(i));
          ds.row(i) = pm.row(i).array() * (dp.row(i).array() - dot);
        }
        ds *= scale;
        gblk(0).noalias() += k * ds.transpose();
        gblk(1).noalias() += q * ds;
      }
  });
  if (ng) tape.aux(y) = std::move(probs);
  return y;
}

/// Nearest-neighbour x2 upsampling along L.
inline Var upsample2(Tape& tape, Var x) {
  const Tensor& xv = tape.value(x);
  detail::expect_rank(xv, 3, "upsample2 input");
  const int rows = xv.dim(0) * xv.dim(1), len = xv.dim(2);
  Tensor out({xv.dim(0), xv.dim(1), 2 * len});
  for (int r = 0; r < rows; ++r)
    for (int l = 0; l < len; ++l) {
      const float v = xv.data[static_cast<std::size_t>(r) * len + l];
      out.data[static_cast<std::size_t>(r) * 2 * len + 2 * l] = v;
      out.data[static_cast<std::size_t>(r) * 2 * len + 2 * l + 1] = v;
    }
  return tape.record(std::move(out), tape.needs_grad(x), [=](Tape& tp, Var self) {
    const auto& gy = tp.grad(self);
    auto& gx = tp.grad(x);
    for (int r = 0; r < rows; ++r)
      for (int l = 0; l < len; ++l)
        gx[static_cast<std::size_t>(r) * len + l] +=
            gy[static_cast<std::size_t>(r) * 2 * len + 2 * l] + gy[static_cast<std::size_t>(r) * 2 * len + 2 * l + 1];
  });
}

/// Channel concatenation of [Ca,B,L] and [Cb,B,L].
inline Var concat_channels(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  detail::expect_rank(av, 3, "concat input");
  detail::expect_rank(bv, 3, "concat input");
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw Error(ErrorKind::ShapeError, "concat: " + shape_string(av.shape) + " vs " + shape_string(bv.shape));
  }
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.numel()));
  const std::size_t na = av.numel();
  return tape.record(std::move(out), tape.needs_grad(a) || tape.needs_grad(b), [=](Tape& tp, Var self) {
    const auto& gy = tp.grad(self);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += gy[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[na + i];
    }
  });
}

}  // namespace dose3::nn
