#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dose3/nn/unet.hpp"
#include "gradcheck.hpp"

using namespace dose3;
using namespace dose3::nn;

namespace {

Tensor random_tensor(std::vector<int> shape, RngState& rng, float scale = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(scale * rng.gaussian());
  return t;
}

ArchConfig tiny_arch() {
  ArchConfig a;
  a.base_width = 8;
  a.depth = 2;
  a.attention_heads = 2;
  a.time_embed_dim = 8;
  a.norm_groups = 2;
  return a;
}

// Gives the zero-initialized output layer random weights so gradients reach
// every parameter.
void randomize_output(EstimatorModel& m, RngState& rng) {
  for (auto& p : m.params)
    if (p.name.rfind("conv_out", 0) == 0)
      for (auto& v : p.value.data) v = static_cast<float>(0.2 * rng.gaussian());
}

double squared_output(const EstimatorModel& m, const Tensor& x, const std::vector<int>& steps) {
  Tape tape(false);
  const Tensor& y = tape.value(unet_forward(tape, m, tape.constant(x), steps));
  double s = 0.0;
  for (float v : y.data) s += static_cast<double>(v) * v;
  return s;
}

}  // namespace

class LayerGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LayerGradient, MatchesFiniteDifferences) {
  const auto lc = check::layer_cases()[GetParam()];
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_LE(check::grad_check(lc, seed), 1e-3) << lc.name << " seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(AllLayers, LayerGradient, ::testing::Range<std::size_t>(0, check::layer_cases().size()),
                         [](const auto& info) { return check::layer_cases()[info.param].name; });

TEST(TimeEmbedding, ZeroStepPattern) {
  const Tensor e = time_embedding(0, 16);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(e.data[i], i % 2 ? 1.0f : 0.0f);
}

TEST(TimeEmbedding, DistinctAndUnitPairs) {
  std::vector<Tensor> es;
  for (int t = 0; t < 30; ++t) es.push_back(time_embedding(t, 128));
  for (int a = 0; a < 30; ++a) {
    for (int i = 0; i < 64; ++i) {
      const float s = es[a].data[2 * i], c = es[a].data[2 * i + 1];
      EXPECT_NEAR(s * s + c * c, 1.0f, 1e-6f);
    }
    for (int b = a + 1; b < 30; ++b) {
      double d = 0.0;
      for (int i = 0; i < 128; ++i) d += std::pow(es[a].data[i] - es[b].data[i], 2);
      EXPECT_GT(std::sqrt(d), 1e-3);
    }
  }
  EXPECT_THROW(time_embedding(-1, 8), Error);
}

TEST(Attention, RowsSumToOne) {
  // With every value channel equal to one the output is the softmax row sum.
  RngState rng(1);
  Tensor qkv = random_tensor({12, 2, 9}, rng, 3.0f);
  std::fill(qkv.data.begin() + 8 * 18, qkv.data.end(), 1.0f);
  Tape tape(false);
  const Tensor& y = tape.value(attention(tape, tape.constant(qkv), 2));
  for (float v : y.data) EXPECT_NEAR(v, 1.0f, 1e-5f);
}

TEST(Attention, SinglePositionReturnsValue) {
  RngState rng(2);
  const Tensor qkv = random_tensor({6, 3, 1}, rng);
  Tape tape(false);
  const Tensor& y = tape.value(attention(tape, tape.constant(qkv), 1));
  for (int c = 0; c < 2; ++c)
    for (int b = 0; b < 3; ++b) EXPECT_FLOAT_EQ(y.data[c * 3 + b], qkv.data[(4 + c) * 3 + b]);
}

TEST(Attention, PermutationEquivariant) {
  RngState rng(3);
  const int c3 = 12, len = 7;
  const Tensor qkv = random_tensor({c3, 1, len}, rng);
  std::vector<int> perm(len);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[1], perm[4]);
  Tensor permuted({c3, 1, len});
  for (int c = 0; c < c3; ++c)
    for (int l = 0; l < len; ++l) permuted.data[c * len + l] = qkv.data[c * len + perm[l]];
  Tape tape(false);
  const Tensor& a = tape.value(attention(tape, tape.constant(qkv), 2));
  const Tensor& b = tape.value(attention(tape, tape.constant(permuted), 2));
  for (int c = 0; c < c3 / 3; ++c)
    for (int l = 0; l < len; ++l) EXPECT_NEAR(b.data[c * len + l], a.data[c * len + perm[l]], 1e-6f);
}

TEST(Attention, HeadsMustDivideChannels) {
  Tape tape(false);
  try {
    attention(tape, tape.constant(Tensor({9, 1, 4})), 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
  }
  ArchConfig a = tiny_arch();
  a.attention_heads = 3;
  EXPECT_THROW(make_model(a), Error);
}

TEST(Model, ZeroOutputAtInitialization) {
  const EstimatorModel m = make_model(tiny_arch(), 4);
  RngState rng(4);
  std::vector<Vec3> tr(16), rt(16);
  for (auto& v : tr) v = sample_gaussian_vec3(1.0, rng);
  for (auto& v : rt) v = sample_gaussian_vec3(0.5, rng);
  const auto out = forward(m, tr, rt, 7);
  for (int l = 0; l < 16; ++l) {
    EXPECT_EQ(out.score_trans[l], (Vec3{0, 0, 0}));
    EXPECT_EQ(out.score_rot[l], (Vec3{0, 0, 0}));
  }
}

TEST(Model, DeterministicAndShapePreserving) {
  EstimatorModel m = make_model(tiny_arch(), 5);
  RngState rng(5);
  randomize_output(m, rng);
  for (int len : {64, 128, 256, 512}) {
    std::vector<Vec3> tr(len), rt(len);
    for (auto& v : tr) v = sample_gaussian_vec3(1.0, rng);
    for (auto& v : rt) v = sample_gaussian_vec3(0.5, rng);
    const auto a = forward(m, tr, rt, 3);
    const auto b = forward(m, tr, rt, 3);
    ASSERT_EQ(a.score_trans.size(), static_cast<std::size_t>(len));
    ASSERT_EQ(a.score_rot.size(), static_cast<std::size_t>(len));
    EXPECT_EQ(a.score_trans, b.score_trans);
    EXPECT_EQ(a.score_rot, b.score_rot);
  }
}

TEST(Model, DefaultArchitectureShape) {
  EstimatorModel m = make_model(ArchConfig{}, 6);
  RngState rng(6);
  randomize_output(m, rng);
  std::vector<Vec3> tr(128), rt(128);
  for (auto& v : tr) v = sample_gaussian_vec3(1.0, rng);
  const auto out = forward(m, tr, rt, 29);
  EXPECT_EQ(out.score_trans.size(), 128u);
  for (const auto& v : out.score_trans) EXPECT_TRUE(is_finite(v));
}

TEST(Model, RejectsBadLength) {
  const EstimatorModel m = make_model(tiny_arch(), 7);
  std::vector<Vec3> tr(18), rt(18);
  try {
    forward(m, tr, rt, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeError);
  }
  std::vector<Vec3> short_rot(17);
  EXPECT_THROW(forward(m, tr, short_rot, 0), Error);
}

TEST(Model, BatchedPredictMatchesSingle) {
  EstimatorModel m = make_model(tiny_arch(), 8);
  RngState rng(8);
  randomize_output(m, rng);
  std::vector<DiffusedWindow> ws(5);
  std::vector<int> steps{0, 4, 9, 17, 29};
  for (auto& w : ws)
    for (int l = 0; l < 16; ++l) {
      w.trans.push_back(sample_gaussian_vec3(1.0, rng));
      w.rot.push_back(exp_so3(sample_gaussian_vec3(0.5, rng)));
    }
  const auto batched = predict(m, ws, steps, 2);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    std::vector<Vec3> rt;
    for (const auto& r : ws[i].rot) rt.push_back(log_so3(r));
    const auto single = forward(m, ws[i].trans, rt, steps[i]);
    for (int l = 0; l < 16; ++l)
      for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(batched[i].trans[l][c], single.score_trans[l][c], 1e-5);
        EXPECT_NEAR(batched[i].rot[l][c], single.score_rot[l][c], 1e-5);
      }
  }
}

TEST(Backward, ScalarParametersMatchFiniteDifference) {
  EstimatorModel m = make_model(tiny_arch(), 9);
  RngState rng(9);
  randomize_output(m, rng);
  const Tensor x = random_tensor({6, 2, 16}, rng);
  const std::vector<int> steps{3, 21};

  m.zero_grad();
  Tape tape;
  Var y = unet_forward(tape, m, tape.constant(x), steps);
  const Tensor& out = tape.value(y);
  std::vector<float> up(out.numel());
  for (std::size_t i = 0; i < up.size(); ++i) up[i] = 2.0f * out.data[i];
  tape.backward(y, up);

  auto check = [&](Parameter* p, std::size_t idx, double h) {
    const float orig = p->value.data[idx];
    p->value.data[idx] = static_cast<float>(orig + h);
    const double plus = squared_output(m, x, steps);
    p->value.data[idx] = static_cast<float>(orig - h);
    const double minus = squared_output(m, x, steps);
    p->value.data[idx] = orig;
    const double fd = (plus - minus) / (2 * h);
    EXPECT_LE(std::abs(fd - p->grad[idx]) / std::max(std::abs(fd), 1e-6), 1e-3)
        << p->name << "[" << idx << "] h " << h << " fd " << fd << " analytic " << p->grad[idx];
  };
  auto largest = [](const Parameter& p) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < p.grad.size(); ++i)
      if (std::abs(p.grad[i]) > std::abs(p.grad[idx])) idx = i;
    return idx;
  };

  // h = 1e-3 on the entry with the largest gradient in the model.
  Parameter* top = &m.params[0];
  for (auto& p : m.params)
    if (std::abs(p.grad[largest(p)]) > std::abs(top->grad[largest(*top)])) top = &p;
  check(top, largest(*top), 1e-3);

  // Smaller gradients sit closer to float rounding; a wider step keeps the
  // difference quotient above it.
  for (const char* name : {"conv_in.w", "down0.res.conv1.w", "down1.attn.qkv.w", "mid.res1.temb.w", "temb.fc1.w",
                           "up0.res.norm2.g", "up1.up.b", "conv_out.b"}) {
    Parameter* p = m.find(name);
    ASSERT_NE(p, nullptr) << name;
    check(p, largest(*p), 1e-2);
  }
}

TEST(Backward, ZeroUpstreamAndRepeatability) {
  EstimatorModel m = make_model(tiny_arch(), 10);
  RngState rng(10);
  randomize_output(m, rng);
  const Tensor x = random_tensor({6, 1, 8}, rng);
  const std::vector<int> steps{5};
  auto grads = [&](bool zero) {
    m.zero_grad();
    Tape tape;
    Var y = unet_forward(tape, m, tape.constant(x), steps);
    std::vector<float> up(tape.value(y).numel(), zero ? 0.0f : 1.0f);
    tape.backward(y, up);
    std::vector<Buffer> g;
    for (const auto& p : m.params) g.push_back(p.grad);
    return g;
  };
  for (const auto& g : grads(true))
    for (float v : g) EXPECT_EQ(v, 0.0f);
  const auto a = grads(false), b = grads(false);
  EXPECT_EQ(a, b);
  bool any = false;
  for (const auto& g : a)
    for (float v : g) any = any || v != 0.0f;
  EXPECT_TRUE(any);
}

TEST(Backward, MissingTraceIsNoGraph) {
  auto expect_nograph = [](auto&& fn) {
    try {
      fn();
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::NoGraph);
    }
  };
  expect_nograph([] {
    Tape tape;
    Var c = tape.constant(Tensor({2}, 1.0f));
    std::vector<float> up(2, 1.0f);
    tape.backward(silu(tape, c), up);
  });
  expect_nograph([] {
    Tape tape(false);
    Parameter p{"p", Tensor({2}, 1.0f), {}};
    Var v = tape.parameter(p);
    std::vector<float> up(2, 1.0f);
    tape.backward(silu(tape, v), up);
  });
  expect_nograph([] {
    Tape tape;
    std::vector<float> up(1, 1.0f);
    tape.backward(Var{}, up);
  });
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Tape tape;
  Parameter w{"w", Tensor({2, 3}, 0.5f), {}};
  Parameter b{"b", Tensor({2}, 0.1f), {}};
  Tensor xin({3, 1}, 1.0f);
  Var x = tape.constant_ref(xin);
  Var y = linear(tape, x, tape.parameter(w), tape.parameter(b));
  std::vector<float> up(2, 1.0f);
  tape.backward(y, up);
  EXPECT_FALSE(tape.needs_grad(x));
  for (float g : w.grad) EXPECT_EQ(g, 1.0f);
  for (float v : xin.data) EXPECT_EQ(v, 1.0f);
}
