#include <gtest/gtest.h>

#include <functional>

#include "v2xvlm/nn.hpp"

using namespace v2x;
using namespace v2x::nn;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = rng.normal(0, sd);
  return m;
}

double weighted_sum(const Matrix& y, const Matrix& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * w.data()[i];
  return s;
}

// Perturbs every parameter block slightly so LayerNorm affine terms and
// biases are not at their trivial initial values.
void jitter(ParamStore& ps, Rng& rng) {
  for (auto& b : ps.blocks())
    for (auto& v : b.value) v += rng.normal(0, 0.05);
}

// Checks param gradients and one input gradient of a layer whose forward is
// wrapped as x -> y, with loss sum(y * W).
void check_layer(ParamStore& ps, Matrix x, const std::function<Matrix(const Matrix&)>& fwd,
                 const std::function<Matrix(const Matrix& x, const Matrix& dy, Grads& g)>& bwd, Rng& rng) {
  const Matrix y0 = fwd(x);
  const Matrix W = random_matrix(y0.rows(), y0.cols(), rng);
  Grads g(ps);
  const Matrix dx = bwd(x, W, g);
  const double eps = 1e-5;

  for (std::size_t b = 0; b < ps.count(); ++b) {
    auto& val = ps[b].value;
    for (std::size_t i = 0; i < val.size(); i += 1 + val.size() / 7) {
      const double orig = val[i];
      val[i] = orig + eps;
      const double fp = weighted_sum(fwd(x), W);
      val[i] = orig - eps;
      const double fm = weighted_sum(fwd(x), W);
      val[i] = orig;
      const double num = (fp - fm) / (2 * eps);
      EXPECT_LE(relative_error(g[b][i], num, 1e-3), 1e-5) << ps[b].name << "[" << i << "]";
    }
  }
  for (std::size_t i = 0; i < x.size(); i += 1 + x.size() / 9) {
    const double orig = x.data()[i];
    x.data()[i] = orig + eps;
    const double fp = weighted_sum(fwd(x), W);
    x.data()[i] = orig - eps;
    const double fm = weighted_sum(fwd(x), W);
    x.data()[i] = orig;
    EXPECT_LE(relative_error(dx.data()[i], (fp - fm) / (2 * eps), 1e-6), 1e-5) << "dx[" << i << "]";
  }
}

}  // namespace

TEST(Kernels, MatmulMatchesNaive) {
  Rng rng(1);
  const Matrix x = random_matrix(5, 7, rng);
  std::vector<double> w(7 * 3);
  for (auto& v : w) v = rng.normal();
  const Matrix y = matmul(x, w, 7, 3);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += x(i, k) * w[k * 3 + j];
      EXPECT_NEAR(y(i, j), s, 1e-12);
    }
  EXPECT_THROW(matmul(x, w, 6, 3), Error);
}

TEST(Kernels, DotpOddLengths) {
  for (std::size_t n : {0, 1, 3, 4, 5, 9}) {
    std::vector<double> a(n), b(n);
    double want = 0;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<double>(i) + 1;
      b[i] = 2.0 - static_cast<double>(i);
      want += a[i] * b[i];
    }
    EXPECT_DOUBLE_EQ(dotp(a.data(), b.data(), n), want);
  }
}

TEST(Gradients, Linear) {
  Rng rng(2);
  ParamStore ps;
  const auto lin = Linear::make(ps, "l", 6, 4, rng);
  jitter(ps, rng);
  check_layer(
      ps, random_matrix(3, 6, rng), [&](const Matrix& x) { return lin.forward(ps, x); },
      [&](const Matrix& x, const Matrix& dy, Grads& g) { return lin.backward(ps, x, dy, g); }, rng);
}

TEST(Gradients, LayerNorm) {
  Rng rng(3);
  ParamStore ps;
  const auto ln = LayerNorm::make(ps, "ln", 6);
  jitter(ps, rng);
  check_layer(
      ps, random_matrix(3, 6, rng),
      [&](const Matrix& x) {
        LayerNorm::Cache c;
        return ln.forward(ps, x, c);
      },
      [&](const Matrix& x, const Matrix& dy, Grads& g) {
        LayerNorm::Cache c;
        ln.forward(ps, x, c);
        return ln.backward(ps, c, dy, g);
      },
      rng);
}

TEST(Gradients, GeluDerivative) {
  for (double x = -4; x <= 4; x += 0.37) {
    const double num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
    EXPECT_NEAR(gelu_grad(x), num, 1e-7);
  }
}

TEST(Gradients, SelfAttentionBlock) {
  Rng rng(4);
  ParamStore ps;
  const auto blk = EncoderBlock::make(ps, "enc", 8, 2, rng);
  jitter(ps, rng);
  check_layer(
      ps, random_matrix(5, 8, rng),
      [&](const Matrix& x) {
        EncoderBlock::Cache c;
        return blk.forward(ps, x, c);
      },
      [&](const Matrix& x, const Matrix& dy, Grads& g) {
        EncoderBlock::Cache c;
        blk.forward(ps, x, c);
        return blk.backward(ps, c, dy, g);
      },
      rng);
}

TEST(Gradients, CrossBlockBothInputs) {
  Rng rng(5);
  ParamStore ps;
  const auto blk = CrossBlock::make(ps, "x", 8, 2, rng);
  jitter(ps, rng);
  Matrix kv = random_matrix(3, 8, rng);
  // Query-side input.
  check_layer(
      ps, random_matrix(4, 8, rng),
      [&](const Matrix& x) {
        CrossBlock::Cache c;
        return blk.forward(ps, x, kv, c);
      },
      [&](const Matrix& x, const Matrix& dy, Grads& g) {
        CrossBlock::Cache c;
        blk.forward(ps, x, kv, c);
        return blk.backward(ps, c, dy, g).dx;
      },
      rng);
  // Key/value-side input.
  const Matrix q = random_matrix(4, 8, rng);
  check_layer(
      ps, kv,
      [&](const Matrix& m) {
        CrossBlock::Cache c;
        return blk.forward(ps, q, m, c);
      },
      [&](const Matrix& m, const Matrix& dy, Grads& g) {
        CrossBlock::Cache c;
        blk.forward(ps, q, m, c);
        return blk.backward(ps, c, dy, g).dkv;
      },
      rng);
}

TEST(Gradients, DecoderBlockBothInputs) {
  Rng rng(6);
  ParamStore ps;
  const auto blk = DecoderBlock::make(ps, "dec", 8, 2, rng);
  jitter(ps, rng);
  const Matrix mem = random_matrix(5, 8, rng);
  check_layer(
      ps, random_matrix(4, 8, rng),
      [&](const Matrix& x) {
        DecoderBlock::Cache c;
        return blk.forward(ps, x, mem, c);
      },
      [&](const Matrix& x, const Matrix& dy, Grads& g) {
        DecoderBlock::Cache c;
        blk.forward(ps, x, mem, c);
        return blk.backward(ps, c, dy, g).dx;
      },
      rng);
  const Matrix x = random_matrix(4, 8, rng);
  check_layer(
      ps, mem,
      [&](const Matrix& m) {
        DecoderBlock::Cache c;
        return blk.forward(ps, x, m, c);
      },
      [&](const Matrix& m, const Matrix& dy, Grads& g) {
        DecoderBlock::Cache c;
        blk.forward(ps, x, m, c);
        return blk.backward(ps, c, dy, g).dmem;
      },
      rng);
}

TEST(MacCounter, SelfAttentionTallies) {
  Rng rng(7);
  ParamStore ps;
  const auto a = Attention::make(ps, "a", 16, 4, rng);
  const Matrix x = random_matrix(6, 16, rng);
  MacCounter mc;
  {
    MacScope scope(mc);
    Attention::Cache c;
    a.forward(ps, x, x, c);
  }
  const auto& t = mc.blocks.at("a");
  EXPECT_EQ(t[MacTag::q_proj], 6u * 16 * 16);
  EXPECT_EQ(t[MacTag::k_proj], 6u * 16 * 16);
  EXPECT_EQ(t[MacTag::o_proj], 6u * 16 * 16);
  EXPECT_EQ(t[MacTag::scores], 6u * 6 * 16);
  EXPECT_EQ(t[MacTag::mix], 6u * 6 * 16);
  EXPECT_EQ(t.formula_convention(), 2u * 6 * 16 * 16 + 6u * 6 * 16);
}

TEST(MacCounter, InactiveOutsideScope) {
  Rng rng(8);
  ParamStore ps;
  const auto a = Attention::make(ps, "a", 8, 2, rng);
  MacCounter mc;
  Attention::Cache c;
  a.forward(ps, random_matrix(2, 8, rng), random_matrix(3, 8, rng), c);
  EXPECT_TRUE(mc.blocks.empty());
}

TEST(ParamStore, HashTracksValues) {
  Rng rng(9);
  ParamStore ps;
  Linear::make(ps, "l", 3, 3, rng);
  const auto h = ps.hash();
  ParamStore copy = ps;
  EXPECT_EQ(copy.hash(), h);
  EXPECT_TRUE(copy == ps);
  copy[0].value[0] += 1e-12;
  EXPECT_NE(copy.hash(), h);
  EXPECT_FALSE(copy == ps);
}

TEST(Attention, RejectsIndivisibleHeads) {
  Rng rng(1);
  ParamStore ps;
  EXPECT_THROW(Attention::make(ps, "a", 10, 3, rng), Error);
}
