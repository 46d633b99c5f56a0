#pragma once

// Transformer building blocks with hand-written backward passes.
//
// Every layer is a small index record into a ParamStore plus a forward that
// fills a cache and a backward that consumes it. Reductions run in a fixed
// index order so results are bit-reproducible for a given seed.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "v2xvlm/numerics.hpp"

namespace v2x::nn {

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation

enum class MacTag : std::size_t { q_proj, k_proj, v_proj, o_proj, scores, mix, other, count_ };

struct MacTally {
  std::array<std::uint64_t, static_cast<std::size_t>(MacTag::count_)> macs{};

  std::uint64_t operator[](MacTag t) const { return macs[static_cast<std::size_t>(t)]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto m : macs) s += m;
    return s;
  }

  // Query-stream projections (Q and output) plus the score product QK^T.
  // This is the subset the closed-form attention FLOP formulas count.
  std::uint64_t formula_convention() const {
    return (*this)[MacTag::q_proj] + (*this)[MacTag::o_proj] + (*this)[MacTag::scores];
  }
};

// Per-block tallies, keyed by the attention block's parameter prefix.
struct MacCounter {
  std::map<std::string, MacTally> blocks;
};

namespace detail {
inline thread_local MacCounter* active_counter = nullptr;
inline thread_local const std::string* active_label = nullptr;
inline thread_local MacTag active_tag = MacTag::other;
}  // namespace detail

inline void count_macs(std::uint64_t n) {
  if (detail::active_counter == nullptr || detail::active_label == nullptr) return;
  detail::active_counter->blocks[*detail::active_label].macs[static_cast<std::size_t>(detail::active_tag)] += n;
}

class MacScope {
 public:
  explicit MacScope(MacCounter& c) : prev_(detail::active_counter) { detail::active_counter = &c; }
  ~MacScope() { detail::active_counter = prev_; }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  MacCounter* prev_;
};

class TagScope {
 public:
  TagScope(const std::string& label, MacTag tag)
      : prev_label_(detail::active_label), prev_tag_(detail::active_tag) {
    detail::active_label = &label;
    detail::active_tag = tag;
  }
  ~TagScope() {
    detail::active_label = prev_label_;
    detail::active_tag = prev_tag_;
  }
  TagScope(const TagScope&) = delete;
  TagScope& operator=(const TagScope&) = delete;

 private:
  const std::string* prev_label_;
  MacTag prev_tag_;
};

// ---------------------------------------------------------------------------
// Parameters

struct ParamBlock {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;

  std::size_t size() const { return value.size(); }
};

class ParamStore {
 public:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    index_[name] = blocks_.size();
    blocks_.push_back({std::move(name), rows, cols, std::vector<double>(rows * cols, 0.0)});
    return blocks_.size() - 1;
  }

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(Errc::shape_mismatch, "no parameter block named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamBlock& operator[](std::size_t i) { return blocks_[i]; }
  const ParamBlock& operator[](std::size_t i) const { return blocks_[i]; }
  std::size_t count() const { return blocks_.size(); }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::vector<ParamBlock>& blocks() { return blocks_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.size();
    return n;
  }

  // FNV-1a over names and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const void* p, std::size_t n) {
      const auto* c = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= c[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& b : blocks_) {
      feed(b.name.data(), b.name.size());
      feed(b.value.data(), b.value.size() * sizeof(double));
    }
    return h;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.blocks_.size() != b.blocks_.size()) return false;
    for (std::size_t i = 0; i < a.blocks_.size(); ++i) {
      const auto& x = a.blocks_[i];
      const auto& y = b.blocks_[i];
      if (x.name != y.name || x.rows != y.rows || x.cols != y.cols || x.value != y.value) return false;
    }
    return true;
  }

 private:
  std::vector<ParamBlock> blocks_;
  std::map<std::string, std::size_t> index_;
};

// Gradient buffers shaped like a ParamStore.
class Grads {
 public:
  Grads() = default;
  explicit Grads(const ParamStore& store) {
    g_.reserve(store.count());
    for (const auto& b : store.blocks()) g_.emplace_back(b.size(), 0.0);
  }

  std::vector<double>& operator[](std::size_t i) { return g_[i]; }
  const std::vector<double>& operator[](std::size_t i) const { return g_[i]; }
  std::size_t count() const { return g_.size(); }

  void zero() {
    for (auto& v : g_) std::fill(v.begin(), v.end(), 0.0);
  }

  void add(const Grads& other, double scale = 1.0) {
    for (std::size_t i = 0; i < g_.size(); ++i)
      for (std::size_t j = 0; j < g_[i].size(); ++j) g_[i][j] += scale * other.g_[i][j];
  }

 private:
  std::vector<std::vector<double>> g_;
};

// ---------------------------------------------------------------------------
// Kernels

// Inner kernels. Four partial sums keep the dot product vectorizable
// without relaxing floating-point semantics.
inline double dotp(const double* __restrict a, const double* __restrict b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double a, const double* __restrict x, double* __restrict y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

// Y[n x out] = X[n x in] * W[in x out]
inline Matrix matmul(const Matrix& x, const std::vector<double>& w, std::size_t in, std::size_t out) {
  if (x.cols() != in || w.size() != in * out) fail(Errc::shape_mismatch, "matmul shape");
  Matrix y(x.rows(), out);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* yr = y.row(i).data();
    const double* xr = x.row(i).data();
    for (std::size_t k = 0; k < in; ++k) axpy(xr[k], w.data() + k * out, yr, out);
  }
  count_macs(static_cast<std::uint64_t>(x.rows()) * in * out);
  return y;
}

// dX[n x in] = dY[n x out] * W^T
inline Matrix matmul_wt(const Matrix& dy, const std::vector<double>& w, std::size_t in, std::size_t out) {
  Matrix dx(dy.rows(), in);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    const double* g = dy.row(i).data();
    for (std::size_t k = 0; k < in; ++k) dx(i, k) = dotp(g, w.data() + k * out, out);
  }
  return dx;
}

// dW[in x out] += X^T * dY
inline void accumulate_xt_dy(const Matrix& x, const Matrix& dy, std::vector<double>& dw) {
  const std::size_t in = x.cols();
  const std::size_t out = dy.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* g = dy.row(i).data();
    const double* xr = x.row(i).data();
    for (std::size_t k = 0; k < in; ++k) axpy(xr[k], g, dw.data() + k * out, out);
  }
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(Errc::shape_mismatch, "add shapes differ");
  auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

inline Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) fail(Errc::shape_mismatch, "vstack column mismatch");
  Matrix out(a.rows() + b.rows(), a.cols());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

inline Matrix rows_slice(const Matrix& a, std::size_t begin, std::size_t count) {
  Matrix out(count, a.cols());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(begin + i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Initialisation

inline void init_normal(ParamBlock& b, Rng& rng, double stddev) {
  for (double& v : b.value) v = rng.normal(0.0, stddev);
}
inline void init_constant(ParamBlock& b, double c) { std::fill(b.value.begin(), b.value.end(), c); }

// ---------------------------------------------------------------------------
// Linear

struct Linear {
  std::size_t w = 0, b = 0;
  std::size_t in = 0, out = 0;

  static Linear make(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w = ps.add(name + ".w", in, out);
    l.b = ps.add(name + ".b", 1, out);
    init_normal(ps[l.w], rng, 1.0 / std::sqrt(static_cast<double>(in)));
    return l;
  }

  Matrix forward(const ParamStore& ps, const Matrix& x) const {
    Matrix y = matmul(x, ps[w].value, in, out);
    const auto& bias = ps[b].value;
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < out; ++j) y(i, j) += bias[j];
    return y;
  }

  // Accumulates weight gradients; returns dX when requested.
  Matrix backward(const ParamStore& ps, const Matrix& x, const Matrix& dy, Grads& g, bool need_dx = true) const {
    accumulate_xt_dy(x, dy, g[w]);
    auto& db = g[b];
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < out; ++j) db[j] += dy(i, j);
    if (!need_dx) return {};
    return matmul_wt(dy, ps[w].value, in, out);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm

struct LayerNorm {
  static constexpr double kEps = 1e-5;
  std::size_t g = 0, b = 0;
  std::size_t dim = 0;

  struct Cache {
    Matrix xhat;
    std::vector<double> rstd;
  };

  static LayerNorm make(ParamStore& ps, const std::string& name, std::size_t dim) {
    LayerNorm ln;
    ln.dim = dim;
    ln.g = ps.add(name + ".g", 1, dim);
    ln.b = ps.add(name + ".b", 1, dim);
    init_constant(ps[ln.g], 1.0);
    return ln;
  }

  Matrix forward(const ParamStore& ps, const Matrix& x, Cache& c) const {
    const auto& gamma = ps[g].value;
    const auto& beta = ps[b].value;
    Matrix y(x.rows(), dim);
    c.xhat = Matrix(x.rows(), dim);
    c.rstd.assign(x.rows(), 0.0);
    const double inv_d = 1.0 / static_cast<double>(dim);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < dim; ++j) mean += x(i, j);
      mean *= inv_d;
      double var = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = x(i, j) - mean;
        var += d * d;
      }
      var *= inv_d;
      const double rstd = 1.0 / std::sqrt(var + kEps);
      c.rstd[i] = rstd;
      for (std::size_t j = 0; j < dim; ++j) {
        const double xh = (x(i, j) - mean) * rstd;
        c.xhat(i, j) = xh;
        y(i, j) = gamma[j] * xh + beta[j];
      }
    }
    return y;
  }

  Matrix backward(const ParamStore& ps, const Cache& c, const Matrix& dy, Grads& gr) const {
    const auto& gamma = ps[g].value;
    auto& dg = gr[g];
    auto& dbeta = gr[b];
    Matrix dx(dy.rows(), dim);
    const double inv_d = 1.0 / static_cast<double>(dim);
    std::vector<double> dxhat(dim);
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      double mean_dxhat = 0.0;
      double mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        dg[j] += dy(i, j) * c.xhat(i, j);
        dbeta[j] += dy(i, j);
        dxhat[j] = dy(i, j) * gamma[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * c.xhat(i, j);
      }
      mean_dxhat *= inv_d;
      mean_dxhat_xhat *= inv_d;
      for (std::size_t j = 0; j < dim; ++j)
        dx(i, j) = c.rstd[i] * (dxhat[j] - mean_dxhat - c.xhat(i, j) * mean_dxhat_xhat);
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// GELU (tanh form)

inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

// ---------------------------------------------------------------------------
// Feed-forward

struct FeedForward {
  Linear fc1, fc2;

  struct Cache {
    Matrix x, pre, act;
  };

  static FeedForward make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t hidden, Rng& rng) {
    return {Linear::make(ps, name + ".fc1", d, hidden, rng), Linear::make(ps, name + ".fc2", hidden, d, rng)};
  }

  Matrix forward(const ParamStore& ps, const Matrix& x, Cache& c) const {
    c.x = x;
    c.pre = fc1.forward(ps, x);
    c.act = c.pre;
    for (double& v : c.act.data()) v = gelu(v);
    return fc2.forward(ps, c.act);
  }

  Matrix backward(const ParamStore& ps, const Cache& c, const Matrix& dy, Grads& g) const {
    Matrix dact = fc2.backward(ps, c.act, dy, g);
    for (std::size_t i = 0; i < dact.size(); ++i) dact.data()[i] *= gelu_grad(c.pre.data()[i]);
    return fc1.backward(ps, c.x, dact, g);
  }
};

// ---------------------------------------------------------------------------
// Multi-head attention (queries from one stream, keys/values from another)

struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;
  std::size_t d = 0;
  std::string label;

  struct Cache {
    Matrix xq, xkv;
    Matrix Q, K, V, ctx;
    std::vector<Matrix> P;  // per head, Nq x Nk
  };

  static Attention make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) fail(Errc::invalid_config, "d must be divisible by heads");
    Attention a;
    a.q = Linear::make(ps, name + ".q", d, d, rng);
    a.k = Linear::make(ps, name + ".k", d, d, rng);
    a.v = Linear::make(ps, name + ".v", d, d, rng);
    a.o = Linear::make(ps, name + ".o", d, d, rng);
    a.heads = heads;
    a.d = d;
    a.label = name;
    return a;
  }

  std::size_t head_dim() const { return d / heads; }

  Matrix forward(const ParamStore& ps, const Matrix& xq, const Matrix& xkv, Cache& c) const {
    const std::size_t nq = xq.rows();
    const std::size_t nk = xkv.rows();
    const std::size_t dh = head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.xq = xq;
    c.xkv = xkv;
    {
      TagScope t(label, MacTag::q_proj);
      c.Q = q.forward(ps, xq);
    }
    {
      TagScope t(label, MacTag::k_proj);
      c.K = k.forward(ps, xkv);
    }
    {
      TagScope t(label, MacTag::v_proj);
      c.V = v.forward(ps, xkv);
    }
    c.P.assign(heads, Matrix(nq, nk));
    c.ctx = Matrix(nq, d);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      Matrix& P = c.P[h];
      {
        TagScope t(label, MacTag::scores);
        for (std::size_t i = 0; i < nq; ++i) {
          for (std::size_t j = 0; j < nk; ++j) {
            P(i, j) = dotp(c.Q.row(i).data() + off, c.K.row(j).data() + off, dh) * scale;
          }
        }
        count_macs(static_cast<std::uint64_t>(nq) * nk * dh);
      }
      for (std::size_t i = 0; i < nq; ++i) {
        auto row = P.row(i);
        double m = row[0];
        for (double x : row) m = x > m ? x : m;
        double sum = 0.0;
        for (double& x : row) {
          x = std::exp(x - m);
          sum += x;
        }
        for (double& x : row) x /= sum;
      }
      {
        TagScope t(label, MacTag::mix);
        for (std::size_t i = 0; i < nq; ++i) {
          for (std::size_t j = 0; j < nk; ++j) {
            axpy(P(i, j), c.V.row(j).data() + off, c.ctx.row(i).data() + off, dh);
          }
        }
        count_macs(static_cast<std::uint64_t>(nq) * nk * dh);
      }
    }
    TagScope t(label, MacTag::o_proj);
    return o.forward(ps, c.ctx);
  }

  struct InputGrads {
    Matrix dxq, dxkv;
  };

  InputGrads backward(const ParamStore& ps, const Cache& c, const Matrix& dy, Grads& g) const {
    const std::size_t nq = c.xq.rows();
    const std::size_t nk = c.xkv.rows();
    const std::size_t dh = head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dctx = o.backward(ps, c.ctx, dy, g);
    Matrix dQ(nq, d), dK(nk, d), dV(nk, d);
    Matrix dP(nq, nk);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      const Matrix& P = c.P[h];
      for (std::size_t i = 0; i < nq; ++i) {
        for (std::size_t j = 0; j < nk; ++j) {
          dP(i, j) = dotp(dctx.row(i).data() + off, c.V.row(j).data() + off, dh);
          axpy(P(i, j), dctx.row(i).data() + off, dV.row(j).data() + off, dh);
        }
      }
      for (std::size_t i = 0; i < nq; ++i) {
        double rowdot = 0.0;
        for (std::size_t j = 0; j < nk; ++j) rowdot += dP(i, j) * P(i, j);
        for (std::size_t j = 0; j < nk; ++j) {
          const double ds = P(i, j) * (dP(i, j) - rowdot) * scale;
          axpy(ds, c.K.row(j).data() + off, dQ.row(i).data() + off, dh);
          axpy(ds, c.Q.row(i).data() + off, dK.row(j).data() + off, dh);
        }
      }
    }
    InputGrads out;
    out.dxq = q.backward(ps, c.xq, dQ, g);
    out.dxkv = k.backward(ps, c.xkv, dK, g);
    add_inplace(out.dxkv, v.backward(ps, c.xkv, dV, g));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Pre-LN encoder block: x + Attn(LN(x)), then + FFN(LN(.))

struct EncoderBlock {
  LayerNorm ln1, ln2;
  Attention attn;
  FeedForward ffn;

  struct Cache {
    LayerNorm::Cache ln1, ln2;
    Attention::Cache attn;
    FeedForward::Cache ffn;
  };

  static EncoderBlock make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng) {
    EncoderBlock e;
    e.ln1 = LayerNorm::make(ps, name + ".ln1", d);
    e.attn = Attention::make(ps, name + ".attn", d, heads, rng);
    e.ln2 = LayerNorm::make(ps, name + ".ln2", d);
    e.ffn = FeedForward::make(ps, name + ".ffn", d, 4 * d, rng);
    return e;
  }

  Matrix forward(const ParamStore& ps, const Matrix& x, Cache& c) const {
    Matrix n1 = ln1.forward(ps, x, c.ln1);
    Matrix x1 = attn.forward(ps, n1, n1, c.attn);
    add_inplace(x1, x);
    Matrix n2 = ln2.forward(ps, x1, c.ln2);
    Matrix y = ffn.forward(ps, n2, c.ffn);
    add_inplace(y, x1);
    return y;
  }

  Matrix backward(const ParamStore& ps, const Cache& c, const Matrix& dy, Grads& g) const {
    Matrix dx1 = ln2.backward(ps, c.ln2, ffn.backward(ps, c.ffn, dy, g), g);
    add_inplace(dx1, dy);
    auto ag = attn.backward(ps, c.attn, dx1, g);
    add_inplace(ag.dxq, ag.dxkv);
    Matrix dx = ln1.backward(ps, c.ln1, ag.dxq, g);
    add_inplace(dx, dx1);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Cross-attention block: queries attend to a separate key/value stream.

struct CrossBlock {
  LayerNorm ln_q, ln_kv, ln2;
  Attention attn;
  FeedForward ffn;

  struct Cache {
    LayerNorm::Cache ln_q, ln_kv, ln2;
    Attention::Cache attn;
    FeedForward::Cache ffn;
  };

  static CrossBlock make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng) {
    CrossBlock cb;
    cb.ln_q = LayerNorm::make(ps, name + ".ln_q", d);
    cb.ln_kv = LayerNorm::make(ps, name + ".ln_kv", d);
    cb.attn = Attention::make(ps, name + ".attn", d, heads, rng);
    cb.ln2 = LayerNorm::make(ps, name + ".ln2", d);
    cb.ffn = FeedForward::make(ps, name + ".ffn", d, 4 * d, rng);
    return cb;
  }

  Matrix forward(const ParamStore& ps, const Matrix& x, const Matrix& kv, Cache& c) const {
    Matrix nq = ln_q.forward(ps, x, c.ln_q);
    Matrix nkv = ln_kv.forward(ps, kv, c.ln_kv);
    Matrix x1 = attn.forward(ps, nq, nkv, c.attn);
    add_inplace(x1, x);
    Matrix n2 = ln2.forward(ps, x1, c.ln2);
    Matrix y = ffn.forward(ps, n2, c.ffn);
    add_inplace(y, x1);
    return y;
  }

  struct InputGrads {
    Matrix dx, dkv;
  };

  InputGrads backward(const ParamStore& ps, const Cache& c, const Matrix& dy, Grads& g) const {
    Matrix dx1 = ln2.backward(ps, c.ln2, ffn.backward(ps, c.ffn, dy, g), g);
    add_inplace(dx1, dy);
    auto ag = attn.backward(ps, c.attn, dx1, g);
    InputGrads out;
    out.dx = ln_q.backward(ps, c.ln_q, ag.dxq, g);
    add_inplace(out.dx, dx1);
    out.dkv = ln_kv.backward(ps, c.ln_kv, ag.dxkv, g);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Decoder block: self-attention over query slots, cross-attention into the
// fused memory, feed-forward.

struct DecoderBlock {
  LayerNorm ln1, ln2, ln_mem, ln3;
  Attention self_attn, cross_attn;
  FeedForward ffn;

  struct Cache {
    LayerNorm::Cache ln1, ln2, ln_mem, ln3;
    Attention::Cache self_attn, cross_attn;
    FeedForward::Cache ffn;
  };

  static DecoderBlock make(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng) {
    DecoderBlock b;
    b.ln1 = LayerNorm::make(ps, name + ".ln1", d);
    b.self_attn = Attention::make(ps, name + ".self", d, heads, rng);
    b.ln2 = LayerNorm::make(ps, name + ".ln2", d);
    b.ln_mem = LayerNorm::make(ps, name + ".ln_mem", d);
    b.cross_attn = Attention::make(ps, name + ".cross", d, heads, rng);
    b.ln3 = LayerNorm::make(ps, name + ".ln3", d);
    b.ffn = FeedForward::make(ps, name + ".ffn", d, 4 * d, rng);
    return b;
  }

  Matrix forward(const ParamStore& ps, const Matrix& x, const Matrix& mem, Cache& c) const {
    Matrix n1 = ln1.forward(ps, x, c.ln1);
    Matrix x1 = self_attn.forward(ps, n1, n1, c.self_attn);
    add_inplace(x1, x);
    Matrix n2 = ln2.forward(ps, x1, c.ln2);
    Matrix nm = ln_mem.forward(ps, mem, c.ln_mem);
    Matrix x2 = cross_attn.forward(ps, n2, nm, c.cross_attn);
    add_inplace(x2, x1);
    Matrix n3 = ln3.forward(ps, x2, c.ln3);
    Matrix y = ffn.forward(ps, n3, c.ffn);
    add_inplace(y, x2);
    return y;
  }

  struct InputGrads {
    Matrix dx, dmem;
  };

  InputGrads backward(const ParamStore& ps, const Cache& c, const Matrix& dy, Grads& g) const {
    Matrix dx2 = ln3.backward(ps, c.ln3, ffn.backward(ps, c.ffn, dy, g), g);
    add_inplace(dx2, dy);
    auto cg = cross_attn.backward(ps, c.cross_attn, dx2, g);
    InputGrads out;
    out.dmem = ln_mem.backward(ps, c.ln_mem, cg.dxkv, g);
    Matrix dx1 = ln2.backward(ps, c.ln2, cg.dxq, g);
    add_inplace(dx1, dx2);
    auto sg = self_attn.backward(ps, c.self_attn, dx1, g);
    add_inplace(sg.dxq, sg.dxkv);
    out.dx = ln1.backward(ps, c.ln1, sg.dxq, g);
    add_inplace(out.dx, dx1);
    return out;
  }
};

}  // namespace v2x::nn
