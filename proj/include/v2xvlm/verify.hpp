#pragma once

// Self-checks: analytic gradients against central differences, loss
// identities, and closed-form FLOP counts against the instrumented model.

#include <cmath>
#include <string>
#include <vector>

#include "v2xvlm/flops.hpp"
#include "v2xvlm/losses.hpp"
#include "v2xvlm/model.hpp"
#include "v2xvlm/trainer.hpp"

namespace v2x::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  double worst = 0.0;  // largest observed error
  double tolerance = 0.0;
  std::size_t trials = 0;
  std::string detail;
};

// ||a - b|| / max(||a||, ||b||, floor)
inline double vector_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = rng.normal(0.0, sd);
  return m;
}

// Reference closed form: dL/dS_ij = (sigma_ij - [i == j]) / K.
inline Matrix alignment_grad_reference(const SimilarityMatrix& sim) {
  const std::size_t K = sim.batch();
  Matrix g(K, K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) g(i, j) = (sim.sigma(i, j) - (i == j ? 1.0 : 0.0)) / static_cast<double>(K);
  return g;
}

inline CheckResult alignment_gradient_suite(std::size_t trials, std::uint64_t seed, double tol = 1e-5) {
  CheckResult r{"alignment_grad vs finite differences", true, 0.0, tol, trials, ""};
  Rng rng = Rng(seed).derive(0xa11);
  bool exact = true;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t K = 2 + rng.below(7);
    const std::size_t D = 2 + rng.below(15);
    const double kappa = rng.bernoulli(0.5) ? 0.5 : 1.0;
    const auto sim = similarity_matrix(random_matrix(K, D, rng, 1.0), random_matrix(K, D, rng, 1.0), kappa);
    const Matrix g = alignment_grad(sim);
    const auto num = finite_diff_grad(
        [K](std::span<const double> s) {
          return alignment_loss(similarity_from_scores(Matrix(K, K, std::vector<double>(s.begin(), s.end()))));
        },
        sim.S.data(), 1e-5);
    r.worst = std::max(r.worst, vector_relative_error(g.data(), num));
    exact = exact && g == alignment_grad_reference(sim);
  }
  r.pass = r.worst <= tol && exact;
  r.detail = exact ? "closed form identical" : "closed form differs";
  return r;
}

inline CheckResult kd_gradient_suite(std::size_t trials, std::uint64_t seed, double tol = 1e-5) {
  CheckResult r{"kd_grad vs finite differences", true, 0.0, tol, trials, ""};
  Rng rng = Rng(seed).derive(0xd15);
  const double temps[] = {1.0, 2.0, 4.0};
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t N = 1 + rng.below(8);
    const std::size_t C = 2 + rng.below(15);
    DistillConfig dc;
    dc.temp = temps[rng.below(3)];
    const Matrix s = random_matrix(N, C, rng, 2.0);
    const Matrix tl = random_matrix(N, C, rng, 2.0);
    const Matrix g = kd_grad(s, tl, dc);
    const auto num = finite_diff_grad(
        [&](std::span<const double> x) { return kd_loss(Matrix(N, C, std::vector<double>(x.begin(), x.end())), tl, dc); },
        s.data(), 1e-5);
    r.worst = std::max(r.worst, vector_relative_error(g.data(), num));
  }
  r.pass = r.worst <= tol;
  return r;
}

// kd_loss(x, x) = 0, shift invariance per position, zero-sum gradient rows.
inline CheckResult kd_identities(std::size_t trials, std::uint64_t seed, double tol = 1e-9) {
  CheckResult r{"kd identities", true, 0.0, tol, trials, ""};
  Rng rng = Rng(seed).derive(0x1d);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t N = 1 + rng.below(8);
    const std::size_t C = 2 + rng.below(15);
    DistillConfig dc;
    dc.temp = std::exp(rng.uniform(std::log(0.5), std::log(8.0)));
    const Matrix x = random_matrix(N, C, rng, 3.0);
    r.worst = std::max(r.worst, std::abs(kd_loss(x, x, dc)));
    Matrix shifted = x;
    for (std::size_t n = 0; n < N; ++n) {
      const double c = rng.normal(0.0, 10.0);
      for (auto& v : shifted.row(n)) v += c;
    }
    r.worst = std::max(r.worst, std::abs(kd_loss(shifted, x, dc)));
    const Matrix g = kd_grad(random_matrix(N, C, rng, 3.0), x, dc);
    for (std::size_t n = 0; n < N; ++n) {
      double s = 0.0;
      for (double v : g.row(n)) s += v;
      r.worst = std::max(r.worst, std::abs(s));
    }
  }
  r.pass = r.worst <= tol;
  return r;
}

// S = I/kappa (kappa 1, K 2), uniform rows, monotone in S_ii.
inline CheckResult alignment_identities(std::uint64_t seed) {
  CheckResult r{"alignment identities", true, 0.0, 0.0, 0, ""};
  const double l_id = alignment_loss(similarity_from_scores(Matrix(2, 2, {1, 0, 0, 1})));
  const bool a = std::abs(l_id - std::log1p(std::exp(-1.0))) <= 1e-4;
  Rng rng = Rng(seed).derive(0xa1);
  bool b = true, c = true;
  for (int t = 0; t < 100; ++t) {
    const std::size_t K = 2 + rng.below(7);
    // Every score equal, so each row softmax is uniform.
    Matrix S(K, K, rng.normal(0.0, 3.0));
    const double l = alignment_loss(similarity_from_scores(S));
    r.worst = std::max(r.worst, std::abs(l - std::log(static_cast<double>(K))));
    b = b && std::abs(l - std::log(static_cast<double>(K))) <= 1e-9;
    Matrix R = random_matrix(K, K, rng, 2.0);
    double prev = alignment_loss(similarity_from_scores(R));
    const std::size_t i = rng.below(K);
    for (int step = 0; step < 10; ++step) {
      R(i, i) += 0.25 + rng.uniform();
      const double cur = alignment_loss(similarity_from_scores(R));
      c = c && cur < prev;
      prev = cur;
    }
  }
  r.pass = a && b && c;
  r.detail = std::string("I/kappa ") + (a ? "ok" : "FAIL") + ", uniform rows " + (b ? "ok" : "FAIL") +
             ", monotone " + (c ? "ok" : "FAIL");
  return r;
}

// ---------------------------------------------------------------------------
// Whole-model gradient check

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.patch = 4;
  c.d_prime = 8;
  c.horizon = 2;
  c.coord_bins = 16;
  c.bin_size = 4.0;
  c.coord_min = -32.0;
  c.text_vocab = 32;
  c.max_text_len = 8;
  c.img_height = 8;
  c.img_max_width = 16;
  return c;
}

struct GradcheckSetup {
  Model model;
  std::vector<Example> examples;
  std::vector<Matrix> teacher;
  TrainConfig cfg;
};

inline GradcheckSetup tiny_setup(std::uint64_t seed) {
  const ModelConfig mc = tiny_config();
  GradcheckSetup s{Model(mc, seed), {}, {}, {}};
  Rng rng = Rng(seed).derive(0x6763);
  // Nudge every block off its initial value so LayerNorm gains, biases and
  // zero-initialized blocks all carry generic gradients.
  for (auto& b : s.model.params().blocks())
    for (auto& v : b.value) v += rng.normal(0.0, 0.05);
  const std::size_t K = 3;
  for (std::size_t k = 0; k < K; ++k) {
    Image img(mc.img_height, mc.img_max_width, 3);
    for (auto& px : img.data) px = static_cast<std::uint8_t>(rng.below(256));
    Example e;
    e.grid = extract_patches(img, mc);
    const std::size_t len = 2 + rng.below(mc.max_text_len - 1);
    for (std::size_t i = 0; i < len; ++i) e.prompt.ids.push_back(rng.below(mc.text_vocab));
    for (std::size_t i = 0; i < mc.slots(); ++i) e.targets.push_back(rng.below(mc.coord_bins));
    s.examples.push_back(std::move(e));
    s.teacher.push_back(random_matrix(mc.slots(), mc.vocab_coord(), rng, 1.5));
  }
  s.cfg.freeze_vision = false;
  s.cfg.batch = K;
  return s;
}

inline double tiny_objective(const GradcheckSetup& s, nn::Grads* g) {
  nn::Grads scratch(s.model.params());
  std::vector<std::size_t> idx(s.examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  return batch_loss_and_grad(s.model, s.examples, idx, &s.teacher, s.cfg, nullptr, g ? *g : scratch).total;
}

// Total-objective gradient against central differences at `samples` randomly
// chosen scalar parameters. Error per parameter is |a - n| / max(|a|, |n|, floor).
inline CheckResult model_gradcheck(std::size_t samples, std::uint64_t seed, double tol = 1e-4, double floor = 1e-6) {
  CheckResult r{"tiny-model total-objective gradcheck", true, 0.0, tol, samples, ""};
  GradcheckSetup s = tiny_setup(seed);
  nn::Grads g(s.model.params());
  tiny_objective(s, &g);
  Rng rng = Rng(seed).derive(0x7069636b);
  auto& ps = s.model.params();
  const double eps = 1e-5;
  std::size_t nonzero = 0;
  for (std::size_t t = 0; t < samples; ++t) {
    // Pick a block proportionally to the number of blocks, then an entry, so
    // small blocks (norm gains, biases) are represented.
    const std::size_t b = rng.below(ps.count());
    const std::size_t i = rng.below(ps[b].size());
    double& w = ps[b].value[i];
    const double orig = w;
    w = orig + eps;
    const double fp = tiny_objective(s, nullptr);
    w = orig - eps;
    const double fm = tiny_objective(s, nullptr);
    w = orig;
    const double num = (fp - fm) / (2.0 * eps);
    const double err = relative_error(g[b][i], num, floor);
    if (std::abs(num) > floor) ++nonzero;
    if (err > r.worst) {
      r.worst = err;
      r.detail = ps[b].name + "[" + std::to_string(i) + "]";
    }
  }
  r.pass = r.worst <= tol;
  r.detail = "worst at " + r.detail + ", " + std::to_string(nonzero) + " of " + std::to_string(samples) +
             " gradients above the floor";
  return r;
}

// ---------------------------------------------------------------------------
// FLOP formulas against the instrumented forward pass

struct FlopAgreement {
  std::uint64_t n_vis = 0, n_txt = 0, d = 0;
  std::uint64_t vis_formula = 0, vis_counted = 0;
  std::uint64_t text_formula = 0, text_counted = 0;
  std::uint64_t cross_formula = 0, cross_counted = 0;

  bool agrees() const {
    return vis_formula == vis_counted && text_formula == text_counted && cross_formula == cross_counted;
  }
};

// Vision tokens are laid out as a 1 x n_vis patch strip.
inline FlopAgreement count_attention_macs(std::size_t n_vis, std::size_t n_txt, std::size_t d, std::size_t heads,
                                          std::uint64_t seed) {
  ModelConfig mc;
  mc.d = d;
  mc.heads = heads;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.patch = 2;
  mc.d_prime = 4;
  mc.horizon = 1;
  mc.img_height = 2;
  mc.img_max_width = 2 * n_vis;
  mc.max_text_len = std::max<std::size_t>(n_txt, 1);
  const Model model(mc, seed);
  Image img(2, 2 * n_vis, 3);
  Rng rng = Rng(seed).derive(0xf1);
  for (auto& px : img.data) px = static_cast<std::uint8_t>(rng.below(256));
  PromptTokens p;
  for (std::size_t i = 0; i < n_txt; ++i) p.ids.push_back(rng.below(mc.text_vocab));

  nn::MacCounter counter;
  {
    nn::MacScope scope(counter);
    model.forward_grid(extract_patches(img, mc), p);
  }
  flops::FlopSpec fs{n_vis, n_txt, d, heads, std::nullopt};
  FlopAgreement a;
  a.n_vis = n_vis;
  a.n_txt = n_txt;
  a.d = d;
  a.vis_formula = flops::flops_vis(fs);
  a.text_formula = flops::flops_text(fs);
  a.cross_formula = flops::flops_cross(fs);
  a.vis_counted = counter.blocks["vision.blk0.attn"].formula_convention();
  a.text_counted = counter.blocks["text.blk0.attn"].formula_convention();
  a.cross_counted = counter.blocks["fuse.attn"].formula_convention();
  return a;
}

inline CheckResult flop_agreement_suite(std::size_t trials, std::uint64_t seed) {
  CheckResult r{"flop formulas vs instrumented counter", true, 0.0, 0.0, trials, ""};
  Rng rng = Rng(seed).derive(0xf10);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t heads = 1 + rng.below(4);
    const std::size_t d = heads * (2 + rng.below(8));
    const std::size_t nv = 1 + rng.below(24);
    const std::size_t nt = 1 + rng.below(24);
    const auto a = count_attention_macs(nv, nt, d, heads, seed + t);
    if (!a.agrees()) {
      r.pass = false;
      r.detail += "(" + std::to_string(nv) + "," + std::to_string(nt) + "," + std::to_string(d) + ") ";
    }
  }
  flops::FlopSpec worked{16, 8, 64, 4, std::nullopt};
  const bool worked_ok = flops::flops_vis(worked) == 147456 && flops::flops_text(worked) == 69632 &&
                         flops::flops_cross(worked) == 139264;
  const auto w = count_attention_macs(16, 8, 64, 4, seed);
  r.pass = r.pass && worked_ok && w.agrees();
  r.detail += "worked (16,8,64): " + std::to_string(w.vis_counted) + "/" + std::to_string(w.text_counted) + "/" +
              std::to_string(w.cross_counted);
  return r;
}

}  // namespace v2x::verify
