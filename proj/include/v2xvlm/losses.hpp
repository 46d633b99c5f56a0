#pragma once

// Training objective: trajectory cross-entropy, image-text contrastive
// alignment, and temperature-scaled distillation, with closed-form gradients.

#include <cmath>
#include <vector>

#include "v2xvlm/numerics.hpp"

namespace v2x {

struct AlignConfig {
  double kappa = 0.1;

  void validate() const {
    if (!(kappa > 0.0)) fail(Errc::non_positive_temperature, "kappa must be positive");
  }
};

struct SimilarityMatrix {
  Matrix S;      // S_ij = <z_i, h_j> / kappa (unit vectors)
  Matrix sigma;  // row-softmax of S

  std::size_t batch() const { return S.rows(); }
};

enum class KdGradForm {
  chain_rule,   // derivative of the implemented loss: (T / N) (p_S - p_T)
  boxed_t_squared,  // (T^2 / N) (p_S - p_T), kept for comparison experiments
};

struct DistillConfig {
  double temp = 2.0;
  bool normalize_positions = true;
  KdGradForm grad_form = KdGradForm::chain_rule;

  void validate() const { check_temperature(temp); }
};

struct LossWeights {
  double lambda1 = 0.1;
  double lambda2 = 0.5;
};

// Builds sigma from an arbitrary score matrix.
inline SimilarityMatrix similarity_from_scores(Matrix S) {
  if (S.rows() != S.cols()) fail(Errc::shape_mismatch, "similarity matrix must be square");
  if (S.rows() < 2) fail(Errc::batch_too_small, "contrast needs at least two pairs");
  SimilarityMatrix sim;
  sim.sigma = Matrix(S.rows(), S.cols());
  for (std::size_t i = 0; i < S.rows(); ++i) {
    auto p = softmax_temp(S.row(i), 1.0);
    std::copy(p.begin(), p.end(), sim.sigma.row(i).begin());
  }
  sim.S = std::move(S);
  return sim;
}

// Rows of Z and H are l2-normalized internally.
inline SimilarityMatrix similarity_matrix(const Matrix& Z, const Matrix& H, double kappa) {
  if (!(kappa > 0.0)) fail(Errc::non_positive_temperature, "kappa must be positive");
  if (Z.rows() != H.rows() || Z.cols() != H.cols()) fail(Errc::shape_mismatch, "Z and H shapes differ");
  const std::size_t K = Z.rows();
  if (K < 2) fail(Errc::batch_too_small, "contrast needs at least two pairs");
  std::vector<std::vector<double>> zh(K), hh(K);
  for (std::size_t i = 0; i < K; ++i) {
    zh[i] = l2_normalize(Z.row(i));
    hh[i] = l2_normalize(H.row(i));
  }
  Matrix S(K, K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) S(i, j) = dot(zh[i], hh[j]) / kappa;
  return similarity_from_scores(std::move(S));
}

inline double alignment_loss(const SimilarityMatrix& sim) {
  const std::size_t K = sim.batch();
  double total = 0.0;
  for (std::size_t i = 0; i < K; ++i) total += log_sum_exp(sim.S.row(i)) - sim.S(i, i);
  return total / static_cast<double>(K);
}

// dL/dS: -(1 - sigma_ii)/K on the diagonal, sigma_ij/K elsewhere.
inline Matrix alignment_grad(const SimilarityMatrix& sim) {
  const std::size_t K = sim.batch();
  const double k = static_cast<double>(K);
  Matrix g(K, K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j)
      g(i, j) = i == j ? -(1.0 - sim.sigma(i, i)) / k : sim.sigma(i, j) / k;
  return g;
}

struct AlignmentGrads {
  double loss = 0.0;
  Matrix dZ, dH;  // w.r.t. the un-normalized rows
};

// Alignment loss and its gradient pushed back through S = <z^, h^>/kappa and
// the row normalizations.
inline AlignmentGrads alignment_backward(const Matrix& Z, const Matrix& H, double kappa) {
  const auto sim = similarity_matrix(Z, H, kappa);
  const Matrix dS = alignment_grad(sim);
  const std::size_t K = Z.rows();
  const std::size_t D = Z.cols();
  std::vector<std::vector<double>> zh(K), hh(K);
  std::vector<double> zn(K), hn(K);
  for (std::size_t i = 0; i < K; ++i) {
    zh[i] = l2_normalize(Z.row(i));
    hh[i] = l2_normalize(H.row(i));
    zn[i] = l2_norm(Z.row(i));
    hn[i] = l2_norm(H.row(i));
  }
  AlignmentGrads out;
  out.loss = alignment_loss(sim);
  out.dZ = Matrix(K, D);
  out.dH = Matrix(K, D);
  Matrix dzh(K, D), dhh(K, D);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      const double g = dS(i, j) / kappa;
      for (std::size_t e = 0; e < D; ++e) {
        dzh(i, e) += g * hh[j][e];
        dhh(j, e) += g * zh[i][e];
      }
    }
  auto through_norm = [D](const std::vector<double>& unit, double norm, std::span<const double> dunit,
                          std::span<double> dout) {
    double proj = 0.0;
    for (std::size_t e = 0; e < D; ++e) proj += unit[e] * dunit[e];
    for (std::size_t e = 0; e < D; ++e) dout[e] = (dunit[e] - unit[e] * proj) / norm;
  };
  for (std::size_t i = 0; i < K; ++i) {
    through_norm(zh[i], zn[i], dzh.row(i), out.dZ.row(i));
    through_norm(hh[i], hn[i], dhh.row(i), out.dH.row(i));
  }
  return out;
}

inline void check_same_shape(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(Errc::shape_mismatch, "logit batches differ in shape");
  if (a.rows() == 0) fail(Errc::empty_sequence, "empty logit batch");
}

// (T^2 / N) sum_n KL(p_T || p_S) with p = softmax(logits / T). Teacher is a
// constant.
inline double kd_loss(const Matrix& student, const Matrix& teacher, const DistillConfig& cfg) {
  cfg.validate();
  check_same_shape(student, teacher);
  const double T = cfg.temp;
  double total = 0.0;
  for (std::size_t n = 0; n < student.rows(); ++n) {
    const auto pt = softmax_temp(teacher.row(n), T);
    const auto lpt = log_softmax_temp(teacher.row(n), T);
    const auto lps = log_softmax_temp(student.row(n), T);
    double kl = 0.0;
    for (std::size_t k = 0; k < pt.size(); ++k) kl += pt[k] * (lpt[k] - lps[k]);
    total += kl;
  }
  const double norm = cfg.normalize_positions ? static_cast<double>(student.rows()) : 1.0;
  return T * T * total / norm;
}

inline Matrix kd_grad(const Matrix& student, const Matrix& teacher, const DistillConfig& cfg) {
  cfg.validate();
  check_same_shape(student, teacher);
  const double T = cfg.temp;
  const double norm = cfg.normalize_positions ? static_cast<double>(student.rows()) : 1.0;
  const double scale = (cfg.grad_form == KdGradForm::chain_rule ? T : T * T) / norm;
  Matrix g(student.rows(), student.cols());
  for (std::size_t n = 0; n < student.rows(); ++n) {
    const auto ps = softmax_temp(student.row(n), T);
    const auto pt = softmax_temp(teacher.row(n), T);
    for (std::size_t k = 0; k < ps.size(); ++k) g(n, k) = scale * (ps[k] - pt[k]);
  }
  return g;
}

inline void check_targets(const Matrix& logits, std::span<const std::size_t> targets) {
  if (targets.size() != logits.rows()) fail(Errc::length_mismatch, "target count differs from logit rows");
  for (auto t : targets)
    if (t >= logits.cols()) fail(Errc::target_out_of_vocab, "target id " + std::to_string(t) + " >= C");
}

// Mean over positions of -log softmax(logits)[target].
inline double traj_loss(const Matrix& logits, std::span<const std::size_t> targets) {
  check_targets(logits, targets);
  double total = 0.0;
  for (std::size_t n = 0; n < logits.rows(); ++n) total += log_sum_exp(logits.row(n)) - logits(n, targets[n]);
  return total / static_cast<double>(logits.rows());
}

inline Matrix traj_grad(const Matrix& logits, std::span<const std::size_t> targets) {
  check_targets(logits, targets);
  const double inv = 1.0 / static_cast<double>(logits.rows());
  Matrix g(logits.rows(), logits.cols());
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    const auto p = softmax_temp(logits.row(n), 1.0);
    for (std::size_t k = 0; k < p.size(); ++k) g(n, k) = p[k] * inv;
    g(n, targets[n]) -= inv;
  }
  return g;
}

inline double total_loss(double traj, double align, double kd, const LossWeights& w) {
  if (!std::isfinite(traj) || !std::isfinite(align) || !std::isfinite(kd))
    fail(Errc::non_finite_term, "loss term is not finite");
  return traj + w.lambda1 * align + w.lambda2 * kd;
}

}  // namespace v2x
