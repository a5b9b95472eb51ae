// Measurement tools around the optimizer: the quadratic gradient-descent
// testbed, the Gauss-Newton Hessian and its spectrum, low-rank approximation
// error, logit-decomposition residuals, and subspace-overlap reports.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "subcurve/autodiff.hpp"
#include "subcurve/curvature.hpp"
#include "subcurve/linalg.hpp"
#include "subcurve/model.hpp"

namespace subcurve {

struct QuadraticProblem {
  DenseMatrix hessian;  // symmetric, eigenvalues > 0 for a proper minimum
  Vector minimum;

  void validate() const {
    if (hessian.rows != hessian.cols)
      throw std::invalid_argument("QuadraticProblem: Hessian must be square");
    if (hessian.rows != minimum.size())
      throw std::invalid_argument("QuadraticProblem: dimension mismatch");
    for (std::size_t i = 0; i < hessian.rows; ++i)
      for (std::size_t j = i + 1; j < hessian.cols; ++j)
        if (std::abs(hessian(i, j) - hessian(j, i)) > 1e-12)
          throw std::invalid_argument("QuadraticProblem: Hessian not symmetric");
  }
};

/// Distances |theta^(t) - theta*| for gradient descent
/// theta <- theta - eta H (theta - theta*), t = 0..steps. Along each
/// eigendirection the error scales by (1 - eta lambda_i) per step.
inline std::vector<double> quadratic_gd_trajectory(const QuadraticProblem& p,
                                                   Vector theta, double eta,
                                                   std::size_t steps) {
  p.validate();
  if (steps < 1)
    throw std::invalid_argument("quadratic_gd_trajectory: steps must be >= 1");
  std::vector<double> distances;
  distances.reserve(steps + 1);
  Vector delta(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) delta[i] = theta[i] - p.minimum[i];
  distances.push_back(norm(delta));
  for (std::size_t t = 0; t < steps; ++t) {
    const Vector hd = mat_vec(p.hessian, delta);
    axpy(-eta, hd, delta);
    distances.push_back(norm(delta));
  }
  return distances;
}

/// Assembles the dense Gauss-Newton Hessian
///   (1/|B|) sum_mu sum_{k,l} p_k (delta_kl - p_l) dz_k dz_l^T
/// from per-example probabilities and logit gradients, working per example as
/// G A G^T with A = diag(p) - p p^T. Symmetric PSD by construction.
inline DenseMatrix assemble_gauss_newton(
    const Tensor& probs, const std::vector<std::vector<Vector>>& logit_grads) {
  if (probs.rows() != logit_grads.size())
    throw std::invalid_argument("assemble_gauss_newton: example count mismatch");
  if (probs.rows() == 0)
    throw std::invalid_argument("assemble_gauss_newton: empty batch");
  const std::size_t batch = probs.rows();
  const std::size_t classes = probs.cols();
  const std::size_t n = logit_grads.front().front().size();

  DenseMatrix hess(n, n);
  for (std::size_t mu = 0; mu < batch; ++mu) {
    const auto& dz = logit_grads[mu];
    // columns of A G^T: w_k = sum_l A(k,l) dz_l
    std::vector<Vector> weighted(classes, Vector(n, 0.0));
    for (std::size_t k = 0; k < classes; ++k) {
      const double pk = probs.at(mu, k);
      for (std::size_t l = 0; l < classes; ++l) {
        const double a = pk * ((k == l ? 1.0 : 0.0) - probs.at(mu, l));
        if (a != 0.0) axpy(a, dz[l], weighted[k]);
      }
    }
    for (std::size_t k = 0; k < classes; ++k)
      for (std::size_t a = 0; a < n; ++a) {
        const double scale_a = dz[k][a];
        if (scale_a == 0.0) continue;
        double* row = hess.entries.data() + a * n;
        const double* wk = weighted[k].data();
        for (std::size_t b = 0; b < n; ++b) row[b] += scale_a * wk[b];
      }
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (double& e : hess.entries) e *= inv_batch;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      const double s = 0.5 * (hess(a, b) + hess(b, a));
      hess(a, b) = hess(b, a) = s;
    }
  return hess;
}

inline DenseMatrix gauss_newton_hessian(const ModelSpec& spec,
                                        const ParamVector& params,
                                        const Tensor& inputs, const Tensor& one_hot,
                                        std::size_t max_dense_dim = kDenseHessianCap) {
  const std::size_t n = params.size();
  if (n > max_dense_dim)
    throw std::invalid_argument(
        "gauss_newton_hessian: parameter count " + std::to_string(n) +
        " exceeds the dense cap " + std::to_string(max_dense_dim));
  const BatchForward fb = forward_batch(spec, params, inputs, one_hot);
  return assemble_gauss_newton(fb.probs, batch_logit_gradients(spec, params, inputs));
}

struct LowRankErrorReport {
  double frobenius_rel_error = 0.0;
  // Largest principal angle (radians) between span{v_k} and the top-C
  // eigenspace of the Gauss-Newton Hessian.
  double top_subspace_angle = 0.0;
};

inline double largest_principal_angle(const std::vector<Vector>& span_a,
                                      const std::vector<Vector>& span_b) {
  const auto qa = gram_schmidt(span_a, 1e-12);
  const auto qb = gram_schmidt(span_b, 1e-12);
  if (qa.empty() || qb.empty())
    return qa.empty() && qb.empty() ? 0.0 : std::numbers::pi / 2.0;
  DenseMatrix cross(qa.size(), qb.size());
  for (std::size_t i = 0; i < qa.size(); ++i)
    for (std::size_t j = 0; j < qb.size(); ++j) cross(i, j) = dot(qa[i], qb[j]);
  const auto sigma = singular_values(cross);
  const std::size_t pairs = std::min(qa.size(), qb.size());
  double smallest = 1.0;
  for (std::size_t i = 0; i < pairs; ++i)
    smallest = std::min(smallest, sigma[i]);
  smallest = std::min(std::max(smallest, -1.0), 1.0);
  return std::acos(smallest);
}

/// Compares the low-rank model against a dense Gauss-Newton Hessian:
/// relative Frobenius error plus the principal angle between the direction
/// span and the top-C eigenspace.
inline LowRankErrorReport low_rank_error_dense(const DenseMatrix& gn,
                                               std::size_t class_count,
                                               const LowRankHessian& h) {
  const std::size_t n = gn.rows;
  DenseMatrix diff = gn;
  for (std::size_t k = 0; k < h.rank(); ++k)
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        diff(a, b) -= h.eigenvalues[k] * h.directions[k][a] * h.directions[k][b];

  LowRankErrorReport report;
  const double gn_norm = gn.frobenius_norm();
  report.frobenius_rel_error =
      gn_norm == 0.0 ? diff.frobenius_norm() : diff.frobenius_norm() / gn_norm;

  const std::size_t top = std::min(class_count, n);
  const EigenSystem eig = sym_eig(gn);
  std::vector<Vector> top_space(eig.eigenvectors.begin(),
                                eig.eigenvectors.begin() + static_cast<std::ptrdiff_t>(top));
  report.top_subspace_angle = largest_principal_angle(h.directions, top_space);
  return report;
}

inline LowRankErrorReport low_rank_error(const ModelSpec& spec,
                                         const ParamVector& params,
                                         const Tensor& inputs, const Tensor& one_hot,
                                         const LowRankHessian& h,
                                         std::size_t max_dense_dim = kDenseHessianCap) {
  return low_rank_error_dense(
      gauss_newton_hessian(spec, params, inputs, one_hot, max_dense_dim),
      spec.class_count(), h);
}

struct ResidualStats {
  std::size_t class_id = 0;
  std::size_t count = 0;        // examples of this class
  double mean_rel = 0.0;        // mean |eps_k^mu| / |c_k| over mu in class k
  double max_rel = 0.0;
  double mean_residual_norm = 0.0;  // |mean_mu eps_k^mu| / |c_k|
};

/// Residuals of the decomposition dz_k^mu = y_k^mu c_k + eps_k^mu, reported
/// per class over that class's own examples. When c_k is the mean over the
/// same example set, the mean residual vector vanishes.
inline std::vector<ResidualStats> logit_residuals(
    const std::vector<std::vector<ParamVector>>& logit_grads,
    const std::vector<std::size_t>& labels,
    const std::vector<Vector>& class_gradients) {
  if (logit_grads.size() != labels.size())
    throw std::invalid_argument("logit_residuals: label count mismatch");
  const std::size_t classes = class_gradients.size();
  std::vector<ResidualStats> stats(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    stats[k].class_id = k;
    const double ck_norm = norm(class_gradients[k]);
    Vector mean_eps(class_gradients[k].size(), 0.0);
    double sum_rel = 0.0;
    for (std::size_t mu = 0; mu < labels.size(); ++mu) {
      if (labels[mu] != k) continue;
      Vector eps = logit_grads[mu][k];
      axpy(-1.0, class_gradients[k], eps);
      axpy(1.0, eps, mean_eps);
      const double rel = ck_norm == 0.0 ? norm(eps) : norm(eps) / ck_norm;
      sum_rel += rel;
      stats[k].max_rel = std::max(stats[k].max_rel, rel);
      ++stats[k].count;
    }
    if (stats[k].count > 0) {
      stats[k].mean_rel = sum_rel / static_cast<double>(stats[k].count);
      scale(mean_eps, 1.0 / static_cast<double>(stats[k].count));
      stats[k].mean_residual_norm =
          ck_norm == 0.0 ? norm(mean_eps) : norm(mean_eps) / ck_norm;
    }
  }
  return stats;
}

struct OverlapReport {
  DenseMatrix cosine_matrix;           // C x C, |cos(c_k, e_j)|
  std::vector<std::size_t> assignment; // class row -> eigenvector column
  double assignment_score = 0.0;       // mean assigned cosine
  std::size_t combined_rank = 0;       // rank of [v_1..v_C | e_1..e_C]
  std::vector<std::size_t> rank_per_batch;  // filled by the probe harness
  std::vector<ResidualStats> residual_stats;
};

/// Cosine matrix between normalized class gradients and the top-C
/// eigenvectors, the cosine-maximised assignment score, and the numerical
/// rank of the combined matrix.
inline OverlapReport subspace_overlap(const std::vector<Vector>& class_grads,
                                      const EigenSystem& eig, double rel_tol) {
  const std::size_t classes = class_grads.size();
  if (eig.eigenvectors.size() < classes)
    throw std::invalid_argument("subspace_overlap: need at least C eigenvectors");
  OverlapReport report;
  report.cosine_matrix = DenseMatrix(classes, classes);
  std::vector<Vector> normalized(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    normalized[k] = class_grads[k];
    const double n = norm(normalized[k]);
    if (n == 0.0)
      throw std::invalid_argument("subspace_overlap: zero class gradient");
    scale(normalized[k], 1.0 / n);
  }
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t j = 0; j < classes; ++j)
      report.cosine_matrix(k, j) = std::abs(dot(normalized[k], eig.eigenvectors[j]));

  const Assignment assign = hungarian_max(report.cosine_matrix);
  report.assignment = assign.row_to_col;
  report.assignment_score = assign.total / static_cast<double>(classes);

  std::vector<Vector> combined = normalized;
  for (std::size_t j = 0; j < classes; ++j)
    combined.push_back(eig.eigenvectors[j]);
  report.combined_rank = numerical_rank(DenseMatrix::from_columns(combined), rel_tol);
  return report;
}

struct SpectrumReport {
  std::vector<double> eigenvalues;  // descending, top_n entries
  // lambda_C / lambda_{C+1}; infinity when lambda_{C+1} <= 0, NaN when the
  // matrix has no (C+1)-th eigenvalue.
  double gap_ratio = std::numeric_limits<double>::quiet_NaN();
};

/// Top eigenvalues of the Gauss-Newton Hessian on the given batch, with the
/// gap ratio at the class-count index.
inline SpectrumReport eigenspectrum_report(const ModelSpec& spec,
                                           const ParamVector& params,
                                           const Tensor& inputs,
                                           const Tensor& one_hot, std::size_t top_n,
                                           std::size_t max_dense_dim = kDenseHessianCap) {
  const DenseMatrix gn =
      gauss_newton_hessian(spec, params, inputs, one_hot, max_dense_dim);
  const EigenSystem eig = sym_eig(gn);
  SpectrumReport report;
  const std::size_t keep = std::min(top_n, eig.eigenvalues.size());
  report.eigenvalues.assign(eig.eigenvalues.begin(),
                            eig.eigenvalues.begin() + static_cast<std::ptrdiff_t>(keep));
  const std::size_t c = spec.class_count();
  if (c >= 1 && c < eig.eigenvalues.size()) {
    const double lam_c = eig.eigenvalues[c - 1];
    const double lam_next = eig.eigenvalues[c];
    report.gap_ratio = lam_next <= 0.0
                           ? std::numeric_limits<double>::infinity()
                           : lam_c / lam_next;
  }
  return report;
}

}  // namespace subcurve
