// Dense vector/matrix kernels: orthonormalization, symmetric
// eigendecomposition, singular values / numerical rank, and maximum linear
// assignment. Everything is double precision and deterministic.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace subcurve {

using Vector = std::vector<double>;

inline double dot(const Vector& a, const Vector& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm_sq(const Vector& a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return s;
}

inline double norm(const Vector& a) { return std::sqrt(norm_sq(a)); }

// y += a * x
inline void axpy(double a, const Vector& x, Vector& y) {
  if (x.size() != y.size())
    throw std::invalid_argument("axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline void scale(Vector& x, double a) {
  for (double& v : x) v *= a;
}

inline bool all_finite(const Vector& a) {
  for (double x : a)
    if (!std::isfinite(x)) return false;
  return true;
}

struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> entries;  // row-major

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), entries(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) {
    return entries[i * cols + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return entries[i * cols + j];
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix from_columns(const std::vector<Vector>& columns) {
    if (columns.empty()) return {};
    DenseMatrix m(columns.front().size(), columns.size());
    for (std::size_t j = 0; j < columns.size(); ++j) {
      if (columns[j].size() != m.rows)
        throw std::invalid_argument("from_columns: ragged column lengths");
      for (std::size_t i = 0; i < m.rows; ++i) m(i, j) = columns[j][i];
    }
    return m;
  }

  DenseMatrix transposed() const {
    DenseMatrix t(cols, rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool is_finite() const {
    for (double x : entries)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double x : entries) s += x * x;
    return std::sqrt(s);
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : entries) m = std::max(m, std::abs(x));
    return m;
  }
};

inline Vector mat_vec(const DenseMatrix& m, const Vector& x) {
  if (x.size() != m.cols)
    throw std::invalid_argument("mat_vec: dimension mismatch");
  Vector y(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

struct EigenSystem {
  std::vector<double> eigenvalues;    // descending
  std::vector<Vector> eigenvectors;   // unit 2-norm, pairwise orthogonal
};

/// Orthonormalizes `vectors` in order (modified Gram-Schmidt with one
/// re-orthogonalization pass). Vectors whose residual norm after projection
/// falls below `drop_tol` are dropped; the rest keep their input order.
inline std::vector<Vector> gram_schmidt(const std::vector<Vector>& vectors,
                                        double drop_tol) {
  if (drop_tol <= 0.0)
    throw std::invalid_argument("gram_schmidt: drop_tol must be positive");
  std::vector<Vector> basis;
  if (vectors.empty()) return basis;
  const std::size_t dim = vectors.front().size();
  for (const Vector& v : vectors) {
    if (v.size() != dim)
      throw std::invalid_argument("gram_schmidt: dimension mismatch");
    Vector r = v;
    for (int pass = 0; pass < 2; ++pass)
      for (const Vector& u : basis) axpy(-dot(u, r), u, r);
    const double rn = norm(r);
    if (rn < drop_tol) continue;
    scale(r, 1.0 / rn);
    basis.push_back(std::move(r));
  }
  return basis;
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. The input is
/// symmetrized as (M + M^T)/2 first; a sweep ends when the off-diagonal
/// Frobenius norm drops below 1e-12 times the diagonal norm.
inline EigenSystem sym_eig(const DenseMatrix& m) {
  if (m.rows != m.cols)
    throw std::invalid_argument("sym_eig: matrix must be square");
  const std::size_t n = m.rows;
  DenseMatrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (m(i, j) + m(j, i));
  DenseMatrix vecs = DenseMatrix::identity(n);

  const int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a(i, i) * a(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
    }
    if (off == 0.0 || std::sqrt(off) < 1e-12 * std::sqrt(diag)) break;
    if (sweep == max_sweeps - 1)
      throw std::runtime_error("sym_eig: Jacobi did not converge");

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p), aqq = a(q, q);
        const double tau = (aqq - app) / (2.0 * apq);
        const double t =
            (tau >= 0.0 ? 1.0 : -1.0) /
            (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (i == p || i == q) continue;
          const double aip = a(i, p), aiq = a(i, q);
          a(i, p) = a(p, i) = c * aip - s * aiq;
          a(i, q) = a(q, i) = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = vecs(i, p), viq = vecs(i, q);
          vecs(i, p) = c * vip - s * viq;
          vecs(i, q) = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return a(x, x) > a(y, y);
  });

  EigenSystem out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, Vector(n));
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i)
      out.eigenvectors[k][i] = vecs(i, order[k]);
  }
  return out;
}

/// Singular values, descending, via one-sided Jacobi (Hestenes) on the taller
/// orientation. Column rotations keep small singular values accurate, which
/// matters when ranks are decided by a relative threshold.
inline std::vector<double> singular_values(const DenseMatrix& m) {
  if (m.rows == 0 || m.cols == 0) return {};
  DenseMatrix a = (m.rows >= m.cols) ? m : m.transposed();
  const std::size_t n = a.rows, k = a.cols;

  const int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (std::abs(gamma) <= 1e-14 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t =
            (zeta >= 0.0 ? 1.0 : -1.0) /
            (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(k);
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a(i, j) * a(i, j);
    sigma[j] = std::sqrt(s);
  }
  std::sort(sigma.begin(), sigma.end(), std::greater<double>());
  return sigma;
}

/// Number of singular values above rel_tol * sigma_max; 0 for the zero matrix.
inline std::size_t numerical_rank(const DenseMatrix& m, double rel_tol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0))
    throw std::invalid_argument("numerical_rank: rel_tol must be in (0,1)");
  if (!m.is_finite())
    throw std::invalid_argument("numerical_rank: non-finite entries");
  const std::vector<double> sigma = singular_values(m);
  if (sigma.empty() || sigma.front() == 0.0) return 0;
  const double threshold = rel_tol * sigma.front();
  std::size_t rank = 0;
  for (double s : sigma)
    if (s > threshold) ++rank;
  return rank;
}

struct Assignment {
  std::vector<std::size_t> row_to_col;
  double total = 0.0;
};

namespace detail {

// Min-cost perfect assignment via the potentials / augmenting-path method
// (O(n^3)). Returns the optimal cost; col_to_row[j] is the row matched to j.
inline double assignment_min_cost(const DenseMatrix& a,
                                  std::vector<int>& col_to_row) {
  const int n = static_cast<int>(a.rows);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  col_to_row.assign(n, -1);
  double cost = 0.0;
  for (int j = 1; j <= n; ++j) {
    col_to_row[j - 1] = p[j] - 1;
    cost += a(p[j] - 1, j - 1);
  }
  return cost;
}

inline double assignment_max_total(const DenseMatrix& score) {
  if (score.rows == 0) return 0.0;
  DenseMatrix neg(score.rows, score.cols);
  for (std::size_t i = 0; i < score.entries.size(); ++i)
    neg.entries[i] = -score.entries[i];
  std::vector<int> col_to_row;
  return -assignment_min_cost(neg, col_to_row);
}

}  // namespace detail

/// Permutation maximizing the total score, ties broken toward the
/// lexicographically smallest row->col map. The tie-break is resolved by
/// fixing rows in order and keeping the smallest column that still attains
/// the optimum on the remaining subproblem.
inline Assignment hungarian_max(const DenseMatrix& score) {
  if (score.rows != score.cols)
    throw std::invalid_argument("hungarian_max: matrix must be square");
  if (!score.is_finite())
    throw std::invalid_argument("hungarian_max: non-finite entries");
  const std::size_t n = score.rows;
  Assignment out;
  if (n == 0) return out;

  const double best = detail::assignment_max_total(score);
  const double tol = 1e-9 * (1.0 + std::abs(best));

  std::vector<std::size_t> remaining(n);
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  out.row_to_col.assign(n, 0);
  double prefix = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    bool fixed = false;
    for (std::size_t ci = 0; ci < remaining.size(); ++ci) {
      const std::size_t c = remaining[ci];
      // Best total achievable with rows 0..r fixed and row r -> column c.
      DenseMatrix sub(n - r - 1, n - r - 1);
      std::size_t jj = 0;
      for (std::size_t cj = 0; cj < remaining.size(); ++cj) {
        if (cj == ci) continue;
        for (std::size_t ri = r + 1; ri < n; ++ri)
          sub(ri - r - 1, jj) = score(ri, remaining[cj]);
        ++jj;
      }
      const double total =
          prefix + score(r, c) + detail::assignment_max_total(sub);
      if (total >= best - tol) {
        out.row_to_col[r] = c;
        prefix += score(r, c);
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(ci));
        fixed = true;
        break;
      }
    }
    if (!fixed)
      throw std::runtime_error("hungarian_max: tie refinement failed");
  }

  out.total = 0.0;
  for (std::size_t r = 0; r < n; ++r) out.total += score(r, out.row_to_col[r]);
  return out;
}

}  // namespace subcurve
