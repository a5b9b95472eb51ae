// Low-rank curvature machinery: per-batch class gradients and eigenvalue
// estimates, the bias-corrected EMA/RMS running state, and the low-rank
// Hessian with its generalized inverse, complement projector and HVP.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "subcurve/autodiff.hpp"
#include "subcurve/data.hpp"
#include "subcurve/linalg.hpp"

namespace subcurve {

// Running estimates c_k and lambda_k. The EMA is bias-corrected per class:
// classes can be absent from a minibatch, so each class keeps its own step
// counter and absent classes are frozen (no decay toward zero). Before a
// class's first observation its eigenvalue estimate is 1 so 1/lambda stays
// sane.
struct CurvatureState {
  std::size_t class_count = 0;
  std::size_t param_dim = 0;
  double gamma = 0.9;
  std::vector<Vector> ema_numerators;        // m_k, C x N
  std::vector<double> rms_numerators;        // r_k
  std::vector<std::uint64_t> step_counts;    // t_k
  std::uint64_t global_step = 0;

  static CurvatureState init(std::size_t classes, std::size_t dim, double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0))
      throw std::invalid_argument("CurvatureState: gamma must be in (0,1)");
    CurvatureState s;
    s.class_count = classes;
    s.param_dim = dim;
    s.gamma = gamma;
    s.ema_numerators.assign(classes, Vector(dim, 0.0));
    s.rms_numerators.assign(classes, 0.0);
    s.step_counts.assign(classes, 0);
    return s;
  }

  bool observed(std::size_t k) const { return step_counts[k] >= 1; }

  double bias_correction(std::size_t k) const {
    return 1.0 - std::pow(gamma, static_cast<double>(step_counts[k]));
  }

  Vector class_gradient_estimate(std::size_t k) const {
    if (!observed(k))
      throw std::logic_error("class_gradient_estimate: class never observed");
    Vector c = ema_numerators[k];
    scale(c, 1.0 / bias_correction(k));
    return c;
  }

  double eigenvalue_estimate(std::size_t k) const {
    if (!observed(k)) return 1.0;
    return std::sqrt(rms_numerators[k] / bias_correction(k));
  }
};

/// Per-class mean logit gradients over the batch, c_k^B. Classes absent from
/// the batch yield nullopt (an explicit marker, not a zero vector).
inline std::vector<std::optional<Vector>> batch_class_gradients(
    const BatchForward& forward,
    const std::vector<std::vector<ParamVector>>& logit_grads,
    const Minibatch& batch) {
  const std::size_t classes = forward.labels.cols();
  if (logit_grads.size() != batch.size())
    throw std::invalid_argument("batch_class_gradients: gradient count mismatch");
  std::vector<std::optional<Vector>> out(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    const auto& members = batch.per_class[k];
    if (members.empty()) continue;
    Vector mean(logit_grads.front()[k].size(), 0.0);
    for (std::size_t pos : members) axpy(1.0, logit_grads[pos][k], mean);
    scale(mean, 1.0 / static_cast<double>(members.size()));
    out[k] = std::move(mean);
  }
  return out;
}

/// Per-batch eigenvalue estimates
///   lambda_k^B = (1/|B|) sum_mu y_k^mu p_k^mu (1 - p_k^mu) |c_k^B|^2,
/// a sum of non-negative terms; zero when the class is absent.
inline std::vector<double> batch_eigenvalues(const BatchForward& forward,
                                             const std::vector<double>& c_norm_sq) {
  const std::size_t batch = forward.probs.rows();
  const std::size_t classes = forward.probs.cols();
  if (c_norm_sq.size() != classes)
    throw std::invalid_argument("batch_eigenvalues: c_norm_sq size mismatch");
  std::vector<double> lambda(classes, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t k = 0; k < classes; ++k) {
      const double y = forward.labels.at(i, k);
      if (y == 0.0) continue;
      const double p = forward.probs.at(i, k);
      lambda[k] += y * p * (1.0 - p) * c_norm_sq[k];
    }
  }
  for (double& l : lambda) l /= static_cast<double>(batch);
  return lambda;
}

/// One EMA/RMS update:
///   m_k <- gamma m_k + (1-gamma) c_k^B,   estimate m_k / (1 - gamma^t_k)
///   r_k <- gamma r_k + (1-gamma) (lambda_k^B)^2,  estimate sqrt(r_k / (1-gamma^t_k))
/// Absent classes leave m_k, r_k, t_k untouched.
[[nodiscard]] inline CurvatureState update_state(
    CurvatureState state, const std::vector<std::optional<Vector>>& class_grads,
    const std::vector<double>& batch_lambdas) {
  if (class_grads.size() != state.class_count ||
      batch_lambdas.size() != state.class_count)
    throw std::invalid_argument("update_state: class count mismatch");
  const double g = state.gamma;
  for (std::size_t k = 0; k < state.class_count; ++k) {
    if (!class_grads[k].has_value()) continue;
    const Vector& cb = *class_grads[k];
    if (cb.size() != state.param_dim)
      throw std::invalid_argument("update_state: dimension mismatch");
    Vector& m = state.ema_numerators[k];
    for (std::size_t i = 0; i < m.size(); ++i)
      m[i] = g * m[i] + (1.0 - g) * cb[i];
    state.rms_numerators[k] =
        g * state.rms_numerators[k] + (1.0 - g) * batch_lambdas[k] * batch_lambdas[k];
    ++state.step_counts[k];
  }
  ++state.global_step;
  return state;
}

// Rank-C curvature model H = sum_k lambda_k v_k v_k^T with unit directions.
// Eigenvalues are floored away from zero so the generalized inverse stays
// finite.
struct LowRankHessian {
  std::vector<Vector> directions;      // unit norm
  std::vector<double> eigenvalues;     // >= lambda_floor
  std::vector<std::size_t> class_ids;  // class behind each direction
  bool orthonormalized = false;
  double max_cross_dot = 0.0;          // max |v_i . v_j|, i != j

  std::size_t rank() const { return directions.size(); }
  std::size_t dim() const {
    return directions.empty() ? 0 : directions.front().size();
  }
};

/// Assembles the low-rank Hessian from the running state. Directions are the
/// normalized EMA class gradients in class order, optionally Gram-Schmidt
/// orthonormalized. Classes never observed, or with estimate norm < 1e-12,
/// are excluded this step (the latter with a warning).
inline LowRankHessian build_low_rank(const CurvatureState& state,
                                     bool orthonormalize, double lambda_floor) {
  if (!(lambda_floor > 0.0))
    throw std::invalid_argument("build_low_rank: lambda_floor must be positive");
  LowRankHessian h;
  h.orthonormalized = orthonormalize;
  for (std::size_t k = 0; k < state.class_count; ++k) {
    if (!state.observed(k)) continue;
    Vector c = state.class_gradient_estimate(k);
    const double n = norm(c);
    if (n < 1e-12) {
      std::fprintf(stderr,
                   "subcurve: class %zu gradient estimate norm %.3e below "
                   "1e-12; excluded this step\n",
                   k, n);
      continue;
    }
    scale(c, 1.0 / n);
    if (orthonormalize) {
      for (int pass = 0; pass < 2; ++pass)
        for (const Vector& u : h.directions) axpy(-dot(u, c), u, c);
      const double rn = norm(c);
      if (rn < 1e-12) {
        std::fprintf(stderr,
                     "subcurve: class %zu direction dependent on earlier "
                     "classes; excluded this step\n",
                     k);
        continue;
      }
      scale(c, 1.0 / rn);
    }
    h.directions.push_back(std::move(c));
    h.eigenvalues.push_back(std::max(state.eigenvalue_estimate(k), lambda_floor));
    h.class_ids.push_back(k);
  }
  for (std::size_t i = 0; i < h.directions.size(); ++i)
    for (std::size_t j = i + 1; j < h.directions.size(); ++j)
      h.max_cross_dot =
          std::max(h.max_cross_dot, std::abs(dot(h.directions[i], h.directions[j])));
  return h;
}

/// H u = sum_k lambda_k (v_k . u) v_k in O(N C) time and space; the N x N
/// matrix is never materialized.
inline Vector apply_hvp(const LowRankHessian& h, const Vector& u) {
  if (h.rank() > 0 && u.size() != h.dim())
    throw std::invalid_argument("apply_hvp: dimension mismatch");
  Vector out(u.size(), 0.0);
  for (std::size_t k = 0; k < h.rank(); ++k)
    axpy(h.eigenvalues[k] * dot(h.directions[k], u), h.directions[k], out);
  return out;
}

/// Generalized inverse: H^+ g = sum_k (1/lambda_k) (v_k . g) v_k.
inline Vector apply_pinv(const LowRankHessian& h, const Vector& g) {
  if (h.rank() > 0 && g.size() != h.dim())
    throw std::invalid_argument("apply_pinv: dimension mismatch");
  Vector out(g.size(), 0.0);
  for (std::size_t k = 0; k < h.rank(); ++k)
    axpy(dot(h.directions[k], g) / h.eigenvalues[k], h.directions[k], out);
  return out;
}

/// Complement projection P g = g - sum_k v_k (v_k . g). With orthonormalized
/// directions this is the exact orthogonal projector; otherwise directions
/// are deflated sequentially in class order, which is exact only for the
/// last direction processed.
inline Vector project_complement(const LowRankHessian& h, const Vector& g) {
  if (h.rank() > 0 && g.size() != h.dim())
    throw std::invalid_argument("project_complement: dimension mismatch");
  Vector r = g;
  if (h.orthonormalized) {
    Vector acc(g.size(), 0.0);
    for (const Vector& v : h.directions) axpy(dot(v, g), v, acc);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= acc[i];
  } else {
    for (const Vector& v : h.directions) axpy(-dot(v, r), v, r);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Checkpointing: versioned little-endian binary record so long runs can
// resume bit-exactly. Layout: "SCRV1", u32 C, u64 N, C*N f64 m_k, C f64 r_k,
// C u64 t_k, f64 gamma, u64 global_step.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_raw(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("curvature checkpoint: truncated record");
  return value;
}

}  // namespace detail

inline void save_state(const CurvatureState& state, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint format is little-endian");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_state: cannot open " + path);
  out.write("SCRV1", 5);
  detail::write_raw(out, static_cast<std::uint32_t>(state.class_count));
  detail::write_raw(out, static_cast<std::uint64_t>(state.param_dim));
  for (const Vector& m : state.ema_numerators)
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  for (double r : state.rms_numerators) detail::write_raw(out, r);
  for (std::uint64_t t : state.step_counts) detail::write_raw(out, t);
  detail::write_raw(out, state.gamma);
  detail::write_raw(out, state.global_step);
  if (!out) throw std::runtime_error("save_state: write failed for " + path);
}

inline CurvatureState load_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_state: cannot open " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::string(magic, 5) != "SCRV1")
    throw std::runtime_error("load_state: bad magic in " + path);
  const auto classes = detail::read_raw<std::uint32_t>(in);
  const auto dim = detail::read_raw<std::uint64_t>(in);
  CurvatureState state;
  state.class_count = classes;
  state.param_dim = dim;
  state.ema_numerators.assign(classes, Vector(dim));
  for (Vector& m : state.ema_numerators) {
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_state: truncated record");
  }
  state.rms_numerators.resize(classes);
  for (double& r : state.rms_numerators) r = detail::read_raw<double>(in);
  state.step_counts.resize(classes);
  for (std::uint64_t& t : state.step_counts) t = detail::read_raw<std::uint64_t>(in);
  state.gamma = detail::read_raw<double>(in);
  state.global_step = detail::read_raw<std::uint64_t>(in);
  return state;
}

}  // namespace subcurve
