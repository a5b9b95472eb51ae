// Optimizers: SGD with heavy-ball momentum, the low-rank quasi-Newton update
//   theta' <- theta - eta g - sum_k (1/lambda_k - eta) (v_k . g) v_k,
// and the per-step training loop that wires curvature estimation into the
// updates.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "subcurve/autodiff.hpp"
#include "subcurve/curvature.hpp"
#include "subcurve/data.hpp"
#include "subcurve/model.hpp"

namespace subcurve {

enum class Method { sgd, quasi_newton };

// Where momentum enters the quasi-Newton update. combined_update runs the
// velocity on the whole step; projected_only keeps the Newton part raw and
// runs the velocity on the complement-gradient part alone.
enum class MomentumMode { combined_update, projected_only };

struct OptimizerConfig {
  Method method = Method::sgd;
  double eta = 0.1;
  double momentum_beta = 0.9;
  double gamma = 0.9;
  double weight_decay = 0.0;
  bool orthonormalize = false;
  double lambda_floor = 1e-8;
  MomentumMode momentum_applies_to = MomentumMode::combined_update;
  // Optional cap on the Newton part's norm; disabled by default.
  double max_newton_step = std::numeric_limits<double>::infinity();

  void validate() const {
    if (!(eta > 0.0)) throw std::invalid_argument("OptimizerConfig: eta must be > 0");
    if (!(momentum_beta >= 0.0 && momentum_beta < 1.0))
      throw std::invalid_argument("OptimizerConfig: momentum_beta must be in [0,1)");
    if (!(gamma > 0.0 && gamma < 1.0))
      throw std::invalid_argument("OptimizerConfig: gamma must be in (0,1)");
    if (!(weight_decay >= 0.0))
      throw std::invalid_argument("OptimizerConfig: weight_decay must be >= 0");
    if (!(lambda_floor > 0.0))
      throw std::invalid_argument("OptimizerConfig: lambda_floor must be > 0");
    if (!(max_newton_step > 0.0))
      throw std::invalid_argument("OptimizerConfig: max_newton_step must be > 0");
  }
};

struct MomentumState {
  Vector velocity;
  static MomentumState zeros(std::size_t n) { return {Vector(n, 0.0)}; }
};

struct StepError : std::runtime_error {
  explicit StepError(const std::string& message) : std::runtime_error(message) {}
};

/// Heavy-ball SGD: velocity <- beta velocity + g, theta <- theta - eta velocity.
/// beta = 0 recovers plain gradient descent.
inline void sgd_step(Vector& theta, const Vector& g, MomentumState& mstate,
                     const OptimizerConfig& cfg) {
  if (g.size() != theta.size() || mstate.velocity.size() != theta.size())
    throw std::invalid_argument("sgd_step: dimension mismatch");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g_eff = g[i] + cfg.weight_decay * theta[i];
    mstate.velocity[i] = cfg.momentum_beta * mstate.velocity[i] + g_eff;
    theta[i] -= cfg.eta * mstate.velocity[i];
  }
  if (!all_finite(theta) || !all_finite(mstate.velocity))
    throw StepError("sgd_step: non-finite update (eta=" + std::to_string(cfg.eta) + ")");
}

namespace detail {

inline std::string qn_dump(const LowRankHessian& h, const std::vector<double>& proj) {
  std::ostringstream os;
  os << "per-class (lambda, |v.g|):";
  for (std::size_t k = 0; k < h.rank(); ++k)
    os << " class" << h.class_ids[k] << "=(" << h.eigenvalues[k] << ", "
       << std::abs(proj[k]) << ")";
  return os.str();
}

}  // namespace detail

/// Quasi-Newton step: Newton inside span{v_k}, eta-scaled gradient descent in
/// the complement, evaluated in the combined single-formula form. Momentum
/// placement follows cfg.momentum_applies_to.
inline void qn_step(Vector& theta, const Vector& g, const LowRankHessian& h,
                    MomentumState& mstate, const OptimizerConfig& cfg) {
  if (g.size() != theta.size() || mstate.velocity.size() != theta.size())
    throw std::invalid_argument("qn_step: dimension mismatch");
  if (h.rank() > 0 && h.dim() != theta.size())
    throw std::invalid_argument("qn_step: curvature dimension mismatch");

  Vector g_eff = g;
  if (cfg.weight_decay != 0.0) axpy(cfg.weight_decay, theta, g_eff);

  std::vector<double> proj(h.rank());
  for (std::size_t k = 0; k < h.rank(); ++k)
    proj[k] = dot(h.directions[k], g_eff);

  // Newton part sum_k (1/lambda_k)(v_k . g) v_k, optionally norm-capped.
  Vector newton(theta.size(), 0.0);
  for (std::size_t k = 0; k < h.rank(); ++k)
    axpy(proj[k] / h.eigenvalues[k], h.directions[k], newton);
  bool capped = false;
  if (std::isfinite(cfg.max_newton_step)) {
    const double nn = norm(newton);
    if (nn > cfg.max_newton_step) {
      scale(newton, cfg.max_newton_step / nn);
      capped = true;
    }
  }

  Vector step(theta.size());  // the positive step d with theta' = theta - d
  if (cfg.momentum_applies_to == MomentumMode::combined_update && !capped) {
    // d = eta g + sum_k (1/lambda_k - eta)(v_k . g) v_k, as written
    for (std::size_t i = 0; i < step.size(); ++i) step[i] = cfg.eta * g_eff[i];
    for (std::size_t k = 0; k < h.rank(); ++k)
      axpy((1.0 / h.eigenvalues[k] - cfg.eta) * proj[k], h.directions[k], step);
    if (!all_finite(step))
      throw StepError("qn_step: non-finite update; " + detail::qn_dump(h, proj));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      mstate.velocity[i] = cfg.momentum_beta * mstate.velocity[i] + step[i];
      theta[i] -= mstate.velocity[i];
    }
  } else {
    // decomposition form: d = eta (g - sum_k (v_k . g) v_k) + newton
    Vector deflated = g_eff;
    for (std::size_t k = 0; k < h.rank(); ++k)
      axpy(-proj[k], h.directions[k], deflated);
    if (!all_finite(newton) || !all_finite(deflated))
      throw StepError("qn_step: non-finite update; " + detail::qn_dump(h, proj));
    if (cfg.momentum_applies_to == MomentumMode::combined_update) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        mstate.velocity[i] = cfg.momentum_beta * mstate.velocity[i] +
                             cfg.eta * deflated[i] + newton[i];
        theta[i] -= mstate.velocity[i];
      }
    } else {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        mstate.velocity[i] =
            cfg.momentum_beta * mstate.velocity[i] + cfg.eta * deflated[i];
        theta[i] -= mstate.velocity[i] + newton[i];
      }
    }
  }
  if (!all_finite(theta))
    throw StepError("qn_step: non-finite parameters; " + detail::qn_dump(h, proj));
}

struct StepMetrics {
  std::uint64_t step = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  double grad_norm = 0.0;
  std::vector<double> lambda_hat;  // per-class estimates; empty for sgd
  double max_cross_dot = 0.0;
};

enum class RunOutcome { completed, diverged };

struct TrainState {
  ParamVector params;
  MomentumState momentum;
  CurvatureState curvature;
  std::uint64_t steps_done = 0;

  static TrainState init(const ModelSpec& spec, std::uint64_t seed,
                         const OptimizerConfig& cfg) {
    TrainState s;
    s.params = init_params(spec, seed);
    s.momentum = MomentumState::zeros(s.params.size());
    s.curvature = CurvatureState::init(spec.class_count(), s.params.size(), cfg.gamma);
    return s;
  }
};

struct EpochResult {
  std::vector<StepMetrics> metrics;
  RunOutcome outcome = RunOutcome::completed;
  std::string message;
};

inline double batch_accuracy(const BatchForward& fb) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < fb.logits.rows(); ++i) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < fb.logits.cols(); ++k)
      if (fb.logits.at(i, k) > fb.logits.at(i, arg)) arg = k;
    if (fb.labels.at(i, arg) == 1.0) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(fb.logits.rows());
}

constexpr double kDivergenceParamNorm = 1e12;

/// One epoch over seeded minibatches. Quasi-Newton steps refresh the
/// curvature state and rebuild the low-rank Hessian every minibatch. A step
/// that produces non-finite values (or |theta| beyond 1e12) aborts the epoch
/// with the metrics gathered so far and outcome = diverged.
inline EpochResult train_epoch(const ModelSpec& spec, const Dataset& train,
                               const OptimizerConfig& cfg, std::size_t batch_size,
                               TrainState& state, std::uint64_t epoch_seed) {
  cfg.validate();
  if (train.size() == 0)
    throw std::invalid_argument("train_epoch: empty dataset");
  EpochResult result;
  const auto batches = minibatch_stream(train, batch_size, epoch_seed);
  for (const Minibatch& batch : batches) {
    StepMetrics row;
    row.step = state.steps_done;
    try {
      const Tensor inputs = gather_inputs(train, batch);
      const BatchForward fb = forward_batch(spec, state.params, inputs, batch.one_hot);
      const ParamVector grad =
          loss_gradient(spec, state.params, inputs, batch.one_hot);
      row.mean_loss = fb.mean_loss;
      row.train_accuracy = batch_accuracy(fb);
      row.grad_norm = norm(grad);

      if (cfg.method == Method::quasi_newton) {
        const auto logit_grads = batch_logit_gradients(spec, state.params, inputs);
        const auto class_grads = batch_class_gradients(fb, logit_grads, batch);
        std::vector<double> c_norm_sq(train.class_count, 0.0);
        for (std::size_t k = 0; k < train.class_count; ++k)
          if (class_grads[k]) c_norm_sq[k] = norm_sq(*class_grads[k]);
        const auto lambdas = batch_eigenvalues(fb, c_norm_sq);
        state.curvature = update_state(std::move(state.curvature), class_grads, lambdas);
        const LowRankHessian h =
            build_low_rank(state.curvature, cfg.orthonormalize, cfg.lambda_floor);
        row.lambda_hat.resize(train.class_count);
        for (std::size_t k = 0; k < train.class_count; ++k)
          row.lambda_hat[k] = state.curvature.eigenvalue_estimate(k);
        row.max_cross_dot = h.max_cross_dot;
        qn_step(state.params, grad, h, state.momentum, cfg);
      } else {
        sgd_step(state.params, grad, state.momentum, cfg);
      }

      ++state.steps_done;
      const double loss_now = row.mean_loss;
      result.metrics.push_back(std::move(row));
      if (!std::isfinite(loss_now) ||
          norm(state.params) > kDivergenceParamNorm) {
        result.outcome = RunOutcome::diverged;
        result.message = "parameter norm or loss diverged at step " +
                         std::to_string(state.steps_done);
        return result;
      }
    } catch (const ForwardError& e) {
      result.outcome = RunOutcome::diverged;
      result.message = e.what();
      return result;
    } catch (const StepError& e) {
      result.outcome = RunOutcome::diverged;
      result.message = e.what();
      return result;
    }
  }
  return result;
}

}  // namespace subcurve
