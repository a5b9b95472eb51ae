#include "subcurve/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "subcurve/autodiff.hpp"

using namespace subcurve;

namespace {

TEST(ParamCount, SmallSpecs) {
  EXPECT_EQ(param_count({{2, 3}}), 9u);
  EXPECT_EQ(param_count({{784, 32, 10}}), 25450u);
  // linear model [d, C] -> (d+1)*C
  EXPECT_EQ(param_count({{5, 4}}), 24u);
}

TEST(ParamCount, InvalidSpecsThrow) {
  EXPECT_THROW(param_count({{7}}), std::invalid_argument);
  EXPECT_THROW(param_count({{3, 0, 2}}), std::invalid_argument);
}

TEST(InitParams, LayoutAndZeroBiases) {
  const ModelSpec spec{{2, 3}};
  const ParamVector p = init_params(spec, 99);
  ASSERT_EQ(p.size(), 9u);
  const ParamLayout layout(spec);
  for (double b : layout.biases(p, 0)) EXPECT_EQ(b, 0.0);
  for (double w : layout.weights(p, 0)) EXPECT_NE(w, 0.0);
}

TEST(InitParams, DeterministicPerSeed) {
  const ModelSpec spec{{6, 5, 3}};
  const ParamVector a = init_params(spec, 1234);
  const ParamVector b = init_params(spec, 1234);
  EXPECT_EQ(a, b);
  const ParamVector c = init_params(spec, 1235);
  EXPECT_NE(a, c);
}

TEST(InitParams, HeVariancePerLayer) {
  const ModelSpec spec{{4, 8, 3}};
  // average the empirical variance over many draws to beat sampling noise
  const ParamLayout layout(spec);
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    double sum_sq = 0.0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const ParamVector p = init_params(spec, seed);
      for (double w : layout.weights(p, l)) {
        sum_sq += w * w;
        ++n;
      }
    }
    const double target = 2.0 / static_cast<double>(layout.in_width(l));
    const double var = sum_sq / static_cast<double>(n);
    EXPECT_GT(var, 0.7 * target);
    EXPECT_LT(var, 1.3 * target);
  }
}

TEST(ParamLayout, FlattenUnflattenRoundTrip) {
  const ModelSpec spec{{3, 4, 2}};
  const ParamVector p = init_params(spec, 5);
  const auto layers = unflatten(spec, p);
  ASSERT_EQ(layers.size(), 2u);
  EXPECT_EQ(layers[0].weight.rows, 4u);
  EXPECT_EQ(layers[0].weight.cols, 3u);
  EXPECT_EQ(layers[1].bias.size(), 2u);
  const ParamVector back = flatten(spec, layers);
  EXPECT_EQ(p, back);  // exact
}

// A single affine layer is linear in its parameters: the Hessian of every
// logit is exactly zero.
TEST(Model, SingleLayerLogitHessianIsZero) {
  const ModelSpec spec{{3, 2}, Activation::identity};
  const ParamVector theta = init_params(spec, 8);
  const Vector x{0.4, -1.1, 2.2};
  for (std::size_t k = 0; k < 2; ++k) {
    const DenseMatrix hess = fd_hessian(
        [&](const Vector& p) { return logit_gradient(spec, p, x, k); }, theta,
        1e-5);
    EXPECT_LT(hess.max_abs(), 1e-9);
  }
}

// For deeper ReLU networks the logit map is piecewise linear within each
// layer's parameters (zero within-layer Hessian blocks away from kinks) but
// bilinear across layers, so the cross-layer blocks do not vanish.
TEST(Model, LogitHessianWithinLayerBlocksVanishAwayFromKinks) {
  const ModelSpec spec{{3, 4, 2}};
  Rng rng(8);
  Vector x(3);
  ParamVector theta;
  // resample until pre-activations are clear of zero so finite differences
  // never cross a kink
  for (int attempt = 0; attempt < 50; ++attempt) {
    for (double& v : x) v = rng.normal();
    theta = init_params(spec, 100 + static_cast<std::uint64_t>(attempt));
    const ParamLayout layout(spec);
    bool clear = true;
    const auto w = layout.weights(theta, 0);
    const auto b = layout.biases(theta, 0);
    for (std::size_t o = 0; o < 4 && clear; ++o) {
      double s = b[o];
      for (std::size_t j = 0; j < 3; ++j) s += w[o * 3 + j] * x[j];
      if (std::abs(s) < 1e-2) clear = false;
    }
    if (clear) break;
  }
  const ParamLayout layout(spec);
  const std::size_t k = 1;
  const DenseMatrix hess = fd_hessian(
      [&](const Vector& p) { return logit_gradient(spec, p, x, k); }, theta, 1e-5);
  double within = 0.0, cross = 0.0;
  const std::size_t split = layout.weight_offset(1);  // layer-0 block ends here
  for (std::size_t a = 0; a < hess.rows; ++a)
    for (std::size_t b = 0; b < hess.cols; ++b) {
      const bool same_layer = (a < split) == (b < split);
      (same_layer ? within : cross) = std::max(same_layer ? within : cross,
                                               std::abs(hess(a, b)));
    }
  EXPECT_LT(within, 1e-7);
  EXPECT_GT(cross, 1e-3);  // the bilinear coupling is real
}

}  // namespace
