// ReLU multilayer perceptrons with a flat parameter vector. The flat view is
// the coordinate system shared by gradients, class gradients and curvature
// directions, so the (layer, weight|bias) -> offset layout lives here.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "subcurve/linalg.hpp"
#include "subcurve/rng.hpp"

namespace subcurve {

enum class Activation { relu, identity };

struct ModelSpec {
  // [input dim, hidden widths..., class count]
  std::vector<std::size_t> layer_widths;
  Activation activation = Activation::relu;

  std::size_t layer_count() const { return layer_widths.size() - 1; }
  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t class_count() const { return layer_widths.back(); }

  void validate() const {
    if (layer_widths.size() < 2)
      throw std::invalid_argument("ModelSpec: need at least input and output widths");
    for (std::size_t w : layer_widths)
      if (w == 0) throw std::invalid_argument("ModelSpec: zero layer width");
  }
};

// Flat parameter storage; per-layer views come from ParamLayout.
using ParamVector = Vector;

inline std::size_t param_count(const ModelSpec& spec) {
  spec.validate();
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l)
    n += (spec.layer_widths[l] + 1) * spec.layer_widths[l + 1];
  return n;
}

// Offsets into the flat vector: per layer, weight block (out x in, row-major)
// followed by the bias block.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelSpec& spec) : widths_(spec.layer_widths) {
    spec.validate();
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      weight_offsets_.push_back(offset);
      offset += widths_[l] * widths_[l + 1];
      bias_offsets_.push_back(offset);
      offset += widths_[l + 1];
    }
    total_ = offset;
  }

  std::size_t total() const { return total_; }
  std::size_t layer_count() const { return weight_offsets_.size(); }
  std::size_t in_width(std::size_t l) const { return widths_[l]; }
  std::size_t out_width(std::size_t l) const { return widths_[l + 1]; }
  std::size_t weight_offset(std::size_t l) const { return weight_offsets_[l]; }
  std::size_t bias_offset(std::size_t l) const { return bias_offsets_[l]; }

  std::span<const double> weights(const ParamVector& p, std::size_t l) const {
    return {p.data() + weight_offset(l), in_width(l) * out_width(l)};
  }
  std::span<const double> biases(const ParamVector& p, std::size_t l) const {
    return {p.data() + bias_offset(l), out_width(l)};
  }
  std::span<double> weights(ParamVector& p, std::size_t l) const {
    return {p.data() + weight_offset(l), in_width(l) * out_width(l)};
  }
  std::span<double> biases(ParamVector& p, std::size_t l) const {
    return {p.data() + bias_offset(l), out_width(l)};
  }

 private:
  std::vector<std::size_t> widths_;
  std::vector<std::size_t> weight_offsets_;
  std::vector<std::size_t> bias_offsets_;
  std::size_t total_ = 0;
};

struct LayerParams {
  DenseMatrix weight;  // out x in
  Vector bias;
};

inline std::vector<LayerParams> unflatten(const ModelSpec& spec,
                                          const ParamVector& p) {
  const ParamLayout layout(spec);
  if (p.size() != layout.total())
    throw std::invalid_argument("unflatten: parameter size mismatch");
  std::vector<LayerParams> layers(layout.layer_count());
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    LayerParams& lp = layers[l];
    lp.weight = DenseMatrix(layout.out_width(l), layout.in_width(l));
    const auto w = layout.weights(p, l);
    std::copy(w.begin(), w.end(), lp.weight.entries.begin());
    const auto b = layout.biases(p, l);
    lp.bias.assign(b.begin(), b.end());
  }
  return layers;
}

inline ParamVector flatten(const ModelSpec& spec,
                           const std::vector<LayerParams>& layers) {
  const ParamLayout layout(spec);
  if (layers.size() != layout.layer_count())
    throw std::invalid_argument("flatten: layer count mismatch");
  ParamVector p(layout.total());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::copy(layers[l].weight.entries.begin(), layers[l].weight.entries.end(),
              p.begin() + static_cast<std::ptrdiff_t>(layout.weight_offset(l)));
    std::copy(layers[l].bias.begin(), layers[l].bias.end(),
              p.begin() + static_cast<std::ptrdiff_t>(layout.bias_offset(l)));
  }
  return p;
}

/// He-scaled init: weights ~ Normal(0, 2/fan_in), biases 0. Draw order is
/// layer by layer, weights row-major, so identical seeds give bit-identical
/// vectors.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  const ParamLayout layout(spec);
  ParamVector p(layout.total(), 0.0);
  Rng rng(seed);
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(layout.in_width(l)));
    auto w = layout.weights(p, l);
    for (double& x : w) x = stddev * rng.normal();
  }
  return p;
}

}  // namespace subcurve
