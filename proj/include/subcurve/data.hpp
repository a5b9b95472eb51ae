// Dataset ingestion and batching: seeded Gaussian-blob classification sets,
// IDX-format image loading, seeded minibatch streams with per-class
// partitions, and a stratified holdout split.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "subcurve/autodiff.hpp"
#include "subcurve/linalg.hpp"
#include "subcurve/rng.hpp"

namespace subcurve {

struct Dataset {
  DenseMatrix inputs;  // |D| x d
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols; }

  void validate(bool require_all_classes = true) const {
    if (inputs.rows != labels.size())
      throw std::invalid_argument("Dataset: input/label count mismatch");
    if (!inputs.is_finite())
      throw std::invalid_argument("Dataset: non-finite inputs");
    std::vector<std::size_t> counts(class_count, 0);
    for (std::size_t y : labels) {
      if (y >= class_count)
        throw std::invalid_argument("Dataset: label out of range");
      ++counts[y];
    }
    if (require_all_classes && !labels.empty())
      for (std::size_t k = 0; k < class_count; ++k)
        if (counts[k] == 0)
          throw std::invalid_argument("Dataset: class " + std::to_string(k) +
                                      " has no examples");
  }
};

struct Minibatch {
  std::vector<std::size_t> indices;                 // global example ids
  std::vector<std::vector<std::size_t>> per_class;  // positions within batch
  Tensor one_hot;                                   // |B| x C

  std::size_t size() const { return indices.size(); }
};

/// Gaussian blobs: class means sit at mean_scale times a seeded orthonormal-ish
/// direction set, samples are mean + sigma * standard normal. Examples are
/// laid out class-major and the whole set is a pure function of the seed.
inline Dataset generate_blobs(std::size_t classes, std::size_t per_class,
                              std::size_t dim, double mean_scale, double sigma,
                              std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("generate_blobs: need >= 2 classes");
  if (dim < 2) throw std::invalid_argument("generate_blobs: need dim >= 2");
  if (per_class == 0)
    throw std::invalid_argument("generate_blobs: need per_class >= 1");
  if (!(sigma >= 0.0)) throw std::invalid_argument("generate_blobs: sigma < 0");

  Rng rng(seed);
  std::vector<Vector> raw(classes, Vector(dim));
  for (auto& v : raw)
    for (double& x : v) x = rng.normal();
  std::vector<Vector> directions = gram_schmidt(raw, 1e-12);
  while (directions.size() < classes) {
    Vector v(dim);
    for (double& x : v) x = rng.normal();
    const double n = norm(v);
    if (n < 1e-12) continue;
    scale(v, 1.0 / n);
    directions.push_back(std::move(v));
  }

  Dataset d;
  d.class_count = classes;
  d.inputs = DenseMatrix(classes * per_class, dim);
  d.labels.resize(classes * per_class);
  d.name = "blobs-c" + std::to_string(classes) + "-d" + std::to_string(dim) +
           "-seed" + std::to_string(seed);
  std::size_t row = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      d.labels[row] = k;
      for (std::size_t j = 0; j < dim; ++j)
        d.inputs(row, j) = mean_scale * directions[k][j] + sigma * rng.normal();
    }
  }
  d.validate();
  return d;
}

struct IdxError : std::runtime_error {
  enum class Kind { magic_mismatch, truncated, count_mismatch };
  IdxError(Kind k, const std::string& message)
      : std::runtime_error(message), kind(k) {}
  Kind kind;
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::truncated, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes,
                               std::size_t offset, const std::string& path) {
  if (offset + 4 > bytes.size())
    throw IdxError(IdxError::Kind::truncated, path + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) |
         (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) |
         std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

/// Loads an IDX image/label file pair (big-endian magic 0x00000803 for 3-D
/// unsigned-byte images, 0x00000801 for 1-D labels). Pixels are scaled to
/// [0,1] by /255 and flattened row-major.
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  const auto img = detail::read_file_bytes(images_path);
  const std::uint32_t img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != 0x00000803u)
    throw IdxError(IdxError::Kind::magic_mismatch,
                   images_path + ": magic mismatch (expected 0x00000803)");
  const std::uint32_t count = detail::read_be32(img, 4, images_path);
  const std::uint32_t rows = detail::read_be32(img, 8, images_path);
  const std::uint32_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t pixels = std::size_t{count} * rows * cols;
  if (img.size() < 16 + pixels)
    throw IdxError(IdxError::Kind::truncated, images_path + ": truncated data");

  const auto lab = detail::read_file_bytes(labels_path);
  const std::uint32_t lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u)
    throw IdxError(IdxError::Kind::magic_mismatch,
                   labels_path + ": magic mismatch (expected 0x00000801)");
  const std::uint32_t lab_count = detail::read_be32(lab, 4, labels_path);
  if (lab.size() < 8 + lab_count)
    throw IdxError(IdxError::Kind::truncated, labels_path + ": truncated data");
  if (lab_count != count)
    throw IdxError(IdxError::Kind::count_mismatch,
                   "count mismatch: " + std::to_string(count) + " images vs " +
                       std::to_string(lab_count) + " labels");

  Dataset d;
  d.name = images_path;
  d.inputs = DenseMatrix(count, std::size_t{rows} * cols);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t p = 0; p < std::size_t{rows} * cols; ++p)
      d.inputs(i, p) =
          static_cast<double>(img[16 + i * rows * cols + p]) / 255.0;
    d.labels[i] = lab[8 + i];
  }
  d.class_count =
      d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.validate(false);
  return d;
}

/// Seeded permutation of the dataset cut into contiguous batches; the last
/// batch may be smaller. Each batch carries its per-class position partition
/// and one-hot labels.
inline std::vector<Minibatch> minibatch_stream(const Dataset& data,
                                               std::size_t batch_size,
                                               std::uint64_t epoch_seed) {
  if (batch_size == 0)
    throw std::invalid_argument("minibatch_stream: batch_size must be >= 1");
  std::vector<std::size_t> perm(data.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(epoch_seed);
  rng.shuffle(perm);

  std::vector<Minibatch> batches;
  for (std::size_t start = 0; start < perm.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, perm.size());
    Minibatch b;
    b.indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(start),
                     perm.begin() + static_cast<std::ptrdiff_t>(end));
    b.per_class.assign(data.class_count, {});
    std::vector<std::size_t> labels(b.indices.size());
    for (std::size_t pos = 0; pos < b.indices.size(); ++pos) {
      labels[pos] = data.labels[b.indices[pos]];
      b.per_class[labels[pos]].push_back(pos);
    }
    b.one_hot = one_hot_labels(labels, data.class_count);
    batches.push_back(std::move(b));
  }
  return batches;
}

inline Tensor gather_inputs(const Dataset& data, const Minibatch& batch) {
  Tensor t = Tensor::matrix(batch.size(), data.dim());
  for (std::size_t pos = 0; pos < batch.size(); ++pos)
    for (std::size_t j = 0; j < data.dim(); ++j)
      t.at(pos, j) = data.inputs(batch.indices[pos], j);
  return t;
}

inline Dataset subset(const Dataset& data, const std::vector<std::size_t>& ids,
                      const std::string& name) {
  Dataset out;
  out.class_count = data.class_count;
  out.name = name;
  out.inputs = DenseMatrix(ids.size(), data.dim());
  out.labels.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out.labels[i] = data.labels[ids[i]];
    for (std::size_t j = 0; j < data.dim(); ++j)
      out.inputs(i, j) = data.inputs(ids[i], j);
  }
  return out;
}

/// Stratified holdout: per class, a seeded shuffle sends floor(fraction * n_k)
/// examples (capped so training keeps at least one) to the validation set.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& data,
                                                 double fraction,
                                                 std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0))
    throw std::invalid_argument("split_holdout: fraction must be in [0,1)");
  std::vector<std::vector<std::size_t>> by_class(data.class_count);
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[data.labels[i]].push_back(i);

  Rng rng(seed);
  std::vector<std::size_t> train_ids, val_ids;
  for (auto& ids : by_class) {
    rng.shuffle(ids);
    std::size_t n_val =
        static_cast<std::size_t>(fraction * static_cast<double>(ids.size()));
    if (n_val >= ids.size()) n_val = ids.size() - 1;
    for (std::size_t i = 0; i < ids.size(); ++i)
      (i < n_val ? val_ids : train_ids).push_back(ids[i]);
  }
  std::sort(train_ids.begin(), train_ids.end());
  std::sort(val_ids.begin(), val_ids.end());
  Dataset train = subset(data, train_ids, data.name + "-train");
  Dataset val = subset(data, val_ids, data.name + "-val");
  train.validate();
  val.validate(false);
  return {std::move(train), std::move(val)};
}

}  // namespace subcurve
