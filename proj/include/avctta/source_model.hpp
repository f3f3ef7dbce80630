#pragma once

#include "avctta/model.hpp"
#include "avctta/stream.hpp"

#include <algorithm>
#include <stdexcept>

namespace avctta {

/// Frozen weights plus the fusion parameters the deployment starts from.
/// The source parameters keep W_Q = W_K = 0 (uniform attention, so pooling
/// is linear in the inputs) and a small random W_V.
template <typename Scalar>
struct SourceModelT {
  ModelConfigT<Scalar> config;
  FrozenWeightsT<Scalar> frozen;
  FusionParamsT<Scalar> source_params;
};

using SourceModel = SourceModelT<double>;

template <typename Scalar>
AdaptBatchT<Scalar> dataset_slice(const SourceDatasetT<Scalar>& ds, Index start,
                                  Index count) {
  AdaptBatchT<Scalar> b;
  b.audio.batch = count;
  b.audio.time_steps = ds.time_steps;
  b.audio.freq_bins = ds.freq_bins;
  b.audio.values = ds.audio.middleRows(start, count);
  b.visual.batch = count;
  b.visual.height = ds.height;
  b.visual.width = ds.width;
  b.visual.channels = ds.channels;
  b.visual.values = ds.visual.middleRows(start, count);
  return b;
}

/// Builds the source model for a dataset: seeded random encoders and W_V,
/// then a ridge least-squares fit of the head over the pooled representations
/// of the clean source samples against one-hot class targets.
template <typename Scalar>
SourceModelT<Scalar> fit_source_model(const SourceDatasetT<Scalar>& ds,
                                      ModelConfigT<Scalar> config,
                                      Scalar ridge_lambda = Scalar(1e-3),
                                      Scalar value_init_scale = Scalar(0.1)) {
  config.validate();
  if (ds.size() < 1) {
    throw std::invalid_argument("fit_source_model: empty dataset");
  }
  if (config.classes != ds.classes) {
    throw std::invalid_argument(
        "fit_source_model: model class count must match the dataset");
  }
  SourceModelT<Scalar> model;
  model.config = config;
  model.frozen = make_frozen_weights(config, ds.time_steps * ds.freq_bins,
                                     ds.height * ds.width * ds.channels);
  model.source_params = zero_params<Scalar>(config.embed_dim);
  {
    Rng rng(derive_seed(config.seed, "value_projection"));
    model.source_params.w_v = detail::gaussian_matrix<Scalar>(
        config.embed_dim, config.embed_dim, value_init_scale, rng);
  }

  // Pooled representations under the source fusion parameters.
  const Index n = ds.size();
  const Index d = config.embed_dim;
  MatrixX<Scalar> features(n, d + 1);  // bias column appended
  const Index chunk = 256;
  for (Index start = 0; start < n; start += chunk) {
    const Index count = std::min(chunk, n - start);
    const auto batch = dataset_slice(ds, start, count);
    const auto cache =
        forward(batch.audio, batch.visual, model.source_params, model.frozen);
    features.block(start, 0, count, d) = cache.pooled;
  }
  features.col(d).setOnes();

  MatrixX<Scalar> targets = MatrixX<Scalar>::Zero(n, config.classes);
  for (Index i = 0; i < n; ++i) {
    targets(i, ds.labels[static_cast<std::size_t>(i)]) = Scalar(1);
  }

  MatrixX<Scalar> gram = features.transpose() * features;
  gram.diagonal().array() += ridge_lambda;
  const MatrixX<Scalar> solution =
      gram.ldlt().solve(features.transpose() * targets);  // [(D+1), A]

  model.frozen.head_weight = solution.topRows(d);
  model.frozen.head_bias = solution.row(d).transpose();
  return model;
}

}  // namespace avctta
