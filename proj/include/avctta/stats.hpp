#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace avctta {

template <typename Scalar>
using VectorX = Eigen::Vector<Scalar, Eigen::Dynamic>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMajorX =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

/// Lower bound applied to every computed variance entry. Constant inputs
/// would otherwise produce zero variance and blow up the KL terms that
/// divide by it.
inline constexpr double kVarianceFloor = 1e-6;

/// Diagonal-Gaussian summary (per-dimension mean and variance) of one
/// modality of a raw input batch.
template <typename Scalar>
struct ModalityStatsT {
  VectorX<Scalar> mean;
  VectorX<Scalar> var;  // diagonal of the covariance, entries >= kVarianceFloor

  Index dim() const { return mean.size(); }
};

/// Paired audio/visual statistics; the key under which fusion-parameter
/// snapshots are stored and retrieved.
template <typename Scalar>
struct AVSignatureT {
  ModalityStatsT<Scalar> audio;   // length = frequency bins
  ModalityStatsT<Scalar> visual;  // length = channels
};

/// Batch of visual frames, logical shape [B, H, W, C]. Each row of `values`
/// is one sample flattened row-major over (H, W, C), so entry (h, w, c)
/// lives at column (h*W + w)*C + c.
template <typename Scalar>
struct VisualBatchT {
  Index batch = 0, height = 0, width = 0, channels = 0;
  RowMajorX<Scalar> values;  // [B, H*W*C]
};

/// Batch of spectrograms, logical shape [B, T, F]. Entry (t, f) of a sample
/// lives at column t*F + f of its row.
template <typename Scalar>
struct AudioBatchT {
  Index batch = 0, time_steps = 0, freq_bins = 0;
  RowMajorX<Scalar> values;  // [B, T*F]
};

using ModalityStats = ModalityStatsT<double>;
using AVSignature = AVSignatureT<double>;
using VisualBatch = VisualBatchT<double>;
using AudioBatch = AudioBatchT<double>;

template <typename Scalar>
VisualBatchT<Scalar> make_visual_batch(Index batch, Index height, Index width,
                                       Index channels) {
  VisualBatchT<Scalar> b{batch, height, width, channels, {}};
  b.values.setZero(batch, height * width * channels);
  return b;
}

template <typename Scalar>
AudioBatchT<Scalar> make_audio_batch(Index batch, Index time_steps,
                                     Index freq_bins) {
  AudioBatchT<Scalar> b{batch, time_steps, freq_bins, {}};
  b.values.setZero(batch, time_steps * freq_bins);
  return b;
}

namespace detail {

// Kahan-compensated accumulator; keeps single-pass sums accurate for the
// largest batches the stream can produce.
struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;

  void add(double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

// Shared core of the two stats operations: per-group mean/variance where the
// group of a flat in-row position i is i % groups, averaged over all rows.
template <typename Scalar>
ModalityStatsT<Scalar> grouped_stats(const RowMajorX<Scalar>& values,
                                     Index groups, Index count_per_group,
                                     const char* what) {
  if (values.rows() <= 0 || values.cols() <= 0 || groups <= 0 ||
      count_per_group <= 0) {
    throw std::invalid_argument(std::string(what) + ": empty batch");
  }
  std::vector<KahanSum> sum(static_cast<std::size_t>(groups));
  std::vector<KahanSum> sumsq(static_cast<std::size_t>(groups));
  for (Index r = 0; r < values.rows(); ++r) {
    const Scalar* p = values.row(r).data();
    Index g = 0;
    for (Index i = 0; i < values.cols(); ++i) {
      const double v = static_cast<double>(p[i]);
      sum[static_cast<std::size_t>(g)].add(v);
      sumsq[static_cast<std::size_t>(g)].add(v * v);
      if (++g == groups) g = 0;
    }
  }
  const double n = static_cast<double>(count_per_group);
  ModalityStatsT<Scalar> out;
  out.mean.resize(groups);
  out.var.resize(groups);
  for (Index g = 0; g < groups; ++g) {
    const double m = sum[static_cast<std::size_t>(g)].sum / n;
    double v = sumsq[static_cast<std::size_t>(g)].sum / n - m * m;
    v = std::max(v, 0.0);
    out.mean[g] = static_cast<Scalar>(m);
    out.var[g] = static_cast<Scalar>(std::max(v, kVarianceFloor));
  }
  if (!out.mean.allFinite() || !out.var.allFinite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite input");
  }
  return out;
}

}  // namespace detail

/// Channel-wise mean and population variance over every (sample, pixel)
/// position of the batch; output length C.
template <typename Scalar>
ModalityStatsT<Scalar> compute_visual_stats(const VisualBatchT<Scalar>& b) {
  if (b.values.rows() != b.batch ||
      b.values.cols() != b.height * b.width * b.channels) {
    throw std::invalid_argument("compute_visual_stats: shape mismatch");
  }
  return detail::grouped_stats(b.values, b.channels,
                               b.batch * b.height * b.width,
                               "compute_visual_stats");
}

/// Frequency-bin mean and population variance over every (sample, time)
/// position of the batch; output length F.
template <typename Scalar>
ModalityStatsT<Scalar> compute_audio_stats(const AudioBatchT<Scalar>& b) {
  if (b.values.rows() != b.batch ||
      b.values.cols() != b.time_steps * b.freq_bins) {
    throw std::invalid_argument("compute_audio_stats: shape mismatch");
  }
  return detail::grouped_stats(b.values, b.freq_bins, b.batch * b.time_steps,
                               "compute_audio_stats");
}

/// KL divergence D(p || q) between diagonal Gaussians, summed over
/// dimensions:
///   sum_i [ (var_p + (mu_p - mu_q)^2) / (2 var_q) - 1/2
///           + ln(sigma_q / sigma_p) ]
/// Clamped at zero; rounding can leave a tiny negative residue when p ~= q.
template <typename Scalar>
Scalar kl_diag_gaussian(const ModalityStatsT<Scalar>& p,
                        const ModalityStatsT<Scalar>& q) {
  if (p.dim() != q.dim() || p.dim() != p.var.size() || q.dim() != q.var.size()) {
    throw std::invalid_argument("kl_diag_gaussian: dimension mismatch");
  }
  if (p.dim() < 1) {
    throw std::invalid_argument("kl_diag_gaussian: empty stats");
  }
  const auto pv = p.var.array();
  const auto qv = q.var.array();
  const auto dmu = (p.mean - q.mean).array();
  const Scalar kl =
      ((pv + dmu.square()) / (Scalar(2) * qv) - Scalar(0.5) +
       Scalar(0.5) * (qv / pv).log())
          .sum();
  return std::max(kl, Scalar(0));
}

/// Summed audio + visual KL between two signatures; the retrieval distance.
template <typename Scalar>
Scalar combined_distance(const AVSignatureT<Scalar>& query,
                         const AVSignatureT<Scalar>& elem) {
  return kl_diag_gaussian(query.audio, elem.audio) +
         kl_diag_gaussian(query.visual, elem.visual);
}

}  // namespace avctta
