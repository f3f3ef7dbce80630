#pragma once

#include "avctta/rng.hpp"
#include "avctta/stats.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace avctta {

/// Declarative description of the synthetic labeled source domain: per-class
/// Gaussian prototypes in both modalities plus per-sample noise.
template <typename Scalar>
struct SourceSpecT {
  Index classes = 10;
  Index samples_per_class = 50;
  Index height = 16, width = 16, channels = 3;  // visual shape
  Index time_steps = 128, freq_bins = 8;        // audio shape
  Scalar proto_scale = Scalar(1);
  Scalar noise_scale = Scalar(0.1);
  std::uint64_t seed = 0;

  Index size() const { return classes * samples_per_class; }
  Index visual_dim() const { return height * width * channels; }
  Index audio_dim() const { return time_steps * freq_bins; }

  void validate() const {
    if (classes < 1 || samples_per_class < 1 || height < 1 || width < 1 ||
        channels < 1 || time_steps < 1 || freq_bins < 1) {
      throw std::invalid_argument("SourceSpec: all dims must be >= 1");
    }
    if (noise_scale < Scalar(0)) {
      throw std::invalid_argument("SourceSpec: noise scale must be >= 0");
    }
  }
};

/// Materialized source set. Sample rows are emitted in a seeded shuffled
/// order so that every stream batch mixes classes.
template <typename Scalar>
struct SourceDatasetT {
  Index classes = 0;
  Index height = 0, width = 0, channels = 0;
  Index time_steps = 0, freq_bins = 0;
  RowMajorX<Scalar> audio;   // [n, T*F]
  RowMajorX<Scalar> visual;  // [n, H*W*C]
  std::vector<std::int32_t> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
};

using SourceSpec = SourceSpecT<double>;
using SourceDataset = SourceDatasetT<double>;

template <typename Scalar>
SourceDatasetT<Scalar> make_source(const SourceSpecT<Scalar>& spec) {
  spec.validate();
  const Index n = spec.size();
  SourceDatasetT<Scalar> ds;
  ds.classes = spec.classes;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.channels = spec.channels;
  ds.time_steps = spec.time_steps;
  ds.freq_bins = spec.freq_bins;
  ds.audio.resize(n, spec.audio_dim());
  ds.visual.resize(n, spec.visual_dim());
  ds.labels.resize(static_cast<std::size_t>(n));

  RowMajorX<Scalar> proto_a(spec.classes, spec.audio_dim());
  RowMajorX<Scalar> proto_v(spec.classes, spec.visual_dim());
  for (Index c = 0; c < spec.classes; ++c) {
    Rng rng(derive_seed(spec.seed, "prototype", static_cast<std::uint64_t>(c)));
    for (Index j = 0; j < spec.audio_dim(); ++j) {
      proto_a(c, j) = spec.proto_scale * static_cast<Scalar>(rng.normal());
    }
    for (Index j = 0; j < spec.visual_dim(); ++j) {
      proto_v(c, j) = spec.proto_scale * static_cast<Scalar>(rng.normal());
    }
  }

  // Class-interleaving permutation; generation stays per-sample seeded so
  // the contents do not depend on emission order.
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  {
    Rng rng(derive_seed(spec.seed, "sample_order"));
    shuffle(order, rng);
  }

  for (Index row = 0; row < n; ++row) {
    const Index gen_index = order[static_cast<std::size_t>(row)];
    const Index c = gen_index / spec.samples_per_class;
    Rng rng(derive_seed(spec.seed, "sample",
                        static_cast<std::uint64_t>(gen_index)));
    for (Index j = 0; j < spec.audio_dim(); ++j) {
      ds.audio(row, j) =
          proto_a(c, j) + spec.noise_scale * static_cast<Scalar>(rng.normal());
    }
    for (Index j = 0; j < spec.visual_dim(); ++j) {
      ds.visual(row, j) =
          proto_v(c, j) + spec.noise_scale * static_cast<Scalar>(rng.normal());
    }
    ds.labels[static_cast<std::size_t>(row)] = static_cast<std::int32_t>(c);
  }
  return ds;
}

enum class Modality { Audio, Visual, Both };
enum class CorruptionKind {
  AdditiveGaussian,
  MeanShift,
  VarianceScale,
  BandAttenuate,  // audio only
  BlurBoxfilter,  // visual only
};

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::Audio: return "audio";
    case Modality::Visual: return "visual";
    case Modality::Both: return "both";
  }
  return "?";
}

inline const char* to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::AdditiveGaussian: return "additive_gaussian";
    case CorruptionKind::MeanShift: return "mean_shift";
    case CorruptionKind::VarianceScale: return "variance_scale";
    case CorruptionKind::BandAttenuate: return "band_attenuate";
    case CorruptionKind::BlurBoxfilter: return "blur_boxfilter";
  }
  return "?";
}

/// One corrupted target domain. Severity 0 always means identity.
template <typename Scalar>
struct CorruptionSpecT {
  Modality modality = Modality::Both;
  CorruptionKind kind = CorruptionKind::AdditiveGaussian;
  Scalar severity = Scalar(1);
  std::uint64_t seed = 0;

  bool identity_equals(const CorruptionSpecT& o) const {
    return modality == o.modality && kind == o.kind && severity == o.severity &&
           seed == o.seed;
  }

  void validate() const {
    if (severity < Scalar(0)) {
      throw std::invalid_argument("CorruptionSpec: severity must be >= 0");
    }
    if (kind == CorruptionKind::BandAttenuate && modality != Modality::Audio) {
      throw std::invalid_argument(
          "CorruptionSpec: band_attenuate applies to audio only");
    }
    if (kind == CorruptionKind::BlurBoxfilter && modality != Modality::Visual) {
      throw std::invalid_argument(
          "CorruptionSpec: blur_boxfilter applies to visual only");
    }
  }

  bool touches_audio() const {
    return modality == Modality::Audio || modality == Modality::Both;
  }
  bool touches_visual() const {
    return modality == Modality::Visual || modality == Modality::Both;
  }
};

using CorruptionSpec = CorruptionSpecT<double>;

namespace detail {

template <typename Scalar>
void additive_gaussian(Scalar* x, Index len, Scalar severity, Rng& rng) {
  for (Index i = 0; i < len; ++i) {
    x[i] += severity * static_cast<Scalar>(rng.normal());
  }
}

// Box filter with replicated edges, applied per channel.
template <typename Scalar>
void blur_boxfilter(Scalar* x, Index h, Index w, Index c, Index radius) {
  if (radius < 1) return;
  std::vector<Scalar> src(x, x + h * w * c);
  auto at = [&](Index i, Index j, Index ch) -> Scalar {
    i = std::clamp<Index>(i, 0, h - 1);
    j = std::clamp<Index>(j, 0, w - 1);
    return src[static_cast<std::size_t>((i * w + j) * c + ch)];
  };
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      for (Index ch = 0; ch < c; ++ch) {
        Scalar acc = 0;
        for (Index di = -radius; di <= radius; ++di) {
          for (Index dj = -radius; dj <= radius; ++dj) {
            acc += at(i + di, j + dj, ch);
          }
        }
        const Index k = 2 * radius + 1;
        x[(i * w + j) * c + ch] = acc / static_cast<Scalar>(k * k);
      }
    }
  }
}

}  // namespace detail

/// Corrupts one audio sample (flattened [T, F], frequency fastest).
/// Deterministic given (sample, spec, sample_index).
template <typename Scalar>
VectorX<Scalar> apply_audio_corruption(const VectorX<Scalar>& sample,
                                       Index time_steps, Index freq_bins,
                                       const CorruptionSpecT<Scalar>& spec,
                                       std::uint64_t sample_index) {
  spec.validate();
  if (sample.size() != time_steps * freq_bins) {
    throw std::invalid_argument("apply_audio_corruption: shape mismatch");
  }
  if (spec.kind == CorruptionKind::BlurBoxfilter) {
    throw std::invalid_argument(
        "apply_audio_corruption: blur_boxfilter is visual-only");
  }
  VectorX<Scalar> out = sample;
  if (spec.severity == Scalar(0)) return out;
  switch (spec.kind) {
    case CorruptionKind::AdditiveGaussian: {
      Rng rng(derive_seed(spec.seed, "corrupt_audio", sample_index));
      detail::additive_gaussian(out.data(), out.size(), spec.severity, rng);
      break;
    }
    case CorruptionKind::MeanShift:
      out.array() += spec.severity;
      break;
    case CorruptionKind::VarianceScale:
      out *= spec.severity;
      break;
    case CorruptionKind::BandAttenuate: {
      // Damp the upper half of the frequency bins.
      const Scalar gain = Scalar(1) / (Scalar(1) + spec.severity);
      for (Index t = 0; t < time_steps; ++t) {
        for (Index f = freq_bins / 2; f < freq_bins; ++f) {
          out[t * freq_bins + f] *= gain;
        }
      }
      break;
    }
    case CorruptionKind::BlurBoxfilter:
      break;  // unreachable
  }
  return out;
}

/// Corrupts one visual sample (flattened [H, W, C], channel fastest).
template <typename Scalar>
VectorX<Scalar> apply_visual_corruption(const VectorX<Scalar>& sample,
                                        Index height, Index width,
                                        Index channels,
                                        const CorruptionSpecT<Scalar>& spec,
                                        std::uint64_t sample_index) {
  spec.validate();
  if (sample.size() != height * width * channels) {
    throw std::invalid_argument("apply_visual_corruption: shape mismatch");
  }
  if (spec.kind == CorruptionKind::BandAttenuate) {
    throw std::invalid_argument(
        "apply_visual_corruption: band_attenuate is audio-only");
  }
  VectorX<Scalar> out = sample;
  if (spec.severity == Scalar(0)) return out;
  switch (spec.kind) {
    case CorruptionKind::AdditiveGaussian: {
      Rng rng(derive_seed(spec.seed, "corrupt_visual", sample_index));
      detail::additive_gaussian(out.data(), out.size(), spec.severity, rng);
      break;
    }
    case CorruptionKind::MeanShift:
      out.array() += spec.severity;
      break;
    case CorruptionKind::VarianceScale:
      out *= spec.severity;
      break;
    case CorruptionKind::BlurBoxfilter:
      detail::blur_boxfilter(out.data(), height, width, channels,
                             static_cast<Index>(std::llround(spec.severity)));
      break;
    case CorruptionKind::BandAttenuate:
      break;  // unreachable
  }
  return out;
}

/// Whole-set corruption; sample index = row index.
template <typename Scalar>
SourceDatasetT<Scalar> corrupt_dataset(const SourceDatasetT<Scalar>& source,
                                       const CorruptionSpecT<Scalar>& spec) {
  SourceDatasetT<Scalar> out = source;
  for (Index r = 0; r < source.size(); ++r) {
    if (spec.touches_audio()) {
      const VectorX<Scalar> s = source.audio.row(r).transpose();
      out.audio.row(r) =
          apply_audio_corruption(s, source.time_steps, source.freq_bins, spec,
                                 static_cast<std::uint64_t>(r))
              .transpose();
    }
    if (spec.touches_visual()) {
      const VectorX<Scalar> s = source.visual.row(r).transpose();
      out.visual.row(r) =
          apply_visual_corruption(s, source.height, source.width,
                                  source.channels, spec,
                                  static_cast<std::uint64_t>(r))
              .transpose();
    }
  }
  return out;
}

enum class TaskOrder { Forward, Reverse, Shuffle };

/// Ordered list of corrupted target domains plus the stream batch size.
template <typename Scalar>
struct TaskSequenceT {
  std::vector<CorruptionSpecT<Scalar>> tasks;
  Index batch_size = 32;
  TaskOrder order = TaskOrder::Forward;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    if (batch_size < 1) {
      throw std::invalid_argument("TaskSequence: batch size must be >= 1");
    }
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      tasks[i].validate();
      for (std::size_t j = i + 1; j < tasks.size(); ++j) {
        if (tasks[i].identity_equals(tasks[j])) {
          throw std::invalid_argument(
              "TaskSequence: tasks must be disjoint by spec identity");
        }
      }
    }
  }
};

using TaskSequence = TaskSequenceT<double>;

/// Task emission order under the sequence's order label.
template <typename Scalar>
std::vector<std::size_t> ordered_task_indices(const TaskSequenceT<Scalar>& seq) {
  std::vector<std::size_t> idx(seq.tasks.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  switch (seq.order) {
    case TaskOrder::Forward:
      break;
    case TaskOrder::Reverse:
      std::reverse(idx.begin(), idx.end());
      break;
    case TaskOrder::Shuffle: {
      Rng rng(seq.shuffle_seed);
      shuffle(idx, rng);
      break;
    }
  }
  return idx;
}

/// The record the adapter sees: raw multimodal inputs only. Labels and task
/// identity live on the evaluation side of the stream.
template <typename Scalar>
struct AdaptBatchT {
  AudioBatchT<Scalar> audio;
  VisualBatchT<Scalar> visual;
};

template <typename Scalar>
struct StreamItemT {
  std::size_t task = 0;                // evaluation-side task index
  AdaptBatchT<Scalar> batch;           // what the adapter receives
  std::vector<std::int32_t> labels;    // hidden; evaluation only
};

using AdaptBatch = AdaptBatchT<double>;
using StreamItem = StreamItemT<double>;

/// Single-pass iterator over the corrupted stream: each task covers the
/// whole source split once (trailing partial batch dropped). Re-iteration
/// requires constructing a new stream.
template <typename Scalar>
class BatchStreamT {
 public:
  BatchStreamT(TaskSequenceT<Scalar> seq, const SourceDatasetT<Scalar>& source)
      : seq_(std::move(seq)), source_(&source) {
    seq_.validate();
    if (source.size() < 1) {
      throw std::invalid_argument("BatchStream: empty source dataset");
    }
    batches_per_task_ = source.size() / seq_.batch_size;
    if (batches_per_task_ < 1) {
      throw std::invalid_argument(
          "BatchStream: batch size exceeds the dataset size");
    }
    task_order_ = ordered_task_indices(seq_);
  }

  Index batches_per_task() const { return batches_per_task_; }
  std::size_t total_batches() const {
    return task_order_.size() * static_cast<std::size_t>(batches_per_task_);
  }

  std::optional<StreamItemT<Scalar>> next() {
    if (task_pos_ >= task_order_.size()) return std::nullopt;
    if (batch_pos_ == 0) {
      current_ = corrupt_dataset(*source_, seq_.tasks[task_order_[task_pos_]]);
    }
    const Index b = seq_.batch_size;
    const Index start = batch_pos_ * b;

    StreamItemT<Scalar> item;
    item.task = task_pos_;
    item.batch.audio.batch = b;
    item.batch.audio.time_steps = source_->time_steps;
    item.batch.audio.freq_bins = source_->freq_bins;
    item.batch.audio.values = current_.audio.middleRows(start, b);
    item.batch.visual.batch = b;
    item.batch.visual.height = source_->height;
    item.batch.visual.width = source_->width;
    item.batch.visual.channels = source_->channels;
    item.batch.visual.values = current_.visual.middleRows(start, b);
    item.labels.assign(current_.labels.begin() + start,
                       current_.labels.begin() + start + b);

    if (++batch_pos_ >= batches_per_task_) {
      batch_pos_ = 0;
      ++task_pos_;
      if (task_pos_ >= task_order_.size()) current_ = {};
    }
    return item;
  }

 private:
  TaskSequenceT<Scalar> seq_;
  const SourceDatasetT<Scalar>* source_;
  SourceDatasetT<Scalar> current_;
  std::vector<std::size_t> task_order_;
  Index batches_per_task_ = 0;
  Index batch_pos_ = 0;
  std::size_t task_pos_ = 0;
};

using BatchStream = BatchStreamT<double>;

}  // namespace avctta
