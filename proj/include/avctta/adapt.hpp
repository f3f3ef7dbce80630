#pragma once

#include "avctta/buffer.hpp"
#include "avctta/losses.hpp"
#include "avctta/model.hpp"
#include "avctta/source_model.hpp"
#include "avctta/stream.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace avctta {

enum class Method { AvCtta, NaiveContinual, SourceOnly };

/// When a hit's stored element absorbs the fresh state: after the gradient
/// step (blending the post-step parameters, the default) or immediately
/// after retrieval.
enum class EmaOrdering { AfterStep, BeforeStep };

/// Which forward pass the reported predictions come from.
enum class PredictionPoint { PostStep, PreStep };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::AvCtta: return "avctta";
    case Method::NaiveContinual: return "naive_continual";
    case Method::SourceOnly: return "source_only";
  }
  return "?";
}

template <typename Scalar>
struct AdapterConfigT {
  Method method = Method::AvCtta;
  Scalar tau = Scalar(0.005);
  std::optional<std::size_t> eta;  // empty = unbounded budget
  Scalar beta = Scalar(0.99);
  Scalar learning_rate = Scalar(1e-4);
  BudgetPolicy policy = BudgetPolicy::MergeClosest;
  Index batch_size = 32;
  LossSign loss_sign = LossSign::SumNegativeEntropy;
  EmaOrdering ema_ordering = EmaOrdering::AfterStep;
  PredictionPoint prediction_point = PredictionPoint::PostStep;
  bool reset_moments_on_hit = false;
  bool retrieval_enabled = true;  // off: every step takes the miss path
  bool exact_mixture_merge = false;

  void validate() const {
    if (batch_size < 1) {
      throw std::invalid_argument("AdapterConfig: batch size must be >= 1");
    }
    if (!(learning_rate > Scalar(0))) {
      throw std::invalid_argument("AdapterConfig: learning rate must be > 0");
    }
    if (method == Method::AvCtta) {
      if (!(tau > Scalar(0))) {
        throw std::invalid_argument("AdapterConfig: tau must be > 0");
      }
      if (!(beta > Scalar(0) && beta < Scalar(1))) {
        throw std::invalid_argument("AdapterConfig: beta must lie in (0,1)");
      }
      if (eta && *eta == 0) {
        throw std::invalid_argument("AdapterConfig: eta must be positive");
      }
    }
  }
};

using AdapterConfig = AdapterConfigT<double>;

/// One row of the run trace. The adapter fills the retrieval and loss
/// fields; task index and accuracy are attached by the evaluation loop.
template <typename Scalar>
struct StepRecordT {
  std::int64_t step = 0;
  std::size_t task = 0;
  Scalar batch_accuracy = 0;  // percent
  bool hit = false;
  std::optional<Scalar> min_distance;
  std::size_t buffer_size = 0;
  Scalar l_conf = 0;
  Scalar l_ne = 0;
  Scalar total_loss = 0;
};

template <typename Scalar>
struct RunSummaryT {
  std::vector<Scalar> per_task_accuracy;  // percent
  Scalar mean_accuracy = 0;               // arithmetic mean over tasks
  Scalar forgetting_points = 0;           // source-accuracy drop, pp
  Scalar hit_rate_overall = 0;
  std::vector<Scalar> hit_rate_per_task;
  std::size_t final_buffer_size = 0;
};

using StepRecord = StepRecordT<double>;
using RunSummary = RunSummaryT<double>;

/// Drives one method over a stream of unlabeled batches. Receives neither
/// labels nor task identity; the only inputs are the raw batches.
template <typename Scalar>
class AdaptEngineT {
 public:
  AdaptEngineT(AdapterConfigT<Scalar> cfg, const SourceModelT<Scalar>& model)
      : cfg_(std::move(cfg)),
        model_(&model),
        params_(model.source_params),
        opt_(OptimizerStateT<Scalar>::zeros(model.config.embed_dim,
                                            cfg_.learning_rate)),
        buffer_(cfg_.tau, cfg_.eta, cfg_.beta, cfg_.policy,
                cfg_.exact_mixture_merge) {
    cfg_.validate();
  }

  /// Processes one unlabeled batch: compute signature, query the buffer,
  /// plug retrieved parameters on a hit, take exactly one gradient step,
  /// then either fold the adapted state back into the matched element or
  /// insert the post-step state as a new snapshot.
  std::pair<std::vector<std::int32_t>, StepRecordT<Scalar>> adapt_step(
      const AdaptBatchT<Scalar>& batch) {
    if (cfg_.method == Method::SourceOnly) return passive_step(batch);

    StepRecordT<Scalar> rec;
    rec.step = step_;

    RetrievalResultT<Scalar> retrieval;
    AVSignatureT<Scalar> signature;
    const bool buffered = cfg_.method == Method::AvCtta;
    if (buffered) {
      signature.audio = compute_audio_stats(batch.audio);
      signature.visual = compute_visual_stats(batch.visual);
      if (cfg_.retrieval_enabled) {
        retrieval = buffer_.select_best(signature);
      }
      if (retrieval.hit) {
        params_ = buffer_.element(retrieval.index).params;
        if (cfg_.reset_moments_on_hit) opt_.reset_moments();
        if (cfg_.ema_ordering == EmaOrdering::BeforeStep) {
          buffer_.ema_update_params(retrieval.index, params_);
          buffer_.ema_update_stats(retrieval.index, signature);
        }
      }
    }

    const auto cache = forward(batch.audio, batch.visual, params_, model_->frozen);
    const auto loss = total_loss(cache.logits, cfg_.loss_sign);
    const auto grads = backward(cache, loss.dlogits, params_, model_->frozen);
    optimizer_step(opt_, params_, grads);

    if (buffered) {
      if (retrieval.hit) {
        if (cfg_.ema_ordering == EmaOrdering::AfterStep) {
          buffer_.ema_update_params(retrieval.index, params_);
          buffer_.ema_update_stats(retrieval.index, signature);
        }
      } else {
        buffer_.insert(signature, params_, step_);
      }
    }

    rec.hit = retrieval.hit;
    rec.min_distance = retrieval.distance;
    rec.buffer_size = buffer_.size();
    rec.l_conf = loss.l_conf;
    rec.l_ne = loss.l_ne;
    rec.total_loss = loss.total;
    ++step_;

    std::vector<std::int32_t> preds;
    if (cfg_.prediction_point == PredictionPoint::PostStep) {
      const auto post =
          forward(batch.audio, batch.visual, params_, model_->frozen);
      preds = argmax_rows(post.logits);
    } else {
      preds = argmax_rows(cache.logits);
    }
    return {std::move(preds), std::move(rec)};
  }

  const FusionParamsT<Scalar>& params() const { return params_; }
  const SnapshotBufferT<Scalar>& buffer() const { return buffer_; }
  const OptimizerStateT<Scalar>& optimizer() const { return opt_; }
  std::int64_t steps_taken() const { return step_; }

  static std::vector<std::int32_t> argmax_rows(const RowMajorX<Scalar>& logits) {
    std::vector<std::int32_t> out(static_cast<std::size_t>(logits.rows()));
    for (Index i = 0; i < logits.rows(); ++i) {
      Index arg = 0;
      for (Index a = 1; a < logits.cols(); ++a) {
        if (logits(i, a) > logits(i, arg)) arg = a;
      }
      out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(arg);
    }
    return out;
  }

 private:
  std::pair<std::vector<std::int32_t>, StepRecordT<Scalar>> passive_step(
      const AdaptBatchT<Scalar>& batch) {
    StepRecordT<Scalar> rec;
    rec.step = step_++;
    const auto cache = forward(batch.audio, batch.visual, params_, model_->frozen);
    const auto loss = total_loss(cache.logits, cfg_.loss_sign);
    rec.l_conf = loss.l_conf;
    rec.l_ne = loss.l_ne;
    rec.total_loss = loss.total;
    return {argmax_rows(cache.logits), std::move(rec)};
  }

  AdapterConfigT<Scalar> cfg_;
  const SourceModelT<Scalar>* model_;
  FusionParamsT<Scalar> params_;
  OptimizerStateT<Scalar> opt_;
  SnapshotBufferT<Scalar> buffer_;
  std::int64_t step_ = 0;
};

using AdaptEngine = AdaptEngineT<double>;

/// Accuracy (percent) of the model under `params` over a labeled dataset.
template <typename Scalar>
Scalar evaluate_accuracy(const SourceModelT<Scalar>& model,
                         const FusionParamsT<Scalar>& params,
                         const SourceDatasetT<Scalar>& ds) {
  const Index n = ds.size();
  if (n < 1) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  Index correct = 0;
  const Index chunk = 256;
  for (Index start = 0; start < n; start += chunk) {
    const Index count = std::min(chunk, n - start);
    const auto batch = dataset_slice(ds, start, count);
    const auto cache = forward(batch.audio, batch.visual, params, model.frozen);
    const auto preds = AdaptEngineT<Scalar>::argmax_rows(cache.logits);
    for (Index i = 0; i < count; ++i) {
      if (preds[static_cast<std::size_t>(i)] ==
          ds.labels[static_cast<std::size_t>(start + i)]) {
        ++correct;
      }
    }
  }
  return Scalar(100) * static_cast<Scalar>(correct) / static_cast<Scalar>(n);
}

/// Source-accuracy drop of the final parameters versus the source
/// parameters, in percentage points. Positive means forgetting.
template <typename Scalar>
Scalar evaluate_forgetting(const SourceModelT<Scalar>& model,
                           const FusionParamsT<Scalar>& final_params,
                           const SourceDatasetT<Scalar>& ds) {
  return evaluate_accuracy(model, model.source_params, ds) -
         evaluate_accuracy(model, final_params, ds);
}

template <typename Scalar>
struct RunResultT {
  RunSummaryT<Scalar> summary;
  std::vector<StepRecordT<Scalar>> steps;
  FusionParamsT<Scalar> final_params;
};

using RunResult = RunResultT<double>;

/// Runs one method over the full stream and aggregates per-task accuracy,
/// retrieval rates, and the forgetting of the final parameters.
template <typename Scalar>
RunResultT<Scalar> run_stream(const AdapterConfigT<Scalar>& cfg,
                              const TaskSequenceT<Scalar>& seq,
                              const SourceDatasetT<Scalar>& source,
                              const SourceModelT<Scalar>& model) {
  cfg.validate();
  if (cfg.batch_size != seq.batch_size) {
    throw std::invalid_argument(
        "run_stream: adapter and stream batch sizes disagree");
  }
  BatchStreamT<Scalar> stream(seq, source);
  if (stream.total_batches() == 0) {
    throw std::invalid_argument("run_stream: empty stream");
  }
  AdaptEngineT<Scalar> engine(cfg, model);

  const std::size_t n_tasks = seq.tasks.size();
  std::vector<Index> task_correct(n_tasks, 0), task_total(n_tasks, 0);
  std::vector<Index> task_hits(n_tasks, 0), task_batches(n_tasks, 0);

  RunResultT<Scalar> result;
  result.steps.reserve(stream.total_batches());
  while (auto item = stream.next()) {
    auto [preds, rec] = engine.adapt_step(item->batch);
    Index correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == item->labels[i]) ++correct;
    }
    rec.task = item->task;
    rec.batch_accuracy = Scalar(100) * static_cast<Scalar>(correct) /
                         static_cast<Scalar>(preds.size());
    task_correct[item->task] += correct;
    task_total[item->task] += static_cast<Index>(preds.size());
    task_batches[item->task] += 1;
    if (rec.hit) task_hits[item->task] += 1;
    result.steps.push_back(std::move(rec));
  }

  RunSummaryT<Scalar>& s = result.summary;
  s.per_task_accuracy.resize(n_tasks);
  s.hit_rate_per_task.resize(n_tasks);
  Scalar acc_sum = 0;
  Index hits = 0, batches = 0;
  for (std::size_t t = 0; t < n_tasks; ++t) {
    s.per_task_accuracy[t] = Scalar(100) * static_cast<Scalar>(task_correct[t]) /
                             static_cast<Scalar>(task_total[t]);
    s.hit_rate_per_task[t] = static_cast<Scalar>(task_hits[t]) /
                             static_cast<Scalar>(task_batches[t]);
    acc_sum += s.per_task_accuracy[t];
    hits += task_hits[t];
    batches += task_batches[t];
  }
  s.mean_accuracy = acc_sum / static_cast<Scalar>(n_tasks);
  s.hit_rate_overall =
      static_cast<Scalar>(hits) / static_cast<Scalar>(batches);
  s.final_buffer_size = engine.buffer().size();
  result.final_params = engine.params();
  s.forgetting_points = evaluate_forgetting(model, result.final_params, source);
  return result;
}

}  // namespace avctta
