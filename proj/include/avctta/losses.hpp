#pragma once

#include "avctta/stats.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace avctta {

/// How the diversity term enters the objective. SumNegativeEntropy adds the
/// (negative) batch-entropy term, so minimizing the total spreads the batch
/// marginal; SubtractNegativeEntropy flips that sign for comparison runs.
enum class LossSign { SumNegativeEntropy, SubtractNegativeEntropy };

template <typename Scalar>
struct LossReportT {
  Scalar l_conf = 0;
  Scalar l_ne = 0;
  Scalar total = 0;
  RowMajorX<Scalar> dlogits;  // [B, A], gradient of `total` w.r.t. the logits
};

using LossReport = LossReportT<double>;

namespace detail {

template <typename Scalar>
void check_logits(const RowMajorX<Scalar>& logits, const char* what) {
  if (logits.rows() < 1 || logits.cols() < 2) {
    throw std::invalid_argument(std::string(what) +
                                ": logits must be [B >= 1, A >= 2]");
  }
  if (!logits.allFinite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite logits");
  }
}

}  // namespace detail

/// Row-wise numerically stable softmax.
template <typename Scalar>
RowMajorX<Scalar> softmax_rows(const RowMajorX<Scalar>& logits) {
  RowMajorX<Scalar> probs(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Scalar m = logits.row(i).maxCoeff();
    probs.row(i) = (logits.row(i).array() - m).exp();
    probs.row(i) /= probs.row(i).sum();
  }
  return probs;
}

/// Batch mean of -p_max * log(p_max), where p_max is each sample's largest
/// softmax probability. The gradient treats the argmax index as locally
/// constant; exact ties resolve to the lowest class index.
template <typename Scalar>
std::pair<Scalar, RowMajorX<Scalar>> confidence_loss(
    const RowMajorX<Scalar>& logits) {
  detail::check_logits(logits, "confidence_loss");
  const Index batch = logits.rows();
  const Index classes = logits.cols();
  const RowMajorX<Scalar> probs = softmax_rows(logits);
  RowMajorX<Scalar> dlogits = RowMajorX<Scalar>::Zero(batch, classes);
  Scalar value = 0;
  for (Index i = 0; i < batch; ++i) {
    Index arg = 0;
    for (Index a = 1; a < classes; ++a) {
      if (probs(i, a) > probs(i, arg)) arg = a;
    }
    const Scalar pmax = probs(i, arg);
    value += -pmax * std::log(pmax);
    // d(-p ln p)/dp = -(ln p + 1), chained through the softmax row of the
    // argmax entry: dp_m/dl_a = p_m (delta_{ma} - p_a).
    const Scalar outer = -(std::log(pmax) + Scalar(1)) / Scalar(batch);
    for (Index a = 0; a < classes; ++a) {
      const Scalar delta = (a == arg) ? Scalar(1) : Scalar(0);
      dlogits(i, a) = outer * pmax * (delta - probs(i, a));
    }
  }
  value /= Scalar(batch);
  return {value, std::move(dlogits)};
}

/// Negative entropy of the re-softmaxed per-class sum of softmax vectors:
///   k = sum_i softmax(l_i);  value = sum_a softmax(k)_a * log softmax(k)_a.
/// Lies in [-ln A, 0); minimizing it pushes the batch marginal to uniform.
template <typename Scalar>
std::pair<Scalar, RowMajorX<Scalar>> negative_entropy_loss(
    const RowMajorX<Scalar>& logits) {
  detail::check_logits(logits, "negative_entropy_loss");
  const Index batch = logits.rows();
  const Index classes = logits.cols();
  const RowMajorX<Scalar> probs = softmax_rows(logits);
  const VectorX<Scalar> k = probs.colwise().sum().transpose();

  // softmax over k, stable.
  VectorX<Scalar> s = (k.array() - k.maxCoeff()).exp();
  s /= s.sum();

  const VectorX<Scalar> log_s = s.array().log().matrix();
  const Scalar value = s.dot(log_s);

  // dvalue/dk_b = s_b (log s_b - value), then chained through each sample's
  // softmax Jacobian into the logits.
  const VectorX<Scalar> dk =
      (s.array() * (log_s.array() - value)).matrix();
  RowMajorX<Scalar> dlogits(batch, classes);
  for (Index i = 0; i < batch; ++i) {
    const Scalar inner = probs.row(i).dot(dk.transpose());
    dlogits.row(i) =
        probs.row(i).array() * (dk.transpose().array() - inner);
  }
  return {value, std::move(dlogits)};
}

/// Combined adaptation objective and its exact logit gradient.
template <typename Scalar>
LossReportT<Scalar> total_loss(const RowMajorX<Scalar>& logits,
                               LossSign sign = LossSign::SumNegativeEntropy) {
  auto [conf, dconf] = confidence_loss(logits);
  auto [ne, dne] = negative_entropy_loss(logits);
  LossReportT<Scalar> report;
  report.l_conf = conf;
  report.l_ne = ne;
  if (sign == LossSign::SumNegativeEntropy) {
    report.total = conf + ne;
    report.dlogits = dconf + dne;
  } else {
    report.total = conf - ne;
    report.dlogits = dconf - dne;
  }
  return report;
}

}  // namespace avctta
