#pragma once

#include "avctta/stats.hpp"

#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace avctta {

/// Query/key/value projection matrices of the fusion attention block; the
/// only weights the engine ever adapts.
template <typename Scalar>
struct FusionParamsT {
  MatrixX<Scalar> w_q, w_k, w_v;  // all [D, D]

  Index dim() const { return w_q.rows(); }
};

template <typename Scalar>
FusionParamsT<Scalar> zero_params(Index dim) {
  FusionParamsT<Scalar> p;
  p.w_q.setZero(dim, dim);
  p.w_k.setZero(dim, dim);
  p.w_v.setZero(dim, dim);
  return p;
}

template <typename Scalar>
void check_params_shape(const FusionParamsT<Scalar>& p, const char* what) {
  const Index d = p.w_q.rows();
  if (d < 1 || p.w_q.cols() != d || p.w_k.rows() != d || p.w_k.cols() != d ||
      p.w_v.rows() != d || p.w_v.cols() != d) {
    throw std::invalid_argument(std::string(what) +
                                ": projection matrices must share shape [D,D]");
  }
}

/// One stored snapshot: the input-statistics key plus the fusion parameters
/// that were adapted under inputs matching that key.
template <typename Scalar>
struct BufferElementT {
  AVSignatureT<Scalar> signature;
  FusionParamsT<Scalar> params;
  std::int64_t created_step = 0;  // insertion time-step, drives DropOldest
};

enum class BudgetPolicy { MergeClosest, DropOldest };

/// Outcome of a buffer query. A hit carries the matched index and its
/// distance (< tau); a miss carries the smallest distance seen, or nothing
/// when the buffer was empty.
template <typename Scalar>
struct RetrievalResultT {
  bool hit = false;
  std::size_t index = 0;             // valid only when hit
  std::optional<Scalar> distance;    // hit distance, or miss min-distance

  std::optional<Scalar> min_distance() const { return distance; }
};

/// Budgeted store of (signature, parameters) snapshots. Single-owner mutable
/// object: callers drive it strictly sequentially.
template <typename Scalar>
class SnapshotBufferT {
 public:
  using Element = BufferElementT<Scalar>;

  SnapshotBufferT(Scalar tau, std::optional<std::size_t> eta, Scalar beta,
                  BudgetPolicy policy = BudgetPolicy::MergeClosest,
                  bool exact_mixture_merge = false)
      : tau_(tau),
        eta_(eta),
        beta_(beta),
        policy_(policy),
        exact_mixture_merge_(exact_mixture_merge) {
    if (!(tau_ > Scalar(0))) {
      throw std::invalid_argument("SnapshotBuffer: tau must be positive");
    }
    if (!(beta_ > Scalar(0) && beta_ < Scalar(1))) {
      throw std::invalid_argument("SnapshotBuffer: beta must lie in (0,1)");
    }
    if (eta_ && *eta_ == 0) {
      throw std::invalid_argument("SnapshotBuffer: eta must be positive");
    }
  }

  std::size_t size() const { return elements_.size(); }
  bool empty() const { return elements_.empty(); }
  Scalar tau() const { return tau_; }
  Scalar beta() const { return beta_; }
  std::optional<std::size_t> eta() const { return eta_; }
  BudgetPolicy policy() const { return policy_; }
  bool exact_mixture_merge() const { return exact_mixture_merge_; }

  const Element& element(std::size_t i) const {
    if (i >= elements_.size()) {
      throw std::out_of_range("SnapshotBuffer: element index out of range");
    }
    return elements_[i];
  }
  const std::vector<Element>& elements() const { return elements_; }

  /// Linear scan for the element closest to `query`; a hit requires the
  /// minimal distance to fall below tau. Ties break toward the lowest index.
  RetrievalResultT<Scalar> select_best(const AVSignatureT<Scalar>& query) const {
    RetrievalResultT<Scalar> result;
    if (elements_.empty()) return result;
    Scalar best = std::numeric_limits<Scalar>::infinity();
    std::size_t best_index = 0;
    for (std::size_t n = 0; n < elements_.size(); ++n) {
      const Scalar d = combined_distance(query, elements_[n].signature);
      if (d < best) {
        best = d;
        best_index = n;
      }
    }
    result.distance = best;
    if (best < tau_) {
      result.hit = true;
      result.index = best_index;
    }
    return result;
  }

  /// Blends the stored projection matrices toward `fresh`:
  /// stored <- beta * stored + (1 - beta) * fresh, element-wise.
  void ema_update_params(std::size_t index, const FusionParamsT<Scalar>& fresh) {
    Element& e = element_mut(index);
    if (fresh.w_q.rows() != e.params.w_q.rows()) {
      throw std::invalid_argument("ema_update_params: shape mismatch");
    }
    check_params_shape(fresh, "ema_update_params");
    const Scalar b = beta_;
    e.params.w_q = b * e.params.w_q + (Scalar(1) - b) * fresh.w_q;
    e.params.w_k = b * e.params.w_k + (Scalar(1) - b) * fresh.w_k;
    e.params.w_v = b * e.params.w_v + (Scalar(1) - b) * fresh.w_v;
  }

  /// Moment-preserving blend of the stored signature toward `fresh`: the
  /// updated mean is the EMA of the means, and each variance picks up the
  /// squared offset of its component mean from the updated mean, so the
  /// blended second moment is the EMA of the component second moments.
  void ema_update_stats(std::size_t index, const AVSignatureT<Scalar>& fresh) {
    Element& e = element_mut(index);
    ema_blend_stats(e.signature.audio, fresh.audio);
    ema_blend_stats(e.signature.visual, fresh.visual);
  }

  /// Replaces the closest pair of elements (canonical orientation i < j,
  /// ties toward the lexicographically smallest pair) by their element-wise
  /// average. The merged element keeps the larger created_step of the pair.
  void merge_closest() {
    if (elements_.size() < 2) {
      throw std::logic_error("merge_closest: fewer than 2 elements");
    }
    Scalar best = std::numeric_limits<Scalar>::infinity();
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i + 1 < elements_.size(); ++i) {
      for (std::size_t j = i + 1; j < elements_.size(); ++j) {
        const Scalar d =
            combined_distance(elements_[i].signature, elements_[j].signature);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    Element merged = merge_pair(elements_[bi], elements_[bj]);
    elements_[bi] = std::move(merged);
    elements_.erase(elements_.begin() + static_cast<std::ptrdiff_t>(bj));
  }

  /// Appends a new snapshot, first enforcing the budget with the configured
  /// policy whenever the buffer is already at capacity.
  void insert(AVSignatureT<Scalar> signature, FusionParamsT<Scalar> params,
              std::int64_t step) {
    check_params_shape(params, "insert");
    if (!elements_.empty()) {
      const auto& ref = elements_.front();
      if (signature.audio.dim() != ref.signature.audio.dim() ||
          signature.visual.dim() != ref.signature.visual.dim() ||
          params.w_q.rows() != ref.params.w_q.rows()) {
        throw std::invalid_argument("insert: dimension mismatch with buffer");
      }
    }
    if (eta_) {
      if (policy_ == BudgetPolicy::MergeClosest) {
        while (elements_.size() >= *eta_ && elements_.size() >= 2) {
          merge_closest();
        }
      }
      // DropOldest, or a budget of 1 where merging cannot apply.
      while (!elements_.empty() && elements_.size() >= *eta_) {
        drop_oldest();
      }
    }
    Element e;
    e.signature = std::move(signature);
    e.params = std::move(params);
    e.created_step = step;
    elements_.push_back(std::move(e));
  }

  /// Removes the element with the smallest created_step (ties: lowest index).
  void drop_oldest() {
    if (elements_.empty()) {
      throw std::logic_error("drop_oldest: buffer is empty");
    }
    std::size_t oldest = 0;
    for (std::size_t n = 1; n < elements_.size(); ++n) {
      if (elements_[n].created_step < elements_[oldest].created_step) {
        oldest = n;
      }
    }
    elements_.erase(elements_.begin() + static_cast<std::ptrdiff_t>(oldest));
  }

  void clear() { elements_.clear(); }

  // Used by deserialization; bypasses budget enforcement on purpose so a
  // saved buffer reloads exactly as written.
  void restore_element(Element e) { elements_.push_back(std::move(e)); }

 private:
  Element& element_mut(std::size_t index) {
    if (index >= elements_.size()) {
      throw std::out_of_range("SnapshotBuffer: element index out of range");
    }
    return elements_[index];
  }

  void ema_blend_stats(ModalityStatsT<Scalar>& stored,
                       const ModalityStatsT<Scalar>& fresh) const {
    if (stored.dim() != fresh.dim()) {
      throw std::invalid_argument("ema_update_stats: dimension mismatch");
    }
    const Scalar b = beta_;
    const VectorX<Scalar> blended_mean =
        b * stored.mean + (Scalar(1) - b) * fresh.mean;
    const auto d_old = (stored.mean - blended_mean).array();
    const auto d_new = (fresh.mean - blended_mean).array();
    VectorX<Scalar> blended_var =
        (b * (stored.var.array() + d_old.square()) +
         (Scalar(1) - b) * (fresh.var.array() + d_new.square()))
            .matrix();
    blended_var = blended_var.cwiseMax(Scalar(kVarianceFloor));
    stored.mean = blended_mean;
    stored.var = blended_var;
  }

  Element merge_pair(const Element& a, const Element& b) const {
    Element m;
    m.signature.audio = merge_stats(a.signature.audio, b.signature.audio);
    m.signature.visual = merge_stats(a.signature.visual, b.signature.visual);
    m.params.w_q = Scalar(0.5) * (a.params.w_q + b.params.w_q);
    m.params.w_k = Scalar(0.5) * (a.params.w_k + b.params.w_k);
    m.params.w_v = Scalar(0.5) * (a.params.w_v + b.params.w_v);
    m.created_step = std::max(a.created_step, b.created_step);
    return m;
  }

  ModalityStatsT<Scalar> merge_stats(const ModalityStatsT<Scalar>& a,
                                     const ModalityStatsT<Scalar>& b) const {
    ModalityStatsT<Scalar> m;
    m.mean = Scalar(0.5) * (a.mean + b.mean);
    if (exact_mixture_merge_) {
      // Equal-weight two-component mixture variance instead of the plain
      // average: adds the spread of the component means.
      const auto da = (a.mean - m.mean).array();
      const auto db = (b.mean - m.mean).array();
      m.var = (Scalar(0.5) * (a.var.array() + da.square()) +
               Scalar(0.5) * (b.var.array() + db.square()))
                  .matrix();
    } else {
      m.var = Scalar(0.5) * (a.var + b.var);
    }
    m.var = m.var.cwiseMax(Scalar(kVarianceFloor));
    return m;
  }

  std::vector<Element> elements_;
  Scalar tau_;
  std::optional<std::size_t> eta_;
  Scalar beta_;
  BudgetPolicy policy_;
  bool exact_mixture_merge_;
};

using FusionParams = FusionParamsT<double>;
using BufferElement = BufferElementT<double>;
using RetrievalResult = RetrievalResultT<double>;
using SnapshotBuffer = SnapshotBufferT<double>;

}  // namespace avctta
