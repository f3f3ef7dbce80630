#pragma once

#include "avctta/buffer.hpp"
#include "avctta/rng.hpp"
#include "avctta/stats.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace avctta {

/// Shape of the desk-scale classifier: frozen linear token encoders per
/// modality, one trainable single-head attention fusion block with a
/// residual connection, token mean-pooling, and a frozen linear head.
template <typename Scalar>
struct ModelConfigT {
  Index embed_dim = 16;     // D
  Index audio_tokens = 4;   // T_a
  Index visual_tokens = 4;  // T_v
  Index classes = 10;       // A
  std::uint64_t seed = 0;   // frozen-weight initialization

  Index joint_tokens() const { return audio_tokens + visual_tokens; }

  void validate() const {
    if (embed_dim < 2 || audio_tokens < 1 || visual_tokens < 1 || classes < 2) {
      throw std::invalid_argument(
          "ModelConfig: need D >= 2, T_a >= 1, T_v >= 1, A >= 2");
    }
  }
};

/// Weights that never change after construction. The encoders map flattened
/// modality inputs straight to token matrices; the head maps the pooled
/// fusion output to class logits.
template <typename Scalar>
struct FrozenWeightsT {
  MatrixX<Scalar> audio_encoder;   // [T*F, T_a*D]
  MatrixX<Scalar> visual_encoder;  // [H*W*C, T_v*D]
  MatrixX<Scalar> head_weight;     // [D, A]
  VectorX<Scalar> head_bias;       // [A]
};

/// Everything the exact backward pass needs from a forward pass, stacked
/// per sample along the row axis.
template <typename Scalar>
struct ForwardCacheT {
  RowMajorX<Scalar> tokens;  // [B*N, D] joint token matrices
  RowMajorX<Scalar> attn;    // [B*N, N] row-stochastic attention
  RowMajorX<Scalar> pooled;  // [B, D]
  RowMajorX<Scalar> logits;  // [B, A]
  Index batch = 0;
  Index tokens_per_sample = 0;
  std::uint64_t params_digest = 0;  // rejects backward with mismatched params
};

using ModelConfig = ModelConfigT<double>;
using FrozenWeights = FrozenWeightsT<double>;
using ForwardCache = ForwardCacheT<double>;

namespace detail {

inline std::uint64_t fnv1a64(const void* data, std::size_t bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename Scalar>
std::uint64_t params_digest(const FusionParamsT<Scalar>& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const MatrixX<Scalar>* m : {&p.w_q, &p.w_k, &p.w_v}) {
    h = fnv1a64(m->data(),
                static_cast<std::size_t>(m->size()) * sizeof(Scalar), h);
  }
  return h;
}

template <typename Scalar>
std::uint64_t frozen_digest(const FrozenWeightsT<Scalar>& f) {
  std::uint64_t h = fnv1a64(
      f.audio_encoder.data(),
      static_cast<std::size_t>(f.audio_encoder.size()) * sizeof(Scalar));
  h = fnv1a64(f.visual_encoder.data(),
              static_cast<std::size_t>(f.visual_encoder.size()) * sizeof(Scalar),
              h);
  h = fnv1a64(f.head_weight.data(),
              static_cast<std::size_t>(f.head_weight.size()) * sizeof(Scalar),
              h);
  h = fnv1a64(f.head_bias.data(),
              static_cast<std::size_t>(f.head_bias.size()) * sizeof(Scalar), h);
  return h;
}

template <typename Scalar>
MatrixX<Scalar> gaussian_matrix(Index rows, Index cols, Scalar stddev,
                                Rng& rng) {
  MatrixX<Scalar> m(rows, cols);
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) {
      m(r, c) = stddev * static_cast<Scalar>(rng.normal());
    }
  }
  return m;
}

}  // namespace detail

/// Random frozen encoders, scaled so token entries stay O(1) for O(1)
/// inputs. The head starts at zero and is fitted separately on source data.
template <typename Scalar>
FrozenWeightsT<Scalar> make_frozen_weights(const ModelConfigT<Scalar>& cfg,
                                           Index audio_input_dim,
                                           Index visual_input_dim) {
  cfg.validate();
  if (audio_input_dim < 1 || visual_input_dim < 1) {
    throw std::invalid_argument("make_frozen_weights: empty input dims");
  }
  FrozenWeightsT<Scalar> f;
  {
    Rng rng(derive_seed(cfg.seed, "audio_encoder"));
    f.audio_encoder = detail::gaussian_matrix<Scalar>(
        audio_input_dim, cfg.audio_tokens * cfg.embed_dim,
        Scalar(1) / std::sqrt(Scalar(audio_input_dim)), rng);
  }
  {
    Rng rng(derive_seed(cfg.seed, "visual_encoder"));
    f.visual_encoder = detail::gaussian_matrix<Scalar>(
        visual_input_dim, cfg.visual_tokens * cfg.embed_dim,
        Scalar(1) / std::sqrt(Scalar(visual_input_dim)), rng);
  }
  f.head_weight.setZero(cfg.embed_dim, cfg.classes);
  f.head_bias.setZero(cfg.classes);
  return f;
}

/// Forward pass. Per sample: encode each modality to tokens, concatenate
/// (audio rows first), run softmax(Q K^T / sqrt(D)) V with a residual
/// connection, mean-pool over tokens, and apply the frozen head.
template <typename Scalar>
ForwardCacheT<Scalar> forward(const AudioBatchT<Scalar>& audio,
                              const VisualBatchT<Scalar>& visual,
                              const FusionParamsT<Scalar>& params,
                              const FrozenWeightsT<Scalar>& frozen) {
  check_params_shape(params, "forward");
  const Index batch = audio.batch;
  if (visual.batch != batch || batch < 1) {
    throw std::invalid_argument("forward: audio/visual batch sizes differ");
  }
  if (audio.values.cols() != frozen.audio_encoder.rows() ||
      visual.values.cols() != frozen.visual_encoder.rows()) {
    throw std::invalid_argument("forward: input dims do not match encoders");
  }
  const Index d = params.dim();
  if (frozen.audio_encoder.cols() % d != 0 ||
      frozen.visual_encoder.cols() % d != 0 ||
      frozen.head_weight.rows() != d) {
    throw std::invalid_argument("forward: embed dim mismatch");
  }
  const Index t_a = frozen.audio_encoder.cols() / d;
  const Index t_v = frozen.visual_encoder.cols() / d;
  const Index n = t_a + t_v;
  const Index classes = frozen.head_weight.cols();
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(Scalar(d));

  const RowMajorX<Scalar> audio_tokens = audio.values * frozen.audio_encoder;
  const RowMajorX<Scalar> visual_tokens = visual.values * frozen.visual_encoder;

  ForwardCacheT<Scalar> cache;
  cache.batch = batch;
  cache.tokens_per_sample = n;
  cache.tokens.resize(batch * n, d);
  cache.attn.resize(batch * n, n);
  cache.pooled.resize(batch, d);
  cache.logits.resize(batch, classes);

  for (Index b = 0; b < batch; ++b) {
    auto z = cache.tokens.middleRows(b * n, n);
    for (Index t = 0; t < t_a; ++t) {
      z.row(t) = audio_tokens.row(b).segment(t * d, d);
    }
    for (Index t = 0; t < t_v; ++t) {
      z.row(t_a + t) = visual_tokens.row(b).segment(t * d, d);
    }

    const MatrixX<Scalar> q = z * params.w_q;
    const MatrixX<Scalar> k = z * params.w_k;
    const MatrixX<Scalar> v = z * params.w_v;
    MatrixX<Scalar> scores = q * k.transpose() * inv_sqrt_d;

    auto attn = cache.attn.middleRows(b * n, n);
    for (Index i = 0; i < n; ++i) {
      const Scalar m = scores.row(i).maxCoeff();
      attn.row(i) = (scores.row(i).array() - m).exp();
      attn.row(i) /= attn.row(i).sum();
    }

    const MatrixX<Scalar> fused = z + attn * v;
    cache.pooled.row(b) = fused.colwise().mean();
    cache.logits.row(b) = cache.pooled.row(b) * frozen.head_weight +
                          frozen.head_bias.transpose();
  }
  if (!cache.logits.allFinite()) {
    throw std::runtime_error("forward: non-finite logits");
  }
  cache.params_digest = detail::params_digest(params);
  return cache;
}

/// Exact gradients of the scalar loss whose logit-gradient is `dlogits`,
/// with respect to the three projection matrices. The frozen weights and
/// the token path carry no gradient.
template <typename Scalar>
FusionParamsT<Scalar> backward(const ForwardCacheT<Scalar>& cache,
                               const RowMajorX<Scalar>& dlogits,
                               const FusionParamsT<Scalar>& params,
                               const FrozenWeightsT<Scalar>& frozen) {
  check_params_shape(params, "backward");
  if (cache.params_digest != detail::params_digest(params)) {
    throw std::logic_error(
        "backward: cache was produced with different fusion parameters");
  }
  const Index batch = cache.batch;
  const Index n = cache.tokens_per_sample;
  const Index d = params.dim();
  if (dlogits.rows() != batch || dlogits.cols() != frozen.head_weight.cols() ||
      cache.tokens.rows() != batch * n || cache.tokens.cols() != d) {
    throw std::logic_error("backward: cache/dlogits shape mismatch");
  }
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(Scalar(d));

  FusionParamsT<Scalar> grads = zero_params<Scalar>(d);
  for (Index b = 0; b < batch; ++b) {
    const auto z = cache.tokens.middleRows(b * n, n);
    const auto attn = cache.attn.middleRows(b * n, n);
    const MatrixX<Scalar> q = z * params.w_q;
    const MatrixX<Scalar> k = z * params.w_k;
    const MatrixX<Scalar> v = z * params.w_v;

    // Pooling spreads the head gradient uniformly over tokens; the residual
    // branch into z is frozen and drops out.
    const VectorX<Scalar> dpooled = frozen.head_weight * dlogits.row(b).transpose();
    MatrixX<Scalar> dfused(n, d);
    dfused.rowwise() = dpooled.transpose() / Scalar(n);

    const MatrixX<Scalar> dattn = dfused * v.transpose();
    const MatrixX<Scalar> dv = attn.transpose() * dfused;

    MatrixX<Scalar> dscores(n, n);
    for (Index i = 0; i < n; ++i) {
      const Scalar inner = dattn.row(i).dot(attn.row(i));
      dscores.row(i) =
          attn.row(i).array() * (dattn.row(i).array() - inner);
    }
    const MatrixX<Scalar> dq = dscores * k * inv_sqrt_d;
    const MatrixX<Scalar> dk = dscores.transpose() * q * inv_sqrt_d;

    grads.w_q.noalias() += z.transpose() * dq;
    grads.w_k.noalias() += z.transpose() * dk;
    grads.w_v.noalias() += z.transpose() * dv;
  }
  return grads;
}

/// First-order adaptive optimizer state (decaying first/second moment
/// accumulators with bias correction).
template <typename Scalar>
struct OptimizerStateT {
  MatrixX<Scalar> m_q, m_k, m_v;
  MatrixX<Scalar> v_q, v_k, v_v;
  std::int64_t step = 0;
  Scalar learning_rate = Scalar(1e-4);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);

  static OptimizerStateT zeros(Index dim, Scalar learning_rate) {
    OptimizerStateT s;
    s.m_q.setZero(dim, dim);
    s.m_k.setZero(dim, dim);
    s.m_v.setZero(dim, dim);
    s.v_q.setZero(dim, dim);
    s.v_k.setZero(dim, dim);
    s.v_v.setZero(dim, dim);
    s.learning_rate = learning_rate;
    return s;
  }

  void reset_moments() {
    m_q.setZero();
    m_k.setZero();
    m_v.setZero();
    v_q.setZero();
    v_k.setZero();
    v_v.setZero();
    step = 0;
  }
};

using OptimizerState = OptimizerStateT<double>;

/// One in-place update of the fusion parameters.
template <typename Scalar>
void optimizer_step(OptimizerStateT<Scalar>& state,
                    FusionParamsT<Scalar>& params,
                    const FusionParamsT<Scalar>& grads) {
  check_params_shape(params, "optimizer_step");
  if (grads.w_q.rows() != params.w_q.rows() ||
      state.m_q.rows() != params.w_q.rows()) {
    throw std::invalid_argument("optimizer_step: shape mismatch");
  }
  state.step += 1;
  const Scalar bc1 =
      Scalar(1) - std::pow(state.beta1, static_cast<Scalar>(state.step));
  const Scalar bc2 =
      Scalar(1) - std::pow(state.beta2, static_cast<Scalar>(state.step));
  auto update = [&](MatrixX<Scalar>& m, MatrixX<Scalar>& v,
                    MatrixX<Scalar>& w, const MatrixX<Scalar>& g) {
    m = state.beta1 * m + (Scalar(1) - state.beta1) * g;
    v = (state.beta2 * v.array() +
         (Scalar(1) - state.beta2) * g.array().square())
            .matrix();
    const auto m_hat = m.array() / bc1;
    const auto v_hat = v.array() / bc2;
    w.array() -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
  };
  update(state.m_q, state.v_q, params.w_q, grads.w_q);
  update(state.m_k, state.v_k, params.w_k, grads.w_k);
  update(state.m_v, state.v_v, params.w_v, grads.w_v);
}

}  // namespace avctta
