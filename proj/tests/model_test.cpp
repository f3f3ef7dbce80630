#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avctta/losses.hpp"
#include "avctta/model.hpp"
#include "avctta/rng.hpp"

#include <algorithm>
#include <cmath>

using namespace avctta;

namespace {

struct TestRig {
  ModelConfig config;
  FrozenWeights frozen;
  FusionParams params;
  AudioBatch audio;
  VisualBatch visual;
};

TestRig make_rig(std::uint64_t seed, Index batch = 2, Index d = 4,
                 Index t_a = 2, Index t_v = 2, Index classes = 3) {
  TestRig rig;
  rig.config.embed_dim = d;
  rig.config.audio_tokens = t_a;
  rig.config.visual_tokens = t_v;
  rig.config.classes = classes;
  rig.config.seed = seed;

  const Index audio_in = 6, visual_in = 8;
  rig.frozen = make_frozen_weights(rig.config, audio_in, visual_in);
  Rng rng(derive_seed(seed, "rig"));
  rig.frozen.head_weight = detail::gaussian_matrix<double>(d, classes, 0.7, rng);
  rig.frozen.head_bias =
      detail::gaussian_matrix<double>(classes, 1, 0.3, rng).col(0);

  rig.params = zero_params<double>(d);
  for (auto* m : {&rig.params.w_q, &rig.params.w_k, &rig.params.w_v}) {
    *m = detail::gaussian_matrix<double>(d, d, 0.5, rng);
  }

  rig.audio = make_audio_batch<double>(batch, 2, 3);
  rig.visual = make_visual_batch<double>(batch, 2, 2, 2);
  for (Index r = 0; r < batch; ++r) {
    for (Index c = 0; c < audio_in; ++c) rig.audio.values(r, c) = rng.normal();
    for (Index c = 0; c < visual_in; ++c) {
      rig.visual.values(r, c) = rng.normal();
    }
  }
  return rig;
}

double scalar_loss(const TestRig& rig, const FusionParams& params) {
  const auto cache = forward(rig.audio, rig.visual, params, rig.frozen);
  return total_loss(cache.logits).total;
}

FusionParams analytic_grads(const TestRig& rig, const FusionParams& params) {
  const auto cache = forward(rig.audio, rig.visual, params, rig.frozen);
  const auto report = total_loss(cache.logits);
  return backward(cache, report.dlogits, params, rig.frozen);
}

// Central finite differences (step 1e-5) of the total loss through the
// whole model, one projection entry at a time.
double numeric_grad(const TestRig& rig, const FusionParams& params, int which,
                    Index r, Index c, double step = 1e-5) {
  auto perturbed = [&](double delta) {
    FusionParams p = params;
    MatrixX<double>& m = which == 0 ? p.w_q : which == 1 ? p.w_k : p.w_v;
    m(r, c) += delta;
    return scalar_loss(rig, p);
  };
  return (perturbed(step) - perturbed(-step)) / (2 * step);
}

// Argmax ties make the confidence term non-smooth; keep FD probes away.
bool has_probability_tie(const TestRig& rig, const FusionParams& params) {
  const auto cache = forward(rig.audio, rig.visual, params, rig.frozen);
  for (Index i = 0; i < cache.logits.rows(); ++i) {
    VectorX<double> row = cache.logits.row(i).transpose();
    std::sort(row.data(), row.data() + row.size());
    if (row[row.size() - 1] - row[row.size() - 2] < 1e-2) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("forward: zero query/key projections give uniform attention") {
  TestRig rig = make_rig(100);
  rig.params.w_q.setZero();
  rig.params.w_k.setZero();
  const auto cache = forward(rig.audio, rig.visual, rig.params, rig.frozen);
  const Index n = rig.config.joint_tokens();
  CHECK(cache.tokens_per_sample == n);
  for (Index row = 0; row < cache.attn.rows(); ++row) {
    for (Index col = 0; col < n; ++col) {
      CHECK(cache.attn(row, col) ==
            doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-12));
    }
  }
  // uniform attention makes pooled = colmean(z) + colmean(z W_v)
  for (Index b = 0; b < cache.batch; ++b) {
    const MatrixX<double> z = cache.tokens.middleRows(b * n, n);
    const MatrixX<double> v = z * rig.params.w_v;
    const VectorX<double> expected =
        (z.colwise().mean() + v.colwise().mean()).transpose();
    CHECK((cache.pooled.row(b).transpose() - expected)
              .lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("forward: joint token count and attention row sums") {
  Rng seeds(101);
  for (int rep = 0; rep < 10; ++rep) {
    TestRig rig = make_rig(seeds.next_u64(), 3);
    const auto cache = forward(rig.audio, rig.visual, rig.params, rig.frozen);
    CHECK(cache.tokens_per_sample ==
          rig.config.audio_tokens + rig.config.visual_tokens);
    for (Index row = 0; row < cache.attn.rows(); ++row) {
      CHECK(std::abs(cache.attn.row(row).sum() - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("forward: duplicate samples produce identical logits rows") {
  TestRig rig = make_rig(102);
  rig.audio.values.row(1) = rig.audio.values.row(0);
  rig.visual.values.row(1) = rig.visual.values.row(0);
  const auto cache = forward(rig.audio, rig.visual, rig.params, rig.frozen);
  CHECK((cache.logits.row(0) - cache.logits.row(1)).norm() == 0.0);
}

TEST_CASE("forward: deterministic bit-for-bit") {
  const TestRig a = make_rig(103);
  const TestRig b = make_rig(103);
  const auto ca = forward(a.audio, a.visual, a.params, a.frozen);
  const auto cb = forward(b.audio, b.visual, b.params, b.frozen);
  REQUIRE(ca.logits.rows() == cb.logits.rows());
  for (Index i = 0; i < ca.logits.rows(); ++i) {
    for (Index j = 0; j < ca.logits.cols(); ++j) {
      CHECK(ca.logits(i, j) == cb.logits(i, j));
    }
  }
}

TEST_CASE("forward/backward: frozen weights are never modified") {
  TestRig rig = make_rig(104);
  const std::uint64_t before = detail::frozen_digest(rig.frozen);
  const auto cache = forward(rig.audio, rig.visual, rig.params, rig.frozen);
  const auto report = total_loss(cache.logits);
  (void)backward(cache, report.dlogits, rig.params, rig.frozen);
  CHECK(detail::frozen_digest(rig.frozen) == before);
}

TEST_CASE("forward: shape mismatches are rejected") {
  TestRig rig = make_rig(105);
  auto bad_audio = rig.audio;
  bad_audio.values.conservativeResize(bad_audio.values.rows(), 5);
  bad_audio.freq_bins = 5;
  bad_audio.time_steps = 1;
  CHECK_THROWS_AS(forward(bad_audio, rig.visual, rig.params, rig.frozen),
                  std::invalid_argument);

  auto bad_params = rig.params;
  bad_params.w_k.resize(3, 4);
  CHECK_THROWS_AS(forward(rig.audio, rig.visual, bad_params, rig.frozen),
                  std::invalid_argument);
}

TEST_CASE("backward: zero upstream gradient gives zero parameter gradients") {
  TestRig rig = make_rig(106);
  const auto cache = forward(rig.audio, rig.visual, rig.params, rig.frozen);
  RowMajorX<double> dlogits =
      RowMajorX<double>::Zero(cache.logits.rows(), cache.logits.cols());
  const auto grads = backward(cache, dlogits, rig.params, rig.frozen);
  CHECK(grads.w_q.norm() == 0.0);
  CHECK(grads.w_k.norm() == 0.0);
  CHECK(grads.w_v.norm() == 0.0);
}

TEST_CASE("backward: matches central finite differences over 20 seeds") {
  Rng seeds(107);
  int tested = 0;
  double worst = 0;
  while (tested < 20) {
    TestRig rig = make_rig(seeds.next_u64());
    if (has_probability_tie(rig, rig.params)) continue;
    ++tested;
    const auto grads = analytic_grads(rig, rig.params);
    for (int which = 0; which < 3; ++which) {
      const MatrixX<double>& g =
          which == 0 ? grads.w_q : which == 1 ? grads.w_k : grads.w_v;
      for (Index r = 0; r < g.rows(); ++r) {
        for (Index c = 0; c < g.cols(); ++c) {
          const double numeric = numeric_grad(rig, rig.params, which, r, c);
          const double denom =
              std::max({std::abs(numeric), std::abs(g(r, c)), 1e-5});
          const double rel = std::abs(numeric - g(r, c)) / denom;
          worst = std::max(worst, rel);
          CHECK(rel < 1e-6);
        }
      }
    }
  }
  MESSAGE("worst relative error: ", worst);
  CHECK(worst < 1e-5);  // module-level bound across all seeds
}

TEST_CASE("backward: duplicated sample with mean-reduced loss equals single") {
  TestRig rig = make_rig(108, 2);
  rig.audio.values.row(1) = rig.audio.values.row(0);
  rig.visual.values.row(1) = rig.visual.values.row(0);

  TestRig single = rig;
  single.audio.values.conservativeResize(1, Eigen::NoChange);
  single.audio.batch = 1;
  single.visual.values.conservativeResize(1, Eigen::NoChange);
  single.visual.batch = 1;

  Rng rng(1234);
  RowMajorX<double> row(1, rig.config.classes);
  for (Index a = 0; a < rig.config.classes; ++a) row(0, a) = rng.normal();

  const auto cache2 = forward(rig.audio, rig.visual, rig.params, rig.frozen);
  RowMajorX<double> dl2(2, rig.config.classes);
  dl2.row(0) = row.row(0) / 2.0;  // mean reduction splits the weight
  dl2.row(1) = row.row(0) / 2.0;
  const auto g2 = backward(cache2, dl2, rig.params, rig.frozen);

  const auto cache1 =
      forward(single.audio, single.visual, single.params, single.frozen);
  const auto g1 = backward(cache1, row, single.params, single.frozen);

  CHECK((g2.w_q - g1.w_q).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK((g2.w_k - g1.w_k).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK((g2.w_v - g1.w_v).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("backward: stale cache is rejected") {
  TestRig rig = make_rig(109);
  const auto cache = forward(rig.audio, rig.visual, rig.params, rig.frozen);
  RowMajorX<double> dlogits =
      RowMajorX<double>::Zero(cache.logits.rows(), cache.logits.cols());
  FusionParams moved = rig.params;
  moved.w_q(0, 0) += 0.25;
  CHECK_THROWS_AS(backward(cache, dlogits, moved, rig.frozen),
                  std::logic_error);
}

TEST_CASE("optimizer: zero gradient from rest leaves parameters unchanged") {
  TestRig rig = make_rig(110);
  auto state = OptimizerState::zeros(4, 1e-3);
  FusionParams params = rig.params;
  const FusionParams snapshot = params;
  optimizer_step(state, params, zero_params<double>(4));
  CHECK((params.w_q - snapshot.w_q).norm() == 0.0);
  CHECK((params.w_k - snapshot.w_k).norm() == 0.0);
  CHECK((params.w_v - snapshot.w_v).norm() == 0.0);
  CHECK(state.step == 1);
}

TEST_CASE("optimizer: zero gradient decays existing moments") {
  auto state = OptimizerState::zeros(4, 1e-3);
  FusionParams params = zero_params<double>(4);
  FusionParams g = zero_params<double>(4);
  g.w_q.setConstant(0.5);
  optimizer_step(state, params, g);
  const MatrixX<double> m_before = state.m_q;
  const MatrixX<double> v_before = state.v_q;
  optimizer_step(state, params, zero_params<double>(4));
  CHECK((state.m_q - 0.9 * m_before).lpNorm<Eigen::Infinity>() < 1e-15);
  CHECK((state.v_q - 0.999 * v_before).lpNorm<Eigen::Infinity>() < 1e-15);
  CHECK(state.step == 2);
}

TEST_CASE("optimizer: first step follows the closed form") {
  auto state = OptimizerState::zeros(4, 1e-3);
  FusionParams params = zero_params<double>(4);
  FusionParams grads = zero_params<double>(4);
  grads.w_q.setConstant(0.02);
  grads.w_k.setConstant(-0.02);
  optimizer_step(state, params, grads);
  // bias-corrected first step: -lr * g / (|g| + eps)
  const double expected = -1e-3 * 0.02 / (0.02 + 1e-8);
  CHECK(params.w_q(1, 1) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(params.w_k(1, 1) == doctest::Approx(-expected).epsilon(1e-9));
  CHECK(std::abs(params.w_q(1, 1) + 1e-3) < 1e-8);  // ~ -lr * sign(g)
}

TEST_CASE("optimizer: statefulness distinguishes repeated from doubled") {
  FusionParams grads = zero_params<double>(4);
  grads.w_q.setConstant(0.1);

  auto state_a = OptimizerState::zeros(4, 1e-3);
  FusionParams a = zero_params<double>(4);
  optimizer_step(state_a, a, grads);
  optimizer_step(state_a, a, grads);

  auto state_b = OptimizerState::zeros(4, 1e-3);
  FusionParams b = zero_params<double>(4);
  FusionParams doubled = zero_params<double>(4);
  doubled.w_q.setConstant(0.2);
  optimizer_step(state_b, b, doubled);

  CHECK(std::abs(a.w_q(0, 0) - b.w_q(0, 0)) > 1e-6);
}

TEST_CASE("float instantiation: forward smoke test") {
  ModelConfigT<float> cfg;
  cfg.embed_dim = 4;
  cfg.audio_tokens = 2;
  cfg.visual_tokens = 2;
  cfg.classes = 3;
  cfg.seed = 7;
  const auto frozen = make_frozen_weights(cfg, 6, 8);
  auto params = zero_params<float>(4);
  params.w_v.setConstant(0.1f);
  auto audio = make_audio_batch<float>(2, 2, 3);
  auto visual = make_visual_batch<float>(2, 2, 2, 2);
  audio.values.setConstant(0.5f);
  visual.values.setConstant(-0.25f);
  const auto cache = forward(audio, visual, params, frozen);
  CHECK(cache.logits.allFinite());
}
