#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avctta/buffer.hpp"
#include "avctta/rng.hpp"

#include <cmath>
#include <limits>
#include <vector>

using namespace avctta;

namespace {

constexpr Index kAudioDim = 2;
constexpr Index kVisualDim = 2;
constexpr Index kParamDim = 3;

ModalityStats stats_1d(double mean, double var) {
  ModalityStats s;
  s.mean = VectorX<double>::Constant(1, mean);
  s.var = VectorX<double>::Constant(1, var);
  return s;
}

AVSignature random_signature(Rng& rng) {
  AVSignature sig;
  sig.audio.mean = VectorX<double>::NullaryExpr(
      kAudioDim, [&](Index) { return rng.uniform(-2.0, 2.0); });
  sig.audio.var = VectorX<double>::NullaryExpr(
      kAudioDim, [&](Index) { return rng.uniform(0.25, 4.0); });
  sig.visual.mean = VectorX<double>::NullaryExpr(
      kVisualDim, [&](Index) { return rng.uniform(-2.0, 2.0); });
  sig.visual.var = VectorX<double>::NullaryExpr(
      kVisualDim, [&](Index) { return rng.uniform(0.25, 4.0); });
  return sig;
}

FusionParams random_params(Rng& rng) {
  FusionParams p = zero_params<double>(kParamDim);
  for (auto* m : {&p.w_q, &p.w_k, &p.w_v}) {
    for (Index r = 0; r < kParamDim; ++r) {
      for (Index c = 0; c < kParamDim; ++c) (*m)(r, c) = rng.normal();
    }
  }
  return p;
}

// Signature whose combined distance from a zero-mean unit-var reference is
// exactly `target` (all of it in the audio term, visual identical).
AVSignature signature_at_distance(double target) {
  AVSignature ref;
  ref.audio = stats_1d(0.0, 1.0);
  ref.visual = stats_1d(0.0, 1.0);
  AVSignature s = ref;
  s.audio = stats_1d(std::sqrt(2.0 * target), 1.0);
  return s;
}

AVSignature reference_signature() {
  AVSignature ref;
  ref.audio = stats_1d(0.0, 1.0);
  ref.visual = stats_1d(0.0, 1.0);
  return ref;
}

// Exhaustive-scan oracle used against select_best.
RetrievalResult brute_force_select(const SnapshotBuffer& buffer,
                                   const AVSignature& query) {
  RetrievalResult r;
  if (buffer.size() == 0) return r;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const double d = combined_distance(query, buffer.element(i).signature);
    if (d < best) {
      best = d;
      best_index = i;
    }
  }
  r.distance = best;
  if (best < buffer.tau()) {
    r.hit = true;
    r.index = best_index;
  }
  return r;
}

}  // namespace

TEST_CASE("select_best: empty buffer misses with no distance") {
  SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
  const auto r = buffer.select_best(reference_signature());
  CHECK_FALSE(r.hit);
  CHECK_FALSE(r.distance.has_value());
}

TEST_CASE("select_best: identical signature is a zero-distance hit") {
  SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
  Rng rng(1);
  const auto sig = reference_signature();
  buffer.insert(sig, random_params(rng), 0);
  const auto r = buffer.select_best(sig);
  REQUIRE(r.hit);
  CHECK(r.index == 0);
  CHECK(*r.distance == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("select_best: picks the argmin under tau") {
  SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
  Rng rng(2);
  // stored elements at distances {0.02, 0.003, 0.004} from the query
  for (double d : {0.02, 0.003, 0.004}) {
    buffer.insert(signature_at_distance(d), random_params(rng), 0);
  }
  const auto query = reference_signature();
  const auto r = buffer.select_best(query);
  REQUIRE(r.hit);
  CHECK(r.index == 1);
  CHECK(*r.distance == doctest::Approx(0.003).epsilon(1e-9));

  const auto oracle = brute_force_select(buffer, query);
  CHECK(oracle.hit == r.hit);
  CHECK(oracle.index == r.index);
}

TEST_CASE("select_best: miss reports the minimum distance") {
  SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
  Rng rng(3);
  buffer.insert(signature_at_distance(0.02), random_params(rng), 0);
  buffer.insert(signature_at_distance(0.01), random_params(rng), 1);
  const auto r = buffer.select_best(reference_signature());
  CHECK_FALSE(r.hit);
  REQUIRE(r.distance.has_value());
  CHECK(*r.distance == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(*r.distance >= buffer.tau());
}

TEST_CASE("ema_update_params follows the blend factor") {
  Rng rng(4);

  SUBCASE("beta 0.99 moves a stored 1.0 toward 0.0 by one percent") {
    SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
    FusionParams stored = zero_params<double>(kParamDim);
    stored.w_q.setConstant(1.0);
    buffer.insert(reference_signature(), stored, 0);
    FusionParams fresh = zero_params<double>(kParamDim);
    buffer.ema_update_params(0, fresh);
    CHECK(buffer.element(0).params.w_q(0, 0) == doctest::Approx(0.99));
  }

  SUBCASE("identical fresh values are a fixed point") {
    SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
    const auto p = random_params(rng);
    buffer.insert(reference_signature(), p, 0);
    buffer.ema_update_params(0, p);
    CHECK((buffer.element(0).params.w_q - p.w_q).norm() == 0.0);
    CHECK((buffer.element(0).params.w_k - p.w_k).norm() == 0.0);
    CHECK((buffer.element(0).params.w_v - p.w_v).norm() == 0.0);
  }

  SUBCASE("beta 0.5 averages stored and fresh") {
    SnapshotBuffer buffer(0.005, std::nullopt, 0.5);
    FusionParams stored = zero_params<double>(kParamDim);
    stored.w_v.setConstant(2.0);
    buffer.insert(reference_signature(), stored, 0);
    FusionParams fresh = zero_params<double>(kParamDim);
    fresh.w_v.setConstant(4.0);
    buffer.ema_update_params(0, fresh);
    CHECK(buffer.element(0).params.w_v(1, 2) == doctest::Approx(3.0));
  }

  SUBCASE("index out of range is rejected") {
    SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
    CHECK_THROWS_AS(buffer.ema_update_params(0, random_params(rng)),
                    std::out_of_range);
  }
}

TEST_CASE("ema_update_params converges geometrically") {
  Rng rng(5);
  const double beta = 0.9;
  SnapshotBuffer buffer(0.005, std::nullopt, beta);
  FusionParams stored = zero_params<double>(kParamDim);
  stored.w_q.setConstant(1.0);
  buffer.insert(reference_signature(), stored, 0);
  FusionParams fresh = zero_params<double>(kParamDim);
  fresh.w_q.setConstant(-2.0);
  for (int k = 1; k <= 100; ++k) {
    buffer.ema_update_params(0, fresh);
    const double expected = std::pow(beta, k) * (1.0 - (-2.0)) + (-2.0);
    CHECK(buffer.element(0).params.w_q(0, 0) ==
          doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("ema_update_stats: moment-preserving blend") {
  SUBCASE("equal means collapse to a plain variance blend") {
    SnapshotBuffer buffer(0.005, std::nullopt, 0.99);
    AVSignature stored = reference_signature();
    stored.audio = stats_1d(0.7, 2.0);
    buffer.insert(stored, zero_params<double>(kParamDim), 0);
    AVSignature fresh = stored;
    fresh.audio.var[0] = 0.5;
    buffer.ema_update_stats(0, fresh);
    const auto& e = buffer.element(0);
    CHECK(e.signature.audio.mean[0] == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(e.signature.audio.var[0] ==
          doctest::Approx(0.99 * 2.0 + 0.01 * 0.5).epsilon(1e-12));
  }

  SUBCASE("beta 0.5, zero variances: the mean spread becomes variance") {
    SnapshotBuffer buffer(0.005, std::nullopt, 0.5);
    AVSignature stored = reference_signature();
    stored.audio = stats_1d(0.0, kVarianceFloor);  // variance floor ~ 0
    buffer.insert(stored, zero_params<double>(kParamDim), 0);
    AVSignature fresh = stored;
    fresh.audio = stats_1d(2.0, kVarianceFloor);
    buffer.ema_update_stats(0, fresh);
    const auto& e = buffer.element(0);
    CHECK(e.signature.audio.mean[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(e.signature.audio.var[0] == doctest::Approx(1.0).epsilon(1e-5));
  }

  SUBCASE("second-moment identity holds for random inputs") {
    Rng rng(6);
    for (int rep = 0; rep < 100; ++rep) {
      const double beta = rng.uniform(0.05, 0.95);
      SnapshotBuffer buffer(0.005, std::nullopt, beta);
      auto stored = random_signature(rng);
      buffer.insert(stored, zero_params<double>(kParamDim), 0);
      const auto fresh = random_signature(rng);
      buffer.ema_update_stats(0, fresh);
      const auto& updated = buffer.element(0).signature;
      auto check_modality = [&](const ModalityStats& old_s,
                                const ModalityStats& new_s,
                                const ModalityStats& out) {
        for (Index i = 0; i < out.dim(); ++i) {
          const double lhs = out.var[i] + out.mean[i] * out.mean[i];
          const double rhs =
              beta * (old_s.var[i] + old_s.mean[i] * old_s.mean[i]) +
              (1 - beta) * (new_s.var[i] + new_s.mean[i] * new_s.mean[i]);
          CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
        }
      };
      check_modality(stored.audio, fresh.audio, updated.audio);
      check_modality(stored.visual, fresh.visual, updated.visual);
    }
  }
}

TEST_CASE("merge_closest: merges the closest pair and shrinks by one") {
  Rng rng(7);
  SnapshotBuffer buffer(0.005, std::nullopt, 0.99);

  SUBCASE("two identical elements merge first") {
    const auto twin = signature_at_distance(5.0);
    buffer.insert(signature_at_distance(0.5), random_params(rng), 0);
    buffer.insert(twin, random_params(rng), 1);
    buffer.insert(twin, random_params(rng), 2);
    const auto untouched = buffer.element(0);
    buffer.merge_closest();
    REQUIRE(buffer.size() == 2);
    // the non-selected element is untouched bit-for-bit
    CHECK((buffer.element(0).signature.audio.mean -
           untouched.signature.audio.mean)
              .norm() == 0.0);
    CHECK((buffer.element(0).params.w_q - untouched.params.w_q).norm() == 0.0);
    // merged element keeps the twin signature
    CHECK((buffer.element(1).signature.audio.mean - twin.audio.mean).norm() ==
          doctest::Approx(0.0));
  }

  SUBCASE("merged stats and params are element-wise averages") {
    AVSignature a = reference_signature();
    a.audio = stats_1d(0.0, 0.3);
    AVSignature b = reference_signature();
    b.audio = stats_1d(2.0, 0.3);
    FusionParams pa = zero_params<double>(kParamDim);
    pa.w_q.setConstant(1.0);
    FusionParams pb = zero_params<double>(kParamDim);
    pb.w_q.setConstant(3.0);
    buffer.insert(a, pa, 4);
    buffer.insert(b, pb, 9);
    buffer.merge_closest();
    REQUIRE(buffer.size() == 1);
    const auto& m = buffer.element(0);
    CHECK(m.signature.audio.mean[0] == doctest::Approx(1.0));
    CHECK(m.signature.audio.var[0] == doctest::Approx(0.3));
    CHECK(m.params.w_q(2, 2) == doctest::Approx(2.0));
    CHECK(m.created_step == 9);  // max of the pair
  }

  SUBCASE("exact mixture merge adds the mean spread") {
    SnapshotBuffer exact(0.005, std::nullopt, 0.99, BudgetPolicy::MergeClosest,
                         true);
    AVSignature a = reference_signature();
    a.audio = stats_1d(0.0, 0.3);
    AVSignature b = reference_signature();
    b.audio = stats_1d(2.0, 0.3);
    exact.insert(a, zero_params<double>(kParamDim), 0);
    exact.insert(b, zero_params<double>(kParamDim), 1);
    exact.merge_closest();
    // 0.5*(0.3 + 1) + 0.5*(0.3 + 1) = 1.3
    CHECK(exact.element(0).signature.audio.var[0] == doctest::Approx(1.3));
  }

  SUBCASE("fewer than two elements is an error") {
    CHECK_THROWS_AS(buffer.merge_closest(), std::logic_error);
    buffer.insert(reference_signature(), random_params(rng), 0);
    CHECK_THROWS_AS(buffer.merge_closest(), std::logic_error);
  }
}

TEST_CASE("insert: budget enforcement per policy") {
  Rng rng(8);

  SUBCASE("empty buffer accepts freely") {
    SnapshotBuffer buffer(0.005, 50, 0.99);
    buffer.insert(random_signature(rng), random_params(rng), 0);
    CHECK(buffer.size() == 1);
  }

  SUBCASE("merge-closest holds the size at eta") {
    SnapshotBuffer buffer(0.005, 3, 0.99);
    for (int i = 0; i < 10; ++i) {
      buffer.insert(random_signature(rng), random_params(rng), i);
      CHECK(buffer.size() <= 3);
    }
    CHECK(buffer.size() == 3);
  }

  SUBCASE("drop-oldest evicts the minimal created_step") {
    SnapshotBuffer buffer(0.005, 3, 0.99, BudgetPolicy::DropOldest);
    buffer.insert(signature_at_distance(1.0), random_params(rng), 5);
    buffer.insert(signature_at_distance(2.0), random_params(rng), 9);
    buffer.insert(signature_at_distance(3.0), random_params(rng), 2);
    buffer.insert(signature_at_distance(4.0), random_params(rng), 11);
    REQUIRE(buffer.size() == 3);
    std::vector<std::int64_t> steps;
    for (std::size_t i = 0; i < buffer.size(); ++i) {
      steps.push_back(buffer.element(i).created_step);
    }
    CHECK(steps == std::vector<std::int64_t>{5, 9, 11});
  }

  SUBCASE("a budget of one keeps exactly the newest element") {
    SnapshotBuffer buffer(0.005, 1, 0.99);
    buffer.insert(signature_at_distance(1.0), random_params(rng), 0);
    buffer.insert(signature_at_distance(2.0), random_params(rng), 1);
    REQUIRE(buffer.size() == 1);
    CHECK(buffer.element(0).created_step == 1);
  }

  SUBCASE("mismatched dimensions are rejected") {
    SnapshotBuffer buffer(0.005, 3, 0.99);
    buffer.insert(random_signature(rng), random_params(rng), 0);
    AVSignature bad = random_signature(rng);
    bad.audio.mean.resize(kAudioDim + 1);
    bad.audio.var.resize(kAudioDim + 1);
    CHECK_THROWS_AS(buffer.insert(bad, random_params(rng), 1),
                    std::invalid_argument);
  }
}

TEST_CASE("randomized operation sequences keep every invariant") {
  Rng rng(9);
  for (std::size_t eta : {std::size_t{3}, std::size_t{10}, std::size_t{50}}) {
    for (int sequence = 0; sequence < 60; ++sequence) {
      SnapshotBuffer buffer(0.01, eta, 0.99);
      std::int64_t step = 0;
      for (int op = 0; op < 20; ++op) {
        const auto choice = rng.uniform_index(3);
        if (choice == 0) {
          buffer.insert(random_signature(rng), random_params(rng), step++);
        } else if (choice == 1) {
          const auto query = random_signature(rng);
          const auto got = buffer.select_best(query);
          const auto want = brute_force_select(buffer, query);
          CHECK(got.hit == want.hit);
          if (want.hit) CHECK(got.index == want.index);
          if (want.distance) {
            CHECK(*got.distance ==
                  doctest::Approx(*want.distance).epsilon(1e-12));
          } else {
            CHECK_FALSE(got.distance.has_value());
          }
        } else if (buffer.size() >= 2) {
          const std::size_t before = buffer.size();
          buffer.merge_closest();
          CHECK(buffer.size() == before - 1);
        }
        CHECK(buffer.size() <= eta);
      }
    }
  }
}
