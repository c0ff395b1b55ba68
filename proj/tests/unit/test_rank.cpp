#include <doctest.h>

#include <algorithm>
#include <random>

#include "../fixtures.hpp"
#include "../oracles.hpp"
#include "picpq/engine.hpp"
#include "picpq/errors.hpp"
#include "picpq/rank.hpp"

using namespace picpq;

namespace {

std::vector<double> as_double(const std::vector<long long>& m) { return {m.begin(), m.end()}; }

std::vector<long long> random_int_matrix(std::mt19937_64& rng, int rows, int cols, int lo, int hi) {
  std::uniform_int_distribution<int> u(lo, hi);
  std::vector<long long> m(static_cast<std::size_t>(rows * cols));
  for (auto& v : m) v = u(rng);
  return m;
}

}  // namespace

TEST_CASE("rank of identity, outer product and zero matrix") {
  TensorD eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  CHECK(numerical_rank(eye) == 4);
  const std::vector<double> u{1, -2, 3}, v{0.5, 4, -1, 2};
  std::vector<double> outer;
  for (double a : u) {
    for (double b : v) outer.push_back(a * b);
  }
  CHECK(numerical_rank(outer, 3, 4) == 1);
  CHECK(numerical_rank(std::vector<double>(12, 0.0), 3, 4) == 0);
  CHECK(numerical_rank(std::vector<double>{}, 0, 0) == 0);
}

TEST_CASE("singular values of a diagonal matrix") {
  const std::vector<double> m{3, 0, 0, 0, -5, 0};  // 2x3
  const auto sv = singular_values(m, 2, 3);
  REQUIRE(sv.size() == 2);
  CHECK(sv[0] == doctest::Approx(5.0));
  CHECK(sv[1] == doctest::Approx(3.0));
}

TEST_CASE("non-finite input is rejected") {
  std::vector<double> m{1, 2, std::nan(""), 4};
  CHECK_THROWS_AS(numerical_rank(m, 2, 2), NumericError);
  CHECK_THROWS_AS(numerical_rank(std::vector<double>{1, 2, 3}, 2, 2), ValidationError);
}

TEST_CASE("rank agrees with exact elimination on small-integer matrices") {
  std::mt19937_64 rng(42);
  int mismatches = 0;
  for (int i = 0; i < 300; ++i) {
    const int rows = std::uniform_int_distribution<int>(1, 8)(rng);
    const int cols = std::uniform_int_distribution<int>(1, 8)(rng);
    // narrow ranges make rank deficiency common
    const int span = i % 3 == 0 ? 1 : 3;
    auto m = random_int_matrix(rng, rows, cols, -span, span);
    if (i % 5 == 0 && rows > 2) {
      for (int c = 0; c < cols; ++c) m[static_cast<std::size_t>(cols + c)] = 2 * m[static_cast<std::size_t>(c)];
    }
    mismatches += numerical_rank(as_double(m), rows, cols) != oracle::exact_rank(m, rows, cols);
  }
  CHECK(mismatches == 0);
}

TEST_CASE("rank is invariant to permutations and nonzero scaling") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    auto m = random_int_matrix(rng, 6, 5, -1, 1);
    const auto d = as_double(m);
    const int r = numerical_rank(d, 6, 5);
    std::vector<int> rp{0, 1, 2, 3, 4, 5}, cp{0, 1, 2, 3, 4};
    std::shuffle(rp.begin(), rp.end(), rng);
    std::shuffle(cp.begin(), cp.end(), rng);
    std::vector<double> p(d.size());
    for (int a = 0; a < 6; ++a) {
      for (int b = 0; b < 5; ++b) p[static_cast<std::size_t>(a * 5 + b)] = d[static_cast<std::size_t>(rp[a] * 5 + cp[b])];
    }
    CHECK(numerical_rank(p, 6, 5) == r);
    for (double s : {-3.0, 1e-6, 1e6}) {
      std::vector<double> q = d;
      for (auto& v : q) v *= s;
      CHECK(numerical_rank(q, 6, 5) == r);
    }
  }
}

TEST_CASE("average rank: zero filters give 0, values bounded by map size") {
  const auto spec = desk_cnn();
  auto state = init_model(spec, 3);
  state.params.at(3).weight.values()[0] = 0;  // keep bias-only filters meaningful
  for (std::size_t i = 0; i < 16 * 27; ++i) {
    if (i / 27 == 4) state.params.at(1).weight[i] = 0.0f;
  }
  state.params.at(1).bias[4] = 0.0f;
  SyntheticParams sp;
  sp.train_per_class = 20;
  const auto data = make_synthetic(sp).train;
  const auto batches = sample_batches(data, 2, 8, 1);
  const auto fp = average_rank(spec, state, batches);
  CHECK(fp.sample_count == 16);
  CHECK(fp.values.at(1)[4] == 0.0);
  for (const auto& [id, v] : fp.values) {
    CHECK(v.size() == static_cast<std::size_t>(spec.layer(id).out_channels));
    const double bound = id <= 3 ? 16.0 : 8.0;
    for (double x : v) {
      CHECK(x >= 0.0);
      CHECK(x <= bound);
    }
  }
  auto plan = CompressionPlan::identity(spec);
  plan.layers[6].keep[3] = false;
  const auto masked = average_rank(spec, state, batches, kDefaultRankTolerance, &plan);
  CHECK(masked.values.at(6)[3] == 0.0);
  CHECK(masked.values.at(1) == fp.values.at(1));
}

TEST_CASE("average rank is the per-image mean") {
  // 1x1 conv copying the single input channel; images of rank 3 and 4.
  NetworkSpec spec;
  spec.name = "copy";
  spec.input_shape = {1, 4, 4};
  spec.layers = {fixture::conv(1, 1, 1, 1), fixture::simple(2, LayerKind::flatten), fixture::fc(3, 16, 2)};
  validate(spec);
  auto state = init_model(spec, 1);
  state.params.at(1).weight[0] = 1.0f;
  state.params.at(1).bias[0] = 0.0f;
  Tensor batch({2, 1, 4, 4});
  for (std::size_t i = 0; i < 3; ++i) batch.at(0, 0, i, i) = 1.0f;
  for (std::size_t i = 0; i < 4; ++i) batch.at(1, 0, i, i) = 2.0f;
  const auto fp = average_rank(spec, state, {batch});
  CHECK(fp.values.at(1)[0] == 3.5);
}

TEST_CASE("spearman conventions") {
  const std::vector<double> a{1, 2, 3, 4, 5}, rev{5, 4, 3, 2, 1};
  CHECK(spearman(a, a) == doctest::Approx(1.0));
  CHECK(spearman(a, rev) == doctest::Approx(-1.0));
  const std::vector<double> tied{1, 1, 2, 2, 3};
  CHECK(spearman(tied, tied) == doctest::Approx(1.0));
  const std::vector<double> flat{2, 2, 2};
  CHECK(spearman(flat, flat) == 1.0);
  CHECK(spearman(flat, std::vector<double>{1, 2, 3}) == 0.0);
  CHECK_THROWS_AS(spearman(a, flat), ValidationError);
}

TEST_CASE("stability report and JSON round trip") {
  FilterPropertyTable t;
  t.values = {{1, {1.0, 2.0, 3.0}}, {3, {4.0, 0.5}}};
  t.sample_count = 96;
  const auto same = stability_report(t, t);
  CHECK(same.at(1).spearman == doctest::Approx(1.0));
  CHECK(same.at(1).max_relative_diff == 0.0);
  FilterPropertyTable r = t;
  std::reverse(r.values[1].begin(), r.values[1].end());
  CHECK(stability_report(t, r).at(1).spearman == doctest::Approx(-1.0));
  CHECK(stability_report(t, r).at(1).max_relative_diff == doctest::Approx(2.0 / 3.0));
  FilterPropertyTable bad = t;
  bad.values[3].push_back(1.0);
  CHECK_THROWS_AS(stability_report(t, bad), ValidationError);

  const auto j = fp_to_json(t);
  CHECK(j.at("1").size() == 3);
  CHECK(j.at("sample_count") == 96);
  CHECK(fp_from_json(j) == t);
  CHECK_THROWS_AS(fp_from_json({{"sample_count", 2}, {"x", {1}}}), ValidationError);
  CHECK_THROWS_AS(fp_from_json({{"sample_count", 2}, {"1", {-1}}}), ValidationError);
}
