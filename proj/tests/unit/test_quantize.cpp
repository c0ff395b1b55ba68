#include <doctest.h>

#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "picpq/errors.hpp"
#include "picpq/network.hpp"
#include "picpq/quantize.hpp"

using namespace picpq;

TEST_CASE("weight quantizer worked cases match the 50-digit oracle") {
  CHECK(quantize_weight_value(0.0, 4, 1.0) == 0.0);
  CHECK(quantize_weight_value(0.5, 2, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(quantize_weight_value(-1.0, 2, 1.0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(std::abs(quantize_weight_value(0.5, 2, 1.0) - oracle::weight_quant(0.5, 2, 1.0)) < 1e-7);
  CHECK(std::abs(quantize_weight_value(-1.0, 2, 1.0) - oracle::weight_quant(-1.0, 2, 1.0)) < 1e-7);
  // re-quantizing 0.5 with the same (n, layer_max)
  CHECK(quantize_weight_value(0.5, 2, 1.0) == 0.5);
}

TEST_CASE("activation quantizer worked cases") {
  CHECK(quantize_activation_value(-0.5, 4) == 0.0);
  CHECK(quantize_activation_value(1.7, 4) == 1.0);
  CHECK(quantize_activation_value(0.3, 2) == 0.25);
  CHECK(std::abs(quantize_activation_value(0.3, 2) - oracle::activation_quant(0.3, 2)) < 1e-7);
}

TEST_CASE("all-zero layer passes zeros through") {
  CHECK(quantize_weight_value(0.3, 4, 0.0) == 0.0);
  Tensor w({3}, std::vector<float>{0, 0, 0});
  CHECK(quantize_weights(w, 4, max_abs(w.values())) == w);
}

TEST_CASE("rounding is half away from zero") {
  CHECK(project_weight_grid(0.25, 2) == 0.5);    // 0.5 * 2^1 = 0.5 exactly -> 1
  CHECK(project_weight_grid(-0.25, 2) == -0.5);
  CHECK(quantize_activation_value(0.125, 2) == 0.25);  // 0.5 -> 1
}

TEST_CASE("quantizers agree with the oracle and stay on their grids") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> w(-2.0, 2.0);
  std::uniform_real_distribution<double> a(-0.5, 1.5);
  for (int n = kMinBits; n <= kMaxBits; ++n) {
    for (int i = 0; i < 300; ++i) {
      const double x = w(rng);
      const double m = 0.25 + std::abs(w(rng));
      const double q = quantize_weight_value(x, n, m);
      CHECK(std::abs(q - oracle::weight_quant(x, n, m)) < 1e-7);
      const double y = a(rng);
      CHECK(std::abs(quantize_activation_value(y, n) - oracle::activation_quant(y, n)) < 1e-7);
    }
  }
}

TEST_CASE("weight outputs lie on the signed grid when tanh(w) <= layer_max") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> w(-1.5, 1.5);
  for (int n = kMinBits; n <= kMaxBits; ++n) {
    const double scale = std::ldexp(1.0, n - 1);
    for (int i = 0; i < 2000; ++i) {
      const double x = w(rng);
      const double m = std::max(std::abs(x), std::abs(w(rng)));
      const double q = quantize_weight_value(x, n, m) * scale;
      CHECK(q == std::round(q));
      CHECK(std::abs(q) <= scale);
    }
  }
}

TEST_CASE("grid projection and activation quantizer are idempotent") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> w(-1.0, 1.0);
  for (int n = kMinBits; n <= kMaxBits; ++n) {
    for (int i = 0; i < 2000; ++i) {
      const double g = project_weight_grid(w(rng), n);
      CHECK(project_weight_grid(g, n) == g);
      const double aq = quantize_activation_value(w(rng) + 0.5, n);
      CHECK(quantize_activation_value(aq, n) == aq);
    }
  }
}

TEST_CASE("re-applying the tanh weight quantizer moves large grid points") {
  // tanh(1) * 2^7 = 97.48..., so the grid point 1.0 maps to 97/128.
  CHECK(quantize_weight_value(1.0, 8, 1.0) == 97.0 / 128.0);
  CHECK(quantize_weight_value(quantize_weight_value(1.0, 8, 1.0), 8, 1.0) != quantize_weight_value(1.0, 8, 1.0));
}

TEST_CASE("assign_bitwidth worked cases") {
  CHECK(assign_bitwidth(8, 1.0 / 6.0, 1.0) == 8);
  CHECK(assign_bitwidth(8, 1.0 / 6.0, 1.0 / 12.0) == 6);
  CHECK(assign_bitwidth(4, 1.0 / 6.0, 0.05) == 2);
  CHECK_THROWS_AS(assign_bitwidth(8, 1.0 / 6.0, 0.0), ValidationError);
  CHECK_THROWS_AS(assign_bitwidth(8, 1.0 / 6.0, 1.5), ValidationError);
}

TEST_CASE("assign_bitwidth matches the exact rational oracle and is monotone in sparsity") {
  for (int N = 2; N <= 8; ++N) {
    for (int pn = 1; pn <= 6; ++pn) {
      const oracle::Rational p(pn, 6);
      int prev = 0;
      for (int k = 1; k <= 48; ++k) {
        const oracle::Rational S(k, 48);
        const int n = assign_bitwidth(N, static_cast<double>(p), static_cast<double>(S));
        CHECK(n == oracle::bitwidth(N, p, S));
        CHECK(n >= prev);
        prev = n;
      }
    }
  }
}

TEST_CASE("default schedule interpolates over prunable depth") {
  NetworkSpec spec;
  spec.name = "seven";
  spec.input_shape = {1, 4, 4};
  int id = 1;
  int in = 1;
  for (int k = 0; k < 7; ++k) {
    LayerSpec c;
    c.id = id++;
    c.kind = LayerKind::conv;
    c.in_channels = in;
    c.out_channels = 2;
    c.kernel = 1;
    c.prunable = true;
    spec.layers.push_back(c);
    in = 2;
  }
  LayerSpec f;
  f.id = id++;
  f.kind = LayerKind::flatten;
  spec.layers.push_back(f);
  LayerSpec fc;
  fc.id = id++;
  fc.kind = LayerKind::fc;
  fc.in_features = 32;
  fc.out_features = 2;
  spec.layers.push_back(fc);

  const auto s = default_schedule(spec, 8, 2);
  std::vector<int> got;
  for (int l = 1; l <= 7; ++l) got.push_back(s.max_bits.at(l).weight);
  CHECK(got == std::vector<int>{8, 7, 6, 5, 4, 3, 2});
  CHECK(s.is_exempt(1));
  CHECK(s.is_exempt(fc.id));
  CHECK_FALSE(s.is_exempt(4));

  const auto flat = default_schedule(spec, 8, 8);
  for (int l = 1; l <= 7; ++l) CHECK(flat.max_bits.at(l).weight == 8);
  CHECK_THROWS_AS(default_schedule(spec, 2, 8), ValidationError);
  CHECK_THROWS_AS(default_schedule(spec, 9, 2), ValidationError);
}

TEST_CASE("exempt layers get full precision") {
  const auto spec = desk_cnn();
  const auto s = default_schedule(spec, 8, 2);
  const auto bits = assign_bitwidths({{1, 0.5}, {3, 0.5}}, s);
  CHECK(bits.at(1).weight == kFullPrecisionBits);
  CHECK(bits.at(12).activation == kFullPrecisionBits);
  CHECK(bits.at(3).weight < kFullPrecisionBits);
}

TEST_CASE("schedule from JSON adds exempt ids and separate activation bounds") {
  const auto spec = desk_cnn();
  const auto s = schedule_from_json(spec, {{"n_first", 8}, {"n_last", 4}, {"p", 0.25}, {"exempt", {6}},
                                           {"n_first_act", 6}, {"n_last_act", 2}});
  CHECK(s.is_exempt(6));
  CHECK(s.penalty == 0.25);
  CHECK(s.max_bits.at(3).weight > s.max_bits.at(3).activation);
  CHECK_THROWS_AS(schedule_from_json(spec, {{"exempt", {2}}}), ValidationError);
}
