// Small networks and datasets shared by unit and acceptance tests.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "picpq/dataset.hpp"
#include "picpq/model.hpp"
#include "picpq/network.hpp"
#include "picpq/plan.hpp"

namespace fixture {

using namespace picpq;

inline LayerSpec conv(int id, int in, int out, int k, int stride = 1, int pad = 0, bool prunable = true) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::conv;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.stride = stride;
  l.padding = pad;
  l.prunable = prunable;
  return l;
}

inline LayerSpec simple(int id, LayerKind kind, int kernel = 1, int stride = 1) {
  LayerSpec l;
  l.id = id;
  l.kind = kind;
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

inline LayerSpec fc(int id, int in, int out) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::fc;
  l.in_features = in;
  l.out_features = out;
  return l;
}

/// Random chain of 1-3 convs (with relu and optional pooling) and one fc.
inline NetworkSpec random_tiny_net(std::mt19937_64& rng) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  NetworkSpec spec;
  spec.name = "tiny";
  int c = pick(1, 3);
  int h = pick(5, 8);
  int w = pick(5, 8);
  spec.input_shape = {c, h, w};
  int id = 1;
  const int convs = pick(1, 3);
  for (int i = 0; i < convs; ++i) {
    const int k = std::min({pick(1, 3), h, w});
    const int pad = pick(0, k / 2);
    const int stride = (h > 5 && w > 5) ? pick(1, 2) : 1;
    const int out = pick(1, 4);
    spec.layers.push_back(conv(id++, c, out, k, stride, pad));
    h = (h + 2 * pad - k) / stride + 1;
    w = (w + 2 * pad - k) / stride + 1;
    c = out;
    spec.layers.push_back(simple(id++, LayerKind::relu));
    if (h >= 4 && w >= 4 && pick(0, 2) == 0) {
      const auto kind = pick(0, 1) ? LayerKind::maxpool : LayerKind::avgpool;
      spec.layers.push_back(simple(id++, kind, 2, 2));
      h = (h - 2) / 2 + 1;
      w = (w - 2) / 2 + 1;
    }
  }
  spec.layers.push_back(simple(id++, LayerKind::flatten));
  spec.layers.push_back(fc(id++, c * h * w, pick(2, 4)));
  validate(spec);
  return spec;
}

/// Uniform images in [-1, 1] with uniform labels.
inline Dataset random_batch(const NetworkSpec& spec, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Dataset d;
  const auto& s = spec.input_shape;
  d.images = Tensor({n, static_cast<std::size_t>(s.c), static_cast<std::size_t>(s.h), static_cast<std::size_t>(s.w)});
  for (auto& v : d.images.values()) v = u(rng);
  std::uniform_int_distribution<int> label(0, spec.num_classes() - 1);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(label(rng));
  return d;
}

/// Two-conv network with 8 filters each over 3x6x6 inputs (conv1 3->8, conv2 8->8, fc).
inline NetworkSpec two_conv_8() {
  NetworkSpec spec;
  spec.name = "two_conv_8";
  spec.input_shape = {3, 6, 6};
  spec.layers = {conv(1, 3, 8, 3, 1, 1),   simple(2, LayerKind::relu), conv(3, 8, 8, 3, 1, 1),
                 simple(4, LayerKind::relu), simple(5, LayerKind::avgpool, 6, 6), simple(6, LayerKind::flatten),
                 fc(7, 8, 2)};
  validate(spec);
  return spec;
}

/// Keeps the first `n` filters of a layer.
inline void keep_first(LayerPlan& lp, int n) {
  for (std::size_t i = 0; i < lp.keep.size(); ++i) lp.keep[i] = static_cast<int>(i) < n;
  lp.sparsity = static_cast<double>(n) / static_cast<double>(lp.keep.size());
}

/// Plan masking random filters (never a whole layer) of every prunable layer.
inline CompressionPlan random_mask_plan(const NetworkSpec& spec, std::mt19937_64& rng) {
  auto plan = CompressionPlan::identity(spec);
  for (auto& [id, lp] : plan.layers) {
    if (!lp.prunable) continue;
    for (std::size_t i = 0; i < lp.keep.size(); ++i) lp.keep[i] = std::bernoulli_distribution(0.6)(rng);
    lp.keep[std::uniform_int_distribution<std::size_t>(0, lp.keep.size() - 1)(rng)] = true;
    lp.sparsity = static_cast<double>(lp.kept()) / static_cast<double>(lp.keep.size());
  }
  return plan;
}

}  // namespace fixture
