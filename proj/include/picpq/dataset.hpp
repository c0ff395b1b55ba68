#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picpq/tensor.hpp"

namespace picpq {

struct Dataset {
  Tensor images;            // N x C x H x W
  std::vector<int> labels;  // N entries

  std::size_t size() const { return labels.size(); }
  /// Images and labels at the given indices, in order.
  Dataset subset(const std::vector<std::size_t>& indices) const;
  Dataset slice(std::size_t begin, std::size_t end) const;
  int max_label() const;
};

// "PICD" dataset container.
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

struct TrainValSplit {
  Dataset train;
  Dataset validation;
};

/// Shuffles with `seed` and holds out the last `fraction` as the validation split.
TrainValSplit split_validation(const Dataset& data, double fraction, std::uint64_t seed);

/// `count` disjoint batches of `batch_size` images drawn without replacement, starting
/// at batch `first_batch` of one seeded permutation. Two calls with the same seed and
/// non-overlapping batch ranges never share an image.
std::vector<Tensor> sample_batches(const Dataset& data, int count, int batch_size,
                                   std::uint64_t seed, int first_batch = 0);

/// Oriented bars on a dark background with elongated blob distractors; the class is
/// the bar orientation sector.
struct SyntheticParams {
  int classes = 3;
  int train_per_class = 500;
  int test_per_class = 200;
  int channels = 3;
  int height = 16;
  int width = 16;
  double angle_jitter_deg = 22.0;
  int distractors = 2;
  std::uint64_t seed = 7;
};

SyntheticParams synthetic_from_json(const nlohmann::json& j);
nlohmann::json synthetic_to_json(const SyntheticParams& p);

struct SyntheticData {
  Dataset train;
  Dataset test;
};

SyntheticData make_synthetic(const SyntheticParams& params);

}  // namespace picpq
