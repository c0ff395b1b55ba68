#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picpq/model.hpp"
#include "picpq/network.hpp"
#include "picpq/tensor.hpp"

namespace picpq {

struct CompressionPlan;

inline constexpr double kDefaultRankTolerance = 1e-6;
inline constexpr int kDefaultRankBatches = 6;

/// Singular values of a rows x cols row-major matrix, descending, via one-sided Jacobi
/// rotations on the smaller dimension.
std::vector<double> singular_values(std::span<const double> matrix, int rows, int cols);

/// Number of singular values strictly greater than rel_tolerance * largest; 0 for a
/// zero matrix. Throws NumericError on non-finite entries.
int numerical_rank(std::span<const double> matrix, int rows, int cols,
                   double rel_tolerance = kDefaultRankTolerance);
int numerical_rank(const TensorD& matrix, double rel_tolerance = kDefaultRankTolerance);

/// Average feature-map rank per filter of every prunable layer.
struct FilterPropertyTable {
  std::map<int, std::vector<double>> values;
  int sample_count = 0;
  double tolerance = kDefaultRankTolerance;

  bool operator==(const FilterPropertyTable&) const = default;
};

/// FP[l][i] = mean over every sampled image of rank(post-activation map of filter i).
/// `plan` (optional) masks filters during the forward pass.
FilterPropertyTable average_rank(const NetworkSpec& spec, const ModelState& state,
                                 const std::vector<Tensor>& sample_batches,
                                 double rel_tolerance = kDefaultRankTolerance,
                                 const CompressionPlan* plan = nullptr);

struct LayerStability {
  double spearman = 0.0;
  double max_relative_diff = 0.0;
};

/// Per-layer Spearman rank correlation (average ranks for ties) and
/// max |A - B| / max(A, B, 1).
std::map<int, LayerStability> stability_report(const FilterPropertyTable& a,
                                               const FilterPropertyTable& b);

/// Spearman correlation with average ranks for ties. If either side is constant the
/// result is 1 when the vectors are equal and 0 otherwise.
double spearman(std::span<const double> x, std::span<const double> y);

nlohmann::json fp_to_json(const FilterPropertyTable& table);
FilterPropertyTable fp_from_json(const nlohmann::json& j);

}  // namespace picpq
