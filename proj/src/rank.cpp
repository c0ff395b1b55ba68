#include "picpq/rank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "picpq/engine.hpp"
#include "picpq/errors.hpp"
#include "picpq/plan.hpp"

namespace picpq {

std::vector<double> singular_values(std::span<const double> matrix, int rows, int cols) {
  if (rows < 0 || cols < 0 || matrix.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
    throw ValidationError("matrix size does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  for (double v : matrix) {
    if (!std::isfinite(v)) throw NumericError("non-finite entry in rank input", -1);
  }
  // Columns of `a` (length m) are orthogonalized in place; n <= m.
  const bool transpose = rows < cols;
  const int m = transpose ? cols : rows;
  const int n = transpose ? rows : cols;
  if (n == 0) return {};
  // Column-major copy so each column is contiguous.
  std::vector<double> a(static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double v = matrix[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
      if (transpose) {
        a[static_cast<std::size_t>(r) * static_cast<std::size_t>(m) + static_cast<std::size_t>(c)] = v;
      } else {
        a[static_cast<std::size_t>(c) * static_cast<std::size_t>(m) + static_cast<std::size_t>(r)] = v;
      }
    }
  }
  auto col = [&](int j) { return a.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(m); };
  const double eps = std::numeric_limits<double>::epsilon();
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double* x = col(p);
        double* y = col(q);
        double alpha = 0, beta = 0, gamma = 0;
        for (int i = 0; i < m; ++i) {
          alpha += x[i] * x[i];
          beta += y[i] * y[i];
          gamma += x[i] * y[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1 + zeta * zeta));
        const double c = 1 / std::sqrt(1 + t * t);
        const double s = c * t;
        for (int i = 0; i < m; ++i) {
          const double xi = x[i];
          x[i] = c * xi - s * y[i];
          y[i] = s * xi + c * y[i];
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    const double* x = col(j);
    double s = 0;
    for (int i = 0; i < m; ++i) s += x[i] * x[i];
    sv[static_cast<std::size_t>(j)] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

int numerical_rank(std::span<const double> matrix, int rows, int cols, double rel_tolerance) {
  if (!(rel_tolerance >= 0)) throw ValidationError("rank tolerance must be nonnegative");
  const auto sv = singular_values(matrix, rows, cols);
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double cut = rel_tolerance * sv.front();
  return static_cast<int>(std::count_if(sv.begin(), sv.end(), [&](double s) { return s > cut; }));
}

int numerical_rank(const TensorD& matrix, double rel_tolerance) {
  if (matrix.rank() != 2) throw ValidationError("rank input must be a matrix");
  return numerical_rank(matrix.values(), static_cast<int>(matrix.dim(0)), static_cast<int>(matrix.dim(1)),
                        rel_tolerance);
}

FilterPropertyTable average_rank(const NetworkSpec& spec, const ModelState& state,
                                 const std::vector<Tensor>& sample_batches, double rel_tolerance,
                                 const CompressionPlan* plan) {
  if (sample_batches.empty()) throw ValidationError("rank estimation needs at least one batch");
  FilterPropertyTable table;
  table.tolerance = rel_tolerance;
  std::vector<double> buffer;
  for (const auto& batch : sample_batches) {
    const auto result = forward(spec, state, batch, plan, true);
    for (const auto& [id, maps] : result.feature_maps) {
      const std::size_t N = maps.dim(0), C = maps.dim(1), H = maps.dim(2), W = maps.dim(3);
      auto& sums = table.values[id];
      sums.resize(C, 0.0);
      buffer.resize(H * W);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const float* src = maps.data() + (n * C + c) * H * W;
          std::copy(src, src + H * W, buffer.begin());
          sums[c] += numerical_rank(buffer, static_cast<int>(H), static_cast<int>(W), rel_tolerance);
        }
      }
    }
    table.sample_count += static_cast<int>(batch.dim(0));
  }
  for (auto& [id, v] : table.values) {
    for (auto& x : v) x /= table.sample_count;
  }
  return table;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("spearman inputs differ in length");
  if (x.empty()) throw ValidationError("spearman of empty vectors");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::equal(x.begin(), x.end(), y.begin()) ? 1.0 : 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::map<int, LayerStability> stability_report(const FilterPropertyTable& a, const FilterPropertyTable& b) {
  std::map<int, LayerStability> out;
  for (const auto& [id, va] : a.values) {
    auto it = b.values.find(id);
    if (it == b.values.end()) throw ValidationError("layer " + std::to_string(id) + " missing from second table");
    const auto& vb = it->second;
    if (va.size() != vb.size()) throw ValidationError("layer " + std::to_string(id) + " differs in filter count");
    LayerStability s;
    s.spearman = spearman(va, vb);
    for (std::size_t i = 0; i < va.size(); ++i) {
      const double d = std::abs(va[i] - vb[i]) / std::max({va[i], vb[i], 1.0});
      s.max_relative_diff = std::max(s.max_relative_diff, d);
    }
    out[id] = s;
  }
  return out;
}

nlohmann::json fp_to_json(const FilterPropertyTable& table) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, v] : table.values) j[std::to_string(id)] = v;
  j["sample_count"] = table.sample_count;
  j["tolerance"] = table.tolerance;
  return j;
}

FilterPropertyTable fp_from_json(const nlohmann::json& j) {
  FilterPropertyTable t;
  try {
    t.sample_count = j.at("sample_count").get<int>();
    t.tolerance = j.value("tolerance", kDefaultRankTolerance);
    for (const auto& [key, value] : j.items()) {
      if (key == "sample_count" || key == "tolerance") continue;
      std::size_t used = 0;
      const int id = std::stoi(key, &used);
      if (used != key.size()) throw ValidationError("unexpected key '" + key + "' in filter property table");
      auto v = value.get<std::vector<double>>();
      for (double x : v) {
        if (!std::isfinite(x) || x < 0) throw ValidationError("filter property values must be finite and >= 0");
      }
      t.values[id] = std::move(v);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed filter property table: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ValidationError("filter property table keys must be layer ids");
  }
  if (t.sample_count < 1) throw ValidationError("sample_count must be positive");
  return t;
}

}  // namespace picpq
