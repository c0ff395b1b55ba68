#include "picpq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "picpq/errors.hpp"

namespace picpq {

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  const auto& s = images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  Dataset out;
  out.images = Tensor({indices.size(), s[1], s[2], s[3]});
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= size()) throw ValidationError("dataset index out of range");
    std::copy_n(images.data() + i * per, per, out.images.data() + k * per);
    out.labels.push_back(labels[i]);
  }
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return subset(idx);
}

int Dataset::max_label() const {
  return labels.empty() ? -1 : *std::max_element(labels.begin(), labels.end());
}

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("truncated dataset container " + path);
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& data) {
  if (data.images.rank() != 4 || data.images.dim(0) != data.labels.size()) {
    throw ValidationError("dataset images must be N x C x H x W with N labels");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot write " + path);
  os.write("PICD", 4);
  for (std::size_t d = 0; d < 4; ++d) put<std::uint32_t>(os, static_cast<std::uint32_t>(data.images.dim(d)));
  os.write(reinterpret_cast<const char*>(data.images.data()),
           static_cast<std::streamsize>(data.images.size() * sizeof(float)));
  for (int label : data.labels) {
    if (label < 0 || label > std::numeric_limits<std::uint16_t>::max()) {
      throw ValidationError("label outside the u16 range");
    }
    put<std::uint16_t>(os, static_cast<std::uint16_t>(label));
  }
  if (!os) throw ValidationError("failed writing " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PICD", 4) != 0) throw ValidationError(path + " is not a PICD file");
  std::vector<std::size_t> shape(4);
  for (auto& d : shape) d = get<std::uint32_t>(is, path);
  Dataset data;
  std::vector<float> pixels(Tensor::count(shape));
  is.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size() * sizeof(float)));
  if (!is) throw ValidationError("truncated dataset container " + path);
  data.images = Tensor(shape, std::move(pixels));
  data.labels.resize(shape[0]);
  for (auto& l : data.labels) l = get<std::uint16_t>(is, path);
  is.peek();
  if (!is.eof()) throw ValidationError("trailing bytes after dataset payload in " + path);
  return data;
}

TrainValSplit split_validation(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 0.5)) {
    throw ValidationError("validation fraction must lie in (0, 0.5]");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(fraction * data.size())));
  if (n_val >= data.size()) throw ValidationError("dataset too small for a validation split");
  const auto cut = data.size() - n_val;
  return {data.subset({order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut)}),
          data.subset({order.begin() + static_cast<std::ptrdiff_t>(cut), order.end()})};
}

std::vector<Tensor> sample_batches(const Dataset& data, int count, int batch_size,
                                   std::uint64_t seed, int first_batch) {
  if (count < 1 || batch_size < 1 || first_batch < 0) {
    throw ValidationError("batch count and size must be positive");
  }
  const auto needed = static_cast<std::size_t>(first_batch + count) * static_cast<std::size_t>(batch_size);
  if (needed > data.size()) throw ValidationError("not enough images to sample the requested batches");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Tensor> batches;
  for (int b = first_batch; b < first_batch + count; ++b) {
    auto begin = order.begin() + static_cast<std::ptrdiff_t>(b) * batch_size;
    batches.push_back(data.subset({begin, begin + batch_size}).images);
  }
  return batches;
}

SyntheticParams synthetic_from_json(const nlohmann::json& j) {
  SyntheticParams p;
  p.classes = j.value("classes", p.classes);
  p.train_per_class = j.value("train_per_class", p.train_per_class);
  p.test_per_class = j.value("test_per_class", p.test_per_class);
  p.channels = j.value("channels", p.channels);
  p.height = j.value("height", p.height);
  p.width = j.value("width", p.width);
  p.angle_jitter_deg = j.value("angle_jitter_deg", p.angle_jitter_deg);
  p.distractors = j.value("distractors", p.distractors);
  p.seed = j.value("seed", p.seed);
  if (p.classes < 2 || p.train_per_class < 1 || p.test_per_class < 1 || p.channels < 1 ||
      p.height < 4 || p.width < 4 || p.distractors < 0) {
    throw ValidationError("invalid synthetic dataset parameters");
  }
  return p;
}

nlohmann::json synthetic_to_json(const SyntheticParams& p) {
  return {{"classes", p.classes},       {"train_per_class", p.train_per_class},
          {"test_per_class", p.test_per_class},
          {"channels", p.channels},     {"height", p.height},
          {"width", p.width},           {"angle_jitter_deg", p.angle_jitter_deg},
          {"distractors", p.distractors}, {"seed", p.seed}};
}

namespace {

struct Painter {
  const SyntheticParams& p;
  std::mt19937_64& rng;

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

  void bar(float* img, double angle_deg) {
    const double cy = uniform(0.35, 0.65) * (p.height - 1);
    const double cx = uniform(0.35, 0.65) * (p.width - 1);
    const double half_len = uniform(0.3, 0.45) * std::min(p.height, p.width);
    const double half_width = uniform(0.5, 1.1);
    const double t = angle_deg * std::numbers::pi / 180.0;
    const double ux = std::cos(t), uy = -std::sin(t);
    std::vector<double> color(static_cast<std::size_t>(p.channels));
    for (auto& c : color) c = uniform(0.45, 1.0);
    for (int y = 0; y < p.height; ++y) {
      for (int x = 0; x < p.width; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double along = std::abs(dx * ux + dy * uy);
        const double across = std::abs(-dx * uy + dy * ux);
        const double v = std::clamp(half_width + 0.5 - across, 0.0, 1.0) *
                         std::clamp(half_len + 0.5 - along, 0.0, 1.0);
        if (v <= 0) continue;
        for (int c = 0; c < p.channels; ++c) {
          float& px = img[(c * p.height + y) * p.width + x];
          px = std::max(px, static_cast<float>(v * color[static_cast<std::size_t>(c)]));
        }
      }
    }
  }

  void blob(float* img) {
    const double cy = uniform(0, p.height - 1);
    const double cx = uniform(0, p.width - 1);
    const double s_major = uniform(1.0, 2.5);
    const double s_minor = uniform(0.7, 1.4);
    const double t = uniform(0, std::numbers::pi);
    const double amp = uniform(0.25, 0.6);
    const double ux = std::cos(t), uy = -std::sin(t);
    std::vector<double> color(static_cast<std::size_t>(p.channels));
    for (auto& c : color) c = uniform(0.3, 1.0);
    for (int y = 0; y < p.height; ++y) {
      for (int x = 0; x < p.width; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double a = (dx * ux + dy * uy) / s_major;
        const double b = (-dx * uy + dy * ux) / s_minor;
        const double v = amp * std::exp(-0.5 * (a * a + b * b));
        if (v < 1e-3) continue;
        for (int c = 0; c < p.channels; ++c) {
          float& px = img[(c * p.height + y) * p.width + x];
          px = std::max(px, static_cast<float>(v * color[static_cast<std::size_t>(c)]));
        }
      }
    }
  }
};

Dataset render(const SyntheticParams& p, int per_class, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(per_class) * static_cast<std::size_t>(p.classes);
  const auto per = static_cast<std::size_t>(p.channels * p.height * p.width);
  Dataset d;
  d.images = Tensor({n, static_cast<std::size_t>(p.channels), static_cast<std::size_t>(p.height),
                     static_cast<std::size_t>(p.width)});
  d.labels.resize(n);
  Painter painter{p, rng};
  const double sector = 180.0 / p.classes;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(p.classes));
    float* img = d.images.data() + i * per;
    for (int k = 0; k < p.distractors; ++k) painter.blob(img);
    const double angle = label * sector + painter.uniform(-p.angle_jitter_deg, p.angle_jitter_deg);
    painter.bar(img, angle);
    d.labels[i] = label;
  }
  return d;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticParams& params) {
  std::mt19937_64 rng(params.seed);
  SyntheticData out;
  out.train = render(params, params.train_per_class, rng);
  out.test = render(params, params.test_per_class, rng);
  return out;
}

}  // namespace picpq
