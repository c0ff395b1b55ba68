#include "picpq/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "picpq/errors.hpp"

namespace picpq {

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

bool ModelState::operator==(const ModelState& other) const {
  if (params.size() != other.params.size() || activation_max != other.activation_max) {
    return false;
  }
  for (const auto& [id, p] : params) {
    auto it = other.params.find(id);
    if (it == other.params.end()) return false;
    if (!(p.weight == it->second.weight) || !(p.bias == it->second.bias)) return false;
  }
  return true;
}

ModelState init_model(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  ModelState state;
  state.rng_seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& l : spec.layers) {
    if (!l.has_params()) continue;
    std::vector<std::size_t> wshape;
    std::size_t out = 0;
    double fan_in = 0;
    if (l.kind == LayerKind::conv) {
      wshape = {static_cast<std::size_t>(l.out_channels), static_cast<std::size_t>(l.in_channels),
                static_cast<std::size_t>(l.kernel), static_cast<std::size_t>(l.kernel)};
      out = static_cast<std::size_t>(l.out_channels);
      fan_in = static_cast<double>(l.in_channels) * l.kernel * l.kernel;
    } else {
      wshape = {static_cast<std::size_t>(l.out_features), static_cast<std::size_t>(l.in_features)};
      out = static_cast<std::size_t>(l.out_features);
      fan_in = l.in_features;
    }
    const double bound = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    LayerParams<float> p{Tensor(wshape), Tensor({out})};
    for (auto& v : p.weight.values()) v = static_cast<float>(dist(rng));
    for (auto& v : p.bias.values()) v = static_cast<float>(dist(rng));
    state.params[l.id] = std::move(p);
  }
  return state;
}

void check_state(const NetworkSpec& spec, const ModelState& state) {
  std::ostringstream bad;
  for (const auto& l : spec.layers) {
    if (!l.has_params()) continue;
    auto it = state.params.find(l.id);
    if (it == state.params.end()) {
      bad << " [" << l.id << ": missing parameters]";
      continue;
    }
    std::vector<std::size_t> wshape;
    std::size_t out = 0;
    if (l.kind == LayerKind::conv) {
      wshape = {static_cast<std::size_t>(l.out_channels), static_cast<std::size_t>(l.in_channels),
                static_cast<std::size_t>(l.kernel), static_cast<std::size_t>(l.kernel)};
      out = static_cast<std::size_t>(l.out_channels);
    } else {
      wshape = {static_cast<std::size_t>(l.out_features), static_cast<std::size_t>(l.in_features)};
      out = static_cast<std::size_t>(l.out_features);
    }
    if (it->second.weight.shape() != wshape) {
      bad << " [" << l.id << ": weight " << shape_string(it->second.weight.shape())
          << " expected " << shape_string(wshape) << "]";
    }
    if (it->second.bias.shape() != std::vector<std::size_t>{out}) {
      bad << " [" << l.id << ": bias " << shape_string(it->second.bias.shape()) << "]";
    }
  }
  if (!bad.str().empty()) throw ValidationError("model state does not match spec:" + bad.str());
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
  if (!is) throw ValidationError("truncated weight container " + path);
  return v;
}

}  // namespace

void write_picw(const std::string& path, const std::map<std::string, Tensor>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot write " + path);
  os.write("PICW", 4);
  put<std::uint32_t>(os, 1);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, 0);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!os) throw ValidationError("failed writing " + path);
}

std::map<std::string, Tensor> read_picw(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PICW", 4) != 0) throw ValidationError(path + " is not a PICW file");
  const auto version = get<std::uint32_t>(is, path);
  if (version != 1) throw ValidationError("unsupported PICW version " + std::to_string(version));
  const auto count = get<std::uint32_t>(is, path);
  std::map<std::string, Tensor> out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = get<std::uint16_t>(is, path);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto dtype = get<std::uint8_t>(is, path);
    if (dtype != 0) throw ValidationError("unsupported dtype code in " + path);
    const auto rank = get<std::uint8_t>(is, path);
    if (rank > 4) throw ValidationError("tensor rank above 4 in " + path);
    std::vector<std::size_t> shape;
    for (int d = 0; d < rank; ++d) shape.push_back(get<std::uint32_t>(is, path));
    std::vector<float> data(Tensor::count(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) throw ValidationError("truncated weight container " + path);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

void save_weights(const std::string& path, const ModelState& state) {
  std::map<std::string, Tensor> entries;
  for (const auto& [id, p] : state.params) {
    entries["layer." + std::to_string(id) + ".weight"] = p.weight;
    entries["layer." + std::to_string(id) + ".bias"] = p.bias;
  }
  for (const auto& [id, m] : state.activation_max) {
    entries["layer." + std::to_string(id) + ".act_max"] = Tensor({1}, std::vector<float>{m});
  }
  write_picw(path, entries);
}

ModelState load_weights(const std::string& path) {
  ModelState state;
  for (auto& [name, t] : read_picw(path)) {
    const auto first = name.find('.');
    const auto second = name.rfind('.');
    if (name.rfind("layer.", 0) != 0 || first == second) {
      throw ValidationError("unexpected entry '" + name + "' in " + path);
    }
    const int id = std::stoi(name.substr(first + 1, second - first - 1));
    const std::string field = name.substr(second + 1);
    if (field == "weight") {
      state.params[id].weight = std::move(t);
    } else if (field == "bias") {
      state.params[id].bias = std::move(t);
    } else if (field == "act_max" && t.size() == 1) {
      state.activation_max[id] = t[0];
    } else {
      throw ValidationError("unexpected entry '" + name + "' in " + path);
    }
  }
  return state;
}

}  // namespace picpq
