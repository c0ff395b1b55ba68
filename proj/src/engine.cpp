#include "picpq/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include <Eigen/Dense>

#include "picpq/errors.hpp"
#include "picpq/quantize.hpp"

namespace picpq {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct PreparedLayer {
  const LayerSpec* layer = nullptr;
  LayerGeometry geo;
  std::vector<bool> out_mask;  // output channels (features after a flatten)
  int skip_index = -1;

  // conv / fc
  std::vector<int> kept_out;
  std::vector<int> active_in;  // conv: input channels, fc: input features
  Mat<T> weight;               // kept_out x (active_in * K * K) for conv
  Mat<T> weight_deriv;         // d(effective)/d(raw); empty when weights are not quantized
  std::vector<T> bias;

  // fake quantization of this layer's output
  int act_bits = kFullPrecisionBits;
  T act_max = T{1};
};

template <typename T>
struct Trace {
  std::vector<BasicTensor<T>> outputs;
  std::vector<BasicTensor<T>> prequant;
  std::vector<Mat<T>> cols;
  std::vector<std::vector<std::size_t>> argmax;
};

/// Network bound to parameters and an optional plan: masks, effective (fake-quantized)
/// weights and activation quantization sites are resolved once per parameter snapshot.
template <typename T>
class Executor {
 public:
  Executor(const NetworkSpec& spec, const ParamSet<T>& params, const CompressionPlan* plan,
           const std::map<int, float>& activation_max, bool quantize_activations = true)
      : spec_(spec) {
    const auto geo = infer_geometry(spec);
    if (plan) check_plan(spec, *plan);
    layers_.resize(spec.layers.size());
    std::vector<bool> mask(static_cast<std::size_t>(spec.input_shape.c), true);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      auto& L = layers_[i];
      L.layer = &spec.layers[i];
      L.geo = geo[i];
      const auto& l = *L.layer;
      switch (l.kind) {
        case LayerKind::conv:
        case LayerKind::fc: {
          const LayerPlan* lp = plan ? &plan->layers.at(l.id) : nullptr;
          const int n_out = l.kind == LayerKind::conv ? l.out_channels : l.out_features;
          L.out_mask.assign(static_cast<std::size_t>(n_out), true);
          if (lp) L.out_mask = lp->keep;
          for (int c = 0; c < n_out; ++c) {
            if (L.out_mask[static_cast<std::size_t>(c)]) L.kept_out.push_back(c);
          }
          for (std::size_t c = 0; c < mask.size(); ++c) {
            if (mask[c]) L.active_in.push_back(static_cast<int>(c));
          }
          const int wbits = lp && !lp->exempt ? lp->n_w : kFullPrecisionBits;
          prepare_weights(L, params.at(l.id), wbits);
          mask = L.out_mask;
          break;
        }
        case LayerKind::flatten: {
          std::vector<bool> expanded;
          const int spatial = L.geo.in.h * L.geo.in.w;
          for (bool m : mask) expanded.insert(expanded.end(), static_cast<std::size_t>(spatial), m);
          mask = expanded;
          L.out_mask = mask;
          break;
        }
        case LayerKind::residual_add:
          L.skip_index = spec.index_of(l.skip_from);
          L.out_mask = mask;
          break;
        default:
          L.out_mask = mask;
          break;
      }
    }
    if (plan && quantize_activations) {
      for (const auto& [id, lp] : plan->layers) {
        if (lp.exempt || lp.n_a >= kFullPrecisionBits) continue;
        auto it = activation_max.find(id);
        if (it == activation_max.end() || !(it->second > 0)) {
          throw ValidationError("activation range of layer " + std::to_string(id) +
                                " is not calibrated");
        }
        auto& site = layers_[static_cast<std::size_t>(spec.index_of(activation_site(spec, id)))];
        site.act_bits = lp.n_a;
        site.act_max = static_cast<T>(it->second);
      }
    }
  }

  const std::vector<PreparedLayer<T>>& layers() const { return layers_; }

  /// Forward pass; fills `trace` with everything backward needs.
  void forward(const BasicTensor<T>& input, Trace<T>& trace, bool keep_cols) const {
    const std::size_t n_layers = layers_.size();
    trace.outputs.assign(n_layers, {});
    trace.prequant.assign(n_layers, {});
    trace.cols.assign(n_layers, {});
    trace.argmax.assign(n_layers, {});
    for (std::size_t i = 0; i < n_layers; ++i) {
      const auto& L = layers_[i];
      const BasicTensor<T>& x = i == 0 ? input : trace.outputs[i - 1];
      BasicTensor<T> y;
      switch (L.layer->kind) {
        case LayerKind::conv: {
          Mat<T> col = im2col(L, x);
          y = conv_forward(L, x.dim(0), col);
          if (keep_cols) trace.cols[i] = std::move(col);
          break;
        }
        case LayerKind::fc: y = fc_forward(L, x); break;
        case LayerKind::relu: {
          y = x;
          for (auto& v : y.values()) v = v > T{0} ? v : T{0};
          break;
        }
        case LayerKind::maxpool: y = maxpool_forward(L, x, trace.argmax[i]); break;
        case LayerKind::avgpool: y = avgpool_forward(L, x); break;
        case LayerKind::flatten:
          y = BasicTensor<T>({x.dim(0), static_cast<std::size_t>(L.geo.out.c), 1, 1},
                             std::vector<T>(x.values().begin(), x.values().end()));
          break;
        case LayerKind::residual_add: {
          y = x;
          const auto& skip = trace.outputs[static_cast<std::size_t>(L.skip_index)];
          for (std::size_t k = 0; k < y.size(); ++k) y[k] += skip[k];
          break;
        }
      }
      if (L.act_bits < kFullPrecisionBits) {
        trace.prequant[i] = y;
        for (auto& v : y.values()) {
          v = L.act_max * static_cast<T>(quantize_activation_value(static_cast<double>(v / L.act_max), L.act_bits));
        }
      }
      trace.outputs[i] = std::move(y);
    }
  }

  /// Backward pass from d(loss)/d(logits); gradients are written into `grad` (which is
  /// reset to zero-filled tensors of parameter shape).
  void backward(const BasicTensor<T>& input, Trace<T>& trace, const BasicTensor<T>& dlogits,
                const ParamSet<T>& params, ParamSet<T>& grad) const {
    grad.clear();
    for (const auto& [id, p] : params) {
      grad[id] = {BasicTensor<T>(p.weight.shape()), BasicTensor<T>(p.bias.shape())};
    }
    const std::size_t n_layers = layers_.size();
    std::vector<BasicTensor<T>> gout(n_layers);
    gout[n_layers - 1] = dlogits;
    for (std::size_t ii = n_layers; ii-- > 0;) {
      const auto& L = layers_[ii];
      BasicTensor<T>& g = gout[ii];
      if (g.empty()) continue;
      if (L.act_bits < kFullPrecisionBits) {
        const auto& pre = trace.prequant[ii];
        for (std::size_t k = 0; k < g.size(); ++k) {
          const T s = pre[k] / L.act_max;
          if (s < T{0} || s > T{1}) g[k] = T{0};
        }
      }
      const BasicTensor<T>& x = ii == 0 ? input : trace.outputs[ii - 1];
      const bool need_input_grad = ii > 0;
      BasicTensor<T> gin;
      if (need_input_grad) gin = BasicTensor<T>(x.shape());
      switch (L.layer->kind) {
        case LayerKind::conv:
          conv_backward(L, x, trace.cols[ii], g, grad.at(L.layer->id), need_input_grad ? &gin : nullptr);
          break;
        case LayerKind::fc:
          fc_backward(L, x, g, grad.at(L.layer->id), need_input_grad ? &gin : nullptr);
          break;
        case LayerKind::relu:
          if (need_input_grad) {
            for (std::size_t k = 0; k < g.size(); ++k) gin[k] = x[k] > T{0} ? g[k] : T{0};
          }
          break;
        case LayerKind::maxpool:
          if (need_input_grad) {
            const auto& arg = trace.argmax[ii];
            for (std::size_t k = 0; k < g.size(); ++k) gin[arg[k]] += g[k];
          }
          break;
        case LayerKind::avgpool:
          if (need_input_grad) avgpool_backward(L, g, gin);
          break;
        case LayerKind::flatten:
          if (need_input_grad) std::copy(g.values().begin(), g.values().end(), gin.values().begin());
          break;
        case LayerKind::residual_add: {
          if (need_input_grad) gin = g;
          auto& skip = gout[static_cast<std::size_t>(L.skip_index)];
          if (skip.empty()) skip = BasicTensor<T>(g.shape());
          for (std::size_t k = 0; k < g.size(); ++k) skip[k] += g[k];
          break;
        }
      }
      if (need_input_grad) {
        auto& prev = gout[ii - 1];
        if (prev.empty()) {
          prev = std::move(gin);
        } else {
          for (std::size_t k = 0; k < prev.size(); ++k) prev[k] += gin[k];
        }
      }
      g = BasicTensor<T>();
    }
  }

  /// 1 where a raw parameter participates in the forward pass, 0 otherwise.
  ParamSet<T> trainable_mask(const ParamSet<T>& params) const {
    ParamSet<T> mask;
    for (const auto& L : layers_) {
      if (!L.layer->has_params()) continue;
      const auto& p = params.at(L.layer->id);
      LayerParams<T> m{BasicTensor<T>(p.weight.shape()), BasicTensor<T>(p.bias.shape())};
      const std::size_t per_out = p.weight.size() / p.bias.size();
      const std::size_t kk = L.layer->kind == LayerKind::conv
                                 ? static_cast<std::size_t>(L.layer->kernel * L.layer->kernel)
                                 : 1;
      for (int o : L.kept_out) {
        m.bias[static_cast<std::size_t>(o)] = T{1};
        for (int c : L.active_in) {
          for (std::size_t k = 0; k < kk; ++k) {
            m.weight[static_cast<std::size_t>(o) * per_out + static_cast<std::size_t>(c) * kk + k] = T{1};
          }
        }
      }
      mask[L.layer->id] = std::move(m);
    }
    return mask;
  }

  /// ReLU on/off pattern and max-pool winners of the last forward pass.
  std::vector<std::size_t> switch_signature(const BasicTensor<T>& input, const Trace<T>& trace) const {
    std::vector<std::size_t> sig;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto kind = layers_[i].layer->kind;
      if (kind == LayerKind::relu) {
        const BasicTensor<T>& x = i == 0 ? input : trace.outputs[i - 1];
        for (std::size_t k = 0; k < x.size(); ++k) sig.push_back(x[k] > T{0});
      } else if (kind == LayerKind::maxpool) {
        sig.insert(sig.end(), trace.argmax[i].begin(), trace.argmax[i].end());
      }
    }
    return sig;
  }

 private:
  void prepare_weights(PreparedLayer<T>& L, const LayerParams<T>& p, int bits) const {
    const auto& l = *L.layer;
    const std::size_t kk = l.kind == LayerKind::conv ? static_cast<std::size_t>(l.kernel * l.kernel) : 1;
    const std::size_t per_out = p.weight.size() / p.bias.size();
    const auto rows = static_cast<Eigen::Index>(L.kept_out.size());
    const auto cols = static_cast<Eigen::Index>(L.active_in.size() * kk);
    L.weight.resize(rows, cols);
    L.bias.resize(L.kept_out.size());
    for (std::size_t r = 0; r < L.kept_out.size(); ++r) {
      const auto o = static_cast<std::size_t>(L.kept_out[r]);
      L.bias[r] = p.bias[o];
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        const std::size_t base = o * per_out + static_cast<std::size_t>(L.active_in[a]) * kk;
        for (std::size_t k = 0; k < kk; ++k) {
          L.weight(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(a * kk + k)) = p.weight[base + k];
        }
      }
    }
    if (bits >= kFullPrecisionBits) return;
    const double layer_max = L.weight.size() ? static_cast<double>(L.weight.cwiseAbs().maxCoeff()) : 0.0;
    L.weight_deriv.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        const double w = static_cast<double>(L.weight(r, c));
        if (layer_max > 0) {
          const double t = std::tanh(w);
          L.weight_deriv(r, c) = static_cast<T>((1.0 - t * t) / layer_max);
        } else {
          L.weight_deriv(r, c) = T{1};
        }
        L.weight(r, c) = static_cast<T>(quantize_weight_value(w, bits, layer_max));
      }
    }
  }

  Mat<T> im2col(const PreparedLayer<T>& L, const BasicTensor<T>& x) const {
    const auto& l = *L.layer;
    const int N = static_cast<int>(x.dim(0));
    const int H = L.geo.in.h, W = L.geo.in.w, Ho = L.geo.out.h, Wo = L.geo.out.w;
    const int K = l.kernel, S = l.stride, P = l.padding;
    const int plane = Ho * Wo;
    Mat<T> col(static_cast<Eigen::Index>(L.active_in.size()) * K * K, static_cast<Eigen::Index>(N) * plane);
    for (int n = 0; n < N; ++n) {
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        const int c = L.active_in[a];
        const T* src = x.data() + (static_cast<std::size_t>(n) * L.geo.in.c + static_cast<std::size_t>(c)) * H * W;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            const auto row = static_cast<Eigen::Index>((static_cast<int>(a) * K + kh) * K + kw);
            T* dst = col.data() + row * col.cols() + static_cast<Eigen::Index>(n) * plane;
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * S - P + kh;
              T* drow = dst + oh * Wo;
              if (ih < 0 || ih >= H) {
                std::fill(drow, drow + Wo, T{0});
                continue;
              }
              const T* srow = src + ih * W;
              for (int ow = 0; ow < Wo; ++ow) {
                const int iw = ow * S - P + kw;
                drow[ow] = (iw >= 0 && iw < W) ? srow[iw] : T{0};
              }
            }
          }
        }
      }
    }
    return col;
  }

  BasicTensor<T> conv_forward(const PreparedLayer<T>& L, std::size_t N, const Mat<T>& col) const {
    const auto& g = L.geo;
    BasicTensor<T> y({N, static_cast<std::size_t>(g.out.c), static_cast<std::size_t>(g.out.h),
                      static_cast<std::size_t>(g.out.w)});
    if (L.kept_out.empty()) return y;
    const std::size_t plane = static_cast<std::size_t>(g.out.h * g.out.w);
    Mat<T> out;
    if (col.rows() == 0) {
      out = Mat<T>::Zero(L.weight.rows(), col.cols());
    } else {
      out.noalias() = L.weight * col;
    }
    for (std::size_t r = 0; r < L.kept_out.size(); ++r) {
      const auto o = static_cast<std::size_t>(L.kept_out[r]);
      const T b = L.bias[r];
      const T* src = out.data() + static_cast<Eigen::Index>(r) * out.cols();
      for (std::size_t n = 0; n < N; ++n) {
        T* dst = y.data() + (n * static_cast<std::size_t>(g.out.c) + o) * plane;
        const T* s = src + n * plane;
        for (std::size_t q = 0; q < plane; ++q) dst[q] = s[q] + b;
      }
    }
    return y;
  }

  void conv_backward(const PreparedLayer<T>& L, const BasicTensor<T>& x, const Mat<T>& col,
                     const BasicTensor<T>& g, LayerParams<T>& grad, BasicTensor<T>* gin) const {
    const auto& l = *L.layer;
    const auto& geo = L.geo;
    const std::size_t N = x.dim(0);
    const std::size_t plane = static_cast<std::size_t>(geo.out.h * geo.out.w);
    const auto ko = static_cast<Eigen::Index>(L.kept_out.size());
    if (ko == 0) return;
    Mat<T> G(ko, static_cast<Eigen::Index>(N * plane));
    for (Eigen::Index r = 0; r < ko; ++r) {
      const auto o = static_cast<std::size_t>(L.kept_out[static_cast<std::size_t>(r)]);
      T* dst = G.data() + r * G.cols();
      for (std::size_t n = 0; n < N; ++n) {
        const T* src = g.data() + (n * static_cast<std::size_t>(geo.out.c) + o) * plane;
        std::copy_n(src, plane, dst + n * plane);
      }
      grad.bias[o] = G.row(r).sum();
    }
    const std::size_t kk = static_cast<std::size_t>(l.kernel * l.kernel);
    const std::size_t per_out = grad.weight.size() / grad.bias.size();
    if (col.rows() > 0) {
      Mat<T> dw;
      dw.noalias() = G * col.transpose();
      for (Eigen::Index r = 0; r < ko; ++r) {
        const auto o = static_cast<std::size_t>(L.kept_out[static_cast<std::size_t>(r)]);
        for (std::size_t a = 0; a < L.active_in.size(); ++a) {
          const std::size_t base = o * per_out + static_cast<std::size_t>(L.active_in[a]) * kk;
          for (std::size_t k = 0; k < kk; ++k) {
            const auto c = static_cast<Eigen::Index>(a * kk + k);
            T v = dw(r, c);
            if (L.weight_deriv.size()) v *= L.weight_deriv(r, c);
            grad.weight[base + k] = v;
          }
        }
      }
    }
    if (!gin || col.rows() == 0) return;
    Mat<T> dcol;
    dcol.noalias() = L.weight.transpose() * G;
    const int H = geo.in.h, W = geo.in.w, Ho = geo.out.h, Wo = geo.out.w;
    const int K = l.kernel, S = l.stride, P = l.padding;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        const int c = L.active_in[a];
        T* dst = gin->data() + (n * static_cast<std::size_t>(geo.in.c) + static_cast<std::size_t>(c)) * H * W;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            const auto row = static_cast<Eigen::Index>((static_cast<int>(a) * K + kh) * K + kw);
            const T* src = dcol.data() + row * dcol.cols() + static_cast<Eigen::Index>(n * plane);
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * S - P + kh;
              if (ih < 0 || ih >= H) continue;
              for (int ow = 0; ow < Wo; ++ow) {
                const int iw = ow * S - P + kw;
                if (iw >= 0 && iw < W) dst[ih * W + iw] += src[oh * Wo + ow];
              }
            }
          }
        }
      }
    }
  }

  BasicTensor<T> fc_forward(const PreparedLayer<T>& L, const BasicTensor<T>& x) const {
    const std::size_t N = x.dim(0);
    const std::size_t F = x.size() / N;
    const auto& l = *L.layer;
    BasicTensor<T> y({N, static_cast<std::size_t>(l.out_features), 1, 1});
    Mat<T> xc(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(L.active_in.size()));
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        xc(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(a)) = x[n * F + static_cast<std::size_t>(L.active_in[a])];
      }
    }
    Mat<T> out;
    if (xc.cols() == 0) {
      out = Mat<T>::Zero(static_cast<Eigen::Index>(N), L.weight.rows());
    } else {
      out.noalias() = xc * L.weight.transpose();
    }
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t r = 0; r < L.kept_out.size(); ++r) {
        y[n * static_cast<std::size_t>(l.out_features) + static_cast<std::size_t>(L.kept_out[r])] =
            out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(r)) + L.bias[r];
      }
    }
    return y;
  }

  void fc_backward(const PreparedLayer<T>& L, const BasicTensor<T>& x, const BasicTensor<T>& g,
                   LayerParams<T>& grad, BasicTensor<T>* gin) const {
    const std::size_t N = x.dim(0);
    const std::size_t F = x.size() / N;
    const auto& l = *L.layer;
    const auto out_f = static_cast<std::size_t>(l.out_features);
    Mat<T> G(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(L.kept_out.size()));
    Mat<T> xc(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(L.active_in.size()));
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t r = 0; r < L.kept_out.size(); ++r) {
        G(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(r)) = g[n * out_f + static_cast<std::size_t>(L.kept_out[r])];
      }
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        xc(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(a)) = x[n * F + static_cast<std::size_t>(L.active_in[a])];
      }
    }
    Mat<T> dw;
    dw.noalias() = G.transpose() * xc;
    for (std::size_t r = 0; r < L.kept_out.size(); ++r) {
      const auto o = static_cast<std::size_t>(L.kept_out[r]);
      grad.bias[o] = G.col(static_cast<Eigen::Index>(r)).sum();
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        T v = dw(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(a));
        if (L.weight_deriv.size()) v *= L.weight_deriv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(a));
        grad.weight[o * F + static_cast<std::size_t>(L.active_in[a])] = v;
      }
    }
    if (!gin || xc.cols() == 0) return;
    Mat<T> dx;
    dx.noalias() = G * L.weight;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        (*gin)[n * F + static_cast<std::size_t>(L.active_in[a])] =
            dx(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(a));
      }
    }
  }

  BasicTensor<T> maxpool_forward(const PreparedLayer<T>& L, const BasicTensor<T>& x,
                                 std::vector<std::size_t>& argmax) const {
    const auto& g = L.geo;
    const std::size_t N = x.dim(0);
    BasicTensor<T> y({N, static_cast<std::size_t>(g.out.c), static_cast<std::size_t>(g.out.h),
                      static_cast<std::size_t>(g.out.w)});
    argmax.resize(y.size());
    const int K = L.layer->kernel, S = L.layer->stride;
    std::size_t k = 0;
    for (std::size_t n = 0; n < N; ++n) {
      for (int c = 0; c < g.out.c; ++c) {
        const std::size_t base = (n * static_cast<std::size_t>(g.in.c) + static_cast<std::size_t>(c)) *
                                 static_cast<std::size_t>(g.in.h * g.in.w);
        for (int oh = 0; oh < g.out.h; ++oh) {
          for (int ow = 0; ow < g.out.w; ++ow, ++k) {
            std::size_t best = base + static_cast<std::size_t>(oh * S * g.in.w + ow * S);
            for (int kh = 0; kh < K; ++kh) {
              for (int kw = 0; kw < K; ++kw) {
                const std::size_t idx = base + static_cast<std::size_t>((oh * S + kh) * g.in.w + ow * S + kw);
                if (x[idx] > x[best]) best = idx;
              }
            }
            argmax[k] = best;
            y[k] = x[best];
          }
        }
      }
    }
    return y;
  }

  BasicTensor<T> avgpool_forward(const PreparedLayer<T>& L, const BasicTensor<T>& x) const {
    const auto& g = L.geo;
    const std::size_t N = x.dim(0);
    BasicTensor<T> y({N, static_cast<std::size_t>(g.out.c), static_cast<std::size_t>(g.out.h),
                      static_cast<std::size_t>(g.out.w)});
    const int K = L.layer->kernel, S = L.layer->stride;
    const T inv = T{1} / static_cast<T>(K * K);
    std::size_t k = 0;
    for (std::size_t n = 0; n < N; ++n) {
      for (int c = 0; c < g.out.c; ++c) {
        const std::size_t base = (n * static_cast<std::size_t>(g.in.c) + static_cast<std::size_t>(c)) *
                                 static_cast<std::size_t>(g.in.h * g.in.w);
        for (int oh = 0; oh < g.out.h; ++oh) {
          for (int ow = 0; ow < g.out.w; ++ow, ++k) {
            T s{0};
            for (int kh = 0; kh < K; ++kh) {
              for (int kw = 0; kw < K; ++kw) {
                s += x[base + static_cast<std::size_t>((oh * S + kh) * g.in.w + ow * S + kw)];
              }
            }
            y[k] = s * inv;
          }
        }
      }
    }
    return y;
  }

  void avgpool_backward(const PreparedLayer<T>& L, const BasicTensor<T>& g, BasicTensor<T>& gin) const {
    const auto& geo = L.geo;
    const std::size_t N = g.dim(0);
    const int K = L.layer->kernel, S = L.layer->stride;
    const T inv = T{1} / static_cast<T>(K * K);
    std::size_t k = 0;
    for (std::size_t n = 0; n < N; ++n) {
      for (int c = 0; c < geo.out.c; ++c) {
        const std::size_t base = (n * static_cast<std::size_t>(geo.in.c) + static_cast<std::size_t>(c)) *
                                 static_cast<std::size_t>(geo.in.h * geo.in.w);
        for (int oh = 0; oh < geo.out.h; ++oh) {
          for (int ow = 0; ow < geo.out.w; ++ow, ++k) {
            const T v = g[k] * inv;
            for (int kh = 0; kh < K; ++kh) {
              for (int kw = 0; kw < K; ++kw) {
                gin[base + static_cast<std::size_t>((oh * S + kh) * geo.in.w + ow * S + kw)] += v;
              }
            }
          }
        }
      }
    }
  }

  const NetworkSpec& spec_;
  std::vector<PreparedLayer<T>> layers_;
};

/// Mean softmax cross-entropy; fills dlogits when given.
template <typename T>
T cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& labels, BasicTensor<T>* dlogits) {
  const std::size_t N = logits.dim(0);
  const std::size_t C = logits.size() / N;
  if (dlogits) *dlogits = BasicTensor<T>(logits.shape());
  T total{0};
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data() + n * C;
    const T m = *std::max_element(z, z + C);
    T sum{0};
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
    const T log_sum = std::log(sum) + m;
    const auto label = static_cast<std::size_t>(labels[n]);
    total += log_sum - z[label];
    if (dlogits) {
      for (std::size_t c = 0; c < C; ++c) {
        (*dlogits)[n * C + c] = (std::exp(z[c] - log_sum) - (c == label ? T{1} : T{0})) / static_cast<T>(N);
      }
    }
  }
  return total / static_cast<T>(N);
}

void check_batch(const NetworkSpec& spec, const std::vector<std::size_t>& shape) {
  const auto& in = spec.input_shape;
  if (shape.size() != 4 || shape[0] == 0 || shape[1] != static_cast<std::size_t>(in.c) ||
      shape[2] != static_cast<std::size_t>(in.h) || shape[3] != static_cast<std::size_t>(in.w)) {
    throw ValidationError("batch shape " + shape_string(shape) + " does not match input " +
                          std::to_string(in.c) + "x" + std::to_string(in.h) + "x" + std::to_string(in.w));
  }
}

void check_labels(const NetworkSpec& spec, const Dataset& data) {
  if (data.size() == 0) throw ValidationError("dataset is empty");
  check_batch(spec, data.images.shape());
  const int classes = spec.num_classes();
  for (int l : data.labels) {
    if (l < 0 || l >= classes) throw ValidationError("label " + std::to_string(l) + " outside [0, classes)");
  }
}

}  // namespace

ForwardResult forward(const NetworkSpec& spec, const ModelState& state, const Tensor& batch,
                      const CompressionPlan* plan, bool capture) {
  check_batch(spec, batch.shape());
  check_state(spec, state);
  Executor<float> exec(spec, state.params, plan, state.activation_max);
  Trace<float> trace;
  exec.forward(batch, trace, false);
  ForwardResult r;
  r.logits = Tensor({batch.dim(0), static_cast<std::size_t>(spec.num_classes())},
                    std::vector<float>(trace.outputs.back().values().begin(), trace.outputs.back().values().end()));
  if (capture) {
    for (int id : spec.prunable_ids()) {
      r.feature_maps[id] = trace.outputs[static_cast<std::size_t>(spec.index_of(activation_site(spec, id)))];
    }
  }
  return r;
}

template <typename T>
T loss_and_gradient(const NetworkSpec& spec, const ParamSet<T>& params,
                    const std::map<int, float>& activation_max, const BasicTensor<T>& images,
                    const std::vector<int>& labels, const CompressionPlan* plan, ParamSet<T>* gradient) {
  Executor<T> exec(spec, params, plan, activation_max);
  Trace<T> trace;
  exec.forward(images, trace, gradient != nullptr);
  BasicTensor<T> dlogits;
  const T loss = cross_entropy(trace.outputs.back(), labels, gradient ? &dlogits : nullptr);
  if (gradient) exec.backward(images, trace, dlogits, params, *gradient);
  return loss;
}

template float loss_and_gradient<float>(const NetworkSpec&, const ParamSet<float>&,
                                        const std::map<int, float>&, const BasicTensor<float>&,
                                        const std::vector<int>&, const CompressionPlan*, ParamSet<float>*);
template double loss_and_gradient<double>(const NetworkSpec&, const ParamSet<double>&,
                                          const std::map<int, float>&, const BasicTensor<double>&,
                                          const std::vector<int>&, const CompressionPlan*, ParamSet<double>*);

void validate(const FineTuneConfig& c) {
  if (!(c.learning_rate > 0)) throw ValidationError("learning rate must be positive");
  if (c.steps < 1) throw ValidationError("fine-tune steps must be >= 1");
  if (c.batch_size < 1) throw ValidationError("batch size must be >= 1");
  if (c.weight_decay < 0) throw ValidationError("weight decay must be nonnegative");
  if (!(c.momentum >= 0 && c.momentum < 1)) throw ValidationError("momentum must lie in [0, 1)");
  double prev = 0;
  for (const auto& [f, m] : c.lr_schedule) {
    if (!(f > prev && f <= 1.0)) throw ValidationError("lr schedule fractions must increase within (0, 1]");
    if (!(m > 0)) throw ValidationError("lr schedule multipliers must be positive");
    prev = f;
  }
}

FineTuneConfig finetune_from_json(const nlohmann::json& j, const FineTuneConfig& d) {
  FineTuneConfig c = d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.momentum = j.value("momentum", d.momentum);
  c.nesterov = j.value("nesterov", d.nesterov);
  if (j.contains("lr_schedule")) {
    c.lr_schedule = j.at("lr_schedule").get<std::vector<std::pair<double, double>>>();
  }
  c.seed = j.value("seed", d.seed);
  validate(c);
  return c;
}

nlohmann::json finetune_to_json(const FineTuneConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"steps", c.steps},       {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay},   {"momentum", c.momentum}, {"nesterov", c.nesterov},
          {"lr_schedule", c.lr_schedule},     {"seed", c.seed}};
}

ModelState finetune(const NetworkSpec& spec, const ModelState& state, const Dataset& data,
                    const FineTuneConfig& config, const CompressionPlan* plan) {
  validate(config);
  check_labels(spec, data);
  check_state(spec, state);

  ModelState out = state;
  auto& params = out.params;
  const ParamSet<float> mask =
      Executor<float>(spec, params, plan, state.activation_max, false).trainable_mask(params);
  ParamSet<float> velocity;
  for (const auto& [id, p] : params) {
    velocity[id] = {Tensor(p.weight.shape()), Tensor(p.bias.shape())};
  }

  const auto& s = data.images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  Tensor images({batch, s[1], s[2], s[3]});
  std::vector<int> labels(batch);
  ParamSet<float> grad;
  for (int step = 0; step < config.steps; ++step) {
    for (std::size_t k = 0; k < batch; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      std::copy_n(data.images.data() + i * per, per, images.data() + k * per);
      labels[k] = data.labels[i];
    }
    const float loss = loss_and_gradient<float>(spec, params, out.activation_max, images, labels, plan, &grad);
    if (!std::isfinite(loss)) {
      throw NumericError("loss became non-finite at fine-tune step " + std::to_string(step), step);
    }
    double lr = config.learning_rate;
    for (const auto& [f, m] : config.lr_schedule) {
      if (step >= f * config.steps) lr *= m;
    }
    const auto lr_f = static_cast<float>(lr);
    const auto mu = static_cast<float>(config.momentum);
    const auto wd = static_cast<float>(config.weight_decay);
    for (auto& [id, p] : params) {
      auto update = [&](Tensor& w, const Tensor& g, Tensor& v, const Tensor& m) {
        for (std::size_t k = 0; k < w.size(); ++k) {
          if (m[k] == 0.0f) continue;
          const float d = g[k] + wd * w[k];
          v[k] = mu * v[k] + d;
          w[k] -= lr_f * (config.nesterov ? d + mu * v[k] : v[k]);
        }
      };
      update(p.weight, grad.at(id).weight, velocity.at(id).weight, mask.at(id).weight);
      update(p.bias, grad.at(id).bias, velocity.at(id).bias, mask.at(id).bias);
    }
  }
  for (const auto& [id, p] : params) {
    if (!p.weight.all_finite() || !p.bias.all_finite()) {
      throw NumericError("parameters of layer " + std::to_string(id) + " became non-finite",
                         config.steps - 1);
    }
  }
  return out;
}

double evaluate(const NetworkSpec& spec, const ModelState& state, const Dataset& data,
                const CompressionPlan* plan) {
  check_labels(spec, data);
  check_state(spec, state);
  Executor<float> exec(spec, state.params, plan, state.activation_max);
  const std::size_t chunk = 128;
  std::size_t correct = 0;
  Trace<float> trace;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const Dataset part = data.slice(begin, end);
    exec.forward(part.images, trace, false);
    const auto& logits = trace.outputs.back();
    const std::size_t C = logits.size() / part.size();
    for (std::size_t n = 0; n < part.size(); ++n) {
      const float* z = logits.data() + n * C;
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c) {
        if (z[c] > z[best]) best = c;
      }
      if (static_cast<int>(best) == part.labels[n]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

ModelState calibrate_activations(const NetworkSpec& spec, const ModelState& state,
                                 const Dataset& data, const CompressionPlan& plan,
                                 std::size_t max_samples) {
  check_labels(spec, data);
  check_state(spec, state);
  Executor<float> exec(spec, state.params, &plan, state.activation_max, false);
  ModelState out = state;
  std::map<int, std::size_t> sites;
  for (const auto& [id, lp] : plan.layers) {
    if (!lp.exempt && lp.n_a < kFullPrecisionBits) {
      sites[id] = static_cast<std::size_t>(spec.index_of(activation_site(spec, id)));
    }
  }
  if (sites.empty()) return out;
  std::map<int, float> maxima;
  const std::size_t n = std::min(max_samples, data.size());
  Trace<float> trace;
  for (std::size_t begin = 0; begin < n; begin += 128) {
    const Dataset part = data.slice(begin, std::min(n, begin + 128));
    exec.forward(part.images, trace, false);
    for (const auto& [id, idx] : sites) {
      float& m = maxima[id];
      for (float v : trace.outputs[idx].values()) m = std::max(m, v);
    }
  }
  for (const auto& [id, m] : maxima) out.activation_max[id] = m > 0 ? m : 1.0f;
  return out;
}

GradCheckReport gradient_check(const NetworkSpec& spec, const ModelState& state,
                               const Dataset& batch, double tolerance, const GradCheckOptions& options) {
  check_labels(spec, batch);
  check_state(spec, state);
  ParamSet<double> params = cast_params<double>(state.params);
  const TensorD images = batch.images.cast<double>();
  ParamSet<double> analytic;
  loss_and_gradient<double>(spec, params, state.activation_max, images, batch.labels, options.plan, &analytic);
  if (options.tamper) options.tamper(analytic);

  const ParamSet<double> mask =
      Executor<double>(spec, params, options.plan, state.activation_max).trainable_mask(params);
  struct Slot {
    int layer;
    bool is_bias;
    std::size_t index;
  };
  std::vector<Slot> slots;
  for (const auto& [id, m] : mask) {
    for (std::size_t k = 0; k < m.weight.size(); ++k) {
      if (m.weight[k] != 0) slots.push_back({id, false, k});
    }
    for (std::size_t k = 0; k < m.bias.size(); ++k) {
      if (m.bias[k] != 0) slots.push_back({id, true, k});
    }
  }
  std::mt19937_64 rng(options.seed);
  std::shuffle(slots.begin(), slots.end(), rng);

  auto evaluate_at = [&](ParamSet<double>& p, std::vector<std::size_t>& sig) {
    Executor<double> exec(spec, p, options.plan, state.activation_max);
    Trace<double> trace;
    exec.forward(images, trace, false);
    sig = exec.switch_signature(images, trace);
    return cross_entropy(trace.outputs.back(), batch.labels, static_cast<TensorD*>(nullptr));
  };

  GradCheckReport report;
  std::vector<std::size_t> sig_plus, sig_minus;
  for (const auto& s : slots) {
    if (report.checked >= options.max_params) break;
    auto& target = s.is_bias ? params.at(s.layer).bias : params.at(s.layer).weight;
    const double original = target[s.index];
    target[s.index] = original + options.step;
    const double up = evaluate_at(params, sig_plus);
    target[s.index] = original - options.step;
    const double down = evaluate_at(params, sig_minus);
    target[s.index] = original;
    if (sig_plus != sig_minus) {
      ++report.skipped;
      continue;
    }
    const double fd = (up - down) / (2 * options.step);
    const auto& g = s.is_bias ? analytic.at(s.layer).bias : analytic.at(s.layer).weight;
    const double a = g[s.index];
    const double denom = std::max({std::abs(a), std::abs(fd), 1e-7});
    report.max_relative_error = std::max(report.max_relative_error, std::abs(a - fd) / denom);
    ++report.checked;
  }
  report.passed = report.checked > 0 && report.max_relative_error < tolerance;
  return report;
}

ShrunkModel shrink(const NetworkSpec& spec, const ModelState& state, const CompressionPlan& plan) {
  check_state(spec, state);
  check_plan(spec, plan);
  Executor<float> exec(spec, state.params, &plan, state.activation_max, false);
  ShrunkModel out;
  out.spec = spec;
  out.spec.name = spec.name + "_shrunk";
  out.state.rng_seed = state.rng_seed;
  out.state.activation_max = state.activation_max;
  const auto& prepared = exec.layers();
  int channels = spec.input_shape.c;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    auto& l = out.spec.layers[i];
    const auto& L = prepared[i];
    if (!l.has_params()) {
      if (l.kind == LayerKind::flatten) channels = channels * L.geo.in.h * L.geo.in.w;
      continue;
    }
    const auto& p = state.params.at(l.id);
    const std::size_t kk = l.kind == LayerKind::conv ? static_cast<std::size_t>(l.kernel * l.kernel) : 1;
    const std::size_t per_out = p.weight.size() / p.bias.size();
    LayerParams<float> np;
    std::vector<std::size_t> wshape = p.weight.shape();
    wshape[0] = L.kept_out.size();
    wshape[1] = L.active_in.size();
    np.weight = Tensor(wshape);
    np.bias = Tensor({L.kept_out.size()});
    for (std::size_t r = 0; r < L.kept_out.size(); ++r) {
      const auto o = static_cast<std::size_t>(L.kept_out[r]);
      np.bias[r] = p.bias[o];
      for (std::size_t a = 0; a < L.active_in.size(); ++a) {
        for (std::size_t k = 0; k < kk; ++k) {
          np.weight[(r * L.active_in.size() + a) * kk + k] =
              p.weight[o * per_out + static_cast<std::size_t>(L.active_in[a]) * kk + k];
        }
      }
    }
    if (l.kind == LayerKind::conv) {
      l.in_channels = static_cast<int>(L.active_in.size());
      l.out_channels = static_cast<int>(L.kept_out.size());
    } else {
      l.in_features = static_cast<int>(L.active_in.size());
      l.out_features = static_cast<int>(L.kept_out.size());
    }
    channels = static_cast<int>(L.kept_out.size());
    out.state.params[l.id] = std::move(np);
  }
  (void)channels;
  validate(out.spec);
  return out;
}

}  // namespace picpq
