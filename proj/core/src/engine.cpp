#include "flashsim/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>
#include <variant>

#include "flashsim/error.hpp"

namespace flashsim {

template <typename T>
BasicMaskedModel<T> BasicMaskedModel<T>::zeros(const ModelSpec& spec) {
  BasicMaskedModel<T> m{spec, {}, {}, SparseMask::ones(spec)};
  for (const auto& info : spec.weight_layers()) {
    m.weights.emplace_back(info.weight_shape(), T{0});
    m.biases.emplace_back(Shape{info.out_channels}, T{0});
  }
  return m;
}

template <typename T>
void BasicMaskedModel<T>::apply_mask() {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto w = weights[l].data();
    auto m = mask.layer(l);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!m[i]) w[i] = T{0};
    }
  }
}

template <typename T>
void BasicMaskedModel<T>::set_mask(SparseMask m) {
  if (m.layer_count() != weights.size()) throw ConfigError("mask layer count does not match model");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (m.layer_size(l) != weights[l].size()) throw ConfigError("mask layer size does not match weights");
  }
  mask = std::move(m);
  apply_mask();
}

template <typename T>
bool BasicMaskedModel<T>::respects_mask() const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto w = weights[l].data();
    auto m = mask.layer(l);
    for (std::size_t i = 0; i < w.size(); ++i) {
      // Bitwise zero: -0.0 counts as a violation.
      if (!m[i] && !(w[i] == T{0} && !std::signbit(w[i]))) return false;
    }
  }
  return true;
}

MaskedModel init_dense_model(const ModelSpec& spec, Rng& rng) {
  auto model = MaskedModel::zeros(spec);
  for (std::size_t l = 0; l < spec.weight_layer_count(); ++l) {
    const auto& info = spec.weight_layers()[l];
    const std::size_t fan_in = info.in_channels * info.kernel_h * info.kernel_w;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : model.weights[l].data()) w = static_cast<float>(dist(rng));
  }
  return model;
}

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::size_t numel(const SampleShape& s) { return s[0] * s[1] * s[2]; }

/// Live weights of one output channel: input-plane offset and value.
template <typename T>
struct LiveTap {
  std::size_t offset;
  std::size_t weight_index;
  T value;
};

template <typename T>
std::vector<std::vector<LiveTap<T>>> conv_taps(const WeightLayerInfo& info, const BasicTensor<T>& w,
                                               std::span<const std::uint8_t> mask) {
  const std::size_t kh = info.kernel_h, kw = info.kernel_w, ci_n = info.in_channels;
  const std::size_t H = info.in_h, W = info.in_w;
  std::vector<std::vector<LiveTap<T>>> taps(info.out_channels);
  std::size_t idx = 0;
  for (std::size_t co = 0; co < info.out_channels; ++co) {
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx, ++idx) {
          if (mask[idx]) taps[co].push_back({ci * H * W + ky * W + kx, idx, w[idx]});
        }
      }
    }
  }
  return taps;
}

/// Cached activations of one forward pass.
template <typename T>
struct Trace {
  std::size_t batch = 0;
  // acts[0] is the input; acts[i + 1] the output of layer i.
  std::vector<std::vector<T>> acts;
  // Per layer: flat input index of each pooled maximum (pool layers only).
  std::vector<std::vector<std::uint32_t>> argmax;
  // Per weight layer: live taps (conv layers only).
  std::vector<std::vector<std::vector<LiveTap<T>>>> taps;
};

template <typename T>
void check_input(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch) {
  const auto& in = model.spec.input_shape();
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw ConfigError("batch shape " + shape_to_string(batch.shape()) + " does not match model input (N, " +
                      std::to_string(in[0]) + ", " + std::to_string(in[1]) + ", " + std::to_string(in[2]) + ")");
  }
  if (model.weights.size() != model.spec.weight_layer_count() || model.biases.size() != model.weights.size() ||
      model.mask.layer_count() != model.weights.size()) {
    throw ConfigError("model tensors do not match its spec");
  }
}

template <typename T>
Trace<T> run_forward(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch) {
  check_input(model, batch);
  const auto& spec = model.spec;
  const auto& layers = spec.layers();
  Trace<T> tr;
  tr.batch = batch.dim(0);
  const std::size_t N = tr.batch;
  tr.acts.reserve(layers.size() + 1);
  tr.acts.emplace_back(batch.data().begin(), batch.data().end());
  tr.argmax.resize(layers.size());
  tr.taps.resize(spec.weight_layer_count());

  SampleShape cur = spec.input_shape();
  std::size_t wl = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::vector<T>& x = tr.acts.back();
    const SampleShape out_shape = spec.output_shape(i);
    std::vector<T> y(N * numel(out_shape));
    std::visit(
        Overloaded{
            [&](const Conv2d&) {
              const auto& info = spec.weight_layers()[wl];
              tr.taps[wl] = conv_taps(info, model.weights[wl], model.mask.layer(wl));
              const auto& taps = tr.taps[wl];
              const T* bias = model.biases[wl].raw();
              const std::size_t in_sz = numel(cur), out_sz = numel(out_shape);
              const std::size_t R = info.out_h, S = info.out_w, W = info.in_w;
              for (std::size_t n = 0; n < N; ++n) {
                const T* in = x.data() + n * in_sz;
                T* out = y.data() + n * out_sz;
                for (std::size_t co = 0; co < info.out_channels; ++co) {
                  T* o = out + co * R * S;
                  std::fill(o, o + R * S, bias[co]);
                  for (const auto& tap : taps[co]) {
                    const T wv = tap.value;
                    const T* src = in + tap.offset;
                    for (std::size_t r = 0; r < R; ++r) {
                      const T* s = src + r * W;
                      T* d = o + r * S;
                      for (std::size_t c = 0; c < S; ++c) d[c] += wv * s[c];
                    }
                  }
                }
              }
              ++wl;
            },
            [&](const MaxPool2x2&) {
              const std::size_t C = cur[0], H = cur[1], W = cur[2];
              const std::size_t R = out_shape[1], S = out_shape[2];
              auto& am = tr.argmax[i];
              am.resize(y.size());
              for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                  const std::size_t in_base = (n * C + c) * H * W;
                  const std::size_t out_base = (n * C + c) * R * S;
                  for (std::size_t r = 0; r < R; ++r) {
                    for (std::size_t s = 0; s < S; ++s) {
                      std::size_t best = in_base + (2 * r) * W + 2 * s;
                      T bv = x[best];
                      for (std::size_t dy = 0; dy < 2; ++dy) {
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                          const std::size_t j = in_base + (2 * r + dy) * W + 2 * s + dx;
                          if (x[j] > bv) {
                            bv = x[j];
                            best = j;
                          }
                        }
                      }
                      y[out_base + r * S + s] = bv;
                      am[out_base + r * S + s] = static_cast<std::uint32_t>(best);
                    }
                  }
                }
              }
            },
            [&](const FullyConnected&) {
              const auto& info = spec.weight_layers()[wl];
              const std::size_t in_f = info.in_channels, out_f = info.out_channels;
              const T* w = model.weights[wl].raw();
              const T* b = model.biases[wl].raw();
              for (std::size_t n = 0; n < N; ++n) {
                const T* xn = x.data() + n * in_f;
                T* yn = y.data() + n * out_f;
                for (std::size_t o = 0; o < out_f; ++o) {
                  const T* wo = w + o * in_f;
                  T acc = T{0};
                  for (std::size_t k = 0; k < in_f; ++k) acc += wo[k] * xn[k];
                  yn[o] = acc + b[o];
                }
              }
              ++wl;
            },
            [&](const Relu&) {
              for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[k] > T{0} ? x[k] : T{0};
            },
            [&](const Flatten&) { std::copy(x.begin(), x.end(), y.begin()); },
        },
        layers[i]);
    tr.acts.push_back(std::move(y));
    cur = out_shape;
  }
  return tr;
}

template <typename T>
std::size_t first_nonfinite_layer(const Trace<T>& tr) {
  for (std::size_t i = 1; i < tr.acts.size(); ++i) {
    for (T v : tr.acts[i]) {
      if (!std::isfinite(v)) return i - 1;
    }
  }
  return tr.acts.size() - 1;
}

struct CrossEntropy {
  double loss = 0.0;
  std::size_t correct = 0;
};

/// Mean softmax cross-entropy; optionally writes dL/dlogits into `grad`.
template <typename T>
CrossEntropy softmax_xent(const std::vector<T>& logits, std::size_t N, std::size_t K,
                          std::span<const std::int32_t> labels, std::vector<T>* grad) {
  CrossEntropy ce;
  if (grad) grad->assign(N * K, T{0});
  std::vector<double> p(K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data() + n * K;
    const auto label = static_cast<std::size_t>(labels[n]);
    std::size_t arg = 0;
    double m = static_cast<double>(z[0]);
    for (std::size_t k = 1; k < K; ++k) {
      if (static_cast<double>(z[k]) > m) {
        m = static_cast<double>(z[k]);
        arg = k;
      }
    }
    if (arg == label) ++ce.correct;
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      p[k] = std::exp(static_cast<double>(z[k]) - m);
      sum += p[k];
    }
    ce.loss += (m + std::log(sum)) - static_cast<double>(z[label]);
    if (grad) {
      T* g = grad->data() + n * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double onehot = k == label ? 1.0 : 0.0;
        g[k] = static_cast<T>((p[k] / sum - onehot) / static_cast<double>(N));
      }
    }
  }
  ce.loss /= static_cast<double>(N);
  return ce;
}

template <typename T>
void check_labels(std::span<const std::int32_t> labels, std::size_t N, std::size_t K) {
  if (labels.size() != N) {
    throw ConfigError("label count " + std::to_string(labels.size()) + " does not match batch size " +
                      std::to_string(N));
  }
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> forward(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch) {
  auto tr = run_forward(model, batch);
  return BasicTensor<T>({tr.batch, model.spec.num_classes()}, std::move(tr.acts.back()));
}

template <typename T>
double loss_only(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch,
                 std::span<const std::int32_t> labels) {
  const std::size_t K = model.spec.num_classes();
  check_labels<T>(labels, batch.rank() ? batch.dim(0) : 0, K);
  auto tr = run_forward(model, batch);
  return softmax_xent<T>(tr.acts.back(), tr.batch, K, labels, nullptr).loss;
}

template <typename T>
LossAndGradients<T> loss_and_backward(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch,
                                      std::span<const std::int32_t> labels, WeightGradMode mode) {
  const auto& spec = model.spec;
  const std::size_t K = spec.num_classes();
  check_labels<T>(labels, batch.rank() ? batch.dim(0) : 0, K);
  auto tr = run_forward(model, batch);
  const std::size_t N = tr.batch;

  LossAndGradients<T> out;
  std::vector<T> grad;
  const auto ce = softmax_xent<T>(tr.acts.back(), N, K, labels, &grad);
  out.loss = ce.loss;
  out.correct = ce.correct;
  if (!std::isfinite(out.loss)) {
    const std::size_t layer = first_nonfinite_layer(tr);
    throw NumericalError("non-finite loss (first non-finite output at layer " + std::to_string(layer) + ")", layer);
  }

  for (const auto& info : spec.weight_layers()) {
    out.grads.weights.emplace_back(info.weight_shape(), T{0});
    out.grads.biases.emplace_back(Shape{info.out_channels}, T{0});
  }

  const auto& layers = spec.layers();
  std::size_t wl = spec.weight_layer_count();
  // The first weight layer's input gradient has no consumer.
  const std::size_t first_weight_layer = spec.weight_layers().front().layer_index;

  for (std::size_t ii = layers.size(); ii-- > 0;) {
    const std::vector<T>& x = tr.acts[ii];
    const std::vector<T>& y = tr.acts[ii + 1];
    const SampleShape in_shape = ii == 0 ? spec.input_shape() : spec.output_shape(ii - 1);
    const bool need_input_grad = ii > first_weight_layer;
    std::vector<T> gin;
    if (need_input_grad) gin.assign(x.size(), T{0});

    std::visit(
        Overloaded{
            [&](const Conv2d&) {
              --wl;
              const auto& info = spec.weight_layers()[wl];
              const auto& taps = tr.taps[wl];
              auto mask = model.mask.layer(wl);
              T* gw = out.grads.weights[wl].raw();
              T* gb = out.grads.biases[wl].raw();
              const std::size_t in_sz = numel(in_shape);
              const std::size_t R = info.out_h, S = info.out_w, H = info.in_h, W = info.in_w;
              const std::size_t out_sz = info.out_channels * R * S;
              const std::size_t kh = info.kernel_h, kw = info.kernel_w;
              for (std::size_t n = 0; n < N; ++n) {
                const T* in = x.data() + n * in_sz;
                const T* go = grad.data() + n * out_sz;
                for (std::size_t co = 0; co < info.out_channels; ++co) {
                  const T* g = go + co * R * S;
                  T bsum = T{0};
                  for (std::size_t k = 0; k < R * S; ++k) bsum += g[k];
                  gb[co] += bsum;
                  std::size_t idx = co * info.in_channels * kh * kw;
                  for (std::size_t ci = 0; ci < info.in_channels; ++ci) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                      for (std::size_t kx = 0; kx < kw; ++kx, ++idx) {
                        if (mode == WeightGradMode::kLiveOnly && !mask[idx]) continue;
                        const T* src = in + ci * H * W + ky * W + kx;
                        T acc = T{0};
                        for (std::size_t r = 0; r < R; ++r) {
                          const T* s = src + r * W;
                          const T* gr = g + r * S;
                          for (std::size_t c = 0; c < S; ++c) acc += gr[c] * s[c];
                        }
                        gw[idx] += acc;
                      }
                    }
                  }
                  if (need_input_grad) {
                    T* gi = gin.data() + n * in_sz;
                    for (const auto& tap : taps[co]) {
                      const T wv = tap.value;
                      T* dst = gi + tap.offset;
                      for (std::size_t r = 0; r < R; ++r) {
                        T* d = dst + r * W;
                        const T* gr = g + r * S;
                        for (std::size_t c = 0; c < S; ++c) d[c] += wv * gr[c];
                      }
                    }
                  }
                }
              }
            },
            [&](const MaxPool2x2&) {
              if (!need_input_grad) return;
              const auto& am = tr.argmax[ii];
              for (std::size_t k = 0; k < grad.size(); ++k) gin[am[k]] += grad[k];
            },
            [&](const FullyConnected&) {
              --wl;
              const auto& info = spec.weight_layers()[wl];
              const std::size_t in_f = info.in_channels, out_f = info.out_channels;
              const T* w = model.weights[wl].raw();
              auto mask = model.mask.layer(wl);
              T* gw = out.grads.weights[wl].raw();
              T* gb = out.grads.biases[wl].raw();
              for (std::size_t n = 0; n < N; ++n) {
                const T* xn = x.data() + n * in_f;
                const T* gn = grad.data() + n * out_f;
                for (std::size_t o = 0; o < out_f; ++o) {
                  const T go = gn[o];
                  gb[o] += go;
                  T* gwo = gw + o * in_f;
                  if (mode == WeightGradMode::kLiveOnly) {
                    const std::uint8_t* mo = mask.data() + o * in_f;
                    for (std::size_t k = 0; k < in_f; ++k) {
                      if (mo[k]) gwo[k] += go * xn[k];
                    }
                  } else {
                    for (std::size_t k = 0; k < in_f; ++k) gwo[k] += go * xn[k];
                  }
                  if (need_input_grad) {
                    const T* wo = w + o * in_f;
                    T* gi = gin.data() + n * in_f;
                    for (std::size_t k = 0; k < in_f; ++k) gi[k] += wo[k] * go;
                  }
                }
              }
            },
            [&](const Relu&) {
              if (!need_input_grad) return;
              for (std::size_t k = 0; k < grad.size(); ++k) gin[k] = y[k] > T{0} ? grad[k] : T{0};
            },
            [&](const Flatten&) {
              if (!need_input_grad) return;
              gin = grad;
            },
        },
        layers[ii]);
    if (!need_input_grad) break;
    grad = std::move(gin);
  }
  return out;
}

template <typename T>
void sgd_step(BasicMaskedModel<T>& model, const BasicGradients<T>& grads, T lr) {
  if (grads.weights.size() != model.weights.size() || grads.biases.size() != model.biases.size()) {
    throw ConfigError("gradient layer count does not match model");
  }
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    auto w = model.weights[l].data();
    auto g = grads.weights[l].data();
    auto m = model.mask.layer(l);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = m[i] ? w[i] - lr * g[i] : T{0};
    auto b = model.biases[l].data();
    auto gb = grads.biases[l].data();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= lr * gb[i];
  }
}

double lr_at_round(std::size_t t, std::size_t total, double eta_init, double eta_end) {
  if (total == 0) return eta_init;
  if (!(eta_init >= eta_end && eta_end > 0.0)) {
    throw ConfigError("learning rate schedule needs eta_init >= eta_end > 0");
  }
  if (t > total) throw ConfigError("round index beyond the schedule length");
  if (t == total) return eta_end;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return eta_init * std::pow(eta_end / eta_init, frac);
}

#define FLASHSIM_INSTANTIATE(T)                                                                       \
  template struct BasicMaskedModel<T>;                                                                \
  template BasicTensor<T> forward<T>(const BasicMaskedModel<T>&, const BasicTensor<T>&);              \
  template LossAndGradients<T> loss_and_backward<T>(const BasicMaskedModel<T>&, const BasicTensor<T>&, \
                                                    std::span<const std::int32_t>, WeightGradMode);   \
  template double loss_only<T>(const BasicMaskedModel<T>&, const BasicTensor<T>&,                     \
                               std::span<const std::int32_t>);                                        \
  template void sgd_step<T>(BasicMaskedModel<T>&, const BasicGradients<T>&, T);

FLASHSIM_INSTANTIATE(float)
FLASHSIM_INSTANTIATE(double)

#undef FLASHSIM_INSTANTIATE

}  // namespace flashsim
