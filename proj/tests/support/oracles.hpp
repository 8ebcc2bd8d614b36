// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library's numeric kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <variant>
#include <vector>

#include "flashsim/engine.hpp"
#include "flashsim/mask.hpp"
#include "flashsim/model_spec.hpp"

namespace oracle {

using flashsim::ModelSpec;

/// Activation pattern of one forward pass: ReLU signs and pooling winners,
/// concatenated over layers. Two passes with equal patterns lie on the same
/// smooth piece of the loss.
struct Pattern {
  std::vector<std::uint8_t> relu;
  std::vector<std::uint32_t> pool;
  bool operator==(const Pattern&) const = default;
};

/// Naive loops over the layer list: valid cross-correlation with [out, in,
/// kh, kw] weights, 2x2/2 max pooling (first maximum wins), [out, in] dense
/// layers. Weights are taken as given; callers zero masked entries.
inline std::vector<double> forward(const ModelSpec& spec, const std::vector<std::vector<double>>& w,
                                   const std::vector<std::vector<double>>& b, const std::vector<double>& input,
                                   std::size_t batch, Pattern* pattern = nullptr) {
  std::vector<double> x = input;
  auto shape = spec.input_shape();
  std::size_t wl = 0;
  for (std::size_t li = 0; li < spec.layers().size(); ++li) {
    const auto& layer = spec.layers()[li];
    const auto out_shape = spec.output_shape(li);
    const std::size_t in_sz = shape[0] * shape[1] * shape[2];
    const std::size_t out_sz = out_shape[0] * out_shape[1] * out_shape[2];
    std::vector<double> y(batch * out_sz, 0.0);
    if (const auto* c = std::get_if<flashsim::Conv2d>(&layer)) {
      const std::size_t H = shape[1], W = shape[2], R = out_shape[1], S = out_shape[2];
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < c->out_channels; ++o)
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t s = 0; s < S; ++s) {
              double acc = b[wl][o];
              for (std::size_t i = 0; i < c->in_channels; ++i)
                for (std::size_t u = 0; u < c->kernel_h; ++u)
                  for (std::size_t v = 0; v < c->kernel_w; ++v) {
                    const double wv = w[wl][((o * c->in_channels + i) * c->kernel_h + u) * c->kernel_w + v];
                    acc += wv * x[n * in_sz + (i * H + r + u) * W + s + v];
                  }
              y[n * out_sz + (o * R + r) * S + s] = acc;
            }
      ++wl;
    } else if (const auto* f = std::get_if<flashsim::FullyConnected>(&layer)) {
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t o = 0; o < f->out_features; ++o) {
          double acc = b[wl][o];
          for (std::size_t i = 0; i < f->in_features; ++i) acc += w[wl][o * f->in_features + i] * x[n * in_sz + i];
          y[n * out_sz + o] = acc;
        }
      ++wl;
    } else if (std::holds_alternative<flashsim::Relu>(layer)) {
      for (std::size_t k = 0; k < y.size(); ++k) {
        y[k] = std::max(0.0, x[k]);
        if (pattern) pattern->relu.push_back(x[k] > 0.0);
      }
    } else if (std::holds_alternative<flashsim::MaxPool2x2>(layer)) {
      const std::size_t C = shape[0], H = shape[1], W = shape[2], R = out_shape[1], S = out_shape[2];
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t s = 0; s < S; ++s) {
              std::uint32_t best = 0;
              double bv = -INFINITY;
              for (std::uint32_t q = 0; q < 4; ++q) {
                const double v = x[n * in_sz + (c * H + 2 * r + q / 2) * W + 2 * s + q % 2];
                if (v > bv) {
                  bv = v;
                  best = q;
                }
              }
              y[n * out_sz + (c * R + r) * S + s] = bv;
              if (pattern) pattern->pool.push_back(best);
            }
    } else {
      y = x;  // flatten
    }
    x = std::move(y);
    shape = out_shape;
  }
  return x;
}

/// Mean softmax cross-entropy, log-sum-exp with max shift.
inline double xent(const std::vector<double>& logits, const std::vector<std::int32_t>& labels, std::size_t classes) {
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const double* z = logits.data() + n * classes;
    const double m = *std::max_element(z, z + classes);
    double s = 0.0;
    for (std::size_t k = 0; k < classes; ++k) s += std::exp(z[k] - m);
    total += m + std::log(s) - z[labels[n]];
  }
  return total / static_cast<double>(labels.size());
}

/// Jaccard distance by explicit set construction.
inline double jaccard(const flashsim::SparseMask& a, const flashsim::SparseMask& b) {
  std::set<std::pair<std::size_t, std::size_t>> sa, sb, un, in;
  for (std::size_t l = 0; l < a.layer_count(); ++l)
    for (std::size_t i = 0; i < a.layer_size(l); ++i) {
      if (a.layer(l)[i]) sa.insert({l, i});
      if (b.layer(l)[i]) sb.insert({l, i});
    }
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(un, un.begin()));
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(in, in.begin()));
  if (un.empty()) return 0.0;
  return 1.0 - static_cast<double>(in.size()) / static_cast<double>(un.size());
}

/// Density re-calibration by search over the clamped set: the clamped layers
/// are always a prefix of the layers sorted by d_hat descending, so try every
/// prefix and keep the first self-consistent one. Returns an empty vector
/// when no prefix is consistent (infeasible target).
inline std::vector<double> recalibrate(const std::vector<double>& d_hat, const std::vector<std::size_t>& k, double d) {
  const std::size_t L = d_hat.size();
  double K = 0.0;
  for (auto v : k) K += static_cast<double>(v);
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return d_hat[a] > d_hat[b]; });
  for (std::size_t j = 0; j <= L; ++j) {
    double fixed = 0.0, mass = 0.0;
    for (std::size_t q = 0; q < L; ++q) {
      const auto l = order[q];
      if (q < j) fixed += static_cast<double>(k[l]);
      else mass += d_hat[l] * static_cast<double>(k[l]);
    }
    const double rem = d * K - fixed;
    if (mass <= 0.0) {
      if (rem <= 1e-9 * K) {
        std::vector<double> out(L, 0.0);
        for (std::size_t q = 0; q < j; ++q) out[order[q]] = 1.0;
        return out;
      }
      continue;
    }
    const double rf = rem / mass;
    bool ok = rem >= -1e-9 * K;
    for (std::size_t q = j; q < L && ok; ++q) ok = d_hat[order[q]] * rf <= 1.0;
    for (std::size_t q = 0; q < j && ok; ++q) ok = d_hat[order[q]] * rf > 1.0 - 1e-12;
    if (!ok) continue;
    std::vector<double> out(L);
    for (std::size_t q = 0; q < L; ++q) out[order[q]] = q < j ? 1.0 : d_hat[order[q]] * rf;
    return out;
  }
  return {};
}

/// Random small architecture with at most `max_params` weights+biases:
/// either an MLP or a conv net on a tiny image.
inline ModelSpec random_spec(std::mt19937_64& rng, std::size_t max_params = 5000) {
  using namespace flashsim;
  for (;;) {
    std::uniform_int_distribution<int> coin(0, 2);
    std::vector<LayerDesc> layers;
    SampleShape input;
    const std::size_t classes = 2 + rng() % 5;
    if (coin(rng) == 0) {
      const std::size_t dim = 3 + rng() % 20, hidden = 2 + rng() % 24;
      input = {1, 1, dim};
      layers = {Flatten{}, FullyConnected{dim, hidden}, Relu{}};
      std::size_t prev = hidden;
      if (rng() % 2) {
        const std::size_t h2 = 2 + rng() % 16;
        layers.push_back(FullyConnected{prev, h2});
        layers.push_back(Relu{});
        prev = h2;
      }
      layers.push_back(FullyConnected{prev, classes});
    } else {
      const std::size_t cin = 1 + rng() % 2, side = 6 + rng() % 5, k = 2 + rng() % 2, c1 = 2 + rng() % 4;
      input = {cin, side, side};
      layers = {Conv2d{cin, c1, k, k}, Relu{}};
      std::size_t c = c1, s = side - k + 1;
      if (rng() % 2) {
        layers.push_back(MaxPool2x2{});
        s /= 2;
      }
      if (s >= 3 && rng() % 2) {
        const std::size_t c2 = 2 + rng() % 4;
        layers.push_back(Conv2d{c, c2, 2, 2});
        layers.push_back(Relu{});
        c = c2;
        s -= 1;
      }
      layers.push_back(Flatten{});
      const std::size_t hidden = 4 + rng() % 12;
      layers.push_back(FullyConnected{c * s * s, hidden});
      layers.push_back(Relu{});
      layers.push_back(FullyConnected{hidden, classes});
    }
    ModelSpec spec(input, layers, classes);
    if (spec.total_weights() + spec.total_biases() <= max_params) return spec;
  }
}

}  // namespace oracle
