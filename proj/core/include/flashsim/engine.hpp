#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flashsim/mask.hpp"
#include "flashsim/model_spec.hpp"
#include "flashsim/rng.hpp"
#include "flashsim/tensor.hpp"

namespace flashsim {

/// Weights, biases and the sparse mask of one model. Invariant: every weight
/// whose mask entry is 0 is exactly zero. Biases are dense.
template <typename T>
struct BasicMaskedModel {
  ModelSpec spec;
  std::vector<BasicTensor<T>> weights;
  std::vector<BasicTensor<T>> biases;
  SparseMask mask;

  /// Zero weights and biases with an all-ones mask.
  static BasicMaskedModel zeros(const ModelSpec& spec);

  std::size_t weight_layer_count() const noexcept { return weights.size(); }

  /// Zero every weight outside the mask.
  void apply_mask();
  /// Replace the mask and zero everything it excludes.
  void set_mask(SparseMask m);
  /// True when the mask-zero invariant holds bitwise.
  bool respects_mask() const;

  template <typename U>
  BasicMaskedModel<U> cast() const {
    BasicMaskedModel<U> out{spec, {}, {}, mask};
    for (const auto& w : weights) out.weights.push_back(w.template cast<U>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<U>());
    return out;
  }

  friend bool operator==(const BasicMaskedModel& a, const BasicMaskedModel& b) {
    return a.weights == b.weights && a.biases == b.biases && a.mask == b.mask;
  }
};

using MaskedModel = BasicMaskedModel<float>;
using MaskedModel64 = BasicMaskedModel<double>;

/// Kaiming-uniform fan-in initialization, bound sqrt(6 / fan_in); zero biases;
/// all-ones mask.
MaskedModel init_dense_model(const ModelSpec& spec, Rng& rng);

template <typename T>
struct BasicGradients {
  std::vector<BasicTensor<T>> weights;
  std::vector<BasicTensor<T>> biases;
};

using Gradients = BasicGradients<float>;

/// kDense reports dL/dw at every position, masked ones included (mask learning
/// needs them). kLiveOnly skips the weight-gradient work for masked positions
/// and reports zero there.
enum class WeightGradMode { kDense, kLiveOnly };

template <typename T>
struct LossAndGradients {
  double loss;  // mean softmax cross-entropy over the batch
  std::size_t correct;  // argmax hits, for training accuracy
  BasicGradients<T> grads;
};

/// Logits of shape (batch, num_classes). `batch` is (N, C, H, W) matching the
/// spec's input shape.
template <typename T>
BasicTensor<T> forward(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch);

/// Mean cross-entropy over the batch and gradients for every weight and bias
/// tensor. Throws NumericalError if the loss is not finite.
template <typename T>
LossAndGradients<T> loss_and_backward(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch,
                                      std::span<const std::int32_t> labels,
                                      WeightGradMode mode = WeightGradMode::kDense);

/// Mean cross-entropy without gradients.
template <typename T>
double loss_only(const BasicMaskedModel<T>& model, const BasicTensor<T>& batch,
                 std::span<const std::int32_t> labels);

/// w <- w - lr * g on live weights; masked weights stay exactly zero; biases
/// are always updated.
template <typename T>
void sgd_step(BasicMaskedModel<T>& model, const BasicGradients<T>& grads, T lr);

/// eta_init * (eta_end / eta_init)^(t / T). Returns eta_init when T == 0.
double lr_at_round(std::size_t t, std::size_t total, double eta_init, double eta_end);

}  // namespace flashsim
