#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "flashsim/engine.hpp"
#include "flashsim/model_spec.hpp"

namespace flashsim {

enum class CommMode { kDense, kCsr, kBitmap, kValueOnly };

std::string to_string(CommMode mode);
/// Accepts "dense", "csr", "bitmap", "value-only" (or "value_only").
CommMode parse_comm_mode(const std::string& name);

/// Payload encoding for one weight tensor. Bit widths must be 8, 16, 32 or 64.
struct CommModel {
  CommMode mode = CommMode::kCsr;
  unsigned value_bits = 32;
  unsigned index_bits = 32;
  unsigned pointer_bits = 32;

  void validate() const;
};

/// Bits to ship one layer with `nnz` live values out of `k`, viewed as a
/// row-major matrix with `rows` rows.
///   dense:      k * v
///   csr:        nnz * (v + i) + (rows + 1) * p
///   bitmap:     nnz * v + k
///   value_only: nnz * v
std::uint64_t layer_comm_bits(std::size_t nnz, std::size_t k, std::size_t rows, const CommModel& comm);

/// Weights of every layer plus dense biases. Without `include_mask` the
/// receiver already knows the positions, so sparse modes cost values only.
/// Dense mode always ships every slot.
std::uint64_t model_comm_bits(const MaskedModel& model, const CommModel& comm, bool include_mask);

/// Multiply-accumulate counts for one training sample through one layer.
struct FlopsBreakdown {
  double f_fwd = 0.0;
  double f_back_in = 0.0;
  double f_back_wt = 0.0;

  double total() const { return f_fwd + f_back_in + f_back_wt; }
  FlopsBreakdown& operator+=(const FlopsBreakdown& o) {
    f_fwd += o.f_fwd;
    f_back_in += o.f_back_in;
    f_back_wt += o.f_back_wt;
    return *this;
  }
};

/// C_i, C_o channels; h x w kernel; H x W input; R x S output.
///   fwd     = d   * C_i * h*w * R*S * C_o
///   back_in = d   * C_i * h*w * H*W * C_o
///   back_wt = s_a * C_i * h*w * H*W * C_o
/// s_a is 1 while the mask is being learned (dense weight gradients) and d
/// otherwise.
FlopsBreakdown layer_train_flops(std::size_t c_in, std::size_t c_out, std::size_t h, std::size_t w, std::size_t H,
                                 std::size_t W, std::size_t R, std::size_t S, double d, bool mask_learning);

/// Same, reading the geometry from a weight layer. Fully connected layers
/// count as a 1x1 conv on a 1x1 map.
FlopsBreakdown layer_train_flops(const WeightLayerInfo& layer, double d, bool mask_learning);

/// Per-sample training cost of a whole model under `mask`.
FlopsBreakdown model_train_flops(const ModelSpec& spec, const SparseMask& mask, bool mask_learning);

/// Warm-up upload of L per-layer densities from each of c_d clients at 32
/// bits apiece.
std::uint64_t stage1_overhead_bits(std::size_t layers, std::size_t warmup_clients);

}  // namespace flashsim
