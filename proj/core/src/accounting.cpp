#include "flashsim/accounting.hpp"

#include "flashsim/error.hpp"

namespace flashsim {

namespace {

bool valid_width(unsigned b) { return b == 8 || b == 16 || b == 32 || b == 64; }

}  // namespace

std::string to_string(CommMode mode) {
  switch (mode) {
    case CommMode::kDense: return "dense";
    case CommMode::kCsr: return "csr";
    case CommMode::kBitmap: return "bitmap";
    case CommMode::kValueOnly: return "value-only";
  }
  return "unknown";
}

CommMode parse_comm_mode(const std::string& name) {
  if (name == "dense") return CommMode::kDense;
  if (name == "csr") return CommMode::kCsr;
  if (name == "bitmap") return CommMode::kBitmap;
  if (name == "value-only" || name == "value_only") return CommMode::kValueOnly;
  throw ConfigError("unknown comm mode '" + name + "'");
}

void CommModel::validate() const {
  if (!valid_width(value_bits) || !valid_width(index_bits) || !valid_width(pointer_bits)) {
    throw ConfigError("bit widths must be 8, 16, 32 or 64");
  }
}

std::uint64_t layer_comm_bits(std::size_t nnz, std::size_t k, std::size_t rows, const CommModel& comm) {
  comm.validate();
  if (nnz > k) throw ConfigError("layer_comm_bits: nnz exceeds k");
  if (rows == 0) throw ConfigError("layer_comm_bits: rows must be positive");
  const std::uint64_t v = comm.value_bits, i = comm.index_bits, p = comm.pointer_bits;
  switch (comm.mode) {
    case CommMode::kDense: return k * v;
    case CommMode::kCsr: return nnz * (v + i) + (rows + 1) * p;
    case CommMode::kBitmap: return nnz * v + k;
    case CommMode::kValueOnly: return nnz * v;
  }
  return 0;
}

std::uint64_t model_comm_bits(const MaskedModel& model, const CommModel& comm, bool include_mask) {
  CommModel weights_comm = comm;
  if (!include_mask && comm.mode != CommMode::kDense) weights_comm.mode = CommMode::kValueOnly;
  const auto& layers = model.spec.weight_layers();
  std::uint64_t bits = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    bits += layer_comm_bits(model.mask.nnz(l), layers[l].weight_count(), layers[l].rows(), weights_comm);
  }
  return bits + model.spec.total_biases() * static_cast<std::uint64_t>(comm.value_bits);
}

FlopsBreakdown layer_train_flops(std::size_t c_in, std::size_t c_out, std::size_t h, std::size_t w, std::size_t H,
                                 std::size_t W, std::size_t R, std::size_t S, double d, bool mask_learning) {
  if (c_in == 0 || c_out == 0 || h == 0 || w == 0 || H == 0 || W == 0 || R == 0 || S == 0) {
    throw ConfigError("layer_train_flops: dimensions must be positive");
  }
  if (!(d > 0.0 && d <= 1.0)) throw ConfigError("layer_train_flops: density must lie in (0, 1]");
  const double base = static_cast<double>(c_in) * static_cast<double>(h * w) * static_cast<double>(c_out);
  const double s_a = mask_learning ? 1.0 : d;
  FlopsBreakdown f;
  f.f_fwd = d * base * static_cast<double>(R * S);
  f.f_back_in = d * base * static_cast<double>(H * W);
  f.f_back_wt = s_a * base * static_cast<double>(H * W);
  return f;
}

FlopsBreakdown layer_train_flops(const WeightLayerInfo& layer, double d, bool mask_learning) {
  if (layer.kind == WeightLayerInfo::Kind::kFullyConnected) {
    return layer_train_flops(layer.in_channels, layer.out_channels, 1, 1, 1, 1, 1, 1, d, mask_learning);
  }
  return layer_train_flops(layer.in_channels, layer.out_channels, layer.kernel_h, layer.kernel_w, layer.in_h,
                           layer.in_w, layer.out_h, layer.out_w, d, mask_learning);
}

FlopsBreakdown model_train_flops(const ModelSpec& spec, const SparseMask& mask, bool mask_learning) {
  FlopsBreakdown total;
  const auto& layers = spec.weight_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const double d = static_cast<double>(mask.nnz(l)) / static_cast<double>(layers[l].weight_count());
    total += layer_train_flops(layers[l], d, mask_learning);
  }
  return total;
}

std::uint64_t stage1_overhead_bits(std::size_t layers, std::size_t warmup_clients) {
  if (layers == 0 || warmup_clients == 0) throw ConfigError("stage1_overhead_bits: arguments must be positive");
  return static_cast<std::uint64_t>(layers) * warmup_clients * 32;
}

}  // namespace flashsim
