#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flashsim/rng.hpp"
#include "flashsim/tensor.hpp"

namespace flashsim {

enum class Split { kTrain, kTest };

/// Images (N, C, H, W) and their class labels.
struct Dataset {
  Tensor images;
  std::vector<std::int32_t> labels;
  std::size_t num_classes = 0;
  Split split = Split::kTrain;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_numel() const { return images.size() / labels.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  /// Per-class sample counts.
  std::vector<std::size_t> class_histogram() const;
};

/// Gathers the listed samples into a contiguous batch.
struct Batch {
  Tensor images;
  std::vector<std::int32_t> labels;
};
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Reads an IDX image/label file pair as distributed for MNIST. Pixel bytes
/// are scaled by 1/255. Paths ending in ".gz" are decompressed transparently.
/// Throws FormatError on bad magic, inconsistent counts or truncation.
Dataset load_mnist_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                       Split split = Split::kTrain);

/// Loads `train-*` or `t10k-*` files from a directory, with or without ".gz".
Dataset load_mnist_dir(const std::filesystem::path& dir, Split split);

/// Writes an IDX pair (pixels quantized back to bytes as round(255 * v)).
void write_mnist_idx(const Dataset& data, const std::filesystem::path& image_path,
                     const std::filesystem::path& label_path);

/// Gaussian blobs (unit variance) around orthogonal class means of length
/// `separation`; samples are shaped (1, 1, dim). Throws ConfigError when
/// per_class == 0 or separation <= 0.
Dataset synth_dataset(std::size_t num_classes, std::size_t per_class, std::size_t dim, double separation, Rng& rng,
                      Split split = Split::kTrain);

/// FNV-1a over labels and raw image bytes, for run manifests.
std::uint64_t dataset_checksum(const Dataset& data);

/// Per-client index lists into a dataset.
struct Partition {
  std::vector<std::vector<std::size_t>> clients;
  /// Samples that had to be taken from a substitute class because the drawn
  /// class ran out.
  std::size_t reassigned = 0;

  std::size_t client_count() const noexcept { return clients.size(); }
};

/// Label-based Dirichlet (LDA) partition. Each client draws class
/// proportions q ~ Dir(alpha * C * p) where p is the class distribution of
/// the samples not yet assigned (symmetric Dir(alpha) for balanced labels),
/// then fills floor(N / C_N) samples without replacement; leftovers go
/// round-robin.
/// Each client's index list is sorted ascending.
Partition lda_partition(std::span<const std::int32_t> labels, std::size_t num_classes, std::size_t num_clients,
                        double alpha, Rng& rng);

/// Name of the Dirichlet variant implemented by lda_partition, for manifests.
inline constexpr const char* kLdaVariant = "per-client Dir(alpha * num_classes * remaining_class_share), proportional fill";

}  // namespace flashsim
