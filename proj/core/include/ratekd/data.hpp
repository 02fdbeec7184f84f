#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ratekd/tensor.hpp"

RATEKD_BEGIN_NAMESPACE

/// Images [N,C,H,W] in [0,1] with integer labels.
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 10;
  std::string split;

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t channels() const { return images.dim(1); }
  std::int64_t height() const { return images.dim(2); }
  std::int64_t width() const { return images.dim(3); }

  /// Rows `indices` as a new dataset.
  Dataset gather(const std::vector<std::int64_t>& indices) const;
  /// Throws ContractError when labels or pixel ranges are invalid.
  void validate() const;
};

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       const std::string& split = "train");
Dataset load_cifar10_bin(const std::vector<std::string>& paths, const std::string& split = "train");

/// Re-encodes one sample as a 3073-byte CIFAR-10 record.
std::vector<std::uint8_t> cifar10_record(const Dataset& d, std::int64_t index);

/// Class-conditional noisy patterns; cheap and learnable.
Dataset make_synthetic(std::int64_t n, int num_classes, int channels, int height, int width,
                       std::uint64_t seed, const std::string& split = "train");

/// Seeded random subset of `n` items (order preserved); returns `d` when n >= size.
Dataset take_subset(const Dataset& d, std::int64_t n, std::uint64_t seed);

// ------------------------------------------------------------ transforms

struct Normalization {
  std::vector<Real> mean{Real(0.1307)};
  std::vector<Real> stddev{Real(0.3081)};

  static Normalization mnist() { return {}; }
  static Normalization cifar10() {
    return {{Real(0.4914), Real(0.4822), Real(0.4465)}, {Real(0.2470), Real(0.2435), Real(0.2616)}};
  }
  static Normalization identity(int channels) {
    return {std::vector<Real>(static_cast<std::size_t>(channels), Real(0)),
            std::vector<Real>(static_cast<std::size_t>(channels), Real(1))};
  }
};

Tensor normalize(const Tensor& images, const Normalization& n);
Tensor denormalize(const Tensor& images, const Normalization& n);

enum class Augment { None, CropFlip };

/// Random 4-pixel reflection-padded crop and horizontal flip, drawn per
/// sample from `seed`.
Tensor augment(const Tensor& images, Augment policy, std::uint64_t seed);
/// Mirrors every image left to right.
Tensor flip_horizontal(const Tensor& images);

enum class Encoding { Direct, Poisson };

/// Time-major stacked inputs [T*N,C,H,W] plus their time average [N,C,H,W].
struct EncodedBatch {
  Tensor stacked;
  Tensor mean;
  int timesteps = 1;

  std::int64_t batch() const { return mean.dim(0); }
};

EncodedBatch encode_direct(const Tensor& images, int timesteps);
/// Bernoulli(pixel) spikes per step; pixels must lie in [0,1].
EncodedBatch encode_rate_poisson(const Tensor& images, int timesteps, std::uint64_t seed);

/// Preprocessing shared by training and evaluation.
struct InputPipeline {
  Normalization norm;
  Encoding encoding = Encoding::Direct;
  Augment augment = Augment::None;

  /// Normalized (and optionally augmented) ANN input.
  Tensor ann_input(const Tensor& raw, bool train, std::uint64_t seed) const;
  /// Encoded SNN input. Poisson spikes are drawn from raw intensities.
  EncodedBatch snn_input(const Tensor& raw, int timesteps, bool train, std::uint64_t seed) const;
};

// ------------------------------------------------------------- batching

/// splitmix64 mixing of (seed, a, b) into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// Index batches for one epoch; shuffled deterministically from
/// (seed, epoch) when `shuffle` is set. The last partial batch is kept.
std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t n, int batch_size, bool shuffle,
                                                     std::uint64_t seed, int epoch);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

Batch make_batch(const Dataset& d, const std::vector<std::int64_t>& indices);

RATEKD_END_NAMESPACE
