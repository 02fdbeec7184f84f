#include "ratekd/data.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <random>

RATEKD_BEGIN_NAMESPACE

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

struct Idx {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

Idx parse_idx_header(const std::vector<std::uint8_t>& b, std::uint32_t magic, const std::string& path) {
  if (b.size() < 4) throw FormatError(path + ": truncated IDX header");
  const auto m = be32(b, 0);
  if (m != magic) {
    throw FormatError(path + ": IDX magic " + std::to_string(m) + ", expected " + std::to_string(magic));
  }
  const std::size_t rank = magic & 0xffu;
  if (b.size() < 4 + 4 * rank) throw FormatError(path + ": truncated IDX dimensions");
  Idx idx;
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    idx.dims.push_back(be32(b, 4 + 4 * i));
    total *= idx.dims.back();
  }
  idx.payload_offset = 4 + 4 * rank;
  if (b.size() - idx.payload_offset < total) {
    throw FormatError(path + ": IDX payload truncated (" + std::to_string(b.size() - idx.payload_offset) +
                      " of " + std::to_string(total) + " bytes)");
  }
  return idx;
}

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Uniform integer in [0, bound) without distribution-implementation drift.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  std::uint64_t x;
  do x = rng();
  while (x >= limit);
  return x % bound;
}

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

}  // namespace

Dataset Dataset::gather(const std::vector<std::int64_t>& indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.split = split;
  const auto per = images.shape().numel_from(1);
  out.images = Tensor(images.shape().with_dim(0, static_cast<std::int64_t>(indices.size())));
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = indices[i];
    if (src < 0 || src >= size()) throw ContractError("gather: index out of range");
    std::copy_n(images.data() + src * per, per, out.images.data() + static_cast<std::int64_t>(i) * per);
    out.labels.push_back(labels[static_cast<std::size_t>(src)]);
  }
  return out;
}

void Dataset::validate() const {
  if (images.rank() != 4) throw ContractError("dataset images must be [N,C,H,W]");
  if (images.dim(0) != size()) throw ContractError("dataset image/label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= num_classes) throw ContractError("dataset label " + std::to_string(l) + " out of range");
  for (auto v : images.values())
    if (v < 0 || v > 1) throw ContractError("dataset pixel outside [0,1]");
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path,
                       const std::string& split) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  const auto ih = parse_idx_header(ib, 0x00000803u, images_path);
  const auto lh = parse_idx_header(lb, 0x00000801u, labels_path);
  if (ih.dims[0] != lh.dims[0]) {
    throw FormatError("MNIST image count " + std::to_string(ih.dims[0]) + " != label count " +
                      std::to_string(lh.dims[0]));
  }
  const std::int64_t n = ih.dims[0], h = ih.dims[1], w = ih.dims[2];
  Dataset d;
  d.split = split;
  d.num_classes = 10;
  d.images = Tensor(Shape{n, 1, h, w});
  for (std::int64_t i = 0; i < n * h * w; ++i) {
    d.images[i] = static_cast<Real>(ib[ih.payload_offset + static_cast<std::size_t>(i)]) / Real(255);
  }
  d.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = lb[lh.payload_offset + static_cast<std::size_t>(i)];
    if (label > 9) throw FormatError(labels_path + ": label " + std::to_string(label) + " at item " + std::to_string(i));
    d.labels[static_cast<std::size_t>(i)] = label;
  }
  return d;
}

Dataset load_cifar10_bin(const std::vector<std::string>& paths, const std::string& split) {
  constexpr std::size_t kRecord = 3073;
  std::vector<std::vector<std::uint8_t>> files;
  std::size_t total = 0;
  for (const auto& p : paths) {
    files.push_back(read_file(p));
    if (files.back().size() % kRecord != 0) {
      throw FormatError(p + ": size " + std::to_string(files.back().size()) + " is not a multiple of 3073");
    }
    total += files.back().size() / kRecord;
  }
  Dataset d;
  d.split = split;
  d.num_classes = 10;
  d.images = Tensor(Shape{static_cast<std::int64_t>(total), 3, 32, 32});
  d.labels.reserve(total);
  std::int64_t item = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& b = files[f];
    for (std::size_t r = 0; r < b.size() / kRecord; ++r, ++item) {
      const std::uint8_t* rec = b.data() + r * kRecord;
      if (rec[0] > 9) throw FormatError(paths[f] + ": label " + std::to_string(rec[0]) + " in record " + std::to_string(r));
      d.labels.push_back(rec[0]);
      Real* dst = d.images.data() + item * 3072;
      for (std::size_t i = 0; i < 3072; ++i) dst[i] = static_cast<Real>(rec[1 + i]) / Real(255);
    }
  }
  return d;
}

std::vector<std::uint8_t> cifar10_record(const Dataset& d, std::int64_t index) {
  if (d.images.shape().numel_from(1) != 3072) throw ShapeError("cifar10_record: images must be 3x32x32");
  std::vector<std::uint8_t> rec(3073);
  rec[0] = static_cast<std::uint8_t>(d.labels.at(static_cast<std::size_t>(index)));
  const Real* src = d.images.data() + index * 3072;
  for (std::size_t i = 0; i < 3072; ++i) {
    rec[1 + i] = static_cast<std::uint8_t>(std::lround(static_cast<double>(src[i]) * 255.0));
  }
  return rec;
}

Dataset make_synthetic(std::int64_t n, int num_classes, int channels, int height, int width,
                       std::uint64_t seed, const std::string& split) {
  std::mt19937_64 proto_rng(derive_seed(seed, 0x9e37));
  const std::int64_t per = static_cast<std::int64_t>(channels) * height * width;
  std::vector<Real> protos(static_cast<std::size_t>(num_classes * per));
  for (auto& p : protos) p = unit_uniform(proto_rng) < 0.3 ? Real(0.9) : Real(0.1);
  std::uint64_t tag = 1469598103934665603ull;
  for (unsigned char ch : split) tag = (tag ^ ch) * 1099511628211ull;
  std::mt19937_64 rng(derive_seed(seed, 0x5eed, tag));
  Dataset d;
  d.split = split;
  d.num_classes = num_classes;
  d.images = Tensor(Shape{n, channels, height, width});
  d.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % num_classes);
    d.labels[static_cast<std::size_t>(i)] = c;
    for (std::int64_t j = 0; j < per; ++j) {
      const double noise = (unit_uniform(rng) - 0.5) * 0.4;
      d.images[i * per + j] = static_cast<Real>(std::clamp(protos[c * per + j] + noise, 0.0, 1.0));
    }
  }
  return d;
}

Dataset take_subset(const Dataset& d, std::int64_t n, std::uint64_t seed) {
  if (n <= 0 || n >= d.size()) return d;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(d.size()));
  for (std::int64_t i = 0; i < d.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed(seed, 0x50b5e7));
  for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[bounded(rng, i + 1)]);
  idx.resize(static_cast<std::size_t>(n));
  std::sort(idx.begin(), idx.end());
  return d.gather(idx);
}

Tensor normalize(const Tensor& images, const Normalization& n) {
  const auto c = images.dim(1);
  if (static_cast<std::int64_t>(n.mean.size()) != c || static_cast<std::int64_t>(n.stddev.size()) != c) {
    throw ContractError("normalize: statistics for " + std::to_string(n.mean.size()) + " channels, images have " +
                        std::to_string(c));
  }
  for (Real s : n.stddev)
    if (!(s > 0)) throw ContractError("normalize: standard deviation must be positive");
  Tensor out(images.shape());
  const auto inner = images.shape().numel_from(2);
  for (std::int64_t i = 0; i < images.dim(0); ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const Real m = n.mean[static_cast<std::size_t>(ch)], s = n.stddev[static_cast<std::size_t>(ch)];
      const auto base = (i * c + ch) * inner;
      for (std::int64_t j = 0; j < inner; ++j) out[base + j] = (images[base + j] - m) / s;
    }
  return out;
}

Tensor denormalize(const Tensor& images, const Normalization& n) {
  const auto c = images.dim(1);
  if (static_cast<std::int64_t>(n.mean.size()) != c) throw ContractError("denormalize: channel mismatch");
  Tensor out(images.shape());
  const auto inner = images.shape().numel_from(2);
  for (std::int64_t i = 0; i < images.dim(0); ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const Real m = n.mean[static_cast<std::size_t>(ch)], s = n.stddev[static_cast<std::size_t>(ch)];
      const auto base = (i * c + ch) * inner;
      for (std::int64_t j = 0; j < inner; ++j) out[base + j] = images[base + j] * s + m;
    }
  return out;
}

Tensor flip_horizontal(const Tensor& images) {
  Tensor out(images.shape());
  const auto w = images.dim(3);
  const auto rows = images.numel() / w;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t x = 0; x < w; ++x) out[r * w + x] = images[r * w + (w - 1 - x)];
  return out;
}

Tensor augment(const Tensor& images, Augment policy, std::uint64_t seed) {
  if (policy == Augment::None) return images;
  constexpr std::int64_t kPad = 4;
  const auto n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor out(images.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const auto dy = static_cast<std::int64_t>(bounded(rng, 2 * kPad + 1)) - kPad;
    const auto dx = static_cast<std::int64_t>(bounded(rng, 2 * kPad + 1)) - kPad;
    const bool flip = bounded(rng, 2) == 1;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const Real* src = images.data() + (i * c + ch) * h * w;
      Real* dst = out.data() + (i * c + ch) * h * w;
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const auto sy = reflect(y + dy, h);
          const auto xx = flip ? w - 1 - x : x;
          dst[y * w + x] = src[sy * w + reflect(xx + dx, w)];
        }
    }
  }
  return out;
}

EncodedBatch encode_direct(const Tensor& images, int timesteps) {
  if (timesteps < 1) throw ContractError("encode_direct: timesteps must be >= 1");
  EncodedBatch e;
  e.timesteps = timesteps;
  e.mean = images;
  e.stacked = Tensor(images.shape().with_dim(0, images.dim(0) * timesteps));
  for (int t = 0; t < timesteps; ++t) e.stacked.set_rows(t * images.dim(0), images);
  return e;
}

EncodedBatch encode_rate_poisson(const Tensor& images, int timesteps, std::uint64_t seed) {
  if (timesteps < 1) throw ContractError("encode_rate_poisson: timesteps must be >= 1");
  for (auto v : images.values())
    if (v < 0 || v > 1) throw ContractError("encode_rate_poisson: pixel outside [0,1]");
  EncodedBatch e;
  e.timesteps = timesteps;
  const auto m = images.numel();
  e.stacked = Tensor(images.shape().with_dim(0, images.dim(0) * timesteps));
  e.mean = Tensor(images.shape());
  std::mt19937_64 rng(seed);
  for (int t = 0; t < timesteps; ++t)
    for (std::int64_t j = 0; j < m; ++j) {
      const Real s = unit_uniform(rng) < static_cast<double>(images[j]) ? Real(1) : Real(0);
      e.stacked[t * m + j] = s;
      e.mean[j] += s;
    }
  e.mean *= Real(1) / static_cast<Real>(timesteps);
  return e;
}

Tensor InputPipeline::ann_input(const Tensor& raw, bool train, std::uint64_t seed) const {
  const Tensor x = train ? ratekd::augment(raw, augment, seed) : raw;
  return normalize(x, norm);
}

EncodedBatch InputPipeline::snn_input(const Tensor& raw, int timesteps, bool train, std::uint64_t seed) const {
  const Tensor x = train ? ratekd::augment(raw, augment, seed) : raw;
  if (encoding == Encoding::Poisson) return encode_rate_poisson(x, timesteps, derive_seed(seed, 0x9015));
  return encode_direct(normalize(x, norm), timesteps);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t n, int batch_size, bool shuffle,
                                                     std::uint64_t seed, int epoch) {
  if (batch_size < 1) throw ContractError("batch size must be >= 1");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  if (shuffle && n > 1) {
    std::mt19937_64 rng(derive_seed(seed, 0x5f1e, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[bounded(rng, i + 1)]);
  }
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t first = 0; first < n; first += batch_size) {
    const auto last = std::min<std::int64_t>(n, first + batch_size);
    out.emplace_back(idx.begin() + first, idx.begin() + last);
  }
  return out;
}

Batch make_batch(const Dataset& d, const std::vector<std::int64_t>& indices) {
  auto sub = d.gather(indices);
  return Batch{std::move(sub.images), std::move(sub.labels)};
}

RATEKD_END_NAMESPACE
