#include "flashsim/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "flashsim/error.hpp"

namespace flashsim {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;
constexpr std::size_t kMnistClasses = 10;

bool is_gzip(const std::filesystem::path& p) { return p.extension() == ".gz"; }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  if (is_gzip(path)) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw FormatError("cannot open " + path.string(), 0);
    std::uint8_t buf[1 << 16];
    int n = 0;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + n);
    int err = 0;
    const char* msg = gzerror(f, &err);
    gzclose(f);
    if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
      throw FormatError("gzip error in " + path.string() + ": " + (msg ? msg : "unknown"), bytes.size());
    }
    return bytes;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  bytes.resize(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  return bytes;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& name) {
  if (off + 4 > b.size()) throw FormatError(name + ": truncated header", b.size());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (is_gzip(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write " + path.string());
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) throw std::runtime_error("short write to " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (auto y : labels) ++h[static_cast<std::size_t>(y)];
  return h;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t per = data.sample_numel();
  Batch b{Tensor({indices.size(), data.images.dim(1), data.images.dim(2), data.images.dim(3)}), {}};
  b.labels.reserve(indices.size());
  const float* src = data.images.raw();
  float* dst = b.images.raw();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(dst + i * per, src + indices[i] * per, per * sizeof(float));
    b.labels.push_back(data.labels[indices[i]]);
  }
  return b;
}

Dataset load_mnist_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                       Split split) {
  const auto img = read_file(image_path);
  const auto lab = read_file(label_path);
  const std::string iname = image_path.string(), lname = label_path.string();

  if (read_be32(img, 0, iname) != kImageMagic) throw FormatError(iname + ": bad image magic", 0);
  const std::size_t n = read_be32(img, 4, iname);
  const std::size_t rows = read_be32(img, 8, iname);
  const std::size_t cols = read_be32(img, 12, iname);
  if (n == 0 || rows == 0 || cols == 0) throw FormatError(iname + ": zero dimension in header", 4);
  const std::size_t need = 16 + n * rows * cols;
  if (img.size() < need) throw FormatError(iname + ": truncated pixel data", img.size());

  if (read_be32(lab, 0, lname) != kLabelMagic) throw FormatError(lname + ": bad label magic", 0);
  const std::size_t nl = read_be32(lab, 4, lname);
  if (nl != n) {
    throw FormatError(lname + ": label count " + std::to_string(nl) + " != image count " + std::to_string(n), 4);
  }
  if (lab.size() < 8 + n) throw FormatError(lname + ": truncated label data", lab.size());

  Dataset d;
  d.split = split;
  d.num_classes = kMnistClasses;
  d.images = Tensor({n, 1, rows, cols});
  float* px = d.images.raw();
  for (std::size_t i = 0; i < n * rows * cols; ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t y = lab[8 + i];
    if (y >= kMnistClasses) throw FormatError(lname + ": label out of range", 8 + i);
    d.labels[i] = y;
  }
  return d;
}

Dataset load_mnist_dir(const std::filesystem::path& dir, Split split) {
  const std::string prefix = split == Split::kTrain ? "train" : "t10k";
  const auto pick = [&](const std::string& stem) {
    const auto plain = dir / stem;
    if (std::filesystem::exists(plain)) return plain;
    const auto gz = dir / (stem + ".gz");
    if (std::filesystem::exists(gz)) return gz;
    throw ConfigError("missing MNIST file " + plain.string() + "[.gz]");
  };
  return load_mnist_idx(pick(prefix + "-images-idx3-ubyte"), pick(prefix + "-labels-idx1-ubyte"), split);
}

void write_mnist_idx(const Dataset& data, const std::filesystem::path& image_path,
                     const std::filesystem::path& label_path) {
  const std::size_t n = data.size();
  const std::size_t rows = data.images.dim(2), cols = data.images.dim(3);
  std::vector<std::uint8_t> img;
  img.reserve(16 + n * rows * cols);
  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(n));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  for (float v : data.images.data()) {
    img.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L)));
  }
  std::vector<std::uint8_t> lab;
  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(n));
  for (auto y : data.labels) lab.push_back(static_cast<std::uint8_t>(y));
  write_file(image_path, img);
  write_file(label_path, lab);
}

Dataset synth_dataset(std::size_t num_classes, std::size_t per_class, std::size_t dim, double separation, Rng& rng,
                      Split split) {
  if (per_class == 0) throw ConfigError("synthetic dataset would be empty (per_class = 0)");
  if (num_classes < 2) throw ConfigError("synthetic dataset needs at least two classes");
  if (dim == 0) throw ConfigError("synthetic dataset dimension must be positive");
  if (!(separation > 0.0)) throw ConfigError("synthetic dataset separation must be positive");

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> means(num_classes, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (num_classes <= 2 * dim) {
      means[c][c % dim] = c < dim ? separation : -separation;
    } else {
      double norm = 0.0;
      for (auto& v : means[c]) {
        v = gauss(rng);
        norm += v * v;
      }
      for (auto& v : means[c]) v *= separation / std::sqrt(norm);
    }
  }

  Dataset d;
  d.split = split;
  d.num_classes = num_classes;
  const std::size_t n = num_classes * per_class;
  d.images = Tensor({n, 1, 1, dim});
  d.labels.resize(n);
  float* px = d.images.raw();
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      const std::size_t s = i * num_classes + c;
      d.labels[s] = static_cast<std::int32_t>(c);
      for (std::size_t k = 0; k < dim; ++k) px[s * dim + k] = static_cast<float>(means[c][k] + gauss(rng));
    }
  }
  return d;
}

std::uint64_t dataset_checksum(const Dataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(data.labels.data(), data.labels.size() * sizeof(std::int32_t));
  feed(data.images.raw(), data.images.size() * sizeof(float));
  return h;
}

Partition lda_partition(std::span<const std::int32_t> labels, std::size_t num_classes, std::size_t num_clients,
                        double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (num_clients == 0) throw ConfigError("client count must be at least 1");
  const std::size_t n = labels.size();
  const std::size_t per_client = n / num_clients;
  if (per_client == 0) {
    throw ConfigError("cannot split " + std::to_string(n) + " samples over " + std::to_string(num_clients) +
                      " clients");
  }

  std::vector<std::vector<std::size_t>> pools(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= num_classes) throw ConfigError("label outside [0, num_classes)");
    pools[y].push_back(i);
  }
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
  // Pools are consumed from the back. The Dirichlet mean tracks what is left
  // in the pools, so early draws cannot starve the last clients of a class.
  std::vector<double> prior(num_classes);
  std::size_t remaining = n;

  Partition part;
  part.clients.resize(num_clients);
  std::vector<double> q(num_classes);
  std::vector<std::size_t> target(num_classes);
  std::vector<std::pair<double, std::size_t>> frac(num_classes);

  for (std::size_t k = 0; k < num_clients; ++k) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      prior[c] = static_cast<double>(pools[c].size()) / static_cast<double>(remaining);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      q[c] = 0.0;
      if (prior[c] > 0.0) {
        std::gamma_distribution<double> gamma(alpha * static_cast<double>(num_classes) * prior[c], 1.0);
        q[c] = gamma(rng);
      }
      sum += q[c];
    }
    if (!(sum > 0.0)) {
      // Every gamma draw underflowed (tiny alpha): fall back to the most
      // frequent class.
      const auto c = static_cast<std::size_t>(std::max_element(prior.begin(), prior.end()) - prior.begin());
      q[c] = sum = 1.0;
    }
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double exact = q[c] / sum * static_cast<double>(per_client);
      target[c] = static_cast<std::size_t>(std::floor(exact));
      assigned += target[c];
      frac[c] = {exact - static_cast<double>(target[c]), c};
    }
    std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < per_client; ++r, ++assigned) ++target[frac[r % num_classes].second];

    auto& mine = part.clients[k];
    mine.reserve(per_client + 1);
    std::size_t shortfall = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const std::size_t take = std::min(target[c], pools[c].size());
      for (std::size_t t = 0; t < take; ++t) {
        mine.push_back(pools[c].back());
        pools[c].pop_back();
      }
      shortfall += target[c] - take;
    }
    part.reassigned += shortfall;
    for (; shortfall > 0; --shortfall) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < num_classes; ++c) {
        if (pools[c].size() > pools[best].size()) best = c;
      }
      mine.push_back(pools[best].back());
      pools[best].pop_back();
    }
    remaining -= mine.size();
  }

  std::size_t next = 0;
  for (auto& p : pools) {
    for (std::size_t idx : p) {
      part.clients[next % num_clients].push_back(idx);
      ++next;
    }
    p.clear();
  }
  for (auto& c : part.clients) std::sort(c.begin(), c.end());
  return part;
}

}  // namespace flashsim
