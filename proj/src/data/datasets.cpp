#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include "maxl/data.hpp"
#include "maxl/errors.hpp"

namespace maxl::data {
namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr std::size_t kCifarPixels = 3 * 32 * 32;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw TruncatedFileError("cannot read " + path.string() + " (missing or unreadable)");
  }
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::uint32_t big_endian_u32(const std::string& bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
  return v;
}

void require_header(const std::string& bytes, std::size_t size, const std::filesystem::path& path) {
  if (bytes.size() < size) {
    throw TruncatedFileError(path.string() + ": header needs " + std::to_string(size) +
                             " bytes, file has " + std::to_string(bytes.size()));
  }
}

void check_payload(std::size_t have, std::size_t want, const std::filesystem::path& path) {
  if (have < want) {
    throw TruncatedFileError(path.string() + ": expected " + std::to_string(want) +
                             " payload bytes, found " + std::to_string(have));
  }
  if (have > want) {
    throw FormatError(path.string() + ": " + std::to_string(have - want) + " trailing bytes");
  }
}

}  // namespace

ag::Tensor Dataset::batch_images(std::span<const std::size_t> indices) const {
  const std::size_t per = sample_numel();
  std::vector<double> out(indices.size() * per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) {
      throw InvalidArgumentError("dataset: sample " + std::to_string(indices[b]) +
                                 " out of range");
    }
    std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(indices[b] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return ag::Tensor({indices.size(), channels, height, width}, std::move(out));
}

std::vector<std::size_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) out[b] = labels.at(indices[b]);
  return out;
}

std::vector<std::size_t> Dataset::batch_fine_labels(std::span<const std::size_t> indices) const {
  if (fine_labels.empty()) throw InvalidArgumentError("dataset " + name + " has no fine labels");
  std::vector<std::size_t> out(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) out[b] = fine_labels.at(indices[b]);
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out = *this;
  out.images = batch_images(indices).to_vector();
  out.labels = batch_labels(indices);
  if (!fine_labels.empty()) out.fine_labels = batch_fine_labels(indices);
  return out;
}

Normalization fit_normalization(const Dataset& raw) {
  if (raw.size() == 0) throw EmptyDatasetError("normalization: empty dataset " + raw.name);
  const std::size_t plane = raw.height * raw.width;
  Normalization stats;
  stats.mean.assign(raw.channels, 0.0);
  stats.stddev.assign(raw.channels, 0.0);
  const double count = static_cast<double>(raw.size() * plane);
  for (std::size_t c = 0; c < raw.channels; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < raw.size(); ++n) {
      const double* p = raw.images.data() + (n * raw.channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < raw.size(); ++n) {
      const double* p = raw.images.data() + (n * raw.channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    stats.mean[c] = mean;
    const double sd = std::sqrt(sq / count);
    // Constant channels are centred but not scaled.
    stats.stddev[c] = sd > 1e-12 ? sd : 1.0;
  }
  return stats;
}

void apply_normalization(Dataset& raw, const Normalization& stats) {
  if (stats.mean.size() != raw.channels || stats.stddev.size() != raw.channels) {
    throw ShapeError("normalization: statistics for " + std::to_string(stats.mean.size()) +
                     " channels, dataset has " + std::to_string(raw.channels));
  }
  const std::size_t plane = raw.height * raw.width;
  for (std::size_t n = 0; n < raw.size(); ++n) {
    for (std::size_t c = 0; c < raw.channels; ++c) {
      double* p = raw.images.data() + (n * raw.channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - stats.mean[c]) / stats.stddev[c];
    }
  }
  raw.norm = stats;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 const Normalization* stats, std::size_t num_classes) {
  const std::string img = read_file(images);
  const std::string lbl = read_file(labels);
  require_header(img, 4, images);
  if (big_endian_u32(img, 0) != kIdxImageMagic) {
    throw BadMagicError(images.string() + ": not an IDX image file (magic 0x00000803 expected)");
  }
  require_header(lbl, 4, labels);
  if (big_endian_u32(lbl, 0) != kIdxLabelMagic) {
    throw BadMagicError(labels.string() + ": not an IDX label file (magic 0x00000801 expected)");
  }
  require_header(img, 16, images);
  require_header(lbl, 8, labels);
  const std::size_t n = big_endian_u32(img, 4);
  const std::size_t rows = big_endian_u32(img, 8);
  const std::size_t cols = big_endian_u32(img, 12);
  const std::size_t n_labels = big_endian_u32(lbl, 4);
  if (n != n_labels) {
    throw CountMismatchError(images.string() + " has " + std::to_string(n) + " images but " +
                             labels.string() + " has " + std::to_string(n_labels) + " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) {
    throw FormatError(images.string() + ": empty dimensions");
  }
  check_payload(img.size() - 16, n * rows * cols, images);
  check_payload(lbl.size() - 8, n, labels);

  Dataset ds;
  ds.name = images.filename().string();
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.num_classes = num_classes;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<unsigned char>(lbl[8 + i]);
    if (ds.labels[i] >= num_classes) {
      throw LabelRangeError(labels.string() + ": label " + std::to_string(ds.labels[i]) +
                            " at index " + std::to_string(i) + " outside [0," +
                            std::to_string(num_classes) + ")");
    }
  }
  ds.images.resize(n * rows * cols);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    ds.images[i] = static_cast<unsigned char>(img[16 + i]) / 255.0;
  }
  apply_normalization(ds, stats ? *stats : fit_normalization(ds));
  return ds;
}

DataSplit load_mnist(const std::filesystem::path& dir) {
  DataSplit out;
  out.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  out.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte",
                      &out.train.norm);
  out.train.name = "mnist";
  out.test.name = "mnist";
  out.test.split = Split::Test;
  return out;
}

Dataset load_cifar_file(const std::filesystem::path& path, CifarVariant variant,
                        const Normalization* stats) {
  const std::string bytes = read_file(path);
  const bool fine = variant == CifarVariant::Cifar100;
  const std::size_t label_bytes = fine ? 2 : 1;
  const std::size_t record = label_bytes + kCifarPixels;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw TruncatedFileError(path.string() + ": size " + std::to_string(bytes.size()) +
                             " is not a positive multiple of the " + std::to_string(record) +
                             "-byte record");
  }
  const std::size_t n = bytes.size() / record;
  Dataset ds;
  ds.name = fine ? "cifar100" : "cifar10";
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.num_classes = fine ? 20 : 10;
  ds.num_fine_classes = fine ? 100 : 0;
  ds.labels.resize(n);
  if (fine) ds.fine_labels.resize(n);
  ds.images.resize(n * kCifarPixels);
  std::vector<int> coarse_of(100, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const char* rec = bytes.data() + i * record;
    const std::size_t primary = static_cast<unsigned char>(rec[0]);
    if (primary >= ds.num_classes) {
      throw LabelRangeError(path.string() + ": record " + std::to_string(i) + " has label " +
                            std::to_string(primary));
    }
    ds.labels[i] = primary;
    if (fine) {
      const std::size_t f = static_cast<unsigned char>(rec[1]);
      if (f >= 100) {
        throw LabelRangeError(path.string() + ": record " + std::to_string(i) +
                              " has fine label " + std::to_string(f));
      }
      if (coarse_of[f] >= 0 && static_cast<std::size_t>(coarse_of[f]) != primary) {
        throw FormatError(path.string() + ": fine class " + std::to_string(f) +
                          " appears under two coarse classes");
      }
      coarse_of[f] = static_cast<int>(primary);
      ds.fine_labels[i] = f;
    }
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      ds.images[i * kCifarPixels + p] = static_cast<unsigned char>(rec[label_bytes + p]) / 255.0;
    }
  }
  apply_normalization(ds, stats ? *stats : fit_normalization(ds));
  return ds;
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
  Dataset out = std::move(parts.front());
  for (std::size_t i = 1; i < parts.size(); ++i) {
    out.images.insert(out.images.end(), parts[i].images.begin(), parts[i].images.end());
    out.labels.insert(out.labels.end(), parts[i].labels.begin(), parts[i].labels.end());
    out.fine_labels.insert(out.fine_labels.end(), parts[i].fine_labels.begin(),
                           parts[i].fine_labels.end());
  }
  return out;
}

}  // namespace

DataSplit load_cifar(const std::filesystem::path& dir, CifarVariant variant) {
  std::vector<std::filesystem::path> train_files;
  std::filesystem::path test_file;
  if (variant == CifarVariant::Cifar10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    test_file = dir / "test_batch.bin";
  } else {
    train_files.push_back(dir / "train.bin");
    test_file = dir / "test.bin";
  }
  // Load raw first so the statistics cover the whole training split.
  const Normalization identity{std::vector<double>(3, 0.0), std::vector<double>(3, 1.0)};
  std::vector<Dataset> parts;
  for (const auto& f : train_files) parts.push_back(load_cifar_file(f, variant, &identity));
  DataSplit out;
  out.train = concat(std::move(parts));
  const Normalization stats = fit_normalization(out.train);
  apply_normalization(out.train, stats);
  out.test = load_cifar_file(test_file, variant, &stats);
  out.test.split = Split::Test;
  return out;
}

DataSplit synth_hierarchical(const SynthParams& params) {
  if (!(params.sep >= 0.0) || !std::isfinite(params.sep)) {
    throw InvalidArgumentError("synth: sep must be finite and >= 0");
  }
  if (params.num_primary < 1 || params.sub_per_class < 1 || params.n_per_sub < 1) {
    throw InvalidArgumentError("synth: counts must be >= 1");
  }
  const std::size_t dirs = params.num_primary + params.sub_per_class;
  if (params.dim < dirs) {
    throw InvalidArgumentError("synth: dim " + std::to_string(params.dim) + " must be >= " +
                               std::to_string(dirs) + " (primary + sub-cluster directions)");
  }
  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Random orthonormal directions by Gram-Schmidt.
  const std::size_t d = params.dim;
  std::vector<std::vector<double>> basis;
  while (basis.size() < dirs) {
    std::vector<double> v(d);
    for (double& x : v) x = normal(rng);
    for (const auto& b : basis) {
      const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * b[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  // Orthonormal e_i, e_j: |a e_i - a e_j| = a sqrt(2).
  const double primary_scale = 3.0 * params.sep / std::sqrt(2.0);
  const double sub_scale = params.sep / std::sqrt(2.0);
  const std::size_t subs = params.num_primary * params.sub_per_class;
  std::vector<std::vector<double>> centres(subs, std::vector<double>(d, 0.0));
  for (std::size_t p = 0; p < params.num_primary; ++p) {
    for (std::size_t s = 0; s < params.sub_per_class; ++s) {
      auto& c = centres[p * params.sub_per_class + s];
      for (std::size_t i = 0; i < d; ++i) {
        c[i] = primary_scale * basis[p][i] + sub_scale * basis[params.num_primary + s][i];
      }
    }
  }

  auto draw = [&](Split split) {
    Dataset ds;
    ds.name = "synth";
    ds.split = split;
    ds.channels = d;
    ds.height = 1;
    ds.width = 1;
    ds.num_classes = params.num_primary;
    ds.num_fine_classes = subs;
    for (std::size_t sub = 0; sub < subs; ++sub) {
      for (std::size_t k = 0; k < params.n_per_sub; ++k) {
        for (std::size_t i = 0; i < d; ++i) ds.images.push_back(centres[sub][i] + normal(rng));
        ds.labels.push_back(sub / params.sub_per_class);
        ds.fine_labels.push_back(sub);
      }
    }
    return ds;
  };
  DataSplit out;
  out.train = draw(Split::Train);
  out.test = draw(Split::Test);
  const Normalization stats = fit_normalization(out.train);
  apply_normalization(out.train, stats);
  apply_normalization(out.test, stats);
  return out;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::size_t epoch, std::uint64_t seed,
                                              std::size_t pass) {
  if (batch_size == 0) throw InvalidArgumentError("batches: batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(pass)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::size_t> stratified_subset(std::span<const std::size_t> labels,
                                           std::size_t num_classes, std::size_t count,
                                           std::uint64_t seed) {
  if (count >= labels.size()) {
    std::vector<std::size_t> all(labels.size());
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw LabelRangeError("stratified_subset: label " + std::to_string(labels[i]) +
                            " outside [0," + std::to_string(num_classes) + ")");
    }
    by_class[labels[i]].push_back(i);
  }
  // Largest-remainder quotas proportional to class frequency.
  std::vector<std::size_t> quota(num_classes);
  std::vector<std::pair<double, std::size_t>> remainder;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double exact = static_cast<double>(count) * static_cast<double>(by_class[c].size()) /
                         static_cast<double>(labels.size());
    quota[c] = static_cast<std::size_t>(exact);
    assigned += quota[c];
    remainder.emplace_back(-(exact - static_cast<double>(quota[c])), c);
  }
  std::sort(remainder.begin(), remainder.end());
  for (std::size_t i = 0; assigned < count; ++i, ++assigned) ++quota[remainder[i].second];

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& pool = by_class[c];
    std::shuffle(pool.begin(), pool.end(), rng);
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace maxl::data
