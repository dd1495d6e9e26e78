#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maxl/autograd.hpp"

namespace maxl::data {

enum class Split { Train, Test };

// Per-channel statistics, always taken from a training split.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Dataset {
  std::string name;
  Split split = Split::Train;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::vector<double> images;               // N x C x H x W, normalized
  std::vector<std::size_t> labels;          // primary labels
  std::vector<std::size_t> fine_labels;     // CIFAR-100 fine labels / synthetic sub-clusters
  std::size_t num_fine_classes = 0;
  Normalization norm;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_numel() const noexcept { return channels * height * width; }
  // Images at `indices`, shaped [B, C, H, W].
  ag::Tensor batch_images(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> batch_labels(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> batch_fine_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

Normalization fit_normalization(const Dataset& raw);
void apply_normalization(Dataset& raw, const Normalization& stats);

// IDX pair. Pixels are scaled to [0,1], then normalized with `stats`, or with
// the file's own statistics when `stats` is null.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 const Normalization* stats = nullptr, std::size_t num_classes = 10);
// train-/t10k- files of the standard MNIST distribution in `dir`.
DataSplit load_mnist(const std::filesystem::path& dir);

enum class CifarVariant { Cifar10, Cifar100 };

// One binary batch file; for CIFAR-100 the primary labels are the 20 coarse
// classes and the 100 fine classes go to fine_labels.
Dataset load_cifar_file(const std::filesystem::path& path, CifarVariant variant,
                        const Normalization* stats = nullptr);
// Standard directory layout (data_batch_1..5.bin/test_batch.bin, or train.bin/test.bin).
DataSplit load_cifar(const std::filesystem::path& dir, CifarVariant variant);

struct SynthParams {
  std::size_t num_primary = 3;
  std::size_t sub_per_class = 4;
  std::size_t dim = 16;
  double sep = 4.0;
  std::size_t n_per_sub = 100;
  std::uint64_t seed = 0;
};

// Gaussian sub-clusters: sub-clusters of the same primary class are `sep`
// apart, primary centres 3 * sep apart, unit variance. The sub-cluster id of
// each sample goes to fine_labels and is never used for training.
DataSplit synth_hierarchical(const SynthParams& params);

// Seeded permutation of [0, n) cut into batches; the last short batch is kept.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::size_t epoch, std::uint64_t seed,
                                              std::size_t pass = 0);

// Seeded class-stratified sample of `count` indices, in ascending order.
std::vector<std::size_t> stratified_subset(std::span<const std::size_t> labels,
                                           std::size_t num_classes, std::size_t count,
                                           std::uint64_t seed);

}  // namespace maxl::data
