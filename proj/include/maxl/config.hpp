#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace maxl::config {

// Complete description of one run. Parsed from flat `key = value` text; any
// unknown key, malformed value or inconsistent combination is a ConfigError.
struct RunConfig {
  // data
  std::string dataset = "mnist";  // mnist | cifar10 | cifar100 | synth
  std::string data_dir;           // empty: $MAXL_MNIST_DIR or the built-in default
  std::uint64_t data_seed = 0;    // synthetic data and subset selection
  std::size_t subset = 0;         // stratified train subset size, 0 = all
  std::size_t test_subset = 0;
  std::size_t synth_primary = 3;
  std::size_t synth_sub = 4;
  std::size_t synth_dim = 16;
  double synth_sep = 4.0;
  std::size_t synth_n_per_sub = 100;

  // networks
  std::string arch = "convnet4";  // mlp | convnet4
  std::vector<std::size_t> hidden{256, 256};
  std::vector<std::size_t> conv_channels{32, 64};
  std::size_t dense = 128;
  std::string precision = "f64";  // f64 | f32 (matmul only)

  // method and hierarchy
  std::string method = "maxl";        // maxl | single | random | kmeans | human
  std::string hierarchy = "balanced"; // balanced | near_balanced | human
  std::size_t aux_per_class = 3;      // balanced
  std::size_t aux_total = 0;          // near_balanced
  std::uint64_t hierarchy_seed = 0;
  std::size_t primary_level = 20;     // human (CIFAR-100)
  std::size_t aux_level = 100;

  // losses
  double gamma = 2.0;
  double lambda = 0.2;

  // multi-task optimizer (alpha side)
  double alpha = 0.1;
  std::string alpha_schedule = "cosine";  // cosine | step | constant
  std::size_t alpha_period = 50;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  // label-generation optimizer (beta side)
  double beta = 1e-3;
  double beta_weight_decay = 5e-4;

  // k-means baseline
  std::size_t latent_dim = 32;
  double ae_lr = 1e-3;

  // run
  std::size_t epochs = 30;
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::size_t checkpoint_every = 10;  // 0: final epoch only
  std::size_t probe_size = 512;
  bool export_embeddings = true;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Canonical text listing every key; parse_config(snapshot(c)) == c.
std::string snapshot(const RunConfig& cfg);
// Consistency checks shared by the parser and by overrides.
void validate(const RunConfig& cfg);

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace maxl::config
