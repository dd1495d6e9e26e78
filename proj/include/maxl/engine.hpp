#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "maxl/config.hpp"
#include "maxl/data.hpp"
#include "maxl/hierarchy.hpp"
#include "maxl/losses.hpp"
#include "maxl/nn.hpp"

namespace maxl::engine {

using ag::Tensor;

struct Batch {
  std::vector<std::size_t> indices;  // into the training set
  Tensor x;                          // [B, C, H, W]
  std::vector<std::size_t> labels;   // primary
};

Batch make_batch(const data::Dataset& ds, std::span<const std::size_t> indices);

// Where auxiliary targets come from during the auxiliary-training pass.
class LabelSource {
 public:
  virtual ~LabelSource() = default;
  // Targets for one training iteration; may advance internal state.
  virtual Tensor train_labels(const Batch& batch) = 0;
  // Targets without side effects (probe batch, diagnostics).
  virtual Tensor peek_labels(const Batch& batch) = 0;
  // Share of auxiliary classes in use over the training set; NaN if unknown.
  virtual double utilization(const data::Dataset& train);
};

struct TrainState {
  nn::MultiTaskNet multitask;
  nn::OptimizerState mt_opt;
  nn::LabelGenNet labelgen;
  nn::OptimizerState lg_opt;
  losses::LossConfig loss;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::size_t batch_size = 100;
  // Scheduled multi-task learning rate for the current epoch; the virtual
  // step uses the same value.
  double alpha = 0.1;
};

// Networks and optimizers initialised from `cfg`. Both networks derive their
// initialisation seed from cfg.seed.
TrainState make_state(const config::RunConfig& cfg, const nn::ArchSpec& arch,
                      const hierarchy::Hierarchy& psi, std::size_t num_primary);

// Labels produced by the state's label-generation network (inference only).
std::unique_ptr<LabelSource> labelgen_source(const TrainState& state);

struct PassMetrics {
  double primary_loss = 0.0;  // sample-weighted means over the pass
  double aux_loss = 0.0;
  double meta_loss = 0.0;
  double entropy = 0.0;
};

// One pass over `train` updating theta1 on focal(primary) + focal(aux). With
// a null `labels` only the primary term is used (single task).
PassMetrics auxiliary_training_pass(TrainState& state, const data::Dataset& train,
                                    LabelSource* labels);

// One pass over `train` updating theta2 through the virtual step of theta1.
// theta1 itself is left untouched. Throws NonFiniteLossError with the batch
// index when the meta loss is not finite.
PassMetrics meta_training_pass(TrainState& state, const data::Dataset& train);

struct MetaTerms {
  double loss = 0.0;     // focal(primary at theta1+) + lambda * entropy
  double entropy = 0.0;  // entropy regularizer of the generated labels
};

// Meta objective of one batch, and its gradient w.r.t. theta2 (in parameter
// order) when `grads` is non-null. Shared by the pass and the oracle tests.
MetaTerms meta_objective(const TrainState& state, const Batch& batch, std::vector<Tensor>* grads);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from the set
  double focal = 0.0;             // primary focal loss, gamma from the state
  double cross_entropy = 0.0;
};

// Top-1 primary accuracy; throws EmptyDatasetError on an empty set.
EvalResult evaluate(const nn::MultiTaskNet& net, const data::Dataset& test, double gamma = 2.0);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr_alpha = 0.0;
  double lr_beta = 0.0;
  double primary_train_loss = 0.0;
  double aux_train_loss = 0.0;
  double meta_loss = 0.0;
  double entropy_term = 0.0;
  double test_accuracy = 0.0;
  double label_utilization = 0.0;
  double cosine_similarity = 0.0;
  double test_primary_focal = 0.0;
  double test_primary_ce = 0.0;
};

// Header and row of metrics.csv; NaN is written as "nan".
std::string metrics_header();
std::string metrics_row(const EpochMetrics& m);
// One value as written in metrics.csv.
std::string metrics_value(double v);

// Everything a run needs besides the config: data, hierarchy and, for the
// human baseline, the fixed auxiliary labels of the training set.
struct PreparedData {
  data::DataSplit split;
  hierarchy::Hierarchy psi;
  std::vector<std::size_t> human_aux;  // global auxiliary index per training sample
  nn::ArchSpec arch;
  std::string description;             // one line per fact, for run_info.txt
};

// Loads and subsets the configured dataset and builds the hierarchy.
PreparedData prepare_data(const config::RunConfig& cfg);
nn::ArchSpec arch_for(const config::RunConfig& cfg, const data::Dataset& ds);
hierarchy::Hierarchy hierarchy_for(const config::RunConfig& cfg, std::size_t num_primary);

// Trunk-gradient cosine on the run's fixed probe and label utilization, as
// logged once per epoch. NaN for both when `labels` is null.
struct ProbeMetrics {
  double cosine = 0.0;
  double utilization = 0.0;
};
ProbeMetrics probe_metrics(const config::RunConfig& cfg, const data::Dataset& train,
                           const TrainState& state, LabelSource* labels);

// Matmul precision named by cfg.precision for the lifetime of the object.
class PrecisionScope {
 public:
  explicit PrecisionScope(const config::RunConfig& cfg);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  ag::Precision previous_;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::filesystem::path output_dir;
};

// Epoch driver shared by every method. `labels` is null for single task;
// `meta` enables the label-generation pass.
TrainResult run_epochs(const config::RunConfig& cfg, const PreparedData& data, TrainState& state,
                       LabelSource* labels, bool meta);

// The full method (auxiliary pass then meta pass every epoch), or single task
// when cfg.method == "single". The other baselines live in baselines::run.
TrainResult train(const config::RunConfig& cfg, const PreparedData& data);

// Output root: $MAXL_OUTPUT_ROOT joined with a relative cfg.output_dir.
std::filesystem::path resolve_output_dir(const config::RunConfig& cfg);

// Checkpoint text block: config snapshot, hierarchy and epoch.
std::string checkpoint_meta(const config::RunConfig& cfg, const hierarchy::Hierarchy& psi,
                            std::size_t epoch);
struct CheckpointInfo {
  config::RunConfig cfg;
  hierarchy::Hierarchy psi;
  std::size_t epoch = 0;
};
CheckpointInfo parse_checkpoint_meta(const std::string& meta);

}  // namespace maxl::engine
