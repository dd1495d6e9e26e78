#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maxl/autograd.hpp"
#include "maxl/hierarchy.hpp"

namespace maxl::nn {

using ag::Tensor;

// Backbone description shared by both networks.
//   mlp:      flatten -> [dense + relu] per hidden width
//   convnet4: [conv3x3(pad 1) + relu + maxpool2] per conv width -> dense + relu
struct ArchSpec {
  std::string kind = "mlp";
  std::size_t in_channels = 1;
  std::size_t in_height = 28;
  std::size_t in_width = 28;
  std::vector<std::size_t> hidden{256, 256};
  std::vector<std::size_t> conv_channels{32, 64};
  std::size_t dense = 128;

  std::size_t input_dim() const { return in_channels * in_height * in_width; }
  // Width of the trunk output both heads consume.
  std::size_t feature_dim() const;
  // Throws UnknownArchitectureError or InvalidArgumentError.
  void validate() const;
  std::string describe() const;
};

// Default widths for `name` ("mlp" or "convnet4") on inputs of shape [c, h, w].
ArchSpec make_arch(const std::string& name, std::size_t c, std::size_t h, std::size_t w);

// Ordered named parameters. Order is the order of insertion and is the order
// of every bound view handed to the forward functions.
class ParamSet {
 public:
  void add(std::string name, Tensor value, bool decay);

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  bool decay(std::size_t i) const { return entries_.at(i).decay; }
  void set_value(std::size_t i, Tensor value);
  // Index of `name`; throws InvalidArgumentError when absent.
  std::size_t index_of(const std::string& name) const;
  std::size_t numel() const;

  // Registers every parameter as a requires-grad leaf of `tape`.
  std::vector<Tensor> bind(ag::Tape& tape) const;
  // Constant view, for forward passes that record nothing.
  std::vector<Tensor> values() const;

  bool operator==(const ParamSet& other) const;

 private:
  struct Entry {
    std::string name;
    Tensor value;
    bool decay;
  };
  std::vector<Entry> entries_;
};

struct MultiTaskOutput {
  Tensor features;  // trunk output [N, F]
  Tensor primary;   // [N, num_primary] probabilities
  Tensor aux;       // [N, total_aux] probabilities
};

// Shared trunk followed by a primary head and an auxiliary head. Trunk
// parameters come first in `params`.
struct MultiTaskNet {
  ArchSpec arch;
  std::size_t num_primary = 0;
  std::size_t total_aux = 0;
  ParamSet params;
  std::size_t trunk_size = 0;

  // `p` is a bound (or constant) view with the layout of `params`.
  MultiTaskOutput forward(std::span<const Tensor> p, const Tensor& x) const;
  Tensor features(std::span<const Tensor> p, const Tensor& x) const;
};

// Independent backbone with one K-way head, finished by Mask SoftMax.
struct LabelGenNet {
  ArchSpec arch;
  hierarchy::Hierarchy psi;
  ParamSet params;

  // masks: [N, K] rows from build_masks.
  Tensor forward(std::span<const Tensor> p, const Tensor& x, const Tensor& masks) const;
};

MultiTaskNet build_multitask_net(const ArchSpec& arch, std::size_t num_primary,
                                 std::size_t total_aux, std::uint64_t seed);
LabelGenNet build_labelgen_net(const ArchSpec& arch, const hierarchy::Hierarchy& psi,
                               std::uint64_t seed);

enum class OptimizerKind { PlainSgd, MomentumSgd };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::PlainSgd;
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<std::vector<double>> velocity;  // filled lazily, one per parameter
};

OptimizerState make_optimizer(OptimizerKind kind, double lr, double momentum, double weight_decay);

// Gradients of `bound` (a view returned by params.bind) in parameter order;
// throws MissingGradientError naming the first parameter without one.
std::vector<Tensor> gradients_for(const ParamSet& params, std::span<const Tensor> bound,
                                  const ag::GradMap& grads);

// v <- momentum * v + (g + wd * p) and p <- p - lr * v; plain SGD uses v = g + wd * p.
// Weight decay only touches parameters flagged for decay.
void sgd_step(ParamSet& params, std::span<const Tensor> grads, OptimizerState& opt);
void sgd_step(ParamSet& params, std::span<const Tensor> bound, const ag::GradMap& grads,
              OptimizerState& opt);

// theta+ = theta - alpha * grad(loss), with the gradients kept on the tape so
// that anything computed from theta+ can be differentiated further.
std::vector<Tensor> virtual_sgd_step(std::span<const Tensor> bound, const Tensor& loss,
                                     double alpha);

enum class ScheduleKind { StepHalving, Cosine, Constant };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double base = 0.1;
  std::size_t period = 50;   // step-halving
  std::size_t horizon = 30;  // cosine
};

inline constexpr double kMinCosineLr = 1e-8;

double schedule_lr(const LrSchedule& sched, std::size_t epoch);

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Binary container: magic, version, free-form meta text, named tensors.
struct Checkpoint {
  std::string meta;
  std::vector<NamedTensor> tensors;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'X', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Appends every parameter of `params` under `prefix`.
void append_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet& params);
// Overwrites `params` from the entries under `prefix`; names and shapes must match.
void restore_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet& params);

}  // namespace maxl::nn
