#include "maxl/engine.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <malloc.h>
#include <numeric>
#include <sstream>

#include "maxl/diagnostics.hpp"
#include "maxl/errors.hpp"

namespace maxl::engine {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  return hierarchy::one_hot(labels, classes);
}

class LabelGenSource final : public LabelSource {
 public:
  explicit LabelGenSource(const TrainState& state) : state_(state) {}

  Tensor train_labels(const Batch& batch) override { return peek_labels(batch); }

  Tensor peek_labels(const Batch& batch) override {
    ag::NoGradScope ng;
    const auto& gen = state_.labelgen;
    const Tensor masks = hierarchy::build_masks(batch.labels, gen.psi);
    return gen.forward(gen.params.values(), batch.x, masks);
  }

  double utilization(const data::Dataset& train) override {
    return diagnostics::label_utilization(state_.labelgen, train);
  }

 private:
  const TrainState& state_;
};

void check_finite(double value, const char* what, std::size_t batch_index, std::size_t epoch) {
  if (!std::isfinite(value)) {
    throw NonFiniteLossError(std::string(what) + " is not finite at epoch " +
                                 std::to_string(epoch + 1) + ", batch " +
                                 std::to_string(batch_index),
                             batch_index);
  }
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

double LabelSource::utilization(const data::Dataset&) { return kNaN; }

PrecisionScope::PrecisionScope(const config::RunConfig& cfg) : previous_(ag::matmul_precision()) {
  ag::set_matmul_precision(cfg.precision == "f32" ? ag::Precision::F32 : ag::Precision::F64);
}

PrecisionScope::~PrecisionScope() { ag::set_matmul_precision(previous_); }

Batch make_batch(const data::Dataset& ds, std::span<const std::size_t> indices) {
  Batch b;
  b.indices.assign(indices.begin(), indices.end());
  b.x = ds.batch_images(indices);
  b.labels = ds.batch_labels(indices);
  return b;
}

TrainState make_state(const config::RunConfig& cfg, const nn::ArchSpec& arch,
                      const hierarchy::Hierarchy& psi, std::size_t num_primary) {
  TrainState s;
  s.multitask = nn::build_multitask_net(arch, num_primary, psi.total(), 2 * cfg.seed);
  s.labelgen = nn::build_labelgen_net(arch, psi, 2 * cfg.seed + 1);
  const auto kind = cfg.momentum > 0.0 ? nn::OptimizerKind::MomentumSgd
                                       : nn::OptimizerKind::PlainSgd;
  s.mt_opt = nn::make_optimizer(kind, cfg.alpha, cfg.momentum, cfg.weight_decay);
  s.lg_opt = nn::make_optimizer(nn::OptimizerKind::PlainSgd, cfg.beta, 0.0, cfg.beta_weight_decay);
  s.loss.gamma = cfg.gamma;
  s.loss.lambda = cfg.lambda;
  s.seed = cfg.seed;
  s.batch_size = cfg.batch_size;
  s.alpha = cfg.alpha;
  return s;
}

std::unique_ptr<LabelSource> labelgen_source(const TrainState& state) {
  return std::make_unique<LabelGenSource>(state);
}

PassMetrics auxiliary_training_pass(TrainState& state, const data::Dataset& train,
                                    LabelSource* labels) {
  if (train.size() == 0) throw EmptyDatasetError("auxiliary pass: empty training set");
  auto& net = state.multitask;
  PassMetrics m;
  const auto order = data::batches(train.size(), state.batch_size, state.epoch, state.seed, 0);
  for (std::size_t bi = 0; bi < order.size(); ++bi) {
    const Batch batch = make_batch(train, order[bi]);
    const Tensor y_pri = one_hot(batch.labels, net.num_primary);
    Tensor y_aux;
    if (labels) y_aux = labels->train_labels(batch);

    ag::Tape tape;
    ag::TapeScope scope(tape);
    const auto bound = net.params.bind(tape);
    const auto out = net.forward(bound, batch.x);
    const Tensor lp = losses::focal_loss(out.primary, y_pri, state.loss.gamma);
    Tensor loss = lp;
    Tensor la;
    if (labels) {
      la = losses::focal_loss(out.aux, y_aux, state.loss.gamma);
      loss = ag::add(lp, la);
    }
    check_finite(loss.item(), "multi-task loss", bi, state.epoch);
    const double w = static_cast<double>(batch.indices.size()) / static_cast<double>(train.size());
    m.primary_loss += w * lp.item();
    m.aux_loss += labels ? w * la.item() : 0.0;
    // Explicit wrt: the unused aux head still gets (zero) gradients.
    const ag::GradMap grads = ag::backward(loss, false, bound);
    nn::sgd_step(net.params, bound, grads, state.mt_opt);
  }
  if (!labels) m.aux_loss = kNaN;
  m.meta_loss = kNaN;
  m.entropy = kNaN;
  return m;
}

MetaTerms meta_objective(const TrainState& state, const Batch& batch, std::vector<Tensor>* grads) {
  const auto& net = state.multitask;
  const auto& gen = state.labelgen;
  const Tensor y_pri = one_hot(batch.labels, net.num_primary);
  const Tensor masks = hierarchy::build_masks(batch.labels, gen.psi);

  ag::Tape tape;
  ag::TapeScope scope(tape);
  const auto theta1 = net.params.bind(tape);
  const auto theta2 = gen.params.bind(tape);
  const Tensor y_aux = gen.forward(theta2, batch.x, masks);

  const auto out = net.forward(theta1, batch.x);
  const Tensor inner = ag::add(losses::focal_loss(out.primary, y_pri, state.loss.gamma),
                               losses::focal_loss(out.aux, y_aux, state.loss.gamma));
  const auto theta1_plus = nn::virtual_sgd_step(theta1, inner, state.alpha);

  const auto after = net.forward(theta1_plus, batch.x);
  const Tensor entropy = losses::entropy_reg(y_aux);
  const Tensor meta = ag::add(losses::focal_loss(after.primary, y_pri, state.loss.gamma),
                              ag::scalar_mul(entropy, state.loss.lambda));
  MetaTerms terms{meta.item(), entropy.item()};
  if (grads) {
    const ag::GradMap g = ag::backward(meta, false, theta2);
    *grads = nn::gradients_for(gen.params, theta2, g);
  }
  return terms;
}

PassMetrics meta_training_pass(TrainState& state, const data::Dataset& train) {
  if (train.size() == 0) throw EmptyDatasetError("meta pass: empty training set");
  PassMetrics m;
  const auto order = data::batches(train.size(), state.batch_size, state.epoch, state.seed, 1);
  for (std::size_t bi = 0; bi < order.size(); ++bi) {
    const Batch batch = make_batch(train, order[bi]);
    std::vector<Tensor> grads;
    const MetaTerms terms = meta_objective(state, batch, &grads);
    check_finite(terms.loss, "meta loss", bi, state.epoch);
    for (const Tensor& g : grads) {
      for (double v : g.data()) check_finite(v, "meta gradient", bi, state.epoch);
    }
    nn::sgd_step(state.labelgen.params, grads, state.lg_opt);
    const double w = static_cast<double>(batch.indices.size()) / static_cast<double>(train.size());
    m.meta_loss += w * terms.loss;
    m.entropy += w * terms.entropy;
  }
  m.primary_loss = kNaN;
  m.aux_loss = kNaN;
  return m;
}

EvalResult evaluate(const nn::MultiTaskNet& net, const data::Dataset& test, double gamma) {
  if (test.size() == 0) throw EmptyDatasetError("evaluate: empty test set");
  ag::NoGradScope ng;
  const auto params = net.params.values();
  const std::size_t c = net.num_primary;
  std::vector<std::size_t> hits(c, 0), totals(c, 0);
  EvalResult r;
  constexpr std::size_t kChunk = 100;
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = test.batch_labels(idx);
    const Tensor probs = net.forward(params, test.batch_images(idx)).primary;
    const Tensor target = one_hot(labels, c);
    const double w = static_cast<double>(idx.size()) / static_cast<double>(test.size());
    r.focal += w * losses::focal_loss(probs, target, gamma).item();
    r.cross_entropy += w * losses::cross_entropy(probs, target).item();
    const auto d = probs.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = d.subspan(i * c, c);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      ++totals[labels[i]];
      hits[labels[i]] += pred == labels[i];
    }
  }
  const std::size_t correct = std::accumulate(hits.begin(), hits.end(), std::size_t{0});
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  r.per_class.resize(c);
  for (std::size_t k = 0; k < c; ++k) {
    r.per_class[k] = totals[k] ? static_cast<double>(hits[k]) / static_cast<double>(totals[k]) : kNaN;
  }
  return r;
}

std::string metrics_value(double v) { return fmt(v); }

std::string metrics_header() {
  return "epoch,lr_alpha,lr_beta,primary_train_loss,aux_train_loss,meta_loss,entropy_term,"
         "test_accuracy,label_utilization,cosine_similarity,test_primary_focal,test_primary_ce";
}

std::string metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + fmt(m.lr_alpha) + "," + fmt(m.lr_beta) + "," +
         fmt(m.primary_train_loss) + "," + fmt(m.aux_train_loss) + "," + fmt(m.meta_loss) + "," +
         fmt(m.entropy_term) + "," + fmt(m.test_accuracy) + "," + fmt(m.label_utilization) + "," +
         fmt(m.cosine_similarity) + "," + fmt(m.test_primary_focal) + "," + fmt(m.test_primary_ce);
}

std::filesystem::path resolve_output_dir(const config::RunConfig& cfg) {
  const std::filesystem::path dir(cfg.output_dir);
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv("MAXL_OUTPUT_ROOT"); root && *root) {
    return std::filesystem::path(root) / dir;
  }
  return dir;
}

std::string checkpoint_meta(const config::RunConfig& cfg, const hierarchy::Hierarchy& psi,
                            std::size_t epoch) {
  return "epoch = " + std::to_string(epoch) + "\npsi = " + join(psi.counts()) + "\n[config]\n" +
         config::snapshot(cfg);
}

CheckpointInfo parse_checkpoint_meta(const std::string& meta) {
  const auto split = meta.find("[config]\n");
  if (split == std::string::npos) throw FormatError("checkpoint: meta block has no [config]");
  CheckpointInfo info;
  info.cfg = config::parse_config(meta.substr(split + 9));
  std::istringstream head(meta.substr(0, split));
  std::string line;
  bool have_epoch = false, have_psi = false;
  while (std::getline(head, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
    try {
      if (key == "epoch") {
        info.epoch = std::stoul(value);
        have_epoch = true;
      } else if (key == "psi") {
        std::vector<std::size_t> counts;
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) counts.push_back(std::stoul(item));
        info.psi = hierarchy::Hierarchy(std::move(counts));
        have_psi = true;
      }
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: bad meta line '" + line + "'");
    }
  }
  if (!have_epoch || !have_psi) throw FormatError("checkpoint: meta block lacks epoch or psi");
  return info;
}

ProbeMetrics probe_metrics(const config::RunConfig& cfg, const data::Dataset& train,
                           const TrainState& state, LabelSource* labels) {
  if (!labels) return {kNaN, kNaN};
  const Batch probe =
      make_batch(train, diagnostics::probe_indices(train.size(), cfg.probe_size, cfg.seed));
  diagnostics::CosineOptions opts;
  opts.gamma = cfg.gamma;
  ProbeMetrics out;
  out.cosine = diagnostics::grad_cosine(state.multitask, state.multitask.params.values(), probe.x,
                                        one_hot(probe.labels, state.multitask.num_primary),
                                        labels->peek_labels(probe), opts);
  out.utilization = labels->utilization(train);
  return out;
}

nn::ArchSpec arch_for(const config::RunConfig& cfg, const data::Dataset& ds) {
  nn::ArchSpec arch = nn::make_arch(cfg.arch, ds.channels, ds.height, ds.width);
  arch.hidden = cfg.hidden;
  arch.conv_channels = cfg.conv_channels;
  arch.dense = cfg.dense;
  arch.validate();
  return arch;
}

hierarchy::Hierarchy hierarchy_for(const config::RunConfig& cfg, std::size_t num_primary) {
  if (cfg.hierarchy == "balanced") return hierarchy::balanced_hierarchy(num_primary, cfg.aux_per_class);
  if (cfg.hierarchy == "near_balanced") {
    return hierarchy::near_balanced_hierarchy(num_primary, cfg.aux_total, cfg.hierarchy_seed);
  }
  throw ConfigError("hierarchy '" + cfg.hierarchy + "' is derived from the dataset, not built");
}

PreparedData prepare_data(const config::RunConfig& cfg) {
  config::validate(cfg);
  PreparedData out;
  std::ostringstream desc;
  if (cfg.dataset == "mnist") {
    std::string dir = cfg.data_dir;
    if (dir.empty()) {
      if (const char* env = std::getenv("MAXL_MNIST_DIR"); env && *env) dir = env;
    }
    if (dir.empty()) throw ConfigError("mnist needs data_dir or MAXL_MNIST_DIR");
    out.split = data::load_mnist(dir);
    desc << "data = mnist from " << dir << "\n";
  } else if (cfg.dataset == "cifar10" || cfg.dataset == "cifar100") {
    if (cfg.data_dir.empty()) throw ConfigError(cfg.dataset + " needs data_dir");
    const auto variant =
        cfg.dataset == "cifar10" ? data::CifarVariant::Cifar10 : data::CifarVariant::Cifar100;
    out.split = data::load_cifar(cfg.data_dir, variant);
    desc << "data = " << cfg.dataset << " from " << cfg.data_dir << "\n";
  } else {
    data::SynthParams sp;
    sp.num_primary = cfg.synth_primary;
    sp.sub_per_class = cfg.synth_sub;
    sp.dim = cfg.synth_dim;
    sp.sep = cfg.synth_sep;
    sp.n_per_sub = cfg.synth_n_per_sub;
    sp.seed = cfg.data_seed;
    out.split = data::synth_hierarchical(sp);
    desc << "data = synthetic, seed " << cfg.data_seed << "\n";
  }

  auto& train = out.split.train;
  auto& test = out.split.test;
  if (cfg.subset > 0 && cfg.subset < train.size()) {
    train = train.subset(data::stratified_subset(train.labels, train.num_classes, cfg.subset, cfg.data_seed));
  }
  if (cfg.test_subset > 0 && cfg.test_subset < test.size()) {
    test = test.subset(
        data::stratified_subset(test.labels, test.num_classes, cfg.test_subset, cfg.data_seed + 1));
  }

  if (cfg.dataset == "cifar100") {
    // Primary labels at the configured level of the human hierarchy.
    const auto map = hierarchy::default_human_map();
    const std::size_t slot = hierarchy::HumanHierarchyMap::level_slot(cfg.primary_level);
    for (auto* ds : {&train, &test}) {
      for (std::size_t i = 0; i < ds->size(); ++i) {
        ds->labels[i] = map.class_of[slot][ds->fine_labels[i]];
      }
      ds->num_classes = cfg.primary_level;
    }
    if (cfg.hierarchy == "human") {
      auto human = hierarchy::human_aux_labels(map, cfg.primary_level, cfg.aux_level, train.fine_labels);
      out.human_aux = std::move(human.aux);
      out.psi = std::move(human.psi);
    }
  }
  if (out.psi.num_primary() == 0) out.psi = hierarchy_for(cfg, train.num_classes);
  out.arch = arch_for(cfg, train);
  if (cfg.subset > 0) desc << "train_subset = stratified " << train.size() << ", seed " << cfg.data_seed << "\n";
  if (cfg.test_subset > 0) desc << "test_subset = stratified " << test.size() << "\n";
  out.description = desc.str();
  return out;
}

namespace {

void keep_heap() {
#ifdef M_MMAP_THRESHOLD
  // Activations are tens of MB and freed every op. glibc would hand them to
  // mmap/munmap each time; keeping them on the heap avoids the page faults.
  // 32 MB is the largest threshold glibc accepts.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace

TrainResult run_epochs(const config::RunConfig& cfg, const PreparedData& data, TrainState& state,
                       LabelSource* labels, bool meta) {
  keep_heap();
  const PrecisionScope precision(cfg);
  const auto& train = data.split.train;
  const auto& test = data.split.test;

  TrainResult result;
  result.output_dir = resolve_output_dir(cfg);
  const auto ckpt_dir = result.output_dir / "checkpoints";
  const auto emb_dir = result.output_dir / "embeddings";
  std::filesystem::create_directories(ckpt_dir);
  std::filesystem::create_directories(emb_dir);
  {
    std::ofstream snap(result.output_dir / "config.cfg", std::ios::trunc);
    snap << config::snapshot(cfg);
    std::ofstream info(result.output_dir / "run_info.txt", std::ios::trunc);
    info << "psi = " << join(data.psi.counts()) << "\n"
         << "train_size = " << train.size() << "\ntest_size = " << test.size() << "\n"
         << "arch = " << data.arch.describe() << "\n"
         << "cosine_similarity = trunk-gradient cosine on a fixed probe of "
         << std::min(cfg.probe_size, train.size())
         << " training samples, once per epoch after both passes\n"
         << "label_utilization = argmax coverage over the training set, once per epoch\n"
         << data.description;
    if (!snap || !info) throw IoError("cannot write run files under " + result.output_dir.string());
  }
  const auto metrics_path = result.output_dir / "metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  metrics << metrics_header() << '\n';

  nn::LrSchedule sched;
  sched.base = cfg.alpha;
  sched.period = cfg.alpha_period;
  sched.horizon = cfg.epochs;
  sched.kind = cfg.alpha_schedule == "cosine" ? nn::ScheduleKind::Cosine
               : cfg.alpha_schedule == "step" ? nn::ScheduleKind::StepHalving
                                              : nn::ScheduleKind::Constant;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    state.alpha = nn::schedule_lr(sched, epoch);
    state.mt_opt.lr = state.alpha;
    state.lg_opt.lr = cfg.beta;

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr_alpha = state.alpha;
    m.lr_beta = meta ? cfg.beta : kNaN;
    try {
      const PassMetrics aux = auxiliary_training_pass(state, train, labels);
      m.primary_train_loss = aux.primary_loss;
      m.aux_train_loss = aux.aux_loss;
      m.meta_loss = kNaN;
      m.entropy_term = kNaN;
      if (meta) {
        const PassMetrics mp = meta_training_pass(state, train);
        m.meta_loss = mp.meta_loss;
        m.entropy_term = mp.entropy;
      }
    } catch (const NonFiniteLossError& e) {
      std::ofstream fail(result.output_dir / "failure.txt", std::ios::trunc);
      fail << "epoch = " << epoch + 1 << "\nbatch_index = " << e.batch_index() << "\n"
           << "error = " << e.what() << "\n";
      throw;
    }
    const EvalResult eval = evaluate(state.multitask, test, cfg.gamma);
    m.test_accuracy = eval.accuracy;
    m.test_primary_focal = eval.focal;
    m.test_primary_ce = eval.cross_entropy;
    const ProbeMetrics probe = probe_metrics(cfg, train, state, labels);
    m.label_utilization = probe.utilization;
    m.cosine_similarity = probe.cosine;
    metrics << metrics_row(m) << '\n' << std::flush;
    result.history.push_back(m);

    const bool last = epoch + 1 == cfg.epochs;
    if (last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)) {
      nn::Checkpoint ckpt;
      ckpt.meta = checkpoint_meta(cfg, data.psi, epoch + 1);
      nn::append_params(ckpt, "mt.", state.multitask.params);
      if (meta) nn::append_params(ckpt, "lg.", state.labelgen.params);
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", epoch + 1);
      nn::save_checkpoint(ckpt_dir / name, ckpt);
    }
  }
  if (!metrics) throw IoError("write failed for " + metrics_path.string());
  if (cfg.export_embeddings) {
    diagnostics::export_embeddings(state.multitask, test, emb_dir / "test_embeddings.csv");
  }
  return result;
}

TrainResult train(const config::RunConfig& cfg, const PreparedData& data) {
  TrainState state = make_state(cfg, data.arch, data.psi, data.split.train.num_classes);
  if (cfg.method == "single") return run_epochs(cfg, data, state, nullptr, false);
  if (cfg.method != "maxl") {
    throw ConfigError("engine::train runs maxl or single; method '" + cfg.method +
                      "' is a baseline");
  }
  const auto source = labelgen_source(state);
  return run_epochs(cfg, data, state, source.get(), true);
}

}  // namespace maxl::engine
