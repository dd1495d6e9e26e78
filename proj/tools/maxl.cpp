// Command-line entry point: train, eval, diagnose, export-embeddings.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "maxl/baselines.hpp"
#include "maxl/diagnostics.hpp"
#include "maxl/engine.hpp"
#include "maxl/errors.hpp"

namespace fs = std::filesystem;
using namespace maxl;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Everything a checkpoint pins down: config, data and restored networks.
struct Restored {
  engine::CheckpointInfo info;
  engine::PreparedData data;
  engine::TrainState state;
};

Restored restore(const fs::path& path) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  Restored r{engine::parse_checkpoint_meta(ckpt.meta), {}, {}};
  r.data = engine::prepare_data(r.info.cfg);
  if (!(r.data.psi == r.info.psi)) {
    throw FormatError("checkpoint " + path.string() + ": hierarchy differs from the rebuilt data");
  }
  r.state = engine::make_state(r.info.cfg, r.data.arch, r.data.psi, r.data.split.train.num_classes);
  nn::restore_params(ckpt, "mt.", r.state.multitask.params);
  const bool has_lg = std::any_of(ckpt.tensors.begin(), ckpt.tensors.end(),
                                  [](const nn::NamedTensor& t) { return t.name.rfind("lg.", 0) == 0; });
  if (has_lg) nn::restore_params(ckpt, "lg.", r.state.labelgen.params);
  return r;
}

// Writes to `out` when given, else to stdout.
void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text << std::flush;
    return;
  }
  std::ofstream file(out, std::ios::trunc);
  if (!file || !(file << text)) throw IoError("cannot write " + out);
}

std::vector<fs::path> expand_checkpoints(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    if (fs::is_directory(a)) {
      std::vector<fs::path> found;
      const fs::path dir = fs::is_directory(fs::path(a) / "checkpoints") ? fs::path(a) / "checkpoints" : fs::path(a);
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".ckpt") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      if (found.empty()) throw IoError("no checkpoints under " + a);
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.emplace_back(a);
    }
  }
  return out;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed,
              const std::string& method, const std::string& out) {
  config::RunConfig cfg = config::load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (!method.empty()) cfg.method = method;
  if (!out.empty()) cfg.output_dir = out;
  config::validate(cfg);
  const auto data = engine::prepare_data(cfg);
  const auto result = baselines::run(cfg, data);
  const auto& last = result.history.back();
  std::cout << "method " << cfg.method << " seed " << cfg.seed << " epochs " << last.epoch
            << " test_accuracy " << fmt(last.test_accuracy) << "\n"
            << "output " << result.output_dir.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& out) {
  const Restored r = restore(checkpoint);
  const engine::PrecisionScope precision(r.info.cfg);
  const auto res = engine::evaluate(r.state.multitask, r.data.split.test, r.info.cfg.gamma);
  std::ostringstream text;
  text << "checkpoint " << checkpoint << "\nepoch " << r.info.epoch << "\naccuracy "
       << fmt(res.accuracy) << "\nfocal " << fmt(res.focal) << "\ncross_entropy "
       << fmt(res.cross_entropy) << "\n";
  for (std::size_t c = 0; c < res.per_class.size(); ++c) {
    text << "class " << c << " " << fmt(res.per_class[c]) << "\n";
  }
  emit(text.str(), out);
  return 0;
}

int cmd_diagnose(const std::vector<std::string>& checkpoints, const std::string& out) {
  std::ostringstream text;
  text << "checkpoint,epoch,label_utilization,cosine_similarity\n";
  for (const auto& path : expand_checkpoints(checkpoints)) {
    const Restored r = restore(path);
    const engine::PrecisionScope precision(r.info.cfg);
    const auto labels = baselines::fixed_label_source(r.info.cfg, r.data, r.state);
    const auto m = engine::probe_metrics(r.info.cfg, r.data.split.train, r.state, labels.get());
    text << path.string() << "," << r.info.epoch << "," << engine::metrics_value(m.utilization)
         << "," << engine::metrics_value(m.cosine) << "\n";
  }
  emit(text.str(), out);
  return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& out) {
  const Restored r = restore(checkpoint);
  const engine::PrecisionScope precision(r.info.cfg);
  diagnostics::export_embeddings(r.state.multitask, r.data.split.test, out);
  std::cout << "wrote " << r.data.split.test.size() << " rows to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta auxiliary learning: training and diagnostics"};
  app.require_subcommand(1);

  std::string config_path, method, out, checkpoint;
  std::vector<std::string> checkpoints;
  std::optional<std::uint64_t> seed;

  auto* train = app.add_subcommand("train", "train one run from a config file");
  train->add_option("--config", config_path, "run config (key = value)")->required();
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--method", method, "override the config method");
  train->add_option("--out", out, "override the output directory");

  auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--out", out, "write the report here instead of stdout");

  auto* diagnose = app.add_subcommand("diagnose", "replay cosine and utilization over checkpoints");
  diagnose->add_option("--checkpoint", checkpoints, "checkpoint files or run directories")->required();
  diagnose->add_option("--out", out, "write the CSV here instead of stdout");

  auto* exporter = app.add_subcommand("export-embeddings", "trunk features of the test set");
  exporter->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  exporter->add_option("--out", out, "CSV output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(config_path, seed, method, out);
    if (*eval) return cmd_eval(checkpoint, out);
    if (*diagnose) return cmd_diagnose(checkpoints, out);
    return cmd_export(checkpoint, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
