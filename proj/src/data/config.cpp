#include "maxl/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "maxl/errors.hpp"

namespace maxl::config {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config: key '" + key + "' expects " + want + ", got '" + value + "'");
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    bad_value(key, v, "a non-negative integer");
  }
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    bad_value(key, v, "a finite real number");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(static_cast<std::size_t>(to_uint(key, trim(item))));
  }
  if (out.empty()) bad_value(key, v, "a comma-separated list of integers");
  return out;
}

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field uint_field(T RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) {
            c.*m = static_cast<T>(to_uint(k, v));
          },
          [m](const RunConfig& c) { return std::to_string(c.*m); }};
}

Field real_field(double RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = to_real(k, v); },
          [m](const RunConfig& c) { return fmt_real(c.*m); }};
}

Field string_field(std::string RunConfig::*m, std::set<std::string> allowed = {}) {
  return {[m, allowed](RunConfig& c, const std::string& k, const std::string& v) {
            if (!allowed.empty() && !allowed.count(v)) {
              std::string options;
              for (const auto& a : allowed) options += (options.empty() ? "" : "|") + a;
              bad_value(k, v, options.c_str());
            }
            c.*m = v;
          },
          [m](const RunConfig& c) { return c.*m; }};
}

Field list_field(std::vector<std::size_t> RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = to_list(k, v); },
          [m](const RunConfig& c) { return fmt_list(c.*m); }};
}

Field bool_field(bool RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = to_bool(k, v); },
          [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}

// Ordered, so snapshots list keys in a fixed order.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"dataset", string_field(&RunConfig::dataset, {"mnist", "cifar10", "cifar100", "synth"})},
      {"data_dir", string_field(&RunConfig::data_dir)},
      {"data_seed", uint_field(&RunConfig::data_seed)},
      {"subset", uint_field(&RunConfig::subset)},
      {"test_subset", uint_field(&RunConfig::test_subset)},
      {"synth_primary", uint_field(&RunConfig::synth_primary)},
      {"synth_sub", uint_field(&RunConfig::synth_sub)},
      {"synth_dim", uint_field(&RunConfig::synth_dim)},
      {"synth_sep", real_field(&RunConfig::synth_sep)},
      {"synth_n_per_sub", uint_field(&RunConfig::synth_n_per_sub)},
      {"arch", string_field(&RunConfig::arch, {"mlp", "convnet4"})},
      {"hidden", list_field(&RunConfig::hidden)},
      {"conv_channels", list_field(&RunConfig::conv_channels)},
      {"dense", uint_field(&RunConfig::dense)},
      {"precision", string_field(&RunConfig::precision, {"f64", "f32"})},
      {"method", string_field(&RunConfig::method, {"maxl", "single", "random", "kmeans", "human"})},
      {"hierarchy", string_field(&RunConfig::hierarchy, {"balanced", "near_balanced", "human"})},
      {"aux_per_class", uint_field(&RunConfig::aux_per_class)},
      {"aux_total", uint_field(&RunConfig::aux_total)},
      {"hierarchy_seed", uint_field(&RunConfig::hierarchy_seed)},
      {"primary_level", uint_field(&RunConfig::primary_level)},
      {"aux_level", uint_field(&RunConfig::aux_level)},
      {"gamma", real_field(&RunConfig::gamma)},
      {"lambda", real_field(&RunConfig::lambda)},
      {"alpha", real_field(&RunConfig::alpha)},
      {"alpha_schedule", string_field(&RunConfig::alpha_schedule, {"cosine", "step", "constant"})},
      {"alpha_period", uint_field(&RunConfig::alpha_period)},
      {"momentum", real_field(&RunConfig::momentum)},
      {"weight_decay", real_field(&RunConfig::weight_decay)},
      {"beta", real_field(&RunConfig::beta)},
      {"beta_weight_decay", real_field(&RunConfig::beta_weight_decay)},
      {"latent_dim", uint_field(&RunConfig::latent_dim)},
      {"ae_lr", real_field(&RunConfig::ae_lr)},
      {"epochs", uint_field(&RunConfig::epochs)},
      {"batch_size", uint_field(&RunConfig::batch_size)},
      {"seed", uint_field(&RunConfig::seed)},
      {"output_dir", string_field(&RunConfig::output_dir)},
      {"checkpoint_every", uint_field(&RunConfig::checkpoint_every)},
      {"probe_size", uint_field(&RunConfig::probe_size)},
      {"export_embeddings", bool_field(&RunConfig::export_embeddings)},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, field] : fields()) {
    if (name == key) return &field;
  }
  return nullptr;
}

}  // namespace

void validate(const RunConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (c.epochs == 0) fail("epochs must be >= 1");
  if (c.batch_size == 0) fail("batch_size must be >= 1");
  if (c.gamma < 0.0) fail("gamma must be >= 0");
  if (c.lambda < 0.0) fail("lambda must be >= 0");
  if (c.alpha < 0.0 || c.beta < 0.0 || c.ae_lr < 0.0) fail("learning rates must be >= 0");
  if (c.momentum < 0.0 || c.momentum >= 1.0) fail("momentum must be in [0,1)");
  if (c.weight_decay < 0.0 || c.beta_weight_decay < 0.0) fail("weight decay must be >= 0");
  if (c.alpha_schedule == "step" && c.alpha_period == 0) fail("alpha_period must be >= 1");
  if (c.latent_dim == 0) fail("latent_dim must be >= 1");
  if (c.hierarchy == "balanced" && c.aux_per_class == 0) fail("aux_per_class must be >= 1");
  if (c.hierarchy == "near_balanced" && c.aux_total == 0) fail("near_balanced needs aux_total");
  if (c.method == "human" && c.hierarchy != "human") fail("method=human needs hierarchy=human");
  if (c.hierarchy == "human" && c.dataset != "cifar100") {
    fail("hierarchy=human needs dataset=cifar100");
  }
  if (c.hierarchy == "human" && c.aux_level <= c.primary_level) {
    fail("aux_level must be finer than primary_level");
  }
  if (c.dataset == "synth" && !(c.synth_sep > 0.0)) fail("synth_sep must be > 0");
  if (c.output_dir.empty()) fail("output_dir must not be empty");
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) + " is not 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* field = find_field(key);
    if (field == nullptr) {
      throw ConfigError("config: unknown key '" + key + "' on line " + std::to_string(line_no));
    }
    if (!seen.insert(key).second) throw ConfigError("config: key '" + key + "' given twice");
    field->set(cfg, key, value);
  }
  validate(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string snapshot(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

bool operator==(const RunConfig& a, const RunConfig& b) { return snapshot(a) == snapshot(b); }

}  // namespace maxl::config
