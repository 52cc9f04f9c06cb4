#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "diffprune/budget.hpp"
#include "diffprune/checkpoint.hpp"
#include "diffprune/data.hpp"
#include "diffprune/denoiser.hpp"
#include "diffprune/elastic.hpp"

namespace diffprune {

// Flat dotted keys. Every key has a default; unknown keys are rejected.
inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> d{
      {"seed", "0"},
      {"data.family", "sines"},
      {"data.train_size", "4096"},
      {"data.heldout_size", "1024"},
      {"data.num_classes", "0"},
      {"data.length", "32"},
      {"schedule.T", "100"},
      {"schedule.beta_start", "0.001"},
      {"schedule.beta_end", "0.2"},
      {"model.stage_channels", "16,32,64"},
      {"model.layers_per_stage", "2"},
      {"model.attention_stages", "2"},
      {"model.heads", "4"},
      {"model.time_embed_dim", "64"},
      {"train.iters", "3000"},
      {"train.batch_size", "64"},
      {"train.lr", "0.001"},
      {"train.weight_decay", "0.01"},
      {"cluster.num_clusters", "2"},
      {"cluster.batch_size", "256"},
      {"moe.enabled", "true"},
      {"elastic.depth", "true"},
      {"elastic.width", "true"},
      {"elastic.depth_drop_p", "0.5"},
      {"elastic.depth_iters", "1000"},
      {"elastic.width_iters", "1000"},
      {"elastic.batch_size", "64"},
      {"budget.target", "0.5"},
      {"budget.agent", "era"},
      {"budget.iters", "500"},
      {"budget.tau", "0.4"},
      {"budget.batch_size", "64"},
      {"budget.lr", "0.001"},
      {"budget.weight_decay", "0.01"},
      {"budget.loss", "true"},
      {"budget.depth_ranking", ""},
      {"era.input_dim", "128"},
      {"era.hidden_dim", "256"},
      {"finetune.iters", "500"},
      {"finetune.batch_size", "64"},
      {"sample.sampler", "ddim"},
      {"sample.steps", "100"},
      {"sample.n", "256"},
      {"eval.permutations", "200"},
      {"eval.heldout_batch", "256"},
  };
  return d;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

class PipelineConfig {
 public:
  PipelineConfig() {
    for (const auto& [k, v] : config_defaults()) values_[k] = v;
  }

  static PipelineConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot read config file " + path);
    PipelineConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ValidationError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ValidationError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  // "key=value"
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("override must be key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError("unknown config key '" + key + "'");
    return it->second;
  }

  std::int64_t integer(const std::string& key) const {
    const std::string& s = str(key);
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::logic_error&) {
      throw ValidationError("config key '" + key + "' expects an integer, got '" + s + "'");
    }
  }

  std::size_t count(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw ValidationError("config key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  }

  double real(const std::string& key) const {
    const std::string& s = str(key);
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::logic_error&) {
      throw ValidationError("config key '" + key + "' expects a number, got '" + s + "'");
    }
  }

  bool flag(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ValidationError("config key '" + key + "' expects a boolean, got '" + s + "'");
  }

  std::vector<std::size_t> sizes(const std::string& key) const {
    try {
      return parse_sizes(str(key));
    } catch (const ValidationError& e) {
      throw ValidationError("config key '" + key + "': " + e.what());
    }
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  // FNV-1a over "key=value\n" of every key starting with one of the prefixes.
  std::string hash(const std::vector<std::string>& prefixes) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : values_) {
      bool match = false;
      for (const auto& p : prefixes) match = match || k == p || k.rfind(p + ".", 0) == 0;
      if (!match) continue;
      for (char c : k + "=" + v + "\n") {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
      }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  // ----------------------------------------------------------- typed views

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("seed")); }

  DatasetSpec dataset() const {
    DatasetSpec d;
    d.family = str("data.family");
    d.train_size = count("data.train_size");
    d.heldout_size = count("data.heldout_size");
    d.num_classes = count("data.num_classes");
    d.length = count("data.length");
    return d;
  }

  NoiseSchedule schedule() const {
    return make_schedule(static_cast<int>(integer("schedule.T")), real("schedule.beta_start"), real("schedule.beta_end"));
  }

  ModelConfig model(const Dataset& data) const {
    ModelConfig m;
    m.input_channels = data.channels;
    m.signal_length = data.length;
    m.stage_channels = sizes("model.stage_channels");
    m.layers_per_stage = count("model.layers_per_stage");
    m.attention_stages = sizes("model.attention_stages");
    m.heads = count("model.heads");
    m.time_embed_dim = count("model.time_embed_dim");
    m.num_classes = count("data.num_classes");
    // Point data (length 1) runs the single-stage variant.
    if (data.length == 1) {
      m.stage_channels.resize(1);
      m.attention_stages.clear();
    }
    m.validate();
    return m;
  }

  TrainConfig pretrain() const {
    TrainConfig t;
    t.iters = count("train.iters");
    t.batch_size = count("train.batch_size");
    t.optim.lr = real("train.lr");
    t.optim.weight_decay = real("train.weight_decay");
    return t;
  }

  TrainConfig finetune() const {
    TrainConfig t = pretrain();
    t.iters = count("finetune.iters");
    t.batch_size = count("finetune.batch_size");
    return t;
  }

  ElasticConfig elastic() const {
    ElasticConfig e;
    e.depth_drop_p = real("elastic.depth_drop_p");
    e.depth_iters = count("elastic.depth_iters");
    e.width_iters = count("elastic.width_iters");
    e.batch_size = count("elastic.batch_size");
    e.optim.lr = real("train.lr");
    e.optim.weight_decay = real("train.weight_decay");
    e.validate();
    return e;
  }

  BudgetConfig budget() const {
    BudgetConfig b;
    b.target_fraction = real("budget.target");
    b.iters = count("budget.iters");
    b.tau = real("budget.tau");
    b.batch_size = count("budget.batch_size");
    b.optim.lr = real("budget.lr");
    b.optim.weight_decay = real("budget.weight_decay");
    b.loss_enabled = flag("budget.loss");
    b.validate();
    const std::string agent = str("budget.agent");
    if (agent != "era" && agent != "naive") throw ValidationError("budget.agent must be 'era' or 'naive'");
    return b;
  }

  void validate() const {
    const std::string family = dataset().family;
    require(family == "sines" || family == "gmm2d", "data.family must be 'sines' or 'gmm2d'");
    schedule();
    require(count("train.batch_size") > 0, "train.batch_size must be positive");
    require(count("cluster.num_clusters") >= 1, "cluster.num_clusters must be at least 1");
    require(count("cluster.batch_size") > 0, "cluster.batch_size must be positive");
    elastic();
    budget();
    sampler_from_string(str("sample.sampler"));
    require(count("sample.steps") >= 1 && static_cast<std::int64_t>(count("sample.steps")) <= integer("schedule.T"),
            "sample.steps must lie in [1, T]");
    require(count("sample.n") >= 256, "sample.n must be at least 256");
    require(count("eval.heldout_batch") > 0, "eval.heldout_batch must be positive");
    require(count("era.input_dim") > 0 && count("era.hidden_dim") > 0, "era dimensions must be positive");
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace diffprune
