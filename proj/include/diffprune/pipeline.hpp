#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffprune/budget.hpp"
#include "diffprune/checkpoint.hpp"
#include "diffprune/clustering.hpp"
#include "diffprune/config.hpp"
#include "diffprune/data.hpp"
#include "diffprune/denoiser.hpp"
#include "diffprune/diffusion.hpp"
#include "diffprune/elastic.hpp"
#include "diffprune/era.hpp"
#include "diffprune/metrics.hpp"
#include "diffprune/report.hpp"

namespace diffprune {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

// ------------------------------------------------------ evaluation helpers

inline std::vector<Denoiser> denoisers_of(const std::vector<ExpertModel>& experts) {
  std::vector<Denoiser> d;
  for (const auto& e : experts) d.push_back(as_denoiser(e));
  return d;
}

inline std::vector<int> balanced_labels(std::size_t n, std::size_t classes) {
  std::vector<int> c;
  if (classes == 0) return c;
  for (std::size_t i = 0; i < n; ++i) c.push_back(static_cast<int>(i % classes));
  return c;
}

inline SampleResult sample_experts(const std::vector<ExpertModel>& experts, const IntervalPartition& partition,
                                   const NoiseSchedule& sched, SamplerKind kind, int steps, std::size_t n,
                                   std::uint64_t seed) {
  require(!experts.empty(), "sampling: no experts");
  const auto& c = experts.front().config;
  const auto labels = balanced_labels(n, c.num_classes);
  return sample_mixture(denoisers_of(experts), partition, sched, kind, steps, n, c.input_channels, c.signal_length,
                        seed, labels);
}

// Mean squared noise-prediction error of the mixture on held-out data with
// t ~ U[1, T]. The timesteps and noise depend only on the seed, so different
// mixtures are compared on identical draws.
inline double heldout_mixture_loss(const std::vector<ExpertModel>& experts, const IntervalPartition& partition,
                                   const Dataset& heldout, const NoiseSchedule& sched, std::uint64_t seed,
                                   std::size_t batch) {
  require(experts.size() == partition.size(), "held-out loss: one expert per interval expected");
  require(heldout.size() > 0 && batch > 0, "held-out loss: empty data");
  NoGradScope ng;
  Rng rng(seed);
  double total = 0.0;
  const std::size_t per = heldout.sample_size();
  for (std::size_t lo = 0; lo < heldout.size(); lo += batch) {
    const Batch b = heldout.range(lo, lo + batch);
    const std::size_t n = b.x0.dim(0);
    std::vector<int> t(n);
    for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, sched.T));
    const Tensor eps = standard_normal(b.x0.shape(), rng);
    const Tensor xt = q_sample(b.x0, t, eps, sched);
    for (std::size_t e = 0; e < experts.size(); ++e) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < n; ++i) {
        if (partition.intervals[e].contains(t[i])) rows.push_back(i);
      }
      if (rows.empty()) continue;
      std::vector<double> xs, es;
      std::vector<int> ts, cs;
      for (auto i : rows) {
        xs.insert(xs.end(), xt.data() + i * per, xt.data() + (i + 1) * per);
        es.insert(es.end(), eps.data() + i * per, eps.data() + (i + 1) * per);
        ts.push_back(t[i]);
        if (!b.labels.empty()) cs.push_back(b.labels[i]);
      }
      const Shape shape{rows.size(), heldout.channels, heldout.length};
      const Tensor pred = forward(experts[e], Tensor(shape, std::move(xs)), ts, cs);
      for (std::size_t k = 0; k < pred.size(); ++k) total += (pred[k] - es[k]) * (pred[k] - es[k]);
    }
  }
  return total / static_cast<double>(heldout.size());
}

// Interval loss of one model on held-out data with seeded draws.
inline double heldout_interval_loss(const ExpertModel& model, Interval interval, const Dataset& heldout,
                                    const NoiseSchedule& sched, std::uint64_t seed, std::size_t batch) {
  NoGradScope ng;
  Rng rng(seed);
  const Denoiser d = as_denoiser(model);
  double total = 0.0;
  for (std::size_t lo = 0; lo < heldout.size(); lo += batch) {
    const Batch b = heldout.range(lo, lo + batch);
    total += interval_loss(d, b, interval, sched, rng).item() * static_cast<double>(b.x0.dim(0));
  }
  return total / static_cast<double>(heldout.size());
}

struct SampleMetrics {
  double mmd2 = 0.0;
  double energy = 0.0;
  double p_value = 1.0;
  double bandwidth = 0.0;
};

// Generated set against the first n held-out samples.
inline SampleMetrics compare_samples(const Tensor& generated, const Dataset& heldout, std::size_t permutations,
                                     std::uint64_t seed) {
  const std::size_t n = generated.dim(0);
  require(heldout.size() >= n, "evaluation: held-out set smaller than the generated set");
  const SampleSet gen = SampleSet::from(generated);
  const SampleSet real = SampleSet::from(heldout.range(0, n).x0);
  SampleMetrics m;
  m.bandwidth = median_pairwise_distance(real);
  Rng rng(seed);
  const auto test = mmd_permutation_test(gen, real, m.bandwidth, permutations, rng);
  m.mmd2 = test.statistic;
  m.p_value = test.p_value;
  m.energy = energy_distance(gen, real);
  return m;
}

inline std::vector<ExpertModel> finetune_experts(std::vector<ExpertModel> experts, const IntervalPartition& partition,
                                                 const TrainConfig& cfg, const Dataset& data,
                                                 const NoiseSchedule& sched, const Rng& rng,
                                                 std::vector<std::vector<double>>* logs = nullptr) {
  require(experts.size() == partition.size(), "finetune: one expert per interval expected");
  for (std::size_t i = 0; i < experts.size(); ++i) {
    Rng r = rng.fork(i);
    auto losses = train_interval(experts[i], partition.intervals[i], cfg, data, sched, r, {}, "finetune");
    if (logs != nullptr) logs->push_back(std::move(losses));
  }
  return experts;
}

// --------------------------------------------------- architecture descriptor

inline const char* section_name(Section s) {
  return s == Section::encoder ? "encoder" : (s == Section::middle ? "middle" : "decoder");
}

inline json architecture_json(const ExpertModel& m, const Architecture& a) {
  json e;
  e["depth_kept"] = a.depth_kept;
  json layers = json::array();
  const auto slots = m.width_slots();
  for (std::size_t k = 0; k < slots.size(); ++k) {
    json l;
    l["slot"] = k;
    l["section"] = section_name(slots[k].section);
    l["layer"] = slots[k].layer;
    l["kind"] = slots[k].attention ? "heads" : "channels";
    l["units"] = m.width_units(slots[k]);
    l["kept_count"] = a.width_kept[k].size();
    l["kept"] = a.width_kept[k];
    layers.push_back(l);
  }
  e["width"] = layers;
  return e;
}

inline Architecture architecture_from_json(const json& e) {
  Architecture a;
  a.depth_kept = e.at("depth_kept").get<std::vector<bool>>();
  for (const auto& l : e.at("width")) a.width_kept.push_back(l.at("kept").get<std::vector<std::size_t>>());
  return a;
}

inline json partition_json(const IntervalPartition& p) {
  json j;
  j["T"] = p.T;
  j["cuts"] = p.cuts;
  json iv = json::array();
  for (const auto& i : p.intervals) iv.push_back({i.lo, i.hi});
  j["intervals"] = iv;
  j["weights"] = p.weights;
  return j;
}

inline json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("missing artifact: " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("cannot parse " + path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  auto os = open_output(path);
  os << j.dump(2) << '\n';
}

// Random importance-prefix architectures whose mixture MACs match a target:
// per-layer keep fractions r_l ~ U[0, 1] scaled by a common factor found by
// bisection, random depth units. The draw with the closest mixture MACs over
// a few attempts is returned.
inline std::vector<Architecture> random_prefix_architectures(const std::vector<ExpertModel>& experts,
                                                             const IntervalPartition& partition, double target_macs,
                                                             Rng& rng) {
  std::vector<MacsTable> tables;
  for (const auto& e : experts) tables.push_back(macs_table(e));
  std::vector<Architecture> best;
  double best_gap = std::numeric_limits<double>::infinity();
  for (int attempt = 0; attempt < 20; ++attempt) {
    std::vector<std::vector<bool>> depth;
    std::vector<std::vector<double>> ratio;
    for (const auto& e : experts) {
      std::vector<bool> d;
      for (std::size_t j = 0; j < e.depth_slots().size(); ++j) d.push_back(rng.bernoulli(0.5));
      depth.push_back(d);
      std::vector<double> r;
      for (std::size_t k = 0; k < e.width_slots().size(); ++k) r.push_back(rng.uniform());
      ratio.push_back(r);
    }
    auto build = [&](double s) {
      std::vector<Architecture> archs;
      std::vector<std::int64_t> macs;
      for (std::size_t i = 0; i < experts.size(); ++i) {
        Architecture a;
        a.depth_kept = depth[i];
        const auto slots = experts[i].width_slots();
        for (std::size_t k = 0; k < slots.size(); ++k) {
          const std::size_t w = experts[i].width_units(slots[k]);
          const double f = std::clamp(s * ratio[i][k], 0.0, 1.0);
          const auto count = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(f * static_cast<double>(w))), 1, w);
          a.width_kept.push_back(importance_prefix(experts[i].importance[k], count));
        }
        macs.push_back(tables[i].predict(a));
        archs.push_back(std::move(a));
      }
      return std::make_pair(archs, mixture_macs(macs, partition));
    };
    double lo = 0.0, hi = 1.0;
    while (build(hi).second < target_macs && hi < 1e6) hi *= 2.0;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      (build(mid).second < target_macs ? lo : hi) = mid;
    }
    for (double s : {lo, hi}) {
      auto [archs, macs] = build(s);
      const double gap = std::fabs(macs - target_macs);
      if (gap < best_gap) {
        best_gap = gap;
        best = archs;
      }
    }
  }
  return best;
}

// ------------------------------------------------------------------ stages

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"pretrain",      "align", "cluster",     "elastic-depth",
                                          "elastic-width", "prune", "materialize", "finetune",
                                          "sample",        "eval",  "report"};
  return s;
}

// Config keys each stage's outputs depend on, cumulative along the chain.
inline std::vector<std::string> stage_keys(const std::string& stage) {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> own{
      {"pretrain", {"seed", "data", "schedule", "model", "train"}},
      {"align", {"cluster.batch_size"}},
      {"cluster", {"cluster.num_clusters", "moe.enabled"}},
      {"elastic-depth", {"elastic.depth", "elastic.depth_drop_p", "elastic.depth_iters", "elastic.batch_size"}},
      {"elastic-width", {"elastic.width", "elastic.width_iters"}},
      {"prune", {"budget", "era"}},
      {"materialize", {}},
      {"finetune", {"finetune"}},
      {"sample", {"sample"}},
      {"eval", {"eval"}},
      {"report", {}},
  };
  std::vector<std::string> keys;
  for (const auto& [name, k] : own) {
    keys.insert(keys.end(), k.begin(), k.end());
    if (name == stage) return keys;
  }
  throw ValidationError("unknown stage '" + stage + "'");
}

struct RunOptions {
  fs::path out = "run";
  bool allow_hash_mismatch = false;
  std::ostream* log = &std::cerr;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, RunOptions opts) : cfg_(std::move(cfg)), opts_(std::move(opts)) {
    cfg_.validate();
    require(cfg_.count("data.heldout_size") >= cfg_.count("sample.n"), "data.heldout_size must be at least sample.n");
    sched_ = cfg_.schedule();
  }

  const PipelineConfig& config() const { return cfg_; }
  const fs::path& out() const { return opts_.out; }
  const NoiseSchedule& schedule() const { return sched_; }

  std::string stage_hash(const std::string& stage) const { return cfg_.hash(stage_keys(stage)); }

  const DataSplit& data() {
    if (!data_) data_ = generate_dataset(cfg_.dataset(), Rng(cfg_.seed()).fork(fnv1a("data")));
    return *data_;
  }

  Rng stage_rng(const std::string& stage) const { return Rng(cfg_.seed()).fork(fnv1a(stage)); }

  bool up_to_date(const std::string& stage) const {
    std::ifstream is(manifest_path(stage));
    std::string line;
    while (std::getline(is, line)) {
      if (line == "config_hash=" + stage_hash(stage)) return true;
    }
    return false;
  }

  // Runs one stage, or every stage in order for "all" (skipping stages whose
  // manifest matches the current configuration).
  void run(const std::string& stage) {
    if (stage == "all") {
      for (const auto& s : stage_names()) {
        if (up_to_date(s)) {
          say(s, "up to date, skipped");
          continue;
        }
        run_stage(s);
      }
      return;
    }
    stage_keys(stage);
    run_stage(stage);
  }

  // ---------------------------------------------------------- artifacts

  fs::path path(const std::string& name) const { return opts_.out / name; }
  fs::path manifest_path(const std::string& stage) const { return path(stage + ".done"); }

  ExpertModel load_model(const std::string& file, const std::string& stage) const {
    return read_model(load_checkpoint(path(file), stage_hash(stage), opts_.allow_hash_mismatch));
  }

  IntervalPartition load_partition() const {
    const json j = read_json(path("partition.json"));
    return IntervalPartition::from_cuts(j.at("cuts").get<std::vector<int>>(), j.at("T").get<int>());
  }

  std::vector<ExpertModel> load_experts(const std::string& suffix, const std::string& stage) const {
    std::vector<ExpertModel> e;
    const auto p = load_partition();
    for (std::size_t i = 0; i < p.size(); ++i) e.push_back(load_model(expert_file(i, suffix), stage));
    return e;
  }

  static std::string expert_file(std::size_t i, const std::string& suffix) {
    return "expert_" + std::to_string(i) + "_" + suffix + ".ckpt";
  }

 private:
  void say(const std::string& stage, const std::string& msg) const {
    if (opts_.log != nullptr) *opts_.log << "[" << stage << "] " << msg << std::endl;
  }

  void require_stage(const std::string& stage) const {
    const fs::path m = manifest_path(stage);
    if (!fs::exists(m)) {
      throw ValidationError("missing artifact: " + m.string() + " (run stage '" + stage + "' first)");
    }
    if (!up_to_date(stage) && !opts_.allow_hash_mismatch) {
      throw ValidationError("stage '" + stage + "' in " + opts_.out.string() +
                            " was produced with a different configuration (hash " + stage_hash(stage) +
                            " expected); rerun it or pass --allow-hash-mismatch");
    }
  }

  void run_stage(const std::string& stage) {
    const auto& names = stage_names();
    const auto it = std::find(names.begin(), names.end(), stage);
    if (it != names.begin()) require_stage(*(it - 1));
    fs::create_directories(opts_.out);
    fs::remove(manifest_path(stage));
    say(stage, "running");
    const auto t0 = std::chrono::steady_clock::now();
    double throughput = 0.0;
    if (stage == "pretrain") pretrain();
    if (stage == "align") align();
    if (stage == "cluster") cluster();
    if (stage == "elastic-depth") elastic_depth();
    if (stage == "elastic-width") elastic_width();
    if (stage == "prune") prune();
    if (stage == "materialize") materialize_stage();
    if (stage == "finetune") finetune();
    if (stage == "sample") throughput = sample();
    if (stage == "eval") evaluate();
    if (stage == "report") report();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_timing(stage, seconds, throughput);
    auto os = open_output(manifest_path(stage));
    os << "stage=" << stage << "\nconfig_hash=" << stage_hash(stage) << '\n';
    say(stage, "done in " + fmt(std::round(seconds * 10) / 10) + " s");
  }

  Checkpoint checkpoint_header(const std::string& stage, std::size_t step, const Rng& rng) const {
    Checkpoint ck;
    ck.set("config_hash", stage_hash(stage));
    ck.set("stage", stage);
    ck.set("step", std::to_string(step));
    ck.set("rng_seed", std::to_string(rng.seed()));
    ck.set("rng_counter", std::to_string(rng.counter()));
    for (const auto& [k, v] : cfg_.values()) ck.set("config." + k, v);
    return ck;
  }

  void save_model(const std::string& file, const std::string& stage, const ExpertModel& m, std::size_t step,
                  const Rng& rng) const {
    Checkpoint ck = checkpoint_header(stage, step, rng);
    write_model(ck, m);
    save_checkpoint(path(file), ck);
  }

  static void write_losses(const fs::path& p, const std::vector<double>& losses) {
    CsvWriter w(p, {"step", "loss"});
    for (std::size_t i = 0; i < losses.size(); ++i) w.row(i, {losses[i]});
  }

  void record_timing(const std::string& stage, double seconds, double throughput) const {
    std::map<std::string, std::vector<std::string>> rows;
    if (fs::exists(path("timing.csv"))) {
      const auto old = read_csv(path("timing.csv"));
      for (std::size_t i = 1; i < old.size(); ++i) {
        if (!old[i].empty()) rows[old[i][0]] = old[i];
      }
    }
    rows[stage] = {stage, fmt(seconds), fmt(throughput)};
    CsvWriter w(path("timing.csv"), {"stage", "seconds", "samples_per_sec"});
    for (const auto& s : stage_names()) {
      if (rows.count(s)) w.row(rows[s]);
    }
  }

  // ------------------------------------------------------------- stages

  void pretrain() {
    const Dataset& train = data().train;
    Rng rng = stage_rng("pretrain");
    Rng init = rng.fork(1);
    Rng steps = rng.fork(2);
    ExpertModel model = build_model(cfg_.model(train), init);
    say("pretrain", std::to_string(model.parameter_count()) + " parameters, " + std::to_string(count_macs(model)) +
                        " MACs per forward pass");
    const TrainConfig tc = cfg_.pretrain();
    const auto losses = train_interval(model, Interval{1, sched_.T}, tc, train, sched_, steps, {}, "pretrain");
    write_losses(path("pretrain_loss.csv"), losses);
    save_model("pretrain.ckpt", "pretrain", model, tc.iters, steps);
  }

  void align() {
    ExpertModel model = load_model("pretrain.ckpt", "pretrain");
    const std::uint64_t seed = stage_rng("align").seed();
    const AlignmentMatrix a =
        build_alignment(model, data().train, default_grid(sched_.T), cfg_.count("cluster.batch_size"), sched_, seed);
    write_alignment_csv(path("alignment.csv"), a);
    write_alignment_pgm(path("alignment.pgm"), a);
    write_alignment_svg(path("alignment.svg"), a);
    json meta;
    meta["grid_size"] = a.size();
    meta["batch_size"] = a.batch_size;
    meta["seed"] = a.seed;
    meta["batch"] = "one batch shared by every timestep";
    meta["noise"] = "per-timestep draw seeded by (seed, t)";
    std::vector<int> degenerate;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a.degenerate[i]) degenerate.push_back(a.grid[i]);
    }
    meta["degenerate_timesteps"] = degenerate;
    if (a.size() > 2) {
      meta["mean_adjacent_score"] = mean_offset_score(a, 1);
      meta["mean_half_range_score"] = mean_offset_score(a, a.size() / 2);
    }
    write_json(path("alignment.json"), meta);
  }

  void cluster() {
    const AlignmentMatrix a = read_alignment_csv(path("alignment.csv"));
    const std::size_t k = cfg_.flag("moe.enabled") ? cfg_.count("cluster.num_clusters") : 1;
    require(k <= a.size(), "cluster.num_clusters exceeds the grid size");
    const ClusterResult r = best_partition(a, k, sched_.T);
    json j = partition_json(r.partition);
    j["objective"] = r.objective;
    write_json(path("partition.json"), j);
    CsvWriter w(path("cluster_objective.csv"), {"cut", "objective"});
    for (const auto& [cut, value] : r.single_cut_scores) w.row(static_cast<std::size_t>(cut), {value});
    std::string cuts;
    for (int c : r.partition.cuts) cuts += " " + std::to_string(c);
    say("cluster", "cuts:" + (cuts.empty() ? std::string(" none") : cuts) + ", objective " + fmt(r.objective));
  }

  void elastic_depth() {
    const ExpertModel pretrained = load_model("pretrain.ckpt", "pretrain");
    const IntervalPartition p = load_partition();
    const ElasticConfig ec = cfg_.elastic();
    const Rng rng = stage_rng("elastic-depth");
    for (std::size_t i = 0; i < p.size(); ++i) {
      ExpertModel m = pretrained;
      Rng r = rng.fork(i);
      std::vector<double> losses;
      if (cfg_.flag("elastic.depth")) losses = elastic_depth_phase(m, p.intervals[i], ec, data().train, sched_, r);
      write_losses(path("elastic_depth_" + std::to_string(i) + ".csv"), losses);
      save_model(expert_file(i, "depth"), "elastic-depth", m, losses.size(), r);
    }
  }

  void elastic_width() {
    const IntervalPartition p = load_partition();
    const ElasticConfig ec = cfg_.elastic();
    const Rng rng = stage_rng("elastic-width");
    for (std::size_t i = 0; i < p.size(); ++i) {
      ExpertModel m = load_model(expert_file(i, "depth"), "elastic-depth");
      Rng r = rng.fork(i);
      std::vector<double> losses;
      if (cfg_.flag("elastic.width")) {
        losses = elastic_width_phase(m, p.intervals[i], ec, data().train, sched_, r);
      } else {
        importance_sort(m);
      }
      write_losses(path("elastic_width_" + std::to_string(i) + ".csv"), losses);
      save_model(expert_file(i, "width"), "elastic-width", m, losses.size(), r);
    }
  }

  std::vector<std::size_t> depth_ranking(const ExpertModel& m) const {
    const auto custom = cfg_.sizes("budget.depth_ranking");
    return custom.empty() ? default_depth_ranking(m) : custom;
  }

  void prune() {
    const IntervalPartition p = load_partition();
    std::vector<ExpertModel> experts = load_experts("width", "elastic-width");
    const double full = static_cast<double>(count_macs(load_model("pretrain.ckpt", "pretrain")));
    const BudgetConfig bc = cfg_.budget();
    Rng rng = stage_rng("prune");
    Rng init = rng.fork(1);
    Rng steps = rng.fork(2);
    std::vector<ExpertShape> shapes;
    std::vector<std::vector<std::size_t>> rankings;
    for (const auto& e : experts) {
      shapes.push_back(ExpertShape::of(e));
      rankings.push_back(depth_ranking(e));
    }
    std::unique_ptr<RoutingAgent> agent;
    if (cfg_.str("budget.agent") == "era") {
      agent = std::make_unique<EraAgent>(shapes, rankings, init, cfg_.count("era.input_dim"),
                                         cfg_.count("era.hidden_dim"));
    } else {
      agent = std::make_unique<NaiveAgent>(shapes);
    }
    say("prune", agent->kind() + " agent with " + std::to_string(agent->parameter_count()) + " parameters");
    std::vector<ExpertModel*> ptrs;
    for (auto& e : experts) ptrs.push_back(&e);
    const PruneResult r = prune_train_loop(ptrs, *agent, data().train, p, bc, full, sched_, steps);

    Checkpoint ck = checkpoint_header("prune", bc.iters, steps);
    ck.set("agent", agent->kind());
    if (auto* era = dynamic_cast<EraAgent*>(agent.get())) ck.add("era.z", era->inputs());
    for (const auto* prm : std::as_const(*agent).parameters()) ck.add(prm->name, prm->value);
    save_checkpoint(path("era.ckpt"), ck);

    std::vector<std::string> header{"iter", "objective", "macs_ratio"};
    for (std::size_t i = 0; i < p.size() && bc.loss_enabled; ++i) header.push_back("loss_" + std::to_string(i));
    CsvWriter w(path("prune_log.csv"), header);
    for (const auto& row : r.log) {
      std::vector<double> v{row.objective, row.t_hat_ratio};
      v.insert(v.end(), row.losses.begin(), row.losses.end());
      w.row(row.iter, v);
    }

    json j;
    j["agent"] = agent->kind();
    j["budget"] = bc.target_fraction;
    j["full_macs"] = static_cast<std::int64_t>(full);
    j["target_macs"] = r.target_macs;
    j["expected_macs"] = r.expected_macs;
    j["mixture_macs"] = r.final_macs;
    j["off_target"] = r.off_target;
    json ex = json::array();
    for (std::size_t i = 0; i < experts.size(); ++i) {
      json e = architecture_json(experts[i], r.architectures[i]);
      e["interval"] = {p.intervals[i].lo, p.intervals[i].hi};
      e["macs"] = macs_table(experts[i]).predict(r.architectures[i]);
      ex.push_back(e);
    }
    j["experts"] = ex;
    write_json(path("architecture.json"), j);
    say("prune", "mixture MACs " + fmt(r.final_macs / full) + " of full (target " + fmt(bc.target_fraction) + ")");
    if (r.off_target) say("prune", "warning: final MACs more than 10% away from the target");
  }

  void materialize_stage() {
    const json arch = read_json(path("architecture.json"));
    const auto experts = load_experts("width", "elastic-width");
    require(arch.at("experts").size() == experts.size(), "architecture.json does not match the expert count");
    const Rng rng = stage_rng("materialize");
    for (std::size_t i = 0; i < experts.size(); ++i) {
      const json& e = arch.at("experts")[i];
      const ExpertModel m = materialize(experts[i], architecture_from_json(e));
      const std::int64_t macs = count_macs(m);
      if (macs != e.at("macs").get<std::int64_t>()) {
        throw NumericalError("materialize: expert " + std::to_string(i) + " has " + std::to_string(macs) +
                             " MACs, descriptor says " + e.at("macs").dump());
      }
      save_model(expert_file(i, "pruned"), "materialize", m, 0, rng);
    }
  }

  void finetune() {
    const IntervalPartition p = load_partition();
    std::vector<std::vector<double>> logs;
    const Rng rng = stage_rng("finetune");
    const auto experts =
        finetune_experts(load_experts("pruned", "materialize"), p, cfg_.finetune(), data().train, sched_, rng, &logs);
    for (std::size_t i = 0; i < experts.size(); ++i) {
      write_losses(path("finetune_" + std::to_string(i) + ".csv"), logs[i]);
      save_model(expert_file(i, "final"), "finetune", experts[i], logs[i].size(), rng.fork(i));
    }
  }

  SamplerKind sampler() const { return sampler_from_string(cfg_.str("sample.sampler")); }
  int sample_steps() const { return static_cast<int>(cfg_.count("sample.steps")); }

  double sample() {
    const IntervalPartition p = load_partition();
    const auto experts = load_experts("final", "finetune");
    const std::size_t n = cfg_.count("sample.n");
    const auto t0 = std::chrono::steady_clock::now();
    const SampleResult s = sample_experts(experts, p, sched_, sampler(), sample_steps(), n, stage_rng("sample").seed());
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::size_t per = s.samples.size() / n;
    std::vector<std::string> header;
    for (std::size_t k = 0; k < per; ++k) header.push_back("x" + std::to_string(k));
    CsvWriter w(path("samples.csv"), header);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::string> cells;
      for (std::size_t k = 0; k < per; ++k) cells.push_back(fmt(s.samples[i * per + k]));
      w.row(cells);
    }
    return seconds > 0.0 ? static_cast<double>(n) / seconds : 0.0;
  }

  Tensor read_samples() const {
    const auto rows = read_csv(path("samples.csv"));
    require(rows.size() >= 2, "samples.csv is empty");
    const Dataset& h = const_cast<Pipeline*>(this)->data().heldout;
    std::vector<double> v;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      require(rows[i].size() == h.sample_size(), "samples.csv: row width does not match the data");
      for (const auto& c : rows[i]) v.push_back(parse_double(c, "samples.csv"));
    }
    return Tensor({rows.size() - 1, h.channels, h.length}, std::move(v));
  }

  void evaluate() {
    const IntervalPartition p = load_partition();
    const auto experts = load_experts("final", "finetune");
    const ExpertModel pretrained = load_model("pretrain.ckpt", "pretrain");
    const Dataset& held = data().heldout;
    const Rng rng = stage_rng("eval");
    const std::size_t perms = cfg_.count("eval.permutations");
    const std::size_t batch = cfg_.count("eval.heldout_batch");
    const std::size_t n = cfg_.count("sample.n");

    const SampleMetrics mixture = compare_samples(read_samples(), held, perms, rng.fork(1).seed());
    const SampleResult base_samples = sample_experts({pretrained}, IntervalPartition::single(sched_.T), sched_,
                                                     sampler(), sample_steps(), n, stage_rng("sample").seed());
    const SampleMetrics baseline = compare_samples(base_samples.samples, held, perms, rng.fork(1).seed());
    const std::uint64_t loss_seed = rng.fork(2).seed();
    const double mix_loss = heldout_mixture_loss(experts, p, held, sched_, loss_seed, batch);
    const double base_loss =
        heldout_mixture_loss({pretrained}, IntervalPartition::single(sched_.T), held, sched_, loss_seed, batch);

    const std::int64_t full = count_macs(pretrained);
    std::vector<std::int64_t> macs;
    json ex = json::array();
    for (std::size_t i = 0; i < experts.size(); ++i) {
      macs.push_back(count_macs(experts[i]));
      json e;
      e["interval"] = {p.intervals[i].lo, p.intervals[i].hi};
      e["params"] = experts[i].parameter_count();
      e["macs"] = macs.back();
      e["heldout_interval_loss"] =
          heldout_interval_loss(experts[i], p.intervals[i], held, sched_, rng.fork(3 + i).seed(), batch);
      e["pretrained_interval_loss"] =
          heldout_interval_loss(pretrained, p.intervals[i], held, sched_, rng.fork(3 + i).seed(), batch);
      ex.push_back(e);
    }
    const double weighted = mixture_macs(macs, p);

    json s;
    s["budget"] = cfg_.real("budget.target");
    s["full_macs"] = full;
    s["full_params"] = pretrained.parameter_count();
    s["mixture_macs"] = weighted;
    s["budget_ratio"] = weighted / static_cast<double>(full);
    s["experts"] = ex;
    s["sampler"] = cfg_.str("sample.sampler");
    s["sample_steps"] = sample_steps();
    s["samples"] = n;
    s["mmd2"] = mixture.mmd2;
    s["mmd_p_value"] = mixture.p_value;
    s["energy_distance"] = mixture.energy;
    s["mmd_bandwidth"] = mixture.bandwidth;
    s["pretrained_mmd2"] = baseline.mmd2;
    s["pretrained_energy_distance"] = baseline.energy;
    s["heldout_loss"] = mix_loss;
    s["pretrained_heldout_loss"] = base_loss;
    write_json(path("summary.json"), s);

    CsvWriter w(path("metrics.csv"), {"metric", "value"});
    auto put = [&](const std::string& k, double v) { w.row({k, fmt(v)}); };
    put("budget_ratio", weighted / static_cast<double>(full));
    put("mixture_macs", weighted);
    put("full_macs", static_cast<double>(full));
    put("mmd2", mixture.mmd2);
    put("mmd_p_value", mixture.p_value);
    put("energy_distance", mixture.energy);
    put("pretrained_mmd2", baseline.mmd2);
    put("pretrained_energy_distance", baseline.energy);
    put("heldout_loss", mix_loss);
    put("pretrained_heldout_loss", base_loss);
    say("eval", "MACs ratio " + fmt(weighted / static_cast<double>(full)) + ", MMD^2 " + fmt(mixture.mmd2) +
                    " (pretrained " + fmt(baseline.mmd2) + "), held-out loss " + fmt(mix_loss));
  }

  void report() {
    const json s = read_json(path("summary.json"));
    const json arch = read_json(path("architecture.json"));
    std::map<std::string, std::string> throughput;
    for (const auto& row : read_csv(path("timing.csv"))) {
      if (row.size() >= 3) throughput[row[0]] = row[2];
    }
    auto os = open_output(path("report.txt"));
    os << "mixture of " << s.at("experts").size() << " experts, " << arch.at("agent").get<std::string>()
       << " agent, budget " << s.at("budget") << "\n\n";
    os << "expert  interval    params    MACs        held-out loss\n";
    std::size_t i = 0;
    for (const auto& e : s.at("experts")) {
      const std::string iv = "[" + std::to_string(e.at("interval")[0].get<int>()) + ", " +
                             std::to_string(e.at("interval")[1].get<int>()) + "]";
      char line[160];
      std::snprintf(line, sizeof line, "%-7zu %-11s %-9lld %-11lld %.5f\n", i++, iv.c_str(),
                    static_cast<long long>(e.at("params").get<std::int64_t>()),
                    static_cast<long long>(e.at("macs").get<std::int64_t>()), e.at("heldout_interval_loss").get<double>());
      os << line;
    }
    os << "\nfull model MACs          " << s.at("full_macs") << '\n';
    os << "mixture MACs (weighted)  " << fmt(s.at("mixture_macs").get<double>()) << '\n';
    os << "budget ratio             " << fmt(s.at("budget_ratio").get<double>()) << '\n';
    os << "MMD^2 mixture/pretrained " << fmt(s.at("mmd2").get<double>()) << " / "
       << fmt(s.at("pretrained_mmd2").get<double>()) << '\n';
    os << "energy distance          " << fmt(s.at("energy_distance").get<double>()) << " / "
       << fmt(s.at("pretrained_energy_distance").get<double>()) << '\n';
    os << "held-out loss            " << fmt(s.at("heldout_loss").get<double>()) << " / "
       << fmt(s.at("pretrained_heldout_loss").get<double>()) << '\n';
    if (throughput.count("sample")) os << "sampling throughput      " << throughput["sample"] << " samples/s\n";
  }

  PipelineConfig cfg_;
  RunOptions opts_;
  NoiseSchedule sched_;
  std::optional<DataSplit> data_;
};

}  // namespace diffprune
