#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "diffprune/diffprune.hpp"

using namespace diffprune;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny configuration
data.train_size = 256
data.heldout_size = 256
data.length = 16
schedule.T = 20
model.stage_channels = 4,8
model.attention_stages = 1
model.heads = 2
model.time_embed_dim = 8
train.iters = 30
train.batch_size = 16
cluster.batch_size = 32
elastic.depth_iters = 10
elastic.width_iters = 10
elastic.batch_size = 16
budget.iters = 20
budget.batch_size = 16
era.input_dim = 16
era.hidden_dim = 32
finetune.iters = 10
finetune.batch_size = 16
sample.steps = 20
sample.n = 256
eval.permutations = 50
eval.heldout_batch = 64
)";

fs::path workdir() {
  const fs::path d = fs::temp_directory_path() / "diffprune_test_pipeline";
  fs::create_directories(d);
  return d;
}

fs::path tiny_config_file() {
  const fs::path p = workdir() / "tiny.cfg";
  std::ofstream(p) << kTinyConfig;
  return p;
}

PipelineConfig tiny_config() { return PipelineConfig::from_file(tiny_config_file().string()); }

RunOptions quiet(const fs::path& out, bool allow = false) {
  RunOptions o;
  o.out = out;
  o.allow_hash_mismatch = allow;
  o.log = nullptr;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Runs `all` once per process into a shared directory.
const fs::path& completed_run() {
  static const fs::path dir = [] {
    const fs::path d = workdir() / "run_a";
    fs::remove_all(d);
    Pipeline(tiny_config(), quiet(d)).run("all");
    return d;
  }();
  return dir;
}

fs::path fresh_copy(const std::string& name) {
  const fs::path d = workdir() / name;
  fs::remove_all(d);
  fs::copy(completed_run(), d, fs::copy_options::recursive);
  return d;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DIFFPRUNE_PIPELINE_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Pipeline, AllProducesEveryArtifact) {
  const fs::path d = completed_run();
  for (const auto& s : stage_names()) EXPECT_TRUE(fs::exists(d / (s + ".done"))) << s;
  for (const char* f : {"pretrain.ckpt", "alignment.csv", "alignment.pgm", "alignment.svg", "partition.json",
                        "architecture.json", "samples.csv", "summary.json", "metrics.csv", "report.txt",
                        "timing.csv", "expert_0_final.ckpt", "expert_1_final.ckpt"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
}

TEST(Pipeline, SummaryMacsAreExactCounts) {
  const fs::path d = completed_run();
  const json arch = read_json(d / "architecture.json");
  const json summary = read_json(d / "summary.json");
  Pipeline p(tiny_config(), quiet(d));
  const IntervalPartition part = p.load_partition();
  const auto experts = p.load_experts("final", "finetune");
  std::vector<std::int64_t> macs;
  for (const auto& e : experts) macs.push_back(count_macs(e));
  EXPECT_EQ(arch["mixture_macs"].get<double>(), mixture_macs(macs, part));
  const double full = static_cast<double>(count_macs(p.load_model("pretrain.ckpt", "pretrain")));
  EXPECT_EQ(arch["full_macs"].get<double>(), full);
  const double ratio = summary["budget_ratio"].get<double>();
  EXPECT_EQ(ratio, mixture_macs(macs, part) / full);
}

TEST(Pipeline, AllIsDeterministic) {
  const fs::path a = completed_run();
  const fs::path b = workdir() / "run_b";
  fs::remove_all(b);
  Pipeline(tiny_config(), quiet(b)).run("all");
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const std::string name = entry.path().filename().string();
    if (name == "timing.csv" || name == "report.txt") continue;
    ASSERT_TRUE(fs::exists(b / name)) << name;
    EXPECT_EQ(slurp(entry.path()), slurp(b / name)) << name;
    ++compared;
  }
  EXPECT_GT(compared, 30u);
}

TEST(Pipeline, CompletedStagesAreSkipped) {
  const fs::path d = fresh_copy("run_resume");
  std::ostringstream log;
  RunOptions o = quiet(d);
  o.log = &log;
  Pipeline(tiny_config(), o).run("all");
  std::size_t skipped = 0;
  std::string line;
  std::istringstream is(log.str());
  while (std::getline(is, line)) skipped += line.find("up to date, skipped") != std::string::npos ? 1 : 0;
  EXPECT_EQ(skipped, stage_names().size());
}

TEST(Pipeline, RerunningAStageIsBitIdentical) {
  const fs::path d = fresh_copy("run_rerun");
  const std::string arch = slurp(d / "architecture.json");
  const std::string log = slurp(d / "prune_log.csv");
  const std::string samples = slurp(d / "samples.csv");
  Pipeline p(tiny_config(), quiet(d));
  p.run("prune");
  p.run("sample");
  EXPECT_EQ(slurp(d / "architecture.json"), arch);
  EXPECT_EQ(slurp(d / "prune_log.csv"), log);
  EXPECT_EQ(slurp(d / "samples.csv"), samples);
}

TEST(Pipeline, ChangedBudgetRerunsOnlyDownstreamStages) {
  const fs::path d = fresh_copy("run_budget");
  PipelineConfig cfg = tiny_config();
  cfg.set("budget.target", "0.3");
  std::ostringstream log;
  RunOptions o = quiet(d);
  o.log = &log;
  Pipeline(cfg, o).run("all");
  for (const std::string s : {"pretrain", "align", "cluster", "elastic-depth", "elastic-width"}) {
    EXPECT_NE(log.str().find("[" + s + "] up to date"), std::string::npos) << s;
  }
  for (const std::string s : {"prune", "materialize", "finetune", "sample", "eval", "report"}) {
    EXPECT_NE(log.str().find("[" + s + "] running"), std::string::npos) << s;
  }
  EXPECT_NEAR(read_json(d / "architecture.json")["target_macs"].get<double>() /
                  read_json(d / "architecture.json")["full_macs"].get<double>(),
              0.3, 1e-12);
}

TEST(Pipeline, MissingDependencyIsNamed) {
  const fs::path d = workdir() / "run_empty";
  fs::remove_all(d);
  Pipeline p(tiny_config(), quiet(d));
  try {
    p.run("prune");
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("elastic-width.done"), std::string::npos) << e.what();
  }
  EXPECT_FALSE(fs::exists(d / "prune.done"));
}

TEST(Pipeline, HashMismatchIsAnErrorUnlessAllowed) {
  const fs::path d = fresh_copy("run_mismatch");
  PipelineConfig cfg = tiny_config();
  cfg.set("finetune.iters", "11");
  EXPECT_THROW(Pipeline(cfg, quiet(d)).run("sample"), ValidationError);
  EXPECT_NO_THROW(Pipeline(cfg, quiet(d, true)).run("sample"));
}

TEST(Pipeline, UnknownStageIsRejected) {
  Pipeline p(tiny_config(), quiet(workdir() / "run_unknown"));
  EXPECT_THROW(p.run("deploy"), ValidationError);
}

TEST(Pipeline, ClusterStageOnBlockFixture) {
  PipelineConfig cfg = tiny_config();
  cfg.set("schedule.T", "10");
  cfg.set("sample.steps", "10");
  const fs::path d = workdir() / "run_cluster";
  fs::remove_all(d);
  fs::create_directories(d);
  std::vector<int> grid(10);
  std::iota(grid.begin(), grid.end(), 1);
  std::vector<double> s(100);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 10; ++j) s[i * 10 + j] = (i < 7) == (j < 7) ? 1.0 : 0.0;
  }
  write_alignment_csv(d / "alignment.csv", AlignmentMatrix::from_scores(grid, s));
  Pipeline p(cfg, quiet(d));
  std::ofstream(d / "align.done") << "stage=align\nconfig_hash=" << p.stage_hash("align") << "\n";
  p.run("cluster");
  const json j = read_json(d / "partition.json");
  EXPECT_EQ(j["cuts"], json::array({7}));
  EXPECT_EQ(j["intervals"], json::parse("[[1,7],[8,10]]"));
  EXPECT_DOUBLE_EQ(j["objective"].get<double>(), 1.0);
}

TEST(Finetune, ZeroIterationsIsIdentity) {
  Pipeline p(tiny_config(), quiet(completed_run()));
  const auto pruned = p.load_experts("pruned", "materialize");
  TrainConfig tc;
  tc.iters = 0;
  const auto out = finetune_experts(pruned, p.load_partition(), tc, p.data().train, p.schedule(), Rng(1));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto a = out[i].parameters();
    const auto b = pruned[i].parameters();
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k]->value.vec(), b[k]->value.vec());
  }
}

TEST(Finetune, ReducesHeldOutIntervalLoss) {
  PipelineConfig cfg = tiny_config();
  cfg.set("train.iters", "300");
  cfg.set("finetune.iters", "200");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cfg.set("seed", std::to_string(seed));
    const fs::path d = workdir() / ("run_finetune_" + std::to_string(seed));
    fs::remove_all(d);
    Pipeline p(cfg, quiet(d));
    for (const std::string s : {"pretrain", "align", "cluster", "elastic-depth", "elastic-width", "prune",
                                "materialize", "finetune"}) {
      p.run(s);
    }
    const IntervalPartition part = p.load_partition();
    const auto before = p.load_experts("pruned", "materialize");
    const auto after = p.load_experts("final", "finetune");
    for (std::size_t i = 0; i < part.size(); ++i) {
      const double lb = heldout_interval_loss(before[i], part.intervals[i], p.data().heldout, p.schedule(), 7, 64);
      const double la = heldout_interval_loss(after[i], part.intervals[i], p.data().heldout, p.schedule(), 7, 64);
      EXPECT_LE(la, lb) << "seed " << seed << " expert " << i;
    }
  }
}

TEST(Cli, ExitCodes) {
  const std::string cfg = "--config " + tiny_config_file().string();
  const std::string out = " --out " + (workdir() / "cli").string();
  fs::remove_all(workdir() / "cli");
  EXPECT_EQ(run_cli(cfg + " --print-config"), 0);
  EXPECT_EQ(run_cli(cfg + " deploy" + out), 1);
  EXPECT_EQ(run_cli(cfg + out), 1);
  EXPECT_EQ(run_cli("--config /nonexistent.cfg pretrain" + out), 1);
  EXPECT_EQ(run_cli(cfg + " --override nope=1 pretrain" + out), 1);
  EXPECT_EQ(run_cli(cfg + " --stage eval" + out), 1);
  EXPECT_EQ(run_cli(cfg + " --override train.lr=1e6 --override train.iters=200 pretrain" + out), 2);
  EXPECT_EQ(run_cli(cfg + " --seed 3 --budget 0.4 --stage pretrain" + out), 0);
  EXPECT_TRUE(fs::exists(workdir() / "cli" / "pretrain.done"));
}
