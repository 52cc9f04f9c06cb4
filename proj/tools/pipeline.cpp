#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffprune/diffprune.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Timestep-partitioned pruning pipeline for diffusion denoisers"};
  std::string stage;
  std::string config_path;
  std::string out = "run";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<double> budget;
  bool allow_mismatch = false;
  bool dump = false;

  std::string stages = "all";
  for (const auto& s : diffprune::stage_names()) stages += " | " + s;
  app.add_option("stage,--stage", stage, "Stage to run: " + stages);
  app.add_option("--config", config_path, "Config file of key = value lines");
  app.add_option("--seed", seed, "Override the root seed");
  app.add_option("--budget", budget, "Override budget.target (fraction of full MACs)");
  app.add_option("--out", out, "Run directory")->capture_default_str();
  app.add_option("--override", overrides, "key=value override, repeatable")->allow_extra_args(false);
  app.add_flag("--allow-hash-mismatch", allow_mismatch, "Accept upstream artifacts from a different configuration");
  app.add_flag("--print-config", dump, "Print the resolved configuration and exit");
  CLI11_PARSE(app, argc, argv);

  try {
    diffprune::PipelineConfig cfg =
        config_path.empty() ? diffprune::PipelineConfig() : diffprune::PipelineConfig::from_file(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (budget) cfg.set("budget.target", diffprune::fmt(*budget));
    if (dump) {
      std::cout << cfg.dump();
      return 0;
    }
    if (stage.empty()) throw diffprune::ValidationError("no stage given (try --help)");
    diffprune::RunOptions opts;
    opts.out = out;
    opts.allow_hash_mismatch = allow_mismatch;
    diffprune::Pipeline pipeline(cfg, opts);
    pipeline.run(stage);
  } catch (const diffprune::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 2;
  } catch (const diffprune::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
