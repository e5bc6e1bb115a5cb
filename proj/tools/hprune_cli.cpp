// Command-line front end: one subcommand per pipeline stage plus `pipeline`.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "hprune/pipeline.hpp"

using namespace hprune;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitQuality = 4;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON pipeline configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Run seed (overrides the configuration)");
  cmd->add_option("--out", f.out, "Output directory (overrides the configuration)");
  cmd->add_flag("--resume", f.resume, "Skip stages whose artifacts already exist");
}

PipelineConfig make_config(const CommonFlags& f) {
  PipelineConfig cfg = f.config.empty() ? PipelineConfig{} : load_pipeline_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.out_dir = f.out;
  cfg.validate();
  return cfg;
}

int report_status(const RunReport& r) {
  std::printf("final variant %s: probe accuracy %.2f%%, floor %.2f%%, %s\n", std::string(variant_name(r.final_variant)).c_str(),
              r.rows.back().probe_accuracy, r.quality_floor, r.passed ? "passed" : "failed");
  return r.passed ? kExitOk : kExitQuality;
}

int run(const CommonFlags& f, std::optional<Stage> stage) {
  Pipeline p(make_config(f));
  if (!stage) {
    const auto report = p.run(f.resume);
    std::printf("artifacts in %s\n", p.config().out_dir.string().c_str());
    return report_status(report);
  }
  if (f.resume && p.stage_complete(*stage)) {
    std::printf("%s: artifacts present, skipped\n", std::string(stage_name(*stage)).c_str());
  } else {
    p.run_stage(*stage);
    std::printf("%s: done\n", std::string(stage_name(*stage)).c_str());
  }
  return *stage == Stage::Report ? report_status(p.load_report()) : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical pruning, distillation and 4-bit quantization of a toy MMDiT"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::optional<Stage> selected;
  for (Stage s : kStages) {
    auto* cmd = app.add_subcommand(std::string(stage_name(s)), "Run the " + std::string(stage_name(s)) + " stage");
    add_common(cmd, flags);
    cmd->callback([&selected, s] { selected = s; });
  }
  auto* all = app.add_subcommand("pipeline", "Run every stage in order");
  add_common(all, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    return run(flags, selected);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kExitStage;
  }
}
