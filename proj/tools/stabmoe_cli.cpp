#include "stabmoe/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

void add_run_flags(CLI::App* cmd, stabmoe::RunOptions& opts, std::string& seeds) {
  cmd->add_option("--config", opts.config_path, "Run configuration (JSON)")->required();
  cmd->add_option("--out", "Output directory (overrides output.directory)")
      ->each([&opts](const std::string& v) { opts.out_dir = v; });
  cmd->add_option("--seeds", seeds, "Comma-separated seed list, e.g. 1,2,3");
  cmd->add_option("--toggle", opts.toggles, "NAME=on|off; repeatable")
      ->take_all()
      ->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual MoE-LoRA training with stabilized routing and experts"};
  app.require_subcommand(1);

  stabmoe::RunOptions run_opts, compare_opts;
  std::string run_seeds, compare_seeds;
  auto* run = app.add_subcommand("run", "Train the task stream for every seed");
  add_run_flags(run, run_opts, run_seeds);
  auto* compare = app.add_subcommand("compare", "Run the four-rung toggle ladder over the seeds");
  add_run_flags(compare, compare_opts, compare_seeds);

  stabmoe::ProbeOptions probe_opts;
  auto* probe = app.add_subcommand("probe", "Re-train only the routers of saved snapshots on task 1");
  probe->add_option("--run", probe_opts.run_dir, "Directory written by `run`")->required();
  probe->add_option("--seed", "Seed to probe (default: first seed of the run)")
      ->each([&probe_opts](const std::string& v) { probe_opts.seed = std::stoull(v); });
  probe->add_option("--task", "1-based checkpoint (default: every checkpoint)")
      ->each([&probe_opts](const std::string& v) { probe_opts.task = std::stoull(v); });
  probe->add_option("--epochs", "Router re-training epochs (default: train.probe_epochs)")
      ->each([&probe_opts](const std::string& v) { probe_opts.epochs = std::stoull(v); });

  std::string validate_path;
  auto* validate = app.add_subcommand("validate-config", "Check a configuration without running it");
  validate->add_option("--config,config", validate_path, "Run configuration (JSON)")->required();

  std::string output_path;
  auto* validate_out = app.add_subcommand("validate-output", "Check summary.json or comparison.json against its schema");
  validate_out->add_option("file", output_path)->required();

  stabmoe::ExportOptions export_opts;
  std::string split = "train";
  auto* exporter = app.add_subcommand("export-split", "Write one task split as CSV");
  exporter->add_option("--config", export_opts.config_path)->required();
  exporter->add_option("--seed", export_opts.seed);
  exporter->add_option("--task", export_opts.task);
  exporter->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
  exporter->add_option("--out", export_opts.out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : stabmoe::kExitInvalid;
  }

  try {
    auto seeds = [](const std::string& list, stabmoe::RunOptions& opts) {
      if (!list.empty()) opts.seeds = stabmoe::parse_seed_list(list);
    };
    if (*run) {
      seeds(run_seeds, run_opts);
      return stabmoe::cmd_run(run_opts, std::cout, std::cerr);
    }
    if (*compare) {
      seeds(compare_seeds, compare_opts);
      return stabmoe::cmd_compare(compare_opts, std::cout, std::cerr);
    }
    if (*probe) return stabmoe::cmd_probe(probe_opts, std::cout, std::cerr);
    if (*validate) return stabmoe::cmd_validate_config(validate_path, std::cout, std::cerr);
    if (*validate_out) return stabmoe::cmd_validate_output(output_path, std::cout, std::cerr);
    if (*exporter) {
      export_opts.split = split == "test" ? stabmoe::Split::Test : stabmoe::Split::Train;
      return stabmoe::cmd_export_split(export_opts, std::cout, std::cerr);
    }
  } catch (const stabmoe::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return stabmoe::kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return stabmoe::kExitInvalid;
  }
  return stabmoe::kExitInvalid;
}
