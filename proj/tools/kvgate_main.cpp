// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "kvgate/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"kvgate: KV-cache eviction, learned indexer and latent memory experiments"};
  app.require_subcommand(1, 1);

  const std::map<std::string, std::string> about = {
      {"train-indexer", "Distil the per-layer indexers from teacher attention"},
      {"train-memory", "Train the latent memory on evicted rows (needs --checkpoint)"},
      {"sweep", "Evaluate every policy at every eviction ratio"},
      {"decode-sim", "Simulate budgeted decoding for each configured budget"},
      {"report", "Collect metrics files into CSV tables and summary.json"},
      {"selftest", "Run the built-in invariant checks"},
  };

  kvgate::CommandOptions options;
  std::uint64_t seed = 0;
  for (const std::string& name : kvgate::command_names()) {
    CLI::App* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", options.config_path, "Experiment config (JSON)");
    sub->add_option("--out", options.out_dir, "Output directory")->capture_default_str();
    sub->add_option("--seed", seed, "Override the top-level config seed");
    sub->add_option("--checkpoint", options.checkpoint, "Weights container to load");
    sub->add_flag("--freeze-indexer", options.freeze_indexer,
                  "Keep indexer weights fixed during memory training");
    sub->add_option("--threads", options.threads, "Sweep worker threads")->capture_default_str();
    if (name == "report") sub->add_option("inputs", options.inputs, "Metrics files")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << kvgate::error_record("usage", e.what(), 2) << "\n";
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed") > 0) options.seed = seed;
  return kvgate::run_command_guarded(chosen->get_name(), options, std::cerr);
}
