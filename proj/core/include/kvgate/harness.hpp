// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "kvgate/config.hpp"
#include "kvgate/errors.hpp"

namespace kvgate {

/// Flags shared by every subcommand.
struct CommandOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  bool freeze_indexer = false;
  std::size_t threads = 1;
  std::vector<std::string> inputs;  // report: metrics files
};

/// Subcommand names accepted by run_command.
const std::vector<std::string>& command_names();

/// Loads the config named by the options and applies the --seed override.
ExperimentConfig resolve_config(const CommandOptions& options);

/// Runs one subcommand. Failures surface as kvgate::Error subclasses. The
/// return value is the process exit code for runs that complete (selftest
/// returns 1 when an invariant fails).
int run_command(const std::string& name, const CommandOptions& options);

/// run_command with errors turned into a one-line JSON record on `err`
/// ({"error":{"kind","message","exit_code"}}) and the matching exit code.
int run_command_guarded(const std::string& name, const CommandOptions& options, std::ostream& err);

/// Machine-readable error line.
std::string error_record(const std::string& kind, const std::string& message, int exit_code);

}  // namespace kvgate
