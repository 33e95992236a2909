// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "chordprompt/benchmark.hpp"
#include "chordprompt/encoder.hpp"
#include "chordprompt/trainer.hpp"

namespace chordprompt::cli {

/// Everything a run depends on. Filled from defaults, then the INI config
/// file, then command-line flags.
struct RunConfig {
  std::uint64_t seed = 7;
  EncoderConfig encoder = EncoderConfig::mini();
  BenchmarkConfig bench;
  PretrainConfig pretrain;
  TrainConfig train;
  bool untrained_fallback = false;
  bool transfer_zero_shot_row = false;
  /// Task order as indices into the generated task list; empty keeps it.
  std::vector<std::size_t> order;
  /// "name=v1,v2,..." grid axes for `sweep`.
  std::vector<std::string> axes;

  std::string data_dir = "data";
  std::string backbone_path = "backbone.cpbb";
  std::string pool_path = "pool.cpp1";
  std::string out_dir = "out";
};

/// Exit codes besides 0.
inline constexpr int kExitError = 1;
inline constexpr int kExitPretrainFailure = 3;

/// Parses `args` (args[0] is the program name) and runs the subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace chordprompt::cli
