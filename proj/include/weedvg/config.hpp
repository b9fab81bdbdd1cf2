#pragma once

#include <cstdint>
#include <string>

#include "weedvg/eval.hpp"
#include "weedvg/synth.hpp"

// Run configuration: one JSON file with "synth", "datagen", "train" and
// "eval" sections. Unknown keys are rejected.
namespace weedvg {

struct RunConfig {
  SynthConfig synth;
  TrainConfig train;
  EvalOptions eval;
  int verbosity = 1;

  // Sets both the synthetic and the training seed.
  void set_seed(std::uint64_t seed);
  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_json(const RunConfig& cfg);

}  // namespace weedvg
