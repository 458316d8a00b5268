#pragma once

#include <string>

#include "tokenfusion/data.hpp"
#include "tokenfusion/model_config.hpp"
#include "tokenfusion/train.hpp"

namespace tokenfusion {

/// Everything a run needs, in one config file: architecture, optimizer,
/// augmentation, data source, output directory, seed.
struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  AugmentConfig augment;
  DatasetSource dataset;
  std::string out_dir = "run_out";
  uint64_t seed = 0;

  void validate() const {
    model.validate();
    optim.validate();
    augment.validate();
  }
};

/// Strict parse: every key at every level must be known; typos are hard
/// errors, not silently ignored knobs. Missing keys take defaults.
RunConfig parse_run_config(const std::string& json_text);

RunConfig load_run_config(const std::string& path);

/// Emits the full tree with every default filled in, in a stable key order.
std::string serialize_run_config(const RunConfig& cfg);

/// Applies one `path.to.key=value` override onto a config. Values parse as
/// JSON first (numbers, bools) and fall back to plain strings.
RunConfig apply_override(const RunConfig& cfg, const std::string& assignment);

}  // namespace tokenfusion
