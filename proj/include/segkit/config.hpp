#pragma once

#include <string>

#include "segkit/trainer.hpp"

namespace segkit {

/// One experiment = one flat key-value text file with sections mirroring the
/// module names ([model], [loss], [train], [data], [output]). Unknown keys
/// and sections are rejected with their line number; every run writes the
/// fully-resolved form (defaults expanded) beside its outputs.
struct ExperimentConfig {
  ExperimentSetup setup;
  std::string manifest_path;
  std::string output_dir = "runs/exp";

  static ExperimentConfig parse_file(const std::string& path);
  static ExperimentConfig parse_text(const std::string& text, const std::string& origin);

  /// Fully-resolved config text (defaults expanded).
  std::string to_ini() const;
};

}  // namespace segkit
