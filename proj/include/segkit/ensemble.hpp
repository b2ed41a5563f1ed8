#pragma once

#include <string>
#include <vector>

#include "segkit/metrics.hpp"
#include "segkit/nets.hpp"
#include "segkit/trainer.hpp"

namespace segkit {

/// M >= 2 probability maps aligned to one sample.
struct PredictionStack {
  int height = 0;
  int width = 0;
  std::vector<std::vector<double>> maps;

  void validate() const;  // M >= 2, identical shapes, values within [0,1]
};

/// Binarize each map at the threshold; a pixel is foreground iff strictly
/// more than M/2 maps vote foreground. An exact tie (even M) is background.
BinaryMask majority_vote(const PredictionStack& stack, double threshold = 0.5);

/// Arithmetic mean of the maps, then a strict > threshold.
BinaryMask average_probability(const PredictionStack& stack, double threshold = 0.5);

enum class EnsembleMode { majority, avgprob };
EnsembleMode ensemble_mode_from_string(const std::string& s);
std::string to_string(EnsembleMode m);

/// Run every model over a split, fuse per sample, and score the fused masks.
/// When `fused_mask_dir` is nonempty the fused masks are written there as
/// {0,255} PGM files.
MetricsReport ensemble_evaluate(std::vector<Model>& models, const DatasetManifest& manifest,
                                Split split, const DataConfig& data_cfg, EnsembleMode mode,
                                double threshold = 0.5, const std::string& fused_mask_dir = "",
                                std::optional<PixelSpacing> spacing_override = std::nullopt);

}  // namespace segkit
