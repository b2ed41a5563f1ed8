#pragma once

#include <optional>
#include <string>
#include <vector>

#include "segkit/checkpoint.hpp"
#include "segkit/data.hpp"
#include "segkit/losses.hpp"
#include "segkit/metrics.hpp"
#include "segkit/nets.hpp"

namespace segkit {

struct TrainConfig {
  int epochs = 600;
  int batch_size = 8;
  int grad_accum = 1;  // optimizer step every grad_accum batches
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  int cycle_length = 100;  // cosine warm-restart period, in epochs
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 1;
  int threads = 1;
  double threshold = 0.5;  // probability binarization, strict >

  void validate() const;
};

/// Preprocessing knobs shared by training and evaluation. CLAHE is part of
/// preprocessing and is applied at eval time too; geometric augmentation and
/// oversampling touch the train split only.
struct DataConfig {
  bool augment = true;
  bool clahe_enabled = true;
  double clahe_clip = 2.0;
  int clahe_tiles_r = 8;
  int clahe_tiles_c = 8;
  bool oversample_enabled = true;
  double oversample_threshold = 0.01;
  int oversample_factor = 2;
};

struct ExperimentSetup {
  ModelSpec model;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;
};

/// lr_min + (lr_max - lr_min)(1 + cos(pi (epoch mod T)/T))/2; warm restart
/// at every multiple of T.
double cyclic_lr(int epoch, const TrainConfig& cfg);

void init_adam_state(AdamState& state, const std::vector<std::pair<std::string, Tensor>>& params);

/// One Adam update from the accumulated gradients. The L2 term is added to
/// the gradient as weight_decay * theta before the moment update. Throws,
/// naming the parameter, on a non-finite gradient.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr,
               const TrainConfig& cfg);

struct TrainResult {
  double best_val_dice = -1.0;
  int best_epoch = -1;
  int epochs_run = 0;
  std::vector<std::string> log_rows;  // one CSV row per epoch
  std::string log_path;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

/// Full training protocol: seeded shuffling, augmentation, cyclic-LR Adam
/// with L2, per-epoch validation Dice, best/last checkpointing, CSV log.
/// `resume_from` continues from a last-checkpoint written by a previous run
/// with the same setup; the resumed trajectory is identical to an
/// uninterrupted one.
TrainResult train(const ExperimentSetup& setup, const DatasetManifest& manifest,
                  const std::string& out_dir, const std::string& resume_from = "");

/// Threshold the model over a split and score it: Dice and boundary
/// Hausdorff per sample, aggregated in the report layout. Samples whose
/// prediction or truth is empty get no HD and are tallied as undefined.
/// A nonempty `pred_mask_dir` receives each prediction as a {0,255} PGM.
MetricsReport evaluate(Model& model, const DatasetManifest& manifest, Split split,
                       const DataConfig& data_cfg, double threshold = 0.5,
                       std::optional<PixelSpacing> spacing_override = std::nullopt,
                       const std::string& pred_mask_dir = "");

}  // namespace segkit
