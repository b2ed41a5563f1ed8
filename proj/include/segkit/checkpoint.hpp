#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "segkit/nets.hpp"

namespace segkit {

struct StoreEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Flat container file, format "segkit-ckpt-1": an 8-byte little-endian
/// header length, a JSON text header (names, shapes, dtype, meta - no
/// executable content), then each tensor's raw little-endian f64 bytes in
/// header order.
struct TensorStore {
  nlohmann::json meta;
  std::vector<StoreEntry> entries;

  void put(const std::string& name, Shape shape, std::vector<double> values);
  const StoreEntry* find(const std::string& name) const;

  void save(const std::string& path) const;
  static TensorStore load(const std::string& path);
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  int64_t step = 0;
};

/// Everything needed to rebuild and continue a run: model spec + parameters
/// + batch-norm buffers, optimizer moments, epoch cursor and the
/// best-validation marker.
void save_checkpoint(const std::string& path, Model& model, const AdamState* opt, int epoch,
                     double best_val_dice, const nlohmann::json& extra_meta = {});

struct LoadedCheckpoint {
  Model model;
  AdamState opt;
  bool has_opt = false;
  int epoch = -1;
  double best_val_dice = -1.0;
  nlohmann::json meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

}  // namespace segkit
