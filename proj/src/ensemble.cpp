#include "segkit/ensemble.hpp"

#include <filesystem>

#include "segkit/data.hpp"

namespace fs = std::filesystem;

namespace segkit {

void PredictionStack::validate() const {
  if (maps.size() < 2) {
    throw std::invalid_argument("ensemble: need at least 2 prediction maps, got " +
                                std::to_string(maps.size()));
  }
  size_t expect = static_cast<size_t>(height) * width;
  for (size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].size() != expect) {
      throw std::invalid_argument("ensemble: map " + std::to_string(i) + " has " +
                                  std::to_string(maps[i].size()) + " pixels, expected " +
                                  std::to_string(expect));
    }
    for (double v : maps[i]) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument("ensemble: map " + std::to_string(i) +
                                    " holds a non-probability value " + std::to_string(v));
      }
    }
  }
}

BinaryMask majority_vote(const PredictionStack& stack, double threshold) {
  stack.validate();
  const size_t n = static_cast<size_t>(stack.height) * stack.width;
  const size_t m = stack.maps.size();
  BinaryMask out = BinaryMask::zeros(stack.height, stack.width);
  for (size_t i = 0; i < n; ++i) {
    size_t votes = 0;
    for (size_t k = 0; k < m; ++k) {
      if (stack.maps[k][i] > threshold) ++votes;
    }
    out.data[i] = 2 * votes > m ? 1 : 0;  // exact tie goes to background
  }
  return out;
}

BinaryMask average_probability(const PredictionStack& stack, double threshold) {
  stack.validate();
  const size_t n = static_cast<size_t>(stack.height) * stack.width;
  const double inv_m = 1.0 / static_cast<double>(stack.maps.size());
  BinaryMask out = BinaryMask::zeros(stack.height, stack.width);
  for (size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (const auto& map : stack.maps) acc += map[i];
    out.data[i] = acc * inv_m > threshold ? 1 : 0;
  }
  return out;
}

EnsembleMode ensemble_mode_from_string(const std::string& s) {
  if (s == "majority") return EnsembleMode::majority;
  if (s == "avgprob") return EnsembleMode::avgprob;
  throw std::invalid_argument("unknown ensemble mode '" + s + "' (want majority or avgprob)");
}

std::string to_string(EnsembleMode m) {
  return m == EnsembleMode::majority ? "majority" : "avgprob";
}

MetricsReport ensemble_evaluate(std::vector<Model>& models, const DatasetManifest& manifest,
                                Split split, const DataConfig& data_cfg, EnsembleMode mode,
                                double threshold, const std::string& fused_mask_dir,
                                std::optional<PixelSpacing> spacing_override) {
  if (models.size() < 2) {
    throw std::invalid_argument("ensemble: need at least 2 models, got " +
                                std::to_string(models.size()));
  }
  std::vector<size_t> idx = manifest.indices_of(split);
  if (idx.empty()) {
    throw std::invalid_argument("ensemble: split '" + to_string(split) + "' is empty");
  }
  if (!fused_mask_dir.empty()) fs::create_directories(fused_mask_dir);

  std::vector<MetricRecord> records;
  for (size_t mi : idx) {
    const ManifestEntry& entry = manifest.entries[mi];
    SegSample s = load_manifest_sample(manifest, entry);
    if (data_cfg.clahe_enabled) {
      s.image = clahe(s.image, s.height, s.width, data_cfg.clahe_clip, data_cfg.clahe_tiles_r,
                      data_cfg.clahe_tiles_c);
    }
    if (spacing_override) s.mask.spacing = *spacing_override;

    PredictionStack stack;
    stack.height = s.height;
    stack.width = s.width;
    for (auto& model : models) {
      SegSample padded = pad_to_multiple(s, 1 << model.spec().depth);
      Tensor images = Tensor::zeros({1, 1, padded.height, padded.width});
      std::copy(padded.image.begin(), padded.image.end(), images.values().begin());
      Tape tape(false);
      Tensor prob = model.forward(tape, images, /*training=*/false);
      // carry the probabilities back to the original frame
      std::vector<double> map(static_cast<size_t>(s.height) * s.width);
      for (int r = 0; r < s.height; ++r) {
        for (int c = 0; c < s.width; ++c) {
          map[static_cast<size_t>(r) * s.width + c] =
              prob.values()[static_cast<size_t>(r + padded.meta.pad_top) * padded.width +
                            (c + padded.meta.pad_left)];
        }
      }
      stack.maps.push_back(std::move(map));
    }

    BinaryMask fused = mode == EnsembleMode::majority ? majority_vote(stack, threshold)
                                                      : average_probability(stack, threshold);
    fused.spacing = s.mask.spacing;
    if (!fused_mask_dir.empty()) {
      std::string stem = fs::path(entry.image_path).stem().string();
      write_mask((fs::path(fused_mask_dir) / (stem + "_fused.pgm")).string(), fused);
    }

    MetricRecord rec;
    rec.patient = entry.meta.patient_id;
    rec.slice = entry.meta.slice_id;
    rec.phase = entry.meta.phase;
    rec.contour = entry.meta.contour_kind;
    rec.dice = dice_coefficient(fused, s.mask);
    if (!fused.empty_foreground() && !s.mask.empty_foreground()) {
      rec.hd_mm = hausdorff(boundary(fused), boundary(s.mask), s.mask.spacing);
    }
    records.push_back(std::move(rec));
  }
  return MetricsReport::aggregate(std::move(records));
}

}  // namespace segkit
