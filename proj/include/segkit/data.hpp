#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segkit/metrics.hpp"
#include "segkit/rng.hpp"

namespace segkit {

enum class Split { train, val, test };
Split split_from_string(const std::string& s);
std::string to_string(Split s);

struct SampleMeta {
  std::string patient_id;
  int slice_id = 0;
  Phase phase = Phase::Unknown;
  ContourKind contour_kind = ContourKind::endo;
  PixelSpacing spacing;
  // Inverse-crop bookkeeping filled by pad_to_multiple.
  int pad_top = 0;
  int pad_left = 0;
  int orig_height = 0;
  int orig_width = 0;
};

/// One grayscale image (normalized to [0,1]) plus its binary ground-truth
/// mask and metadata. Image and mask always share H×W.
struct SegSample {
  int height = 0;
  int width = 0;
  std::vector<double> image;
  BinaryMask mask;
  SampleMeta meta;
};

struct ManifestEntry {
  std::string image_path;    // relative to the manifest's directory
  std::string contour_path;  // "x y" per line, RVSC convention
  SampleMeta meta;
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string base_dir;  // directory the relative paths resolve against

  static DatasetManifest load(const std::string& path);
  void save(const std::string& path) const;

  /// No patient may appear in two splits. Throws listing the offender.
  void validate_patient_disjoint() const;

  std::vector<size_t> indices_of(Split split) const;
  std::string resolve(const std::string& rel) const;
};

/// Text contour file, one "x y" pair per line (x = column, y = row, real
/// valued). Parse and range errors carry the file name and line number.
ContourPoints read_contour_file(const std::string& path);

/// Image + contour -> sample; the contour is rasterized onto the image grid.
SegSample load_sample(const std::string& image_path, const std::string& contour_path,
                      const SampleMeta& meta);

SegSample load_manifest_sample(const DatasetManifest& manifest, const ManifestEntry& entry);

/// Symmetric zero padding up to the next multiple of `multiple`; the extra
/// pixel goes to the bottom/right. The inverse crop is recorded in meta.
SegSample pad_to_multiple(const SegSample& sample, int multiple);

/// Undo pad_to_multiple on a prediction produced at padded size.
BinaryMask crop_to_original(const BinaryMask& padded, const SampleMeta& meta);

struct AugmentParams {
  bool flip_h = false;
  bool flip_v = false;
  double angle_deg = 0.0;
};

/// Identical geometric transform for image (bilinear) and mask (nearest
/// neighbor); out-of-frame regions fill with background.
SegSample augment_with(const SegSample& sample, const AugmentParams& params);

/// Draws flips with probability 1/2 each and an angle uniform in
/// [-180°, 180°], then applies them.
SegSample augment(const SegSample& sample, Rng& rng);

/// Contrast-limited adaptive histogram equalization on a [0,1] image.
/// clip_limit >= 1 is a multiple of the uniform histogram level; the clipped
/// excess is redistributed uniformly; per-pixel output interpolates between
/// the four surrounding tile mappings.
std::vector<double> clahe(const std::vector<double>& image, int height, int width,
                          double clip_limit = 2.0, int tiles_r = 8, int tiles_c = 8,
                          int bins = 256);

/// Duplicates every train sample whose foreground ratio is below
/// area_threshold so it appears `factor` times. Val/test untouched.
DatasetManifest oversample(const DatasetManifest& manifest, double area_threshold, int factor);

struct SynthConfig {
  int count = 200;
  int image_size = 64;
  double ratio_lo = 0.01;
  double ratio_hi = 0.08;
  uint64_t seed = 1;
  int patients = 16;
  std::string out_dir;
};

/// Writes a reproducible synthetic dataset of crescent shapes on textured
/// backgrounds: images/ (PGM), contours/ (text), masks/ (reference PGM) and
/// manifest.json under cfg.out_dir. Every mask's foreground ratio lies in
/// [ratio_lo, ratio_hi].
DatasetManifest synth_dataset(const SynthConfig& cfg);

// Mask image helpers ({0,255} PGM).
void write_mask(const std::string& path, const BinaryMask& mask);
BinaryMask read_mask(const std::string& path);

}  // namespace segkit
