#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace segkit {

struct PixelSpacing {
  double row_mm = 1.0;
  double col_mm = 1.0;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;  // row-major {0,1}
  PixelSpacing spacing;

  static BinaryMask zeros(int h, int w, PixelSpacing sp = {});
  uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * width + c]; }
  void set(int r, int c, bool v) { data[static_cast<size_t>(r) * width + c] = v ? 1 : 0; }
  int64_t foreground_count() const;
  bool empty_foreground() const { return foreground_count() == 0; }
};

/// x is the column coordinate, y the row coordinate, both in pixel units;
/// integer coordinates land on pixel centers.
struct Point2 {
  double x;
  double y;
};
using ContourPoints = std::vector<Point2>;

enum class Phase { ED, ES, Unknown };
enum class ContourKind { endo, epi };

Phase phase_from_string(const std::string& s);
ContourKind contour_kind_from_string(const std::string& s);
std::string to_string(Phase p);
std::string to_string(ContourKind c);

/// Raised when a Hausdorff distance is requested for an empty point set.
struct UndefinedHdError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// 2|P∩T| / (|P|+|T|). Both masks empty counts as perfect agreement (1).
double dice_coefficient(const BinaryMask& p, const BinaryMask& t);

/// Foreground pixels with at least one background 4-neighbor; the image
/// border counts as background. Unordered. Throws on an empty mask.
ContourPoints boundary(const BinaryMask& mask);

/// Symmetric Hausdorff distance in mm: the larger of the two directed
/// farthest-nearest-point distances, Euclidean after per-axis mm scaling.
double hausdorff(const ContourPoints& a, const ContourPoints& b, PixelSpacing spacing);

/// Fills a closed contour: a pixel is foreground iff its center is inside by
/// the even-odd rule; centers exactly on the boundary count as inside.
BinaryMask rasterize(const ContourPoints& contour, int height, int width);

struct MetricRecord {
  std::string patient;
  int slice = 0;
  Phase phase = Phase::Unknown;
  ContourKind contour = ContourKind::endo;
  double dice = 0.0;
  std::optional<double> hd_mm;  // absent when the HD is undefined for the sample
};

struct GroupStats {
  int count = 0;
  double dice_mean = 0.0;
  double dice_std = 0.0;
  int hd_count = 0;  // samples with a defined HD
  double hd_mean = 0.0;
  double hd_std = 0.0;
};

/// Per-sample records plus mean (std) aggregates grouped by
/// {overall, ED, ES} × contour kind. Standard deviation is the population
/// one (divisor n). Samples with undefined HD stay in the Dice aggregation
/// and are tallied separately.
struct MetricsReport {
  std::vector<MetricRecord> records;

  static MetricsReport aggregate(std::vector<MetricRecord> records);  // throws on empty

  GroupStats stats(std::optional<Phase> phase, std::optional<ContourKind> contour) const;
  int undefined_hd_count() const;

  std::string to_csv() const;   // header: patient,slice,phase,contour,dice,hd_mm
  std::string to_table() const;
};

}  // namespace segkit
