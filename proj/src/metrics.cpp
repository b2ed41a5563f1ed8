#include "segkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace segkit {

BinaryMask BinaryMask::zeros(int h, int w, PixelSpacing sp) {
  if (h <= 0 || w <= 0) throw std::invalid_argument("mask extents must be positive");
  if (!(sp.row_mm > 0.0) || !(sp.col_mm > 0.0)) {
    throw std::invalid_argument("pixel spacing components must be positive");
  }
  BinaryMask m;
  m.height = h;
  m.width = w;
  m.data.assign(static_cast<size_t>(h) * w, 0);
  m.spacing = sp;
  return m;
}

int64_t BinaryMask::foreground_count() const {
  int64_t n = 0;
  for (uint8_t v : data) {
    if (v) ++n;
  }
  return n;
}

Phase phase_from_string(const std::string& s) {
  if (s == "ED") return Phase::ED;
  if (s == "ES") return Phase::ES;
  if (s == "unknown" || s.empty()) return Phase::Unknown;
  throw std::invalid_argument("unknown cardiac phase '" + s + "' (want ED, ES or unknown)");
}

ContourKind contour_kind_from_string(const std::string& s) {
  if (s == "endo") return ContourKind::endo;
  if (s == "epi") return ContourKind::epi;
  throw std::invalid_argument("unknown contour kind '" + s + "' (want endo or epi)");
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::ED: return "ED";
    case Phase::ES: return "ES";
    case Phase::Unknown: return "unknown";
  }
  return "?";
}

std::string to_string(ContourKind c) { return c == ContourKind::endo ? "endo" : "epi"; }

double dice_coefficient(const BinaryMask& p, const BinaryMask& t) {
  if (p.height != t.height || p.width != t.width) {
    throw std::invalid_argument("dice_coefficient: mask shapes differ (" +
                                std::to_string(p.height) + "x" + std::to_string(p.width) +
                                " vs " + std::to_string(t.height) + "x" +
                                std::to_string(t.width) + ")");
  }
  int64_t inter = 0, cp = 0, ct = 0;
  for (size_t i = 0; i < p.data.size(); ++i) {
    if (p.data[i]) ++cp;
    if (t.data[i]) ++ct;
    if (p.data[i] && t.data[i]) ++inter;
  }
  if (cp + ct == 0) return 1.0;  // both empty: perfect agreement
  return 2.0 * static_cast<double>(inter) / static_cast<double>(cp + ct);
}

ContourPoints boundary(const BinaryMask& mask) {
  if (mask.empty_foreground()) {
    throw std::invalid_argument("boundary: mask has no foreground region");
  }
  ContourPoints pts;
  const int h = mask.height, w = mask.width;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      bool edge = r == 0 || c == 0 || r == h - 1 || c == w - 1 || !mask.at(r - 1, c) ||
                  !mask.at(r + 1, c) || !mask.at(r, c - 1) || !mask.at(r, c + 1);
      if (edge) pts.push_back({static_cast<double>(c), static_cast<double>(r)});
    }
  }
  return pts;
}

double hausdorff(const ContourPoints& a, const ContourPoints& b, PixelSpacing spacing) {
  if (a.empty() || b.empty()) {
    throw UndefinedHdError("hausdorff: undefined for an empty point set");
  }
  const double rm = spacing.row_mm, cm = spacing.col_mm;
  auto directed_sq = [&](const ContourPoints& from, const ContourPoints& to) {
    double worst = 0.0;
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to) {
        double dx = (p.x - q.x) * cm;
        double dy = (p.y - q.y) * rm;
        double d2 = dx * dx + dy * dy;
        if (d2 < best) best = d2;
      }
      if (best > worst) worst = best;
    }
    return worst;
  };
  return std::sqrt(std::max(directed_sq(a, b), directed_sq(b, a)));
}

namespace {

bool on_segment(double x, double y, const Point2& p1, const Point2& p2) {
  double ex = p2.x - p1.x, ey = p2.y - p1.y;
  double cross = ex * (y - p1.y) - ey * (x - p1.x);
  double len2 = ex * ex + ey * ey;
  if (std::abs(cross) > 1e-9 * std::max(1.0, len2)) return false;
  double dot = (x - p1.x) * ex + (y - p1.y) * ey;
  return dot >= -1e-12 && dot <= len2 + 1e-12;
}

}  // namespace

BinaryMask rasterize(const ContourPoints& contour, int height, int width) {
  if (contour.size() < 3) {
    throw std::invalid_argument("rasterize: a closed contour needs at least 3 points, got " +
                                std::to_string(contour.size()));
  }
  BinaryMask mask = BinaryMask::zeros(height, width);

  double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
  for (const auto& p : contour) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  int r0 = std::max(0, static_cast<int>(std::ceil(min_y)));
  int r1 = std::min(height - 1, static_cast<int>(std::floor(max_y)));
  int c0 = std::max(0, static_cast<int>(std::ceil(min_x)));
  int c1 = std::min(width - 1, static_cast<int>(std::floor(max_x)));

  const size_t n = contour.size();
  for (int r = r0; r <= r1; ++r) {
    double y = r;
    for (int c = c0; c <= c1; ++c) {
      double x = c;
      bool inside = false;
      bool on_edge = false;
      for (size_t i = 0; i < n && !on_edge; ++i) {
        if (on_segment(x, y, contour[i], contour[(i + 1) % n])) on_edge = true;
      }
      if (!on_edge) {
        // Even-odd ray cast to the +x side; the half-open vertex rule keeps
        // shared endpoints from double-counting.
        for (size_t i = 0; i < n; ++i) {
          const auto& p1 = contour[i];
          const auto& p2 = contour[(i + 1) % n];
          if ((p1.y > y) != (p2.y > y)) {
            double xint = p1.x + (y - p1.y) * (p2.x - p1.x) / (p2.y - p1.y);
            if (xint > x) inside = !inside;
          }
        }
      }
      if (inside || on_edge) mask.set(r, c, true);
    }
  }
  return mask;
}

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& stdev) {
  mean = 0.0;
  stdev = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  stdev = std::sqrt(acc / static_cast<double>(xs.size()));  // population std
}

}  // namespace

MetricsReport MetricsReport::aggregate(std::vector<MetricRecord> records) {
  if (records.empty()) throw std::invalid_argument("aggregate: no records");
  MetricsReport r;
  r.records = std::move(records);
  return r;
}

GroupStats MetricsReport::stats(std::optional<Phase> phase,
                                std::optional<ContourKind> contour) const {
  GroupStats g;
  std::vector<double> dices, hds;
  for (const auto& rec : records) {
    if (phase && rec.phase != *phase) continue;
    if (contour && rec.contour != *contour) continue;
    ++g.count;
    dices.push_back(rec.dice);
    if (rec.hd_mm) hds.push_back(*rec.hd_mm);
  }
  g.hd_count = static_cast<int>(hds.size());
  mean_std(dices, g.dice_mean, g.dice_std);
  mean_std(hds, g.hd_mean, g.hd_std);
  return g;
}

int MetricsReport::undefined_hd_count() const {
  int n = 0;
  for (const auto& rec : records) {
    if (!rec.hd_mm) ++n;
  }
  return n;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "patient,slice,phase,contour,dice,hd_mm\n";
  os.precision(9);
  for (const auto& rec : records) {
    os << rec.patient << ',' << rec.slice << ',' << to_string(rec.phase) << ','
       << to_string(rec.contour) << ',' << rec.dice << ',';
    if (rec.hd_mm) {
      os << *rec.hd_mm;
    } else {
      os << "nan";
    }
    os << '\n';
  }
  return os.str();
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  auto line = [&](const std::string& label, const GroupStats& g) {
    os << "  " << label;
    for (size_t i = label.size(); i < 10; ++i) os << ' ';
    if (g.count == 0) {
      os << "-\n";
      return;
    }
    os << "dice " << g.dice_mean << " (" << g.dice_std << ")  n=" << g.count;
    if (g.hd_count > 0) {
      os << "  hd_mm " << g.hd_mean << " (" << g.hd_std << ")  n_hd=" << g.hd_count;
    }
    os << '\n';
  };
  for (ContourKind kind : {ContourKind::endo, ContourKind::epi}) {
    GroupStats overall = stats(std::nullopt, kind);
    if (overall.count == 0) continue;
    os << to_string(kind) << ":\n";
    line("overall", overall);
    line("ED", stats(Phase::ED, kind));
    line("ES", stats(Phase::ES, kind));
  }
  GroupStats all = stats(std::nullopt, std::nullopt);
  os << "all:\n";
  line("overall", all);
  int undef = undefined_hd_count();
  if (undef > 0) os << "  undefined-HD samples: " << undef << '\n';
  return os.str();
}

}  // namespace segkit
