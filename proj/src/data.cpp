#include "segkit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "segkit/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace segkit {

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (want train, val or test)");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open manifest");
  json doc;
  try {
    f >> doc;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": manifest parse error: " + e.what());
  }
  if (!doc.contains("samples") || !doc["samples"].is_array()) {
    throw std::runtime_error(path + ": manifest has no 'samples' array");
  }
  DatasetManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  for (const auto& s : doc["samples"]) {
    ManifestEntry e;
    e.image_path = s.at("image").get<std::string>();
    e.contour_path = s.at("contour").get<std::string>();
    e.meta.patient_id = s.at("patient").get<std::string>();
    e.meta.slice_id = s.value("slice", 0);
    e.meta.phase = phase_from_string(s.value("phase", "unknown"));
    e.meta.contour_kind = contour_kind_from_string(s.value("contour_kind", "endo"));
    if (s.contains("spacing")) {
      e.meta.spacing.row_mm = s["spacing"].at(0).get<double>();
      e.meta.spacing.col_mm = s["spacing"].at(1).get<double>();
    }
    e.split = split_from_string(s.value("split", "train"));
    m.entries.push_back(std::move(e));
  }
  m.validate_patient_disjoint();
  return m;
}

void DatasetManifest::save(const std::string& path) const {
  json samples = json::array();
  for (const auto& e : entries) {
    json s;
    s["image"] = e.image_path;
    s["contour"] = e.contour_path;
    s["patient"] = e.meta.patient_id;
    s["slice"] = e.meta.slice_id;
    s["phase"] = to_string(e.meta.phase);
    s["contour_kind"] = to_string(e.meta.contour_kind);
    s["spacing"] = {e.meta.spacing.row_mm, e.meta.spacing.col_mm};
    s["split"] = to_string(e.split);
    samples.push_back(std::move(s));
  }
  json doc;
  doc["version"] = "segkit-manifest-1";
  doc["samples"] = std::move(samples);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot write manifest");
  f << doc.dump(2) << '\n';
}

void DatasetManifest::validate_patient_disjoint() const {
  std::map<std::string, Split> seen;
  for (const auto& e : entries) {
    auto it = seen.find(e.meta.patient_id);
    if (it == seen.end()) {
      seen.emplace(e.meta.patient_id, e.split);
    } else if (it->second != e.split) {
      throw std::runtime_error("manifest: patient '" + e.meta.patient_id +
                               "' appears in splits '" + to_string(it->second) + "' and '" +
                               to_string(e.split) + "'");
    }
  }
}

std::vector<size_t> DatasetManifest::indices_of(Split split) const {
  std::vector<size_t> idx;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) idx.push_back(i);
  }
  return idx;
}

std::string DatasetManifest::resolve(const std::string& rel) const {
  fs::path p(rel);
  if (p.is_absolute() || base_dir.empty()) return rel;
  return (fs::path(base_dir) / p).string();
}

// ---------------------------------------------------------------------------
// Loading

ContourPoints read_contour_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open contour file");
  ContourPoints pts;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream is(line);
    double x, y;
    if (!(is >> x >> y)) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected 'x y' coordinate pair");
    }
    pts.push_back({x, y});
  }
  if (pts.size() < 3) {
    throw std::runtime_error(path + ": fewer than 3 points (" + std::to_string(pts.size()) +
                             ") - not a closed contour");
  }
  return pts;
}

SegSample load_sample(const std::string& image_path, const std::string& contour_path,
                      const SampleMeta& meta) {
  GrayImage img = read_gray_image(image_path);
  ContourPoints contour = read_contour_file(contour_path);
  for (size_t i = 0; i < contour.size(); ++i) {
    const auto& p = contour[i];
    if (p.x < -1.0 || p.x >= img.width + 1.0 || p.y < -1.0 || p.y >= img.height + 1.0) {
      throw std::runtime_error(contour_path + ":" + std::to_string(i + 1) + ": coordinate (" +
                               std::to_string(p.x) + ", " + std::to_string(p.y) +
                               ") lies more than 1 px outside the " + std::to_string(img.width) +
                               "x" + std::to_string(img.height) + " image");
    }
  }
  SegSample s;
  s.height = img.height;
  s.width = img.width;
  s.image.resize(img.pixels.size());
  for (size_t i = 0; i < img.pixels.size(); ++i) s.image[i] = img.pixels[i] / 255.0;
  s.mask = rasterize(contour, img.height, img.width);
  s.mask.spacing = meta.spacing;
  s.meta = meta;
  s.meta.orig_height = img.height;
  s.meta.orig_width = img.width;
  return s;
}

SegSample load_manifest_sample(const DatasetManifest& manifest, const ManifestEntry& entry) {
  return load_sample(manifest.resolve(entry.image_path), manifest.resolve(entry.contour_path),
                     entry.meta);
}

// ---------------------------------------------------------------------------
// Padding

SegSample pad_to_multiple(const SegSample& sample, int multiple) {
  if (multiple < 1) throw std::invalid_argument("pad_to_multiple: multiple must be >= 1");
  int H = sample.height, W = sample.width;
  int nh = (H + multiple - 1) / multiple * multiple;
  int nw = (W + multiple - 1) / multiple * multiple;
  SegSample out;
  out.meta = sample.meta;
  out.meta.orig_height = H;
  out.meta.orig_width = W;
  if (nh == H && nw == W) {
    out.height = H;
    out.width = W;
    out.image = sample.image;
    out.mask = sample.mask;
    out.meta.pad_top = 0;
    out.meta.pad_left = 0;
    return out;
  }
  int pad_top = (nh - H) / 2;  // extra pixel goes to the bottom
  int pad_left = (nw - W) / 2;  // extra pixel goes to the right
  out.height = nh;
  out.width = nw;
  out.image.assign(static_cast<size_t>(nh) * nw, 0.0);
  out.mask = BinaryMask::zeros(nh, nw, sample.mask.spacing);
  for (int r = 0; r < H; ++r) {
    std::copy(sample.image.begin() + static_cast<std::ptrdiff_t>(r) * W,
              sample.image.begin() + static_cast<std::ptrdiff_t>(r + 1) * W,
              out.image.begin() + (static_cast<std::ptrdiff_t>(r + pad_top)) * nw + pad_left);
    for (int c = 0; c < W; ++c) out.mask.set(r + pad_top, c + pad_left, sample.mask.at(r, c));
  }
  out.meta.pad_top = pad_top;
  out.meta.pad_left = pad_left;
  return out;
}

BinaryMask crop_to_original(const BinaryMask& padded, const SampleMeta& meta) {
  if (meta.orig_height == 0 || meta.orig_width == 0) return padded;
  BinaryMask out = BinaryMask::zeros(meta.orig_height, meta.orig_width, padded.spacing);
  for (int r = 0; r < meta.orig_height; ++r) {
    for (int c = 0; c < meta.orig_width; ++c) {
      out.set(r, c, padded.at(r + meta.pad_top, c + meta.pad_left));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

SegSample augment_with(const SegSample& sample, const AugmentParams& params) {
  const int H = sample.height, W = sample.width;
  SegSample out;
  out.height = H;
  out.width = W;
  out.meta = sample.meta;
  out.image.assign(static_cast<size_t>(H) * W, 0.0);
  out.mask = BinaryMask::zeros(H, W, sample.mask.spacing);

  const double rad = params.angle_deg * M_PI / 180.0;
  const double ca = std::cos(rad), sa = std::sin(rad);
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  const bool pure_identity = !params.flip_h && !params.flip_v && params.angle_deg == 0.0;
  if (pure_identity) {
    out.image = sample.image;
    out.mask = sample.mask;
    return out;
  }

  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      // inverse map: rotate output coords back, then undo the flips
      double dy = r - cy, dx = c - cx;
      double sy = ca * dy + sa * dx + cy;
      double sx = -sa * dy + ca * dx + cx;
      if (params.flip_v) sy = (H - 1) - sy;
      if (params.flip_h) sx = (W - 1) - sx;

      // image: bilinear with zero fill
      double iv = 0.0;
      int y0 = static_cast<int>(std::floor(sy));
      int x0 = static_cast<int>(std::floor(sx));
      double fy = sy - y0, fx = sx - x0;
      for (int oy = 0; oy <= 1; ++oy) {
        for (int ox = 0; ox <= 1; ++ox) {
          int yy = y0 + oy, xx = x0 + ox;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          double wgt = (oy ? fy : 1 - fy) * (ox ? fx : 1 - fx);
          iv += wgt * sample.image[static_cast<size_t>(yy) * W + xx];
        }
      }
      out.image[static_cast<size_t>(r) * W + c] = iv;

      // mask: nearest neighbor, background outside
      int ny = static_cast<int>(std::lround(sy));
      int nx = static_cast<int>(std::lround(sx));
      bool mv = ny >= 0 && ny < H && nx >= 0 && nx < W && sample.mask.at(ny, nx);
      out.mask.set(r, c, mv);
    }
  }
  return out;
}

SegSample augment(const SegSample& sample, Rng& rng) {
  AugmentParams p;
  p.flip_h = rng.bernoulli(0.5);
  p.flip_v = rng.bernoulli(0.5);
  p.angle_deg = rng.uniform(-180.0, 180.0);
  return augment_with(sample, p);
}

// ---------------------------------------------------------------------------
// CLAHE

namespace {

// Clip the histogram at `limit` and spread the excess uniformly; repeat while
// the spreading pushes bins back over the limit. Converges geometrically; the
// final pass leaves any residue spread evenly.
void clip_histogram(std::vector<double>& hist, double limit) {
  for (int pass = 0; pass < 64; ++pass) {
    double excess = 0.0;
    for (double& h : hist) {
      if (h > limit) {
        excess += h - limit;
        h = limit;
      }
    }
    if (excess <= 1e-12) return;
    double share = excess / static_cast<double>(hist.size());
    for (double& h : hist) h += share;
  }
}

}  // namespace

std::vector<double> clahe(const std::vector<double>& image, int height, int width,
                          double clip_limit, int tiles_r, int tiles_c, int bins) {
  if (tiles_r < 1 || tiles_c < 1) throw std::invalid_argument("clahe: tile counts must be >= 1");
  if (tiles_r > height || tiles_c > width) {
    throw std::invalid_argument("clahe: tile grid " + std::to_string(tiles_r) + "x" +
                                std::to_string(tiles_c) + " larger than image " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  if (clip_limit < 1.0) throw std::invalid_argument("clahe: clip_limit must be >= 1");
  if (bins < 2) throw std::invalid_argument("clahe: need at least 2 bins");

  auto bin_of = [bins](double v) {
    int b = static_cast<int>(v * bins);
    return std::min(std::max(b, 0), bins - 1);
  };

  // Tile r covers rows [row_lo[r], row_lo[r+1]).
  std::vector<int> row_lo(static_cast<size_t>(tiles_r) + 1), col_lo(static_cast<size_t>(tiles_c) + 1);
  for (int t = 0; t <= tiles_r; ++t) row_lo[t] = static_cast<int>(static_cast<int64_t>(height) * t / tiles_r);
  for (int t = 0; t <= tiles_c; ++t) col_lo[t] = static_cast<int>(static_cast<int64_t>(width) * t / tiles_c);

  // Per-tile equalization map: bin -> clipped CDF / tile pixel count.
  std::vector<std::vector<double>> maps(static_cast<size_t>(tiles_r) * tiles_c);
  std::vector<double> tile_center_r(static_cast<size_t>(tiles_r)), tile_center_c(static_cast<size_t>(tiles_c));
  for (int tr = 0; tr < tiles_r; ++tr) {
    for (int tc = 0; tc < tiles_c; ++tc) {
      std::vector<double> hist(static_cast<size_t>(bins), 0.0);
      int64_t npix = 0;
      for (int r = row_lo[tr]; r < row_lo[tr + 1]; ++r) {
        for (int c = col_lo[tc]; c < col_lo[tc + 1]; ++c) {
          hist[static_cast<size_t>(bin_of(image[static_cast<size_t>(r) * width + c]))] += 1.0;
          ++npix;
        }
      }
      double limit = clip_limit * static_cast<double>(npix) / bins;
      clip_histogram(hist, limit);
      auto& map = maps[static_cast<size_t>(tr) * tiles_c + tc];
      map.resize(static_cast<size_t>(bins));
      double run = 0.0;
      for (int b = 0; b < bins; ++b) {
        run += hist[static_cast<size_t>(b)];
        map[static_cast<size_t>(b)] = run / static_cast<double>(npix);
      }
    }
  }
  for (int tr = 0; tr < tiles_r; ++tr) {
    tile_center_r[tr] = (row_lo[tr] + row_lo[tr + 1] - 1) / 2.0;
  }
  for (int tc = 0; tc < tiles_c; ++tc) {
    tile_center_c[tc] = (col_lo[tc] + col_lo[tc + 1] - 1) / 2.0;
  }

  std::vector<double> out(image.size());
  for (int r = 0; r < height; ++r) {
    // bracketing tile rows for interpolation
    int tr1 = 0;
    while (tr1 + 1 < tiles_r && tile_center_r[tr1 + 1] < r) ++tr1;
    int tr2 = std::min(tr1 + 1, tiles_r - 1);
    if (r <= tile_center_r[tr1]) tr2 = tr1;
    double wr = tr2 == tr1 ? 0.0
                           : (r - tile_center_r[tr1]) / (tile_center_r[tr2] - tile_center_r[tr1]);
    wr = std::min(std::max(wr, 0.0), 1.0);
    for (int c = 0; c < width; ++c) {
      int tc1 = 0;
      while (tc1 + 1 < tiles_c && tile_center_c[tc1 + 1] < c) ++tc1;
      int tc2 = std::min(tc1 + 1, tiles_c - 1);
      if (c <= tile_center_c[tc1]) tc2 = tc1;
      double wc = tc2 == tc1
                      ? 0.0
                      : (c - tile_center_c[tc1]) / (tile_center_c[tc2] - tile_center_c[tc1]);
      wc = std::min(std::max(wc, 0.0), 1.0);

      int b = bin_of(image[static_cast<size_t>(r) * width + c]);
      double m11 = maps[static_cast<size_t>(tr1) * tiles_c + tc1][static_cast<size_t>(b)];
      double m12 = maps[static_cast<size_t>(tr1) * tiles_c + tc2][static_cast<size_t>(b)];
      double m21 = maps[static_cast<size_t>(tr2) * tiles_c + tc1][static_cast<size_t>(b)];
      double m22 = maps[static_cast<size_t>(tr2) * tiles_c + tc2][static_cast<size_t>(b)];
      double top = m11 * (1 - wc) + m12 * wc;
      double bot = m21 * (1 - wc) + m22 * wc;
      out[static_cast<size_t>(r) * width + c] = top * (1 - wr) + bot * wr;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Oversampling

DatasetManifest oversample(const DatasetManifest& manifest, double area_threshold, int factor) {
  if (factor < 1) throw std::invalid_argument("oversample: factor must be >= 1");
  DatasetManifest out;
  out.base_dir = manifest.base_dir;
  for (const auto& e : manifest.entries) {
    out.entries.push_back(e);
    if (e.split != Split::train || factor == 1) continue;
    SegSample s = load_manifest_sample(manifest, e);
    double ratio = static_cast<double>(s.mask.foreground_count()) /
                   (static_cast<double>(s.height) * s.width);
    if (ratio < area_threshold) {
      for (int k = 1; k < factor; ++k) out.entries.push_back(e);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic crescents

namespace {

struct Circle {
  double cx, cy, r;
};

// Boundary polygon of disk(outer) minus disk(cut); the circles must
// partially overlap.
ContourPoints crescent_polygon(const Circle& outer, const Circle& cut) {
  double dx = cut.cx - outer.cx, dy = cut.cy - outer.cy;
  double d = std::sqrt(dx * dx + dy * dy);
  double beta = std::atan2(dy, dx);
  double a = (d * d + outer.r * outer.r - cut.r * cut.r) / (2.0 * d);
  double h2 = outer.r * outer.r - a * a;
  if (h2 <= 0.0) throw std::runtime_error("crescent: circles do not properly intersect");
  double h = std::sqrt(h2);
  double delta1 = std::atan2(h, a);
  double delta2 = std::atan2(h, d - a);

  ContourPoints poly;
  auto arc = [&poly](double cx, double cy, double r, double from, double to, double max_step) {
    int n = std::max(8, static_cast<int>(std::ceil(std::abs(to - from) * r / max_step)));
    for (int i = 0; i < n; ++i) {
      double t = from + (to - from) * i / n;
      poly.push_back({cx + r * std::cos(t), cy + r * std::sin(t)});
    }
  };
  // outer arc sweeps the side away from the cut, then the cut arc closes the
  // contour through the bite
  arc(outer.cx, outer.cy, outer.r, beta + delta1, beta + 2 * M_PI - delta1, 0.35);
  arc(cut.cx, cut.cy, cut.r, beta + M_PI + delta2, beta + M_PI - delta2, 0.35);
  // quantize to the contour file precision so that reloading the written
  // file rasterizes to exactly the mask produced here
  for (auto& p : poly) {
    p.x = std::round(p.x * 1e6) / 1e6;
    p.y = std::round(p.y * 1e6) / 1e6;
  }
  return poly;
}

struct CrescentShape {
  double cut_ratio;     // cut radius / outer radius
  double offset_ratio;  // center distance / outer radius
  double angle;         // orientation of the cut direction
  double jitter_x, jitter_y;  // center placement in [0,1] fractions
};

double raster_ratio(const CrescentShape& s, double radius, int size, BinaryMask* out_mask,
                    ContourPoints* out_poly) {
  double margin = radius + 2.0;  // the crescent lies inside the outer disk
  double lo = margin, hi = size - 1 - margin;
  if (hi <= lo) return -1.0;  // does not fit
  double cx = lo + (hi - lo) * s.jitter_x;
  double cy = lo + (hi - lo) * s.jitter_y;
  Circle outer{cx, cy, radius};
  Circle cut{cx + radius * s.offset_ratio * std::cos(s.angle),
             cy + radius * s.offset_ratio * std::sin(s.angle), radius * s.cut_ratio};
  ContourPoints poly = crescent_polygon(outer, cut);
  BinaryMask mask = rasterize(poly, size, size);
  double ratio = static_cast<double>(mask.foreground_count()) /
                 (static_cast<double>(size) * size);
  if (out_mask) *out_mask = std::move(mask);
  if (out_poly) *out_poly = std::move(poly);
  return ratio;
}

std::vector<double> gaussian_blur(const std::vector<double>& in, int h, int w, double sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;
  std::vector<double> tmp(in.size()), out(in.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        int cc = std::min(std::max(c + i, 0), w - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * in[static_cast<size_t>(r) * w + cc];
      }
      tmp[static_cast<size_t>(r) * w + c] = acc;
    }
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        int rr = std::min(std::max(r + i, 0), h - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(rr) * w + c];
      }
      out[static_cast<size_t>(r) * w + c] = acc;
    }
  }
  return out;
}

}  // namespace

void write_mask(const std::string& path, const BinaryMask& mask) {
  GrayImage img;
  img.height = mask.height;
  img.width = mask.width;
  img.pixels.resize(mask.data.size());
  for (size_t i = 0; i < mask.data.size(); ++i) img.pixels[i] = mask.data[i] ? 255 : 0;
  write_pgm(path, img);
}

BinaryMask read_mask(const std::string& path) {
  GrayImage img = read_gray_image(path);
  BinaryMask m = BinaryMask::zeros(img.height, img.width);
  for (size_t i = 0; i < img.pixels.size(); ++i) m.data[i] = img.pixels[i] > 127 ? 1 : 0;
  return m;
}

DatasetManifest synth_dataset(const SynthConfig& cfg) {
  if (cfg.count < 1) throw std::invalid_argument("synth: count must be >= 1");
  if (cfg.image_size < 16) throw std::invalid_argument("synth: image_size must be >= 16");
  if (!(cfg.ratio_lo > 0.0 && cfg.ratio_hi < 1.0 && cfg.ratio_lo <= cfg.ratio_hi)) {
    throw std::invalid_argument("synth: ratio range must satisfy 0 < lo <= hi < 1");
  }
  const int size = cfg.image_size;
  // smallest representable crescent is a few pixels; largest must still fit
  double max_fit_radius = (size - 6) / 2.4;
  double max_ratio = 0.55 * M_PI * max_fit_radius * max_fit_radius / (size * size);
  if (cfg.ratio_lo > max_ratio) {
    throw std::invalid_argument("synth: ratio_lo " + std::to_string(cfg.ratio_lo) +
                                " infeasible for image size " + std::to_string(size));
  }

  fs::create_directories(fs::path(cfg.out_dir) / "images");
  fs::create_directories(fs::path(cfg.out_dir) / "contours");
  fs::create_directories(fs::path(cfg.out_dir) / "masks");

  DatasetManifest manifest;
  manifest.base_dir = cfg.out_dir;

  int patients = std::max(1, std::min(cfg.patients, cfg.count));
  // patient-level split, roughly 3:1 train-pool:test then 3:1 train:val
  std::vector<int> patient_ids(static_cast<size_t>(patients));
  for (int i = 0; i < patients; ++i) patient_ids[static_cast<size_t>(i)] = i;
  {
    Rng prng(derive_seed(cfg.seed, "synth.split"));
    for (int i = patients - 1; i > 0; --i) {
      int j = static_cast<int>(prng.uniform_int(static_cast<uint64_t>(i + 1)));
      std::swap(patient_ids[static_cast<size_t>(i)], patient_ids[static_cast<size_t>(j)]);
    }
  }
  int n_test = patients >= 4 ? patients / 4 : 0;
  int remaining = patients - n_test;
  int n_val = remaining >= 4 ? remaining / 4 : (remaining >= 2 ? 1 : 0);
  std::map<int, Split> patient_split;
  for (int i = 0; i < patients; ++i) {
    Split s = Split::train;
    if (i < n_test) {
      s = Split::test;
    } else if (i < n_test + n_val) {
      s = Split::val;
    }
    patient_split[patient_ids[static_cast<size_t>(i)]] = s;
  }

  for (int idx = 0; idx < cfg.count; ++idx) {
    Rng rng(derive_seed(cfg.seed, "synth.sample", static_cast<uint64_t>(idx)));

    BinaryMask mask;
    ContourPoints poly;
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
      CrescentShape shape;
      shape.cut_ratio = rng.uniform(0.6, 0.95);
      shape.offset_ratio = rng.uniform(1.0 - shape.cut_ratio + 0.15, 1.0);
      shape.angle = rng.uniform(0.0, 2 * M_PI);
      shape.jitter_x = rng.uniform(0.0, 1.0);
      shape.jitter_y = rng.uniform(0.0, 1.0);
      double target = rng.uniform(cfg.ratio_lo, cfg.ratio_hi);

      // bisect the outer radius until the rasterized ratio hits the target
      double r_lo = 1.5, r_hi = max_fit_radius;
      double ratio = -1.0;
      double radius = 0.0;
      for (int it = 0; it < 40; ++it) {
        double r_mid = 0.5 * (r_lo + r_hi);
        radius = r_mid;
        ratio = raster_ratio(shape, r_mid, size, &mask, &poly);
        if (ratio < 0.0 || ratio > target) {
          r_hi = r_mid;
        } else if (ratio < target) {
          r_lo = r_mid;
        } else {
          break;
        }
      }
      // keep small crescents compact: scaling a fixed eccentricity down can
      // push the lune wall below a pixel, which no raster can represent
      double axial_width = radius * (1.0 + shape.offset_ratio - shape.cut_ratio);
      ok = ratio >= cfg.ratio_lo && ratio <= cfg.ratio_hi && mask.foreground_count() > 0 &&
           axial_width >= 2.6;
    }
    if (!ok) {
      throw std::runtime_error("synth: could not fit a crescent with ratio in [" +
                               std::to_string(cfg.ratio_lo) + ", " +
                               std::to_string(cfg.ratio_hi) + "] at size " +
                               std::to_string(size));
    }

    // textured background + blurred bright crescent + grain
    std::vector<double> img(static_cast<size_t>(size) * size, 0.0);
    double base = rng.uniform(0.25, 0.45);
    double fx = rng.uniform(0.5, 2.0) / size, fy = rng.uniform(0.5, 2.0) / size;
    double ph1 = rng.uniform(0.0, 2 * M_PI), ph2 = rng.uniform(0.0, 2 * M_PI);
    double amp = rng.uniform(0.04, 0.10);
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        img[static_cast<size_t>(r) * size + c] =
            base + amp * std::sin(2 * M_PI * (fx * c + fy * r) + ph1) +
            amp * 0.6 * std::cos(2 * M_PI * (fy * c - fx * r) + ph2);
      }
    }
    std::vector<double> soft(static_cast<size_t>(size) * size, 0.0);
    for (size_t i = 0; i < mask.data.size(); ++i) soft[i] = mask.data[i] ? 1.0 : 0.0;
    soft = gaussian_blur(soft, size, size, rng.uniform(0.8, 1.4));
    double contrast = rng.uniform(0.28, 0.45);
    for (size_t i = 0; i < img.size(); ++i) {
      img[i] += contrast * soft[i] + 0.03 * rng.normal();
      img[i] = std::min(std::max(img[i], 0.0), 1.0);
    }

    char name[32];
    std::snprintf(name, sizeof(name), "s%04d", idx);
    std::string image_rel = std::string("images/") + name + ".pgm";
    std::string contour_rel = std::string("contours/") + name + ".txt";
    std::string mask_rel = std::string("masks/") + name + ".pgm";

    GrayImage out_img;
    out_img.height = size;
    out_img.width = size;
    out_img.pixels.resize(img.size());
    for (size_t i = 0; i < img.size(); ++i) {
      out_img.pixels[i] = static_cast<uint8_t>(std::lround(img[i] * 255.0));
    }
    write_pgm((fs::path(cfg.out_dir) / image_rel).string(), out_img);
    {
      std::ofstream cf(fs::path(cfg.out_dir) / contour_rel, std::ios::trunc);
      cf.precision(6);
      cf << std::fixed;
      for (const auto& p : poly) cf << p.x << ' ' << p.y << '\n';
    }
    write_mask((fs::path(cfg.out_dir) / mask_rel).string(), mask);

    ManifestEntry e;
    e.image_path = image_rel;
    e.contour_path = contour_rel;
    int patient = idx % patients;
    int slice = idx / patients;
    e.meta.patient_id = "synth" + std::to_string(patient);
    e.meta.slice_id = slice;
    // alternate phases within each patient so ED/ES groups are populated
    e.meta.phase = (slice % 2 == 0) ? Phase::ED : Phase::ES;
    e.meta.contour_kind = ContourKind::endo;
    e.split = patient_split[patient];
    manifest.entries.push_back(std::move(e));
  }

  manifest.validate_patient_disjoint();
  manifest.save((fs::path(cfg.out_dir) / "manifest.json").string());
  return manifest;
}

}  // namespace segkit
