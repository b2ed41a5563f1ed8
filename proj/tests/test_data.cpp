#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "segkit/data.hpp"
#include "segkit/image_io.hpp"
#include "support/oracles.hpp"

using namespace segkit;
namespace fs = std::filesystem;

namespace {

fs::path test_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("segkit_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

SegSample disk_sample(int size, double radius) {
  SegSample s;
  s.height = size;
  s.width = size;
  s.image.assign(static_cast<size_t>(size) * size, 0.2);
  s.mask = BinaryMask::zeros(size, size);
  double c = (size - 1) / 2.0;
  for (int r = 0; r < size; ++r) {
    for (int cc = 0; cc < size; ++cc) {
      if ((r - c) * (r - c) + (cc - c) * (cc - c) <= radius * radius) {
        s.mask.set(r, cc, true);
        s.image[static_cast<size_t>(r) * size + cc] = 0.8;
      }
    }
  }
  return s;
}

}  // namespace

TEST_CASE("pgm: round trip is byte-exact") {
  auto dir = test_dir("pgm");
  GrayImage img;
  img.height = 5;
  img.width = 7;
  for (int i = 0; i < 35; ++i) img.pixels.push_back(static_cast<uint8_t>(i * 7 % 256));
  auto path = (dir / "a.pgm").string();
  write_pgm(path, img);
  GrayImage back = read_pgm(path);
  CHECK(back.height == 5);
  CHECK(back.width == 7);
  CHECK(back.pixels == img.pixels);
  write_pgm(path, back);
  CHECK(slurp(path) == slurp(path));
}

TEST_CASE("png: write/read round trip") {
  auto dir = test_dir("png");
  GrayImage img;
  img.height = 9;
  img.width = 13;
  for (int i = 0; i < 9 * 13; ++i) img.pixels.push_back(static_cast<uint8_t>((i * 31) % 256));
  auto path = (dir / "a.png").string();
  write_png(path, img);
  GrayImage back = read_png(path);
  CHECK(back.pixels == img.pixels);
  GrayImage sniffed = read_gray_image(path);
  CHECK(sniffed.pixels == img.pixels);
}

TEST_CASE("png: reader handles all five scanline filters") {
  // hand-built 4x4 PNG, one filter type per row (0,1,2,4) plus 3 on a 5th row
  const int w = 4, h = 5;
  std::vector<uint8_t> expect = {
      10, 20, 30,  40,
      15, 30, 45,  60,
      20, 40, 60,  80,
      30, 55, 80, 105,
      40, 70, 100, 130,
  };
  std::vector<uint8_t> raw;
  auto row = [&](int r) { return expect.data() + r * w; };
  // row 0: filter 0 (none)
  raw.push_back(0);
  for (int c = 0; c < w; ++c) raw.push_back(row(0)[c]);
  // row 1: filter 1 (sub)
  raw.push_back(1);
  for (int c = 0; c < w; ++c) raw.push_back(static_cast<uint8_t>(row(1)[c] - (c ? row(1)[c - 1] : 0)));
  // row 2: filter 2 (up)
  raw.push_back(2);
  for (int c = 0; c < w; ++c) raw.push_back(static_cast<uint8_t>(row(2)[c] - row(1)[c]));
  // row 3: filter 3 (average)
  raw.push_back(3);
  for (int c = 0; c < w; ++c) {
    int left = c ? row(3)[c - 1] : 0;
    raw.push_back(static_cast<uint8_t>(row(3)[c] - (left + row(2)[c]) / 2));
  }
  // row 4: filter 4 (paeth)
  raw.push_back(4);
  for (int c = 0; c < w; ++c) {
    int a = c ? row(4)[c - 1] : 0;
    int b = row(3)[c];
    int cc = c ? row(3)[c - 1] : 0;
    int p = a + b - cc;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - cc);
    int pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : cc);
    raw.push_back(static_cast<uint8_t>(row(4)[c] - pred));
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(bound);
  REQUIRE(compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK);
  comp.resize(bound);

  std::vector<uint8_t> png = {137, 80, 78, 71, 13, 10, 26, 10};
  auto be32 = [&png](uint32_t x) {
    png.push_back(static_cast<uint8_t>(x >> 24));
    png.push_back(static_cast<uint8_t>(x >> 16));
    png.push_back(static_cast<uint8_t>(x >> 8));
    png.push_back(static_cast<uint8_t>(x));
  };
  auto chunk = [&](const char* type, const std::vector<uint8_t>& data) {
    be32(static_cast<uint32_t>(data.size()));
    size_t start = png.size();
    png.insert(png.end(), type, type + 4);
    png.insert(png.end(), data.begin(), data.end());
    uint32_t crc = static_cast<uint32_t>(
        crc32(0L, png.data() + start, static_cast<uInt>(png.size() - start)));
    be32(crc);
  };
  std::vector<uint8_t> ihdr;
  auto ihdr32 = [&ihdr](uint32_t x) {
    ihdr.push_back(static_cast<uint8_t>(x >> 24));
    ihdr.push_back(static_cast<uint8_t>(x >> 16));
    ihdr.push_back(static_cast<uint8_t>(x >> 8));
    ihdr.push_back(static_cast<uint8_t>(x));
  };
  ihdr32(w);
  ihdr32(h);
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});
  chunk("IHDR", ihdr);
  chunk("IDAT", comp);
  chunk("IEND", {});

  auto dir = test_dir("png_filters");
  auto path = dir / "filters.png";
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
  GrayImage back = read_png(path.string());
  REQUIRE(back.width == w);
  REQUIRE(back.height == h);
  CHECK(back.pixels == expect);
}

TEST_CASE("mask image round trip is identical") {
  auto dir = test_dir("mask");
  BinaryMask m = BinaryMask::zeros(6, 9);
  m.set(0, 0, true);
  m.set(3, 4, true);
  m.set(5, 8, true);
  auto path = (dir / "m.pgm").string();
  write_mask(path, m);
  BinaryMask back = read_mask(path);
  CHECK(back.data == m.data);
}

TEST_CASE("load_sample: square contour on a blank image reproduces the raster example") {
  auto dir = test_dir("load_sample");
  GrayImage img;
  img.height = 16;
  img.width = 16;
  img.pixels.assign(256, 100);
  write_pgm((dir / "img.pgm").string(), img);
  {
    std::ofstream c(dir / "contour.txt");
    c << "0.5 0.5\n4.5 0.5\n4.5 4.5\n0.5 4.5\n";
  }
  SampleMeta meta;
  meta.patient_id = "p0";
  SegSample s = load_sample((dir / "img.pgm").string(), (dir / "contour.txt").string(), meta);
  CHECK(s.mask.foreground_count() == 16);
  for (int r = 1; r <= 4; ++r) {
    for (int c = 1; c <= 4; ++c) CHECK(s.mask.at(r, c) == 1);
  }
  CHECK(s.image[0] == doctest::Approx(100.0 / 255.0));
}

TEST_CASE("load_sample: empty and short contour files are rejected") {
  auto dir = test_dir("load_err");
  GrayImage img;
  img.height = 8;
  img.width = 8;
  img.pixels.assign(64, 0);
  write_pgm((dir / "img.pgm").string(), img);
  { std::ofstream c(dir / "empty.txt"); }
  try {
    load_sample((dir / "img.pgm").string(), (dir / "empty.txt").string(), SampleMeta{});
    FAIL("expected rejection");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("fewer than 3 points") != std::string::npos);
  }
}

TEST_CASE("load_sample: far out-of-range coordinates carry file and line") {
  auto dir = test_dir("load_oob");
  GrayImage img;
  img.height = 8;
  img.width = 8;
  img.pixels.assign(64, 0);
  write_pgm((dir / "img.pgm").string(), img);
  {
    std::ofstream c(dir / "bad.txt");
    c << "1 1\n2 1\n30 5\n";  // x=30 on an 8-wide image
  }
  try {
    load_sample((dir / "img.pgm").string(), (dir / "bad.txt").string(), SampleMeta{});
    FAIL("expected rejection");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("bad.txt:3") != std::string::npos);
  }
  // within 1 px of the frame is tolerated
  {
    std::ofstream c(dir / "edge.txt");
    c << "-0.9 0\n7.9 0\n7.9 7.5\n";
  }
  CHECK_NOTHROW(load_sample((dir / "img.pgm").string(), (dir / "edge.txt").string(),
                            SampleMeta{}));
}

TEST_CASE("pad_to_multiple: 256x216 pads to 256x224 with left/right 4") {
  SegSample s;
  s.height = 256;
  s.width = 216;
  s.image.assign(256 * 216, 0.5);
  s.mask = BinaryMask::zeros(256, 216);
  s.mask.set(100, 100, true);
  SegSample p = pad_to_multiple(s, 16);
  CHECK(p.height == 256);
  CHECK(p.width == 224);
  CHECK(p.meta.pad_left == 4);
  CHECK(p.meta.pad_top == 0);
  CHECK(p.mask.at(100, 104) == 1);
  CHECK(p.mask.foreground_count() == 1);
}

TEST_CASE("pad_to_multiple: already divisible input is unchanged; crop inverts pad") {
  SegSample s = disk_sample(64, 10.0);
  SegSample p = pad_to_multiple(s, 16);
  CHECK(p.height == 64);
  CHECK(p.width == 64);
  CHECK(p.image == s.image);

  SegSample odd = disk_sample(30, 6.0);
  SegSample padded = pad_to_multiple(odd, 16);
  CHECK(padded.height == 32);
  CHECK(padded.width == 32);
  CHECK(padded.meta.pad_top == 1);  // extra pixel at the bottom
  BinaryMask back = crop_to_original(padded.mask, padded.meta);
  CHECK(back.data == odd.mask.data);
}

TEST_CASE("augment: identity parameters are the exact identity") {
  SegSample s = disk_sample(32, 7.0);
  SegSample a = augment_with(s, AugmentParams{});
  CHECK(a.image == s.image);
  CHECK(a.mask.data == s.mask.data);
}

TEST_CASE("augment: rotating 180 twice nearly recovers a centered disk") {
  SegSample s = disk_sample(33, 8.0);
  AugmentParams p;
  p.angle_deg = 180.0;
  SegSample once = augment_with(s, p);
  SegSample twice = augment_with(once, p);
  CHECK(dice_coefficient(twice.mask, s.mask) >= 0.99);
}

TEST_CASE("augment: flips are exact and masks stay binary") {
  SegSample s = disk_sample(16, 4.0);
  s.mask.set(0, 3, true);
  AugmentParams p;
  p.flip_h = true;
  SegSample a = augment_with(s, p);
  CHECK(a.mask.at(0, 16 - 1 - 3) == 1);
  for (uint8_t v : a.mask.data) CHECK((v == 0 || v == 1));

  p.flip_h = false;
  p.flip_v = true;
  SegSample b = augment_with(s, p);
  CHECK(b.mask.at(16 - 1 - 0, 3) == 1);
}

TEST_CASE("augment: image and mask receive the same geometric transform") {
  // render the mask as an image, transform both, threshold the image result;
  // the bilinear-vs-nearest disagreement lives on the blob boundary, so the
  // blob has to be large against its perimeter
  SegSample s = disk_sample(96, 29.0);
  for (size_t i = 0; i < s.image.size(); ++i) s.image[i] = s.mask.data[i] ? 1.0 : 0.0;
  Rng rng(77);
  for (int trial = 0; trial < 8; ++trial) {
    AugmentParams p;
    p.flip_h = rng.bernoulli(0.5);
    p.flip_v = rng.bernoulli(0.5);
    p.angle_deg = rng.uniform(-180.0, 180.0);
    SegSample a = augment_with(s, p);
    BinaryMask from_image = BinaryMask::zeros(96, 96);
    for (size_t i = 0; i < a.image.size(); ++i) from_image.data[i] = a.image[i] > 0.5 ? 1 : 0;
    CHECK(dice_coefficient(from_image, a.mask) >= 0.99);
  }
}

TEST_CASE("clahe: output stays in [0,1] on random images") {
  Rng rng(41);
  std::vector<double> img(64 * 64);
  for (auto& v : img) v = rng.uniform(0.0, 1.0);
  auto out = clahe(img, 64, 64, 2.0, 8, 8);
  for (double v : out) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("clahe: unclipped single tile equals global histogram equalization") {
  Rng rng(42);
  std::vector<double> img(64 * 64);
  for (auto& v : img) v = rng.uniform(0.0, 1.0) * rng.uniform(0.3, 1.0);
  auto got = clahe(img, 64, 64, 1e12, 1, 1);
  auto want = oracles::global_hist_eq_ref(img);
  for (size_t i = 0; i < img.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

  // output is close to uniform: sorted values track the diagonal
  std::vector<double> sorted = got;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < sorted.size(); i += 256) {
    double expect = static_cast<double>(i) / sorted.size();
    CHECK(std::abs(sorted[i] - expect) < 0.02);
  }
}

TEST_CASE("clahe: single-tile mapping is monotone") {
  Rng rng(43);
  std::vector<double> img(32 * 32);
  for (auto& v : img) v = rng.uniform(0.0, 1.0);
  auto out = clahe(img, 32, 32, 4.0, 1, 1);
  for (size_t i = 0; i < img.size(); ++i) {
    for (size_t j = 0; j < img.size(); j += 37) {
      if (img[i] <= img[j]) CHECK(out[i] <= out[j] + 1e-12);
    }
  }
}

TEST_CASE("clahe: idempotent on a per-tile uniform-histogram image") {
  // each 16x16 tile contains the full 0..255 ramp: per-tile histograms are flat
  const int size = 64;
  std::vector<double> img(static_cast<size_t>(size) * size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      int within = (r % 16) * 16 + (c % 16);
      img[static_cast<size_t>(r) * size + c] = within / 255.0;
    }
  }
  auto once = clahe(img, size, size, 2.0, 4, 4);
  for (size_t i = 0; i < img.size(); ++i) CHECK(std::abs(once[i] - img[i]) <= 2.0 / 256 + 1e-12);
  auto twice = clahe(once, size, size, 2.0, 4, 4);
  for (size_t i = 0; i < img.size(); ++i) CHECK(std::abs(twice[i] - once[i]) <= 2.0 / 256 + 1e-12);
}

TEST_CASE("clahe: tile grid larger than the image is rejected") {
  std::vector<double> img(8 * 8, 0.5);
  CHECK_THROWS_AS(clahe(img, 8, 8, 2.0, 16, 2), std::invalid_argument);
  CHECK_THROWS_AS(clahe(img, 8, 8, 0.5, 2, 2), std::invalid_argument);
}

namespace {

DatasetManifest tiny_synth(const std::string& tag, int count, double lo, double hi, uint64_t seed,
                           int size = 32) {
  SynthConfig cfg;
  cfg.count = count;
  cfg.image_size = size;
  cfg.ratio_lo = lo;
  cfg.ratio_hi = hi;
  cfg.seed = seed;
  cfg.out_dir = test_dir("synth_" + tag).string();
  return synth_dataset(cfg);
}

}  // namespace

TEST_CASE("synth_dataset: every mask ratio lies in the requested range") {
  auto manifest = tiny_synth("range", 30, 0.01, 0.08, 5);
  REQUIRE(manifest.entries.size() == 30);
  double sum_ratio = 0.0;
  for (const auto& e : manifest.entries) {
    SegSample s = load_manifest_sample(manifest, e);
    double ratio = static_cast<double>(s.mask.foreground_count()) / (s.height * s.width);
    CHECK(ratio >= 0.01);
    CHECK(ratio <= 0.08);
    sum_ratio += ratio;
  }
  double mean = sum_ratio / 30;
  CHECK(mean > 0.01);
  CHECK(mean < 0.08);
}

TEST_CASE("synth_dataset: scarce range works and splits are patient-disjoint") {
  auto manifest = tiny_synth("scarce", 24, 0.002, 0.008, 7, 64);
  manifest.validate_patient_disjoint();
  int train = 0, val = 0, test = 0;
  for (const auto& e : manifest.entries) {
    SegSample s = load_manifest_sample(manifest, e);
    double ratio = static_cast<double>(s.mask.foreground_count()) / (s.height * s.width);
    CHECK(ratio >= 0.002);
    CHECK(ratio <= 0.008);
    if (e.split == Split::train) ++train;
    if (e.split == Split::val) ++val;
    if (e.split == Split::test) ++test;
  }
  CHECK(train > 0);
  CHECK(val > 0);
  CHECK(test > 0);
}

TEST_CASE("synth_dataset: identical seeds give byte-identical files") {
  auto m1 = tiny_synth("det_a", 6, 0.01, 0.08, 99);
  auto m2 = tiny_synth("det_b", 6, 0.01, 0.08, 99);
  for (size_t i = 0; i < m1.entries.size(); ++i) {
    auto a = slurp(fs::path(m1.base_dir) / m1.entries[i].image_path);
    auto b = slurp(fs::path(m2.base_dir) / m2.entries[i].image_path);
    CHECK(a == b);
    auto ca = slurp(fs::path(m1.base_dir) / m1.entries[i].contour_path);
    auto cb = slurp(fs::path(m2.base_dir) / m2.entries[i].contour_path);
    CHECK(ca == cb);
  }
  auto j1 = slurp(fs::path(m1.base_dir) / "manifest.json");
  auto j2 = slurp(fs::path(m2.base_dir) / "manifest.json");
  CHECK(j1 == j2);
}

TEST_CASE("synth_dataset: infeasible ratio for the image size is rejected") {
  SynthConfig cfg;
  cfg.count = 1;
  cfg.image_size = 16;
  cfg.ratio_lo = 0.9;
  cfg.ratio_hi = 0.95;
  cfg.out_dir = test_dir("synth_bad").string();
  CHECK_THROWS_AS(synth_dataset(cfg), std::invalid_argument);
}

TEST_CASE("manifest: save/load round trip and patient-split validation") {
  auto manifest = tiny_synth("roundtrip", 8, 0.01, 0.08, 3);
  auto path = fs::path(manifest.base_dir) / "manifest.json";
  DatasetManifest loaded = DatasetManifest::load(path.string());
  REQUIRE(loaded.entries.size() == manifest.entries.size());
  for (size_t i = 0; i < loaded.entries.size(); ++i) {
    CHECK(loaded.entries[i].image_path == manifest.entries[i].image_path);
    CHECK(loaded.entries[i].meta.patient_id == manifest.entries[i].meta.patient_id);
    CHECK(loaded.entries[i].split == manifest.entries[i].split);
  }

  DatasetManifest bad = loaded;
  // force one sample of an existing patient into a different split
  bad.entries.push_back(bad.entries.front());
  bad.entries.back().split = Split::test;
  CHECK_THROWS_AS(bad.validate_patient_disjoint(), std::runtime_error);
}

TEST_CASE("oversample: duplicates scarce train samples only") {
  auto manifest = tiny_synth("oversample", 16, 0.002, 0.03, 11, 64);
  // find the actual scarce train samples below 1%
  int scarce_train = 0, total = static_cast<int>(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    if (e.split != Split::train) continue;
    SegSample s = load_manifest_sample(manifest, e);
    double ratio = static_cast<double>(s.mask.foreground_count()) / (s.height * s.width);
    if (ratio < 0.01) ++scarce_train;
  }
  DatasetManifest boosted = oversample(manifest, 0.01, 2);
  CHECK(static_cast<int>(boosted.entries.size()) == total + scarce_train);

  DatasetManifest unchanged = oversample(manifest, 0.01, 1);
  CHECK(unchanged.entries.size() == manifest.entries.size());

  // factor 3 adds two extra copies per scarce sample
  DatasetManifest tripled = oversample(manifest, 0.01, 3);
  CHECK(static_cast<int>(tripled.entries.size()) == total + 2 * scarce_train);

  CHECK_THROWS_AS(oversample(manifest, 0.01, 0), std::invalid_argument);
}

TEST_CASE("oversample: no scarce samples leaves the manifest unchanged") {
  auto manifest = tiny_synth("no_scarce", 8, 0.05, 0.09, 13);
  DatasetManifest out = oversample(manifest, 0.01, 4);
  CHECK(out.entries.size() == manifest.entries.size());
}
