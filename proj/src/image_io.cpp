#include "segkit/image_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace segkit {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw std::runtime_error(path + ": " + why);
}

std::vector<uint8_t> read_all(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open file");
  f.seekg(0, std::ios::end);
  std::streamoff len = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(static_cast<size_t>(len));
  if (len > 0) f.read(reinterpret_cast<char*>(buf.data()), len);
  if (!f) fail(path, "short read");
  return buf;
}

void write_all(const std::string& path, const std::vector<uint8_t>& buf) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(path, "cannot open file for writing");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) fail(path, "short write");
}

// PGM header tokenizer: skips whitespace and '#' comments.
struct PgmScanner {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  int next_int(const std::string& path) {
    while (pos < buf.size()) {
      uint8_t c = buf[pos];
      if (c == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(c)) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= buf.size() || !std::isdigit(buf[pos])) fail(path, "malformed PGM header");
    int v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + (buf[pos] - '0');
      ++pos;
    }
    return v;
  }
};

}  // namespace

GrayImage read_pgm(const std::string& path) {
  auto buf = read_all(path);
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') fail(path, "not a binary PGM (P5)");
  PgmScanner sc{buf, 2};
  int w = sc.next_int(path);
  int h = sc.next_int(path);
  int maxval = sc.next_int(path);
  if (maxval != 255) fail(path, "unsupported maxval " + std::to_string(maxval) + " (want 255)");
  ++sc.pos;  // single whitespace after maxval
  size_t need = static_cast<size_t>(w) * h;
  if (buf.size() - sc.pos < need) fail(path, "truncated pixel data");
  GrayImage img;
  img.width = w;
  img.height = h;
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(sc.pos),
                    buf.begin() + static_cast<std::ptrdiff_t>(sc.pos + need));
  return img;
}

void write_pgm(const std::string& path, const GrayImage& img) {
  std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<uint8_t> buf(header.begin(), header.end());
  buf.insert(buf.end(), img.pixels.begin(), img.pixels.end());
  write_all(path, buf);
}

namespace {

constexpr uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

void push_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

void push_chunk(std::vector<uint8_t>& out, const char type[4],
                const std::vector<uint8_t>& data) {
  push_be32(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  push_be32(out, crc);
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

GrayImage read_png(const std::string& path) {
  auto buf = read_all(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), kPngSig, 8) != 0) fail(path, "not a PNG file");

  int width = 0, height = 0;
  std::vector<uint8_t> idat;
  bool saw_ihdr = false, saw_iend = false;
  size_t pos = 8;
  while (pos + 8 <= buf.size() && !saw_iend) {
    uint32_t len = be32(&buf[pos]);
    if (pos + 12 + len > buf.size()) fail(path, "truncated chunk");
    const char* type = reinterpret_cast<const char*>(&buf[pos + 4]);
    const uint8_t* data = &buf[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) fail(path, "bad IHDR length");
      width = static_cast<int>(be32(data));
      height = static_cast<int>(be32(data + 4));
      int bit_depth = data[8], color_type = data[9], interlace = data[12];
      if (bit_depth != 8 || color_type != 0) {
        fail(path, "unsupported PNG variant (need 8-bit grayscale, got depth " +
                       std::to_string(bit_depth) + " color type " + std::to_string(color_type) +
                       ")");
      }
      if (interlace != 0) fail(path, "interlaced PNG not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || width <= 0 || height <= 0) fail(path, "missing or invalid IHDR");
  if (idat.empty()) fail(path, "missing IDAT");

  // one filter byte per scanline
  uLongf raw_len = static_cast<uLongf>(height) * (width + 1);
  std::vector<uint8_t> raw(raw_len);
  int zrc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  if (zrc != Z_OK || raw_len != static_cast<uLongf>(height) * (width + 1)) {
    fail(path, "zlib inflate failed");
  }

  GrayImage img;
  img.width = width;
  img.height = height;
  img.pixels.assign(static_cast<size_t>(width) * height, 0);
  for (int r = 0; r < height; ++r) {
    const uint8_t* src = raw.data() + static_cast<size_t>(r) * (width + 1);
    uint8_t filter = src[0];
    uint8_t* row = img.pixels.data() + static_cast<size_t>(r) * width;
    const uint8_t* up = r > 0 ? row - width : nullptr;
    for (int c = 0; c < width; ++c) {
      int x = src[1 + c];
      int left = c > 0 ? row[c - 1] : 0;
      int above = up ? up[c] : 0;
      int upleft = (up && c > 0) ? up[c - 1] : 0;
      switch (filter) {
        case 0: break;
        case 1: x += left; break;
        case 2: x += above; break;
        case 3: x += (left + above) / 2; break;
        case 4: x += paeth(left, above, upleft); break;
        default: fail(path, "unknown PNG filter " + std::to_string(filter));
      }
      row[c] = static_cast<uint8_t>(x & 0xff);
    }
  }
  return img;
}

void write_png(const std::string& path, const GrayImage& img) {
  std::vector<uint8_t> raw(static_cast<size_t>(img.height) * (img.width + 1));
  for (int r = 0; r < img.height; ++r) {
    uint8_t* dst = raw.data() + static_cast<size_t>(r) * (img.width + 1);
    dst[0] = 0;  // no filter
    std::memcpy(dst + 1, img.pixels.data() + static_cast<size_t>(r) * img.width,
                static_cast<size_t>(img.width));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  int zrc = compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                      Z_BEST_SPEED);
  if (zrc != Z_OK) fail(path, "zlib deflate failed");
  compressed.resize(bound);

  std::vector<uint8_t> out(kPngSig, kPngSig + 8);
  std::vector<uint8_t> ihdr;
  push_be32(ihdr, static_cast<uint32_t>(img.width));
  push_be32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filtering
  ihdr.push_back(0);  // no interlace
  push_chunk(out, "IHDR", ihdr);
  push_chunk(out, "IDAT", compressed);
  push_chunk(out, "IEND", {});
  write_all(path, out);
}

GrayImage read_gray_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open file");
  uint8_t magic[8] = {};
  f.read(reinterpret_cast<char*>(magic), 8);
  f.close();
  if (magic[0] == 'P' && magic[1] == '5') return read_pgm(path);
  if (std::memcmp(magic, kPngSig, 8) == 0) return read_png(path);
  fail(path, "unrecognized image format (want P5 PGM or 8-bit grayscale PNG)");
}

}  // namespace segkit
