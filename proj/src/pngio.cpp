#include "wmbench/pngio.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace wmbench {

namespace {

void put_u32_be(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

uint32_t get_u32_be(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<unsigned char>& out, const char type[4],
                  const std::vector<unsigned char>& payload) {
  put_u32_be(out, static_cast<uint32_t>(payload.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  put_u32_be(out, crc);
}

std::vector<unsigned char> zlib_deflate(const std::vector<unsigned char>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> out(bound);
  if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  out.resize(bound);
  return out;
}

std::vector<unsigned char> zlib_inflate(const std::vector<unsigned char>& comp, size_t expect) {
  std::vector<unsigned char> out(expect);
  uLongf got = static_cast<uLongf>(expect);
  const int rc = uncompress(out.data(), &got, comp.data(), static_cast<uLong>(comp.size()));
  if (rc != Z_OK || got != expect) throw std::runtime_error("png: inflate failed");
  return out;
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

constexpr unsigned char kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image, int sample_index) {
  if (sample_index < 0 || sample_index >= image.n)
    throw std::out_of_range("write_png: sample index");
  if (image.c != 1 && image.c != 3)
    throw std::invalid_argument("write_png: only 1- or 3-channel images, got " + image.shape_str());

  const int h = image.h, w = image.w, ch = image.c;
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * ch));
  const float* base = image.sample(sample_index);
  const int plane = h * w;
  for (int y = 0; y < h; y++) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < w; x++) {
      for (int ci = 0; ci < ch; ci++) {
        const float v = clampf(base[ci * plane + y * w + x], 0.0f, 1.0f);
        raw.push_back(static_cast<unsigned char>(v * 255.0f + 0.5f));
      }
    }
  }

  std::vector<unsigned char> out(kSignature, kSignature + 8);
  std::vector<unsigned char> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(w));
  put_u32_be(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);                  // bit depth
  ihdr.push_back(ch == 1 ? 0 : 2);    // color type
  ihdr.push_back(0);                  // compression
  ihdr.push_back(0);                  // filter method
  ihdr.push_back(0);                  // no interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", zlib_deflate(raw));
  append_chunk(out, "IEND", {});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_png: cannot open " + path.string());
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw std::runtime_error("write_png: short write to " + path.string());
}

Tensor read_png(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_png: cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kSignature, 8) != 0)
    throw std::runtime_error("read_png: not a png: " + path.string());

  int w = 0, h = 0, ch = 0;
  std::vector<unsigned char> idat;
  size_t pos = 8;
  bool saw_end = false;
  while (pos + 8 <= buf.size()) {
    const uint32_t len = get_u32_be(&buf[pos]);
    if (pos + 12 + len > buf.size()) throw std::runtime_error("read_png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(&buf[pos + 4]);
    const unsigned char* payload = &buf[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("read_png: bad IHDR");
      w = static_cast<int>(get_u32_be(payload));
      h = static_cast<int>(get_u32_be(payload + 4));
      const int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8 || (color != 0 && color != 2) || interlace != 0)
        throw std::runtime_error("read_png: unsupported format (need 8-bit gray/rgb, no interlace)");
      ch = color == 0 ? 1 : 3;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0 || ch == 0 || !saw_end)
    throw std::runtime_error("read_png: malformed file: " + path.string());

  const size_t stride = static_cast<size_t>(w) * ch;
  auto raw = zlib_inflate(idat, static_cast<size_t>(h) * (stride + 1));

  // Undo per-row filters in place (sub/up/average/paeth per the spec).
  std::vector<unsigned char> prev(stride, 0);
  Tensor img(1, ch, h, w);
  const int plane = h * w;
  for (int y = 0; y < h; y++) {
    unsigned char* row = &raw[static_cast<size_t>(y) * (stride + 1)];
    const int filter = row[0];
    unsigned char* cur = row + 1;
    for (size_t i = 0; i < stride; i++) {
      const int left = i >= static_cast<size_t>(ch) ? cur[i - ch] : 0;
      const int up = prev[i];
      const int ul = i >= static_cast<size_t>(ch) ? prev[i - ch] : 0;
      switch (filter) {
        case 0: break;
        case 1: cur[i] = static_cast<unsigned char>(cur[i] + left); break;
        case 2: cur[i] = static_cast<unsigned char>(cur[i] + up); break;
        case 3: cur[i] = static_cast<unsigned char>(cur[i] + (left + up) / 2); break;
        case 4: cur[i] = static_cast<unsigned char>(cur[i] + paeth(left, up, ul)); break;
        default: throw std::runtime_error("read_png: unknown filter type");
      }
    }
    std::memcpy(prev.data(), cur, stride);
    for (int x = 0; x < w; x++)
      for (int ci = 0; ci < ch; ci++)
        img.data[static_cast<size_t>(ci) * plane + static_cast<size_t>(y) * w + x] =
            static_cast<float>(cur[x * ch + ci]) / 255.0f;
  }
  return img;
}

}  // namespace wmbench
