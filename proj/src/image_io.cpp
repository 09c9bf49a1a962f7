#include "faststamp/image_io.hpp"

#include <zlib.h>

#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

namespace faststamp {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageIoError(ImageIoErrorKind::Io, "cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ImageIoError(ImageIoErrorKind::Io, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageIoError(ImageIoErrorKind::Io, "short write to " + path);
}

constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
  put_be32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + start, static_cast<uInt>(4 + payload.size()));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
  if (!img.valid()) throw ImageIoError(ImageIoErrorKind::BadFormat, "write_png: malformed image");
  std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);

  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  put_chunk(out, "IHDR", ihdr);

  const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter type none
    const std::uint8_t* row = img.data.data() + static_cast<std::size_t>(y) * stride;
    raw.insert(raw.end(), row, row + stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw ImageIoError(ImageIoErrorKind::Io, "write_png: deflate failed");
  compressed.resize(bound);
  put_chunk(out, "IDAT", compressed);
  put_chunk(out, "IEND", {});
  write_file(path, out);
}

ImageU8 read_png(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
    throw ImageIoError(ImageIoErrorKind::BadFormat, "read_png: not a PNG file");

  std::size_t pos = 8;
  int width = 0, height = 0;
  bool saw_ihdr = false, saw_end = false;
  std::vector<std::uint8_t> idat;
  while (pos + 8 <= bytes.size()) {
    std::uint32_t len = be32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size())
      throw ImageIoError(ImageIoErrorKind::Truncated, "read_png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const std::uint8_t* payload = bytes.data() + pos + 8;
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, bytes.data() + pos + 4, 4 + len);
    if (static_cast<std::uint32_t>(crc) != be32(payload + len))
      throw ImageIoError(ImageIoErrorKind::BadFormat, "read_png: chunk CRC mismatch");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw ImageIoError(ImageIoErrorKind::BadFormat, "read_png: bad IHDR");
      width = static_cast<int>(be32(payload));
      height = static_cast<int>(be32(payload + 4));
      int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8)
        throw ImageIoError(ImageIoErrorKind::Unsupported,
                           "read_png: only 8-bit images are supported");
      if (color != 2)
        throw ImageIoError(ImageIoErrorKind::Unsupported,
                           "read_png: only RGB truecolor is supported (got color type " +
                               std::to_string(color) + ")");
      if (interlace != 0)
        throw ImageIoError(ImageIoErrorKind::Unsupported, "read_png: interlaced PNG rejected");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
      break;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || !saw_end || width <= 0 || height <= 0)
    throw ImageIoError(ImageIoErrorKind::Truncated, "read_png: missing chunks");

  const std::size_t stride = static_cast<std::size_t>(width) * 3;
  std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(height));
  uLongf rawlen = static_cast<uLongf>(raw.size());
  int rc = uncompress(raw.data(), &rawlen, idat.data(), static_cast<uLong>(idat.size()));
  if (rc != Z_OK || rawlen != raw.size())
    throw ImageIoError(ImageIoErrorKind::Truncated, "read_png: inflate failed");

  ImageU8 img;
  img.width = width;
  img.height = height;
  img.data.resize(stride * static_cast<std::size_t>(height));
  std::vector<std::uint8_t> prev(stride, 0);
  for (int y = 0; y < height; ++y) {
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1);
    std::uint8_t filter = src[0];
    std::uint8_t* dst = img.data.data() + static_cast<std::size_t>(y) * stride;
    for (std::size_t i = 0; i < stride; ++i) {
      int x = src[1 + i];
      int a = i >= 3 ? dst[i - 3] : 0;
      int b = prev[i];
      int c = i >= 3 ? prev[i - 3] : 0;
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: x += paeth(a, b, c); break;
        default:
          throw ImageIoError(ImageIoErrorKind::BadFormat, "read_png: unknown filter type");
      }
      dst[i] = static_cast<std::uint8_t>(x & 0xff);
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
  if (!img.valid()) throw ImageIoError(ImageIoErrorKind::BadFormat, "write_ppm: malformed image");
  std::vector<std::uint8_t> out;
  std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                       "\n255\n";
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), img.data.begin(), img.data.end());
  write_file(path, out);
}

ImageU8 read_ppm(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw ImageIoError(ImageIoErrorKind::BadFormat, "read_ppm: not a binary PPM (P6) file");
  std::size_t pos = 2;
  auto next_int = [&]() {
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
      throw ImageIoError(ImageIoErrorKind::BadFormat, "read_ppm: malformed header");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
    }
    return v;
  };
  long w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255)
    throw ImageIoError(ImageIoErrorKind::Unsupported, "read_ppm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw ImageIoError(ImageIoErrorKind::BadFormat, "read_ppm: malformed header");
  ++pos;  // single whitespace after maxval
  ImageU8 img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (w <= 0 || h <= 0)
    throw ImageIoError(ImageIoErrorKind::BadFormat, "read_ppm: bad dimensions");
  if (bytes.size() - pos < need)
    throw ImageIoError(ImageIoErrorKind::Truncated, "read_ppm: truncated pixel data");
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

ImageU8 read_image(const std::string& path) {
  auto f = std::ifstream(path, std::ios::binary);
  if (!f) throw ImageIoError(ImageIoErrorKind::Io, "cannot open " + path);
  char magic[2] = {0, 0};
  f.read(magic, 2);
  f.close();
  if (magic[0] == 'P' && magic[1] == '6') return read_ppm(path);
  return read_png(path);
}

void write_image(const std::string& path, const ImageU8& img) {
  auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  for (auto& c : ext) c = static_cast<char>(std::tolower(c));
  if (ext == ".ppm") {
    write_ppm(path, img);
  } else if (ext == ".png") {
    write_png(path, img);
  } else {
    throw ImageIoError(ImageIoErrorKind::Unsupported,
                       "write_image: unsupported extension " + ext + " (use .png or .ppm)");
  }
}

}  // namespace faststamp
