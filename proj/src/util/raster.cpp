#include "cvloc/util/raster.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cvloc/errors.hpp"

namespace cvloc {

namespace {

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

void put_chunk(std::string& out, const char* type, const std::string& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

Raster downsample(const Raster& src, std::size_t target_size) {
  if (target_size == 0 || src.width != src.height || src.width % target_size != 0) {
    throw DimensionError("downsample: cannot map " + std::to_string(src.width) + "x" +
                         std::to_string(src.height) + " onto " + std::to_string(target_size));
  }
  const std::size_t f = src.width / target_size;
  if (f == 1) return src;
  Raster out(target_size, target_size);
  const double area = static_cast<double>(f * f);
  for (std::size_t y = 0; y < target_size; ++y) {
    for (std::size_t x = 0; x < target_size; ++x) {
      std::array<double, 3> acc{0.0, 0.0, 0.0};
      for (std::size_t dy = 0; dy < f; ++dy) {
        for (std::size_t dx = 0; dx < f; ++dx) {
          const auto* p = src.pixel(x * f + dx, y * f + dy);
          for (int c = 0; c < 3; ++c) acc[c] += p[c];
        }
      }
      auto* o = out.pixel(x, y);
      for (int c = 0; c < 3; ++c) o[c] = static_cast<std::uint8_t>(std::lround(acc[c] / area));
    }
  }
  return out;
}

std::string encode_ppm(const Raster& raster) {
  std::string out = "P6\n" + std::to_string(raster.width) + " " + std::to_string(raster.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(raster.rgb.data()), raster.rgb.size());
  return out;
}

void write_ppm(const std::filesystem::path& path, const Raster& raster) {
  write_bytes(path, encode_ppm(raster));
}

Raster decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw FormatError("not an 8-bit binary PPM");
  in.get();
  Raster r(w, h);
  in.read(reinterpret_cast<char*>(r.rgb.data()), static_cast<std::streamsize>(r.rgb.size()));
  if (static_cast<std::size_t>(in.gcount()) != r.rgb.size()) throw FormatError("truncated PPM data");
  return r;
}

Raster read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_ppm(buf.str());
}

std::string encode_pgm(const GrayMap& map) {
  std::string out = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  for (double v : map.values) {
    out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const GrayMap& map) { write_bytes(path, encode_pgm(map)); }

std::string encode_png(const Raster& raster) {
  std::string raw;
  raw.reserve(raster.height * (raster.width * 3 + 1));
  for (std::size_t y = 0; y < raster.height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(raster.pixel(0, y)), raster.width * 3);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string deflated(bound, '\0');
  if (compress(reinterpret_cast<Bytef*>(deflated.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
               static_cast<uLong>(raw.size())) != Z_OK) {
    throw Error("png: deflate failed");
  }
  deflated.resize(bound);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(raster.width));
  put_u32(ihdr, static_cast<std::uint32_t>(raster.height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", deflated);
  put_chunk(out, "IEND", "");
  return out;
}

Raster overlay_heatmap(const Raster& raster, const GrayMap& heat, double opacity) {
  Raster out = raster;
  if (heat.width == 0 || heat.height == 0) return out;
  for (std::size_t y = 0; y < raster.height; ++y) {
    for (std::size_t x = 0; x < raster.width; ++x) {
      const std::size_t hx = x * heat.width / raster.width;
      const std::size_t hy = y * heat.height / raster.height;
      const double a = opacity * std::clamp(heat.at(hx, hy), 0.0, 1.0);
      auto* p = out.pixel(x, y);
      p[0] = static_cast<std::uint8_t>(std::lround((1 - a) * p[0] + a * 255.0));
      p[1] = static_cast<std::uint8_t>(std::lround((1 - a) * p[1]));
      p[2] = static_cast<std::uint8_t>(std::lround((1 - a) * p[2]));
    }
  }
  return out;
}

std::string base64_encode(const std::string& bytes) {
  static constexpr char kTable[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<std::uint8_t>(bytes[i]) << 16) |
                            (static_cast<std::uint8_t>(bytes[i + 1]) << 8) |
                            static_cast<std::uint8_t>(bytes[i + 2]);
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += kTable[(v >> 6) & 63];
    out += kTable[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = static_cast<std::uint8_t>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) v |= static_cast<std::uint8_t>(bytes[i + 1]) << 8;
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += (i + 1 < bytes.size()) ? kTable[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

}  // namespace cvloc
