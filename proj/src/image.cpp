#include "ilcot/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ilcot/error.hpp"

namespace ilcot {

GridImage GridImage::filled(Rgb c) {
  GridImage img;
  for (int r = 0; r < kGridH; ++r)
    for (int col = 0; col < kGridW; ++col) img.set_pixel(r, col, c);
  return img;
}

GridImage GridImage::constant(float v) {
  GridImage img;
  img.values.fill(v);
  return img;
}

void GridImage::set_pixel(int row, int col, Rgb c) {
  at(row, col, 0) = c.r;
  at(row, col, 1) = c.g;
  at(row, col, 2) = c.b;
}

bool GridImage::is_mask() const {
  for (int i = 0; i < kGridH * kGridW; ++i) {
    const float a = values[i * 3], b = values[i * 3 + 1], c = values[i * 3 + 2];
    if (a != b || a != c) return false;
    if (a != 0.f && a != 1.f) return false;
  }
  return true;
}

std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.f, 1.f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

GridImage quantized(const GridImage& img) {
  GridImage out;
  for (int i = 0; i < kGridValues; ++i) out.values[i] = dequantize(quantize(img.values[i]));
  return out;
}

std::vector<std::uint8_t> to_bytes(const GridImage& img) {
  std::vector<std::uint8_t> bytes(kGridValues);
  for (int i = 0; i < kGridValues; ++i) bytes[i] = quantize(img.values[i]);
  return bytes;
}

GridImage from_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != static_cast<size_t>(kGridValues))
    throw Error(Errc::ShapeMismatch, "expected " + std::to_string(kGridValues) + " bytes, got " +
                                         std::to_string(bytes.size()));
  GridImage img;
  for (int i = 0; i < kGridValues; ++i) img.values[i] = dequantize(bytes[i]);
  return img;
}

namespace {

int latent_index(int row, int col, int ch) {
  const int patch = (row / kPatchSize) * kPatchesPerSide + col / kPatchSize;
  const int inner = ((row % kPatchSize) * kPatchSize + col % kPatchSize) * kChannels + ch;
  return patch * kPatchDim + inner;
}

}  // namespace

Latent patchify(const GridImage& img) {
  Latent z{};
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c)
      for (int ch = 0; ch < kChannels; ++ch) z[latent_index(r, c, ch)] = 2.f * img.at(r, c, ch) - 1.f;
  return z;
}

GridImage unpatchify(std::span<const float> latent, double* out_of_range) {
  if (latent.size() != static_cast<size_t>(kGridValues))
    throw Error(Errc::ShapeMismatch, "latent has " + std::to_string(latent.size()) + " values");
  GridImage img;
  int outside = 0;
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c)
      for (int ch = 0; ch < kChannels; ++ch) {
        const float v = 0.5f * (latent[latent_index(r, c, ch)] + 1.f);
        if (!(v >= 0.f && v <= 1.f)) ++outside;
        img.at(r, c, ch) = std::isfinite(v) ? std::clamp(v, 0.f, 1.f) : 0.f;
      }
  if (out_of_range) *out_of_range = static_cast<double>(outside) / kGridValues;
  return img;
}

void write_ppm(const std::filesystem::path& path, const GridImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out << "P6\n" << kGridW << ' ' << kGridH << "\n255\n";
  const auto bytes = to_bytes(img);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoError, "short write to " + path.string());
}

GridImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot read " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  in >> magic;
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  in.get();
  if (magic != "P6" || maxval != 255) throw Error(Errc::DataError, path.string() + ": expected binary P6 with maxval 255");
  if (w != kGridW || h != kGridH)
    throw Error(Errc::ShapeMismatch, path.string() + ": image is " + std::to_string(w) + "x" + std::to_string(h) +
                                         ", expected 16x16");
  std::vector<std::uint8_t> bytes(kGridValues);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw Error(Errc::DataError, path.string() + ": truncated");
  return from_bytes(bytes);
}

}  // namespace ilcot
