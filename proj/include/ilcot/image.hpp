#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ilcot {

inline constexpr int kGridH = 16;
inline constexpr int kGridW = 16;
inline constexpr int kChannels = 3;
inline constexpr int kGridValues = kGridH * kGridW * kChannels;
inline constexpr int kPatchSize = 4;
inline constexpr int kPatchesPerSide = kGridH / kPatchSize;
inline constexpr int kNumPatches = kPatchesPerSide * kPatchesPerSide;
inline constexpr int kPatchDim = kPatchSize * kPatchSize * kChannels;

struct Rgb {
  float r = 0.f, g = 0.f, b = 0.f;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// 16x16x3 image in [0,1], row-major (row, col, channel). Also used for masks,
// which keep all three channels equal and binary.
struct GridImage {
  std::array<float, kGridValues> values{};

  static GridImage filled(Rgb c);
  static GridImage constant(float v);

  float& at(int row, int col, int ch) { return values[(row * kGridW + col) * kChannels + ch]; }
  float at(int row, int col, int ch) const { return values[(row * kGridW + col) * kChannels + ch]; }
  Rgb pixel(int row, int col) const { return {at(row, col, 0), at(row, col, 1), at(row, col, 2)}; }
  void set_pixel(int row, int col, Rgb c);

  std::span<float> span() { return values; }
  std::span<const float> span() const { return values; }

  bool is_mask() const;
  // Mask value at a pixel (channel 0).
  bool on(int row, int col) const { return at(row, col, 0) > 0.5f; }

  friend bool operator==(const GridImage&, const GridImage&) = default;
};

// Stored byte for a value in [0,1]: round(v * 255).
std::uint8_t quantize(float v);
inline float dequantize(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

GridImage quantized(const GridImage& img);
std::vector<std::uint8_t> to_bytes(const GridImage& img);
GridImage from_bytes(std::span<const std::uint8_t> bytes);

// Latents are 2x - 1, grouped into 16 patches of 4x4x3 values, each patch
// laid out (py, px, channel) row-major; patches ordered row-major.
using Latent = std::array<float, kGridValues>;
Latent patchify(const GridImage& img);
// Maps latents back to pixels and clamps; returns the fraction of values
// that were outside [0,1] before clamping.
GridImage unpatchify(std::span<const float> latent, double* out_of_range = nullptr);

void write_ppm(const std::filesystem::path& path, const GridImage& img);
GridImage read_ppm(const std::filesystem::path& path);

}  // namespace ilcot
