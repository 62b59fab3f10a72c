#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "orbitseg/volume.hpp"

namespace orbitseg {

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB

    std::array<std::uint8_t, 3> at(int y, int x) const;
};

inline constexpr std::array<std::uint8_t, 3> kTruthColor{0, 0, 255};
inline constexpr std::array<std::uint8_t, 3> kPredColor{255, 0, 0};
inline constexpr std::array<std::uint8_t, 3> kOverlapColor{128, 0, 128};

// Grayscale slice with mask contours: truth blue, prediction red, shared
// contour pixels purple.
RgbImage render_overlay(const CtVolume& volume, const SegmentationMask& truth, const SegmentationMask& pred, int slice);

void write_png(const RgbImage& img, const std::filesystem::path& path);
RgbImage read_png(const std::filesystem::path& path);

void emit_overlay(const CtVolume& volume, const SegmentationMask& truth, const SegmentationMask& pred, int slice,
                  const std::filesystem::path& path);

}  // namespace orbitseg
