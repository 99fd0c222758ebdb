#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace nerfca {

/// Row-major grayscale image; index = y * width + x.
struct Raster {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;

    double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Portable float map ("Pf", 32-bit little endian). Values are narrowed to float.
void write_pfm(const std::filesystem::path& path, const Raster& image);
Raster read_pfm(const std::filesystem::path& path);

/// Same layout as PFM but with 64-bit samples and the "Pd" magic, for exact doubles.
void write_pdm(const std::filesystem::path& path, const Raster& image);
Raster read_pdm(const std::filesystem::path& path);

/// 8-bit binary graymap. write_pgm_scaled maps [lo, hi] linearly onto [0, 255].
void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& width, int& height);
void write_pgm_scaled(const std::filesystem::path& path, const Raster& image, double lo, double hi);

}  // namespace nerfca
