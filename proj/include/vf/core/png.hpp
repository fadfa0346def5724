#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace vf {

using Rgb = std::array<std::uint8_t, 3>;

// 8-bit RGB raster, row-major.
struct Image {
    int width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // width * height * 3

    Image(int w, int h, Rgb fill = {255, 255, 255});
    void set(int x, int y, Rgb c);
    // Filled square of side 2r+1; clipped at the border.
    void dot(int x, int y, int r, Rgb c);
};

void write_png(const std::filesystem::path& path, const Image& img);

// Piecewise-linear purple -> teal -> yellow ramp, t in [0,1].
Rgb ramp_color(double t);

}  // namespace vf
