#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>

#include "vf/core/calendar.hpp"
#include "vf/core/ndarray.hpp"

namespace vf {

// Sidecar `<name>.meta.json` describing a raw little-endian f32 array `<name>.f32`.
struct ArrayMeta {
    std::vector<std::size_t> shape;
    std::optional<HourStamp> start_time;
    int step_hours = 1;
    std::optional<std::array<double, 4>> bbox;  // lon_min, lat_min, lon_max, lat_max
};

// `base` may be given with or without the `.f32` extension.
std::filesystem::path f32_path(const std::filesystem::path& base);
std::filesystem::path meta_path(const std::filesystem::path& base);

void write_f32(const std::filesystem::path& base, const NdArray& array, ArrayMeta meta = {});
NdArray read_f32(const std::filesystem::path& base, ArrayMeta* meta_out = nullptr);

// Write via a sibling temp file followed by rename.
void atomic_write_text(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);

}  // namespace vf
