#include "vf/core/array_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace vf {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "f32 files are little-endian");

namespace {

fs::path strip(const fs::path& base) {
    fs::path p = base;
    if (p.extension() == ".f32") p.replace_extension();
    return p;
}

fs::path temp_sibling(const fs::path& path) { return fs::path(path.string() + ".tmp"); }

}  // namespace

fs::path f32_path(const fs::path& base) { return fs::path(strip(base).string() + ".f32"); }
fs::path meta_path(const fs::path& base) { return fs::path(strip(base).string() + ".meta.json"); }

void atomic_write_text(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = temp_sibling(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_f32(const fs::path& base, const NdArray& array, ArrayMeta meta) {
    if (meta.shape.empty()) meta.shape = array.shape;
    if (NdArray::count(meta.shape) != array.size()) throw ShapeError("write_f32: meta shape does not match data");

    std::string bytes(array.size() * sizeof(float), '\0');
    for (std::size_t i = 0; i < array.size(); ++i) {
        const float f = static_cast<float>(array.data[i]);
        std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
    }
    atomic_write_text(f32_path(base), bytes);

    json j;
    j["shape"] = meta.shape;
    j["dtype"] = "f32";
    if (meta.start_time) j["start_time"] = meta.start_time->iso();
    j["step_hours"] = meta.step_hours;
    if (meta.bbox) j["bbox"] = *meta.bbox;
    atomic_write_text(meta_path(base), j.dump(2) + "\n");
}

NdArray read_f32(const fs::path& base, ArrayMeta* meta_out) {
    const json j = json::parse(read_text(meta_path(base)));
    if (j.value("dtype", std::string("f32")) != "f32") throw std::runtime_error("unsupported dtype in " + meta_path(base).string());
    ArrayMeta meta;
    meta.shape = j.at("shape").get<std::vector<std::size_t>>();
    if (j.contains("start_time")) meta.start_time = HourStamp::parse(j["start_time"].get<std::string>());
    meta.step_hours = j.value("step_hours", 1);
    if (j.contains("bbox")) meta.bbox = j["bbox"].get<std::array<double, 4>>();

    const std::string bytes = read_text(f32_path(base));
    NdArray out(meta.shape);
    if (bytes.size() != out.size() * sizeof(float))
        throw ShapeError("f32 payload size mismatch for " + f32_path(base).string());
    for (std::size_t i = 0; i < out.size(); ++i) {
        float f;
        std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
        out.data[i] = static_cast<double>(f);
    }
    if (meta_out) *meta_out = std::move(meta);
    return out;
}

}  // namespace vf
