#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "vf/core/errors.hpp"

namespace vf {

// Dense row-major array of doubles with a runtime shape.
struct NdArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    NdArray() = default;
    explicit NdArray(std::vector<std::size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(count(shape), fill) {}

    static std::size_t count(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    // Elements per step along the leading axis.
    std::size_t stride0() const { return shape.empty() ? 0 : size() / shape[0]; }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape.size()) throw ShapeError("NdArray: index rank mismatch");
        std::size_t off = 0;
        std::size_t k = 0;
        for (std::size_t i : idx) {
            off = off * shape[k] + i;
            ++k;
        }
        return off;
    }
    double& at(std::initializer_list<std::size_t> idx) { return data[offset(idx)]; }
    double at(std::initializer_list<std::size_t> idx) const { return data[offset(idx)]; }

    double* step(std::size_t t) { return data.data() + t * stride0(); }
    const double* step(std::size_t t) const { return data.data() + t * stride0(); }

    // Copies leading-axis rows [begin, begin+n).
    NdArray slice0(std::size_t begin, std::size_t n) const {
        if (begin + n > shape.at(0)) throw ShapeError("NdArray: slice out of range");
        std::vector<std::size_t> s = shape;
        s[0] = n;
        NdArray out(s);
        const std::size_t st = stride0();
        std::copy(data.begin() + static_cast<std::ptrdiff_t>(begin * st),
                  data.begin() + static_cast<std::ptrdiff_t>((begin + n) * st), out.data.begin());
        return out;
    }

    std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

// Half-open range [begin, end) over the leading (time) axis.
struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end > begin ? end - begin : 0; }
    bool empty() const { return end <= begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
};

}  // namespace vf
