#pragma once

#include <string>
#include <vector>

#include "vf/core/calendar.hpp"
#include "vf/core/ndarray.hpp"
#include "vf/core/nn.hpp"

namespace vf {

using ag::Mat;
using ag::Var;

enum class Variant { NONE, TE, VE, TVE, STE, SVE, STVE };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);  // throws ConfigError

bool uses_sensor(Variant v);     // f1(Z_S) term present
bool uses_time(Variant v);       // Z_T feeds f2
bool uses_vibrancy(Variant v);   // Z_V feeds f2
bool temporal_only(Variant v);   // TE, VE, TVE
int f2_input_width(Variant v, int d);

inline constexpr int kTimeWidth = 31;  // 7 day-of-week + 24 hour-of-day

// Rows cover t-p+1 .. t+q; day Monday=0..Sunday=6 in columns [0,7), hour in [7,31).
Mat encode_time(HourStamp anchor, int p, int q);
Mat sensor_encoding(int n_s);

enum class Provenance { Forecaster, GroundTruth };

struct VibrancyBlock {
    Mat rows;  // [p+q, d]: observed first, forecasts after
    int p = 0, q = 0;
    Provenance forecast_source = Provenance::Forecaster;
};

VibrancyBlock assemble_vibrancy(const Mat& observed, const Mat& forecast, Provenance source = Provenance::Forecaster);

// f2 input rows for a variant: Z_T || Z_V, Z_T, or Z_V.
Mat f2_input(Variant v, const Mat& zt, const Mat& zv);

// f1: n_s -> d and f2: (31+d | 31 | d) -> d, each Dense-BN-ReLU-Dense-BN.
class StveFusion {
public:
    StveFusion() = default;
    StveFusion(nn::ParamStore& store, const std::string& name, Variant variant, int n_s, int d, nn::Rng& rng);

    Variant variant() const { return variant_; }
    int d() const { return d_; }
    int n_s() const { return n_s_; }
    bool has_f1() const { return uses_sensor(variant_); }
    int f2_width() const { return f2_input_width(variant_, d_); }

    Var f1(const Var& zs, bool training) const;       // [rows, n_s] -> [rows, d]
    Var f2(const Var& input, bool training) const;    // [rows, f2_width] -> [rows, d]

    const nn::DenseBnStack& f1_stack() const { return f1_; }
    const nn::DenseBnStack& f2_stack() const { return f2_; }

private:
    Variant variant_ = Variant::NONE;
    int n_s_ = 0, d_ = 0;
    nn::DenseBnStack f1_, f2_;
};

struct STVETensor {
    NdArray values;  // [n_s, p+q, d]
    Variant variant = Variant::STVE;
};

// Evaluation-mode fusion; temporal-only variants replicate f2 across sensors.
STVETensor build_stve(const Mat& zs, const Mat& zt, const Mat& zv, const StveFusion& fusion);

}  // namespace vf
