#include "vf/stve.hpp"

#include <array>

#include "vf/core/errors.hpp"

namespace vf {

namespace {

constexpr std::array<std::pair<Variant, const char*>, 7> kNames{{{Variant::NONE, "NONE"},
                                                                  {Variant::TE, "TE"},
                                                                  {Variant::VE, "VE"},
                                                                  {Variant::TVE, "TVE"},
                                                                  {Variant::STE, "STE"},
                                                                  {Variant::SVE, "SVE"},
                                                                  {Variant::STVE, "STVE"}}};

void make_rowwise(nn::DenseBnStack& s) {
    s.l1.rowwise = true;
    s.l2.rowwise = true;
}

}  // namespace

std::string to_string(Variant v) {
    for (const auto& [k, n] : kNames)
        if (k == v) return n;
    throw ConfigError("unknown variant");
}

Variant parse_variant(const std::string& name) {
    for (const auto& [k, n] : kNames)
        if (name == n) return k;
    throw ConfigError("unknown variant '" + name + "' (expected NONE, TE, VE, TVE, STE, SVE or STVE)");
}

bool uses_sensor(Variant v) { return v == Variant::STE || v == Variant::SVE || v == Variant::STVE; }
bool uses_time(Variant v) { return v == Variant::TE || v == Variant::TVE || v == Variant::STE || v == Variant::STVE; }
bool uses_vibrancy(Variant v) { return v == Variant::VE || v == Variant::TVE || v == Variant::SVE || v == Variant::STVE; }
bool temporal_only(Variant v) { return v == Variant::TE || v == Variant::VE || v == Variant::TVE; }

int f2_input_width(Variant v, int d) {
    if (v == Variant::NONE) throw ConfigError("variant NONE has no fusion input");
    return (uses_time(v) ? kTimeWidth : 0) + (uses_vibrancy(v) ? d : 0);
}

Mat encode_time(HourStamp anchor, int p, int q) {
    if (p < 1 || q < 0) throw std::invalid_argument("encode_time: p must be >= 1 and q >= 0");
    Mat out = Mat::Zero(p + q, kTimeWidth);
    for (int r = 0; r < p + q; ++r) {
        const HourStamp ts = anchor.plus(r - p + 1);
        out(r, ts.day_of_week()) = 1.0;
        out(r, 7 + ts.hour_of_day()) = 1.0;
    }
    return out;
}

Mat sensor_encoding(int n_s) {
    if (n_s < 1) throw std::invalid_argument("sensor_encoding: n_s must be positive");
    return Mat::Identity(n_s, n_s);
}

VibrancyBlock assemble_vibrancy(const Mat& observed, const Mat& forecast, Provenance source) {
    if (observed.cols() != forecast.cols())
        throw ShapeError("assemble_vibrancy: embedding width " + std::to_string(observed.cols()) + " vs " +
                         std::to_string(forecast.cols()));
    VibrancyBlock b;
    b.p = static_cast<int>(observed.rows());
    b.q = static_cast<int>(forecast.rows());
    b.rows.resize(observed.rows() + forecast.rows(), observed.cols());
    b.rows << observed, forecast;
    b.forecast_source = source;
    return b;
}

Mat f2_input(Variant v, const Mat& zt, const Mat& zv) {
    if (v == Variant::NONE) throw ConfigError("variant NONE has no fusion input");
    if (uses_time(v) && uses_vibrancy(v)) {
        if (zt.rows() != zv.rows()) throw ShapeError("f2_input: Z_T and Z_V row counts differ");
        Mat m(zt.rows(), zt.cols() + zv.cols());
        m << zt, zv;
        return m;
    }
    return uses_time(v) ? zt : zv;
}

StveFusion::StveFusion(nn::ParamStore& store, const std::string& name, Variant variant, int n_s, int d, nn::Rng& rng)
    : variant_(variant), n_s_(n_s), d_(d) {
    if (variant == Variant::NONE) throw ConfigError("variant NONE has no fusion parameters");
    if (uses_sensor(variant)) {
        f1_ = nn::DenseBnStack(store, name + ".f1", n_s, d, rng);
        make_rowwise(f1_);
    }
    f2_ = nn::DenseBnStack(store, name + ".f2", f2_input_width(variant, d), d, rng);
    make_rowwise(f2_);
}

Var StveFusion::f1(const Var& zs, bool training) const {
    if (!has_f1()) throw std::logic_error("variant " + to_string(variant_) + " has no f1");
    if (zs.cols() != n_s_) throw ShapeError("f1: input width must be n_s");
    return f1_(zs, training);
}

Var StveFusion::f2(const Var& input, bool training) const {
    if (input.cols() != f2_width())
        throw ShapeError("f2: input width " + std::to_string(input.cols()) + " != " + std::to_string(f2_width()) +
                         " for variant " + to_string(variant_));
    return f2_(input, training);
}

STVETensor build_stve(const Mat& zs, const Mat& zt, const Mat& zv, const StveFusion& fusion) {
    const Variant v = fusion.variant();
    ag::NoGradGuard ng;
    const Mat temporal = fusion.f2(Var::constant(f2_input(v, zt, zv)), false).value();
    const auto steps = static_cast<std::size_t>(temporal.rows());
    const auto d = static_cast<std::size_t>(fusion.d());
    Mat spatial;
    std::size_t n_s = static_cast<std::size_t>(fusion.n_s());
    if (fusion.has_f1()) {
        if (zs.rows() != fusion.n_s()) throw ShapeError("build_stve: Z_S must have n_s rows");
        spatial = fusion.f1(Var::constant(zs), false).value();
    }
    STVETensor out{NdArray({n_s, steps, d}), v};
    for (std::size_t s = 0; s < n_s; ++s)
        for (std::size_t t = 0; t < steps; ++t)
            for (std::size_t k = 0; k < d; ++k) {
                double val = temporal(static_cast<ag::Index>(t), static_cast<ag::Index>(k));
                if (fusion.has_f1()) val = spatial(static_cast<ag::Index>(s), static_cast<ag::Index>(k)) + val;
                out.values.data[(s * steps + t) * d + k] = val;
            }
    return out;
}

}  // namespace vf
