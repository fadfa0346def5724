#include "vf/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vf/core/errors.hpp"
#include "vf/core/nn.hpp"

namespace vf {

namespace {

void check_range(IndexRange range, std::size_t steps) {
    if (range.empty()) throw std::invalid_argument("index range is empty");
    if (range.end > steps) throw std::invalid_argument("index range exceeds series length");
}

}  // namespace

void GridSeries::validate() const {
    if (values.rank() != 4) throw ShapeError("GridSeries values must be [T,H,W,n_c]");
    if (timestamps.size() != values.dim(0)) throw ShapeError("GridSeries: timestamp count != T");
    for (std::size_t i = 1; i < timestamps.size(); ++i)
        if (timestamps[i].hours - timestamps[i - 1].hours != 1)
            throw std::invalid_argument("GridSeries: timestamps must be spaced exactly one hour");
    if (normalized)
        for (double v : values.data)
            if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("GridSeries: normalized value outside [0,1]");
}

void TrafficSeries::validate() const {
    if (values.rank() != 3) throw ShapeError("TrafficSeries values must be [T,n_s,n_f]");
    if (timestamps.size() != values.dim(0)) throw ShapeError("TrafficSeries: timestamp count != T");
    if (values.dim(2) < 1) throw ShapeError("TrafficSeries: n_f must be >= 1");
    if (!sensor_ids.empty() && sensor_ids.size() != values.dim(1)) throw ShapeError("TrafficSeries: sensor id count != n_s");
}

std::size_t ActivityMask::active_count() const {
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

std::vector<HourStamp> hourly_timeline(HourStamp start, std::size_t steps) {
    std::vector<HourStamp> out(steps);
    for (std::size_t i = 0; i < steps; ++i) out[i] = start.plus(static_cast<std::int64_t>(i));
    return out;
}

CellStats compute_cell_stats(const GridSeries& raw, IndexRange range) {
    check_range(range, raw.steps());
    const std::size_t n = raw.frame_size();
    CellStats st;
    st.mean = NdArray({raw.height(), raw.width(), raw.channels()});
    st.std = NdArray(st.mean.shape);
    st.computed_over = range;
    const double count = static_cast<double>(range.size());
    for (std::size_t t = range.begin; t < range.end; ++t) {
        const double* f = raw.values.step(t);
        for (std::size_t k = 0; k < n; ++k) st.mean.data[k] += f[k];
    }
    for (double& m : st.mean.data) m /= count;
    for (std::size_t t = range.begin; t < range.end; ++t) {
        const double* f = raw.values.step(t);
        for (std::size_t k = 0; k < n; ++k) {
            const double d = f[k] - st.mean.data[k];
            st.std.data[k] += d * d;
        }
    }
    for (double& s : st.std.data) s = std::sqrt(s / count);
    return st;
}

CellStats compute_cell_stats_ignoring_nan(const GridSeries& raw, IndexRange range,
                                          std::vector<std::uint8_t>* all_missing) {
    check_range(range, raw.steps());
    const std::size_t n = raw.frame_size();
    CellStats st;
    st.mean = NdArray({raw.height(), raw.width(), raw.channels()});
    st.std = NdArray(st.mean.shape);
    st.computed_over = range;
    std::vector<double> count(n, 0.0);
    for (std::size_t t = range.begin; t < range.end; ++t) {
        const double* f = raw.values.step(t);
        for (std::size_t k = 0; k < n; ++k)
            if (std::isfinite(f[k])) {
                st.mean.data[k] += f[k];
                count[k] += 1.0;
            }
    }
    for (std::size_t k = 0; k < n; ++k) st.mean.data[k] = count[k] > 0 ? st.mean.data[k] / count[k] : 0.0;
    for (std::size_t t = range.begin; t < range.end; ++t) {
        const double* f = raw.values.step(t);
        for (std::size_t k = 0; k < n; ++k)
            if (std::isfinite(f[k])) {
                const double d = f[k] - st.mean.data[k];
                st.std.data[k] += d * d;
            }
    }
    for (std::size_t k = 0; k < n; ++k) st.std.data[k] = count[k] > 0 ? std::sqrt(st.std.data[k] / count[k]) : 0.0;
    if (all_missing) {
        all_missing->assign(n, 0);
        for (std::size_t k = 0; k < n; ++k) (*all_missing)[k] = count[k] == 0 ? 1 : 0;
    }
    return st;
}

GridSeries normalize_grid(const GridSeries& raw, const CellStats& stats) {
    if (raw.normalized) throw std::invalid_argument("normalize_grid: input is already normalized");
    if (raw.values.rank() != 4 || stats.mean.shape != std::vector<std::size_t>{raw.height(), raw.width(), raw.channels()} ||
        stats.std.shape != stats.mean.shape)
        throw ShapeError("normalize_grid: stats shape " + stats.mean.shape_string() + " incompatible with grid " +
                         raw.values.shape_string());
    GridSeries out = raw;
    out.normalized = true;
    const std::size_t n = raw.frame_size();
    for (std::size_t t = 0; t < raw.steps(); ++t) {
        double* f = out.values.step(t);
        for (std::size_t k = 0; k < n; ++k) {
            const double sd = stats.std.data[k];
            if (sd == 0.0) {
                f[k] = 0.5;
                continue;
            }
            const double z = std::clamp((f[k] - stats.mean.data[k]) / sd, -2.0, 2.0);
            f[k] = (z + 2.0) / 4.0;
        }
    }
    return out;
}

GridSeries denormalize_grid(const GridSeries& normalized, const CellStats& stats) {
    GridSeries out = normalized;
    out.normalized = false;
    const std::size_t n = normalized.frame_size();
    for (std::size_t t = 0; t < normalized.steps(); ++t) {
        double* f = out.values.step(t);
        for (std::size_t k = 0; k < n; ++k) f[k] = (4.0 * f[k] - 2.0) * stats.std.data[k] + stats.mean.data[k];
    }
    return out;
}

ActivityMask derive_mask(const GridSeries& raw, IndexRange range) {
    check_range(range, raw.steps());
    ActivityMask m{raw.height(), raw.width(), std::vector<std::uint8_t>(raw.height() * raw.width(), 0)};
    const std::size_t nc = raw.channels();
    for (std::size_t t = range.begin; t < range.end; ++t) {
        const double* f = raw.values.step(t);
        for (std::size_t cell = 0; cell < m.mask.size(); ++cell)
            for (std::size_t c = 0; c < nc; ++c)
                if (f[cell * nc + c] != 0.0) m.mask[cell] = 1;
    }
    return m;
}

std::vector<std::uint8_t> nan_positions(const NdArray& values) {
    std::vector<std::uint8_t> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::isnan(values.data[i]) ? 1 : 0;
    return out;
}

NdArray impute_array(const NdArray& values, const std::vector<std::uint8_t>& missing, const NdArray* fallback_mean) {
    if (missing.size() != values.size()) throw ShapeError("impute: missing-flag array has wrong size");
    NdArray out = values;
    const std::size_t steps = values.dim(0);
    const std::size_t n = values.stride0();
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = t * n + k;
            if (!missing[i]) continue;
            const bool has_prev = t >= kWeekHours && !missing[i - kWeekHours * n];
            const bool has_next = t + kWeekHours < steps && !missing[i + kWeekHours * n];
            if (has_prev && has_next)
                out.data[i] = 0.5 * (values.data[i - kWeekHours * n] + values.data[i + kWeekHours * n]);
            else if (has_prev)
                out.data[i] = values.data[i - kWeekHours * n];
            else if (has_next)
                out.data[i] = values.data[i + kWeekHours * n];
            else if (fallback_mean && fallback_mean->size() == n)
                out.data[i] = fallback_mean->data[k];
            else
                throw std::invalid_argument("impute: sample has no weekly neighbor and no fallback statistics");
        }
    return out;
}

GridSeries impute_missing(const GridSeries& raw, const std::vector<std::uint8_t>& missing, const CellStats* stats) {
    GridSeries out = raw;
    out.values = impute_array(raw.values, missing, stats ? &stats->mean : nullptr);
    return out;
}

SplitIndex split_dataset(std::size_t steps, SplitRatios r, std::uint64_t seed) {
    if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must be nonnegative and sum to 1");
    const auto head = static_cast<std::size_t>(std::llround(static_cast<double>(steps) * (r.train + r.val)));
    const auto n_train = static_cast<std::size_t>(
        std::llround(static_cast<double>(head) * r.train / std::max(r.train + r.val, 1e-300)));
    SplitIndex s;
    if (head == 0 || head >= steps || n_train == 0 || n_train >= head)
        throw std::invalid_argument("series of length " + std::to_string(steps) + " too short for a nonempty split");
    std::vector<std::size_t> first(head);
    std::iota(first.begin(), first.end(), std::size_t{0});
    nn::Rng rng(seed);
    rng.shuffle(first.begin(), first.end());
    s.train.assign(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(first.begin() + static_cast<std::ptrdiff_t>(n_train), first.end());
    s.test.resize(steps - head);
    std::iota(s.test.begin(), s.test.end(), head);
    return s;
}

WindowSample window(const GridSeries& grid, const TrafficSeries& traffic, std::size_t t, std::size_t p, std::size_t q) {
    if (p == 0 || q == 0) throw std::invalid_argument("window: p and q must be positive");
    if (grid.steps() != traffic.steps()) throw ShapeError("window: grid and traffic timelines differ");
    if (t + 1 < p || t + q >= grid.steps()) throw std::out_of_range("window: anchor " + std::to_string(t) + " out of range");
    WindowSample w;
    w.x_past = traffic.values.slice0(t + 1 - p, p);
    w.x_future = traffic.values.slice0(t + 1, q);
    w.c_past = grid.values.slice0(t + 1 - p, p);
    w.c_future = grid.values.slice0(t + 1, q);
    w.anchor_time = grid.timestamps[t];
    return w;
}

TrafficScaler TrafficScaler::fit(const TrafficSeries& traffic, IndexRange range) {
    check_range(range, traffic.steps());
    const std::size_t ns = traffic.sensors(), nf = traffic.features();
    TrafficScaler s;
    s.mean.assign(nf, 0.0);
    s.std.assign(nf, 0.0);
    const double count = static_cast<double>(range.size() * ns);
    for (std::size_t t = range.begin; t < range.end; ++t)
        for (std::size_t i = 0; i < ns; ++i)
            for (std::size_t f = 0; f < nf; ++f) s.mean[f] += traffic.values.at({t, i, f});
    for (double& m : s.mean) m /= count;
    for (std::size_t t = range.begin; t < range.end; ++t)
        for (std::size_t i = 0; i < ns; ++i)
            for (std::size_t f = 0; f < nf; ++f) {
                const double d = traffic.values.at({t, i, f}) - s.mean[f];
                s.std[f] += d * d;
            }
    for (double& v : s.std) v = std::sqrt(v / count);
    for (double& v : s.std)
        if (v == 0.0) v = 1.0;
    return s;
}

NdArray TrafficScaler::transform(const NdArray& values) const {
    NdArray out = values;
    const std::size_t nf = mean.size();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = (out.data[i] - mean[i % nf]) / std[i % nf];
    return out;
}

NdArray TrafficScaler::inverse(const NdArray& values) const {
    NdArray out = values;
    const std::size_t nf = mean.size();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = out.data[i] * std[i % nf] + mean[i % nf];
    return out;
}

}  // namespace vf
