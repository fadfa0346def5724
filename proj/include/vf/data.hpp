#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vf/core/calendar.hpp"
#include "vf/core/ndarray.hpp"

namespace vf {

// values: [T, H, W, n_c], one snapshot per hour.
struct GridSeries {
    NdArray values;
    std::vector<HourStamp> timestamps;
    bool normalized = false;

    std::size_t steps() const { return values.dim(0); }
    std::size_t height() const { return values.dim(1); }
    std::size_t width() const { return values.dim(2); }
    std::size_t channels() const { return values.dim(3); }
    std::size_t frame_size() const { return values.stride0(); }

    // Throws ShapeError / std::invalid_argument on a broken invariant.
    void validate() const;
};

struct CellStats {
    NdArray mean;  // [H, W, n_c]
    NdArray std;   // [H, W, n_c], population std
    IndexRange computed_over;
};

struct ActivityMask {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> mask;  // row-major [H, W]

    bool active(std::size_t i, std::size_t j) const { return mask[i * width + j] != 0; }
    std::size_t active_count() const;
};

// values: [T, n_s, n_f]
struct TrafficSeries {
    NdArray values;
    std::vector<HourStamp> timestamps;
    std::vector<std::string> sensor_ids;

    std::size_t steps() const { return values.dim(0); }
    std::size_t sensors() const { return values.dim(1); }
    std::size_t features() const { return values.dim(2); }
    void validate() const;
};

struct WindowSample {
    NdArray x_past;    // [p, n_s, n_f]
    NdArray x_future;  // [q, n_s, n_f]
    NdArray c_past;    // [p, H, W, n_c]
    NdArray c_future;  // [q, H, W, n_c]
    HourStamp anchor_time;
};

struct SplitIndex {
    std::vector<std::size_t> train, val, test;
};

struct SplitRatios {
    double train = 0.4, val = 0.1, test = 0.5;
};

std::vector<HourStamp> hourly_timeline(HourStamp start, std::size_t steps);

CellStats compute_cell_stats(const GridSeries& raw, IndexRange range);

// NaN samples are skipped; a cell-channel with no finite sample gets mean 0, std 0
// and is reported through `all_missing` when provided.
CellStats compute_cell_stats_ignoring_nan(const GridSeries& raw, IndexRange range,
                                          std::vector<std::uint8_t>* all_missing = nullptr);

// C = (clip((raw - mu) / sigma, -2, 2) + 2) / 4, and 0.5 where sigma == 0.
GridSeries normalize_grid(const GridSeries& raw, const CellStats& stats);
// Linear inverse of normalize_grid (ignores clipping).
GridSeries denormalize_grid(const GridSeries& normalized, const CellStats& stats);

ActivityMask derive_mask(const GridSeries& raw, IndexRange range);

// Fills flagged samples with the mean of the same cell at t-168h and t+168h,
// falling back to the single available neighbor, then to `stats.mean`.
inline constexpr std::size_t kWeekHours = 168;
GridSeries impute_missing(const GridSeries& raw, const std::vector<std::uint8_t>& missing,
                          const CellStats* stats);
std::vector<std::uint8_t> nan_positions(const NdArray& values);

// Same rule applied to a [T, ...] array without calendar metadata.
NdArray impute_array(const NdArray& values, const std::vector<std::uint8_t>& missing, const NdArray* fallback_mean);

// Last `ratios.test` of the timeline is the test set, in order; the rest is
// shuffled and split train:val.
SplitIndex split_dataset(std::size_t steps, SplitRatios ratios, std::uint64_t seed);

WindowSample window(const GridSeries& grid, const TrafficSeries& traffic, std::size_t t, std::size_t p,
                    std::size_t q);

// Global per-channel z-score of traffic, fit on a range.
struct TrafficScaler {
    std::vector<double> mean, std;
    static TrafficScaler fit(const TrafficSeries& traffic, IndexRange range);
    NdArray transform(const NdArray& values) const;  // [..., n_f]
    NdArray inverse(const NdArray& values) const;
};

}  // namespace vf
