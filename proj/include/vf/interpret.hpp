#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vf/vae.hpp"

namespace vf {

struct PCAModel {
    Eigen::RowVectorXd mean;              // [d]
    Mat components;                       // [k_max, d], orthonormal rows
    Eigen::VectorXd explained_variance;   // [k_max], descending

    int dim() const { return static_cast<int>(mean.size()); }
    int k_max() const { return static_cast<int>(components.rows()); }
    double total_variance() const { return explained_variance.sum(); }
};

// Covariance eigendecomposition of the centered rows (1/(T-1) normalization).
// Each component's largest-magnitude coordinate is made positive.
PCAModel fit_pca(const Mat& embeddings);

// Fraction of the centered sum of squares of `embeddings` kept by the top-k reconstruction.
double retained_variance(const PCAModel& model, const Mat& embeddings, int k);
// Smallest k with retained_variance >= threshold (up to 1e-12 slack); 0 for constant data.
int select_components(const PCAModel& model, const Mat& embeddings, double threshold = 0.997);

Mat project(const Mat& embeddings, const PCAModel& model, int k = 2);  // [n, k]
Mat reconstruct(const Mat& coords, const PCAModel& model);            // [n, d]

NdArray decode_component(const PCAModel& model, int idx, double alpha, const ActivityMask& mask, const VaeModel& vae);

enum class Grouping { WeekdayWeekend, Bimonthly, None };
Grouping parse_grouping(const std::string& name);
std::string to_string(Grouping g);

struct TrajectoryGroup {
    std::string name;
    std::vector<std::size_t> rows;  // indices into the embedding series
};

std::vector<TrajectoryGroup> group_timestamps(const std::vector<HourStamp>& timestamps, Grouping g);

// Writes `<group>.csv` (time,pc1,pc2,hour,dayofweek,month) and `<group>_trajectory.png` per non-empty group.
std::vector<TrajectoryGroup> export_trajectories(const Mat& embeddings, const std::vector<HourStamp>& timestamps,
                                                 const PCAModel& model, Grouping grouping,
                                                 const std::filesystem::path& out_dir);

// Mean (pc1, pc2) per hour of day: [24, 2]; hours with no sample are NaN.
Mat hourly_centroids(const Mat& coords, const std::vector<HourStamp>& timestamps);

// Grayscale heatmap of a decoded grid (channel 0), inactive cells drawn in light blue.
void write_grid_png(const std::filesystem::path& path, const NdArray& frame, const ActivityMask& mask, int scale = 8);

}  // namespace vf
