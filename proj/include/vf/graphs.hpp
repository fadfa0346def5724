#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include "vf/core/autodiff.hpp"

namespace vf {

struct Edge {
    std::size_t src = 0, dst = 0;
    double weight = 1.0;
    friend bool operator==(const Edge&, const Edge&) = default;
};

// Directed edge list; undirected graphs carry both directions. No self-loops.
struct SensorGraph {
    std::size_t n_s = 0;
    std::vector<Edge> edges;
    std::optional<std::vector<std::array<double, 2>>> coords;

    bool is_symmetric() const;
    std::size_t undirected_edge_count() const;  // distinct unordered pairs
    // A[src][dst] = weight.
    ag::Mat dense_adjacency() const;
    void validate() const;
};

// Undirected, unit weights. Duplicates and reversed duplicates collapse; self-pairs are dropped.
SensorGraph build_adjacency_graph(std::size_t n_s, const std::vector<std::pair<std::size_t, std::size_t>>& pairs);

// k nearest neighbors (Euclidean), symmetrized by union, unit weights. Ties go to the lower index.
SensorGraph build_proximity_graph(const std::vector<std::array<double, 2>>& coords, int k);

struct RoadDistance {
    std::size_t src = 0, dst = 0;
    double distance = 0.0;
};

// w = exp(-(d / sigma)^2), kept when w >= threshold. Directed as given unless `symmetrize`.
SensorGraph build_distance_graph(std::size_t n_s, const std::vector<RoadDistance>& dists, double sigma,
                                 double threshold, bool symmetrize = false);
// Default sigma: population std of the observed distances.
double default_distance_sigma(const std::vector<RoadDistance>& dists);

// Row-normalized transitions; rows with zero degree stay zero.
ag::Mat forward_transition(const SensorGraph& g);   // D_out^-1 A
ag::Mat backward_transition(const SensorGraph& g);  // D_in^-1 A^T

// CSV: `src,dst,weight`; coordinates `id,x,y`.
void write_edge_csv(const std::filesystem::path& path, const SensorGraph& g);
SensorGraph read_edge_csv(const std::filesystem::path& path, std::size_t n_s);
void write_coords_csv(const std::filesystem::path& path, const std::vector<std::array<double, 2>>& coords);
std::vector<std::array<double, 2>> read_coords_csv(const std::filesystem::path& path);

}  // namespace vf
