#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "vf/core/nn.hpp"
#include "vf/graphs.hpp"

using namespace vf;

TEST(AdjacencyGraph, SubwayLineWithTransfer) {
    SensorGraph g = build_adjacency_graph(4, {{0, 1}, {1, 2}, {1, 3}});
    EXPECT_EQ(g.undirected_edge_count(), 3u);
    EXPECT_EQ(g.edges.size(), 6u);
    EXPECT_TRUE(g.is_symmetric());
    for (const Edge& e : g.edges) EXPECT_EQ(e.weight, 1.0);
    EXPECT_NO_THROW(g.validate());
}

TEST(AdjacencyGraph, EmptyAndOutOfRange) {
    EXPECT_TRUE(build_adjacency_graph(3, {}).edges.empty());
    EXPECT_THROW(build_adjacency_graph(3, {{0, 3}}), std::out_of_range);
}

TEST(AdjacencyGraph, DuplicatesCollapse) {
    nn::Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (int k = 0; k < 12; ++k) pairs.emplace_back(rng.next() % 6, rng.next() % 6);
        std::set<std::pair<std::size_t, std::size_t>> brute;
        for (auto [a, b] : pairs)
            if (a != b) brute.emplace(std::min(a, b), std::max(a, b));
        SensorGraph g = build_adjacency_graph(6, pairs);
        EXPECT_EQ(g.undirected_edge_count(), brute.size());
        EXPECT_EQ(g.edges.size(), 2 * brute.size());
    }
    EXPECT_EQ(build_adjacency_graph(2, {{0, 1}, {1, 0}}).undirected_edge_count(), 1u);
}

TEST(ProximityGraph, CollinearMiddleNodeHasDegreeTwo) {
    std::vector<std::array<double, 2>> c{{0, 0}, {1, 0}, {2, 0}};
    SensorGraph g = build_proximity_graph(c, 1);
    // brute force: node 0 -> 1, node 1 -> 0 (tie broken low), node 2 -> 1
    ag::Mat a = g.dense_adjacency();
    EXPECT_EQ(a.row(1).sum(), 2.0);
    EXPECT_EQ(a.row(0).sum(), 1.0);
    EXPECT_EQ(a.row(2).sum(), 1.0);
    EXPECT_TRUE(g.is_symmetric());
}

TEST(ProximityGraph, CompleteAndSinglePair) {
    std::vector<std::array<double, 2>> c{{0, 0}, {3, 1}, {2, 5}, {7, 7}};
    SensorGraph g = build_proximity_graph(c, 3);
    EXPECT_EQ(g.undirected_edge_count(), 6u);
    EXPECT_EQ(build_proximity_graph({{0, 0}, {1, 1}}, 1).undirected_edge_count(), 1u);
    EXPECT_THROW(build_proximity_graph(c, 0), std::invalid_argument);
    EXPECT_THROW(build_proximity_graph(c, 4), std::invalid_argument);
}

TEST(ProximityGraph, RandomMatchesBruteForceKnn) {
    nn::Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::array<double, 2>> c(8);
        for (auto& p : c) p = {rng.uniform(0, 10), rng.uniform(0, 10)};
        SensorGraph g = build_proximity_graph(c, 2);
        ag::Mat a = g.dense_adjacency();
        for (std::size_t i = 0; i < 8; ++i) {
            // the two closest nodes must be linked to i
            std::vector<std::pair<double, std::size_t>> d;
            for (std::size_t j = 0; j < 8; ++j)
                if (j != i) d.emplace_back(std::hypot(c[i][0] - c[j][0], c[i][1] - c[j][1]), j);
            std::sort(d.begin(), d.end());
            EXPECT_EQ(a(static_cast<long>(i), static_cast<long>(d[0].second)), 1.0);
            EXPECT_EQ(a(static_cast<long>(i), static_cast<long>(d[1].second)), 1.0);
        }
        EXPECT_TRUE(g.is_symmetric());
    }
}

TEST(DistanceGraph, GaussianKernelValues) {
    SensorGraph g = build_distance_graph(3, {{0, 1, 0.0}, {1, 2, 2.0}}, 2.0, 0.1);
    ag::Mat a = g.dense_adjacency();
    EXPECT_EQ(a(0, 1), 1.0);
    EXPECT_NEAR(a(1, 2), std::exp(-1.0), 1e-15);
    EXPECT_EQ(a(1, 0), 0.0);  // directed as given
    EXPECT_FALSE(g.is_symmetric());
    EXPECT_TRUE(build_distance_graph(3, {{1, 2, 2.0}}, 2.0, 0.1, true).is_symmetric());
    EXPECT_THROW(build_distance_graph(3, {{0, 1, -1.0}}, 1.0, 0.1), std::invalid_argument);
    EXPECT_THROW(build_distance_graph(3, {}, 0.0, 0.1), std::invalid_argument);
}

TEST(DistanceGraph, ThresholdPrunesBeyondSolvedDistance) {
    const double sigma = 3.0;
    const double cutoff = sigma * std::sqrt(std::log(2.0));
    std::vector<RoadDistance> d;
    std::size_t expected = 0;
    for (int k = 0; k < 20; ++k) {
        const double dist = 0.25 * k;
        d.push_back({0, static_cast<std::size_t>(k + 1), dist});
        if (dist <= cutoff) ++expected;
    }
    SensorGraph g = build_distance_graph(21, d, sigma, 0.5);
    EXPECT_EQ(g.edges.size(), expected);
    for (const Edge& e : g.edges) {
        EXPECT_GE(e.weight, 0.5);
        EXPECT_LE(e.weight, 1.0);
    }
    // monotone decreasing in distance
    for (std::size_t i = 1; i < g.edges.size(); ++i) EXPECT_LE(g.edges[i].weight, g.edges[i - 1].weight);
}

TEST(Transitions, RowNormalizedAndIsolatedRowsZero) {
    SensorGraph g = build_distance_graph(3, {{0, 1, 1.0}, {0, 2, 2.0}}, 2.0, 0.01);
    ag::Mat pf = forward_transition(g), pb = backward_transition(g);
    EXPECT_NEAR(pf.row(0).sum(), 1.0, 1e-15);
    EXPECT_EQ(pf.row(1).sum(), 0.0);
    EXPECT_EQ(pb.row(0).sum(), 0.0);
    EXPECT_NEAR(pb.row(1).sum(), 1.0, 1e-15);
}

TEST(GraphCsv, RoundTrip) {
    auto dir = std::filesystem::temp_directory_path() / "vf_graph_csv";
    std::filesystem::create_directories(dir);
    SensorGraph g = build_distance_graph(4, {{0, 1, 1.0}, {2, 3, 0.3}, {3, 0, 0.7}}, 1.1, 0.05);
    write_edge_csv(dir / "edges.csv", g);
    EXPECT_EQ(read_edge_csv(dir / "edges.csv", 4).edges, g.edges);
    std::vector<std::array<double, 2>> c{{0.5, 1.25}, {3, 4}};
    write_coords_csv(dir / "coords.csv", c);
    EXPECT_EQ(read_coords_csv(dir / "coords.csv"), c);
    std::filesystem::remove_all(dir);
}
