#include "vf/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "vf/core/array_io.hpp"

namespace vf {

bool SensorGraph::is_symmetric() const {
    const ag::Mat a = dense_adjacency();
    return a == a.transpose();
}

std::size_t SensorGraph::undirected_edge_count() const {
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (const Edge& e : edges) pairs.emplace(std::min(e.src, e.dst), std::max(e.src, e.dst));
    return pairs.size();
}

ag::Mat SensorGraph::dense_adjacency() const {
    ag::Mat a = ag::Mat::Zero(static_cast<ag::Index>(n_s), static_cast<ag::Index>(n_s));
    for (const Edge& e : edges) a(static_cast<ag::Index>(e.src), static_cast<ag::Index>(e.dst)) = e.weight;
    return a;
}

void SensorGraph::validate() const {
    for (const Edge& e : edges) {
        if (e.src >= n_s || e.dst >= n_s) throw std::out_of_range("graph edge index out of range");
        if (e.src == e.dst) throw std::invalid_argument("graph edge list must not contain self-loops");
        if (!(e.weight > 0.0 && e.weight <= 1.0)) throw std::invalid_argument("graph edge weight must be in (0,1]");
    }
    if (coords && coords->size() != n_s) throw std::invalid_argument("graph coordinate count != n_s");
}

namespace {

SensorGraph from_undirected(std::size_t n_s, const std::set<std::pair<std::size_t, std::size_t>>& pairs) {
    SensorGraph g;
    g.n_s = n_s;
    for (const auto& [a, b] : pairs) {
        g.edges.push_back({a, b, 1.0});
        g.edges.push_back({b, a, 1.0});
    }
    std::sort(g.edges.begin(), g.edges.end(),
              [](const Edge& x, const Edge& y) { return std::tie(x.src, x.dst) < std::tie(y.src, y.dst); });
    return g;
}

}  // namespace

SensorGraph build_adjacency_graph(std::size_t n_s, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& [a, b] : pairs) {
        if (a >= n_s || b >= n_s) throw std::out_of_range("adjacency pair index out of range");
        if (a == b) continue;
        seen.emplace(std::min(a, b), std::max(a, b));
    }
    return from_undirected(n_s, seen);
}

SensorGraph build_proximity_graph(const std::vector<std::array<double, 2>>& coords, int k) {
    const std::size_t n = coords.size();
    if (k <= 0) throw std::invalid_argument("proximity graph: k must be positive");
    if (static_cast<std::size_t>(k) >= n) throw std::invalid_argument("proximity graph: k must be < n_s");
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) others.push_back(j);
        auto dist = [&](std::size_t j) {
            return std::hypot(coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]);
        };
        std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
        for (int m = 0; m < k; ++m) pairs.emplace(std::min(i, others[m]), std::max(i, others[m]));
    }
    SensorGraph g = from_undirected(n, pairs);
    g.coords = coords;
    return g;
}

double default_distance_sigma(const std::vector<RoadDistance>& dists) {
    if (dists.empty()) return 1.0;
    double m = 0.0;
    for (const auto& d : dists) m += d.distance;
    m /= static_cast<double>(dists.size());
    double v = 0.0;
    for (const auto& d : dists) v += (d.distance - m) * (d.distance - m);
    const double sd = std::sqrt(v / static_cast<double>(dists.size()));
    return sd > 0.0 ? sd : 1.0;
}

SensorGraph build_distance_graph(std::size_t n_s, const std::vector<RoadDistance>& dists, double sigma,
                                 double threshold, bool symmetrize) {
    if (!(sigma > 0.0)) throw std::invalid_argument("distance graph: sigma must be > 0");
    SensorGraph g;
    g.n_s = n_s;
    ag::Mat w = ag::Mat::Zero(static_cast<ag::Index>(n_s), static_cast<ag::Index>(n_s));
    for (const auto& d : dists) {
        if (d.distance < 0.0) throw std::invalid_argument("distance graph: negative distance");
        if (d.src >= n_s || d.dst >= n_s) throw std::out_of_range("distance graph: index out of range");
        if (d.src == d.dst) continue;
        const double weight = std::exp(-(d.distance / sigma) * (d.distance / sigma));
        if (weight < threshold || weight <= 0.0) continue;
        auto& slot = w(static_cast<ag::Index>(d.src), static_cast<ag::Index>(d.dst));
        slot = std::max(slot, weight);
        if (symmetrize) {
            auto& rev = w(static_cast<ag::Index>(d.dst), static_cast<ag::Index>(d.src));
            rev = std::max(rev, weight);
        }
    }
    for (std::size_t i = 0; i < n_s; ++i)
        for (std::size_t j = 0; j < n_s; ++j)
            if (w(static_cast<ag::Index>(i), static_cast<ag::Index>(j)) > 0.0)
                g.edges.push_back({i, j, w(static_cast<ag::Index>(i), static_cast<ag::Index>(j))});
    return g;
}

ag::Mat forward_transition(const SensorGraph& g) {
    ag::Mat a = g.dense_adjacency();
    for (ag::Index i = 0; i < a.rows(); ++i) {
        const double deg = a.row(i).sum();
        if (deg > 0.0) a.row(i) /= deg;
    }
    return a;
}

ag::Mat backward_transition(const SensorGraph& g) {
    ag::Mat a = g.dense_adjacency().transpose();
    for (ag::Index i = 0; i < a.rows(); ++i) {
        const double deg = a.row(i).sum();
        if (deg > 0.0) a.row(i) /= deg;
    }
    return a;
}

void write_edge_csv(const std::filesystem::path& path, const SensorGraph& g) {
    std::ostringstream out;
    out.precision(17);
    out << "src,dst,weight\n";
    for (const Edge& e : g.edges) out << e.src << ',' << e.dst << ',' << e.weight << '\n';
    atomic_write_text(path, out.str());
}

SensorGraph read_edge_csv(const std::filesystem::path& path, std::size_t n_s) {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("src,dst,weight", 0) != 0)
        throw std::runtime_error("edge CSV must start with header src,dst,weight: " + path.string());
    SensorGraph g;
    g.n_s = n_s;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Edge e;
        char c1 = 0, c2 = 0;
        std::istringstream ls(line);
        if (!(ls >> e.src >> c1 >> e.dst >> c2 >> e.weight) || c1 != ',' || c2 != ',')
            throw std::runtime_error("malformed edge CSV row: " + line);
        g.edges.push_back(e);
    }
    g.validate();
    return g;
}

void write_coords_csv(const std::filesystem::path& path, const std::vector<std::array<double, 2>>& coords) {
    std::ostringstream out;
    out.precision(17);
    out << "id,x,y\n";
    for (std::size_t i = 0; i < coords.size(); ++i) out << i << ',' << coords[i][0] << ',' << coords[i][1] << '\n';
    atomic_write_text(path, out.str());
}

std::vector<std::array<double, 2>> read_coords_csv(const std::filesystem::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("id,x,y", 0) != 0)
        throw std::runtime_error("coordinate CSV must start with header id,x,y: " + path.string());
    std::vector<std::array<double, 2>> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t id = 0;
        double x = 0, y = 0;
        char c1 = 0, c2 = 0;
        std::istringstream ls(line);
        if (!(ls >> id >> c1 >> x >> c2 >> y)) throw std::runtime_error("malformed coordinate row: " + line);
        if (id != out.size()) throw std::runtime_error("coordinate ids must be 0..n-1 in order");
        out.push_back({x, y});
    }
    return out;
}

}  // namespace vf
