#include "vf/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "vf/core/errors.hpp"
#include "vf/core/png.hpp"

namespace vf {

PCAModel fit_pca(const Mat& e) {
    if (e.rows() < 2) throw std::invalid_argument("fit_pca: need at least two embeddings");
    if (!e.allFinite()) throw NumericalError("fit_pca: embeddings contain non-finite values");
    PCAModel m;
    m.mean = e.colwise().mean();
    const Mat c = e.rowwise() - m.mean;
    const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(e.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericalError("fit_pca: eigendecomposition failed");
    const auto d = static_cast<ag::Index>(e.cols());
    m.components.resize(d, d);
    m.explained_variance.resize(d);
    for (ag::Index k = 0; k < d; ++k) {
        // eigenvalues come ascending
        Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);
        ag::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        m.components.row(k) = v.transpose();
        m.explained_variance(k) = std::max(0.0, es.eigenvalues()(d - 1 - k));
    }
    return m;
}

double retained_variance(const PCAModel& model, const Mat& e, int k) {
    if (e.cols() != model.dim()) throw ShapeError("embedding width does not match the PCA model");
    const Mat c = e.rowwise() - model.mean;
    const double total = c.squaredNorm();
    if (total == 0.0) return 1.0;
    if (k <= 0) return 0.0;
    const Mat top = model.components.topRows(std::min(k, model.k_max()));
    const Mat resid = c - (c * top.transpose()) * top;
    return 1.0 - resid.squaredNorm() / total;
}

int select_components(const PCAModel& model, const Mat& e, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("select_components: threshold must be in (0,1]");
    const Mat c = e.rowwise() - model.mean;
    if (c.squaredNorm() == 0.0) return 0;
    for (int k = 1; k <= model.k_max(); ++k)
        if (retained_variance(model, e, k) >= threshold - 1e-12) return k;
    return model.k_max();
}

Mat project(const Mat& e, const PCAModel& model, int k) {
    if (k < 1 || k > model.k_max()) throw std::out_of_range("project: k outside [1, k_max]");
    if (e.cols() != model.dim()) throw ShapeError("project: embedding width does not match the PCA model");
    return (e.rowwise() - model.mean) * model.components.topRows(k).transpose();
}

Mat reconstruct(const Mat& coords, const PCAModel& model) {
    if (coords.cols() < 1 || coords.cols() > model.k_max()) throw ShapeError("reconstruct: coordinate width out of range");
    Mat out = coords * model.components.topRows(coords.cols());
    out.rowwise() += model.mean;
    return out;
}

NdArray decode_component(const PCAModel& model, int idx, double alpha, const ActivityMask& mask, const VaeModel& vae) {
    if (idx < 0 || idx >= model.k_max()) throw std::out_of_range("decode_component: component index " + std::to_string(idx));
    VibrancyEmbedding z{model.mean + alpha * model.components.row(idx), EmbeddingSource::Mean};
    return decode(z, mask, vae);
}

Grouping parse_grouping(const std::string& name) {
    if (name == "weekday/weekend" || name == "weekday-weekend") return Grouping::WeekdayWeekend;
    if (name == "bimonthly") return Grouping::Bimonthly;
    if (name == "none") return Grouping::None;
    throw ConfigError("unknown grouping '" + name + "' (expected weekday/weekend, bimonthly or none)");
}

std::string to_string(Grouping g) {
    switch (g) {
        case Grouping::WeekdayWeekend: return "weekday/weekend";
        case Grouping::Bimonthly: return "bimonthly";
        case Grouping::None: return "none";
    }
    return "none";
}

std::vector<TrajectoryGroup> group_timestamps(const std::vector<HourStamp>& ts, Grouping g) {
    std::vector<TrajectoryGroup> out;
    if (g == Grouping::None) {
        out.push_back({"all", {}});
        for (std::size_t i = 0; i < ts.size(); ++i) out[0].rows.push_back(i);
        return out;
    }
    if (g == Grouping::WeekdayWeekend) {
        out = {{"weekday", {}}, {"weekend", {}}};
        for (std::size_t i = 0; i < ts.size(); ++i) out[ts[i].is_weekend() ? 1 : 0].rows.push_back(i);
    } else {
        for (int b = 0; b < 6; ++b) out.push_back({fmt::format("months{:02d}-{:02d}", 2 * b + 1, 2 * b + 2), {}});
        for (std::size_t i = 0; i < ts.size(); ++i) out[static_cast<std::size_t>((ts[i].month() - 1) / 2)].rows.push_back(i);
    }
    std::erase_if(out, [](const TrajectoryGroup& t) { return t.rows.empty(); });
    return out;
}

namespace {

void scatter_png(const std::filesystem::path& path, const Mat& xy, const std::vector<int>& hours) {
    constexpr int size = 480, margin = 24;
    Image img(size, size);
    if (xy.rows() > 0) {
        const double x0 = xy.col(0).minCoeff(), x1 = xy.col(0).maxCoeff();
        const double y0 = xy.col(1).minCoeff(), y1 = xy.col(1).maxCoeff();
        const double sx = x1 > x0 ? (size - 2 * margin) / (x1 - x0) : 0.0;
        const double sy = y1 > y0 ? (size - 2 * margin) / (y1 - y0) : 0.0;
        for (int k = margin; k < size - margin; ++k) {
            img.set(k, size - margin, {160, 160, 160});
            img.set(margin, k, {160, 160, 160});
        }
        for (ag::Index i = 0; i < xy.rows(); ++i) {
            const int px = margin + static_cast<int>(std::lround((xy(i, 0) - x0) * sx));
            const int py = size - margin - static_cast<int>(std::lround((xy(i, 1) - y0) * sy));
            img.dot(px, py, 1, ramp_color(hours[static_cast<std::size_t>(i)] / 23.0));
        }
    }
    write_png(path, img);
}

}  // namespace

std::vector<TrajectoryGroup> export_trajectories(const Mat& e, const std::vector<HourStamp>& ts, const PCAModel& model,
                                                 Grouping grouping, const std::filesystem::path& out_dir) {
    if (static_cast<std::size_t>(e.rows()) != ts.size()) throw ShapeError("export_trajectories: one timestamp per embedding required");
    std::filesystem::create_directories(out_dir);
    const Mat xy = project(e, model, std::min(2, model.k_max()));
    auto groups = group_timestamps(ts, grouping);
    for (const auto& g : groups) {
        std::string csv = "time,pc1,pc2,hour,dayofweek,month\n";
        Mat sub(static_cast<ag::Index>(g.rows.size()), 2);
        std::vector<int> hours;
        for (std::size_t k = 0; k < g.rows.size(); ++k) {
            const std::size_t i = g.rows[k];
            const auto r = static_cast<ag::Index>(i);
            const double pc2 = xy.cols() > 1 ? xy(r, 1) : 0.0;
            sub(static_cast<ag::Index>(k), 0) = xy(r, 0);
            sub(static_cast<ag::Index>(k), 1) = pc2;
            hours.push_back(ts[i].hour_of_day());
            csv += fmt::format("{},{:.9g},{:.9g},{},{},{}\n", ts[i].iso(), xy(r, 0), pc2, ts[i].hour_of_day(),
                               ts[i].day_of_week(), ts[i].month());
        }
        std::ofstream(out_dir / (g.name + ".csv"), std::ios::binary) << csv;
        scatter_png(out_dir / (g.name + "_trajectory.png"), sub, hours);
    }
    return groups;
}

Mat hourly_centroids(const Mat& coords, const std::vector<HourStamp>& ts) {
    if (static_cast<std::size_t>(coords.rows()) != ts.size()) throw ShapeError("hourly_centroids: one timestamp per row required");
    Mat sum = Mat::Zero(24, coords.cols());
    std::vector<double> n(24, 0.0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int h = ts[i].hour_of_day();
        sum.row(h) += coords.row(static_cast<ag::Index>(i));
        n[static_cast<std::size_t>(h)] += 1.0;
    }
    for (int h = 0; h < 24; ++h)
        sum.row(h) = n[static_cast<std::size_t>(h)] > 0 ? Mat(sum.row(h) / n[static_cast<std::size_t>(h)])
                                                        : Mat::Constant(1, coords.cols(), std::numeric_limits<double>::quiet_NaN());
    return sum;
}

void write_grid_png(const std::filesystem::path& path, const NdArray& frame, const ActivityMask& mask, int scale) {
    if (frame.rank() != 3 || frame.dim(0) != mask.height || frame.dim(1) != mask.width) throw ShapeError("write_grid_png: frame/mask shape mismatch");
    const int h = static_cast<int>(mask.height), w = static_cast<int>(mask.width);
    Image img(w * scale, h * scale);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
            Rgb c{200, 220, 255};
            if (mask.active(ui, uj)) {
                const auto g = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(frame.at({ui, uj, 0}), 0.0, 1.0)));
                c = {g, g, g};
            }
            for (int y = 0; y < scale; ++y)
                for (int x = 0; x < scale; ++x) img.set(j * scale + x, i * scale + y, c);
        }
    write_png(path, img);
}

}  // namespace vf
