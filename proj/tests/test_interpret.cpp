#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/SVD>

#include "vf/core/errors.hpp"
#include "vf/interpret.hpp"
#include "vf/synth.hpp"

using namespace vf;

namespace {

// Exact rank-r embeddings: T x d = A (T x r) * B (r x d) + offset.
Mat low_rank(nn::Rng& rng, int t, int d, int r) {
    Mat e = rng.normal_matrix(t, r) * rng.normal_matrix(r, d);
    e.rowwise() += Eigen::RowVectorXd(rng.normal_matrix(1, d).row(0));
    return e;
}

// sin of the largest principal angle between row spaces of a and b (both orthonormal rows).
double max_sin_angle(const Mat& a, const Mat& b) {
    const Mat resid = b.transpose() - a.transpose() * (a * b.transpose());
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(resid);
    return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

}  // namespace

TEST(Interpret, PcaBasics) {
    nn::Rng rng(1);
    // points on a line
    Mat line(50, 4);
    const Eigen::RowVector4d dir(1, 2, -1, 0.5);
    for (int i = 0; i < 50; ++i) line.row(i) = rng.normal() * dir + Eigen::RowVector4d(3, 0, 0, 1);
    const PCAModel l = fit_pca(line);
    EXPECT_NEAR(l.explained_variance(0), l.total_variance(), 1e-9 * l.total_variance());
    EXPECT_LT(l.explained_variance.tail(3).cwiseAbs().maxCoeff(), 1e-9 * l.total_variance());
    EXPECT_NEAR(std::abs(l.components.row(0).dot(dir.normalized())), 1.0, 1e-12);

    const Mat e = rng.normal_matrix(30, 6) * rng.normal_matrix(6, 6);
    const PCAModel m = fit_pca(e);
    EXPECT_LT((m.components * m.components.transpose() - Mat::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-8);
    for (int k = 1; k < 6; ++k) EXPECT_GE(m.explained_variance(k - 1), m.explained_variance(k));
    EXPECT_GE(m.explained_variance.minCoeff(), 0.0);
    const Mat c = e.rowwise() - e.colwise().mean();
    EXPECT_NEAR(m.total_variance(), c.squaredNorm() / 29.0, 1e-8);
    for (int k = 0; k < 6; ++k) {
        ag::Index arg = 0;
        m.components.row(k).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(m.components(k, arg), 0.0);
    }
    EXPECT_LT((reconstruct(project(e, m, 6), m) - e).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT(project(m.mean, m, 3).cwiseAbs().maxCoeff(), 1e-12);
    const Mat unit = project(m.mean + m.components.row(0), m, 3);
    EXPECT_NEAR(unit(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(unit(0, 1), 0.0, 1e-12);
    EXPECT_THROW(fit_pca(rng.normal_matrix(1, 3)), std::invalid_argument);
    EXPECT_THROW(project(e, m, 7), std::out_of_range);
}

TEST(Interpret, PcaMatchesSvdOracle) {
    nn::Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Mat e = rng.normal_matrix(20, 8);
        const PCAModel m = fit_pca(e);
        const Mat c = e.rowwise() - e.colwise().mean();
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeThinV);
        const Mat v = svd.matrixV().transpose();  // rows = right singular vectors
        for (int k = 1; k <= 7; ++k) EXPECT_LT(max_sin_angle(m.components.topRows(k), v.topRows(k)), 1e-6) << k;
        for (int k = 0; k < 8; ++k)
            EXPECT_NEAR(m.explained_variance(k), svd.singularValues()(k) * svd.singularValues()(k) / 19.0, 1e-9);
    }
}

TEST(Interpret, SelectComponents) {
    nn::Rng rng(3);
    for (int r = 1; r <= 5; ++r) {
        const Mat e = low_rank(rng, 400, 8, r);
        EXPECT_EQ(select_components(fit_pca(e), e, 0.997), r);
    }
    const Mat noise = rng.normal_matrix(100, 6);
    const PCAModel m = fit_pca(noise);
    EXPECT_EQ(select_components(m, noise, 1.0), 6);
    int prev = 0;
    for (double th : {0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 0.997, 1.0}) {
        const int k = select_components(m, noise, th);
        EXPECT_GE(k, prev);
        EXPECT_GE(retained_variance(m, noise, k), th - 1e-12);
        if (k > 1) EXPECT_LT(retained_variance(m, noise, k - 1), th);
        prev = k;
    }
    EXPECT_THROW(select_components(m, noise, 0.0), std::invalid_argument);
    EXPECT_THROW(select_components(m, noise, 1.5), std::invalid_argument);
}

TEST(Interpret, GroupingAndExport) {
    nn::Rng rng(4);
    const auto ts = hourly_timeline(HourStamp::parse("2017-01-30T00:00:00Z"), 24 * 40);
    const Mat e = rng.normal_matrix(static_cast<ag::Index>(ts.size()), 4);
    const PCAModel m = fit_pca(e);
    const auto dir = std::filesystem::temp_directory_path() / "vf_interp";
    std::filesystem::remove_all(dir);
    const auto wk = export_trajectories(e, ts, m, Grouping::WeekdayWeekend, dir);
    ASSERT_EQ(wk.size(), 2u);
    EXPECT_EQ(wk[0].rows.size() + wk[1].rows.size(), ts.size());
    for (std::size_t i : wk[0].rows) EXPECT_LT(ts[i].day_of_week(), 5);
    for (std::size_t i : wk[1].rows) EXPECT_GE(ts[i].day_of_week(), 5);
    for (const auto& g : wk) {
        std::ifstream f(dir / (g.name + ".csv"));
        std::string line;
        std::getline(f, line);
        EXPECT_EQ(line, "time,pc1,pc2,hour,dayofweek,month");
        std::size_t n = 0;
        while (std::getline(f, line)) ++n;
        EXPECT_EQ(n, g.rows.size());
        EXPECT_TRUE(std::filesystem::exists(dir / (g.name + "_trajectory.png")));
    }
    const auto bi = group_timestamps(ts, Grouping::Bimonthly);  // Jan 30 .. Mar 10
    ASSERT_EQ(bi.size(), 2u);
    EXPECT_EQ(bi[0].name, "months01-02");
    EXPECT_EQ(bi[1].name, "months03-04");
    EXPECT_EQ(group_timestamps(ts, Grouping::None).front().rows.size(), ts.size());
    EXPECT_EQ(parse_grouping("bimonthly"), Grouping::Bimonthly);
    EXPECT_THROW(parse_grouping("weekly"), ConfigError);
    std::ifstream png(dir / "weekday_trajectory.png", std::ios::binary);
    char sig[8];
    png.read(sig, 8);
    EXPECT_EQ(std::string(sig, 8), std::string("\x89PNG\r\n\x1a\n", 8));
    std::filesystem::remove_all(dir);
}

TEST(Interpret, DailyTrajectoryCloses) {
    nn::Rng rng(5);
    const auto ts = hourly_timeline(HourStamp::parse("2017-03-01T00:00:00Z"), 24 * 21);
    Mat e(static_cast<ag::Index>(ts.size()), 6);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const double a = 2.0 * std::numbers::pi * ts[i].hour_of_day() / 24.0;
        e.row(static_cast<ag::Index>(i)) << std::cos(a), 0.6 * std::sin(a), 0.2 * std::cos(2 * a), 0, 0, 0;
        e.row(static_cast<ag::Index>(i)) += 0.05 * rng.normal_matrix(1, 6);
    }
    const PCAModel m = fit_pca(e);
    const Mat cen = hourly_centroids(project(e, m, 2), ts);
    double diameter = 0.0;
    for (int a = 0; a < 24; ++a)
        for (int b = 0; b < 24; ++b) diameter = std::max(diameter, (cen.row(a) - cen.row(b)).norm());
    EXPECT_LT((cen.row(0) - cen.row(23)).norm(), diameter / 4.0);
}

TEST(Interpret, DecodeComponent) {
    SynthConfig sc;
    sc.height = 8;
    sc.width = 8;
    sc.days = 21;
    const SynthCity city = synth_city(sc, 11);
    const IndexRange head{0, city.grid.steps()};
    const ActivityMask mask = derive_mask(city.grid, head);
    const GridSeries g = normalize_grid(city.grid, compute_cell_stats(city.grid, head));
    VaeConfig vc;
    vc.height = 8;
    vc.width = 8;
    vc.latent_dim = 3;
    vc.conv_channels = {8};
    vc.decoder_features = 4;
    vc.beta = 1e-3;
    vc.epochs = 30;
    vc.batch_size = 16;
    vc.learning_rate = 3e-3;
    std::vector<std::size_t> train, val;
    for (std::size_t t = 0; t < g.steps(); ++t) (t % 5 == 0 ? val : train).push_back(t);
    const TrainedVae vae = train_vae(g, mask, train, val, vc);
    const EmbeddingSeries emb = embed_series(g, mask, vae.model);
    const PCAModel m = fit_pca(emb.z);

    const NdArray at_mean = decode_component(m, 0, 0.0, mask, vae.model);
    const NdArray direct = decode(VibrancyEmbedding{m.mean, EmbeddingSource::Mean}, mask, vae.model);
    EXPECT_EQ(at_mean.data, direct.data);
    const double a = 3.0 * std::sqrt(m.explained_variance(0));
    const NdArray plus = decode_component(m, 0, a, mask, vae.model), minus = decode_component(m, 0, -a, mask, vae.model);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            const double v = plus.at({i, j, 0});
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            if (!mask.active(i, j)) EXPECT_EQ(v, 0.0);
        }
    EXPECT_THROW(decode_component(m, 3, 1.0, mask, vae.model), std::out_of_range);
    EXPECT_THROW(decode_component(m, -1, 1.0, mask, vae.model), std::out_of_range);

    // Oracle from data: per zone, the mean |difference| between the average frame in the top and bottom
    // PC1-score deciles. The decoded +a/-a pair should move most in the zone where that gap is largest.
    const Eigen::VectorXd score = project(emb.z, m, 1).col(0);
    std::vector<std::size_t> order(g.steps());
    for (std::size_t t = 0; t < order.size(); ++t) order[t] = t;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return score(static_cast<ag::Index>(x)) < score(static_cast<ag::Index>(y)); });
    const std::size_t dec = order.size() / 10;
    std::vector<double> lo_mean(64, 0.0), hi_mean(64, 0.0);
    for (std::size_t r = 0; r < dec; ++r)
        for (std::size_t k = 0; k < 64; ++k) {
            lo_mean[k] += g.values.step(order[r])[k] / static_cast<double>(dec);
            hi_mean[k] += g.values.step(order[order.size() - 1 - r])[k] / static_cast<double>(dec);
        }
    double gap[3] = {0, 0, 0}, diff[3] = {0, 0, 0}, count[3] = {0, 0, 0};
    for (std::size_t k = 0; k < 64; ++k) {
        const auto z = static_cast<int>(city.meta.zones[k]);
        gap[z] += std::abs(hi_mean[k] - lo_mean[k]);
        diff[z] += std::abs(plus.data[k] - minus.data[k]);
        count[z] += 1;
    }
    ASSERT_GT(count[1], 0);
    ASSERT_GT(count[2], 0);
    const int hi = gap[1] / count[1] > gap[2] / count[2] ? 1 : 2;
    const int lo = 3 - hi;
    // zones must be clearly separated by the oracle for the comparison to mean anything
    ASSERT_GT(gap[hi] / count[hi], 1.1 * gap[lo] / count[lo]);
    EXPECT_GT(diff[hi] / count[hi], diff[lo] / count[lo]);
}
