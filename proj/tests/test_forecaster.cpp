#include <gtest/gtest.h>

#include <cmath>

#include "vf/core/errors.hpp"
#include "vf/forecaster.hpp"
#include "vf/synth.hpp"

using namespace vf;

namespace {

VaeConfig tiny_vae() {
    VaeConfig c;
    c.height = 8;
    c.width = 8;
    c.latent_dim = 3;
    c.conv_channels = {8};
    c.decoder_features = 4;
    c.beta = 1e-3;
    c.epochs = 40;
    c.batch_size = 16;
    c.learning_rate = 3e-3;
    return c;
}

struct Fixture {
    GridSeries grid;
    ActivityMask mask;
    SplitIndex split;
    std::size_t test_start = 0;
    VaeModel vae{tiny_vae()};
    EmbeddingSeries emb;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture f;
        SynthConfig sc;
        sc.height = 8;
        sc.width = 8;
        sc.days = 21;
        SynthCity city = synth_city(sc, 7);
        f.split = split_dataset(city.grid.steps(), {}, 7);
        f.test_start = f.split.test.front();
        const IndexRange head{0, f.test_start};
        f.mask = derive_mask(city.grid, head);
        f.grid = normalize_grid(city.grid, compute_cell_stats(city.grid, head));
        auto tv = train_vae(f.grid, f.mask, f.split.train, f.split.val, tiny_vae());
        f.vae = tv.model;
        f.emb = embed_series(f.grid, f.mask, f.vae);
        return f;
    }();
    return f;
}

ForecasterConfig small_cfg() {
    ForecasterConfig c;
    c.hidden = 16;
    c.epochs = 15;
    c.batch_size = 16;
    c.learning_rate = 3e-3;
    return c;
}

}  // namespace

TEST(Forecaster, ShapeContract) {
    ForecasterConfig c;
    Forecaster f(c, 8);
    nn::Rng rng(1);
    const Mat out = forecast_embeddings(rng.normal_matrix(6, 8), f);
    EXPECT_EQ(out.rows(), 6);
    EXPECT_EQ(out.cols(), 8);
    EXPECT_THROW(forecast_embeddings(rng.normal_matrix(5, 8), f), ShapeError);
    EXPECT_THROW(forecast_embeddings(rng.normal_matrix(6, 7), f), ShapeError);
}

TEST(Forecaster, BatchMatchesSingle) {
    ForecasterConfig c;
    c.p = 3;
    c.q = 4;
    Forecaster f(c, 2);
    nn::Rng rng(2);
    const Mat hist = rng.normal_matrix(5, 6);
    const Mat all = f.forecast_batch(hist);
    for (ag::Index i = 0; i < 5; ++i) {
        const Mat one = forecast_embeddings(Eigen::Map<const Mat>(hist.row(i).data(), 3, 2), f);
        EXPECT_LT((Eigen::Map<const Mat>(one.data(), 1, 8) - all.row(i)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Forecaster, LossAtEncoderMeanEqualsReconFloor) {
    const Fixture& f = fixture();
    const std::vector<std::size_t> steps{30, 31, 32, 33, 34, 35};
    Mat z(6, f.emb.z.cols());
    for (int i = 0; i < 6; ++i) z.row(i) = f.emb.z.row(static_cast<ag::Index>(steps[static_cast<std::size_t>(i)]));
    NdArray target = f.grid.values.slice0(30, 6);
    EXPECT_NEAR(forecaster_loss(z, target, f.mask, f.vae), recon_mse(f.vae, f.grid, f.mask, steps), 1e-12);

    const double base = forecaster_loss(z, target, f.mask, f.vae);
    const std::size_t cells = f.mask.mask.size();
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t k = 0; k < cells; ++k)
            if (!f.mask.mask[k]) target.data[t * cells + k] += 5.0;
    EXPECT_EQ(forecaster_loss(z, target, f.mask, f.vae), base);
}

TEST(Forecaster, FreezesVaeAndIsDeterministic) {
    const Fixture& f = fixture();
    const auto before = f.vae.params().checksum();
    const auto tr = valid_anchors(f.split.train, 6, 6, f.test_start);
    const auto va = valid_anchors(f.split.val, 6, 6, f.test_start);
    auto a = train_forecaster(f.emb, f.grid, f.mask, f.vae, tr, va, small_cfg());
    auto b = train_forecaster(f.emb, f.grid, f.mask, f.vae, tr, va, small_cfg());
    EXPECT_EQ(f.vae.params().checksum(), before);
    for (const auto& [name, v] : f.vae.params().entries()) EXPECT_EQ(v.grad().size(), 0) << name;
    EXPECT_EQ(a.model.params().checksum(), b.model.params().checksum());

    // both the training objective and the embedding diagnostic improve
    const auto& h = a.history;
    EXPECT_LT(h.val_pixel_mse[static_cast<std::size_t>(h.best_epoch)], h.val_pixel_mse.front());
    EXPECT_LT(h.val_embed_mse[static_cast<std::size_t>(h.best_epoch)], h.val_embed_mse.front());
    EXPECT_DOUBLE_EQ(h.teacher_ratio.front(), 1.0);
    EXPECT_DOUBLE_EQ(h.teacher_ratio.back(), 0.0);
}

TEST(Forecaster, LearnsAConstantEmbedding) {
    const Fixture& f = fixture();
    EmbeddingSeries constant = f.emb;
    // a typical embedding, where the decoder is sensitive to z
    const Eigen::RowVectorXd c = f.emb.z.colwise().mean();
    constant.z.rowwise() = c;
    GridSeries target = f.grid;
    const Mat frame = f.vae.decode_rows(Mat(c), f.mask);
    const NdArray fr = rows_to_frames(frame, 8, 8, 1);
    for (std::size_t t = 0; t < target.steps(); ++t) std::copy(fr.data.begin(), fr.data.end(), target.values.step(t));
    ForecasterConfig cfg = small_cfg();
    cfg.epochs = 200;
    cfg.patience = 200;
    cfg.learning_rate = 3e-3;
    cfg.final_lr_fraction = 0.02;
    const auto tr = valid_anchors(f.split.train, 6, 6, f.test_start);
    const auto va = valid_anchors(f.split.val, 6, 6, f.test_start);
    auto r = train_forecaster(constant, target, f.mask, f.vae, tr, va, cfg);
    const Mat pred = forecast_embeddings(Mat(c.replicate(6, 1)), r.model);
    EXPECT_LT((pred.rowwise() - c).cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Forecaster, CacheAndAnchors) {
    const Fixture& f = fixture();
    EXPECT_EQ(valid_anchors({0, 4, 5, 9, 3}, 6, 2, 8), (std::vector<std::size_t>{5}));
    Forecaster model(small_cfg(), 3);
    const NdArray cache = forecast_all(model, f.emb);
    ASSERT_EQ(cache.shape, (std::vector<std::size_t>{f.grid.steps(), 6, 3}));
    EXPECT_TRUE(std::isnan(cache.at({4, 0, 0})));
    const Mat direct = forecast_embeddings(f.emb.z.middleRows(0, 6), model);
    for (ag::Index h = 0; h < 6; ++h)
        for (ag::Index k = 0; k < 3; ++k)
            EXPECT_NEAR(cache.at({5, static_cast<std::size_t>(h), static_cast<std::size_t>(k)}), direct(h, k), 1e-12);
    const auto dir = std::filesystem::temp_directory_path() / "vf_test_forecast";
    std::filesystem::remove_all(dir);
    NdArray rounded = cache;
    for (double& v : rounded.data) v = static_cast<float>(v);
    write_forecasts(dir / "forecast", rounded, f.emb);
    const NdArray back = read_forecasts(dir / "forecast");
    ASSERT_EQ(back.shape, rounded.shape);
    for (std::size_t i = 0; i < back.size(); ++i)
        if (!std::isnan(rounded.data[i])) EXPECT_EQ(back.data[i], rounded.data[i]);
    model.params().round_to_f32();
    model.save(dir / "ckpt");
    EXPECT_EQ(Forecaster::load(dir / "ckpt").params().checksum(), model.params().checksum());
    std::filesystem::remove_all(dir);
}
