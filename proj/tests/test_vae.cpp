#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "vf/core/errors.hpp"
#include "vf/synth.hpp"
#include "vf/vae.hpp"

using namespace vf;

namespace {

VaeConfig tiny_config() {
    VaeConfig c;
    c.height = 8;
    c.width = 8;
    c.latent_dim = 2;
    c.conv_channels = {3};
    c.decoder_features = 2;
    return c;
}

ActivityMask checker_mask(std::size_t h, std::size_t w) {
    ActivityMask m{h, w, std::vector<std::uint8_t>(h * w, 1)};
    for (std::size_t k = 0; k < m.mask.size(); k += 5) m.mask[k] = 0;
    return m;
}

NdArray random_frame(nn::Rng& rng, std::size_t h, std::size_t w) {
    NdArray f({h, w, 1});
    for (double& v : f.data) v = rng.uniform();
    return f;
}

struct SmallData {
    GridSeries grid;
    ActivityMask mask;
    SplitIndex split;
};

SmallData small_data() {
    SynthConfig sc;
    sc.height = 8;
    sc.width = 8;
    sc.days = 14;
    SynthCity city = synth_city(sc, 3);
    SmallData d;
    const IndexRange head{0, city.grid.steps() / 2};
    d.mask = derive_mask(city.grid, head);
    d.grid = normalize_grid(city.grid, compute_cell_stats(city.grid, head));
    d.split = split_dataset(city.grid.steps(), {}, 1);
    return d;
}

}  // namespace

TEST(Vae, LossGradientMatchesFiniteDifferences) {
    const VaeConfig cfg = tiny_config();
    VaeModel model(cfg);
    nn::Rng rng(11);
    // zero biases put ReLU inputs exactly on the kink; move to a generic point
    for (auto& [n, v] : model.params().entries())
        if (n.ends_with(".b")) {
            ag::Var p = v;
            p.mutable_value() = rng.normal_matrix(p.rows(), p.cols()) * 0.1;
        }
    ag::Mat x(3, 64);
    for (ag::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
    const ag::Mat m = mask_row(checker_mask(8, 8), 1);
    const ag::Mat eps = rng.normal_matrix(3, 2);
    auto loss = [&] {
        ag::Var xv = ag::Var::constant(x);
        auto [mu, logvar] = model.encode_graph(xv);
        ag::Var z = ag::add(mu, ag::mul(ag::exp(ag::scale(logvar, 0.5)), ag::Var::constant(eps)));
        return vae_loss_graph(xv, model.decode_graph(z, m), mu, logvar, m, 0.7).total;
    };
    std::vector<std::string> names;
    for (const auto& [n, _] : model.params().entries()) names.push_back(n);
    const auto r = oracle::gradcheck(loss, model.params().trainable(), names);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Vae, KlClosedFormAndNonnegativity) {
    ActivityMask mask{8, 8, std::vector<std::uint8_t>(64, 1)};
    NdArray c({8, 8, 1});
    LatentGaussian g{ag::Mat::Zero(1, 4), ag::Mat::Zero(1, 4)};
    auto l = vae_loss(c, c, g, mask, 1.0);
    EXPECT_EQ(l.total, 0.0);
    g.mu(0, 0) = 1.0;
    EXPECT_DOUBLE_EQ(vae_loss(c, c, g, mask, 1.0).kl, 0.5);
    nn::Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        LatentGaussian r{rng.normal_matrix(1, 4) * 2.0, rng.normal_matrix(1, 4) * 2.0};
        EXPECT_GE(vae_loss(c, c, r, mask, 1.0).kl, 0.0);
    }
}

TEST(Vae, LossRejectsEmptyMaskAndNegativeBeta) {
    ActivityMask empty{8, 8, std::vector<std::uint8_t>(64, 0)};
    NdArray c({8, 8, 1});
    LatentGaussian g{ag::Mat::Zero(1, 2), ag::Mat::Zero(1, 2)};
    EXPECT_THROW(vae_loss(c, c, g, empty, 1.0), std::invalid_argument);
    ActivityMask full{8, 8, std::vector<std::uint8_t>(64, 1)};
    EXPECT_THROW(vae_loss(c, c, g, full, -1.0), std::invalid_argument);
}

TEST(Vae, MaskedCellsDoNotAffectRecon) {
    nn::Rng rng(2);
    const ActivityMask mask = checker_mask(8, 8);
    NdArray c = random_frame(rng, 8, 8), ch = random_frame(rng, 8, 8);
    LatentGaussian g{rng.normal_matrix(1, 2), rng.normal_matrix(1, 2)};
    const double base = vae_loss(c, ch, g, mask, 1.0).recon;
    NdArray c2 = c, ch2 = ch;
    for (std::size_t k = 0; k < 64; ++k)
        if (!mask.mask[k]) {
            c2.data[k] += 10.0;
            ch2.data[k] -= 3.0;
        }
    EXPECT_EQ(vae_loss(c2, ch2, g, mask, 1.0).recon, base);

    // d recon / d C_hat vanishes on inactive cells
    NdArray cb = c, chb = ch;
    cb.shape.insert(cb.shape.begin(), 1);
    chb.shape.insert(chb.shape.begin(), 1);
    ag::Var chv(frames_to_rows(chb), true);
    auto l = vae_loss_graph(ag::Var::constant(frames_to_rows(cb)), chv,
                            ag::Var::constant(g.mu), ag::Var::constant(g.logvar), mask_row(mask, 1), 1.0);
    l.recon.backward();
    for (std::size_t k = 0; k < 64; ++k)
        if (!mask.mask[k]) EXPECT_EQ(chv.grad()(0, static_cast<ag::Index>(k)), 0.0);
}

TEST(Vae, DecodeRespectsMask) {
    VaeModel model(tiny_config());
    nn::Rng rng(3);
    ActivityMask zero{8, 8, std::vector<std::uint8_t>(64, 0)};
    const ActivityMask mask = checker_mask(8, 8);
    for (int trial = 0; trial < 20; ++trial) {
        VibrancyEmbedding z{rng.normal_matrix(1, 2).row(0) * 3.0, EmbeddingSource::Sampled};
        for (double v : decode(z, zero, model).data) EXPECT_EQ(v, 0.0);
        const NdArray out = decode(z, mask, model);
        for (std::size_t k = 0; k < 64; ++k) {
            EXPECT_GE(out.data[k], 0.0);
            EXPECT_LE(out.data[k], 1.0);
            if (!mask.mask[k]) EXPECT_EQ(out.data[k], 0.0);
        }
    }
    ActivityMask flipped = mask;
    flipped.mask[9] = 0;
    VibrancyEmbedding z{Eigen::RowVectorXd::Ones(2), EmbeddingSource::Mean};
    EXPECT_EQ(decode(z, flipped, model).data[9], 0.0);
    EXPECT_GT(decode(z, mask, model).data[9], 0.0);
    EXPECT_THROW(decode(z, ActivityMask{4, 4, std::vector<std::uint8_t>(16, 1)}, model), ShapeError);
}

TEST(Vae, SampleLatent) {
    LatentGaussian g{ag::Mat(1, 3), ag::Mat::Zero(1, 3)};
    g.mu << 0.5, -1.0, 2.0;
    auto m = sample_latent(g, Eigen::RowVectorXd::Zero(3));
    EXPECT_EQ(m.source, EmbeddingSource::Mean);
    EXPECT_TRUE(m.z.isApprox(g.mu.row(0), 0.0));
    auto s = sample_latent(g, Eigen::RowVectorXd::Unit(3, 0));
    EXPECT_EQ(s.source, EmbeddingSource::Sampled);
    EXPECT_DOUBLE_EQ(s.z(0), 1.5);
    EXPECT_DOUBLE_EQ(s.z(1), -1.0);

    g.logvar << 0.0, std::log(4.0), std::log(0.25);
    nn::Rng rng(9);
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(3);
    const int n = 10000;
    for (int i = 0; i < n; ++i) acc += sample_latent(g, rng.normal_matrix(1, 3).row(0)).z;
    acc /= n;
    for (int k = 0; k < 3; ++k) {
        const double sigma = std::exp(0.5 * g.logvar(0, k));
        EXPECT_LT(std::abs(acc(k) - g.mu(0, k)), 4.0 * sigma / 100.0);
    }
}

TEST(Vae, EncodeShapesBatchConsistencyAndDeterminism) {
    VaeModel model(tiny_config());
    nn::Rng rng(4);
    NdArray batch({3, 8, 8, 1});
    for (double& v : batch.data) v = rng.uniform();
    const auto all = model.encode_rows(frames_to_rows(batch));
    ASSERT_EQ(all.mu.rows(), 3);
    ASSERT_EQ(all.mu.cols(), 2);
    for (std::size_t i = 0; i < 3; ++i) {
        NdArray one = batch.slice0(i, 1);
        one.shape.erase(one.shape.begin());
        const auto g = encode(one, model);
        EXPECT_LT((g.mu.row(0) - all.mu.row(static_cast<ag::Index>(i))).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((g.logvar.row(0) - all.logvar.row(static_cast<ag::Index>(i))).cwiseAbs().maxCoeff(), 1e-12);
        const auto g2 = encode(one, model);
        EXPECT_EQ(g.mu, g2.mu);
    }
    EXPECT_THROW(encode(NdArray({4, 8, 1}), model), ShapeError);
}

TEST(Vae, DefaultArchitectureAtRealScale) {
    VaeConfig c;
    c.height = 64;
    c.width = 64;
    c.latent_dim = 32;
    EXPECT_EQ(c.blocks(), 4);
    VaeModel model(c);
    NdArray f({64, 64, 1});
    const auto g = encode(f, model);
    EXPECT_EQ(g.mu.cols(), 32);
    EXPECT_EQ(g.logvar.cols(), 32);
    VaeConfig bad;
    bad.height = 12;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Vae, TrainingIsDeterministicAndKeepsBest) {
    const SmallData d = small_data();
    VaeConfig cfg = tiny_config();
    cfg.latent_dim = 4;
    cfg.epochs = 4;
    cfg.batch_size = 32;
    cfg.beta = 1e-3;
    auto a = train_vae(d.grid, d.mask, d.split.train, d.split.val, cfg);
    auto b = train_vae(d.grid, d.mask, d.split.train, d.split.val, cfg);
    EXPECT_EQ(a.model.params().checksum(), b.model.params().checksum());
    ASSERT_EQ(a.history.val_total.size(), 4u);
    const double best = *std::min_element(a.history.val_total.begin(), a.history.val_total.end());
    EXPECT_EQ(a.history.best_val_total, best);
    EXPECT_NEAR(recon_mse(a.model, d.grid, d.mask, d.split.val), a.history.best_val_recon, 1e-12);
    EXPECT_LT(a.history.train_total.back(), a.history.train_total.front());
}

TEST(Vae, CheckpointAndEmbeddingCacheRoundTrip) {
    const SmallData d = small_data();
    VaeConfig cfg = tiny_config();
    VaeModel model(cfg);
    model.params().round_to_f32();
    const auto dir = std::filesystem::temp_directory_path() / "vf_test_vae_ckpt";
    std::filesystem::remove_all(dir);
    model.save(dir, {{"note", "unit"}});
    VaeModel back = VaeModel::load(dir);
    EXPECT_EQ(back.params().checksum(), model.params().checksum());
    EXPECT_EQ(back.config().resolved_channels(), cfg.resolved_channels());

    EmbeddingSeries e = embed_series(d.grid, d.mask, model);
    ASSERT_EQ(e.z.rows(), static_cast<ag::Index>(d.grid.steps()));
    ASSERT_EQ(e.z.cols(), 2);
    for (ag::Index i = 0; i < e.z.size(); ++i) e.z.data()[i] = static_cast<float>(e.z.data()[i]);
    write_embeddings(dir / "emb", e);
    const EmbeddingSeries r = read_embeddings(dir / "emb");
    EXPECT_EQ(r.z, e.z);
    EXPECT_EQ(r.timestamps.front(), e.timestamps.front());

    GridSeries rep = d.grid;
    std::copy(rep.values.step(0), rep.values.step(1), rep.values.step(5));
    const EmbeddingSeries er = embed_series(rep, d.mask, model);
    EXPECT_EQ(er.z.row(0), er.z.row(5));
    std::filesystem::remove_all(dir);
}
