#include <gtest/gtest.h>

#include <filesystem>

#include "stereoworld/rng.hpp"
#include "stereoworld/stereonet.hpp"
#include "stereoworld/trainer.hpp"

using namespace stw;
namespace sn = stw::stereonet;

namespace {

sn::ModelConfig tiny_cfg() {
    sn::ModelConfig c;
    c.token_dim = 16;
    c.num_heads = 2;
    c.n_shared_blocks = 2;
    c.n_branch_blocks = 1;
    c.patch_h = 2;
    c.patch_w = 2;
    c.max_frames = 4;
    c.max_tokens_y = 4;
    c.max_tokens_x = 4;
    c.latent_channels = 12;
    c.mlp_mult = 2;
    c.time_features = 4;
    return c;
}

Tensor randn(std::vector<int64_t> shape, uint64_t k) {
    return rng::gaussian_tensor(std::move(shape), 31, rng::Stream::Init, k);
}

bool params_equal(const sn::ModelParams& a, const sn::ModelParams& b) {
    std::vector<std::pair<std::string, const Tensor*>> ta, tb;
    sn::visit_params(a, [&](const std::string& n, const Tensor& t, bool) { ta.emplace_back(n, &t); });
    sn::visit_params(b, [&](const std::string& n, const Tensor& t, bool) { tb.emplace_back(n, &t); });
    if (ta.size() != tb.size()) return false;
    for (size_t i = 0; i < ta.size(); ++i)
        if (ta[i].first != tb[i].first || !(*ta[i].second == *tb[i].second)) return false;
    return true;
}

}  // namespace

TEST(Stereonet, BuildDuplicatesBranches) {
    sn::ModelConfig cfg = tiny_cfg();
    cfg.n_shared_blocks = 4;
    cfg.n_branch_blocks = 2;
    const sn::ModelParams p = sn::build(cfg, 5);
    EXPECT_EQ(p.shared.size(), 4u);
    EXPECT_EQ(p.rgb.size(), 2u);
    EXPECT_EQ(p.depth.size(), 2u);
    for (size_t i = 0; i < p.rgb.size(); ++i) {
        EXPECT_TRUE(p.rgb[i].wq.W == p.depth[i].wq.W);
        EXPECT_TRUE(p.rgb[i].fc2.W == p.depth[i].fc2.W);
        EXPECT_TRUE(p.rgb[i].ln1_g == p.depth[i].ln1_g);
    }
    EXPECT_TRUE(sn::build(cfg, 5).token_in.W == p.token_in.W);  // same seed, same init
    EXPECT_FALSE(sn::build(cfg, 6).token_in.W == p.token_in.W);
}

TEST(Stereonet, ConfigValidation) {
    sn::ModelConfig bad = tiny_cfg();
    bad.token_dim = 48;
    bad.num_heads = 5;
    EXPECT_THROW(sn::build(bad, 0), std::invalid_argument);
    bad = tiny_cfg();
    bad.n_shared_blocks = 0;
    EXPECT_THROW(sn::build(bad, 0), std::invalid_argument);
    bad = tiny_cfg();
    bad.n_branch_blocks = 0;
    EXPECT_THROW(sn::build(bad, 0), std::invalid_argument);
}

TEST(Stereonet, ForwardShapesAndSeqLen) {
    sn::ModelConfig cfg = tiny_cfg();
    cfg.max_frames = 4;
    cfg.max_tokens_y = 8;
    cfg.max_tokens_x = 8;
    const sn::ModelParams p = sn::build(cfg, 1);
    const std::vector<int64_t> latent{12, 4, 16, 16};
    const sn::SeqLayout L = sn::make_layout(cfg, latent, false);
    EXPECT_EQ(L.per_view * 3, 768);  // 3 * 4 * 8 * 8
    Tensor z_l = randn(latent, 1), z_r = randn(latent, 2), d_r = randn(latent, 3);
    const auto out = sn::forward(p, z_l, z_r, d_r, 0.5);
    EXPECT_EQ(out.v_rgb.shape(), latent);
    EXPECT_EQ(out.v_dep.shape(), latent);
    // determinism
    const auto again = sn::forward(p, z_l, z_r, d_r, 0.5);
    EXPECT_TRUE(again.v_rgb == out.v_rgb);
    EXPECT_TRUE(again.v_dep == out.v_dep);
    // rgb-only mode drops the depth stream
    const auto rgb = sn::forward(p, z_l, z_r, Tensor(), 0.5);
    EXPECT_EQ(rgb.v_rgb.shape(), latent);
    EXPECT_EQ(rgb.v_dep.numel(), 0);
    EXPECT_THROW(sn::forward(p, z_l, z_r, d_r, 1.5), std::invalid_argument);
}

TEST(Stereonet, FramePermutationEquivariance) {
    sn::ModelConfig cfg = tiny_cfg();
    sn::ModelParams p = sn::build(cfg, 3);
    p.emb_frame.fill(0.0);  // disable frame identity
    // Heads are zero-initialized; give them signal so outputs are non-trivial.
    for (int64_t i = 0; i < p.head_rgb.W.numel(); ++i)
        p.head_rgb.W[i] = 0.02 * rng::gaussian(9, rng::Stream::Init, 400, static_cast<uint64_t>(i));
    const std::vector<int64_t> latent{12, 3, 4, 4};
    Tensor z_l = randn(latent, 4), z_r = randn(latent, 5), d_r = randn(latent, 6);
    const auto base = sn::forward(p, z_l, z_r, d_r, 0.3);

    // Swap right-view frames 0 and 2 (left and depth unchanged).
    Tensor z_r_sw = z_r;
    const int64_t C = latent[0], F = latent[1], HW = latent[2] * latent[3];
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i)
            std::swap(z_r_sw[(c * F + 0) * HW + i], z_r_sw[(c * F + 2) * HW + i]);
    const auto sw = sn::forward(p, z_l, z_r_sw, d_r, 0.3);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i) {
            ASSERT_NEAR(sw.v_rgb[(c * F + 0) * HW + i], base.v_rgb[(c * F + 2) * HW + i], 1e-9);
            ASSERT_NEAR(sw.v_rgb[(c * F + 2) * HW + i], base.v_rgb[(c * F + 0) * HW + i], 1e-9);
            ASSERT_NEAR(sw.v_rgb[(c * F + 1) * HW + i], base.v_rgb[(c * F + 1) * HW + i], 1e-9);
        }
}

TEST(Stereonet, LowRankAdapters) {
    sn::ModelConfig cfg = tiny_cfg();
    const sn::ModelParams base = sn::build(cfg, 7);
    const sn::ModelParams wrapped = sn::wrap_low_rank(base, 2, 7);
    const std::vector<int64_t> latent{12, 2, 4, 4};
    Tensor z_l = randn(latent, 7), z_r = randn(latent, 8), d_r = randn(latent, 9);
    // B = 0: adapted forward equals base forward bit-exactly.
    const auto a = sn::forward(base, z_l, z_r, d_r, 0.4);
    const auto b = sn::forward(wrapped, z_l, z_r, d_r, 0.4);
    EXPECT_TRUE(a.v_rgb == b.v_rgb);
    EXPECT_TRUE(a.v_dep == b.v_dep);

    // Only adapter tensors are trainable, and A/B add (dout+din)*rank each.
    int64_t lora_trainable = sn::total_params(wrapped, true);
    int64_t expect = 0;
    sn::visit_params(wrapped, [&](const std::string& n, const Tensor& t, bool tr) {
        if (tr) {
            EXPECT_TRUE(n.find(".lora.") != std::string::npos) << n;
            expect += t.numel();
        }
    });
    EXPECT_EQ(lora_trainable, expect);
    EXPECT_GT(lora_trainable, 0);
    // rank 4 on the 16x16 attention maps: A 16x4 + B 4x16 = 128 scalars.
    const sn::ModelParams r4 = sn::wrap_low_rank(base, 4, 7);
    EXPECT_EQ(r4.shared[0].wq.A.numel() + r4.shared[0].wq.B.numel(), 128);

    EXPECT_THROW(sn::wrap_low_rank(base, 64, 7), std::invalid_argument);  // rank > min dim
    EXPECT_THROW(sn::wrap_low_rank(base, 0, 7), std::invalid_argument);
}

TEST(Stereonet, LoraTrainingIsolatesBaseWeights) {
    trainer::TrainConfig cfg;
    cfg.model = tiny_cfg();
    cfg.codec = codec::CodecConfig{1, 2, 2, 3};
    cfg.projector.s_max = 2;
    cfg.seed = 3;
    cfg.steps = 5;
    cfg.lr = 1e-3;
    cfg.replace_k = 0;
    cfg.lora_rank = 2;
    cfg.depth_dropout = 0.0;

    scenegen::SpecRanges r;
    r.width = 16;
    r.height = 8;
    r.frames = 2;
    r.d_max = 2.0;
    const auto spec = scenegen::random_spec(r, 5, 0);
    const trainer::EncodedSample s = trainer::encode_sample(scenegen::render_clip(spec), cfg.codec);

    trainer::TrainState st;
    st.cfg = cfg;
    st.params = sn::wrap_low_rank(sn::build(cfg.model, cfg.seed), cfg.lora_rank, cfg.seed);
    const sn::ModelParams before = st.params;
    for (int i = 0; i < 5; ++i) trainer::train_step(st, {&s});
    // Base weights bit-identical; at least one adapter changed.
    bool adapters_changed = false;
    std::map<std::string, const Tensor*> ref;
    sn::visit_params(before, [&](const std::string& n, const Tensor& t, bool) { ref[n] = &t; });
    sn::visit_params(st.params, [&](const std::string& n, const Tensor& t, bool) {
        if (n.find(".lora.") != std::string::npos) {
            if (!(t == *ref[n])) adapters_changed = true;
        } else {
            EXPECT_TRUE(t == *ref[n]) << n << " changed during adapter-only training";
        }
    });
    EXPECT_TRUE(adapters_changed);
}

TEST(Stereonet, ConditioningIsLive) {
    // After one training step the model output must depend on z_l.
    trainer::TrainConfig cfg;
    cfg.model = tiny_cfg();
    cfg.codec = codec::CodecConfig{1, 2, 2, 3};
    cfg.projector.s_max = 2;
    cfg.seed = 11;
    cfg.replace_k = 0;
    cfg.depth_dropout = 0.0;
    scenegen::SpecRanges r;
    r.width = 16;
    r.height = 8;
    r.frames = 2;
    r.d_max = 2.0;
    const trainer::EncodedSample s =
        trainer::encode_sample(scenegen::render_clip(scenegen::random_spec(r, 6, 0)), cfg.codec);
    trainer::TrainState st;
    st.cfg = cfg;
    st.params = sn::build(cfg.model, cfg.seed);
    trainer::train_step(st, {&s});

    Tensor z_r = randn(s.z_l.shape(), 21), d_r = randn(s.z_l.shape(), 22);
    const auto a = sn::forward(st.params, s.z_l, z_r, d_r, 0.5);
    Tensor doubled = s.z_l;
    for (int64_t i = 0; i < doubled.numel(); ++i) doubled[i] *= 2.0;
    const auto b = sn::forward(st.params, doubled, z_r, d_r, 0.5);
    double diff = 0.0;
    for (int64_t i = 0; i < a.v_rgb.numel(); ++i) diff += std::abs(a.v_rgb[i] - b.v_rgb[i]);
    EXPECT_GT(diff, 0.0);
}

TEST(Stereonet, CheckpointRoundtrip) {
    const std::string dir =
        (std::filesystem::temp_directory_path() / "stw_ckpt_test").string();
    std::filesystem::remove_all(dir);
    sn::ModelConfig cfg = tiny_cfg();
    sn::ModelParams p = sn::build(cfg, 9);
    p = sn::wrap_low_rank(std::move(p), 2, 9);
    sn::save_checkpoint(p, dir, Json{{"note", 1}});
    Json extra;
    const sn::ModelParams q = sn::load_checkpoint(dir, &extra);
    EXPECT_TRUE(params_equal(p, q));
    EXPECT_EQ(q.lora_rank, 2);
    EXPECT_EQ(extra.at("note").get<int>(), 1);
}
