#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "stereoworld/trainer.hpp"

using namespace stw;
namespace tr = stw::trainer;
namespace sn = stw::stereonet;

namespace {

std::string tmp_dir(const std::string& tag) {
    const std::string d = (std::filesystem::temp_directory_path() / ("stw_tr_" + tag)).string();
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

tr::TrainConfig tiny_train_cfg(uint64_t seed = 2) {
    tr::TrainConfig cfg;
    cfg.model.token_dim = 16;
    cfg.model.num_heads = 2;
    cfg.model.n_shared_blocks = 2;
    cfg.model.n_branch_blocks = 1;
    cfg.model.patch_h = 2;
    cfg.model.patch_w = 2;
    cfg.model.max_frames = 4;
    cfg.model.max_tokens_y = 4;
    cfg.model.max_tokens_x = 4;
    cfg.model.latent_channels = 12;
    cfg.model.mlp_mult = 2;
    cfg.model.time_features = 4;
    cfg.codec = codec::CodecConfig{1, 2, 2, 3};
    cfg.projector.s_max = 2;
    cfg.seed = seed;
    cfg.replace_p = 0.0;
    cfg.replace_k = 0;
    cfg.depth_dropout = 0.0;
    cfg.lr = 3e-3;
    return cfg;
}

tr::EncodedSample make_sample(const tr::TrainConfig& cfg, uint64_t seed, uint64_t idx = 0) {
    scenegen::SpecRanges r;
    r.width = 16;
    r.height = 8;
    r.frames = 2;
    r.d_max = 2.0;
    return tr::encode_sample(scenegen::render_clip(scenegen::random_spec(r, seed, idx)),
                             cfg.codec);
}

std::string slurp(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Trainer, FrameReplacementContract) {
    const std::vector<int64_t> shape{4, 3, 2, 2};
    Tensor z0 = rng::gaussian_tensor(shape, 1, rng::Stream::Init, 0);
    Tensor d0 = rng::gaussian_tensor(shape, 1, rng::Stream::Init, 1);
    Tensor zt = rng::gaussian_tensor(shape, 1, rng::Stream::Init, 2);
    Tensor dt = rng::gaussian_tensor(shape, 1, rng::Stream::Init, 3);

    // p = 0: always unchanged.
    Tensor zt0 = zt, dt0 = dt;
    Tensor mask = tr::apply_frame_replacement(zt0, dt0, z0, d0, 0.0, 2, 9, 0);
    EXPECT_TRUE(zt0 == zt);
    for (int64_t f = 0; f < 3; ++f) EXPECT_EQ(mask[f], 1.0);

    // p = 1, k = 2: first two latent frames become clean, mask excludes them.
    Tensor zt1 = zt, dt1 = dt;
    mask = tr::apply_frame_replacement(zt1, dt1, z0, d0, 1.0, 2, 9, 0);
    EXPECT_EQ(mask[0], 0.0);
    EXPECT_EQ(mask[1], 0.0);
    EXPECT_EQ(mask[2], 1.0);
    for (int64_t c = 0; c < 4; ++c)
        for (int64_t f = 0; f < 3; ++f)
            for (int64_t i = 0; i < 4; ++i) {
                const int64_t idx = (c * 3 + f) * 4 + i;
                if (f < 2) {
                    ASSERT_EQ(zt1[idx], z0[idx]);
                    ASSERT_EQ(dt1[idx], d0[idx]);
                } else {
                    ASSERT_EQ(zt1[idx], zt[idx]);
                }
            }
    // k >= frame count rejected.
    Tensor ztx = zt, dtx = dt;
    EXPECT_THROW(tr::apply_frame_replacement(ztx, dtx, z0, d0, 0.5, 3, 9, 0),
                 std::invalid_argument);
}

TEST(Trainer, FrameReplacementFrequency) {
    // Monte Carlo over 10k draw keys: firing frequency == p within 0.01.
    const std::vector<int64_t> shape{1, 2, 1, 1};
    Tensor z0(shape, 1.0), d0(shape, 1.0);
    int fired = 0;
    const int trials = 10000;
    for (int k = 0; k < trials; ++k) {
        Tensor zt(shape, 0.0), dt(shape, 0.0);
        Tensor mask = tr::apply_frame_replacement(zt, dt, z0, d0, 0.3, 1, 77,
                                                  static_cast<uint64_t>(k));
        fired += mask[0] == 0.0 ? 1 : 0;
    }
    EXPECT_NEAR(static_cast<double>(fired) / trials, 0.3, 0.01);
}

TEST(Trainer, LossDecomposition) {
    tr::TrainConfig cfg = tiny_train_cfg();
    sn::ModelParams params = sn::build(cfg.model, cfg.seed);
    const tr::EncodedSample s = make_sample(cfg, 4);
    tr::SampleDraws draws;
    draws.t = 0.7;
    draws.noise_key = 3;
    const tr::LossParts p = tr::total_loss(params, cfg, s, draws);
    EXPECT_NEAR(p.total, p.rgb + p.dep + cfg.lambda_dis * p.dis, 1e-12);
    EXPECT_GE(p.dis, 0.0);

    // lambda_dis = 0 skips the disparity term entirely.
    tr::TrainConfig off = cfg;
    off.lambda_dis = 0.0;
    const tr::LossParts q = tr::total_loss(params, off, s, draws);
    EXPECT_EQ(q.dis, 0.0);
    EXPECT_EQ(q.total, q.rgb + q.dep);

    // Doubling lambda_dis adds exactly lambda * L_dis.
    tr::TrainConfig twice = cfg;
    twice.lambda_dis = 2.0 * cfg.lambda_dis;
    const tr::LossParts r = tr::total_loss(params, twice, s, draws);
    EXPECT_NEAR(r.total - p.total, cfg.lambda_dis * p.dis, 1e-10);
    EXPECT_NEAR(r.dis, p.dis, 1e-12);
}

TEST(Trainer, OracleVelocityZeroesCfmTerms) {
    // With v == u the CFM terms vanish and predict_clean lands on z_r0, so
    // L_dis reduces to the projector loss on the clean pair.
    tr::TrainConfig cfg = tiny_train_cfg();
    const tr::EncodedSample s = make_sample(cfg, 8);
    const double t = 0.6;
    Tensor eps_r = rng::gaussian_tensor(s.z_r0.shape(), 1, rng::Stream::NoiseRgb, 5);
    Tensor z_r_t = flowmatch::interpolate(s.z_r0, eps_r, t);
    Tensor u = flowmatch::cfm_target(s.z_r0, eps_r);
    Tensor mask(u.shape(), 1.0);
    EXPECT_EQ(flowmatch::cfm_loss(u, u, mask), 0.0);
    Tensor zhat = flowmatch::predict_clean(z_r_t, u, t);
    double dmax = 0.0;
    for (int64_t i = 0; i < zhat.numel(); ++i) dmax = std::max(dmax, std::abs(zhat[i] - s.z_r0[i]));
    EXPECT_LE(dmax, 1e-12);

    geometry::DisparityMap bp = geometry::project_disparity(s.z_l, s.z_r0, cfg.projector, cfg.codec);
    Tensor valid = bp.valid;
    for (int64_t i = 0; i < valid.numel(); ++i) valid[i] *= s.occ[i];
    const auto parts = geometry::disparity_loss(bp.values, s.disp_gt, valid, cfg.lambda1,
                                                cfg.lambda_l1, cfg.projector.min_disp_floor);
    EXPECT_GE(parts.total, 0.0);
}

TEST(Trainer, StepDeterminism) {
    tr::TrainConfig cfg = tiny_train_cfg(21);
    const tr::EncodedSample s = make_sample(cfg, 21);
    tr::TrainState a, b;
    a.cfg = b.cfg = cfg;
    a.params = sn::build(cfg.model, cfg.seed);
    b.params = sn::build(cfg.model, cfg.seed);
    for (int i = 0; i < 3; ++i) {
        tr::train_step(a, {&s});
        tr::train_step(b, {&s});
    }
    std::map<std::string, const Tensor*> ta;
    sn::visit_params(a.params, [&](const std::string& n, const Tensor& t, bool) { ta[n] = &t; });
    sn::visit_params(b.params, [&](const std::string& n, const Tensor& t, bool) {
        EXPECT_TRUE(t == *ta[n]) << n;
    });
}

TEST(Trainer, NonFiniteLossAborts) {
    tr::TrainConfig cfg = tiny_train_cfg();
    tr::EncodedSample s = make_sample(cfg, 5);
    s.z_r0[0] = std::numeric_limits<double>::quiet_NaN();
    tr::TrainState st;
    st.cfg = cfg;
    st.params = sn::build(cfg.model, cfg.seed);
    try {
        tr::train_step(st, {&s});
        FAIL() << "expected non-finite abort";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Trainer, BranchIsolation) {
    // Depth-loss gradients stay off the rgb branch and vice versa; both reach
    // the shared trunk.
    tr::TrainConfig cfg = tiny_train_cfg();
    sn::ModelParams params = sn::build(cfg.model, cfg.seed);
    // Jitter the heads so gradients flow into the trunk.
    for (Tensor* t : {&params.head_rgb.W, &params.head_dep.W})
        for (int64_t i = 0; i < t->numel(); ++i)
            (*t)[i] = 0.05 * rng::gaussian(3, rng::Stream::Init, 900, static_cast<uint64_t>(i));
    const tr::EncodedSample s = make_sample(cfg, 6);
    const double t = 0.5;
    Tensor eps_r = rng::gaussian_tensor(s.z_r0.shape(), 2, rng::Stream::NoiseRgb, 1);
    Tensor eps_d = rng::gaussian_tensor(s.d_r0.shape(), 2, rng::Stream::NoiseDep, 1);

    auto grads_for = [&](bool depth_loss) {
        ad::Tape tape;
        sn::BoundModel m = sn::bind_params(tape, params, true);
        auto zl = tape.constant(s.z_l);
        auto zr = tape.constant(flowmatch::interpolate(s.z_r0, eps_r, t));
        auto dr = tape.constant(flowmatch::interpolate(s.d_r0, eps_d, t));
        sn::ForwardRefs f = sn::forward_bound(tape, m, zl, zr, dr, t);
        Tensor mask(s.z_r0.shape(), 1.0);
        auto loss = depth_loss ? tape.mse_masked(f.v_dep, flowmatch::cfm_target(s.d_r0, eps_d), mask)
                               : tape.mse_masked(f.v_rgb, flowmatch::cfm_target(s.z_r0, eps_r), mask);
        tape.backward(loss);
        std::map<std::string, double> norms;
        for (const auto& b : m.bindings) {
            double n = 0.0;
            if (tape.has_grad(b.ref)) {
                const Tensor& g = tape.grad(b.ref);
                for (int64_t i = 0; i < g.numel(); ++i) n += g[i] * g[i];
            }
            norms[b.name] = n;
        }
        return norms;
    };
    const auto dep_norms = grads_for(true);
    const auto rgb_norms = grads_for(false);
    double dep_on_rgb = 0.0, dep_on_trunk = 0.0, rgb_on_dep = 0.0, rgb_on_trunk = 0.0;
    for (const auto& [name, n] : dep_norms) {
        if (name.rfind("rgb.", 0) == 0 || name.rfind("head_rgb", 0) == 0 ||
            name.rfind("ln_rgb", 0) == 0)
            dep_on_rgb += n;
        if (name.rfind("shared.", 0) == 0) dep_on_trunk += n;
    }
    for (const auto& [name, n] : rgb_norms) {
        if (name.rfind("depth.", 0) == 0 || name.rfind("head_dep", 0) == 0 ||
            name.rfind("ln_dep", 0) == 0)
            rgb_on_dep += n;
        if (name.rfind("shared.", 0) == 0) rgb_on_trunk += n;
    }
    EXPECT_EQ(dep_on_rgb, 0.0);
    EXPECT_EQ(rgb_on_dep, 0.0);
    EXPECT_GT(dep_on_trunk, 0.0);
    EXPECT_GT(rgb_on_trunk, 0.0);
}

TEST(Trainer, SmokeOverfitLossDecreases) {
    tr::TrainConfig cfg = tiny_train_cfg(31);
    cfg.steps = 120;
    cfg.warmup_steps = 10;
    const std::string data = tmp_dir("smoke_data");
    scenegen::SpecRanges r;
    r.width = 16;
    r.height = 8;
    r.frames = 2;
    r.d_max = 2.0;
    scenegen::write_dataset(1, r, 3, data);
    const std::string out = tmp_dir("smoke_out");
    tr::fit(cfg, data, out);
    // Compare mean of first and last 10 logged losses.
    std::ifstream csv(out + "/loss.csv");
    std::string line;
    std::getline(csv, line);
    std::vector<double> losses;
    while (std::getline(csv, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        losses.push_back(std::stod(line.substr(c1 + 1, c2 - c1 - 1)));
    }
    ASSERT_EQ(losses.size(), 120u);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
        head += losses[static_cast<size_t>(i)];
        tail += losses[losses.size() - 1 - static_cast<size_t>(i)];
    }
    EXPECT_LT(tail, head);
}

TEST(Trainer, ResumeReproducesBitExactWeights) {
    tr::TrainConfig cfg = tiny_train_cfg(41);
    const std::string data = tmp_dir("resume_data");
    scenegen::SpecRanges r;
    r.width = 16;
    r.height = 8;
    r.frames = 2;
    r.d_max = 2.0;
    scenegen::write_dataset(2, r, 11, data);

    tr::TrainConfig six = cfg;
    six.steps = 6;
    const std::string full_out = tmp_dir("resume_full");
    const std::string full_ckpt = tr::fit(six, data, full_out);

    tr::TrainConfig three = cfg;
    three.steps = 3;
    const std::string half_out = tmp_dir("resume_half");
    const std::string half_ckpt = tr::fit(three, data, half_out);
    const std::string resumed_out = tmp_dir("resume_cont");
    const std::string resumed_ckpt = tr::fit(six, data, resumed_out, half_ckpt);

    Json ea, eb;
    sn::ModelParams pa = sn::load_checkpoint(full_ckpt, &ea);
    sn::ModelParams pb = sn::load_checkpoint(resumed_ckpt, &eb);
    std::map<std::string, const Tensor*> ta;
    sn::visit_params(pa, [&](const std::string& n, const Tensor& t, bool) { ta[n] = &t; });
    sn::visit_params(pb, [&](const std::string& n, const Tensor& t, bool) {
        EXPECT_TRUE(t == *ta[n]) << n;
    });
    EXPECT_EQ(ea.at("step").get<int>(), 6);
    EXPECT_EQ(eb.at("step").get<int>(), 6);
}

TEST(Trainer, EmptyManifestErrors) {
    const std::string data = tmp_dir("empty");
    Manifest m;
    m.save(data + "/manifest.json");
    tr::TrainConfig cfg = tiny_train_cfg();
    EXPECT_THROW(tr::fit(cfg, data, tmp_dir("empty_out")), std::invalid_argument);
}

TEST(Trainer, CheckpointFilesUseTensorFormat) {
    tr::TrainConfig cfg = tiny_train_cfg(51);
    cfg.steps = 2;
    const std::string data = tmp_dir("fmt_data");
    scenegen::SpecRanges r;
    r.width = 16;
    r.height = 8;
    r.frames = 2;
    r.d_max = 2.0;
    scenegen::write_dataset(1, r, 1, data);
    const std::string ckpt = tr::fit(cfg, data, tmp_dir("fmt_out"));
    // Every weight file parses as an f64 STW1 tensor named by the JSON index.
    std::ifstream f(ckpt + "/index.json");
    Json index;
    f >> index;
    int checked = 0;
    for (const auto& [name, entry] : index.at("tensors").items()) {
        io::DType dt;
        const Tensor t = io::read_tensor(ckpt + "/" + entry.at("file").get<std::string>(), &dt);
        EXPECT_EQ(dt, io::DType::F64) << name;
        EXPECT_EQ(t.shape(), entry.at("shape").get<std::vector<int64_t>>()) << name;
        ++checked;
    }
    EXPECT_GT(checked, 20);
}
