#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "stereoworld/codec.hpp"
#include "stereoworld/flowmatch.hpp"
#include "stereoworld/geometry.hpp"
#include "stereoworld/manifest.hpp"
#include "stereoworld/rng.hpp"
#include "stereoworld/scenegen.hpp"
#include "stereoworld/stereonet.hpp"

namespace stw::trainer {

// Composes the joint objective L = L_rgb + L_dep + lambda_dis * L_dis over
// the flow-matching targets, with the clean-frame replacement trick, AdamW
// updates, checkpoint/resume, and finite-difference gradient verification.
// All randomness is counter-based on (seed, stream, step, slot), so resume
// reproduces the exact trajectory and parallel prefetch cannot perturb it.

struct TrainConfig {
    double lambda1 = 0.1;
    double lambda_l1 = 0.1;
    double lambda_dis = 0.5;
    double lr = 1e-4;
    double weight_decay = 0.0;
    int steps = 2000;
    int batch = 1;
    double replace_p = 0.3;
    int replace_k = 2;
    uint64_t seed = 0;
    int lora_rank = 0;  // 0 = full fine-tune
    double depth_dropout = 0.1;
    bool noise_left = false;     // ablation harness: noise the conditioning latents
    double dis_t_max = 1.0;      // apply L_dis only for t <= dis_t_max
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    int warmup_steps = 0;
    int log_every = 10;
    int ckpt_every = 0;  // 0 = final checkpoint only
    stereonet::ModelConfig model;
    codec::CodecConfig codec;
    geometry::ProjectorConfig projector;
};

inline void validate(const TrainConfig& cfg) {
    require(cfg.lambda1 >= 0.0 && cfg.lambda_l1 >= 0.0 && cfg.lambda_dis >= 0.0,
            "trainer: loss weights must be >= 0");
    require(cfg.replace_p >= 0.0 && cfg.replace_p <= 1.0, "trainer: replace_p outside [0,1]");
    require(cfg.steps >= 0 && cfg.batch >= 1, "trainer: bad steps/batch");
    require(cfg.lr > 0.0, "trainer: lr must be > 0");
}

// ---- data ------------------------------------------------------------------

struct EncodedSample {
    Tensor z_l, z_r0, d_r0;  // latents
    Tensor disp_gt;          // (f,h,w) pixels
    Tensor occ;              // (f,h,w) 0/1
};

inline EncodedSample encode_sample(const scenegen::StereoSample& s, const codec::CodecConfig& cc) {
    EncodedSample e;
    e.z_l = codec::encode(s.left, cc);
    e.z_r0 = codec::encode(s.right, cc);
    e.d_r0 = codec::encode(codec::replicate_channels(s.depth_r, cc.channels_in), cc);
    e.disp_gt = s.disp_gt;
    e.occ = s.occ_mask;
    return e;
}

// ---- frame replacement -------------------------------------------------------

// With probability p (counter-based coin), the first k latent frames of the
// noisy pair are overwritten with the clean latents; returns the per-frame
// loss mask (replaced frames carry no prediction task).
inline Tensor apply_frame_replacement(Tensor& z_r_t, Tensor& d_r_t, const Tensor& z_r0,
                                      const Tensor& d_r0, double p, int k, uint64_t seed,
                                      uint64_t draw_key) {
    const int64_t fp = z_r_t.dim(1);
    require(k < fp, "trainer: replace_k must be < latent frame count");
    Tensor frame_mask({fp}, 1.0);
    const bool fire = rng::uniform(seed, rng::Stream::Replace, draw_key) < p;
    if (!fire || k <= 0) return frame_mask;
    auto overwrite = [k](Tensor& dst, const Tensor& src) {
        if (dst.numel() == 0) return;
        const int64_t C = dst.dim(0), F = dst.dim(1), HW = dst.dim(2) * dst.dim(3);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t f = 0; f < k; ++f)
                for (int64_t i = 0; i < HW; ++i)
                    dst[(c * F + f) * HW + i] = src[(c * F + f) * HW + i];
    };
    overwrite(z_r_t, z_r0);
    overwrite(d_r_t, d_r0);
    for (int f = 0; f < k; ++f) frame_mask[f] = 0.0;
    return frame_mask;
}

// ---- loss -----------------------------------------------------------------------

struct LossParts {
    double total = 0.0, rgb = 0.0, dep = 0.0, dis = 0.0;
};

namespace detail {

inline Tensor broadcast_frame_mask(const Tensor& frame_mask, const std::vector<int64_t>& shape) {
    Tensor m(shape);
    const int64_t C = shape[0], F = shape[1], HW = shape[2] * shape[3];
    for (int64_t c = 0; c < C; ++c)
        for (int64_t f = 0; f < F; ++f) {
            const double v = frame_mask[f];
            for (int64_t i = 0; i < HW; ++i) m[(c * F + f) * HW + i] = v;
        }
    return m;
}

}  // namespace detail

// Per-sample stochastic draws, all pure functions of (seed, step, slot).
struct SampleDraws {
    double t = 0.5;
    uint64_t noise_key = 0;
    bool drop_depth = false;
};

inline SampleDraws make_draws(const TrainConfig& cfg, int64_t step, int slot) {
    SampleDraws d;
    const uint64_t key = static_cast<uint64_t>(step) * 1024 + static_cast<uint64_t>(slot);
    d.t = rng::uniform(cfg.seed, rng::Stream::Time, key);
    d.noise_key = key;
    d.drop_depth = rng::uniform(cfg.seed, rng::Stream::Dropout, key) < cfg.depth_dropout;
    return d;
}

// Builds the full training graph for one sample on the tape and returns the
// component values plus the scalar loss ref.
inline LossParts total_loss_build(ad::Tape& tape, const stereonet::BoundModel& m,
                                  const TrainConfig& cfg, const EncodedSample& s,
                                  const SampleDraws& draws, ad::Tape::Ref* loss_out) {
    using Ref = ad::Tape::Ref;
    const double t = draws.t;
    Tensor eps_r = rng::gaussian_tensor(s.z_r0.shape(), cfg.seed, rng::Stream::NoiseRgb,
                                        draws.noise_key);
    Tensor eps_d = rng::gaussian_tensor(s.d_r0.shape(), cfg.seed, rng::Stream::NoiseDep,
                                        draws.noise_key);
    Tensor z_r_t = flowmatch::interpolate(s.z_r0, eps_r, t);
    Tensor d_r_t = flowmatch::interpolate(s.d_r0, eps_d, t);
    Tensor frame_mask = apply_frame_replacement(z_r_t, d_r_t, s.z_r0, s.d_r0, cfg.replace_p,
                                                cfg.replace_k, cfg.seed, draws.noise_key);
    Tensor z_l = s.z_l;
    if (cfg.noise_left) {
        Tensor eps_l = rng::gaussian_tensor(s.z_l.shape(), cfg.seed, rng::Stream::NoiseLeft,
                                            draws.noise_key);
        z_l = flowmatch::interpolate(s.z_l, eps_l, t);
    }

    Ref zl = tape.constant(z_l);
    Ref zr = tape.constant(z_r_t);
    Ref dr = draws.drop_depth ? -1 : tape.constant(d_r_t);
    stereonet::ForwardRefs fwd = stereonet::forward_bound(tape, m, zl, zr, dr, t);

    const Tensor mask_latent = detail::broadcast_frame_mask(frame_mask, s.z_r0.shape());
    Ref l_rgb = tape.mse_masked(fwd.v_rgb, flowmatch::cfm_target(s.z_r0, eps_r), mask_latent);
    Ref l_dep = draws.drop_depth
                    ? tape.constant(Tensor::scalar(0.0))
                    : tape.mse_masked(fwd.v_dep, flowmatch::cfm_target(s.d_r0, eps_d), mask_latent);

    LossParts parts;
    Ref total = tape.add(l_rgb, l_dep);
    Ref l_dis = -1;
    if (cfg.lambda_dis > 0.0 && t <= cfg.dis_t_max) {
        // L_dis acts on the denoised prediction z0_hat = z_t - t * v.
        Ref zhat = tape.sub(zr, tape.scale(fwd.v_rgb, t));
        Ref bpred = geometry::project_disparity_op(tape, zl, zhat, cfg.projector, cfg.codec);
        Tensor valid = geometry::valid_mask_pixel(s.z_r0.dim(1), s.z_r0.dim(2), s.z_r0.dim(3),
                                                  cfg.projector, cfg.codec);
        require_same_shape(valid, s.disp_gt, "trainer: disparity GT shape mismatch");
        // Supervise only where stereo correspondence exists (unoccluded) and
        // outside replaced frames.
        for (int64_t i = 0; i < valid.numel(); ++i) valid[i] *= s.occ[i];
        const int64_t HW = valid.dim(1) * valid.dim(2);
        for (int64_t f = 0; f < valid.dim(0); ++f) {
            const double fm = frame_mask[f / cfg.codec.patch_t];
            if (fm == 0.0)
                for (int64_t i = 0; i < HW; ++i) valid[f * HW + i] = 0.0;
        }
        geometry::DispLossRefs dl = geometry::disparity_loss_op(
            tape, bpred, s.disp_gt, valid, cfg.lambda1, cfg.lambda_l1,
            cfg.projector.min_disp_floor);
        l_dis = dl.total;
        total = tape.add(total, tape.scale(l_dis, cfg.lambda_dis));
    }
    parts.rgb = tape.val(l_rgb)[0];
    parts.dep = tape.val(l_dep)[0];
    parts.dis = l_dis >= 0 ? tape.val(l_dis)[0] : 0.0;
    parts.total = tape.val(total)[0];
    if (loss_out) *loss_out = total;
    return parts;
}

// Forward-only evaluation (used by finite differences and tests).
inline LossParts total_loss(stereonet::ModelParams& params, const TrainConfig& cfg,
                            const EncodedSample& s, const SampleDraws& draws) {
    ad::Tape tape;
    stereonet::BoundModel m = stereonet::bind_params(tape, params, false);
    return total_loss_build(tape, m, cfg, s, draws, nullptr);
}

// ---- optimizer --------------------------------------------------------------------

struct OptState {
    std::map<std::string, Tensor> m, v;
    int64_t step = 0;
};

struct TrainState {
    stereonet::ModelParams params;
    OptState opt;
    TrainConfig cfg;
};

struct StepLog {
    LossParts loss;
    double wall_ms = 0.0;
    double lr = 0.0;
};

// One AdamW update (decoupled weight decay) over the trainable bindings.
inline void adamw_apply(ad::Tape& tape, const std::vector<stereonet::Binding>& bindings,
                        OptState& opt, const TrainConfig& cfg) {
    opt.step += 1;
    const double warm = cfg.warmup_steps > 0
                            ? std::min(1.0, static_cast<double>(opt.step) /
                                                static_cast<double>(cfg.warmup_steps))
                            : 1.0;
    const double lr = cfg.lr * warm;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (const auto& b : bindings) {
        if (!b.trainable || !tape.has_grad(b.ref)) continue;
        const Tensor& g = tape.grad(b.ref);
        Tensor& m = opt.m.try_emplace(b.name, Tensor(b.tensor->shape())).first->second;
        Tensor& v = opt.v.try_emplace(b.name, Tensor(b.tensor->shape())).first->second;
        Tensor& w = *b.tensor;
        for (int64_t i = 0; i < w.numel(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * w[i]);
        }
    }
}

// One optimizer step on the batch-averaged total loss.
inline StepLog train_step(TrainState& st, const std::vector<const EncodedSample*>& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    ad::Tape tape;
    stereonet::BoundModel m = stereonet::bind_params(tape, st.params, true);
    using Ref = ad::Tape::Ref;
    Ref total = -1;
    LossParts acc;
    for (size_t slot = 0; slot < batch.size(); ++slot) {
        const SampleDraws draws = make_draws(st.cfg, st.opt.step, static_cast<int>(slot));
        Ref li = -1;
        LossParts p = total_loss_build(tape, m, st.cfg, *batch[slot], draws, &li);
        acc.total += p.total;
        acc.rgb += p.rgb;
        acc.dep += p.dep;
        acc.dis += p.dis;
        total = total < 0 ? li : tape.add(total, li);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    total = tape.scale(total, inv);
    acc.total *= inv;
    acc.rgb *= inv;
    acc.dep *= inv;
    acc.dis *= inv;
    if (!std::isfinite(acc.total)) {
        throw std::runtime_error(
            "trainer: non-finite loss at step " + std::to_string(st.opt.step) +
            " (L=" + std::to_string(acc.total) + " rgb=" + std::to_string(acc.rgb) +
            " dep=" + std::to_string(acc.dep) + " dis=" + std::to_string(acc.dis) + ")");
    }
    tape.backward(total);
    adamw_apply(tape, m.bindings, st.opt, st.cfg);
    StepLog log;
    log.loss = acc;
    log.lr = st.cfg.lr;
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    return log;
}

// ---- checkpoint + fit -----------------------------------------------------------

inline void save_train_state(const TrainState& st, const std::string& dir) {
    stereonet::save_checkpoint(st.params, dir,
                               Json{{"step", st.opt.step}, {"codec",
                                    Json{{"patch_t", st.cfg.codec.patch_t},
                                         {"patch_h", st.cfg.codec.patch_h},
                                         {"patch_w", st.cfg.codec.patch_w},
                                         {"channels_in", st.cfg.codec.channels_in}}}});
    namespace fs = std::filesystem;
    const std::string odir = dir + "/optim";
    std::error_code ec;
    fs::create_directories(odir, ec);
    Json names = Json::array();
    int i = 0;
    for (const auto& [name, t] : st.opt.m) {
        char mf[32], vf[32];
        std::snprintf(mf, sizeof(mf), "m%04d.stw", i);
        std::snprintf(vf, sizeof(vf), "v%04d.stw", i);
        io::write_tensor(odir + "/" + mf, t, io::DType::F64);
        io::write_tensor(odir + "/" + vf, st.opt.v.at(name), io::DType::F64);
        names.push_back(name);
        ++i;
    }
    std::ofstream f(odir + "/optim.json", std::ios::trunc);
    f << Json{{"step", st.opt.step}, {"names", names}}.dump(2) << "\n";
}

inline void load_train_state(TrainState& st, const std::string& dir) {
    Json extra;
    st.params = stereonet::load_checkpoint(dir, &extra);
    std::ifstream f(dir + "/optim/optim.json");
    if (!f) throw std::runtime_error("trainer: missing optimizer state in " + dir);
    Json oj;
    f >> oj;
    st.opt.step = oj.at("step").get<int64_t>();
    st.opt.m.clear();
    st.opt.v.clear();
    int i = 0;
    for (const auto& name : oj.at("names")) {
        char mf[32], vf[32];
        std::snprintf(mf, sizeof(mf), "m%04d.stw", i);
        std::snprintf(vf, sizeof(vf), "v%04d.stw", i);
        st.opt.m[name.get<std::string>()] = io::read_tensor(dir + "/optim/" + mf);
        st.opt.v[name.get<std::string>()] = io::read_tensor(dir + "/optim/" + vf);
        ++i;
    }
}

inline std::vector<EncodedSample> load_dataset(const std::string& data_dir,
                                               const codec::CodecConfig& cc) {
    const Manifest m = Manifest::load(data_dir + "/manifest.json");
    if (m.clips.empty()) throw std::invalid_argument("trainer: empty manifest in " + data_dir);
    std::vector<EncodedSample> out;
    for (const auto& clip : m.clips)
        out.push_back(encode_sample(scenegen::load_sample(data_dir, clip), cc));
    return out;
}

// Runs the training loop; emits loss.csv and periodic + final checkpoints.
// Returns the final checkpoint path.
inline std::string fit(const TrainConfig& cfg_in, const std::string& data_dir,
                       const std::string& out_dir, const std::string& resume_ckpt = "") {
    TrainConfig cfg = cfg_in;
    validate(cfg);
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("trainer: cannot create " + out_dir + ": " + ec.message());

    const std::vector<EncodedSample> data = load_dataset(data_dir, cfg.codec);

    TrainState st;
    st.cfg = cfg;
    if (resume_ckpt.empty()) {
        st.params = stereonet::build(cfg.model, cfg.seed);
        if (cfg.lora_rank > 0)
            st.params = stereonet::wrap_low_rank(std::move(st.params), cfg.lora_rank, cfg.seed);
    } else {
        load_train_state(st, resume_ckpt);
    }

    const std::string csv_path = out_dir + "/loss.csv";
    std::ofstream csv(csv_path, st.opt.step > 0 ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::runtime_error("trainer: cannot open " + csv_path);
    if (st.opt.step == 0) csv << "step,L,L_rgb,L_dep,L_dis,wall_ms\n";

    const int n = static_cast<int>(data.size());
    while (st.opt.step < cfg.steps) {
        std::vector<const EncodedSample*> batch;
        for (int slot = 0; slot < cfg.batch; ++slot) {
            const int64_t pick = rng::uniform_int(cfg.seed, rng::Stream::DataOrder, 0, n - 1,
                                                  static_cast<uint64_t>(st.opt.step),
                                                  static_cast<uint64_t>(slot));
            batch.push_back(&data[static_cast<size_t>(pick)]);
        }
        const StepLog log = train_step(st, batch);
        csv << st.opt.step << "," << log.loss.total << "," << log.loss.rgb << ","
            << log.loss.dep << "," << log.loss.dis << "," << log.wall_ms << "\n";
        if (cfg.log_every > 0 && st.opt.step % cfg.log_every == 0) {
            std::cout << "[train] step " << st.opt.step << " L=" << log.loss.total
                      << " rgb=" << log.loss.rgb << " dep=" << log.loss.dep
                      << " dis=" << log.loss.dis << "\n";
            csv.flush();
        }
        if (cfg.ckpt_every > 0 && st.opt.step % cfg.ckpt_every == 0 &&
            st.opt.step < cfg.steps) {
            char name[48];
            std::snprintf(name, sizeof(name), "ckpt_step%06lld",
                          static_cast<long long>(st.opt.step));
            save_train_state(st, out_dir + "/" + name);
        }
    }
    const std::string final_dir = out_dir + "/ckpt_final";
    save_train_state(st, final_dir);
    return final_dir;
}

// ---- gradient verification ---------------------------------------------------------

// Max relative error between analytic gradients and central finite
// differences. The floor keeps the comparison absolute for entries whose
// gradient is below central-difference resolution (~1e-9 here), where a
// relative quotient would only measure FD noise.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

inline double grad_check_disparity_loss(uint64_t seed = 11) {
    const int64_t F = 2, H = 5, W = 6;
    Tensor b_pred({F, H, W}), b_gt({F, H, W}), valid({F, H, W}, 1.0);
    for (int64_t i = 0; i < b_pred.numel(); ++i) {
        b_pred[i] = 1.0 + 3.0 * rng::uniform(seed, rng::Stream::Init, 1, static_cast<uint64_t>(i));
        b_gt[i] = 1.0 + 3.0 * rng::uniform(seed, rng::Stream::Init, 2, static_cast<uint64_t>(i));
    }
    const double l1 = 0.1, ll1 = 0.1, floor = 0.5;
    ad::Tape tape;
    ad::Tape::Ref bp = tape.leaf(b_pred, true);
    geometry::DispLossRefs dl = geometry::disparity_loss_op(tape, bp, b_gt, valid, l1, ll1, floor);
    tape.backward(dl.total);
    const Tensor& g = tape.grad(bp);
    double worst = 0.0;
    const double h = 1e-6;
    for (int64_t i = 0; i < b_pred.numel(); ++i) {
        Tensor p = b_pred;
        p[i] += h;
        const double up = geometry::disparity_loss(p, b_gt, valid, l1, ll1, floor).total;
        p[i] -= 2.0 * h;
        const double dn = geometry::disparity_loss(p, b_gt, valid, l1, ll1, floor).total;
        worst = std::max(worst, rel_err(g[i], (up - dn) / (2.0 * h)));
    }
    return worst;
}

inline double grad_check_projector(double tau, uint64_t seed = 13) {
    codec::CodecConfig cc;
    cc.channels_in = 3;
    geometry::ProjectorConfig pc;
    pc.s_max = 2;
    pc.tau = tau;
    const int64_t C = 12, F = 2, Hl = 3, Wl = 6;
    Tensor z_l({C, F, Hl, Wl}), z_r({C, F, Hl, Wl});
    rng::fill_gaussian(z_l, seed, rng::Stream::Init, 3);
    rng::fill_gaussian(z_r, seed, rng::Stream::Init, 4);
    // Keep affinity gaps comparable to the temperature so small-tau checks
    // exercise unsaturated softmax regions.
    for (int64_t i = 0; i < z_l.numel(); ++i) {
        z_l[i] *= 0.2;
        z_r[i] *= 0.2;
    }
    Tensor cot({F * cc.patch_t, Hl * cc.patch_h, Wl * cc.patch_w});
    rng::fill_gaussian(cot, seed, rng::Stream::Init, 5);

    ad::Tape tape;
    ad::Tape::Ref zl = tape.leaf(z_l, true);
    ad::Tape::Ref zr = tape.leaf(z_r, true);
    ad::Tape::Ref d = geometry::project_disparity_op(tape, zl, zr, pc, cc);
    tape.backward(tape.sum_weighted(d, cot));
    const Tensor& gl = tape.grad(zl);
    const Tensor& gr = tape.grad(zr);

    auto eval = [&](const Tensor& a, const Tensor& b) {
        const Tensor px = geometry::upsample_disparity(geometry::project_disparity_latent(a, b, pc), cc);
        double s = 0.0;
        for (int64_t i = 0; i < px.numel(); ++i) s += cot[i] * px[i];
        return s;
    };
    double worst = 0.0;
    const double h = 1e-6;
    for (int64_t i = 0; i < z_l.numel(); ++i) {
        Tensor a = z_l;
        a[i] += h;
        const double up = eval(a, z_r);
        a[i] -= 2.0 * h;
        const double dn = eval(a, z_r);
        worst = std::max(worst, rel_err(gl[i], (up - dn) / (2.0 * h)));
        Tensor b = z_r;
        b[i] += h;
        const double up2 = eval(z_l, b);
        b[i] -= 2.0 * h;
        const double dn2 = eval(z_l, b);
        worst = std::max(worst, rel_err(gr[i], (up2 - dn2) / (2.0 * h)));
    }
    return worst;
}

// Tiny end-to-end model; finite differences across every parameter scalar.
inline double grad_check_total_loss(uint64_t seed = 17) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.replace_p = 0.0;
    cfg.replace_k = 0;
    cfg.depth_dropout = 0.0;
    cfg.codec = codec::CodecConfig{1, 2, 2, 3};
    cfg.projector.s_max = 2;
    cfg.projector.tau = 0.1;
    cfg.model.token_dim = 12;
    cfg.model.num_heads = 2;
    cfg.model.n_shared_blocks = 1;
    cfg.model.n_branch_blocks = 1;
    cfg.model.patch_h = 2;
    cfg.model.patch_w = 2;
    cfg.model.max_frames = 2;
    cfg.model.max_tokens_y = 2;
    cfg.model.max_tokens_x = 2;
    cfg.model.latent_channels = 12;
    cfg.model.mlp_mult = 2;
    cfg.model.time_features = 4;

    scenegen::SceneSpec spec;
    spec.frames = 2;
    spec.width = 8;
    spec.height = 8;
    spec.d_max = 1.0;
    spec.bf = 2.0;
    scenegen::Layer bg;
    bg.depth = std::numeric_limits<double>::infinity();
    bg.disparity = 0.0;
    bg.tex_seed = 5;
    bg.x0 = -4;
    bg.y0 = -4;
    bg.w = 20;
    bg.h = 20;
    scenegen::Layer fg;
    fg.depth = 2.0;
    fg.disparity = 1.0;
    fg.tex_seed = 9;
    fg.pattern = scenegen::Pattern::Noise;
    fg.x0 = 2;
    fg.y0 = 2;
    fg.w = 4;
    fg.h = 4;
    spec.layers = {bg, fg};
    const EncodedSample s = encode_sample(scenegen::render_clip(spec), cfg.codec);

    stereonet::ModelParams params = stereonet::build(cfg.model, seed);
    // Zero-initialized output heads would block gradient flow into the trunk
    // at step 0; jitter every tensor so the check covers the full graph.
    {
        uint64_t slot = 0;
        stereonet::visit_params(params, [&](const std::string&, Tensor& t, bool) {
            for (int64_t i = 0; i < t.numel(); ++i)
                t[i] += 0.05 * rng::gaussian(seed, rng::Stream::Init, 5000 + slot,
                                             static_cast<uint64_t>(i));
            ++slot;
        });
    }
    SampleDraws draws;
    draws.t = 0.6;
    draws.noise_key = 7;
    draws.drop_depth = false;

    ad::Tape tape;
    stereonet::BoundModel m = stereonet::bind_params(tape, params, true);
    ad::Tape::Ref loss = -1;
    total_loss_build(tape, m, cfg, s, draws, &loss);
    tape.backward(loss);

    double worst = 0.0;
    const double h = 1e-5;
    for (const auto& b : m.bindings) {
        if (!b.trainable) continue;
        Tensor g(b.tensor->shape());
        if (tape.has_grad(b.ref)) g = tape.grad(b.ref);
        for (int64_t i = 0; i < b.tensor->numel(); ++i) {
            const double orig = (*b.tensor)[i];
            (*b.tensor)[i] = orig + h;
            const double up = total_loss(params, cfg, s, draws).total;
            (*b.tensor)[i] = orig - h;
            const double dn = total_loss(params, cfg, s, draws).total;
            (*b.tensor)[i] = orig;
            worst = std::max(worst, rel_err(g[i], (up - dn) / (2.0 * h)));
        }
    }
    return worst;
}

}  // namespace stw::trainer
