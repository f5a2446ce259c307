#pragma once

#include <cmath>
#include <limits>

#include "stereoworld/autodiff.hpp"
#include "stereoworld/codec.hpp"
#include "stereoworld/tensor.hpp"

namespace stw::geometry {

// Parameter-free differentiable stereo projector: per latent location, a
// one-sided cost volume over candidate shifts s in [0, s_max] followed by a
// temperature soft-argmin. Latent disparities scale by the codec's patch_w
// into pixel units. The projector is a pure function of the two latents, so
// the disparity loss differentiates cleanly back into the generated latent.

struct ProjectorConfig {
    int s_max = 3;
    double tau = 0.1;
    enum class Cost { NegL2, Correlation } cost = Cost::NegL2;
    double min_disp_floor = 0.5;  // pixels; log-domain clamp
};

struct DisparityMap {
    Tensor values;  // (f, h, w)
    Tensor valid;   // (f, h, w), 0/1
    enum class Space { Latent, Pixel } space = Space::Pixel;
};

inline void validate(const ProjectorConfig& cfg, int64_t w_latent) {
    require(cfg.s_max >= 1, "geometry: s_max must be >= 1");
    require(cfg.tau > 0.0, "geometry: tau must be > 0");
    if (cfg.s_max >= w_latent)
        throw std::invalid_argument("geometry: s_max >= latent width");
}

namespace detail {

inline double affinity(const Tensor& z_l, const Tensor& z_r, int64_t f, int64_t y, int64_t x,
                       int64_t xs, ProjectorConfig::Cost cost) {
    const int64_t c = z_l.dim(0);
    double a = 0.0;
    if (cost == ProjectorConfig::Cost::NegL2) {
        for (int64_t ci = 0; ci < c; ++ci) {
            const double d = z_l.at(ci, f, y, x) - z_r.at(ci, f, y, xs);
            a -= d * d;
        }
    } else {
        for (int64_t ci = 0; ci < c; ++ci) a += z_l.at(ci, f, y, x) * z_r.at(ci, f, y, xs);
    }
    return a;
}

}  // namespace detail

// Soft-argmin disparity in latent columns. Out-of-range shifts are excluded
// from the softmax (the -inf affinity convention).
inline Tensor project_disparity_latent(const Tensor& z_l, const Tensor& z_r,
                                       const ProjectorConfig& cfg) {
    require_same_shape(z_l, z_r, "geometry.project_disparity");
    require(z_l.rank() == 4, "geometry.project_disparity: latents must be rank-4");
    validate(cfg, z_l.dim(3));
    const int64_t F = z_l.dim(1), H = z_l.dim(2), W = z_l.dim(3);
    Tensor disp({F, H, W});
    std::vector<double> w(static_cast<size_t>(cfg.s_max) + 1);
    for (int64_t f = 0; f < F; ++f)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const int64_t smax = std::min<int64_t>(cfg.s_max, x);
                double amax = -std::numeric_limits<double>::infinity();
                for (int64_t s = 0; s <= smax; ++s) {
                    w[static_cast<size_t>(s)] =
                        detail::affinity(z_l, z_r, f, y, x, x - s, cfg.cost) / cfg.tau;
                    amax = std::max(amax, w[static_cast<size_t>(s)]);
                }
                double norm = 0.0, acc = 0.0;
                for (int64_t s = 0; s <= smax; ++s) {
                    const double e = std::exp(w[static_cast<size_t>(s)] - amax);
                    norm += e;
                    acc += static_cast<double>(s) * e;
                }
                disp.at(f, y, x) = acc / norm;
            }
    return disp;
}

// Analytic vector-Jacobian product of project_disparity_latent.
// d_disp is the cotangent on the latent-space disparity map.
inline void project_disparity_latent_vjp(const Tensor& z_l, const Tensor& z_r,
                                         const ProjectorConfig& cfg, const Tensor& d_disp,
                                         Tensor* dz_l, Tensor* dz_r) {
    const int64_t C = z_l.dim(0), F = z_l.dim(1), H = z_l.dim(2), W = z_l.dim(3);
    std::vector<double> w(static_cast<size_t>(cfg.s_max) + 1);
    for (int64_t f = 0; f < F; ++f)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const double g = d_disp.at(f, y, x);
                if (g == 0.0) continue;
                const int64_t smax = std::min<int64_t>(cfg.s_max, x);
                double amax = -std::numeric_limits<double>::infinity();
                for (int64_t s = 0; s <= smax; ++s) {
                    w[static_cast<size_t>(s)] =
                        detail::affinity(z_l, z_r, f, y, x, x - s, cfg.cost) / cfg.tau;
                    amax = std::max(amax, w[static_cast<size_t>(s)]);
                }
                double norm = 0.0, mean_s = 0.0;
                for (int64_t s = 0; s <= smax; ++s) {
                    const double e = std::exp(w[static_cast<size_t>(s)] - amax);
                    w[static_cast<size_t>(s)] = e;
                    norm += e;
                    mean_s += static_cast<double>(s) * e;
                }
                mean_s /= norm;
                for (int64_t s = 0; s <= smax; ++s) {
                    const double p = w[static_cast<size_t>(s)] / norm;
                    // d disp / d a_s = p_s (s - mean_s) / tau
                    const double da = g * p * (static_cast<double>(s) - mean_s) / cfg.tau;
                    if (da == 0.0) continue;
                    for (int64_t ci = 0; ci < C; ++ci) {
                        if (cfg.cost == ProjectorConfig::Cost::NegL2) {
                            const double diff = z_l.at(ci, f, y, x) - z_r.at(ci, f, y, x - s);
                            if (dz_l) dz_l->at(ci, f, y, x) += da * (-2.0 * diff);
                            if (dz_r) dz_r->at(ci, f, y, x - s) += da * (2.0 * diff);
                        } else {
                            if (dz_l) dz_l->at(ci, f, y, x) += da * z_r.at(ci, f, y, x - s);
                            if (dz_r) dz_r->at(ci, f, y, x - s) += da * z_l.at(ci, f, y, x);
                        }
                    }
                }
            }
}

// Nearest-neighbor upsample of a latent-space map to pixel resolution,
// scaling values by patch_w to convert latent columns to pixels.
inline Tensor upsample_disparity(const Tensor& lat, const codec::CodecConfig& cc) {
    const int64_t F = lat.dim(0), H = lat.dim(1), W = lat.dim(2);
    Tensor px({F * cc.patch_t, H * cc.patch_h, W * cc.patch_w});
    for (int64_t f = 0; f < px.dim(0); ++f)
        for (int64_t y = 0; y < px.dim(1); ++y)
            for (int64_t x = 0; x < px.dim(2); ++x)
                px.at(f, y, x) = static_cast<double>(cc.patch_w) *
                                 lat.at(f / cc.patch_t, y / cc.patch_h, x / cc.patch_w);
    return px;
}

inline Tensor valid_mask_pixel(int64_t Fl, int64_t Hl, int64_t Wl, const ProjectorConfig& cfg,
                               const codec::CodecConfig& cc) {
    Tensor m({Fl * cc.patch_t, Hl * cc.patch_h, Wl * cc.patch_w});
    for (int64_t f = 0; f < m.dim(0); ++f)
        for (int64_t y = 0; y < m.dim(1); ++y)
            for (int64_t x = 0; x < m.dim(2); ++x)
                m.at(f, y, x) = (x / cc.patch_w) >= cfg.s_max ? 1.0 : 0.0;
    return m;
}

// Pixel-space projector output: soft-argmin, scaled by patch_w, upsampled
// nearest. Valid where the full shift window fits in-frame.
inline DisparityMap project_disparity(const Tensor& z_l, const Tensor& z_r,
                                      const ProjectorConfig& cfg, const codec::CodecConfig& cc) {
    DisparityMap out;
    out.values = upsample_disparity(project_disparity_latent(z_l, z_r, cfg), cc);
    out.valid = valid_mask_pixel(z_l.dim(1), z_l.dim(2), z_l.dim(3), cfg, cc);
    out.space = DisparityMap::Space::Pixel;
    return out;
}

// Exhaustive integer argmin oracle; ties break toward the smaller shift.
inline DisparityMap brute_force_disparity(const Tensor& z_l, const Tensor& z_r, int s_max,
                                          ProjectorConfig::Cost cost = ProjectorConfig::Cost::NegL2) {
    require_same_shape(z_l, z_r, "geometry.brute_force_disparity");
    require(z_l.rank() == 4, "geometry.brute_force_disparity: latents must be rank-4");
    if (s_max >= z_l.dim(3))
        throw std::invalid_argument("geometry: s_max >= latent width");
    const int64_t F = z_l.dim(1), H = z_l.dim(2), W = z_l.dim(3);
    DisparityMap out;
    out.values = Tensor({F, H, W});
    out.valid = Tensor({F, H, W});
    out.space = DisparityMap::Space::Latent;
    for (int64_t f = 0; f < F; ++f)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const int64_t smax = std::min<int64_t>(s_max, x);
                double best = -std::numeric_limits<double>::infinity();
                int64_t best_s = 0;
                for (int64_t s = 0; s <= smax; ++s) {
                    const double a = detail::affinity(z_l, z_r, f, y, x, x - s, cost);
                    if (a > best) {
                        best = a;
                        best_s = s;
                    }
                }
                out.values.at(f, y, x) = static_cast<double>(best_s);
                out.valid.at(f, y, x) = x >= s_max ? 1.0 : 0.0;
            }
    return out;
}

// ---- disparity loss --------------------------------------------------------

struct DispLossParts {
    double total = 0.0;
    double l_log = 0.0;
    double l_l1 = 0.0;
};

// L_dis = L_log + lambda_l1 * L_l1 with
//   L_log = E[d^2] - lambda1 (E[d])^2,  d = log b_pred - log b_gt (clamped),
//   L_l1  = E|b_pred - b_gt|,
// means taken over the valid mask.
inline DispLossParts disparity_loss(const Tensor& b_pred, const Tensor& b_gt,
                                    const Tensor& valid, double lambda1, double lambda_l1,
                                    double floor) {
    require_same_shape(b_pred, b_gt, "geometry.disparity_loss");
    require_same_shape(b_pred, valid, "geometry.disparity_loss mask");
    require(lambda1 >= 0.0 && lambda1 <= 1.0, "geometry.disparity_loss: lambda1 outside [0,1]");
    double n = 0.0, sum_d = 0.0, sum_d2 = 0.0, sum_abs = 0.0;
    for (int64_t i = 0; i < b_pred.numel(); ++i) {
        if (valid[i] == 0.0) continue;
        const double p = std::max(b_pred[i], floor);
        const double g = std::max(b_gt[i], floor);
        const double d = std::log(p) - std::log(g);
        n += 1.0;
        sum_d += d;
        sum_d2 += d * d;
        sum_abs += std::abs(b_pred[i] - b_gt[i]);
    }
    if (n <= 0.0) throw std::invalid_argument("geometry.disparity_loss: empty valid mask");
    DispLossParts out;
    const double mean_d = sum_d / n;
    out.l_log = sum_d2 / n - lambda1 * mean_d * mean_d;
    out.l_l1 = sum_abs / n;
    out.total = out.l_log + lambda_l1 * out.l_l1;
    return out;
}

// ---- tape integration -------------------------------------------------------

// Pixel-space projector as a custom autodiff op.
inline ad::Tape::Ref project_disparity_op(ad::Tape& tape, ad::Tape::Ref z_l, ad::Tape::Ref z_r,
                                          const ProjectorConfig& cfg,
                                          const codec::CodecConfig& cc) {
    const Tensor& vl = tape.val(z_l);
    const Tensor& vr = tape.val(z_r);
    Tensor lat = project_disparity_latent(vl, vr, cfg);
    Tensor px = upsample_disparity(lat, cc);
    const int64_t Fl = vl.dim(1), Hl = vl.dim(2), Wl = vl.dim(3);
    ad::Tape::Ref r = tape.push(std::move(px), {z_l, z_r}, nullptr);
    // Backward folds the nearest-upsample adjoint (sum over each latent cell's
    // pixels, scaled by patch_w) into a latent-space cotangent, then applies
    // the analytic soft-argmin vjp.
    auto back = [&tape, r, z_l, z_r, cfg, cc, Fl, Hl, Wl] {
        const Tensor& g = tape.val_grad(r);
        Tensor glat({Fl, Hl, Wl});
        for (int64_t f = 0; f < g.dim(0); ++f)
            for (int64_t y = 0; y < g.dim(1); ++y)
                for (int64_t x = 0; x < g.dim(2); ++x)
                    glat.at(f / cc.patch_t, y / cc.patch_h, x / cc.patch_w) +=
                        static_cast<double>(cc.patch_w) * g.at(f, y, x);
        Tensor* gl = tape.grad_buf(z_l);
        Tensor* gr = tape.grad_buf(z_r);
        if (gl || gr)
            project_disparity_latent_vjp(tape.val(z_l), tape.val(z_r), cfg, glat, gl, gr);
    };
    tape.attach_back(r, std::move(back));
    return r;
}

// In-tape disparity loss; returns scalar refs for (total, l_log, l_l1).
struct DispLossRefs {
    ad::Tape::Ref total, l_log, l_l1;
};

inline DispLossRefs disparity_loss_op(ad::Tape& tape, ad::Tape::Ref b_pred, const Tensor& b_gt,
                                      const Tensor& valid, double lambda1, double lambda_l1,
                                      double floor) {
    require(lambda1 >= 0.0 && lambda1 <= 1.0, "geometry.disparity_loss: lambda1 outside [0,1]");
    Tensor gt_log(b_gt.shape());
    for (int64_t i = 0; i < b_gt.numel(); ++i) gt_log[i] = std::log(std::max(b_gt[i], floor));
    using Ref = ad::Tape::Ref;
    Ref p_cl = tape.clamp_min(b_pred, floor);
    Ref d = tape.sub(tape.log(p_cl), tape.constant(gt_log));
    Ref mean_d2 = tape.mean_masked(tape.mul(d, d), valid);
    Ref mean_d = tape.mean_masked(d, valid);
    Ref l_log = tape.sub(mean_d2, tape.scale(tape.mul(mean_d, mean_d), lambda1));
    Ref l_l1 = tape.mean_masked(tape.abs(tape.sub(b_pred, tape.constant(b_gt))), valid);
    DispLossRefs out;
    out.l_log = l_log;
    out.l_l1 = l_l1;
    out.total = tape.add(l_log, tape.scale(l_l1, lambda_l1));
    return out;
}

// ---- disparity-based warping ------------------------------------------------

// Forward-warps the left view to the right camera: pixel x lands at
// round(x - d), nearer content (larger d) wins the z-buffer, and unwritten
// pixels form the hole mask (the non-overlap region).
inline std::pair<Tensor, Tensor> warp_with_disparity(const Tensor& left,
                                                     const DisparityMap& disp) {
    require(left.rank() == 4, "geometry.warp: left must be (c,f,h,w)");
    require(disp.space == DisparityMap::Space::Pixel, "geometry.warp: disparity must be pixel-space");
    const int64_t C = left.dim(0), F = left.dim(1), H = left.dim(2), W = left.dim(3);
    require(disp.values.rank() == 3 && disp.values.dim(0) == F && disp.values.dim(1) == H &&
                disp.values.dim(2) == W,
            "geometry.warp: disparity shape mismatch");
    for (int64_t i = 0; i < disp.values.numel(); ++i)
        if (disp.values[i] < 0.0)
            throw std::invalid_argument("geometry.warp: negative disparity");
    Tensor warped({C, F, H, W});
    Tensor holes({F, H, W}, 1.0);
    Tensor zbuf({F, H, W}, -1.0);  // winning disparity per target pixel
    for (int64_t f = 0; f < F; ++f)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const double d = disp.values.at(f, y, x);
                const int64_t xr = static_cast<int64_t>(std::llround(static_cast<double>(x) - d));
                if (xr < 0 || xr >= W) continue;
                if (d <= zbuf.at(f, y, xr)) continue;
                zbuf.at(f, y, xr) = d;
                holes.at(f, y, xr) = 0.0;
                for (int64_t c = 0; c < C; ++c) warped.at(c, f, y, xr) = left.at(c, f, y, x);
            }
    return {std::move(warped), std::move(holes)};
}

}  // namespace stw::geometry
