#pragma once

#include <functional>

#include "stereoworld/rng.hpp"
#include "stereoworld/tensor.hpp"

namespace stw::flowmatch {

// Rectified-flow machinery for the linear path z_t = (1-t) z_0 + t eps.
// The target velocity along that path is constant: u = eps - z_0.

inline Tensor interpolate(const Tensor& z0, const Tensor& eps, double t) {
    require_same_shape(z0, eps, "flowmatch.interpolate");
    if (t < 0.0 || t > 1.0)
        throw std::invalid_argument("flowmatch.interpolate: t outside [0,1]");
    Tensor out(z0.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = (1.0 - t) * z0[i] + t * eps[i];
    return out;
}

inline Tensor cfm_target(const Tensor& z0, const Tensor& eps) {
    require_same_shape(z0, eps, "flowmatch.cfm_target");
    Tensor out(z0.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = eps[i] - z0[i];
    return out;
}

// MSE over entries where mask is non-zero.
inline double cfm_loss(const Tensor& v_pred, const Tensor& u, const Tensor& mask) {
    require_same_shape(v_pred, u, "flowmatch.cfm_loss");
    require_same_shape(v_pred, mask, "flowmatch.cfm_loss mask");
    double s = 0.0, w = 0.0;
    for (int64_t i = 0; i < v_pred.numel(); ++i) {
        const double d = v_pred[i] - u[i];
        s += mask[i] * d * d;
        w += mask[i];
    }
    if (w <= 0.0) throw std::invalid_argument("flowmatch.cfm_loss: empty mask");
    return s / w;
}

// Inverts the linear path given a velocity estimate: z0_hat = z_t - t * v.
inline Tensor predict_clean(const Tensor& z_t, const Tensor& v_pred, double t) {
    require_same_shape(z_t, v_pred, "flowmatch.predict_clean");
    if (t < 0.0 || t > 1.0)
        throw std::invalid_argument("flowmatch.predict_clean: t outside [0,1]");
    Tensor out(z_t.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = z_t[i] - t * v_pred[i];
    return out;
}

enum class Mode { CoDenoise, RgbOnly };

struct VelocityOut {
    Tensor v_rgb;
    Tensor v_dep;  // empty in rgb-only mode
};

// Velocity source: the model wraps itself into this signature, and tests
// inject analytic fields. d_r_t is empty in rgb-only mode.
using VelocityFn = std::function<VelocityOut(const Tensor& z_l, const Tensor& z_r_t,
                                             const Tensor& d_r_t, double t)>;

struct SampleResult {
    Tensor z_r;
    Tensor d_r;  // empty in rgb-only mode
};

// Euler integration from t=1 to t=0 with uniform steps, conditioning latents
// held clean throughout. `pin` (optional) re-imposes guide frames after the
// init and after every update; the tiler uses it for temporal handoff.
inline SampleResult sample_from(const VelocityFn& velocity, const Tensor& z_l, int steps,
                                Tensor z_r_init, Tensor d_r_init, Mode mode,
                                const std::function<void(Tensor&, Tensor&)>& pin = {}) {
    if (steps < 1) throw std::invalid_argument("flowmatch.sample: steps must be >= 1");
    Tensor z_r = std::move(z_r_init);
    Tensor d_r = std::move(d_r_init);
    if (pin) pin(z_r, d_r);
    const double dt = 1.0 / static_cast<double>(steps);
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) * dt;
        VelocityOut v = velocity(z_l, z_r, mode == Mode::CoDenoise ? d_r : Tensor(), t);
        require_same_shape(z_r, v.v_rgb, "flowmatch.sample: v_rgb shape");
        for (int64_t i = 0; i < z_r.numel(); ++i) z_r[i] -= dt * v.v_rgb[i];
        if (mode == Mode::CoDenoise) {
            require_same_shape(d_r, v.v_dep, "flowmatch.sample: v_dep shape");
            for (int64_t i = 0; i < d_r.numel(); ++i) d_r[i] -= dt * v.v_dep[i];
        }
        if (pin) pin(z_r, d_r);
    }
    SampleResult out;
    out.z_r = std::move(z_r);
    if (mode == Mode::CoDenoise) out.d_r = std::move(d_r);
    return out;
}

inline SampleResult sample(const VelocityFn& velocity, const Tensor& z_l, int steps,
                           uint64_t seed, Mode mode = Mode::CoDenoise) {
    Tensor z_r = rng::gaussian_tensor(z_l.shape(), seed, rng::Stream::SampleRgb, 0);
    Tensor d_r = mode == Mode::CoDenoise
                     ? rng::gaussian_tensor(z_l.shape(), seed, rng::Stream::SampleDep, 0)
                     : Tensor();
    return sample_from(velocity, z_l, steps, std::move(z_r), std::move(d_r), mode);
}

}  // namespace stw::flowmatch
