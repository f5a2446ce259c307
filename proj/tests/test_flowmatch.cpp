#include <gtest/gtest.h>

#include "stereoworld/flowmatch.hpp"
#include "stereoworld/rng.hpp"

using namespace stw;
namespace fm = stw::flowmatch;

namespace {

Tensor randn(std::vector<int64_t> shape, uint64_t k) {
    return rng::gaussian_tensor(std::move(shape), 7, rng::Stream::Init, k);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Flowmatch, InterpolateEndpoints) {
    Tensor z0 = randn({2, 3, 4, 4}, 1);
    Tensor eps = randn({2, 3, 4, 4}, 2);
    EXPECT_TRUE(fm::interpolate(z0, eps, 0.0) == z0);
    EXPECT_TRUE(fm::interpolate(z0, eps, 1.0) == eps);
    Tensor zeros({2, 2}, 0.0), twos({2, 2}, 2.0);
    Tensor mid = fm::interpolate(zeros, twos, 0.5);
    for (int64_t i = 0; i < mid.numel(); ++i) EXPECT_EQ(mid[i], 1.0);
    EXPECT_THROW(fm::interpolate(z0, eps, 1.5), std::invalid_argument);
    EXPECT_THROW(fm::interpolate(z0, eps, -0.1), std::invalid_argument);
}

TEST(Flowmatch, CfmTargetIdentities) {
    Tensor z0 = randn({3, 2, 4, 4}, 3);
    Tensor eps = randn({3, 2, 4, 4}, 4);
    Tensor u = fm::cfm_target(z0, eps);
    // z0 == eps -> u == 0
    Tensor zu = fm::cfm_target(z0, z0);
    for (int64_t i = 0; i < zu.numel(); ++i) EXPECT_EQ(zu[i], 0.0);
    // z0 == 0 -> u == eps
    EXPECT_TRUE(fm::cfm_target(Tensor(z0.shape()), eps) == eps);
    // interpolate(z0,eps,t) - t*u == z0 for any t
    for (double t : {0.0, 0.25, 0.5, 0.9, 1.0}) {
        Tensor zt = fm::interpolate(z0, eps, t);
        Tensor rec(zt.shape());
        for (int64_t i = 0; i < zt.numel(); ++i) rec[i] = zt[i] - t * u[i];
        EXPECT_LE(max_abs_diff(rec, z0), 1e-12) << "t=" << t;
    }
}

TEST(Flowmatch, CfmLossCases) {
    Tensor u = randn({2, 2, 2, 2}, 5);
    Tensor mask(u.shape(), 1.0);
    EXPECT_EQ(fm::cfm_loss(u, u, mask), 0.0);
    Tensor off = u;
    for (int64_t i = 0; i < off.numel(); ++i) off[i] += 1.0;
    EXPECT_NEAR(fm::cfm_loss(off, u, mask), 1.0, 1e-12);
    // half-masked constant error 2 -> MSE over unmasked = 4
    Tensor half(u.shape(), 0.0);
    for (int64_t i = 0; i < half.numel() / 2; ++i) half[i] = 1.0;
    Tensor err2 = u;
    for (int64_t i = 0; i < err2.numel(); ++i) err2[i] += 2.0;
    EXPECT_NEAR(fm::cfm_loss(err2, u, half), 4.0, 1e-12);
    EXPECT_THROW(fm::cfm_loss(u, u, Tensor(u.shape(), 0.0)), std::invalid_argument);
}

TEST(Flowmatch, PredictCleanInversion) {
    Tensor z0 = randn({2, 2, 4, 4}, 6);
    Tensor eps = randn({2, 2, 4, 4}, 7);
    Tensor u = fm::cfm_target(z0, eps);
    for (double t : {0.1, 0.5, 1.0}) {
        Tensor zt = fm::interpolate(z0, eps, t);
        EXPECT_LE(max_abs_diff(fm::predict_clean(zt, u, t), z0), 1e-12);
    }
    Tensor zt = fm::interpolate(z0, eps, 0.7);
    EXPECT_TRUE(fm::predict_clean(zt, randn(zt.shape(), 8), 0.0) == zt);
    // t = 1: z_t == eps, so z0_hat = eps - v
    Tensor v = randn(z0.shape(), 9);
    Tensor got = fm::predict_clean(eps, v, 1.0);
    for (int64_t i = 0; i < got.numel(); ++i) EXPECT_EQ(got[i], eps[i] - v[i]);
}

TEST(Flowmatch, OracleSamplingRecoversData) {
    const std::vector<int64_t> shape{3, 2, 4, 6};
    Tensor z_l = randn(shape, 10);
    Tensor z_r0 = randn(shape, 11);
    Tensor d_r0 = randn(shape, 12);
    const uint64_t seed = 77;
    // Oracle: the constant target field for the sampler's own seeded noise.
    Tensor eps_r = rng::gaussian_tensor(shape, seed, rng::Stream::SampleRgb, 0);
    Tensor eps_d = rng::gaussian_tensor(shape, seed, rng::Stream::SampleDep, 0);
    Tensor u_r = fm::cfm_target(z_r0, eps_r);
    Tensor u_d = fm::cfm_target(d_r0, eps_d);
    fm::VelocityFn oracle = [&](const Tensor&, const Tensor&, const Tensor& d_r_t, double) {
        fm::VelocityOut v;
        v.v_rgb = u_r;
        if (d_r_t.numel() > 0) v.v_dep = u_d;
        return v;
    };
    fm::SampleResult one = fm::sample(oracle, z_l, 1, seed);
    EXPECT_LE(max_abs_diff(one.z_r, z_r0), 1e-12);
    EXPECT_LE(max_abs_diff(one.d_r, d_r0), 1e-12);
    // Constant field: integrator step count does not matter.
    fm::SampleResult fifty = fm::sample(oracle, z_l, 50, seed);
    EXPECT_LE(max_abs_diff(fifty.z_r, one.z_r), 1e-12);
    EXPECT_LE(max_abs_diff(fifty.d_r, one.d_r), 1e-12);
}

TEST(Flowmatch, SampleDeterminism) {
    const std::vector<int64_t> shape{2, 2, 4, 4};
    Tensor z_l = randn(shape, 13);
    fm::VelocityFn vfn = [](const Tensor& zl, const Tensor& zr, const Tensor& dr, double t) {
        fm::VelocityOut v;
        v.v_rgb = Tensor(zr.shape());
        for (int64_t i = 0; i < zr.numel(); ++i) v.v_rgb[i] = 0.3 * zr[i] - 0.1 * zl[i] + t;
        if (dr.numel() > 0) {
            v.v_dep = Tensor(dr.shape());
            for (int64_t i = 0; i < dr.numel(); ++i) v.v_dep[i] = 0.2 * dr[i];
        }
        return v;
    };
    fm::SampleResult a = fm::sample(vfn, z_l, 8, 5);
    fm::SampleResult b = fm::sample(vfn, z_l, 8, 5);
    EXPECT_TRUE(a.z_r == b.z_r);
    EXPECT_TRUE(a.d_r == b.d_r);
    fm::SampleResult c = fm::sample(vfn, z_l, 8, 6);
    EXPECT_FALSE(a.z_r == c.z_r);

    fm::SampleResult rgb = fm::sample(vfn, z_l, 8, 5, fm::Mode::RgbOnly);
    EXPECT_EQ(rgb.d_r.numel(), 0);
    EXPECT_THROW(fm::sample(vfn, z_l, 0, 5), std::invalid_argument);
}
