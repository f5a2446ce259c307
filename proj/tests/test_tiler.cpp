#include <gtest/gtest.h>

#include "stereoworld/rng.hpp"
#include "stereoworld/tiler.hpp"

using namespace stw;
namespace fm = stw::flowmatch;

namespace {

Tensor randn(std::vector<int64_t> shape, uint64_t k) {
    return rng::gaussian_tensor(std::move(shape), 47, rng::Stream::Init, k);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Per-location velocity field (1x1 receptive field): a pure function of the
// local z_t, z_l and t values.
fm::VelocityFn local_field() {
    return [](const Tensor& zl, const Tensor& zr, const Tensor& dr, double t) {
        fm::VelocityOut v;
        v.v_rgb = Tensor(zr.shape());
        for (int64_t i = 0; i < zr.numel(); ++i)
            v.v_rgb[i] = 0.4 * zr[i] - 0.3 * zl[i] + 0.1 * t;
        if (dr.numel() > 0) {
            v.v_dep = Tensor(dr.shape());
            for (int64_t i = 0; i < dr.numel(); ++i) v.v_dep[i] = 0.25 * dr[i] + 0.05 * zl[i];
        }
        return v;
    };
}

}  // namespace

TEST(Tiler, PlanSegmentsExamples) {
    const tiler::SegmentPlan single = tiler::plan_segments(21, 21, 5);
    ASSERT_EQ(single.windows.size(), 1u);
    EXPECT_EQ(single.windows[0], std::make_pair(0, 21));

    const tiler::SegmentPlan plan = tiler::plan_segments(33, 17, 5);
    ASSERT_EQ(plan.windows.size(), 3u);
    EXPECT_EQ(plan.windows[0], std::make_pair(0, 17));
    EXPECT_EQ(plan.windows[1], std::make_pair(12, 29));
    EXPECT_EQ(plan.windows[2], std::make_pair(16, 33));

    EXPECT_THROW(tiler::plan_segments(33, 5, 5), std::invalid_argument);
    EXPECT_THROW(tiler::plan_segments(33, 6, 0), std::invalid_argument);
    EXPECT_THROW(tiler::plan_segments(10, 17, 5), std::invalid_argument);
}

TEST(Tiler, SegmentWindowsCoverEveryFrame) {
    for (int F : {21, 29, 33, 64}) {
        const tiler::SegmentPlan plan = tiler::plan_segments(F, 17, 5);
        std::vector<int> cover(static_cast<size_t>(F), 0);
        for (auto [s, e] : plan.windows) {
            EXPECT_EQ(e - s, 17);
            for (int f = s; f < e; ++f) cover[static_cast<size_t>(f)]++;
        }
        for (int f = 0; f < F; ++f) EXPECT_GE(cover[static_cast<size_t>(f)], 1) << f;
        // consecutive overlap is exactly `overlap` except possibly the final
        // right-aligned window
        for (size_t k = 1; k + 1 < plan.windows.size(); ++k)
            EXPECT_EQ(plan.windows[k - 1].second - plan.windows[k].first, 5);
    }
}

TEST(Tiler, PlanTilesExamples) {
    const tiler::TileLayout one = tiler::plan_tiles(16, 16, 16, 0);
    ASSERT_EQ(one.tiles.size(), 1u);
    for (int64_t i = 0; i < one.tiles[0].weight.numel(); ++i)
        EXPECT_EQ(one.tiles[0].weight[i], 1.0);

    const tiler::TileLayout big = tiler::plan_tiles(60, 104, 32, 8);
    std::vector<int> ys, xs;
    for (const auto& t : big.tiles) {
        ys.push_back(t.y0);
        xs.push_back(t.x0);
    }
    std::sort(ys.begin(), ys.end());
    ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    EXPECT_EQ(ys, (std::vector<int>{0, 24, 28}));
    EXPECT_EQ(xs, (std::vector<int>{0, 24, 48, 72}));

    EXPECT_THROW(tiler::plan_tiles(16, 16, 8, 8), std::invalid_argument);
    EXPECT_THROW(tiler::plan_tiles(16, 16, 32, 4), std::invalid_argument);
}

TEST(Tiler, BlendWeightsSumToOneExactly) {
    // 20 random layouts: covering weights sum to exactly 1.0 everywhere.
    for (uint64_t trial = 0; trial < 20; ++trial) {
        const int H = 8 + static_cast<int>(rng::uniform(3, rng::Stream::Init, trial, 0) * 56);
        const int W = 8 + static_cast<int>(rng::uniform(3, rng::Stream::Init, trial, 1) * 56);
        const int maxt = std::min(H, W);
        const int tile = 4 + static_cast<int>(rng::uniform(3, rng::Stream::Init, trial, 2) *
                                              (maxt - 4 + 1));
        const int ov = static_cast<int>(rng::uniform(3, rng::Stream::Init, trial, 3) * tile);
        const tiler::TileLayout layout = tiler::plan_tiles(H, W, std::min(tile, maxt),
                                                           std::min(ov, std::min(tile, maxt) - 1));
        Tensor sum({H, W});
        for (const auto& t : layout.tiles)
            for (int y = 0; y < t.h; ++y)
                for (int x = 0; x < t.w; ++x) sum.at(t.y0 + y, t.x0 + x) += t.weight.at(y, x);
        for (int64_t i = 0; i < sum.numel(); ++i)
            ASSERT_EQ(sum[i], 1.0) << "trial " << trial << " cell " << i;
    }
}

TEST(Tiler, DegenerateSingleTileBitExact) {
    const std::vector<int64_t> latent{6, 3, 8, 10};
    Tensor z_l = randn(latent, 1);
    const fm::VelocityFn vfn = local_field();
    const fm::SampleResult ref = fm::sample(vfn, z_l, 7, 99);
    const tiler::TileLayout layout = tiler::plan_tiles(8, 10, 8, 0);
    ASSERT_EQ(layout.tiles.size(), 2u);  // 10 wide with tile 8 -> 2 tiles
    const tiler::TileLayout single = tiler::plan_tiles(8, 8, 8, 0);

    Tensor z_sq({6, 3, 8, 8});
    for (int64_t c = 0; c < 6; ++c)
        for (int64_t f = 0; f < 3; ++f)
            for (int64_t y = 0; y < 8; ++y)
                for (int64_t x = 0; x < 8; ++x) z_sq.at(c, f, y, x) = z_l.at(c, f, y, x);
    const fm::SampleResult ref_sq = fm::sample(vfn, z_sq, 7, 99);
    for (tiler::Fusion fu : {tiler::Fusion::PostHoc, tiler::Fusion::PerStep}) {
        const fm::SampleResult tiled = tiler::infer_tiled_latent(vfn, z_sq, single, 7, 99, fu);
        EXPECT_TRUE(tiled.z_r == ref_sq.z_r);
        EXPECT_TRUE(tiled.d_r == ref_sq.d_r);
    }
}

TEST(Tiler, LocalModelTiledEqualsUntiled) {
    const std::vector<int64_t> latent{4, 2, 12, 16};
    Tensor z_l = randn(latent, 2);
    const fm::VelocityFn vfn = local_field();
    const fm::SampleResult ref = fm::sample(vfn, z_l, 6, 3);
    const tiler::TileLayout layout = tiler::plan_tiles(12, 16, 8, 4);
    EXPECT_GT(layout.tiles.size(), 1u);
    for (tiler::Fusion fu : {tiler::Fusion::PostHoc, tiler::Fusion::PerStep}) {
        const fm::SampleResult tiled = tiler::infer_tiled_latent(vfn, z_l, layout, 6, 3, fu);
        EXPECT_TRUE(tiled.z_r == ref.z_r) << "fusion mode " << static_cast<int>(fu);
        EXPECT_TRUE(tiled.d_r == ref.d_r);
    }
}

TEST(Tiler, SingleWindowPlanEqualsPlainSample) {
    const std::vector<int64_t> latent{4, 6, 4, 4};
    Tensor z_l = randn(latent, 3);
    const fm::VelocityFn vfn = local_field();
    const fm::SampleResult ref = fm::sample(vfn, z_l, 5, 17);
    const tiler::SegmentPlan plan = tiler::plan_segments(6, 6, 2);
    ASSERT_EQ(plan.windows.size(), 1u);
    const tiler::LongResult lr = tiler::infer_long_latent(vfn, z_l, plan, 5, 17);
    EXPECT_TRUE(lr.stitched.z_r == ref.z_r);
    EXPECT_TRUE(lr.stitched.d_r == ref.d_r);
}

TEST(Tiler, GuideFramesPinnedBitExact) {
    const std::vector<int64_t> latent{4, 10, 4, 4};
    Tensor z_l = randn(latent, 4);
    const fm::VelocityFn vfn = local_field();
    const tiler::SegmentPlan plan = tiler::plan_segments(10, 6, 2);
    ASSERT_EQ(plan.windows.size(), 2u);
    EXPECT_EQ(plan.windows[1], std::make_pair(4, 10));
    const tiler::LongResult lr = tiler::infer_long_latent(vfn, z_l, plan, 8, 5);
    // Segment 1's first `overlap` frames equal segment 0's frames [4,6).
    const int o = plan.overlap;
    const int64_t C = 4, HW = 16;
    for (int64_t c = 0; c < C; ++c)
        for (int f = 0; f < o; ++f)
            for (int64_t i = 0; i < HW; ++i) {
                ASSERT_EQ(lr.segments[1].z_r[(c * 6 + f) * HW + i],
                          lr.segments[0].z_r[(c * 6 + 4 + f) * HW + i]);
                ASSERT_EQ(lr.segments[1].d_r[(c * 6 + f) * HW + i],
                          lr.segments[0].d_r[(c * 6 + 4 + f) * HW + i]);
            }
    // Stitched output: frames [0,6) from segment 0, frames [6,10) from
    // segment 1's non-guide range.
    for (int64_t c = 0; c < C; ++c)
        for (int f = 0; f < 10; ++f)
            for (int64_t i = 0; i < HW; ++i) {
                const double got = lr.stitched.z_r[(c * 10 + f) * HW + i];
                const double want =
                    f < 6 ? lr.segments[0].z_r[(c * 6 + f) * HW + i]
                          : lr.segments[1].z_r[(c * 6 + (f - 4)) * HW + i];
                ASSERT_EQ(got, want);
            }
}

TEST(Tiler, OracleFieldMakesPlanIrrelevant) {
    // Velocity (z - 2 z_l)/t: one Euler step lands on 2 z_l and stays, so any
    // segmentation stitches to the same target.
    const std::vector<int64_t> latent{3, 12, 4, 4};
    Tensor z_l = randn(latent, 5);
    fm::VelocityFn oracle = [](const Tensor& zl, const Tensor& zr, const Tensor& dr, double t) {
        fm::VelocityOut v;
        v.v_rgb = Tensor(zr.shape());
        for (int64_t i = 0; i < zr.numel(); ++i) v.v_rgb[i] = (zr[i] - 2.0 * zl[i]) / t;
        if (dr.numel() > 0) {
            v.v_dep = Tensor(dr.shape());
            for (int64_t i = 0; i < dr.numel(); ++i) v.v_dep[i] = (dr[i] - 0.5 * zl[i]) / t;
        }
        return v;
    };
    for (auto [seg, ov] : std::vector<std::pair<int, int>>{{12, 4}, {6, 2}, {5, 1}}) {
        const tiler::SegmentPlan plan = tiler::plan_segments(12, seg, ov);
        const tiler::LongResult lr = tiler::infer_long_latent(oracle, z_l, plan, 4, 9);
        Tensor want(latent);
        for (int64_t i = 0; i < want.numel(); ++i) want[i] = 2.0 * z_l[i];
        EXPECT_LE(max_abs_diff(lr.stitched.z_r, want), 1e-9) << "seg=" << seg;
    }
}

TEST(Tiler, PlanMismatchRejected) {
    const std::vector<int64_t> latent{3, 12, 4, 4};
    Tensor z_l = randn(latent, 6);
    tiler::SegmentPlan plan = tiler::plan_segments(10, 6, 2);  // covers 10, latent has 12
    EXPECT_THROW(tiler::infer_long_latent(local_field(), z_l, plan, 3, 1), std::invalid_argument);
    const tiler::TileLayout layout = tiler::plan_tiles(4, 8, 4, 2);
    EXPECT_THROW(tiler::infer_tiled_latent(local_field(), z_l, layout, 3, 1,
                                           tiler::Fusion::PostHoc),
                 std::invalid_argument);
}

TEST(Tiler, VideoLevelWrappers) {
    codec::CodecConfig cc{1, 2, 2, 3};
    Tensor v_l = randn({3, 6, 8, 8}, 7);
    const fm::VelocityFn vfn = local_field();
    const tiler::SegmentPlan plan = tiler::plan_segments(6, 4, 2);
    const tiler::VideoResult a = tiler::infer_long(vfn, v_l, plan, 4, 2, cc);
    EXPECT_EQ(a.right.shape(), v_l.shape());
    EXPECT_EQ(a.depth.shape(), (std::vector<int64_t>{1, 6, 8, 8}));
    const tiler::TileLayout layout = tiler::plan_tiles(4, 4, 4, 0);
    const tiler::VideoResult b =
        tiler::infer_tiled(vfn, v_l, layout, 4, 2, tiler::Fusion::PostHoc, cc);
    EXPECT_EQ(b.right.shape(), v_l.shape());
}
