#pragma once

#include <utility>
#include <vector>

#include "stereoworld/codec.hpp"
#include "stereoworld/flowmatch.hpp"
#include "stereoworld/rng.hpp"
#include "stereoworld/tensor.hpp"

namespace stw::tiler {

// Temporal segment planning with guide-frame handoff and spatial tile
// planning with overlap-blend fusion. Degenerate plans reduce bit-exactly to
// untiled inference: segment 0 and single tiles draw the same seeded noise
// as flowmatch::sample, and fusion is anchored so agreeing tiles pass
// through unchanged.

struct SegmentPlan {
    int seg_len = 0;
    int overlap = 0;
    std::vector<std::pair<int, int>> windows;  // [start, end) in latent frames
};

inline SegmentPlan plan_segments(int f_total, int seg_len, int overlap) {
    require(overlap >= 1, "tiler.plan_segments: overlap must be >= 1");
    require(seg_len > overlap, "tiler.plan_segments: seg_len must exceed overlap");
    require(f_total >= seg_len, "tiler.plan_segments: clip shorter than one segment");
    SegmentPlan plan;
    plan.seg_len = seg_len;
    plan.overlap = overlap;
    const int stride = seg_len - overlap;
    for (int start = 0; start + seg_len < f_total; start += stride)
        plan.windows.emplace_back(start, start + seg_len);
    plan.windows.emplace_back(f_total - seg_len, f_total);  // right-aligned final window
    return plan;
}

struct Tile {
    int y0 = 0, x0 = 0, h = 0, w = 0;
    Tensor weight;  // [h,w] normalized blend weights
};

struct TileLayout {
    int grid_h = 0, grid_w = 0;
    int tile = 0, overlap = 0;
    std::vector<Tile> tiles;
};

namespace detail {

inline std::vector<int> axis_origins(int extent, int tile, int stride) {
    std::vector<int> o;
    for (int s = 0; s + tile < extent; s += stride) o.push_back(s);
    const int last = extent - tile;
    if (o.empty() || o.back() != last) o.push_back(last);
    return o;
}

// 1-D ramp: weight 1 in the interior, linearly descending toward an edge
// over the overlapped band (never reaching zero).
inline double ramp(int i, int len, int band_lo, int band_hi) {
    double w = 1.0;
    if (band_lo > 0 && i < band_lo)
        w = std::min(w, static_cast<double>(i + 1) / static_cast<double>(band_lo + 1));
    if (band_hi > 0 && i >= len - band_hi)
        w = std::min(w, static_cast<double>(len - i) / static_cast<double>(band_hi + 1));
    return w;
}

}  // namespace detail

// Overlapping tiles with outer-product ramp weights, renormalized so the
// covering weights at every latent cell sum to exactly 1 (the last covering
// tile absorbs the rounding residual).
inline TileLayout plan_tiles(int grid_h, int grid_w, int tile, int overlap) {
    require(overlap >= 0, "tiler.plan_tiles: negative overlap");
    require(tile > overlap, "tiler.plan_tiles: tile must exceed overlap");
    require(tile <= std::min(grid_h, grid_w), "tiler.plan_tiles: tile exceeds latent extent");
    TileLayout layout;
    layout.grid_h = grid_h;
    layout.grid_w = grid_w;
    layout.tile = tile;
    layout.overlap = overlap;
    const int stride = tile - overlap;
    const auto ys = detail::axis_origins(grid_h, tile, stride);
    const auto xs = detail::axis_origins(grid_w, tile, stride);
    for (int y0 : ys)
        for (int x0 : xs) {
            Tile t;
            t.y0 = y0;
            t.x0 = x0;
            t.h = tile;
            t.w = tile;
            t.weight = Tensor({tile, tile});
            for (int y = 0; y < tile; ++y) {
                const double wy = detail::ramp(y, tile, y0 > 0 ? overlap : 0,
                                               y0 + tile < grid_h ? overlap : 0);
                for (int x = 0; x < tile; ++x) {
                    const double wx = detail::ramp(x, tile, x0 > 0 ? overlap : 0,
                                                   x0 + tile < grid_w ? overlap : 0);
                    t.weight.at(y, x) = wy * wx;
                }
            }
            layout.tiles.push_back(std::move(t));
        }

    // Normalize per cell; the last covering tile takes 1 - sum(others) so the
    // cover sums to exactly 1.0.
    Tensor coverage({grid_h, grid_w});
    for (const Tile& t : layout.tiles)
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x) coverage.at(t.y0 + y, t.x0 + x) += t.weight.at(y, x);
    Tensor last_idx({grid_h, grid_w}, -1.0);
    for (size_t i = 0; i < layout.tiles.size(); ++i) {
        const Tile& t = layout.tiles[i];
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x)
                last_idx.at(t.y0 + y, t.x0 + x) = static_cast<double>(i);
    }
    for (auto& t : layout.tiles)
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x) t.weight.at(y, x) /= coverage.at(t.y0 + y, t.x0 + x);
    Tensor partial({grid_h, grid_w});
    for (size_t i = 0; i < layout.tiles.size(); ++i) {
        Tile& t = layout.tiles[i];
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x) {
                if (last_idx.at(t.y0 + y, t.x0 + x) == static_cast<double>(i))
                    t.weight.at(y, x) = 1.0 - partial.at(t.y0 + y, t.x0 + x);
                else
                    partial.at(t.y0 + y, t.x0 + x) += t.weight.at(y, x);
            }
    }
    return layout;
}

enum class Fusion { PostHoc, PerStep };

inline Fusion parse_fusion(const std::string& s) {
    if (s == "post-hoc") return Fusion::PostHoc;
    if (s == "per-step") return Fusion::PerStep;
    throw std::invalid_argument("tiler: unknown fusion mode '" + s + "'");
}

namespace detail {

inline Tensor crop_frames(const Tensor& z, int f0, int f1) {
    const int64_t C = z.dim(0), H = z.dim(2), W = z.dim(3);
    Tensor out({C, static_cast<int64_t>(f1 - f0), H, W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t f = f0; f < f1; ++f)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) out.at(c, f - f0, y, x) = z.at(c, f, y, x);
    return out;
}

inline void paste_frames(Tensor& dst, const Tensor& src, int src_f0, int src_f1, int dst_f0) {
    const int64_t C = dst.dim(0), H = dst.dim(2), W = dst.dim(3);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t f = src_f0; f < src_f1; ++f)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x)
                    dst.at(c, dst_f0 + (f - src_f0), y, x) = src.at(c, f, y, x);
}

inline Tensor crop_tile(const Tensor& z, const Tile& t) {
    const int64_t C = z.dim(0), F = z.dim(1);
    Tensor out({C, F, static_cast<int64_t>(t.h), static_cast<int64_t>(t.w)});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t f = 0; f < F; ++f)
            for (int y = 0; y < t.h; ++y)
                for (int x = 0; x < t.w; ++x)
                    out.at(c, f, y, x) = z.at(c, f, t.y0 + y, t.x0 + x);
    return out;
}

// fused(cell) = x_anchor + sum_i w_i * (x_i - x_anchor), anchor = last cover.
// Agreeing tiles therefore pass through bit-exactly.
inline Tensor fuse_tiles(const TileLayout& layout, const std::vector<Tensor>& tiles,
                         const std::vector<int64_t>& full_shape) {
    Tensor out(full_shape);
    const int64_t C = full_shape[0], F = full_shape[1];
    Tensor anchor({layout.grid_h, layout.grid_w}, -1.0);
    for (size_t i = 0; i < layout.tiles.size(); ++i) {
        const Tile& t = layout.tiles[i];
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x)
                anchor.at(t.y0 + y, t.x0 + x) = static_cast<double>(i);
    }
    // Anchor pass: copy the last covering tile's values.
    for (size_t i = 0; i < layout.tiles.size(); ++i) {
        const Tile& t = layout.tiles[i];
        for (int64_t c = 0; c < C; ++c)
            for (int64_t f = 0; f < F; ++f)
                for (int y = 0; y < t.h; ++y)
                    for (int x = 0; x < t.w; ++x)
                        if (anchor.at(t.y0 + y, t.x0 + x) == static_cast<double>(i))
                            out.at(c, f, t.y0 + y, t.x0 + x) = tiles[i].at(c, f, y, x);
    }
    // Correction pass: weighted deviations from the anchor.
    for (size_t i = 0; i < layout.tiles.size(); ++i) {
        const Tile& t = layout.tiles[i];
        for (int64_t c = 0; c < C; ++c)
            for (int64_t f = 0; f < F; ++f)
                for (int y = 0; y < t.h; ++y)
                    for (int x = 0; x < t.w; ++x) {
                        if (anchor.at(t.y0 + y, t.x0 + x) == static_cast<double>(i)) continue;
                        out.at(c, f, t.y0 + y, t.x0 + x) +=
                            t.weight.at(y, x) *
                            (tiles[i].at(c, f, y, x) - out.at(c, f, t.y0 + y, t.x0 + x));
                    }
    }
    return out;
}

}  // namespace detail

// ---- temporal: guided segment inference -----------------------------------------

struct LongResult {
    flowmatch::SampleResult stitched;
    std::vector<flowmatch::SampleResult> segments;
    std::vector<std::pair<int, int>> windows;
};

// Sequential segments; for k > 0 the first `overlap` latent frames are pinned
// to the previous segment's final generated latents at every ODE step, and
// stitching takes non-guide frames from each segment.
inline LongResult infer_long_latent(const flowmatch::VelocityFn& velocity, const Tensor& z_l,
                                    const SegmentPlan& plan, int steps, uint64_t seed,
                                    flowmatch::Mode mode = flowmatch::Mode::CoDenoise) {
    require(!plan.windows.empty(), "tiler.infer_long: empty plan");
    require(plan.windows.back().second == static_cast<int>(z_l.dim(1)) &&
                plan.windows.front().first == 0,
            "tiler.infer_long: plan does not cover the latent frame count");
    const bool co = mode == flowmatch::Mode::CoDenoise;
    LongResult out;
    out.windows = plan.windows;
    Tensor z_full(z_l.shape());
    Tensor d_full = co ? Tensor(z_l.shape()) : Tensor();

    for (size_t k = 0; k < plan.windows.size(); ++k) {
        const auto [s, e] = plan.windows[k];
        const Tensor z_l_crop = detail::crop_frames(z_l, s, e);
        Tensor z_init = rng::gaussian_tensor(z_l_crop.shape(), seed, rng::Stream::SampleRgb,
                                             static_cast<uint64_t>(k));
        Tensor d_init = co ? rng::gaussian_tensor(z_l_crop.shape(), seed, rng::Stream::SampleDep,
                                                  static_cast<uint64_t>(k))
                           : Tensor();
        std::function<void(Tensor&, Tensor&)> pin;
        if (k > 0) {
            const int o = plan.overlap;
            Tensor guide_z = detail::crop_frames(z_full, s, s + o);
            Tensor guide_d = co ? detail::crop_frames(d_full, s, s + o) : Tensor();
            pin = [guide_z, guide_d, o, co](Tensor& zr, Tensor& dr) {
                detail::paste_frames(zr, guide_z, 0, o, 0);
                if (co) detail::paste_frames(dr, guide_d, 0, o, 0);
            };
        }
        flowmatch::SampleResult seg = flowmatch::sample_from(velocity, z_l_crop, steps,
                                                             std::move(z_init), std::move(d_init),
                                                             mode, pin);
        const int write_from = k == 0 ? 0 : plan.overlap;
        detail::paste_frames(z_full, seg.z_r, write_from, e - s, s + write_from);
        if (co) detail::paste_frames(d_full, seg.d_r, write_from, e - s, s + write_from);
        out.segments.push_back(std::move(seg));
    }
    out.stitched.z_r = std::move(z_full);
    if (co) out.stitched.d_r = std::move(d_full);
    return out;
}

// ---- spatial: tiled inference ------------------------------------------------------

// All tiles share one globally seeded noise field (cropped per tile).
// Post-hoc: denoise each tile fully, blend once. Per-step: blend after every
// Euler step.
inline flowmatch::SampleResult infer_tiled_latent(const flowmatch::VelocityFn& velocity,
                                                  const Tensor& z_l, const TileLayout& layout,
                                                  int steps, uint64_t seed, Fusion fusion,
                                                  flowmatch::Mode mode = flowmatch::Mode::CoDenoise) {
    require(layout.grid_h == z_l.dim(2) && layout.grid_w == z_l.dim(3),
            "tiler.infer_tiled: layout does not match latent extent");
    if (steps < 1) throw std::invalid_argument("tiler.infer_tiled: steps must be >= 1");
    const bool co = mode == flowmatch::Mode::CoDenoise;
    const size_t nt = layout.tiles.size();
    Tensor z_noise = rng::gaussian_tensor(z_l.shape(), seed, rng::Stream::SampleRgb, 0);
    Tensor d_noise = co ? rng::gaussian_tensor(z_l.shape(), seed, rng::Stream::SampleDep, 0)
                        : Tensor();
    std::vector<Tensor> z_l_crops(nt);
    for (size_t i = 0; i < nt; ++i) z_l_crops[i] = detail::crop_tile(z_l, layout.tiles[i]);

    flowmatch::SampleResult out;
    if (fusion == Fusion::PostHoc) {
        std::vector<Tensor> z_tiles(nt), d_tiles(nt);
        for (size_t i = 0; i < nt; ++i) {
            flowmatch::SampleResult r = flowmatch::sample_from(
                velocity, z_l_crops[i], steps, detail::crop_tile(z_noise, layout.tiles[i]),
                co ? detail::crop_tile(d_noise, layout.tiles[i]) : Tensor(), mode);
            z_tiles[i] = std::move(r.z_r);
            if (co) d_tiles[i] = std::move(r.d_r);
        }
        out.z_r = detail::fuse_tiles(layout, z_tiles, z_l.shape());
        if (co) out.d_r = detail::fuse_tiles(layout, d_tiles, z_l.shape());
        return out;
    }

    Tensor z = std::move(z_noise);
    Tensor d = std::move(d_noise);
    const double dt = 1.0 / static_cast<double>(steps);
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - static_cast<double>(k) * dt;
        std::vector<Tensor> z_tiles(nt), d_tiles(nt);
        for (size_t i = 0; i < nt; ++i) {
            Tensor zc = detail::crop_tile(z, layout.tiles[i]);
            Tensor dc = co ? detail::crop_tile(d, layout.tiles[i]) : Tensor();
            flowmatch::VelocityOut v = velocity(z_l_crops[i], zc, dc, t);
            for (int64_t j = 0; j < zc.numel(); ++j) zc[j] -= dt * v.v_rgb[j];
            if (co)
                for (int64_t j = 0; j < dc.numel(); ++j) dc[j] -= dt * v.v_dep[j];
            z_tiles[i] = std::move(zc);
            if (co) d_tiles[i] = std::move(dc);
        }
        z = detail::fuse_tiles(layout, z_tiles, z_l.shape());
        if (co) d = detail::fuse_tiles(layout, d_tiles, z_l.shape());
    }
    out.z_r = std::move(z);
    if (co) out.d_r = std::move(d);
    return out;
}

// ---- video-level wrappers -----------------------------------------------------------

struct VideoResult {
    Tensor right;  // (3, f, h, w)
    Tensor depth;  // (1, f, h, w); empty in rgb-only mode
};

inline VideoResult infer_long(const flowmatch::VelocityFn& velocity, const Tensor& v_l,
                              const SegmentPlan& plan, int steps, uint64_t seed,
                              const codec::CodecConfig& cc,
                              flowmatch::Mode mode = flowmatch::Mode::CoDenoise) {
    const Tensor z_l = codec::encode(v_l, cc);
    LongResult r = infer_long_latent(velocity, z_l, plan, steps, seed, mode);
    VideoResult out;
    out.right = codec::decode(r.stitched.z_r, cc);
    if (mode == flowmatch::Mode::CoDenoise) out.depth = codec::decode_mono(r.stitched.d_r, cc);
    return out;
}

inline VideoResult infer_tiled(const flowmatch::VelocityFn& velocity, const Tensor& v_l,
                               const TileLayout& layout, int steps, uint64_t seed, Fusion fusion,
                               const codec::CodecConfig& cc,
                               flowmatch::Mode mode = flowmatch::Mode::CoDenoise) {
    const Tensor z_l = codec::encode(v_l, cc);
    flowmatch::SampleResult r = infer_tiled_latent(velocity, z_l, layout, steps, seed, fusion, mode);
    VideoResult out;
    out.right = codec::decode(r.z_r, cc);
    if (mode == flowmatch::Mode::CoDenoise) out.depth = codec::decode_mono(r.d_r, cc);
    return out;
}

}  // namespace stw::tiler
