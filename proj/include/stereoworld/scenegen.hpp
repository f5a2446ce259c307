#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "stereoworld/manifest.hpp"
#include "stereoworld/rng.hpp"
#include "stereoworld/tensor.hpp"
#include "stereoworld/tensor_file.hpp"

namespace stw::scenegen {

// Procedural stereo clips with analytically exact depth, disparity and
// occlusion ground truth. Scenes are stacks of textured planar layers under
// rectified horizontal stereo: a layer at depth Z carries disparity
// d = B*f/Z, the right view shows its content shifted left by d
// (x_left = x_right + d), and z-buffering follows the strict depth order.

enum class Pattern { Noise = 0, Checker = 1, Rings = 2, Flat = 3 };

struct Layer {
    double depth = 1.0;      // arbitrary units, > 0; +inf allowed for a zero-disparity backdrop
    double disparity = 0.0;  // pixels, >= 0
    Pattern pattern = Pattern::Noise;
    uint64_t tex_seed = 0;
    double x0 = 0.0, y0 = 0.0, w = 0.0, h = 0.0;  // extent rectangle at frame 0
    double vx = 0.0, vy = 0.0;                    // px/frame
    double contrast = 1.0;
};

struct SceneSpec {
    uint64_t seed = 0;
    int frames = 8;
    int width = 32;
    int height = 32;
    double d_max = 4.0;   // must be <= width/8
    double bf = 8.0;      // baseline * focal product tying depth to disparity
    bool subpixel = false;
    std::vector<Layer> layers;  // ordered far -> near
};

struct StereoSample {
    Tensor left;     // (3, f, h, w) in [0,1]
    Tensor right;    // (3, f, h, w)
    Tensor depth_r;  // (1, f, h, w), normalized inverse depth of the right view
    Tensor disp_gt;  // (f, h, w), pixels, left-aligned
    Tensor occ_mask; // (f, h, w), 1 = visible in both views
};

// ---- procedural textures ------------------------------------------------

namespace detail {

inline double smooth(double u) { return u * u * (3.0 - 2.0 * u); }

inline double lattice(uint64_t seed, int64_t ix, int64_t iy, int tag) {
    return rng::uniform(seed, rng::Stream::Texture, static_cast<uint64_t>(ix),
                        static_cast<uint64_t>(iy), static_cast<uint64_t>(tag));
}

// Band-limited value noise: smoothstep-interpolated random lattice.
inline double value_noise(uint64_t seed, double x, double y, double cell, int tag) {
    const double gx = x / cell, gy = y / cell;
    const int64_t ix = static_cast<int64_t>(std::floor(gx));
    const int64_t iy = static_cast<int64_t>(std::floor(gy));
    const double sx = smooth(gx - static_cast<double>(ix));
    const double sy = smooth(gy - static_cast<double>(iy));
    const double v00 = lattice(seed, ix, iy, tag), v10 = lattice(seed, ix + 1, iy, tag);
    const double v01 = lattice(seed, ix, iy + 1, tag), v11 = lattice(seed, ix + 1, iy + 1, tag);
    const double a = v00 + (v10 - v00) * sx;
    const double b = v01 + (v11 - v01) * sx;
    return a + (b - a) * sy;
}

}  // namespace detail

// Texture value for one channel at layer-local real coordinates.
inline double texture_value(Pattern pattern, uint64_t seed, double u, double v, int channel,
                            double contrast) {
    double base = 0.5;
    double chan = 0.5;
    switch (pattern) {
        case Pattern::Noise:
            base = 0.6 * detail::value_noise(seed, u, v, 7.0, 0) +
                   0.4 * detail::value_noise(seed, u, v, 3.0, 1);
            chan = detail::value_noise(seed, u, v, 5.0, 16 + channel);
            break;
        case Pattern::Checker:
            base = 0.5 + 0.5 * std::sin(u * (2.0 * 3.141592653589793 / 9.0)) *
                             std::sin(v * (2.0 * 3.141592653589793 / 9.0));
            chan = detail::lattice(seed, 0, 0, 32 + channel);
            break;
        case Pattern::Rings: {
            const double r = std::sqrt(u * u + v * v);
            base = 0.5 + 0.5 * std::sin(r * (2.0 * 3.141592653589793 / 8.0));
            chan = detail::lattice(seed, 0, 0, 32 + channel);
            break;
        }
        case Pattern::Flat:
            base = 0.5;
            chan = detail::lattice(seed, 0, 0, 32 + channel);
            break;
    }
    const double mixed = 0.6 * base + 0.4 * chan;
    const double out = 0.5 + (mixed - 0.5) * contrast;
    return std::clamp(out, 0.0, 1.0);
}

// ---- validation ----------------------------------------------------------

inline void validate(const SceneSpec& spec) {
    require(!spec.layers.empty(), "scenegen: need at least one layer");
    require(spec.frames >= 1 && spec.width >= 1 && spec.height >= 1,
            "scenegen: frames/width/height must be positive");
    require(spec.d_max <= static_cast<double>(spec.width) / 8.0,
            "scenegen: d_max exceeds width/8");
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const Layer& l = spec.layers[i];
        require(l.depth > 0.0, "scenegen: layer depth must be > 0");
        require(l.disparity >= 0.0, "scenegen: negative layer disparity");
        require(l.disparity <= spec.d_max, "scenegen: layer disparity exceeds d_max");
        if (l.disparity >= static_cast<double>(spec.width))
            throw std::invalid_argument("scenegen: layer disparity >= width (degenerate shift)");
        // d = bf / Z up to float rounding; a +inf backdrop carries d = 0.
        const double expect = std::isinf(l.depth) ? 0.0 : spec.bf / l.depth;
        require(std::abs(l.disparity - expect) <= 1e-9 * std::max(1.0, l.disparity),
                "scenegen: disparity inconsistent with depth under (B,f)");
        if (i > 0) {
            require(spec.layers[i].depth < spec.layers[i - 1].depth,
                    "scenegen: layer depths must be strictly decreasing (far->near)");
            require(spec.layers[i].disparity > spec.layers[i - 1].disparity,
                    "scenegen: nearer layer must have strictly larger disparity");
        }
    }
    // The farthest layer acts as the backdrop: it must cover the left frame
    // and the extra band the right view reveals, at every frame.
    const Layer& bg = spec.layers[0];
    for (int f = 0; f < spec.frames; ++f) {
        const double ox = bg.x0 + bg.vx * f, oy = bg.y0 + bg.vy * f;
        const bool covers = ox <= 0.0 && oy <= 0.0 &&
                            ox + bg.w >= static_cast<double>(spec.width) + bg.disparity &&
                            oy + bg.h >= static_cast<double>(spec.height);
        require(covers, "scenegen: farthest layer must cover the full frame in both views");
    }
}

// ---- rendering -----------------------------------------------------------

namespace detail {

// Index of the front-most layer covering pixel x (plus view shift) or -1.
// `shift` is 0 for the left view and the layer's own disparity for the right.
inline int front_layer(const SceneSpec& spec, double x, double y, int f, bool right_view) {
    for (int i = static_cast<int>(spec.layers.size()) - 1; i >= 0; --i) {
        const Layer& l = spec.layers[i];
        const double ox = l.x0 + l.vx * f, oy = l.y0 + l.vy * f;
        const double u = x + (right_view ? l.disparity : 0.0) - ox;
        const double v = y - oy;
        if (u >= 0.0 && u < l.w && v >= 0.0 && v < l.h) return i;
    }
    return -1;
}

}  // namespace detail

inline StereoSample render_clip(const SceneSpec& spec) {
    validate(spec);
    const int64_t F = spec.frames, H = spec.height, W = spec.width;
    StereoSample out;
    out.left = Tensor({3, F, H, W});
    out.right = Tensor({3, F, H, W});
    out.depth_r = Tensor({1, F, H, W});
    out.disp_gt = Tensor({F, H, W});
    out.occ_mask = Tensor({F, H, W});

    double zmin = std::numeric_limits<double>::infinity(), zmax = 0.0;
    for (const Layer& l : spec.layers) {
        zmin = std::min(zmin, l.depth);
        zmax = std::max(zmax, l.depth);
    }
    const double inv_min = 1.0 / zmax;  // inverse depth of the farthest layer (0 for inf)
    const double inv_max = 1.0 / zmin;
    const double inv_span = inv_max - inv_min;

    for (int64_t f = 0; f < F; ++f) {
        for (int64_t y = 0; y < H; ++y) {
            for (int64_t x = 0; x < W; ++x) {
                const int li = detail::front_layer(spec, double(x), double(y), int(f), false);
                const Layer& l = spec.layers[static_cast<size_t>(li)];
                const double lox = l.x0 + l.vx * f, loy = l.y0 + l.vy * f;
                for (int c = 0; c < 3; ++c)
                    out.left.at(c, f, y, x) = texture_value(l.pattern, l.tex_seed, double(x) - lox,
                                                            double(y) - loy, c, l.contrast);
                out.disp_gt.at(f, y, x) = l.disparity;

                const double xr = double(x) - l.disparity;
                bool visible = xr >= 0.0 && xr < double(W);
                if (visible) {
                    const int ri = detail::front_layer(spec, xr, double(y), int(f), true);
                    visible = ri == li;
                }
                out.occ_mask.at(f, y, x) = visible ? 1.0 : 0.0;

                const int ri = detail::front_layer(spec, double(x), double(y), int(f), true);
                const Layer& r = spec.layers[static_cast<size_t>(ri)];
                const double rox = r.x0 + r.vx * f, roy = r.y0 + r.vy * f;
                for (int c = 0; c < 3; ++c)
                    out.right.at(c, f, y, x) =
                        texture_value(r.pattern, r.tex_seed, double(x) + r.disparity - rox,
                                      double(y) - roy, c, r.contrast);
                out.depth_r.at(0, f, y, x) =
                    inv_span > 0.0 ? (1.0 / r.depth - inv_min) / inv_span : 1.0;
            }
        }
    }
    return out;
}

// ---- dataset generation ---------------------------------------------------

struct SpecRanges {
    int width = 32;
    int height = 32;
    int frames = 8;
    double d_max = 4.0;
    int min_layers = 2;
    int max_layers = 4;
    double max_speed = 0.5;      // px/frame
    double min_contrast = 0.7;
    double max_contrast = 1.0;
    bool subpixel = false;
    double bf = 8.0;
};

inline SceneSpec random_spec(const SpecRanges& r, uint64_t seed, uint64_t index) {
    require(r.d_max <= static_cast<double>(r.width) / 8.0, "scenegen: d_max exceeds width/8");
    const int d_top = std::max(1, static_cast<int>(std::floor(r.d_max)));
    auto u = [&](uint64_t field) {
        return rng::uniform(seed, rng::Stream::SceneSpec, index, field);
    };
    SceneSpec spec;
    spec.seed = rng::key(seed, rng::Stream::SceneSpec, index);
    spec.frames = r.frames;
    spec.width = r.width;
    spec.height = r.height;
    spec.d_max = r.d_max;
    spec.bf = r.bf;
    spec.subpixel = r.subpixel;

    const int want = std::min({r.min_layers + static_cast<int>(u(0) * (r.max_layers - r.min_layers + 1)),
                               r.max_layers, d_top + 1});
    const int n_layers = std::max(1, want);

    // Distinct disparities, increasing far -> near; the backdrop sits at 0.
    std::vector<double> disp{0.0};
    std::vector<int> pool;
    for (int d = 1; d <= d_top; ++d) pool.push_back(d);
    for (int i = 1; i < n_layers; ++i) {
        const size_t pick = std::min(pool.size() - 1,
                                     static_cast<size_t>(u(10 + i) * double(pool.size())));
        double d = pool[pick];
        pool.erase(pool.begin() + static_cast<long>(pick));
        if (r.subpixel) d = std::min(r.d_max, d + 0.5 * u(40 + i));
        disp.push_back(d);
    }
    std::sort(disp.begin(), disp.end());

    const double margin = r.max_speed * r.frames + r.d_max + 2.0;
    for (int i = 0; i < n_layers; ++i) {
        Layer l;
        l.disparity = disp[static_cast<size_t>(i)];
        l.depth = l.disparity > 0.0 ? r.bf / l.disparity
                                    : std::numeric_limits<double>::infinity();
        l.tex_seed = rng::key(seed, rng::Stream::SceneSpec, index, 100 + i);
        l.contrast = r.min_contrast + (r.max_contrast - r.min_contrast) * u(200 + i);
        if (i == 0) {
            l.pattern = Pattern::Noise;
            l.x0 = -margin;
            l.y0 = -margin;
            l.w = r.width + 2.0 * margin;
            l.h = r.height + 2.0 * margin;
            l.vx = 0.0;
            l.vy = 0.0;
        } else {
            const int pat = static_cast<int>(u(300 + i) * 3.0);
            l.pattern = static_cast<Pattern>(std::min(pat, 2));
            l.w = (0.3 + 0.4 * u(400 + i)) * r.width;
            l.h = (0.3 + 0.4 * u(500 + i)) * r.height;
            l.x0 = u(600 + i) * (r.width - l.w);
            l.y0 = u(700 + i) * (r.height - l.h);
            l.vx = (2.0 * u(800 + i) - 1.0) * r.max_speed;
            l.vy = (2.0 * u(900 + i) - 1.0) * r.max_speed;
        }
        spec.layers.push_back(l);
    }
    return spec;
}

inline Manifest write_dataset(int n_clips, const SpecRanges& ranges, uint64_t seed,
                              const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("scenegen: cannot create " + out_dir + ": " + ec.message());

    Manifest m;
    for (int i = 0; i < n_clips; ++i) {
        const SceneSpec spec = random_spec(ranges, seed, static_cast<uint64_t>(i));
        const StereoSample s = render_clip(spec);
        char id[32];
        std::snprintf(id, sizeof(id), "clip%04d", i);
        ClipEntry e;
        e.id = id;
        e.seed = spec.seed;
        e.d_max = ranges.d_max;
        e.space["disp"] = "pixel";
        auto emit = [&](const std::string& role, const Tensor& t, io::DType dt) {
            const std::string file = std::string(id) + "_" + role + ".stw";
            io::write_tensor(out_dir + "/" + file, t, dt);
            e.files[role] = file;
            e.shapes[role] = t.shape();
        };
        emit("left", s.left, io::DType::F32);
        emit("right", s.right, io::DType::F32);
        emit("depth", s.depth_r, io::DType::F32);
        emit("disp", s.disp_gt, io::DType::F32);
        emit("occ", s.occ_mask, io::DType::Bool);
        m.clips.push_back(std::move(e));
    }
    m.save(out_dir + "/manifest.json");
    return m;
}

// Loads one clip's tensors back from a manifest directory.
inline StereoSample load_sample(const std::string& data_dir, const ClipEntry& e) {
    StereoSample s;
    auto get = [&](const std::string& role) -> Tensor {
        auto it = e.files.find(role);
        if (it == e.files.end())
            throw std::runtime_error("scenegen: clip '" + e.id + "' lacks file role '" + role + "'");
        return io::read_tensor(data_dir + "/" + it->second);
    };
    s.left = get("left");
    s.right = get("right");
    s.depth_r = get("depth");
    s.disp_gt = get("disp");
    s.occ_mask = get("occ");
    return s;
}

}  // namespace stw::scenegen
