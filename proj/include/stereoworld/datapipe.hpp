#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "stereoworld/image_io.hpp"
#include "stereoworld/manifest.hpp"
#include "stereoworld/tensor.hpp"
#include "stereoworld/tensor_file.hpp"

namespace stw::datapipe {

// Side-by-side stereo ingestion: split SBS frames into views, area-average
// downscale to the training resolution, sample a fixed frame count at a
// constant stride, and emit the shared tensor format plus manifest entries.

enum class SbsMode { Full, Half };

inline SbsMode parse_sbs_mode(const std::string& s) {
    if (s == "full") return SbsMode::Full;
    if (s == "half") return SbsMode::Half;
    throw std::invalid_argument("datapipe: unknown SBS mode '" + s + "'");
}

// Horizontal stretch by linear interpolation (half-SBS view restoration).
inline Tensor hstretch_linear(const Tensor& img, int64_t new_w) {
    require(img.rank() == 3, "datapipe: expected (c,h,w) image");
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out({c, h, new_w});
    const double scale = static_cast<double>(w) / static_cast<double>(new_w);
    for (int64_t x = 0; x < new_w; ++x) {
        double u = (static_cast<double>(x) + 0.5) * scale - 0.5;
        u = std::clamp(u, 0.0, static_cast<double>(w - 1));
        const int64_t x0 = static_cast<int64_t>(std::floor(u));
        const int64_t x1 = std::min(x0 + 1, w - 1);
        const double a = u - static_cast<double>(x0);
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h; ++y)
                out.at(ci, y, x) = (1.0 - a) * img.at(ci, y, x0) + a * img.at(ci, y, x1);
    }
    return out;
}

inline std::pair<Tensor, Tensor> split_sbs(const Tensor& frame, SbsMode mode) {
    require(frame.rank() == 3, "datapipe.split_sbs: expected (c,h,w) frame");
    const int64_t c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
    if (w % 2 != 0) throw std::invalid_argument("datapipe.split_sbs: odd frame width");
    const int64_t half = w / 2;
    Tensor left({c, h, half}), right({c, h, half});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < half; ++x) {
                left.at(ci, y, x) = frame.at(ci, y, x);
                right.at(ci, y, x) = frame.at(ci, y, x + half);
            }
    if (mode == SbsMode::Half) {
        left = hstretch_linear(left, w);
        right = hstretch_linear(right, w);
    }
    return {std::move(left), std::move(right)};
}

inline Tensor hconcat(const Tensor& left, const Tensor& right) {
    require_same_shape(left, right, "datapipe.hconcat");
    const int64_t c = left.dim(0), h = left.dim(1), w = left.dim(2);
    Tensor out({c, h, 2 * w});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                out.at(ci, y, x) = left.at(ci, y, x);
                out.at(ci, y, x + w) = right.at(ci, y, x);
            }
    return out;
}

// Anti-aliased area-average resize: each output pixel averages the source
// rectangle it covers, with fractional edge weights.
inline Tensor resize_area(const Tensor& img, int64_t oh, int64_t ow) {
    require(img.rank() == 3, "datapipe: expected (c,h,w) image");
    require(oh >= 1 && ow >= 1, "datapipe: bad target size");
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    Tensor out({c, oh, ow});
    for (int64_t oy = 0; oy < oh; ++oy) {
        const double y0 = oy * sy, y1 = (oy + 1) * sy;
        const int64_t iy0 = static_cast<int64_t>(std::floor(y0));
        const int64_t iy1 = std::min(static_cast<int64_t>(std::ceil(y1)), h);
        for (int64_t ox = 0; ox < ow; ++ox) {
            const double x0 = ox * sx, x1 = (ox + 1) * sx;
            const int64_t ix0 = static_cast<int64_t>(std::floor(x0));
            const int64_t ix1 = std::min(static_cast<int64_t>(std::ceil(x1)), w);
            for (int64_t ci = 0; ci < c; ++ci) {
                double acc = 0.0, area = 0.0;
                for (int64_t y = iy0; y < iy1; ++y) {
                    const double wy = std::min(y1, static_cast<double>(y + 1)) -
                                      std::max(y0, static_cast<double>(y));
                    for (int64_t x = ix0; x < ix1; ++x) {
                        const double wx = std::min(x1, static_cast<double>(x + 1)) -
                                          std::max(x0, static_cast<double>(x));
                        acc += wy * wx * img.at(ci, y, x);
                        area += wy * wx;
                    }
                }
                out.at(ci, oy, ox) = acc / area;
            }
        }
    }
    return out;
}

// stride = floor(total/want) clamped to >= 1; indices {0, stride, ...}.
inline std::vector<int> sample_frames(int total, int want = 81) {
    if (want < 1) throw std::invalid_argument("datapipe.sample_frames: want must be >= 1");
    if (total < want)
        throw std::invalid_argument("datapipe.sample_frames: clip too short (" +
                                    std::to_string(total) + " < " + std::to_string(want) + ")");
    const int stride = std::max(1, total / want);
    std::vector<int> idx(static_cast<size_t>(want));
    for (int i = 0; i < want; ++i) idx[static_cast<size_t>(i)] = i * stride;
    return idx;
}

struct ClipRecord {
    std::string left_path;
    std::string right_path;
    std::vector<int> frame_indices;
    std::string source_id;
    int64_t height = 0;
    int64_t width = 0;
};

struct IngestConfig {
    SbsMode mode = SbsMode::Full;
    int64_t target_h = 480;
    int64_t target_w = 832;
    int frames_per_clip = 81;
};

namespace detail {

inline std::vector<std::string> list_images(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string p = e.path().string();
        if (imgio::has_suffix(p, ".ppm") || imgio::has_suffix(p, ".png")) files.push_back(p);
    }
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace detail

// Ingests one ordered SBS image-sequence directory into left/right clip
// tensors. Unreadable frames are skipped with a warning; the clip is dropped
// if fewer than frames_per_clip frames survive.
inline std::vector<ClipRecord> ingest(const std::string& src_dir, const IngestConfig& cfg,
                                      const std::string& out_dir, Manifest* manifest_out = nullptr) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("datapipe: cannot create " + out_dir + ": " + ec.message());

    std::vector<std::string> clip_dirs;
    bool has_subdirs = false;
    for (const auto& e : fs::directory_iterator(src_dir))
        if (e.is_directory()) {
            clip_dirs.push_back(e.path().string());
            has_subdirs = true;
        }
    if (!has_subdirs) clip_dirs.push_back(src_dir);
    std::sort(clip_dirs.begin(), clip_dirs.end());

    Manifest manifest;
    std::vector<ClipRecord> records;
    int clip_no = 0;
    for (const auto& dir : clip_dirs) {
        const auto files = detail::list_images(dir);
        std::vector<Tensor> lefts, rights;
        for (const auto& f : files) {
            try {
                Tensor frame = imgio::read_image(f);
                auto [l, r] = split_sbs(frame, cfg.mode);
                lefts.push_back(resize_area(l, cfg.target_h, cfg.target_w));
                rights.push_back(resize_area(r, cfg.target_h, cfg.target_w));
            } catch (const std::exception& ex) {
                std::cerr << "[datapipe] warning: skipping frame " << f << ": " << ex.what()
                          << "\n";
            }
        }
        if (static_cast<int>(lefts.size()) < cfg.frames_per_clip) {
            std::cerr << "[datapipe] warning: dropping clip " << dir << " ("
                      << lefts.size() << " usable frames < " << cfg.frames_per_clip << ")\n";
            continue;
        }
        const auto idx = sample_frames(static_cast<int>(lefts.size()), cfg.frames_per_clip);
        const int64_t F = cfg.frames_per_clip, H = cfg.target_h, W = cfg.target_w;
        Tensor left({3, F, H, W}), right({3, F, H, W});
        for (int64_t fi = 0; fi < F; ++fi) {
            const Tensor& lf = lefts[static_cast<size_t>(idx[static_cast<size_t>(fi)])];
            const Tensor& rf = rights[static_cast<size_t>(idx[static_cast<size_t>(fi)])];
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x = 0; x < W; ++x) {
                        left.at(c, fi, y, x) = lf.at(c, y, x);
                        right.at(c, fi, y, x) = rf.at(c, y, x);
                    }
        }
        char id[32];
        std::snprintf(id, sizeof(id), "ingest%04d", clip_no++);
        ClipRecord rec;
        rec.source_id = dir;
        rec.frame_indices = idx;
        rec.height = H;
        rec.width = W;
        rec.left_path = std::string(id) + "_left.stw";
        rec.right_path = std::string(id) + "_right.stw";
        io::write_tensor(out_dir + "/" + rec.left_path, left, io::DType::F32);
        io::write_tensor(out_dir + "/" + rec.right_path, right, io::DType::F32);
        records.push_back(rec);

        ClipEntry e;
        e.id = id;
        e.files["left"] = rec.left_path;
        e.files["right"] = rec.right_path;
        e.shapes["left"] = left.shape();
        e.shapes["right"] = right.shape();
        manifest.clips.push_back(std::move(e));
    }
    manifest.save(out_dir + "/manifest.json");
    if (manifest_out) *manifest_out = manifest;
    return records;
}

}  // namespace stw::datapipe
