#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "stereoworld/codec.hpp"
#include "stereoworld/geometry.hpp"
#include "stereoworld/manifest.hpp"
#include "stereoworld/scenegen.hpp"
#include "stereoworld/tensor.hpp"

namespace stw::evalsuite {

// Stereo generation metrics: PSNR/SSIM against the ground-truth right view,
// EPE/D1-all on projector disparities. Disparity metrics are reported two
// ways: projector-vs-projector (the same projector on real and generated
// pairs, removing projector bias) and projector-vs-exact-GT.

inline double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "evalsuite.mse");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

// Range-[0,1] PSNR; identical inputs return the +inf sentinel.
inline double psnr(const Tensor& a, const Tensor& b) {
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size));
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        w[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Mean local SSIM over valid 11x11 windows of one (h,w) plane pair.
inline double ssim_plane(const double* a, const double* b, int64_t h, int64_t w) {
    constexpr int win = 11;
    constexpr double k1 = 0.01, k2 = 0.03;
    constexpr double c1 = k1 * k1, c2 = k2 * k2;  // L = 1
    static const std::vector<double> g = gaussian_window(win, 1.5);
    double total = 0.0;
    int64_t count = 0;
    for (int64_t y = 0; y + win <= h; ++y)
        for (int64_t x = 0; x + win <= w; ++x) {
            double mu_a = 0.0, mu_b = 0.0, va = 0.0, vb = 0.0, cov = 0.0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const double wt = g[static_cast<size_t>(i)] * g[static_cast<size_t>(j)];
                    const double pa = a[(y + i) * w + (x + j)];
                    const double pb = b[(y + i) * w + (x + j)];
                    mu_a += wt * pa;
                    mu_b += wt * pb;
                    va += wt * pa * pa;
                    vb += wt * pb * pb;
                    cov += wt * pa * pb;
                }
            va -= mu_a * mu_a;
            vb -= mu_b * mu_b;
            cov -= mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                     ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            ++count;
        }
    return total / static_cast<double>(count);
}

}  // namespace detail

// Standard SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// averaged over frames and channels.
inline double ssim_frame(const Tensor& a, const Tensor& b, int64_t f) {
    const int64_t H = a.dim(2), W = a.dim(3);
    double s = 0.0;
    for (int64_t c = 0; c < a.dim(0); ++c)
        s += detail::ssim_plane(a.data() + (c * a.dim(1) + f) * H * W,
                                b.data() + (c * b.dim(1) + f) * H * W, H, W);
    return s / static_cast<double>(a.dim(0));
}

inline double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "evalsuite.ssim");
    require(a.rank() == 4, "evalsuite.ssim: expected (c,f,h,w)");
    require(a.dim(2) >= 11 && a.dim(3) >= 11, "evalsuite.ssim: frames smaller than the window");
    double s = 0.0;
    for (int64_t f = 0; f < a.dim(1); ++f) s += ssim_frame(a, b, f);
    return s / static_cast<double>(a.dim(1));
}

namespace detail {

inline void check_pair(const geometry::DisparityMap& a, const geometry::DisparityMap& b) {
    require_same_shape(a.values, b.values, "evalsuite: disparity shape");
    require(a.space == b.space, "evalsuite: disparity maps live in different spaces");
}

}  // namespace detail

// Mean absolute disparity error over the joint valid mask.
inline double epe(const geometry::DisparityMap& pred, const geometry::DisparityMap& gt) {
    detail::check_pair(pred, gt);
    double s = 0.0, n = 0.0;
    for (int64_t i = 0; i < pred.values.numel(); ++i) {
        if (pred.valid[i] == 0.0 || gt.valid[i] == 0.0) continue;
        s += std::abs(pred.values[i] - gt.values[i]);
        n += 1.0;
    }
    if (n == 0.0) throw std::invalid_argument("evalsuite.epe: empty joint valid mask");
    return s / n;
}

enum class D1Rule { And, Or };  // err > 3px AND/OR err > 5% of gt

inline double d1_all(const geometry::DisparityMap& pred, const geometry::DisparityMap& gt,
                     D1Rule rule = D1Rule::And) {
    detail::check_pair(pred, gt);
    double bad = 0.0, n = 0.0;
    for (int64_t i = 0; i < pred.values.numel(); ++i) {
        if (pred.valid[i] == 0.0 || gt.valid[i] == 0.0) continue;
        const double err = std::abs(pred.values[i] - gt.values[i]);
        const bool over_px = err > 3.0;
        const bool over_rel = err > 0.05 * std::abs(gt.values[i]);
        bad += (rule == D1Rule::And ? (over_px && over_rel) : (over_px || over_rel)) ? 1.0 : 0.0;
        n += 1.0;
    }
    if (n == 0.0) throw std::invalid_argument("evalsuite.d1_all: empty joint valid mask");
    return bad / n;
}

struct MetricsReport {
    std::string clip_id;
    double psnr_db = 0.0;
    double ssim_score = 0.0;
    double epe_px = 0.0;      // projector-vs-projector
    double d1 = 0.0;          // projector-vs-projector
    double epe_vs_gt = 0.0;   // projector on generated pair vs exact GT
    double d1_vs_gt = 0.0;
    std::vector<double> psnr_frames, ssim_frames, epe_frames, d1_frames;
    Json config;
    Json external = Json::object();

    Json to_json() const {
        auto num = [](double v) -> Json {
            if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
            return v;
        };
        Json series = Json::object();
        auto arr = [&](const std::vector<double>& v) {
            Json a = Json::array();
            for (double x : v) a.push_back(num(x));
            return a;
        };
        series["psnr"] = arr(psnr_frames);
        series["ssim"] = arr(ssim_frames);
        series["epe"] = arr(epe_frames);
        series["d1_all"] = arr(d1_frames);
        Json j;
        j["clip"] = clip_id;
        j["psnr"] = num(psnr_db);
        j["ssim"] = num(ssim_score);
        j["epe"] = num(epe_px);
        j["d1_all"] = num(d1);
        j["epe_vs_gt"] = num(epe_vs_gt);
        j["d1_all_vs_gt"] = num(d1_vs_gt);
        j["per_frame"] = series;
        j["config"] = config;
        j["external"] = external;
        return j;
    }

    static double parse_num(const Json& v) {
        if (v.is_string()) {
            const std::string s = v.get<std::string>();
            if (s == "inf") return std::numeric_limits<double>::infinity();
            if (s == "-inf") return -std::numeric_limits<double>::infinity();
            throw std::invalid_argument("evalsuite: bad numeric string '" + s + "'");
        }
        return v.get<double>();
    }

    static MetricsReport from_json(const Json& j) {
        MetricsReport r;
        r.clip_id = j.at("clip").get<std::string>();
        r.psnr_db = parse_num(j.at("psnr"));
        r.ssim_score = parse_num(j.at("ssim"));
        r.epe_px = parse_num(j.at("epe"));
        r.d1 = parse_num(j.at("d1_all"));
        r.epe_vs_gt = parse_num(j.at("epe_vs_gt"));
        r.d1_vs_gt = parse_num(j.at("d1_all_vs_gt"));
        auto arr = [&](const char* key) {
            std::vector<double> v;
            for (const auto& e : j.at("per_frame").at(key)) v.push_back(parse_num(e));
            return v;
        };
        r.psnr_frames = arr("psnr");
        r.ssim_frames = arr("ssim");
        r.epe_frames = arr("epe");
        r.d1_frames = arr("d1_all");
        r.config = j.value("config", Json::object());
        r.external = j.value("external", Json::object());
        return r;
    }

    std::string csv_header() const {
        return "clip,psnr,ssim,epe,d1_all,epe_vs_gt,d1_all_vs_gt";
    }

    std::string csv_row() const {
        std::ostringstream os;
        os << clip_id << "," << psnr_db << "," << ssim_score << "," << epe_px << "," << d1 << ","
           << epe_vs_gt << "," << d1_vs_gt;
        return os.str();
    }
};

namespace detail {

inline geometry::DisparityMap slice_frame(const geometry::DisparityMap& m, int64_t f) {
    geometry::DisparityMap out;
    const int64_t H = m.values.dim(1), W = m.values.dim(2);
    out.values = Tensor({1, H, W});
    out.valid = Tensor({1, H, W});
    for (int64_t i = 0; i < H * W; ++i) {
        out.values[i] = m.values[f * H * W + i];
        out.valid[i] = m.valid[f * H * W + i];
    }
    out.space = m.space;
    return out;
}

inline Tensor video_frame(const Tensor& v, int64_t f) {
    const int64_t C = v.dim(0), H = v.dim(2), W = v.dim(3);
    Tensor out({C, 1, H, W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H * W; ++i) out[(c * 1 + 0) * H * W + i] = v[(c * v.dim(1) + f) * H * W + i];
    return out;
}

}  // namespace detail

// Full paired evaluation of a generated right view against one StereoSample.
inline MetricsReport evaluate_pair(const Tensor& gen_right, const scenegen::StereoSample& sample,
                                   const geometry::ProjectorConfig& pc,
                                   const codec::CodecConfig& cc, D1Rule rule = D1Rule::And,
                                   const std::string& clip_id = "") {
    require_same_shape(gen_right, sample.right, "evalsuite.evaluate_pair");
    MetricsReport r;
    r.clip_id = clip_id;
    r.psnr_db = psnr(gen_right, sample.right);
    r.ssim_score = ssim(gen_right, sample.right);

    const Tensor z_l = codec::encode(sample.left, cc);
    const Tensor z_r = codec::encode(sample.right, cc);
    const Tensor z_g = codec::encode(gen_right, cc);
    geometry::DisparityMap d_gen = geometry::project_disparity(z_l, z_g, pc, cc);
    geometry::DisparityMap d_ref = geometry::project_disparity(z_l, z_r, pc, cc);
    // Occlusion-aware masks: metric pixels must be unoccluded and inside the
    // projector's full search window.
    for (int64_t i = 0; i < d_gen.valid.numel(); ++i) {
        d_gen.valid[i] *= sample.occ_mask[i];
        d_ref.valid[i] *= sample.occ_mask[i];
    }
    geometry::DisparityMap d_gt;
    d_gt.values = sample.disp_gt;
    d_gt.valid = sample.occ_mask;
    d_gt.space = geometry::DisparityMap::Space::Pixel;

    r.epe_px = epe(d_gen, d_ref);
    r.d1 = d1_all(d_gen, d_ref, rule);
    r.epe_vs_gt = epe(d_gen, d_gt);
    r.d1_vs_gt = d1_all(d_gen, d_gt, rule);

    const int64_t F = gen_right.dim(1);
    for (int64_t f = 0; f < F; ++f) {
        r.psnr_frames.push_back(psnr(detail::video_frame(gen_right, f),
                                     detail::video_frame(sample.right, f)));
        r.ssim_frames.push_back(ssim_frame(gen_right, sample.right, f));
        const auto gen_f = detail::slice_frame(d_gen, f);
        const auto ref_f = detail::slice_frame(d_ref, f);
        r.epe_frames.push_back(epe(gen_f, ref_f));
        r.d1_frames.push_back(d1_all(gen_f, ref_f, rule));
    }
    r.config = Json{{"s_max", pc.s_max},
                    {"tau", pc.tau},
                    {"cost", pc.cost == geometry::ProjectorConfig::Cost::NegL2 ? "neg-l2" : "corr"},
                    {"d1_rule", rule == D1Rule::And ? "and" : "or"}};
    return r;
}

}  // namespace stw::evalsuite
