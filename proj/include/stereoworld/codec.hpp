#pragma once

#include "stereoworld/tensor.hpp"

namespace stw::codec {

// Lossless space-to-depth patchify codec. It defines the latent geometry
// (c', f', h', w') shared by the model, losses and tilers, and is exactly
// invertible so every geometric property downstream can be tested bit-exact.
struct CodecConfig {
    int patch_t = 1;
    int patch_h = 2;
    int patch_w = 2;
    int channels_in = 3;
};

inline void validate(const CodecConfig& cfg) {
    require(cfg.patch_t >= 1 && cfg.patch_h >= 1 && cfg.patch_w >= 1,
            "codec: patch sizes must be >= 1");
    require(cfg.channels_in >= 1, "codec: channels_in must be >= 1");
}

inline int latent_channels(const CodecConfig& cfg) {
    return cfg.channels_in * cfg.patch_t * cfg.patch_h * cfg.patch_w;
}

struct Padding {
    int frames = 0;
    int rows = 0;
    int cols = 0;
};

// Edge-replication pad so every dim divides its patch size.
inline Tensor pad_to_divisible(const Tensor& video, const CodecConfig& cfg,
                               Padding* out_pad = nullptr) {
    require(video.rank() == 4, "codec: video must be rank-4 (c,f,h,w)");
    const int64_t c = video.dim(0), f = video.dim(1), h = video.dim(2), w = video.dim(3);
    Padding pad;
    pad.frames = static_cast<int>((cfg.patch_t - f % cfg.patch_t) % cfg.patch_t);
    pad.rows = static_cast<int>((cfg.patch_h - h % cfg.patch_h) % cfg.patch_h);
    pad.cols = static_cast<int>((cfg.patch_w - w % cfg.patch_w) % cfg.patch_w);
    if (out_pad) *out_pad = pad;
    if (pad.frames == 0 && pad.rows == 0 && pad.cols == 0) return video;
    Tensor out({c, f + pad.frames, h + pad.rows, w + pad.cols});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t fi = 0; fi < f + pad.frames; ++fi)
            for (int64_t y = 0; y < h + pad.rows; ++y)
                for (int64_t x = 0; x < w + pad.cols; ++x)
                    out.at(ci, fi, y, x) = video.at(ci, std::min(fi, f - 1), std::min(y, h - 1),
                                                    std::min(x, w - 1));
    return out;
}

// (c,f,h,w) -> (c*pt*ph*pw, f/pt, h/ph, w/pw); pure rearrangement.
// Latent channel index packs as ((c*pt + dt)*ph + dy)*pw + dx, so a video
// shift by k*pw columns is exactly a latent shift by k columns.
inline Tensor encode(const Tensor& video, const CodecConfig& cfg) {
    validate(cfg);
    require(video.rank() == 4, "codec.encode: video must be rank-4 (c,f,h,w)");
    const int64_t c = video.dim(0), f = video.dim(1), h = video.dim(2), w = video.dim(3);
    require(c == cfg.channels_in, "codec.encode: channel count differs from config");
    require(f % cfg.patch_t == 0 && h % cfg.patch_h == 0 && w % cfg.patch_w == 0,
            "codec.encode: dims not divisible by patch sizes (pad first)");
    const int64_t fp = f / cfg.patch_t, hp = h / cfg.patch_h, wp = w / cfg.patch_w;
    Tensor latent({static_cast<int64_t>(latent_channels(cfg)), fp, hp, wp});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int dt = 0; dt < cfg.patch_t; ++dt)
            for (int dy = 0; dy < cfg.patch_h; ++dy)
                for (int dx = 0; dx < cfg.patch_w; ++dx) {
                    const int64_t cp = ((ci * cfg.patch_t + dt) * cfg.patch_h + dy) * cfg.patch_w + dx;
                    for (int64_t fi = 0; fi < fp; ++fi)
                        for (int64_t y = 0; y < hp; ++y)
                            for (int64_t x = 0; x < wp; ++x)
                                latent.at(cp, fi, y, x) =
                                    video.at(ci, fi * cfg.patch_t + dt, y * cfg.patch_h + dy,
                                             x * cfg.patch_w + dx);
                }
    return latent;
}

inline Tensor decode(const Tensor& latent, const CodecConfig& cfg) {
    validate(cfg);
    require(latent.rank() == 4, "codec.decode: latent must be rank-4");
    require(latent.dim(0) == latent_channels(cfg),
            "codec.decode: latent channel count differs from config");
    const int64_t fp = latent.dim(1), hp = latent.dim(2), wp = latent.dim(3);
    Tensor video({static_cast<int64_t>(cfg.channels_in), fp * cfg.patch_t, hp * cfg.patch_h,
                  wp * cfg.patch_w});
    for (int64_t ci = 0; ci < cfg.channels_in; ++ci)
        for (int dt = 0; dt < cfg.patch_t; ++dt)
            for (int dy = 0; dy < cfg.patch_h; ++dy)
                for (int dx = 0; dx < cfg.patch_w; ++dx) {
                    const int64_t cp = ((ci * cfg.patch_t + dt) * cfg.patch_h + dy) * cfg.patch_w + dx;
                    for (int64_t fi = 0; fi < fp; ++fi)
                        for (int64_t y = 0; y < hp; ++y)
                            for (int64_t x = 0; x < wp; ++x)
                                video.at(ci, fi * cfg.patch_t + dt, y * cfg.patch_h + dy,
                                         x * cfg.patch_w + dx) = latent.at(cp, fi, y, x);
                }
    return video;
}

// 1-channel maps (depth) are replicated to the codec's input channel count
// before encoding; decode_mono averages the replicas back.
inline Tensor replicate_channels(const Tensor& mono, int channels) {
    require(mono.rank() == 4 && mono.dim(0) == 1, "codec: expected 1-channel rank-4 input");
    Tensor out({static_cast<int64_t>(channels), mono.dim(1), mono.dim(2), mono.dim(3)});
    const int64_t per = mono.numel();
    for (int c = 0; c < channels; ++c)
        for (int64_t i = 0; i < per; ++i) out[c * per + i] = mono[i];
    return out;
}

inline Tensor decode_mono(const Tensor& latent, const CodecConfig& cfg) {
    Tensor full = decode(latent, cfg);
    Tensor out({1, full.dim(1), full.dim(2), full.dim(3)});
    const int64_t per = out.numel();
    for (int64_t i = 0; i < per; ++i) {
        double s = 0.0;
        for (int64_t c = 0; c < full.dim(0); ++c) s += full[c * per + i];
        out[i] = s / static_cast<double>(full.dim(0));
    }
    return out;
}

}  // namespace stw::codec
