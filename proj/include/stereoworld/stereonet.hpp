#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stereoworld/autodiff.hpp"
#include "stereoworld/codec.hpp"
#include "stereoworld/flowmatch.hpp"
#include "stereoworld/manifest.hpp"
#include "stereoworld/rng.hpp"
#include "stereoworld/tensor.hpp"
#include "stereoworld/tensor_file.hpp"

namespace stw::stereonet {

// Toy spatio-temporal transformer. The three latent streams (clean left,
// noisy right, noisy right-depth) are tokenized and concatenated along the
// frame axis; full self-attention fuses space, time and view in one pass.
// A shared trunk feeds two branches duplicated from its final blocks: the
// rgb branch reads out velocity at RIGHT token positions, the depth branch
// at DEPTH positions. LEFT tokens have no output head.

enum ViewType { VIEW_LEFT = 0, VIEW_RIGHT = 1, VIEW_DEPTH = 2 };

struct ModelConfig {
    int token_dim = 96;
    int num_heads = 6;
    int n_shared_blocks = 4;
    int n_branch_blocks = 2;
    int patch_h = 2;  // token patch over the latent grid
    int patch_w = 2;
    int max_frames = 32;
    int max_tokens_y = 64;
    int max_tokens_x = 64;
    int latent_channels = 12;
    int mlp_mult = 4;
    int time_features = 8;  // sinusoid pairs feeding the timestep MLP

    Json to_json() const {
        return Json{{"token_dim", token_dim},
                    {"num_heads", num_heads},
                    {"n_shared_blocks", n_shared_blocks},
                    {"n_branch_blocks", n_branch_blocks},
                    {"patch_h", patch_h},
                    {"patch_w", patch_w},
                    {"max_frames", max_frames},
                    {"max_tokens_y", max_tokens_y},
                    {"max_tokens_x", max_tokens_x},
                    {"latent_channels", latent_channels},
                    {"mlp_mult", mlp_mult},
                    {"time_features", time_features}};
    }

    static ModelConfig from_json(const Json& j) {
        ModelConfig c;
        c.token_dim = j.at("token_dim");
        c.num_heads = j.at("num_heads");
        c.n_shared_blocks = j.at("n_shared_blocks");
        c.n_branch_blocks = j.at("n_branch_blocks");
        c.patch_h = j.at("patch_h");
        c.patch_w = j.at("patch_w");
        c.max_frames = j.at("max_frames");
        c.max_tokens_y = j.at("max_tokens_y");
        c.max_tokens_x = j.at("max_tokens_x");
        c.latent_channels = j.at("latent_channels");
        c.mlp_mult = j.at("mlp_mult");
        c.time_features = j.at("time_features");
        return c;
    }
};

inline void validate(const ModelConfig& cfg) {
    require(cfg.token_dim >= 1 && cfg.num_heads >= 1, "stereonet: bad dims");
    require(cfg.token_dim % cfg.num_heads == 0,
            "stereonet: token_dim not divisible by num_heads");
    require(cfg.n_shared_blocks >= 1, "stereonet: n_shared_blocks must be >= 1");
    require(cfg.n_branch_blocks >= 1, "stereonet: n_branch_blocks must be >= 1");
    require(cfg.patch_h >= 1 && cfg.patch_w >= 1, "stereonet: bad token patch");
    require(cfg.latent_channels >= 1 && cfg.mlp_mult >= 1 && cfg.time_features >= 1,
            "stereonet: bad dims");
}

struct LinearParams {
    Tensor W;  // [dout, din]
    Tensor b;  // [dout]
    bool lora = false;
    Tensor A;  // [dout, rank]
    Tensor B;  // [rank, din]
};

struct BlockParams {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    LinearParams wq, wk, wv, wo, fc1, fc2;
};

struct ModelParams {
    ModelConfig cfg;
    int lora_rank = 0;  // 0 = full fine-tune; >0 = only adapters trainable
    LinearParams token_in;
    Tensor emb_view;   // [3, d]
    Tensor emb_frame;  // [max_frames, d], shared across views
    Tensor emb_y;      // [max_tokens_y, d]
    Tensor emb_x;      // [max_tokens_x, d]
    LinearParams time_fc1, time_fc2;
    std::vector<BlockParams> shared;
    std::vector<BlockParams> rgb;
    std::vector<BlockParams> depth;
    Tensor ln_rgb_g, ln_rgb_b, ln_dep_g, ln_dep_b;
    LinearParams head_rgb, head_dep;
};

// ---- construction ----------------------------------------------------------

namespace detail {

struct Init {
    uint64_t seed;
    uint64_t slot = 0;
    Tensor gauss(std::vector<int64_t> shape, double std) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i)
            t[i] = std * rng::gaussian(seed, rng::Stream::Init, slot, static_cast<uint64_t>(i));
        ++slot;
        return t;
    }
    Tensor zeros(std::vector<int64_t> shape) {
        ++slot;
        return Tensor(std::move(shape));
    }
    Tensor ones(std::vector<int64_t> shape) {
        ++slot;
        return Tensor(std::move(shape), 1.0);
    }
};

inline LinearParams make_linear(Init& init, int64_t dout, int64_t din, double std) {
    LinearParams l;
    l.W = std > 0.0 ? init.gauss({dout, din}, std) : init.zeros({dout, din});
    l.b = init.zeros({dout});
    return l;
}

inline BlockParams make_block(Init& init, int64_t d, int64_t mlp, double resid_std_scale) {
    BlockParams b;
    b.ln1_g = init.ones({d});
    b.ln1_b = init.zeros({d});
    b.ln2_g = init.ones({d});
    b.ln2_b = init.zeros({d});
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    b.wq = make_linear(init, d, d, s);
    b.wk = make_linear(init, d, d, s);
    b.wv = make_linear(init, d, d, s);
    b.wo = make_linear(init, d, d, s * resid_std_scale);
    b.fc1 = make_linear(init, mlp, d, s);
    b.fc2 = make_linear(init, d, mlp, resid_std_scale / std::sqrt(static_cast<double>(mlp)));
    return b;
}

}  // namespace detail

// Deterministic init; the two branches are byte-identical duplicates of the
// trunk's final blocks at creation.
inline ModelParams build(const ModelConfig& cfg, uint64_t seed) {
    validate(cfg);
    detail::Init init{seed};
    ModelParams p;
    p.cfg = cfg;
    const int64_t d = cfg.token_dim;
    const int64_t din = static_cast<int64_t>(cfg.latent_channels) * cfg.patch_h * cfg.patch_w;
    const int64_t mlp = d * cfg.mlp_mult;
    const int n_total = cfg.n_shared_blocks + cfg.n_branch_blocks;
    const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(n_total));

    p.token_in = detail::make_linear(init, d, din, 1.0 / std::sqrt(static_cast<double>(din)));
    p.emb_view = init.gauss({3, d}, 0.02);
    p.emb_frame = init.gauss({cfg.max_frames, d}, 0.02);
    p.emb_y = init.gauss({cfg.max_tokens_y, d}, 0.02);
    p.emb_x = init.gauss({cfg.max_tokens_x, d}, 0.02);
    const int64_t tf = 2 * cfg.time_features;
    p.time_fc1 = detail::make_linear(init, d, tf, 1.0 / std::sqrt(static_cast<double>(tf)));
    p.time_fc2 = detail::make_linear(init, d, d, 1.0 / std::sqrt(static_cast<double>(d)));

    std::vector<BlockParams> trunk;
    for (int i = 0; i < n_total; ++i) trunk.push_back(detail::make_block(init, d, mlp, resid_scale));
    p.shared.assign(trunk.begin(), trunk.begin() + cfg.n_shared_blocks);
    p.rgb.assign(trunk.begin() + cfg.n_shared_blocks, trunk.end());
    p.depth = p.rgb;  // duplicated branch weights

    p.ln_rgb_g = init.ones({d});
    p.ln_rgb_b = init.zeros({d});
    p.ln_dep_g = init.ones({d});
    p.ln_dep_b = init.zeros({d});
    p.head_rgb = detail::make_linear(init, din, d, 0.0);  // zero-init output heads
    p.head_dep = detail::make_linear(init, din, d, 0.0);
    return p;
}

// ---- parameter traversal -----------------------------------------------------

// Visits every parameter tensor in a fixed order. `trainable` reflects the
// LoRA contract: with adapters attached, only A/B tensors are trainable.
inline void visit_params(ModelParams& p,
                         const std::function<void(const std::string&, Tensor&, bool)>& fn) {
    const bool lora_only = p.lora_rank > 0;
    auto lin = [&](const std::string& name, LinearParams& l) {
        fn(name + ".W", l.W, !lora_only);
        fn(name + ".b", l.b, !lora_only);
        if (l.lora) {
            fn(name + ".lora.A", l.A, true);
            fn(name + ".lora.B", l.B, true);
        }
    };
    auto block = [&](const std::string& name, BlockParams& b) {
        fn(name + ".ln1.g", b.ln1_g, !lora_only);
        fn(name + ".ln1.b", b.ln1_b, !lora_only);
        fn(name + ".ln2.g", b.ln2_g, !lora_only);
        fn(name + ".ln2.b", b.ln2_b, !lora_only);
        lin(name + ".wq", b.wq);
        lin(name + ".wk", b.wk);
        lin(name + ".wv", b.wv);
        lin(name + ".wo", b.wo);
        lin(name + ".fc1", b.fc1);
        lin(name + ".fc2", b.fc2);
    };
    lin("token_in", p.token_in);
    fn("emb.view", p.emb_view, !lora_only);
    fn("emb.frame", p.emb_frame, !lora_only);
    fn("emb.y", p.emb_y, !lora_only);
    fn("emb.x", p.emb_x, !lora_only);
    lin("time.fc1", p.time_fc1);
    lin("time.fc2", p.time_fc2);
    for (size_t i = 0; i < p.shared.size(); ++i) block("shared." + std::to_string(i), p.shared[i]);
    for (size_t i = 0; i < p.rgb.size(); ++i) block("rgb." + std::to_string(i), p.rgb[i]);
    for (size_t i = 0; i < p.depth.size(); ++i) block("depth." + std::to_string(i), p.depth[i]);
    fn("ln_rgb.g", p.ln_rgb_g, !lora_only);
    fn("ln_rgb.b", p.ln_rgb_b, !lora_only);
    fn("ln_dep.g", p.ln_dep_g, !lora_only);
    fn("ln_dep.b", p.ln_dep_b, !lora_only);
    lin("head_rgb", p.head_rgb);
    lin("head_dep", p.head_dep);
}

inline void visit_params(const ModelParams& p,
                         const std::function<void(const std::string&, const Tensor&, bool)>& fn) {
    visit_params(const_cast<ModelParams&>(p),
                 [&](const std::string& n, Tensor& t, bool tr) { fn(n, t, tr); });
}

inline int64_t total_params(const ModelParams& p, bool trainable_only = false) {
    int64_t n = 0;
    visit_params(p, [&](const std::string&, const Tensor& t, bool tr) {
        if (!trainable_only || tr) n += t.numel();
    });
    return n;
}

// ---- low-rank adapters --------------------------------------------------------

// W + A*B on every linear map; A random, B zero so the wrapped forward equals
// the base forward exactly until the adapters train.
inline ModelParams wrap_low_rank(ModelParams p, int rank, uint64_t seed) {
    require(rank >= 1, "stereonet.wrap_low_rank: rank must be >= 1");
    uint64_t slot = 0;
    auto wrap = [&](LinearParams& l) {
        const int64_t dout = l.W.dim(0), din = l.W.dim(1);
        if (rank > std::min(dout, din))
            throw std::invalid_argument("stereonet.wrap_low_rank: rank exceeds min dimension");
        l.lora = true;
        l.A = Tensor({dout, static_cast<int64_t>(rank)});
        const double std = 1.0 / std::sqrt(static_cast<double>(din));
        for (int64_t i = 0; i < l.A.numel(); ++i)
            l.A[i] = std * rng::gaussian(seed, rng::Stream::Init, 1000000 + slot,
                                         static_cast<uint64_t>(i));
        ++slot;
        l.B = Tensor({static_cast<int64_t>(rank), din});  // zero: adapters start inert
    };
    wrap(p.token_in);
    wrap(p.time_fc1);
    wrap(p.time_fc2);
    for (auto* blocks : {&p.shared, &p.rgb, &p.depth})
        for (auto& b : *blocks) {
            wrap(b.wq);
            wrap(b.wk);
            wrap(b.wv);
            wrap(b.wo);
            wrap(b.fc1);
            wrap(b.fc2);
        }
    wrap(p.head_rgb);
    wrap(p.head_dep);
    p.lora_rank = rank;
    return p;
}

// ---- forward -------------------------------------------------------------------

struct SeqLayout {
    int n_views = 3;
    int64_t fp = 0, gh = 0, gw = 0;     // latent frames, token grid
    int64_t per_view = 0, d_in = 0;
    std::shared_ptr<std::vector<int>> view_idx, frame_idx, y_idx, x_idx;
    std::shared_ptr<std::vector<int64_t>> patch_perm;    // rows <- latent
    std::shared_ptr<std::vector<int64_t>> unpatch_perm;  // latent <- rows
    int64_t view_row0(int view) const { return view * per_view; }
};

inline SeqLayout make_layout(const ModelConfig& cfg, const std::vector<int64_t>& latent_shape,
                             bool rgb_only) {
    require(latent_shape.size() == 4, "stereonet: latent must be rank-4");
    const int64_t c = latent_shape[0], fp = latent_shape[1], hp = latent_shape[2],
                  wp = latent_shape[3];
    require(c == cfg.latent_channels, "stereonet: latent channels differ from model config");
    require(hp % cfg.patch_h == 0 && wp % cfg.patch_w == 0,
            "stereonet: latent grid not divisible by token patch");
    SeqLayout L;
    L.n_views = rgb_only ? 2 : 3;
    L.fp = fp;
    L.gh = hp / cfg.patch_h;
    L.gw = wp / cfg.patch_w;
    require(fp <= cfg.max_frames, "stereonet: frame count exceeds max_frames");
    require(L.gh <= cfg.max_tokens_y && L.gw <= cfg.max_tokens_x,
            "stereonet: token grid exceeds embedding tables");
    L.per_view = fp * L.gh * L.gw;
    L.d_in = c * cfg.patch_h * cfg.patch_w;

    const int64_t n = L.per_view * L.n_views;
    L.view_idx = std::make_shared<std::vector<int>>(n);
    L.frame_idx = std::make_shared<std::vector<int>>(n);
    L.y_idx = std::make_shared<std::vector<int>>(n);
    L.x_idx = std::make_shared<std::vector<int>>(n);
    for (int v = 0; v < L.n_views; ++v)
        for (int64_t f = 0; f < fp; ++f)
            for (int64_t gy = 0; gy < L.gh; ++gy)
                for (int64_t gx = 0; gx < L.gw; ++gx) {
                    const int64_t i = v * L.per_view + (f * L.gh + gy) * L.gw + gx;
                    (*L.view_idx)[static_cast<size_t>(i)] = v;
                    (*L.frame_idx)[static_cast<size_t>(i)] = static_cast<int>(f);
                    (*L.y_idx)[static_cast<size_t>(i)] = static_cast<int>(gy);
                    (*L.x_idx)[static_cast<size_t>(i)] = static_cast<int>(gx);
                }

    // rows[k] = latent[patch_perm[k]] ; latent[m] = rows[unpatch_perm[m]]
    L.patch_perm = std::make_shared<std::vector<int64_t>>(L.per_view * L.d_in);
    L.unpatch_perm = std::make_shared<std::vector<int64_t>>(L.per_view * L.d_in);
    for (int64_t f = 0; f < fp; ++f)
        for (int64_t gy = 0; gy < L.gh; ++gy)
            for (int64_t gx = 0; gx < L.gw; ++gx)
                for (int64_t ci = 0; ci < c; ++ci)
                    for (int64_t dy = 0; dy < cfg.patch_h; ++dy)
                        for (int64_t dx = 0; dx < cfg.patch_w; ++dx) {
                            const int64_t row = (f * L.gh + gy) * L.gw + gx;
                            const int64_t col = (ci * cfg.patch_h + dy) * cfg.patch_w + dx;
                            const int64_t lat =
                                ((ci * fp + f) * hp + (gy * cfg.patch_h + dy)) * wp +
                                (gx * cfg.patch_w + dx);
                            (*L.patch_perm)[static_cast<size_t>(row * L.d_in + col)] = lat;
                            (*L.unpatch_perm)[static_cast<size_t>(lat)] = row * L.d_in + col;
                        }
    return L;
}

using Ref = ad::Tape::Ref;

struct BoundLinear {
    Ref W = -1, b = -1;  // W is the effective weight (base + A*B under LoRA)
};

struct BoundBlock {
    Ref ln1_g, ln1_b, ln2_g, ln2_b;
    BoundLinear wq, wk, wv, wo, fc1, fc2;
};

struct Binding {
    std::string name;
    Tensor* tensor;
    Ref ref;
    bool trainable;
};

struct BoundModel {
    const ModelConfig* cfg = nullptr;
    BoundLinear token_in, time_fc1, time_fc2, head_rgb, head_dep;
    Ref emb_view, emb_frame, emb_y, emb_x;
    Ref ln_rgb_g, ln_rgb_b, ln_dep_g, ln_dep_b;
    std::vector<BoundBlock> shared, rgb, depth;
    std::vector<Binding> bindings;  // raw leaves, for gradient readout
};

// Registers every parameter tensor as a tape leaf. With `training` set,
// trainable tensors get gradient buffers; effective LoRA weights are formed
// in-tape so adapter gradients flow while the base stays frozen.
inline BoundModel bind_params(ad::Tape& tape, ModelParams& p, bool training) {
    BoundModel m;
    m.cfg = &p.cfg;
    std::map<std::string, Ref> refs;
    visit_params(p, [&](const std::string& name, Tensor& t, bool trainable) {
        const Ref r = tape.leaf(t, training && trainable);
        refs[name] = r;
        m.bindings.push_back({name, &t, r, trainable});
    });
    auto lin = [&](const std::string& name, const LinearParams& l) {
        BoundLinear bl;
        bl.W = refs.at(name + ".W");
        bl.b = refs.at(name + ".b");
        if (l.lora) bl.W = tape.add(bl.W, tape.matmul(refs.at(name + ".lora.A"),
                                                      refs.at(name + ".lora.B")));
        return bl;
    };
    auto block = [&](const std::string& name, const BlockParams& b) {
        BoundBlock bb;
        bb.ln1_g = refs.at(name + ".ln1.g");
        bb.ln1_b = refs.at(name + ".ln1.b");
        bb.ln2_g = refs.at(name + ".ln2.g");
        bb.ln2_b = refs.at(name + ".ln2.b");
        bb.wq = lin(name + ".wq", b.wq);
        bb.wk = lin(name + ".wk", b.wk);
        bb.wv = lin(name + ".wv", b.wv);
        bb.wo = lin(name + ".wo", b.wo);
        bb.fc1 = lin(name + ".fc1", b.fc1);
        bb.fc2 = lin(name + ".fc2", b.fc2);
        return bb;
    };
    m.token_in = lin("token_in", p.token_in);
    m.emb_view = refs.at("emb.view");
    m.emb_frame = refs.at("emb.frame");
    m.emb_y = refs.at("emb.y");
    m.emb_x = refs.at("emb.x");
    m.time_fc1 = lin("time.fc1", p.time_fc1);
    m.time_fc2 = lin("time.fc2", p.time_fc2);
    for (size_t i = 0; i < p.shared.size(); ++i)
        m.shared.push_back(block("shared." + std::to_string(i), p.shared[i]));
    for (size_t i = 0; i < p.rgb.size(); ++i)
        m.rgb.push_back(block("rgb." + std::to_string(i), p.rgb[i]));
    for (size_t i = 0; i < p.depth.size(); ++i)
        m.depth.push_back(block("depth." + std::to_string(i), p.depth[i]));
    m.ln_rgb_g = refs.at("ln_rgb.g");
    m.ln_rgb_b = refs.at("ln_rgb.b");
    m.ln_dep_g = refs.at("ln_dep.g");
    m.ln_dep_b = refs.at("ln_dep.b");
    m.head_rgb = lin("head_rgb", p.head_rgb);
    m.head_dep = lin("head_dep", p.head_dep);
    return m;
}

namespace detail {

inline Ref transformer_block(ad::Tape& t, const BoundBlock& b, Ref x, int heads) {
    const int64_t d = t.val(x).dim(1);
    const double sc = 1.0 / std::sqrt(static_cast<double>(d / heads));
    Ref a = t.layernorm(x, b.ln1_g, b.ln1_b);
    Ref q = t.split_heads(t.linear(a, b.wq.W, b.wq.b), heads);
    Ref k = t.split_heads(t.linear(a, b.wk.W, b.wk.b), heads);
    Ref v = t.split_heads(t.linear(a, b.wv.W, b.wv.b), heads);
    Ref o = t.merge_heads(t.attn_apply(t.attn_probs(q, k, sc), v));
    Ref x1 = t.add(x, t.linear(o, b.wo.W, b.wo.b));
    Ref h = t.layernorm(x1, b.ln2_g, b.ln2_b);
    Ref mlp = t.linear(t.gelu(t.linear(h, b.fc1.W, b.fc1.b)), b.fc2.W, b.fc2.b);
    return t.add(x1, mlp);
}

inline Tensor time_features(const ModelConfig& cfg, double t) {
    Tensor f({1, static_cast<int64_t>(2 * cfg.time_features)});
    for (int i = 0; i < cfg.time_features; ++i) {
        const double w = 3.141592653589793 * std::pow(2.0, static_cast<double>(i));
        f.at(0, 2 * i) = std::sin(w * t);
        f.at(0, 2 * i + 1) = std::cos(w * t);
    }
    return f;
}

}  // namespace detail

struct ForwardRefs {
    Ref v_rgb = -1;
    Ref v_dep = -1;  // -1 in rgb-only mode
};

// Builds the full forward graph on the tape. Pass d_r = -1 for rgb-only mode
// (DEPTH tokens dropped from the sequence).
inline ForwardRefs forward_bound(ad::Tape& tape, const BoundModel& m, Ref z_l, Ref z_r, Ref d_r,
                                 double t) {
    const ModelConfig& cfg = *m.cfg;
    require(t >= 0.0 && t <= 1.0, "stereonet.forward: t outside [0,1]");
    const bool rgb_only = d_r < 0;
    require_same_shape(tape.val(z_l), tape.val(z_r), "stereonet.forward");
    if (!rgb_only) require_same_shape(tape.val(z_l), tape.val(d_r), "stereonet.forward");
    const SeqLayout L = make_layout(cfg, tape.val(z_l).shape(), rgb_only);
    const std::vector<int64_t> latent_shape = tape.val(z_l).shape();

    std::vector<Ref> rows;
    rows.push_back(tape.permute_flat(z_l, L.patch_perm, {L.per_view, L.d_in}));
    rows.push_back(tape.permute_flat(z_r, L.patch_perm, {L.per_view, L.d_in}));
    if (!rgb_only) rows.push_back(tape.permute_flat(d_r, L.patch_perm, {L.per_view, L.d_in}));

    Ref x = tape.linear(tape.concat_rows(rows), m.token_in.W, m.token_in.b);
    x = tape.add(x, tape.gather_rows(m.emb_view, L.view_idx));
    x = tape.add(x, tape.gather_rows(m.emb_frame, L.frame_idx));
    x = tape.add(x, tape.gather_rows(m.emb_y, L.y_idx));
    x = tape.add(x, tape.gather_rows(m.emb_x, L.x_idx));
    Ref tf = tape.constant(detail::time_features(cfg, t));
    Ref te = tape.linear(tape.gelu(tape.linear(tf, m.time_fc1.W, m.time_fc1.b)), m.time_fc2.W,
                         m.time_fc2.b);
    x = tape.add_rowvec(x, te);

    for (const auto& b : m.shared) x = detail::transformer_block(tape, b, x, cfg.num_heads);

    ForwardRefs out;
    {
        Ref h = x;
        for (const auto& b : m.rgb) h = detail::transformer_block(tape, b, h, cfg.num_heads);
        h = tape.layernorm(h, m.ln_rgb_g, m.ln_rgb_b);
        Ref rrows = tape.slice_rows(h, L.view_row0(VIEW_RIGHT), L.view_row0(VIEW_RIGHT) + L.per_view);
        Ref y = tape.linear(rrows, m.head_rgb.W, m.head_rgb.b);
        out.v_rgb = tape.permute_flat(y, L.unpatch_perm, latent_shape);
    }
    if (!rgb_only) {
        Ref h = x;
        for (const auto& b : m.depth) h = detail::transformer_block(tape, b, h, cfg.num_heads);
        h = tape.layernorm(h, m.ln_dep_g, m.ln_dep_b);
        Ref drows = tape.slice_rows(h, L.view_row0(VIEW_DEPTH), L.view_row0(VIEW_DEPTH) + L.per_view);
        Ref y = tape.linear(drows, m.head_dep.W, m.head_dep.b);
        out.v_dep = tape.permute_flat(y, L.unpatch_perm, latent_shape);
    }
    return out;
}

// Plain inference forward; runs a private tape without gradient buffers.
inline flowmatch::VelocityOut forward(const ModelParams& params, const Tensor& z_l,
                                      const Tensor& z_r_t, const Tensor& d_r_t, double t) {
    ad::Tape tape;
    BoundModel m = bind_params(tape, const_cast<ModelParams&>(params), false);
    const bool rgb_only = d_r_t.numel() == 0;
    Ref zl = tape.constant(z_l);
    Ref zr = tape.constant(z_r_t);
    Ref dr = rgb_only ? -1 : tape.constant(d_r_t);
    ForwardRefs fr = forward_bound(tape, m, zl, zr, dr, t);
    flowmatch::VelocityOut out;
    out.v_rgb = tape.val(fr.v_rgb);
    if (!rgb_only) out.v_dep = tape.val(fr.v_dep);
    return out;
}

inline flowmatch::VelocityFn velocity_fn(const ModelParams& params) {
    return [&params](const Tensor& z_l, const Tensor& z_r_t, const Tensor& d_r_t, double t) {
        return forward(params, z_l, z_r_t, d_r_t, t);
    };
}

// ---- checkpointing -----------------------------------------------------------

// Directory layout: index.json (config + name->file map) plus one f64 tensor
// file per parameter, so save/load round-trips weights bit-exactly.
inline void save_checkpoint(const ModelParams& params, const std::string& dir,
                            const Json& extra = Json::object()) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("checkpoint: cannot create " + dir + ": " + ec.message());
    Json index;
    index["model"] = params.cfg.to_json();
    index["lora_rank"] = params.lora_rank;
    index["extra"] = extra;
    index["tensors"] = Json::object();
    int i = 0;
    visit_params(params, [&](const std::string& name, const Tensor& t, bool trainable) {
        char file[32];
        std::snprintf(file, sizeof(file), "t%04d.stw", i++);
        io::write_tensor(dir + "/" + file, t, io::DType::F64);
        index["tensors"][name] = Json{{"file", file}, {"shape", t.shape()}, {"trainable", trainable}};
    });
    std::ofstream f(dir + "/index.json", std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write index in " + dir);
    f << index.dump(2) << "\n";
}

inline ModelParams load_checkpoint(const std::string& dir, Json* extra_out = nullptr) {
    std::ifstream f(dir + "/index.json");
    if (!f) throw std::runtime_error("checkpoint: cannot open " + dir + "/index.json");
    Json index;
    f >> index;
    ModelParams p = build(ModelConfig::from_json(index.at("model")), 0);
    const int rank = index.at("lora_rank").get<int>();
    if (rank > 0) p = wrap_low_rank(std::move(p), rank, 0);
    visit_params(p, [&](const std::string& name, Tensor& t, bool) {
        const Json& e = index.at("tensors").at(name);
        Tensor loaded = io::read_tensor(dir + "/" + e.at("file").get<std::string>());
        require(loaded.shape() == t.shape(), "checkpoint: shape mismatch for " + name);
        t = std::move(loaded);
    });
    if (extra_out) *extra_out = index.value("extra", Json::object());
    return p;
}

}  // namespace stw::stereonet
