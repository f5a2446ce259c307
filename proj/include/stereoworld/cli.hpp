#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stereoworld/config.hpp"
#include "stereoworld/datapipe.hpp"
#include "stereoworld/evalsuite.hpp"
#include "stereoworld/scenegen.hpp"
#include "stereoworld/tiler.hpp"
#include "stereoworld/trainer.hpp"

namespace stw::cli {

// Subcommand surface: scenegen, ingest, train, infer, evaluate, ablate,
// gradcheck. Exit 0 on success, 1 on domain error, 2 on usage error. Every
// run echoes its resolved configuration to stdout and into the run directory.

namespace detail {

inline void echo_config(const config::Config& cfg, const std::string& run_dir) {
    std::cout << "# resolved config\n" << cfg.echo();
    if (!run_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(run_dir, ec);
        cfg.save(run_dir + "/config.txt");
    }
}

// Flat-key translation into the trainer's structured config.
inline trainer::TrainConfig train_config_from(config::Config& c) {
    trainer::TrainConfig t;
    t.lambda1 = c.get_f64("lambda1", 0.1);
    t.lambda_l1 = c.get_f64("lambda_l1", 0.1);
    t.lambda_dis = c.get_f64("lambda_dis", 0.5);
    t.lr = c.get_f64("lr", 1e-4);
    t.weight_decay = c.get_f64("weight_decay", 0.0);
    t.steps = static_cast<int>(c.get_i64("steps", 2000));
    t.batch = static_cast<int>(c.get_i64("batch", 1));
    t.replace_p = c.get_f64("replace_p", 0.3);
    t.replace_k = static_cast<int>(c.get_i64("replace_k", 2));
    t.seed = c.get_u64("seed", 0);
    t.lora_rank = static_cast<int>(c.get_i64("lora_rank", 0));
    t.depth_dropout = c.get_f64("depth_dropout", 0.1);
    t.noise_left = c.get_bool("noise_left", false);
    t.dis_t_max = c.get_f64("dis_t_max", 1.0);
    t.beta1 = c.get_f64("beta1", 0.9);
    t.beta2 = c.get_f64("beta2", 0.99);
    t.adam_eps = c.get_f64("adam_eps", 1e-8);
    t.warmup_steps = static_cast<int>(c.get_i64("warmup_steps", 0));
    t.log_every = static_cast<int>(c.get_i64("log_every", 50));
    t.ckpt_every = static_cast<int>(c.get_i64("ckpt_every", 0));
    t.codec.patch_t = static_cast<int>(c.get_i64("codec_patch_t", 1));
    t.codec.patch_h = static_cast<int>(c.get_i64("codec_patch_h", 2));
    t.codec.patch_w = static_cast<int>(c.get_i64("codec_patch_w", 2));
    t.codec.channels_in = 3;
    t.model.token_dim = static_cast<int>(c.get_i64("token_dim", 96));
    t.model.num_heads = static_cast<int>(c.get_i64("num_heads", 6));
    t.model.n_shared_blocks = static_cast<int>(c.get_i64("n_shared_blocks", 4));
    t.model.n_branch_blocks = static_cast<int>(c.get_i64("n_branch_blocks", 2));
    t.model.patch_h = static_cast<int>(c.get_i64("token_patch_h", 2));
    t.model.patch_w = static_cast<int>(c.get_i64("token_patch_w", 2));
    t.model.max_frames = static_cast<int>(c.get_i64("max_frames", 32));
    t.model.max_tokens_y = static_cast<int>(c.get_i64("max_tokens_y", 64));
    t.model.max_tokens_x = static_cast<int>(c.get_i64("max_tokens_x", 64));
    t.model.mlp_mult = static_cast<int>(c.get_i64("mlp_mult", 4));
    t.model.time_features = static_cast<int>(c.get_i64("time_features", 8));
    t.model.latent_channels = codec::latent_channels(t.codec);
    t.projector.s_max = static_cast<int>(c.get_i64("s_max", 3));
    t.projector.tau = c.get_f64("tau", 0.1);
    t.projector.cost = c.get_str("cost", "neg-l2") == "corr"
                           ? geometry::ProjectorConfig::Cost::Correlation
                           : geometry::ProjectorConfig::Cost::NegL2;
    t.projector.min_disp_floor = c.get_f64("min_disp_floor", 0.5);
    return t;
}

inline codec::CodecConfig codec_from_extra(const Json& extra) {
    codec::CodecConfig cc;
    if (extra.contains("codec")) {
        const Json& j = extra.at("codec");
        cc.patch_t = j.at("patch_t");
        cc.patch_h = j.at("patch_h");
        cc.patch_w = j.at("patch_w");
        cc.channels_in = j.at("channels_in");
    }
    return cc;
}

struct EvalSummary {
    double psnr = 0.0, ssim = 0.0, epe = 0.0, d1 = 0.0, epe_vs_gt = 0.0, d1_vs_gt = 0.0;
};

// Samples right views for every clip in a manifest directory and averages
// the paired metrics.
inline EvalSummary evaluate_checkpoint(const stereonet::ModelParams& params,
                                       const codec::CodecConfig& cc,
                                       const geometry::ProjectorConfig& pc,
                                       const std::string& data_dir, int steps, uint64_t seed) {
    const Manifest m = Manifest::load(data_dir + "/manifest.json");
    require(!m.clips.empty(), "evaluate: empty manifest");
    EvalSummary acc;
    const flowmatch::VelocityFn vfn = stereonet::velocity_fn(params);
    for (const auto& clip : m.clips) {
        const scenegen::StereoSample s = scenegen::load_sample(data_dir, clip);
        const Tensor z_l = codec::encode(s.left, cc);
        flowmatch::SampleResult r = flowmatch::sample(vfn, z_l, steps, seed);
        const Tensor gen = codec::decode(r.z_r, cc);
        const evalsuite::MetricsReport rep = evalsuite::evaluate_pair(gen, s, pc, cc,
                                                                      evalsuite::D1Rule::And,
                                                                      clip.id);
        acc.psnr += rep.psnr_db;
        acc.ssim += rep.ssim_score;
        acc.epe += rep.epe_px;
        acc.d1 += rep.d1;
        acc.epe_vs_gt += rep.epe_vs_gt;
        acc.d1_vs_gt += rep.d1_vs_gt;
    }
    const double n = static_cast<double>(m.clips.size());
    acc.psnr /= n;
    acc.ssim /= n;
    acc.epe /= n;
    acc.d1 /= n;
    acc.epe_vs_gt /= n;
    acc.d1_vs_gt /= n;
    return acc;
}

}  // namespace detail

struct AblateVariant {
    std::string name;
    bool disable_dis = false;
    bool disable_dep = false;
};

inline AblateVariant parse_variant(const std::string& name) {
    if (name == "full") return {name, false, false};
    if (name == "no_dis") return {name, true, false};
    if (name == "no_dep") return {name, false, true};
    if (name == "none") return {name, true, true};
    throw std::invalid_argument("ablate: unknown variant '" + name + "'");
}

// Trains each variant under identical seeds and evaluates on held-out clips;
// one CSV row per (variant, seed).
inline void run_ablation(trainer::TrainConfig base, const std::string& data_dir,
                         const std::string& heldout_dir, const std::string& out_dir,
                         const std::vector<std::string>& variants, int n_seeds, int eval_steps) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    std::ofstream csv(out_dir + "/ablation.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("ablate: cannot write " + out_dir + "/ablation.csv");
    csv << "variant,seed,psnr,ssim,epe,d1_all,epe_vs_gt,d1_all_vs_gt,L_dis_final\n";
    for (int s = 0; s < n_seeds; ++s) {
        for (const auto& vname : variants) {
            const AblateVariant v = parse_variant(vname);
            trainer::TrainConfig cfg = base;
            cfg.seed = base.seed + static_cast<uint64_t>(s);
            if (v.disable_dis) cfg.lambda_dis = 0.0;
            if (v.disable_dep) cfg.depth_dropout = 1.0;
            const std::string run_dir = out_dir + "/" + v.name + "_s" + std::to_string(s);
            const std::string ckpt = trainer::fit(cfg, data_dir, run_dir);
            Json extra;
            const stereonet::ModelParams params = stereonet::load_checkpoint(ckpt, &extra);

            // Final logged L_dis (wiring check: zero when the loss is off).
            double l_dis_final = 0.0;
            {
                std::ifstream lf(run_dir + "/loss.csv");
                std::string line, last;
                std::getline(lf, line);  // header
                while (std::getline(lf, line))
                    if (!line.empty()) last = line;
                if (!last.empty()) {
                    std::istringstream ls(last);
                    std::string tok;
                    for (int i = 0; i < 5 && std::getline(ls, tok, ','); ++i)
                        if (i == 4) l_dis_final = std::stod(tok);
                }
            }
            const detail::EvalSummary e = detail::evaluate_checkpoint(
                params, cfg.codec, cfg.projector, heldout_dir, eval_steps,
                1000 + static_cast<uint64_t>(s));
            csv << v.name << "," << s << "," << e.psnr << "," << e.ssim << "," << e.epe << ","
                << e.d1 << "," << e.epe_vs_gt << "," << e.d1_vs_gt << "," << l_dis_final << "\n";
            csv.flush();
            std::cout << "[ablate] " << v.name << " seed " << s << ": psnr=" << e.psnr
                      << " epe_vs_gt=" << e.epe_vs_gt << "\n";
        }
    }
}

inline int run(int argc, const char* const* argv) {
    CLI::App app{"stereoworld: monocular-to-stereo video generation testbed"};
    app.require_subcommand(1);

    // ---- scenegen ----
    auto* sg = app.add_subcommand("scenegen", "generate synthetic stereo clips with exact GT");
    int sg_clips = 8, sg_frames = 8, sg_width = 32, sg_height = 32, sg_min_layers = 2,
        sg_max_layers = 4;
    uint64_t sg_seed = 0;
    double sg_dmax = 4.0, sg_speed = 0.5;
    bool sg_subpixel = false;
    std::string sg_out;
    sg->add_option("--clips", sg_clips, "number of clips");
    sg->add_option("--seed", sg_seed, "global seed");
    sg->add_option("--out", sg_out, "output directory")->required();
    sg->add_option("--frames", sg_frames);
    sg->add_option("--width", sg_width);
    sg->add_option("--height", sg_height);
    sg->add_option("--dmax", sg_dmax, "max disparity in pixels (<= width/8)");
    sg->add_option("--min-layers", sg_min_layers);
    sg->add_option("--max-layers", sg_max_layers);
    sg->add_option("--max-speed", sg_speed, "max layer speed px/frame");
    sg->add_flag("--subpixel", sg_subpixel, "allow fractional disparities");

    // ---- ingest ----
    auto* ig = app.add_subcommand("ingest", "ingest an SBS image-sequence directory");
    std::string ig_src, ig_out, ig_mode = "full";
    int ig_h = 480, ig_w = 832, ig_frames = 81;
    ig->add_option("--src", ig_src, "source directory")->required();
    ig->add_option("--out", ig_out, "output directory")->required();
    ig->add_option("--mode", ig_mode, "full|half");
    ig->add_option("--height", ig_h);
    ig->add_option("--width", ig_w);
    ig->add_option("--frames", ig_frames, "frames per clip");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train on a dataset manifest");
    std::string tr_config, tr_data, tr_out = "runs/train", tr_resume;
    std::vector<std::string> tr_set;
    tr->add_option("--config", tr_config, "key=value config file");
    tr->add_option("--data", tr_data, "dataset directory (with manifest.json)")->required();
    tr->add_option("--out", tr_out, "run directory");
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    tr->add_option("--set", tr_set, "override config keys, key=value");

    // ---- infer ----
    auto* in = app.add_subcommand("infer", "generate the right view for a left-view tensor");
    std::string in_ckpt, in_left, in_out, in_depth_out, in_fusion = "post-hoc";
    int in_steps = 30, in_seg = 0, in_overlap = 0, in_tile = 0, in_tile_overlap = 0;
    uint64_t in_seed = 0;
    bool in_rgb_only = false;
    in->add_option("--ckpt", in_ckpt, "checkpoint directory")->required();
    in->add_option("--left", in_left, "left-view tensor file (.stw)")->required();
    in->add_option("--out", in_out, "output right-view tensor file")->required();
    in->add_option("--depth-out", in_depth_out, "optional co-denoised depth output");
    in->add_option("--steps", in_steps, "Euler steps");
    in->add_option("--seed", in_seed);
    in->add_flag("--rgb-only", in_rgb_only, "drop depth tokens at inference");
    in->add_option("--seg-len", in_seg, "latent frames per temporal segment");
    in->add_option("--overlap", in_overlap, "guide-frame overlap");
    in->add_option("--tile", in_tile, "spatial tile size in latent cells");
    in->add_option("--tile-overlap", in_tile_overlap, "spatial tile overlap");
    in->add_option("--fusion", in_fusion, "post-hoc|per-step");

    // ---- evaluate ----
    auto* ev = app.add_subcommand("evaluate", "score a generated right view against a clip");
    std::string ev_gen, ev_clip, ev_data, ev_out = "report.json", ev_external, ev_rule = "and",
                ev_csv;
    double ev_tau = 0.01;
    int ev_smax = 4;
    ev->add_option("--gen", ev_gen, "generated right-view tensor")->required();
    ev->add_option("--clip", ev_clip, "clip id in the manifest")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "report JSON path");
    ev->add_option("--csv", ev_csv, "append a CSV row to this file");
    ev->add_option("--external-metrics", ev_external, "merge externally computed metrics JSON");
    ev->add_option("--d1-rule", ev_rule, "and|or");
    ev->add_option("--tau", ev_tau, "projector temperature");
    ev->add_option("--s-max", ev_smax, "projector max shift (latent cells)");

    // ---- ablate ----
    auto* ab = app.add_subcommand("ablate", "train variants under identical seeds and compare");
    std::string ab_config, ab_data, ab_heldout, ab_out = "runs/ablate";
    std::string ab_variants = "full,no_dis,no_dep,none";
    int ab_seeds = 1, ab_eval_steps = 30;
    ab->add_option("--config", ab_config, "key=value config file");
    ab->add_option("--data", ab_data, "training dataset directory")->required();
    ab->add_option("--heldout", ab_heldout, "held-out dataset directory")->required();
    ab->add_option("--out", ab_out, "output directory");
    ab->add_option("--variants", ab_variants, "comma-separated variant list");
    ab->add_option("--seeds", ab_seeds, "number of seeds");
    ab->add_option("--eval-steps", ab_eval_steps);

    // ---- gradcheck ----
    auto* gc = app.add_subcommand("gradcheck", "verify analytic gradients vs finite differences");
    std::vector<double> gc_taus{0.05, 0.5};
    gc->add_option("--tau", gc_taus, "projector temperatures to check");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sg->parsed()) {
            scenegen::SpecRanges r;
            r.width = sg_width;
            r.height = sg_height;
            r.frames = sg_frames;
            r.d_max = sg_dmax;
            r.min_layers = sg_min_layers;
            r.max_layers = sg_max_layers;
            r.max_speed = sg_speed;
            r.subpixel = sg_subpixel;
            config::Config echo;
            echo.set("cmd", "scenegen");
            echo.set("clips", std::to_string(sg_clips));
            echo.set("seed", std::to_string(sg_seed));
            echo.set("frames", std::to_string(sg_frames));
            echo.set("width", std::to_string(sg_width));
            echo.set("height", std::to_string(sg_height));
            echo.set("dmax", std::to_string(sg_dmax));
            echo.set("min_layers", std::to_string(sg_min_layers));
            echo.set("max_layers", std::to_string(sg_max_layers));
            echo.set("max_speed", std::to_string(sg_speed));
            echo.set("subpixel", sg_subpixel ? "true" : "false");
            echo.set("out", sg_out);
            detail::echo_config(echo, sg_out);
            const Manifest m = scenegen::write_dataset(sg_clips, r, sg_seed, sg_out);
            std::cout << "wrote " << m.clips.size() << " clips to " << sg_out << "\n";
        } else if (ig->parsed()) {
            datapipe::IngestConfig c;
            c.mode = datapipe::parse_sbs_mode(ig_mode);
            c.target_h = ig_h;
            c.target_w = ig_w;
            c.frames_per_clip = ig_frames;
            config::Config echo;
            echo.set("cmd", "ingest");
            echo.set("src", ig_src);
            echo.set("out", ig_out);
            echo.set("mode", ig_mode);
            echo.set("height", std::to_string(ig_h));
            echo.set("width", std::to_string(ig_w));
            echo.set("frames", std::to_string(ig_frames));
            detail::echo_config(echo, ig_out);
            const auto recs = datapipe::ingest(ig_src, c, ig_out);
            std::cout << "ingested " << recs.size() << " clips to " << ig_out << "\n";
        } else if (tr->parsed()) {
            config::Config c = tr_config.empty() ? config::Config() : config::Config::load(tr_config);
            for (const auto& kv : tr_set) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos)
                    throw std::invalid_argument("train: --set expects key=value, got '" + kv + "'");
                c.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            const trainer::TrainConfig cfg = detail::train_config_from(c);
            detail::echo_config(c, tr_out);
            const std::string ckpt = trainer::fit(cfg, tr_data, tr_out, tr_resume);
            std::cout << "final checkpoint: " << ckpt << "\n";
        } else if (in->parsed()) {
            Json extra;
            const stereonet::ModelParams params = stereonet::load_checkpoint(in_ckpt, &extra);
            const codec::CodecConfig cc = detail::codec_from_extra(extra);
            const Tensor v_l = io::read_tensor(in_left);
            const flowmatch::VelocityFn vfn = stereonet::velocity_fn(params);
            const flowmatch::Mode mode =
                in_rgb_only ? flowmatch::Mode::RgbOnly : flowmatch::Mode::CoDenoise;
            config::Config echo;
            echo.set("cmd", "infer");
            echo.set("ckpt", in_ckpt);
            echo.set("left", in_left);
            echo.set("out", in_out);
            echo.set("steps", std::to_string(in_steps));
            echo.set("seed", std::to_string(in_seed));
            echo.set("mode", in_rgb_only ? "rgb_only" : "co-denoise");
            echo.set("seg_len", std::to_string(in_seg));
            echo.set("overlap", std::to_string(in_overlap));
            echo.set("tile", std::to_string(in_tile));
            echo.set("tile_overlap", std::to_string(in_tile_overlap));
            echo.set("fusion", in_fusion);
            detail::echo_config(echo, dir_of(in_out));

            tiler::VideoResult res;
            if (in_seg > 0) {
                const Tensor z_l = codec::encode(v_l, cc);
                const tiler::SegmentPlan plan =
                    tiler::plan_segments(static_cast<int>(z_l.dim(1)), in_seg, in_overlap);
                res = tiler::infer_long(vfn, v_l, plan, in_steps, in_seed, cc, mode);
            } else if (in_tile > 0) {
                const Tensor z_l = codec::encode(v_l, cc);
                const tiler::TileLayout layout =
                    tiler::plan_tiles(static_cast<int>(z_l.dim(2)), static_cast<int>(z_l.dim(3)),
                                      in_tile, in_tile_overlap);
                res = tiler::infer_tiled(vfn, v_l, layout, in_steps, in_seed,
                                         tiler::parse_fusion(in_fusion), cc, mode);
            } else {
                const Tensor z_l = codec::encode(v_l, cc);
                flowmatch::SampleResult r = flowmatch::sample(vfn, z_l, in_steps, in_seed, mode);
                res.right = codec::decode(r.z_r, cc);
                if (mode == flowmatch::Mode::CoDenoise) res.depth = codec::decode_mono(r.d_r, cc);
            }
            io::write_tensor(in_out, res.right, io::DType::F32);
            if (!in_depth_out.empty() && res.depth.numel() > 0)
                io::write_tensor(in_depth_out, res.depth, io::DType::F32);
            std::cout << "wrote " << in_out << "\n";
        } else if (ev->parsed()) {
            const Manifest m = Manifest::load(ev_data + "/manifest.json");
            const scenegen::StereoSample s = scenegen::load_sample(ev_data, m.find(ev_clip));
            const Tensor gen = io::read_tensor(ev_gen);
            geometry::ProjectorConfig pc;
            pc.tau = ev_tau;
            pc.s_max = ev_smax;
            codec::CodecConfig cc;
            const evalsuite::D1Rule rule =
                ev_rule == "or" ? evalsuite::D1Rule::Or : evalsuite::D1Rule::And;
            config::Config echo;
            echo.set("cmd", "evaluate");
            echo.set("gen", ev_gen);
            echo.set("clip", ev_clip);
            echo.set("data", ev_data);
            echo.set("out", ev_out);
            echo.set("d1_rule", ev_rule);
            echo.set("tau", std::to_string(ev_tau));
            echo.set("s_max", std::to_string(ev_smax));
            detail::echo_config(echo, dir_of(ev_out));
            evalsuite::MetricsReport rep = evalsuite::evaluate_pair(gen, s, pc, cc, rule, ev_clip);
            if (!ev_external.empty()) {
                std::ifstream xf(ev_external);
                if (!xf) throw std::runtime_error("evaluate: cannot open " + ev_external);
                xf >> rep.external;
            }
            std::ofstream of(ev_out, std::ios::trunc);
            if (!of) throw std::runtime_error("evaluate: cannot write " + ev_out);
            of << rep.to_json().dump(2) << "\n";
            if (!ev_csv.empty()) {
                const bool fresh = !std::filesystem::exists(ev_csv);
                std::ofstream cf(ev_csv, std::ios::app);
                if (fresh) cf << rep.csv_header() << "\n";
                cf << rep.csv_row() << "\n";
            }
            std::cout << rep.to_json().dump(2) << "\n";
        } else if (ab->parsed()) {
            config::Config c = ab_config.empty() ? config::Config() : config::Config::load(ab_config);
            const trainer::TrainConfig cfg = detail::train_config_from(c);
            detail::echo_config(c, ab_out);
            std::vector<std::string> variants;
            std::istringstream vs(ab_variants);
            std::string tok;
            while (std::getline(vs, tok, ',')) variants.push_back(tok);
            run_ablation(cfg, ab_data, ab_heldout, ab_out, variants, ab_seeds, ab_eval_steps);
            std::cout << "ablation table: " << ab_out << "/ablation.csv\n";
        } else if (gc->parsed()) {
            const double e1 = trainer::grad_check_disparity_loss();
            std::cout << "disparity_loss max rel err: " << e1 << (e1 <= 1e-4 ? "  ok" : "  FAIL")
                      << "\n";
            bool ok = e1 <= 1e-4;
            for (double tau : gc_taus) {
                const double e2 = trainer::grad_check_projector(tau);
                std::cout << "project_disparity tau=" << tau << " max rel err: " << e2
                          << (e2 <= 1e-4 ? "  ok" : "  FAIL") << "\n";
                ok = ok && e2 <= 1e-4;
            }
            const double e3 = trainer::grad_check_total_loss();
            std::cout << "total_loss max rel err: " << e3 << (e3 <= 1e-3 ? "  ok" : "  FAIL")
                      << "\n";
            ok = ok && e3 <= 1e-3;
            if (!ok) return 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace stw::cli
