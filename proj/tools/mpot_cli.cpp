// Experiment runner: training, evaluation, matcher ablations, score-map
// dumps, and prompt/layer diagnostics over the synthetic world.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mpot/align.hpp"
#include "mpot/config.hpp"
#include "mpot/metrics.hpp"
#include "mpot/train.hpp"
#include "mpot/world.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitIo = 4;

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << content;
    if (!f) throw IoError("write failure on " + path);
}

int thread_cap() {
    // Everything internal is single-threaded; the cap is honored by never
    // exceeding it (and validated so bad values fail loudly).
    const char* env = std::getenv("MPOT_THREADS");
    if (!env) return 1;
    try {
        const int n = std::stoi(env);
        if (n < 1) throw std::invalid_argument("");
        return n;
    } catch (...) {
        throw std::invalid_argument("MPOT_THREADS must be a positive integer");
    }
}

std::string metrics_csv(const std::vector<mpot::train::MetricRow>& trace) {
    std::ostringstream out;
    out << "step,phase,loss_total,loss_ce,loss_focal,loss_dice,"
           "miou_seen,miou_unseen,hiou,pacc\n";
    for (const auto& r : trace) {
        out << r.step << ',' << r.phase << ',' << fmt(r.loss_total) << ','
            << fmt(r.loss_ce) << ',' << fmt(r.loss_focal) << ',' << fmt(r.loss_dice) << ','
            << fmt(r.miou_seen) << ',' << fmt(r.miou_unseen) << ',' << fmt(r.hiou) << ','
            << fmt(r.pacc) << '\n';
    }
    return out.str();
}

mpot::ExperimentConfig load_config(const std::string& path, std::optional<uint64_t> seed) {
    mpot::ExperimentConfig cfg =
        path.empty() ? mpot::ExperimentConfig{} : mpot::parse_config_file(path);
    if (seed) {
        cfg.seed = *seed;
        cfg.world.seed = *seed;
    }
    cfg.validate();
    return cfg;
}

int cmd_train(const mpot::ExperimentConfig& cfg, const std::string& out) {
    ensure_dir(out);
    write_text(out + "/config.txt", mpot::serialize_config(cfg));
    const mpot::train::FitResult fr = mpot::train::fit(cfg);
    write_text(out + "/metrics.csv", metrics_csv(fr.trace));
    if (fr.diverged) {
        std::cerr << "training diverged at step " << fr.state.iter << "\n";
        return kExitDiverged;
    }
    mpot::train::save_checkpoint(out + "/checkpoint.bin", fr.state.params);
    std::cout << "miou_seen=" << fmt(fr.final_eval.miou_seen)
              << " miou_unseen=" << fmt(fr.final_eval.miou_unseen)
              << " hiou=" << fmt(fr.final_eval.hiou)
              << " pacc=" << fmt(fr.final_eval.pacc)
              << " prompt_dispersion=" << fmt(fr.prompt_dispersion) << "\n";
    return kExitOk;
}

int cmd_eval(const mpot::ExperimentConfig& cfg, const std::string& ckpt,
             const std::string& out) {
    ensure_dir(out);
    const mpot::train::ParamSet params = mpot::train::load_checkpoint(ckpt);
    mpot::world::WorldConfig wc = cfg.world;
    wc.seed = cfg.seed;
    const mpot::world::World w = mpot::world::make_world(wc);
    const auto partition = mpot::world::split_classes(wc, cfg.seed);
    const auto scenes =
        mpot::train::make_scene_pool(w, cfg.seed ^ 0xE7A1ULL, cfg.eval_scenes, true);
    const mpot::train::EvalSummary s =
        mpot::train::evaluate(w, partition, params, mpot::forward_options(cfg), scenes);
    std::ostringstream csv;
    csv << "miou_seen,miou_unseen,hiou,pacc\n"
        << fmt(s.miou_seen) << ',' << fmt(s.miou_unseen) << ','
        << fmt(s.hiou) << ',' << fmt(s.pacc) << '\n';
    write_text(out + "/eval.csv", csv.str());
    std::cout << csv.str();
    return kExitOk;
}

int cmd_ablate(const mpot::ExperimentConfig& base, const std::string& out,
               const std::string& variants_arg, int num_seeds) {
    std::vector<mpot::align::Matcher> variants;
    std::stringstream ss(variants_arg);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) variants.push_back(mpot::align::matcher_from_string(tok));
    if (variants.size() < 2)
        throw std::invalid_argument("ablate needs at least two variants");
    if (num_seeds < 1) throw std::invalid_argument("ablate needs at least one seed");

    ensure_dir(out);
    std::ostringstream csv;
    csv << "variant,seed,miou_seen,miou_unseen,hiou,pacc,prompt_dispersion\n";
    for (const auto matcher : variants) {
        double sum[5] = {0, 0, 0, 0, 0};
        for (int i = 0; i < num_seeds; ++i) {
            mpot::ExperimentConfig cfg = base;
            cfg.matcher = matcher;
            cfg.seed = base.seed + static_cast<uint64_t>(i);
            cfg.world.seed = cfg.seed;
            const mpot::train::FitResult fr = mpot::train::fit(cfg);
            if (fr.diverged) {
                std::cerr << "variant " << mpot::align::to_string(matcher) << " seed "
                          << cfg.seed << " diverged\n";
                return kExitDiverged;
            }
            const double vals[5] = {fr.final_eval.miou_seen, fr.final_eval.miou_unseen,
                                    fr.final_eval.hiou, fr.final_eval.pacc,
                                    fr.prompt_dispersion};
            csv << mpot::align::to_string(matcher) << ',' << cfg.seed;
            for (int k = 0; k < 5; ++k) {
                csv << ',' << fmt(vals[k]);
                sum[k] += vals[k];
            }
            csv << '\n';
        }
        csv << mpot::align::to_string(matcher) << ",mean";
        for (int k = 0; k < 5; ++k) csv << ',' << fmt(sum[k] / num_seeds);
        csv << '\n';
    }
    write_text(out + "/ablation.csv", csv.str());
    std::cout << csv.str();
    return kExitOk;
}

void write_pgm(const std::string& path, const mpot::Matrix& col_as_grid, int h, int w,
               double lo, double hi, std::ostringstream& scale_log,
               const std::string& name) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P5\n" << w << " " << h << "\n255\n";
    const double span = hi - lo;
    for (int i = 0; i < h * w; ++i) {
        const double v = col_as_grid.data[i];
        const int px = span > 0.0
                           ? static_cast<int>(std::lround((v - lo) / span * 255.0))
                           : 0;
        f.put(static_cast<char>(std::clamp(px, 0, 255)));
    }
    if (!f) throw IoError("write failure on " + path);
    scale_log << name << ' ' << fmt(lo) << ' ' << fmt(hi) << '\n';
}

void dump_column(const mpot::Matrix& m, int col, int h, int w, const std::string& dir,
                 const std::string& name, std::ostringstream& scale_log) {
    mpot::Matrix grid(h * w, 1);
    double lo = m(0, col), hi = m(0, col);
    for (int i = 0; i < m.rows; ++i) {
        grid.data[i] = m(i, col);
        lo = std::min(lo, grid.data[i]);
        hi = std::max(hi, grid.data[i]);
    }
    write_pgm(dir + "/" + name, grid, h, w, lo, hi, scale_log, name);
}

int cmd_dump_maps(const mpot::ExperimentConfig& cfg, const std::string& ckpt,
                  uint64_t scene_seed, const std::string& out) {
    ensure_dir(out);
    const mpot::train::ParamSet params = mpot::train::load_checkpoint(ckpt);
    mpot::world::WorldConfig wc = cfg.world;
    wc.seed = cfg.seed;
    const mpot::world::World w = mpot::world::make_world(wc);
    const mpot::world::SceneBatch scene = mpot::world::generate_scene(w, scene_seed);

    mpot::ad::Tape t;
    mpot::align::PipelineParams vars;
    vars.contexts = t.constant(params.contexts);
    vars.gta_weight = t.constant(params.gta_weight);
    vars.gta_bias = t.constant(params.gta_bias);
    vars.dec_w1 = t.constant(params.dec_w1);
    vars.dec_b1 = t.constant(params.dec_b1);
    vars.dec_w2 = t.constant(params.dec_w2);
    vars.dec_b2 = t.constant(params.dec_b2);
    const mpot::align::ForwardResult r =
        mpot::align::forward(t, w, scene, vars, mpot::forward_options(cfg));

    std::vector<mpot::Matrix> refined;
    refined.reserve(r.refined.size());
    for (mpot::ad::Var v : r.refined) refined.push_back(t.value(v));
    const mpot::Matrix fused = mpot::align::fuse_layers(refined);
    const mpot::Matrix per_class = mpot::align::collapse_prompts(fused, wc.num_prompts);

    std::ostringstream scale_log;
    const int gh = scene.grid_h, gw = scene.grid_w;
    for (int k = 0; k < wc.num_classes; ++k) {
        for (int j = 0; j < wc.num_prompts; ++j) {
            const std::string name =
                "map_c" + std::to_string(k) + "_p" + std::to_string(j) + ".pgm";
            dump_column(fused, k * wc.num_prompts + j, gh, gw, out, name, scale_log);
        }
        const std::string name = "fused_c" + std::to_string(k) + ".pgm";
        dump_column(per_class, k, gh, gw, out, name, scale_log);
    }
    write_text(out + "/scale.txt", scale_log.str());
    std::cout << "wrote " << wc.num_classes * (wc.num_prompts + 1) << " maps to " << out
              << "\n";
    return kExitOk;
}

int cmd_diagnose(const mpot::ExperimentConfig& cfg, const std::string& ckpt,
                 uint64_t scene_seed, const std::string& out) {
    ensure_dir(out);
    const mpot::train::ParamSet params = mpot::train::load_checkpoint(ckpt);
    mpot::world::WorldConfig wc = cfg.world;
    wc.seed = cfg.seed;
    const mpot::world::World w = mpot::world::make_world(wc);
    const mpot::world::SceneBatch scene = mpot::world::generate_scene(w, scene_seed);

    mpot::ad::Tape t;
    mpot::align::PipelineParams vars;
    vars.contexts = t.constant(params.contexts);
    vars.gta_weight = t.constant(params.gta_weight);
    vars.gta_bias = t.constant(params.gta_bias);
    vars.dec_w1 = t.constant(params.dec_w1);
    vars.dec_b1 = t.constant(params.dec_b1);
    vars.dec_w2 = t.constant(params.dec_w2);
    vars.dec_b2 = t.constant(params.dec_b2);
    const mpot::align::ForwardResult r =
        mpot::align::forward(t, w, scene, vars, mpot::forward_options(cfg));

    std::vector<mpot::Matrix> raw;
    raw.reserve(r.raw_scores.size());
    for (mpot::ad::Var v : r.raw_scores) raw.push_back(t.value(v));

    const mpot::Matrix text = mpot::world::text_encoder_stub(params.contexts, w);
    const double dispersion = mpot::metrics::prompt_dispersion(text, wc.num_prompts);

    std::ostringstream csv;
    csv << "metric,class,layer,value\n";
    csv << "prompt_dispersion,-1,-1," << fmt(dispersion) << '\n';
    for (int k = 0; k < wc.num_classes; ++k) {
        const std::vector<double> strength =
            mpot::metrics::layer_alignment_strength(raw, k, wc.num_prompts);
        for (size_t li = 0; li < strength.size(); ++li)
            csv << "layer_alignment," << k << ',' << (li + 1) << ',' << fmt(strength[li])
                << '\n';
    }
    write_text(out + "/diagnostics.csv", csv.str());
    std::cout << csv.str();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-prompt transport segmentation experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", ckpt_path, variants = "sinkhorn,hungarian,none";
    std::optional<uint64_t> seed_override;
    uint64_t scene_seed = 7;
    int num_seeds = 5;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file");
        sub->add_option("--seed", seed_override, "seed override");
        sub->add_option("--out", out_dir, "output directory");
    };

    CLI::App* train = app.add_subcommand("train", "run the two-phase training loop");
    add_common(train);
    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(evalc);
    evalc->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    CLI::App* ablate = app.add_subcommand("ablate", "paired-seed matcher comparison");
    add_common(ablate);
    ablate->add_option("--variants", variants, "comma-separated matcher list");
    ablate->add_option("--seeds", num_seeds, "number of paired seeds");
    CLI::App* dump = app.add_subcommand("dump-maps", "render score maps as PGM images");
    add_common(dump);
    dump->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    dump->add_option("--scene-seed", scene_seed, "scene to render");
    CLI::App* diag = app.add_subcommand("diagnose", "prompt dispersion and layer alignment");
    add_common(diag);
    diag->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    diag->add_option("--scene-seed", scene_seed, "scene to probe");

    CLI11_PARSE(app, argc, argv);

    try {
        thread_cap();
        const mpot::ExperimentConfig cfg = load_config(config_path, seed_override);
        if (train->parsed()) return cmd_train(cfg, out_dir);
        if (evalc->parsed()) return cmd_eval(cfg, ckpt_path, out_dir);
        if (ablate->parsed()) return cmd_ablate(cfg, out_dir, variants, num_seeds);
        if (dump->parsed()) return cmd_dump_maps(cfg, ckpt_path, scene_seed, out_dir);
        if (diag->parsed()) return cmd_diagnose(cfg, ckpt_path, scene_seed, out_dir);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitOk;
}
