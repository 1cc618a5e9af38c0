#include "mpot/align.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mpot::align {

namespace {

constexpr double kFuseFloor = 1e-6;

}  // namespace

Matcher matcher_from_string(const std::string& s) {
    if (s == "sinkhorn") return Matcher::sinkhorn;
    if (s == "hungarian") return Matcher::hungarian;
    if (s == "none") return Matcher::none;
    throw std::invalid_argument("unknown matcher: " + s);
}

std::string to_string(Matcher m) {
    switch (m) {
        case Matcher::sinkhorn: return "sinkhorn";
        case Matcher::hungarian: return "hungarian";
        case Matcher::none: return "none";
    }
    return "?";
}

Matrix normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (int i = 0; i < out.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < out.cols; ++j) s += out(i, j) * out(i, j);
        const double norm = std::sqrt(s);
        if (norm == 0.0) throw std::invalid_argument("normalize_rows: zero row");
        for (int j = 0; j < out.cols; ++j) out(i, j) /= norm;
    }
    return out;
}

Matrix global_text_align(const Matrix& g, const Matrix& fbar, const GtaParams& q) {
    if (fbar.rows != 1 || fbar.cols != g.cols)
        throw std::invalid_argument("global_text_align: global embedding shape");
    if (q.weight.rows != 2 * g.cols || q.bias.rows != 1 || q.bias.cols != q.weight.cols)
        throw std::invalid_argument("global_text_align: parameter shape");
    Matrix cat(g.rows, 2 * g.cols);
    for (int i = 0; i < g.rows; ++i) {
        for (int j = 0; j < g.cols; ++j) {
            cat(i, j) = fbar(0, j) * g(i, j);
            cat(i, g.cols + j) = g(i, j);
        }
    }
    Matrix out = matmul(cat, q.weight);
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) += q.bias(0, j);
    return out;
}

Matrix score_matrix(const Matrix& f, const Matrix& g_ga) {
    if (f.cols != g_ga.cols) throw std::invalid_argument("score_matrix: embedding dim mismatch");
    return matmul(f, transpose(g_ga));
}

std::vector<ot::TransportPlan> solve_layer_plans(const Matrix& s, int prompts_per_class,
                                                 const ot::SinkhornConfig& cfg) {
    if (prompts_per_class < 1 || s.cols % prompts_per_class != 0)
        throw std::invalid_argument("solve_layer_plans: columns not divisible by prompt count");
    const int num_classes = s.cols / prompts_per_class;
    const ot::Marginals marg = ot::uniform_marginals(s.rows, prompts_per_class);
    std::vector<ot::TransportPlan> plans;
    plans.reserve(num_classes);
    for (int k = 0; k < num_classes; ++k) {
        Matrix cost(s.rows, prompts_per_class);
        for (int i = 0; i < s.rows; ++i)
            for (int j = 0; j < prompts_per_class; ++j)
                cost(i, j) = 1.0 - s(i, k * prompts_per_class + j);
        plans.push_back(ot::sinkhorn_plan(cost, marg, cfg));
    }
    return plans;
}

Matrix refine_scores(const Matrix& s, const std::vector<ot::TransportPlan>& plans) {
    int cols = 0;
    for (const auto& p : plans) {
        if (p.values.rows != s.rows) throw std::invalid_argument("refine_scores: row mismatch");
        cols += p.values.cols;
    }
    if (cols != s.cols) throw std::invalid_argument("refine_scores: column mismatch");
    Matrix out = s;
    int off = 0;
    for (const auto& p : plans) {
        for (int i = 0; i < s.rows; ++i)
            for (int j = 0; j < p.values.cols; ++j) out(i, off + j) *= p.values(i, j);
        off += p.values.cols;
    }
    return out;
}

Matrix fuse_layers(const std::vector<Matrix>& refined) {
    if (refined.empty()) throw std::invalid_argument("fuse_layers: empty layer list");
    const int d = static_cast<int>(refined.size());
    Matrix out(refined[0].rows, refined[0].cols, 1.0);
    for (int i = 0; i < d; ++i) {
        if (!refined[i].same_shape(out)) throw std::invalid_argument("fuse_layers: shape mismatch");
        const bool last = (i == d - 1);
        for (size_t e = 0; e < out.data.size(); ++e) {
            const double x = refined[i].data[e];
            double factor = last ? std::max((x + 1.0) / 2.0, kFuseFloor)
                                 : 1.0 / (1.0 + std::exp(-x));
            out.data[e] *= std::pow(factor, 1.0 / d);
        }
    }
    return out;
}

Matrix collapse_prompts(const Matrix& s, int prompts_per_class) {
    if (prompts_per_class < 1 || s.cols % prompts_per_class != 0)
        throw std::invalid_argument("collapse_prompts: columns not divisible by prompt count");
    Matrix out(s.rows, s.cols / prompts_per_class);
    for (int i = 0; i < s.rows; ++i)
        for (int j = 0; j < s.cols; ++j) out(i, j / prompts_per_class) += s(i, j);
    return out;
}

Matrix upsample_bilinear(const Matrix& s, int h_in, int w_in, int h_out, int w_out) {
    ad::Tape t;
    return t.value(t.upsample_bilinear(t.constant(s), h_in, w_in, h_out, w_out));
}

Matrix blend(const Matrix& y, const Matrix& y_tilde, double blend_lambda) {
    if (!y.same_shape(y_tilde)) throw std::invalid_argument("blend: shape mismatch");
    if (blend_lambda < 0.0 || blend_lambda > 1.0)
        throw std::invalid_argument("blend: lambda outside [0,1]");
    Matrix out = y;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = blend_lambda * y.data[i] + (1.0 - blend_lambda) * y_tilde.data[i];
    return out;
}

ad::Var sinkhorn_plan_taped(ad::Tape& t, ad::Var cost, const ot::SinkhornConfig& cfg) {
    if (cfg.epsilon <= 0.0 || cfg.max_iter < 1)
        throw std::invalid_argument("sinkhorn_plan_taped: invalid config");
    const Matrix& vc = t.value(cost);
    const int m = vc.rows, n = vc.cols;

    ad::Var log_kernel = t.scale(cost, -1.0 / cfg.epsilon);
    ad::Var log_mu = t.constant(Matrix(m, 1, std::log(1.0 / m)));
    ad::Var log_nu = t.constant(Matrix(1, n, std::log(1.0 / n)));

    ad::Var log_a = 0, log_b = t.constant(Matrix(1, n, 0.0));
    for (int it = 0; it < cfg.max_iter; ++it) {
        log_a = t.sub(log_mu, t.lse_rows(t.add_rowvec(log_kernel, log_b)));
        log_b = t.sub(log_nu, t.lse_cols(t.add_colvec(log_kernel, log_a)));
    }
    return t.exp_(t.add_colvec(t.add_rowvec(log_kernel, log_b), log_a));
}

ForwardResult forward(ad::Tape& t, const world::World& w, const world::SceneBatch& scene,
                      const PipelineParams& params, const ForwardOptions& opt) {
    const world::WorldConfig& cfg = w.cfg;
    const int num_classes = cfg.num_classes, prompts = cfg.num_prompts;
    const int layers = cfg.num_layers;
    const int gh = scene.grid_h, gw = scene.grid_w;
    const int grid_pixels = gh * gw;
    if (static_cast<int>(scene.layer_embeddings.size()) != layers)
        throw std::invalid_argument("forward: scene layer count mismatch");
    if (opt.blend_lambda < 0.0 || opt.blend_lambda > 1.0)
        throw std::invalid_argument("forward: blend lambda outside [0,1]");
    const int start = opt.layer_start;
    if (start < 1 || start > layers)
        throw std::invalid_argument("forward: layer_start outside 1..L");

    ForwardResult r;
    r.text = world::text_encoder(t, params.contexts, w);

    ad::Var fbar = t.constant(scene.global_embedding);
    ad::Var gcat = t.hcat({t.mul_rowvec(r.text, fbar), r.text});
    r.g_ga = t.l2_normalize_rows(
        t.add_rowvec(t.matmul(gcat, params.gta_weight), params.gta_bias));
    ad::Var g_ga_t = t.transpose(r.g_ga);

    std::vector<ad::Var> collapsed;
    for (int li = 0; li < layers; ++li) {
        ad::Var s = t.matmul(t.constant(scene.layer_embeddings[li]), g_ga_t);
        r.raw_scores.push_back(s);
        collapsed.push_back(t.block_sum_cols(s, prompts));
    }

    // decoder path
    ad::Var dec_in = t.hcat(collapsed);
    ad::Var hidden = t.tanh_(t.add_rowvec(t.matmul(dec_in, params.dec_w1), params.dec_b1));
    ad::Var logits_grid = t.add_rowvec(t.matmul(hidden, params.dec_w2), params.dec_b2);
    r.y_dec = t.upsample_bilinear(logits_grid, gh, gw, scene.height, scene.width);

    // transport path
    const int d = layers - start + 1;
    ad::Var fused = 0;
    for (int li = start - 1; li < layers; ++li) {
        ad::Var s = r.raw_scores[li];
        ad::Var plan_cat;
        if (opt.matcher == Matcher::none) {
            // Uniform plan times M*N is the all-ones matrix.
            plan_cat = t.constant(Matrix(grid_pixels, num_classes * prompts, 1.0));
        } else if (opt.matcher == Matcher::hungarian) {
            // Non-differentiable baseline; plans enter the graph as constants.
            Matrix scaled(grid_pixels, num_classes * prompts);
            const Matrix& sv = t.value(s);
            for (int k = 0; k < num_classes; ++k) {
                Matrix cost(grid_pixels, prompts);
                for (int i = 0; i < grid_pixels; ++i)
                    for (int j = 0; j < prompts; ++j)
                        cost(i, j) = 1.0 - sv(i, k * prompts + j);
                const ot::TransportPlan plan = ot::hungarian_assignment(cost);
                for (int i = 0; i < grid_pixels; ++i)
                    for (int j = 0; j < prompts; ++j)
                        scaled(i, k * prompts + j) =
                            plan.values(i, j) * grid_pixels * prompts;
            }
            plan_cat = t.constant(std::move(scaled));
        } else if (opt.joint_plan) {
            ad::Var cost = t.add_scalar(t.neg(s), 1.0);
            ad::Var plan = sinkhorn_plan_taped(t, cost, opt.sinkhorn);
            plan_cat = t.scale(plan, static_cast<double>(grid_pixels) * num_classes * prompts);
        } else {
            std::vector<ad::Var> per_class;
            for (int k = 0; k < num_classes; ++k) {
                ad::Var block = t.slice_cols(s, k * prompts, prompts);
                ad::Var cost = t.add_scalar(t.neg(block), 1.0);
                ad::Var plan = sinkhorn_plan_taped(t, cost, opt.sinkhorn);
                per_class.push_back(t.scale(plan, static_cast<double>(grid_pixels) * prompts));
            }
            plan_cat = t.hcat(per_class);
        }
        if (opt.detach_plans) plan_cat = t.detach(plan_cat);

        ad::Var refined = t.mul(plan_cat, s);
        r.refined.push_back(refined);

        ad::Var factor;
        if (li == layers - 1) {
            factor = t.clamp_(t.scale(t.add_scalar(refined, 1.0), 0.5), kFuseFloor,
                              std::numeric_limits<double>::infinity());
        } else {
            factor = t.sigmoid_(refined);
        }
        factor = t.pow_scalar(factor, 1.0 / d);
        fused = (li == start - 1) ? factor : t.mul(fused, factor);
    }

    r.y_tilde = t.upsample_bilinear(t.block_sum_cols(fused, prompts), gh, gw,
                                    scene.height, scene.width);
    r.y_star = t.add(t.scale(r.y_dec, opt.blend_lambda),
                     t.scale(r.y_tilde, 1.0 - opt.blend_lambda));
    return r;
}

}  // namespace mpot::align
