#pragma once

#include <string>
#include <vector>

#include "mpot/matrix.hpp"
#include "mpot/ot.hpp"
#include "mpot/tape.hpp"
#include "mpot/world.hpp"

namespace mpot::align {

enum class Matcher { sinkhorn, hungarian, none };

Matcher matcher_from_string(const std::string& s);
std::string to_string(Matcher m);

struct GtaParams {
    Matrix weight;  // 2D x D
    Matrix bias;    // 1 x D
};

// ---------------------------------------------------------------------------
// Plain (non-taped) building blocks. These are the reference forms the
// taped pipeline is tested against.

Matrix normalize_rows(const Matrix& m);

// g_ga = Q(cat[fbar (.) g, g]); caller normalizes before scoring.
Matrix global_text_align(const Matrix& g, const Matrix& fbar, const GtaParams& q);

// Cosine score matrix f g^T of row-normalized inputs.
Matrix score_matrix(const Matrix& f, const Matrix& g_ga);

// One transport plan per class block of N prompt columns, cost 1 - S,
// uniform marginals.
std::vector<ot::TransportPlan> solve_layer_plans(const Matrix& s, int prompts_per_class,
                                                 const ot::SinkhornConfig& cfg);

// Entrywise product with the column-concatenated plans.
Matrix refine_scores(const Matrix& s, const std::vector<ot::TransportPlan>& plans);

// Geometric mean across layers: sigmoid for all but the last entry of
// `refined`, ((x+1)/2) clamped positive for the last, each to the 1/d power.
Matrix fuse_layers(const std::vector<Matrix>& refined);

Matrix collapse_prompts(const Matrix& s, int prompts_per_class);

Matrix upsample_bilinear(const Matrix& s, int h_in, int w_in, int h_out, int w_out);

Matrix blend(const Matrix& y, const Matrix& y_tilde, double blend_lambda);

// ---------------------------------------------------------------------------
// Taped pipeline

struct PipelineParams {
    ad::Var contexts;  // (N*len) x ctx_dim
    ad::Var gta_weight;
    ad::Var gta_bias;
    ad::Var dec_w1;  // (L*K) x hidden
    ad::Var dec_b1;
    ad::Var dec_w2;  // hidden x K
    ad::Var dec_b2;
};

struct ForwardOptions {
    ot::SinkhornConfig sinkhorn;
    Matcher matcher = Matcher::sinkhorn;
    int layer_start = 4;  // 1-based first layer entering the fusion
    bool detach_plans = false;
    bool joint_plan = false;  // single M x (K*N) solve instead of per-class
    double blend_lambda = 0.2;
};

struct ForwardResult {
    ad::Var y_dec;    // decoder logits, (H*W) x K
    ad::Var y_tilde;  // transport-refined prediction, (H*W) x K
    ad::Var y_star;   // blend, (H*W) x K
    ad::Var text;            // raw text embeddings, (K*N) x D
    ad::Var g_ga;            // normalized globally-aligned text embeddings
    std::vector<ad::Var> raw_scores;  // L score matrices, M x (K*N)
    std::vector<ad::Var> refined;     // d refined matrices for layers n..L
};

// Taped Sinkhorn with a fixed iteration count (no early exit, so the
// graph is a smooth function of the cost). Forward values match the plain
// solver run with tol <= 0.
ad::Var sinkhorn_plan_taped(ad::Tape& t, ad::Var cost, const ot::SinkhornConfig& cfg);

ForwardResult forward(ad::Tape& t, const world::World& w, const world::SceneBatch& scene,
                      const PipelineParams& params, const ForwardOptions& opt);

}  // namespace mpot::align
