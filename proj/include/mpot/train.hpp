#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "mpot/align.hpp"
#include "mpot/matrix.hpp"
#include "mpot/tape.hpp"
#include "mpot/world.hpp"

namespace mpot {
struct ExperimentConfig;
}

namespace mpot::train {

struct LossWeights {
    double w_ce = 1.0;
    double w_focal = 20.0;
    double w_dice = 1.0;
    double gamma = 2.0;
};

struct Schedule {
    int total_iters = 1200;
    double lr = 2e-3;
    double weight_decay = 1e-4;

    // Phase 1 (seen-class learning) takes the first 20% of iterations.
    int phase1_iters() const { return std::max(1, total_iters / 5); }
};

// ---------------------------------------------------------------------------
// Losses. `gt` is a (pixels x K) one-hot matrix, `mask` a per-pixel 0/1
// weight; every loss averages over masked pixels and sums over classes.

// Two-term binary cross-entropy per class channel on probabilities.
ad::Var ce_loss(ad::Tape& t, ad::Var probs, const Matrix& gt,
                const std::vector<double>& mask);

// Sigmoid focal loss on logits; reduces to sigmoid-BCE at gamma = 0.
ad::Var focal_loss(ad::Tape& t, ad::Var logits, const Matrix& gt,
                   const std::vector<double>& mask, double gamma);

// 1 - 2<gt,p> / (|gt|^2 + |p|^2) over masked pixels, on probabilities.
ad::Var dice_loss(ad::Tape& t, ad::Var probs, const Matrix& gt,
                  const std::vector<double>& mask);

struct SegLossTerms {
    ad::Var total, ce, focal, dice;
};

// Weighted combination on logits; probabilities are the row softmax.
SegLossTerms seg_loss(ad::Tape& t, ad::Var logits, const Matrix& gt,
                      const std::vector<double>& mask, const LossWeights& w);

// L_seg(Y) + L_seg(Y~); component vars hold the summed components.
SegLossTerms total_loss(ad::Tape& t, ad::Var y, ad::Var y_tilde, const Matrix& gt,
                        const std::vector<double>& mask, const LossWeights& w);

// ---------------------------------------------------------------------------

// Pixels whose label is unseen get the argmax over unseen-class columns of
// y_tilde; seen-labeled pixels are never rewritten.
std::vector<int> pseudo_label(const Matrix& y_tilde, const std::vector<int>& labels,
                              const world::ClassPartition& partition);

struct ParamSet {
    Matrix contexts;
    Matrix gta_weight, gta_bias;
    Matrix dec_w1, dec_b1, dec_w2, dec_b2;
};

ParamSet init_params(const world::WorldConfig& cfg, uint64_t seed);

struct AdamW {
    double lr = 1e-2;
    double weight_decay = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int step = 0;
    std::vector<Matrix> m, v;

    void update(std::vector<Matrix*> params, const std::vector<const Matrix*>& grads);
};

struct TrainState {
    ParamSet params;
    AdamW opt;
    int iter = 0;
    int phase = 1;
};

struct MetricRow {
    int step = 0;
    int phase = 1;
    double loss_total = 0, loss_ce = 0, loss_focal = 0, loss_dice = 0;
    double miou_seen = 0, miou_unseen = 0, hiou = 0, pacc = 0;
};

struct EvalSummary {
    double miou_seen = 0, miou_unseen = 0, hiou = 0, pacc = 0;
};

EvalSummary evaluate(const world::World& w, const world::ClassPartition& partition,
                     const ParamSet& params, const align::ForwardOptions& opt,
                     const std::vector<world::SceneBatch>& scenes);

struct FitResult {
    TrainState state;
    std::vector<MetricRow> trace;
    bool diverged = false;
    EvalSummary final_eval;
    double prompt_dispersion = 0.0;
    world::ClassPartition partition;
};

FitResult fit(const ExperimentConfig& cfg);

// Deterministic scene seed stream for training / evaluation pools. The
// evaluation pool is extended until every class id appears in some scene.
std::vector<world::SceneBatch> make_scene_pool(const world::World& w, uint64_t base_seed,
                                               int count, bool cover_all_classes);

void save_checkpoint(const std::string& path, const ParamSet& params);
ParamSet load_checkpoint(const std::string& path);

}  // namespace mpot::train
