#pragma once

#include <vector>

#include "mpot/matrix.hpp"

namespace mpot::metrics {

// Per-class intersection/union/pixel counts over an evaluation set.
// Mergeable, so scenes can be accumulated in any order.
struct ConfusionAccumulator {
    explicit ConfusionAccumulator(int num_classes);

    int num_classes = 0;
    std::vector<long long> intersection;  // per class
    std::vector<long long> pred_count;
    std::vector<long long> gt_count;
    long long correct = 0;
    long long total = 0;

    void merge(const ConfusionAccumulator& other);
    long long union_count(int cls) const {
        return pred_count[cls] + gt_count[cls] - intersection[cls];
    }
};

void accumulate(ConfusionAccumulator& acc, const std::vector<int>& pred,
                const std::vector<int>& gt);

// Mean IoU over the subset; classes with zero union are excluded.
double miou(const ConfusionAccumulator& acc, const std::vector<int>& classes);

// Harmonic mean 2SU/(S+U).
double hiou(double miou_seen, double miou_unseen);

double pacc(const ConfusionAccumulator& acc);

// Per-pixel argmax over the K columns of a (pixels x K) prediction.
std::vector<int> argmax_labels(const Matrix& pred);

// Mean pairwise cosine distance among each class's prompt rows, averaged
// over classes. Rows of `text` are class-major, prompt-minor.
double prompt_dispersion(const Matrix& text, int prompts_per_class);

// Mean raw score over all pixels and the given class's prompt columns,
// one value per layer.
std::vector<double> layer_alignment_strength(const std::vector<Matrix>& raw_scores,
                                             int cls, int prompts_per_class);

}  // namespace mpot::metrics
