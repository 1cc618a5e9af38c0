#include "mpot/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace mpot::metrics {

ConfusionAccumulator::ConfusionAccumulator(int num_classes_)
    : num_classes(num_classes_),
      intersection(num_classes_, 0),
      pred_count(num_classes_, 0),
      gt_count(num_classes_, 0) {
    if (num_classes_ < 1) throw std::invalid_argument("accumulator needs >= 1 class");
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
    if (other.num_classes != num_classes)
        throw std::invalid_argument("merge: class count mismatch");
    for (int c = 0; c < num_classes; ++c) {
        intersection[c] += other.intersection[c];
        pred_count[c] += other.pred_count[c];
        gt_count[c] += other.gt_count[c];
    }
    correct += other.correct;
    total += other.total;
}

void accumulate(ConfusionAccumulator& acc, const std::vector<int>& pred,
                const std::vector<int>& gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("accumulate: size mismatch");
    for (size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i], g = gt[i];
        if (p < 0 || p >= acc.num_classes || g < 0 || g >= acc.num_classes)
            throw std::invalid_argument("accumulate: class id out of range");
        ++acc.pred_count[p];
        ++acc.gt_count[g];
        if (p == g) {
            ++acc.intersection[p];
            ++acc.correct;
        }
        ++acc.total;
    }
}

double miou(const ConfusionAccumulator& acc, const std::vector<int>& classes) {
    if (classes.empty()) throw std::invalid_argument("miou: empty class subset");
    double sum = 0.0;
    int counted = 0;
    for (int c : classes) {
        if (c < 0 || c >= acc.num_classes) throw std::invalid_argument("miou: bad class id");
        const long long u = acc.union_count(c);
        if (u == 0) continue;  // class absent from both maps
        sum += static_cast<double>(acc.intersection[c]) / static_cast<double>(u);
        ++counted;
    }
    if (counted == 0) throw std::invalid_argument("miou: all unions zero");
    return sum / counted;
}

double hiou(double miou_seen, double miou_unseen) {
    if (miou_seen + miou_unseen == 0.0) throw std::invalid_argument("hiou: S+U is zero");
    return 2.0 * miou_seen * miou_unseen / (miou_seen + miou_unseen);
}

double pacc(const ConfusionAccumulator& acc) {
    if (acc.total == 0) throw std::invalid_argument("pacc: empty accumulator");
    return static_cast<double>(acc.correct) / static_cast<double>(acc.total);
}

std::vector<int> argmax_labels(const Matrix& pred) {
    std::vector<int> out(pred.rows);
    for (int i = 0; i < pred.rows; ++i) {
        int best = 0;
        for (int j = 1; j < pred.cols; ++j)
            if (pred(i, j) > pred(i, best)) best = j;
        out[i] = best;
    }
    return out;
}

double prompt_dispersion(const Matrix& text, int prompts_per_class) {
    if (prompts_per_class < 2) throw std::invalid_argument("prompt_dispersion: need >= 2 prompts");
    if (text.rows % prompts_per_class != 0)
        throw std::invalid_argument("prompt_dispersion: rows not divisible by prompt count");
    const int num_classes = text.rows / prompts_per_class;
    const int d = text.cols;

    double class_sum = 0.0;
    for (int k = 0; k < num_classes; ++k) {
        double pair_sum = 0.0;
        int pairs = 0;
        for (int a = 0; a < prompts_per_class; ++a) {
            for (int b = a + 1; b < prompts_per_class; ++b) {
                const int ra = k * prompts_per_class + a;
                const int rb = k * prompts_per_class + b;
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (int x = 0; x < d; ++x) {
                    dot += text(ra, x) * text(rb, x);
                    na += text(ra, x) * text(ra, x);
                    nb += text(rb, x) * text(rb, x);
                }
                const double denom = std::sqrt(na) * std::sqrt(nb);
                if (denom == 0.0) throw std::invalid_argument("prompt_dispersion: zero row");
                pair_sum += 1.0 - dot / denom;
                ++pairs;
            }
        }
        class_sum += pair_sum / pairs;
    }
    return class_sum / num_classes;
}

std::vector<double> layer_alignment_strength(const std::vector<Matrix>& raw_scores,
                                             int cls, int prompts_per_class) {
    std::vector<double> out;
    out.reserve(raw_scores.size());
    for (const Matrix& s : raw_scores) {
        if (prompts_per_class < 1 || s.cols % prompts_per_class != 0)
            throw std::invalid_argument("layer_alignment_strength: bad column layout");
        const int num_classes = s.cols / prompts_per_class;
        if (cls < 0 || cls >= num_classes)
            throw std::invalid_argument("layer_alignment_strength: bad class id");
        double sum = 0.0;
        for (int i = 0; i < s.rows; ++i)
            for (int j = 0; j < prompts_per_class; ++j)
                sum += s(i, cls * prompts_per_class + j);
        out.push_back(sum / (static_cast<double>(s.rows) * prompts_per_class));
    }
    return out;
}

}  // namespace mpot::metrics
