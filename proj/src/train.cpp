#include "mpot/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "mpot/config.hpp"
#include "mpot/metrics.hpp"

namespace mpot::train {

namespace {

constexpr double kProbClamp = 1e-7;
constexpr int kDecoderHidden = 32;

Matrix onehot(const std::vector<int>& labels, int num_classes) {
    Matrix out(static_cast<int>(labels.size()), num_classes);
    for (size_t i = 0; i < labels.size(); ++i) out(static_cast<int>(i), labels[i]) = 1.0;
    return out;
}

int mask_count(const std::vector<double>& mask) {
    int c = 0;
    for (double v : mask) c += (v != 0.0);
    if (c == 0) throw std::invalid_argument("loss: empty mask");
    return c;
}

Matrix mask_col(const std::vector<double>& mask) {
    Matrix m(static_cast<int>(mask.size()), 1);
    for (size_t i = 0; i < mask.size(); ++i) m.data[i] = mask[i];
    return m;
}

Matrix complement(const Matrix& gt) {
    Matrix out = gt;
    for (auto& v : out.data) v = 1.0 - v;
    return out;
}

}  // namespace

ad::Var ce_loss(ad::Tape& t, ad::Var probs, const Matrix& gt,
                const std::vector<double>& mask) {
    if (!t.value(probs).same_shape(gt)) throw std::invalid_argument("ce_loss: shape mismatch");
    const int count = mask_count(mask);
    ad::Var p = t.clamp_(probs, kProbClamp, 1.0 - kProbClamp);
    ad::Var pos = t.mul(t.constant(gt), t.log_(p));
    ad::Var neg = t.mul(t.constant(complement(gt)),
                        t.log_(t.add_scalar(t.neg(p), 1.0)));
    ad::Var per_entry = t.neg(t.add(pos, neg));
    ad::Var masked = t.mul_colvec(per_entry, t.constant(mask_col(mask)));
    return t.scale(t.sum(masked), 1.0 / count);
}

ad::Var focal_loss(ad::Tape& t, ad::Var logits, const Matrix& gt,
                   const std::vector<double>& mask, double gamma) {
    if (!t.value(logits).same_shape(gt)) throw std::invalid_argument("focal_loss: shape mismatch");
    const int count = mask_count(mask);
    ad::Var s = t.clamp_(t.sigmoid_(logits), kProbClamp, 1.0 - kProbClamp);
    ad::Var one_minus = t.add_scalar(t.neg(s), 1.0);
    ad::Var pos = t.mul(t.constant(gt), t.mul(t.pow_scalar(one_minus, gamma), t.log_(s)));
    ad::Var neg = t.mul(t.constant(complement(gt)),
                        t.mul(t.pow_scalar(s, gamma), t.log_(one_minus)));
    ad::Var per_entry = t.neg(t.add(pos, neg));
    ad::Var masked = t.mul_colvec(per_entry, t.constant(mask_col(mask)));
    return t.scale(t.sum(masked), 1.0 / count);
}

ad::Var dice_loss(ad::Tape& t, ad::Var probs, const Matrix& gt,
                  const std::vector<double>& mask) {
    if (!t.value(probs).same_shape(gt)) throw std::invalid_argument("dice_loss: shape mismatch");
    mask_count(mask);
    ad::Var mcol = t.constant(mask_col(mask));
    ad::Var gtc = t.constant(gt);
    ad::Var inter = t.sum(t.mul_colvec(t.mul(gtc, probs), mcol));
    ad::Var denom = t.add(t.sum(t.mul_colvec(t.mul(gtc, gtc), mcol)),
                          t.sum(t.mul_colvec(t.mul(probs, probs), mcol)));
    if (t.value(denom)(0, 0) == 0.0) throw std::invalid_argument("dice_loss: zero denominator");
    return t.add_scalar(t.neg(t.div(t.scale(inter, 2.0), denom)), 1.0);
}

SegLossTerms seg_loss(ad::Tape& t, ad::Var logits, const Matrix& gt,
                      const std::vector<double>& mask, const LossWeights& w) {
    SegLossTerms terms;
    ad::Var probs = t.softmax_rows(logits);
    terms.ce = ce_loss(t, probs, gt, mask);
    terms.focal = focal_loss(t, logits, gt, mask, w.gamma);
    terms.dice = dice_loss(t, probs, gt, mask);
    terms.total = t.add(t.add(t.scale(terms.ce, w.w_ce), t.scale(terms.focal, w.w_focal)),
                        t.scale(terms.dice, w.w_dice));
    return terms;
}

SegLossTerms total_loss(ad::Tape& t, ad::Var y, ad::Var y_tilde, const Matrix& gt,
                        const std::vector<double>& mask, const LossWeights& w) {
    const SegLossTerms a = seg_loss(t, y, gt, mask, w);
    const SegLossTerms b = seg_loss(t, y_tilde, gt, mask, w);
    SegLossTerms out;
    out.total = t.add(a.total, b.total);
    out.ce = t.add(a.ce, b.ce);
    out.focal = t.add(a.focal, b.focal);
    out.dice = t.add(a.dice, b.dice);
    return out;
}

std::vector<int> pseudo_label(const Matrix& y_tilde, const std::vector<int>& labels,
                              const world::ClassPartition& partition) {
    if (partition.unseen.empty()) throw std::invalid_argument("pseudo_label: empty unseen set");
    if (static_cast<size_t>(y_tilde.rows) != labels.size())
        throw std::invalid_argument("pseudo_label: size mismatch");
    std::vector<int> out = labels;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (partition.is_seen(labels[i])) continue;
        int best = partition.unseen[0];
        for (int c : partition.unseen)
            if (y_tilde(static_cast<int>(i), c) > y_tilde(static_cast<int>(i), best)) best = c;
        out[i] = best;
    }
    return out;
}

ParamSet init_params(const world::WorldConfig& cfg, uint64_t seed) {
    ParamSet p;
    p.contexts = world::init_prompt_contexts(cfg, seed);
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0x11);
    const int d = cfg.embed_dim;
    // Start the alignment layer near the identity on the raw text block.
    p.gta_weight = random_normal(2 * d, d, rng, 0.02);
    for (int j = 0; j < d; ++j) p.gta_weight(d + j, j) += 1.0;
    p.gta_bias = Matrix(1, d);
    const int in = cfg.num_layers * cfg.num_classes;
    p.dec_w1 = random_normal(in, kDecoderHidden, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    p.dec_b1 = Matrix(1, kDecoderHidden);
    p.dec_w2 = random_normal(kDecoderHidden, cfg.num_classes, rng,
                             1.0 / std::sqrt(static_cast<double>(kDecoderHidden)));
    p.dec_b2 = Matrix(1, cfg.num_classes);
    return p;
}

void AdamW::update(std::vector<Matrix*> params, const std::vector<const Matrix*>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("AdamW: group count mismatch");
    if (m.empty()) {
        for (const Matrix* p : params) {
            m.emplace_back(p->rows, p->cols);
            v.emplace_back(p->rows, p->cols);
        }
    }
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    for (size_t g = 0; g < params.size(); ++g) {
        Matrix& p = *params[g];
        const Matrix& gr = *grads[g];
        if (!p.same_shape(gr)) throw std::invalid_argument("AdamW: gradient shape mismatch");
        for (size_t i = 0; i < p.data.size(); ++i) {
            m[g].data[i] = beta1 * m[g].data[i] + (1.0 - beta1) * gr.data[i];
            v[g].data[i] = beta2 * v[g].data[i] + (1.0 - beta2) * gr.data[i] * gr.data[i];
            const double mhat = m[g].data[i] / bc1;
            const double vhat = v[g].data[i] / bc2;
            p.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.data[i]);
        }
    }
}

std::vector<world::SceneBatch> make_scene_pool(const world::World& w, uint64_t base_seed,
                                               int count, bool cover_all_classes) {
    std::vector<world::SceneBatch> pool;
    std::set<int> covered;
    const int cap = count + 200;
    for (int i = 0; i < cap; ++i) {
        if (static_cast<int>(pool.size()) >= count &&
            (!cover_all_classes || static_cast<int>(covered.size()) == w.cfg.num_classes))
            break;
        world::SceneBatch scene = world::generate_scene(w, base_seed * 1000003ULL + i);
        covered.insert(scene.labels.begin(), scene.labels.end());
        pool.push_back(std::move(scene));
    }
    if (cover_all_classes && static_cast<int>(covered.size()) != w.cfg.num_classes)
        throw std::runtime_error("make_scene_pool: could not cover every class");
    return pool;
}

namespace {

align::PipelineParams push_params(ad::Tape& t, const ParamSet& p, bool trainable) {
    align::PipelineParams v;
    auto push = [&](const Matrix& m) { return trainable ? t.param(m) : t.constant(m); };
    v.contexts = push(p.contexts);
    v.gta_weight = push(p.gta_weight);
    v.gta_bias = push(p.gta_bias);
    v.dec_w1 = push(p.dec_w1);
    v.dec_b1 = push(p.dec_b1);
    v.dec_w2 = push(p.dec_w2);
    v.dec_b2 = push(p.dec_b2);
    return v;
}

}  // namespace

EvalSummary evaluate(const world::World& w, const world::ClassPartition& partition,
                     const ParamSet& params, const align::ForwardOptions& opt,
                     const std::vector<world::SceneBatch>& scenes) {
    metrics::ConfusionAccumulator acc(w.cfg.num_classes);
    for (const auto& scene : scenes) {
        ad::Tape t;
        align::PipelineParams vars = push_params(t, params, false);
        align::ForwardResult r = align::forward(t, w, scene, vars, opt);
        metrics::accumulate(acc, metrics::argmax_labels(t.value(r.y_star)), scene.labels);
    }
    EvalSummary s;
    s.miou_seen = metrics::miou(acc, partition.seen);
    s.miou_unseen = metrics::miou(acc, partition.unseen);
    s.hiou = (s.miou_seen + s.miou_unseen > 0.0)
                 ? metrics::hiou(s.miou_seen, s.miou_unseen)
                 : 0.0;
    s.pacc = metrics::pacc(acc);
    return s;
}

FitResult fit(const ExperimentConfig& cfg) {
    cfg.validate();
    world::WorldConfig wc = cfg.world;
    wc.seed = cfg.seed;
    const world::World w = world::make_world(wc);

    FitResult result;
    result.partition = world::split_classes(wc, cfg.seed);
    const uint64_t frozen_before = world::world_checksum(w);

    const auto train_pool = make_scene_pool(w, cfg.seed, cfg.train_scenes, false);
    const auto eval_pool = make_scene_pool(w, cfg.seed ^ 0xE7A1ULL, cfg.eval_scenes, true);

    TrainState& state = result.state;
    state.params = init_params(wc, cfg.seed);
    state.opt.lr = cfg.schedule.lr;
    state.opt.weight_decay = cfg.schedule.weight_decay;

    const align::ForwardOptions opt = forward_options(cfg);
    const int total = cfg.schedule.total_iters;
    const int phase1 = cfg.schedule.phase1_iters();

    ParamSet snapshot;  // label generator for the frozen phase-2 policy
    EvalSummary last_eval{};
    bool have_eval = false;

    for (int iter = 1; iter <= total; ++iter) {
        state.iter = iter;
        state.phase = (iter <= phase1) ? 1 : 2;
        if (cfg.frozen_snapshot && iter == phase1 + 1) snapshot = state.params;

        const world::SceneBatch& scene = train_pool[(iter - 1) % train_pool.size()];

        ad::Tape t;
        align::PipelineParams vars = push_params(t, state.params, true);
        align::ForwardResult fwd = align::forward(t, w, scene, vars, opt);

        std::vector<int> labels = scene.labels;
        std::vector<double> mask(labels.size(), 1.0);
        if (state.phase == 1) {
            for (size_t i = 0; i < labels.size(); ++i)
                mask[i] = result.partition.is_seen(labels[i]) ? 1.0 : 0.0;
        } else {
            const bool use_snapshot =
                cfg.frozen_snapshot && iter <= total / 2;
            if (use_snapshot) {
                ad::Tape ts;
                align::PipelineParams svars = push_params(ts, snapshot, false);
                align::ForwardResult sf = align::forward(ts, w, scene, svars, opt);
                labels = pseudo_label(ts.value(sf.y_tilde), scene.labels, result.partition);
            } else {
                labels = pseudo_label(t.value(fwd.y_tilde), scene.labels, result.partition);
            }
        }

        const Matrix gt = onehot(labels, wc.num_classes);
        const SegLossTerms loss = total_loss(t, fwd.y_dec, fwd.y_tilde, gt, mask, cfg.loss);

        MetricRow row;
        row.step = iter;
        row.phase = state.phase;
        row.loss_total = t.value(loss.total)(0, 0);
        row.loss_ce = t.value(loss.ce)(0, 0);
        row.loss_focal = t.value(loss.focal)(0, 0);
        row.loss_dice = t.value(loss.dice)(0, 0);
        if (!std::isfinite(row.loss_total)) {
            result.diverged = true;
            result.trace.push_back(row);
            return result;
        }

        t.backward(loss.total);
        std::vector<Matrix*> params = {
            &state.params.contexts, &state.params.gta_weight, &state.params.gta_bias,
            &state.params.dec_w1, &state.params.dec_b1, &state.params.dec_w2,
            &state.params.dec_b2};
        std::vector<const Matrix*> grads = {
            &t.grad(vars.contexts), &t.grad(vars.gta_weight), &t.grad(vars.gta_bias),
            &t.grad(vars.dec_w1), &t.grad(vars.dec_b1), &t.grad(vars.dec_w2),
            &t.grad(vars.dec_b2)};
        for (const Matrix* g : grads)
            if (!all_finite(*g)) {
                result.diverged = true;
                result.trace.push_back(row);
                return result;
            }
        state.opt.update(params, grads);

        if (!have_eval || iter % cfg.eval_interval == 0 || iter == total) {
            last_eval = evaluate(w, result.partition, state.params, opt, eval_pool);
            have_eval = true;
        }
        row.miou_seen = last_eval.miou_seen;
        row.miou_unseen = last_eval.miou_unseen;
        row.hiou = last_eval.hiou;
        row.pacc = last_eval.pacc;
        result.trace.push_back(row);
    }

    result.final_eval = last_eval;
    result.prompt_dispersion = metrics::prompt_dispersion(
        world::text_encoder_stub(state.params.contexts, w), wc.num_prompts);

    if (world::world_checksum(w) != frozen_before)
        throw std::runtime_error("fit: frozen encoder state changed");
    return result;
}

// ---------------------------------------------------------------------------
// checkpoint I/O

namespace {

constexpr char kCkptMagic[8] = {'M', 'P', 'O', 'T', 'C', 'K', 'P', '1'};

void write_array(std::ofstream& f, const std::string& name, const Matrix& m) {
    const uint32_t len = static_cast<uint32_t>(name.size());
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(name.data(), len);
    const int32_t dims[2] = {m.rows, m.cols};
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    f.write(reinterpret_cast<const char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

Matrix read_array(std::ifstream& f, const std::string& expect) {
    uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    f.read(name.data(), len);
    if (name != expect)
        throw std::runtime_error("checkpoint: expected array '" + expect + "', found '" + name + "'");
    int32_t dims[2];
    f.read(reinterpret_cast<char*>(dims), sizeof(dims));
    Matrix m(dims[0], dims[1]);
    f.read(reinterpret_cast<char*>(m.data.data()),
           static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kCkptMagic, sizeof(kCkptMagic));
    const uint32_t version = 1, count = 7;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    write_array(f, "contexts", params.contexts);
    write_array(f, "gta_weight", params.gta_weight);
    write_array(f, "gta_bias", params.gta_bias);
    write_array(f, "dec_w1", params.dec_w1);
    write_array(f, "dec_b1", params.dec_b1);
    write_array(f, "dec_w2", params.dec_w2);
    write_array(f, "dec_b2", params.dec_b2);
    if (!f) throw std::runtime_error("save_checkpoint: write failure on " + path);
}

ParamSet load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    uint32_t version = 0, count = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    f.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (version != 1 || count != 7)
        throw std::runtime_error("load_checkpoint: unsupported layout in " + path);
    ParamSet p;
    p.contexts = read_array(f, "contexts");
    p.gta_weight = read_array(f, "gta_weight");
    p.gta_bias = read_array(f, "gta_bias");
    p.dec_w1 = read_array(f, "dec_w1");
    p.dec_b1 = read_array(f, "dec_b1");
    p.dec_w2 = read_array(f, "dec_w2");
    p.dec_b2 = read_array(f, "dec_b2");
    if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return p;
}

}  // namespace mpot::train
