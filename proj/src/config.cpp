#include "mpot/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mpot {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: bad unsigned integer for " + key + ": '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
    world.validate();
    if (sinkhorn.epsilon <= 0.0 || sinkhorn.max_iter < 1 || sinkhorn.tol <= 0.0)
        throw std::invalid_argument("config: invalid sinkhorn settings");
    if (schedule.total_iters < 1 || schedule.lr <= 0.0 || schedule.weight_decay < 0.0)
        throw std::invalid_argument("config: invalid schedule");
    if (loss.w_ce < 0.0 || loss.w_focal < 0.0 || loss.w_dice < 0.0 || loss.gamma < 0.0)
        throw std::invalid_argument("config: negative loss weight");
    if (blend_lambda < 0.0 || blend_lambda > 1.0)
        throw std::invalid_argument("config: blend lambda outside [0,1]");
    if (layer_start < 1 || layer_start > world.num_layers)
        throw std::invalid_argument("config: layer_start outside 1..L");
    if (train_scenes < 1 || eval_scenes < 1 || eval_interval < 1)
        throw std::invalid_argument("config: scene/eval counts must be positive");
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: missing '=' on line " + std::to_string(line_no));
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));

        if (key == "world.classes") cfg.world.num_classes = to_int(key, val);
        else if (key == "world.prompts") cfg.world.num_prompts = to_int(key, val);
        else if (key == "world.embed_dim") cfg.world.embed_dim = to_int(key, val);
        else if (key == "world.ctx_dim") cfg.world.ctx_dim = to_int(key, val);
        else if (key == "world.layers") cfg.world.num_layers = to_int(key, val);
        else if (key == "world.height") cfg.world.height = to_int(key, val);
        else if (key == "world.width") cfg.world.width = to_int(key, val);
        else if (key == "world.attributes") cfg.world.num_attributes = to_int(key, val);
        else if (key == "world.context_len") cfg.world.context_len = to_int(key, val);
        else if (key == "world.noise") cfg.world.noise = to_double(key, val);
        else if (key == "world.unseen") cfg.world.num_unseen = to_int(key, val);
        else if (key == "sinkhorn.epsilon") cfg.sinkhorn.epsilon = to_double(key, val);
        else if (key == "sinkhorn.max_iter") cfg.sinkhorn.max_iter = to_int(key, val);
        else if (key == "sinkhorn.tol") cfg.sinkhorn.tol = to_double(key, val);
        else if (key == "train.total_iters") cfg.schedule.total_iters = to_int(key, val);
        else if (key == "train.lr") cfg.schedule.lr = to_double(key, val);
        else if (key == "train.weight_decay") cfg.schedule.weight_decay = to_double(key, val);
        else if (key == "train.scenes") cfg.train_scenes = to_int(key, val);
        else if (key == "train.eval_scenes") cfg.eval_scenes = to_int(key, val);
        else if (key == "train.eval_interval") cfg.eval_interval = to_int(key, val);
        else if (key == "train.snapshot") {
            if (val == "live") cfg.frozen_snapshot = false;
            else if (val == "frozen") cfg.frozen_snapshot = true;
            else throw std::invalid_argument("config: train.snapshot must be live|frozen");
        }
        else if (key == "loss.ce") cfg.loss.w_ce = to_double(key, val);
        else if (key == "loss.focal") cfg.loss.w_focal = to_double(key, val);
        else if (key == "loss.dice") cfg.loss.w_dice = to_double(key, val);
        else if (key == "loss.gamma") cfg.loss.gamma = to_double(key, val);
        else if (key == "model.blend_lambda") cfg.blend_lambda = to_double(key, val);
        else if (key == "model.matcher") cfg.matcher = align::matcher_from_string(val);
        else if (key == "model.layer_start") cfg.layer_start = to_int(key, val);
        else if (key == "model.plan_grad") {
            if (val == "through") cfg.detach_plans = false;
            else if (val == "detached") cfg.detach_plans = true;
            else throw std::invalid_argument("config: model.plan_grad must be through|detached");
        }
        else if (key == "model.joint_plan") cfg.joint_plan = to_bool(key, val);
        else if (key == "seed") cfg.seed = to_u64(key, val);
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    cfg.world.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "loss.ce=" << fmt_double(cfg.loss.w_ce) << "\n";
    out << "loss.dice=" << fmt_double(cfg.loss.w_dice) << "\n";
    out << "loss.focal=" << fmt_double(cfg.loss.w_focal) << "\n";
    out << "loss.gamma=" << fmt_double(cfg.loss.gamma) << "\n";
    out << "model.blend_lambda=" << fmt_double(cfg.blend_lambda) << "\n";
    out << "model.joint_plan=" << (cfg.joint_plan ? 1 : 0) << "\n";
    out << "model.layer_start=" << cfg.layer_start << "\n";
    out << "model.matcher=" << align::to_string(cfg.matcher) << "\n";
    out << "model.plan_grad=" << (cfg.detach_plans ? "detached" : "through") << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "sinkhorn.epsilon=" << fmt_double(cfg.sinkhorn.epsilon) << "\n";
    out << "sinkhorn.max_iter=" << cfg.sinkhorn.max_iter << "\n";
    out << "sinkhorn.tol=" << fmt_double(cfg.sinkhorn.tol) << "\n";
    out << "train.eval_interval=" << cfg.eval_interval << "\n";
    out << "train.eval_scenes=" << cfg.eval_scenes << "\n";
    out << "train.lr=" << fmt_double(cfg.schedule.lr) << "\n";
    out << "train.scenes=" << cfg.train_scenes << "\n";
    out << "train.snapshot=" << (cfg.frozen_snapshot ? "frozen" : "live") << "\n";
    out << "train.total_iters=" << cfg.schedule.total_iters << "\n";
    out << "train.weight_decay=" << fmt_double(cfg.schedule.weight_decay) << "\n";
    out << "world.attributes=" << cfg.world.num_attributes << "\n";
    out << "world.classes=" << cfg.world.num_classes << "\n";
    out << "world.context_len=" << cfg.world.context_len << "\n";
    out << "world.ctx_dim=" << cfg.world.ctx_dim << "\n";
    out << "world.embed_dim=" << cfg.world.embed_dim << "\n";
    out << "world.height=" << cfg.world.height << "\n";
    out << "world.layers=" << cfg.world.num_layers << "\n";
    out << "world.noise=" << fmt_double(cfg.world.noise) << "\n";
    out << "world.prompts=" << cfg.world.num_prompts << "\n";
    out << "world.unseen=" << cfg.world.num_unseen << "\n";
    out << "world.width=" << cfg.world.width << "\n";
    return out.str();
}

align::ForwardOptions forward_options(const ExperimentConfig& cfg) {
    align::ForwardOptions opt;
    opt.sinkhorn = cfg.sinkhorn;
    opt.matcher = cfg.matcher;
    opt.layer_start = cfg.layer_start;
    opt.detach_plans = cfg.detach_plans;
    opt.joint_plan = cfg.joint_plan;
    opt.blend_lambda = cfg.blend_lambda;
    return opt;
}

}  // namespace mpot
