#pragma once

#include <string>

#include "mpot/align.hpp"
#include "mpot/ot.hpp"
#include "mpot/train.hpp"
#include "mpot/world.hpp"

namespace mpot {

// Full experiment description. Serialized as a flat UTF-8 key=value file
// with dotted section keys; unknown keys are hard errors.
struct ExperimentConfig {
    world::WorldConfig world;
    ot::SinkhornConfig sinkhorn;
    train::Schedule schedule;
    train::LossWeights loss;

    align::Matcher matcher = align::Matcher::sinkhorn;
    int layer_start = 4;
    bool detach_plans = false;
    bool joint_plan = false;
    bool frozen_snapshot = false;  // phase-2 label generator policy
    double blend_lambda = 0.2;

    int train_scenes = 16;
    int eval_scenes = 8;
    int eval_interval = 25;
    uint64_t seed = 1;

    void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);

align::ForwardOptions forward_options(const ExperimentConfig& cfg);

}  // namespace mpot
