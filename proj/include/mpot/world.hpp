#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpot/matrix.hpp"
#include "mpot/tape.hpp"

namespace mpot::world {

struct WorldConfig {
    int num_classes = 8;     // K
    int num_prompts = 4;     // N
    int embed_dim = 32;      // D
    int ctx_dim = 16;        // context-token dimension
    int num_layers = 6;      // L
    int height = 32;         // H (W = width)
    int width = 32;
    int num_attributes = 3;  // attribute directions per class
    int context_len = 8;     // tokens per prompt
    double noise = 0.1;
    int num_unseen = 2;
    uint64_t seed = 1;

    int grid_height() const { return height / 4; }
    int grid_width() const { return width / 4; }
    void validate() const;
};

struct ClassPartition {
    std::vector<int> seen;
    std::vector<int> unseen;
    int num_classes = 0;

    bool is_seen(int c) const;
};

// Random disjoint exhaustive split with |unseen| = cfg.num_unseen.
ClassPartition split_classes(const WorldConfig& cfg, uint64_t seed);

struct SceneBatch {
    std::vector<int> labels;              // H*W class ids
    std::vector<Matrix> layer_embeddings;  // L matrices, (GH*GW) x D, unit rows
    Matrix global_embedding;               // 1 x D, unit norm
    int height = 0, width = 0, grid_h = 0, grid_w = 0;
    uint64_t seed = 0;
};

// Frozen generative state shared by every scene and by the text encoder
// stub. Deterministic in cfg; never updated by training.
struct World {
    WorldConfig cfg;
    Matrix class_tokens;             // K x ctx_dim
    Matrix prompt_pool;              // (K*N) x (N*context_len), fixed mean-pool map
    Matrix token_bias;               // (K*N) x ctx_dim, class token / (len+1)
    Matrix text_map;                 // ctx_dim x D, frozen random projection
    Matrix text_bias;                // 1 x D
    std::vector<Matrix> attributes;  // K matrices, A x D orthonormal rows
    std::vector<Matrix> layer_drift; // L nuisance directions, 1 x D
};

World make_world(const WorldConfig& cfg);

SceneBatch generate_scene(const World& w, uint64_t seed);

// Random initial learnable prompt contexts, (N*context_len) x ctx_dim.
Matrix init_prompt_contexts(const WorldConfig& cfg, uint64_t seed);

// Frozen text encoder: mean-pools each prompt's context tokens with the
// class token, applies the fixed projection, then tanh. Output rows are
// class-major, prompt-minor: row k*N + j is (class k, prompt j).
ad::Var text_encoder(ad::Tape& t, ad::Var contexts, const World& w);
Matrix text_encoder_stub(const Matrix& contexts, const World& w);

// FNV-1a over the frozen state; used to assert encoder integrity.
uint64_t world_checksum(const World& w);

// Flat binary scene archive (documented in README).
void save_scene(const SceneBatch& scene, const std::string& path);
SceneBatch load_scene(const std::string& path);

}  // namespace mpot::world
