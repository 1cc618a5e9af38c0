#include "mpot/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mpot::world {

namespace {

constexpr double kPi = 3.14159265358979323846;

uint64_t mix_seed(uint64_t a, uint64_t b) {
    return a * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL + b;
}

void normalize_row(double* row, int n) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += row[j] * row[j];
    const double norm = std::sqrt(s);
    if (norm == 0.0) throw std::runtime_error("normalize_row: zero vector");
    for (int j = 0; j < n; ++j) row[j] /= norm;
}

}  // namespace

void WorldConfig::validate() const {
    if (num_classes < 2 || num_prompts < 1 || embed_dim < 1 || ctx_dim < 1 ||
        num_layers < 1 || num_attributes < 1 || context_len < 1)
        throw std::invalid_argument("world config: nonpositive dimension");
    if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0)
        throw std::invalid_argument("world config: height/width must be positive multiples of 4");
    if (noise < 0.0) throw std::invalid_argument("world config: negative noise");
    if (num_unseen < 1 || num_unseen >= num_classes)
        throw std::invalid_argument("world config: unseen split leaves one side empty");
}

bool ClassPartition::is_seen(int c) const {
    return std::find(seen.begin(), seen.end(), c) != seen.end();
}

ClassPartition split_classes(const WorldConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::vector<int> ids(cfg.num_classes);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(mix_seed(seed, 0x5eedu));
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    ClassPartition part;
    part.num_classes = cfg.num_classes;
    part.unseen.assign(ids.begin(), ids.begin() + cfg.num_unseen);
    part.seen.assign(ids.begin() + cfg.num_unseen, ids.end());
    std::sort(part.seen.begin(), part.seen.end());
    std::sort(part.unseen.begin(), part.unseen.end());
    return part;
}

World make_world(const WorldConfig& cfg) {
    cfg.validate();
    const int k = cfg.num_classes, n = cfg.num_prompts, d = cfg.embed_dim;
    const int dc = cfg.ctx_dim, len = cfg.context_len, a = cfg.num_attributes;

    World w;
    w.cfg = cfg;

    Rng rng(mix_seed(cfg.seed, 0x1));
    w.class_tokens = random_normal(k, dc, rng);
    // Hidden per-attribute context targets: a prompt whose tokens all equal
    // one of these reproduces that attribute's text row for every class,
    // which is what makes the unseen classes learnable at all.
    // Scaled so len * attr_context and one class token contribute equally
    // to the mean pool; otherwise every class's attribute rows collapse
    // onto the shared context direction.
    Matrix attr_contexts = random_normal(a, dc, rng, 1.0 / len);
    w.text_map = random_normal(dc, d, rng, 1.0 / std::sqrt(static_cast<double>(dc)));
    w.text_bias = random_normal(1, d, rng, 0.1);

    w.prompt_pool = Matrix(k * n, n * len);
    w.token_bias = Matrix(k * n, dc);
    for (int ci = 0; ci < k; ++ci) {
        for (int j = 0; j < n; ++j) {
            const int row = ci * n + j;
            for (int l = 0; l < len; ++l)
                w.prompt_pool(row, j * len + l) = 1.0 / (len + 1);
            for (int x = 0; x < dc; ++x)
                w.token_bias(row, x) = w.class_tokens(ci, x) / (len + 1);
        }
    }

    // Class attribute directions, run through the same frozen map as the
    // text encoder, then orthonormalized per class.
    for (int ci = 0; ci < k; ++ci) {
        Matrix dirs(a, d);
        for (int ai = 0; ai < a; ++ai) {
            for (int x = 0; x < d; ++x) {
                double pooled_proj = 0.0;
                for (int y = 0; y < dc; ++y) {
                    const double pooled =
                        (len * attr_contexts(ai, y) + w.class_tokens(ci, y)) / (len + 1);
                    pooled_proj += pooled * w.text_map(y, x);
                }
                dirs(ai, x) = std::tanh(pooled_proj + w.text_bias(0, x));
            }
        }
        // Gram-Schmidt
        for (int ai = 0; ai < a; ++ai) {
            for (int prev = 0; prev < ai; ++prev) {
                double dot = 0.0;
                for (int x = 0; x < d; ++x) dot += dirs(ai, x) * dirs(prev, x);
                for (int x = 0; x < d; ++x) dirs(ai, x) -= dot * dirs(prev, x);
            }
            normalize_row(&dirs.data[static_cast<size_t>(ai) * d], d);
        }
        w.attributes.push_back(std::move(dirs));
    }

    for (int i = 0; i < cfg.num_layers; ++i) {
        Matrix drift = random_normal(1, d, rng);
        normalize_row(drift.data.data(), d);
        w.layer_drift.push_back(std::move(drift));
    }
    return w;
}

SceneBatch generate_scene(const World& w, uint64_t seed) {
    const WorldConfig& cfg = w.cfg;
    const int gh = cfg.grid_height(), gw = cfg.grid_width();
    const int h = cfg.height, wd = cfg.width;
    const int d = cfg.embed_dim, a = cfg.num_attributes, num_l = cfg.num_layers;

    Rng rng(mix_seed(seed, cfg.seed));

    // Pick 2-5 scene classes and scatter 1-2 Voronoi sites per class over
    // the grid; grid label = class of the nearest site.
    const int max_scene_classes = std::min(5, cfg.num_classes);
    const int num_scene_classes = rng.uniform_int(2, max_scene_classes);
    std::vector<int> ids(cfg.num_classes);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng.engine());
    ids.resize(num_scene_classes);

    struct Site {
        double y, x;
        int cls;
    };
    std::vector<Site> sites;
    for (int cls : ids) {
        const int count = 1 + (rng.uniform() < 0.3 ? 1 : 0);
        for (int s = 0; s < count; ++s)
            sites.push_back({rng.uniform(0.0, gh - 1.0), rng.uniform(0.0, gw - 1.0), cls});
    }

    std::vector<int> grid_labels(static_cast<size_t>(gh) * gw);
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            double best = 1e300;
            int cls = sites[0].cls;
            for (const Site& s : sites) {
                const double dy = gy - s.y, dx = gx - s.x;
                const double dist = dy * dy + dx * dx;
                if (dist < best) {
                    best = dist;
                    cls = s.cls;
                }
            }
            grid_labels[static_cast<size_t>(gy) * gw + gx] = cls;
        }
    }

    SceneBatch scene;
    scene.height = h;
    scene.width = wd;
    scene.grid_h = gh;
    scene.grid_w = gw;
    scene.seed = seed;

    // Full-resolution labels follow the same corner-aligned geometry the
    // score upsampler uses, so boundaries land where argmax flips.
    scene.labels.resize(static_cast<size_t>(h) * wd);
    for (int y = 0; y < h; ++y) {
        const int gy = (h == 1) ? 0
                                : static_cast<int>(std::lround(static_cast<double>(y) * (gh - 1) / (h - 1)));
        for (int x = 0; x < wd; ++x) {
            const int gx = (wd == 1) ? 0
                                     : static_cast<int>(std::lround(static_cast<double>(x) * (gw - 1) / (wd - 1)));
            scene.labels[static_cast<size_t>(y) * wd + x] =
                grid_labels[static_cast<size_t>(gy) * gw + gx];
        }
    }

    // Smooth per-class attribute mixing fields, shared across layers up to
    // a per-layer phase shift.
    struct Field {
        double fy, fx, phase;
    };
    std::vector<std::vector<Field>> fields(cfg.num_classes);
    for (int cls : ids) {
        fields[cls].resize(a);
        for (int ai = 0; ai < a; ++ai)
            fields[cls][ai] = {rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5),
                               rng.uniform(0.0, 2.0 * kPi)};
    }

    for (int li = 0; li < num_l; ++li) {
        Matrix emb(gh * gw, d);
        const double drift_weight =
            (num_l > 1) ? 0.6 * (1.0 - static_cast<double>(li) / (num_l - 1)) : 0.0;
        for (int gy = 0; gy < gh; ++gy) {
            for (int gx = 0; gx < gw; ++gx) {
                const int p = gy * gw + gx;
                const int cls = grid_labels[p];
                double* row = &emb.data[static_cast<size_t>(p) * d];

                std::vector<double> weight(a, 1.0);
                if (a > 1) {
                    double total = 0.0;
                    for (int ai = 0; ai < a; ++ai) {
                        const Field& f = fields[cls][ai];
                        const double phase =
                            2.0 * kPi * (f.fx * gx / gw + f.fy * gy / gh) + f.phase + 0.4 * li;
                        weight[ai] = 0.25 + 0.75 * (0.5 + 0.5 * std::sin(phase));
                        total += weight[ai];
                    }
                    for (int ai = 0; ai < a; ++ai) weight[ai] /= total;
                }

                // Gain keeps the class signal well above the noise floor
                // (noise norm is cfg.noise * sqrt(d)).
                constexpr double kAttrGain = 2.0;
                for (int x = 0; x < d; ++x) {
                    double v = drift_weight * w.layer_drift[li](0, x);
                    for (int ai = 0; ai < a; ++ai)
                        v += kAttrGain * weight[ai] * w.attributes[cls](ai, x);
                    row[x] = v;
                }
                if (cfg.noise > 0.0)
                    for (int x = 0; x < d; ++x) row[x] += cfg.noise * rng.normal();
                normalize_row(row, d);
            }
        }
        scene.layer_embeddings.push_back(std::move(emb));
    }

    scene.global_embedding = Matrix(1, d);
    const Matrix& last = scene.layer_embeddings.back();
    for (int p = 0; p < last.rows; ++p)
        for (int x = 0; x < d; ++x) scene.global_embedding(0, x) += last(p, x) / last.rows;
    normalize_row(scene.global_embedding.data.data(), d);
    return scene;
}

Matrix init_prompt_contexts(const WorldConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed(seed, 0xC0));
    return random_normal(cfg.num_prompts * cfg.context_len, cfg.ctx_dim, rng, 0.5);
}

ad::Var text_encoder(ad::Tape& t, ad::Var contexts, const World& w) {
    const Matrix& vc = t.value(contexts);
    if (vc.rows != w.cfg.num_prompts * w.cfg.context_len || vc.cols != w.cfg.ctx_dim)
        throw std::invalid_argument("text_encoder: context shape mismatch");
    ad::Var pooled = t.add(t.matmul(t.constant(w.prompt_pool), contexts),
                           t.constant(w.token_bias));
    ad::Var proj = t.add_rowvec(t.matmul(pooled, t.constant(w.text_map)),
                                t.constant(w.text_bias));
    return t.tanh_(proj);
}

Matrix text_encoder_stub(const Matrix& contexts, const World& w) {
    ad::Tape t;
    return t.value(text_encoder(t, t.constant(contexts), w));
}

uint64_t world_checksum(const World& w) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const Matrix& m) {
        for (double v : m.data) {
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        }
    };
    feed(w.class_tokens);
    feed(w.prompt_pool);
    feed(w.token_bias);
    feed(w.text_map);
    feed(w.text_bias);
    for (const auto& m : w.attributes) feed(m);
    for (const auto& m : w.layer_drift) feed(m);
    return h;
}

namespace {

constexpr char kSceneMagic[8] = {'M', 'P', 'O', 'T', 'S', 'C', 'N', '1'};

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
void read_pod(std::ifstream& f, T& v) {
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
}

}  // namespace

void save_scene(const SceneBatch& scene, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_scene: cannot open " + path);
    f.write(kSceneMagic, sizeof(kSceneMagic));
    const int32_t dims[5] = {scene.height, scene.width, scene.grid_h, scene.grid_w,
                             static_cast<int32_t>(scene.layer_embeddings.size())};
    const int32_t d = scene.layer_embeddings.empty() ? 0 : scene.layer_embeddings[0].cols;
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    write_pod(f, d);
    write_pod(f, scene.seed);
    for (int v : scene.labels) {
        const int32_t x = v;
        write_pod(f, x);
    }
    for (const Matrix& m : scene.layer_embeddings)
        f.write(reinterpret_cast<const char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    f.write(reinterpret_cast<const char*>(scene.global_embedding.data.data()),
            static_cast<std::streamsize>(scene.global_embedding.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("save_scene: write failure on " + path);
}

SceneBatch load_scene(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_scene: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (std::memcmp(magic, kSceneMagic, sizeof(magic)) != 0)
        throw std::runtime_error("load_scene: bad magic in " + path);
    int32_t dims[5];
    f.read(reinterpret_cast<char*>(dims), sizeof(dims));
    int32_t d;
    read_pod(f, d);
    SceneBatch scene;
    scene.height = dims[0];
    scene.width = dims[1];
    scene.grid_h = dims[2];
    scene.grid_w = dims[3];
    read_pod(f, scene.seed);
    scene.labels.resize(static_cast<size_t>(scene.height) * scene.width);
    for (auto& v : scene.labels) {
        int32_t x;
        read_pod(f, x);
        v = x;
    }
    for (int li = 0; li < dims[4]; ++li) {
        Matrix m(scene.grid_h * scene.grid_w, d);
        f.read(reinterpret_cast<char*>(m.data.data()),
               static_cast<std::streamsize>(m.data.size() * sizeof(double)));
        scene.layer_embeddings.push_back(std::move(m));
    }
    scene.global_embedding = Matrix(1, d);
    f.read(reinterpret_cast<char*>(scene.global_embedding.data.data()),
           static_cast<std::streamsize>(scene.global_embedding.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("load_scene: truncated file " + path);
    return scene;
}

}  // namespace mpot::world
