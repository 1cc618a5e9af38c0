#include <cmath>

#include "doctest.h"
#include "mpot/align.hpp"
#include "mpot/world.hpp"

using namespace mpot;
using namespace mpot::align;

namespace {

Matrix rand_mat(int r, int c, uint64_t seed, double sd = 1.0) {
    Rng rng(seed);
    return random_normal(r, c, rng, sd);
}

PipelineParams const_params(ad::Tape& t, const Matrix& ctx, const Matrix& gw,
                            const Matrix& gb, const Matrix& w1, const Matrix& b1,
                            const Matrix& w2, const Matrix& b2) {
    PipelineParams p;
    p.contexts = t.constant(ctx);
    p.gta_weight = t.constant(gw);
    p.gta_bias = t.constant(gb);
    p.dec_w1 = t.constant(w1);
    p.dec_b1 = t.constant(b1);
    p.dec_w2 = t.constant(w2);
    p.dec_b2 = t.constant(b2);
    return p;
}

}  // namespace

TEST_CASE("normalize_rows") {
    Matrix m(1, 2);
    m.data = {3, 4};
    const Matrix n = normalize_rows(m);
    CHECK(n(0, 0) == doctest::Approx(0.6));
    CHECK(n(0, 1) == doctest::Approx(0.8));
    CHECK(max_abs_diff(normalize_rows(n), n) < 1e-12);  // idempotent on unit rows

    const Matrix r = normalize_rows(rand_mat(5, 8, 1));
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 8; ++j) s += r(i, j) * r(i, j);
        CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS(normalize_rows(Matrix(2, 3, 0.0)));
}

TEST_CASE("global text align identity extractions") {
    const int d = 4;
    const Matrix g = rand_mat(6, d, 2);
    GtaParams q;
    q.bias = Matrix(1, d);

    // select the plain-g block
    q.weight = Matrix(2 * d, d);
    for (int j = 0; j < d; ++j) q.weight(d + j, j) = 1.0;
    CHECK(max_abs_diff(global_text_align(g, rand_mat(1, d, 3), q), g) < 1e-12);

    // select the modulated block with an all-ones global embedding
    q.weight = Matrix(2 * d, d);
    for (int j = 0; j < d; ++j) q.weight(j, j) = 1.0;
    CHECK(max_abs_diff(global_text_align(g, Matrix(1, d, 1.0), q), g) < 1e-12);

    // random case vs direct arithmetic
    q.weight = rand_mat(2 * d, d, 4);
    q.bias = rand_mat(1, d, 5);
    const Matrix fbar = rand_mat(1, d, 6);
    const Matrix out = global_text_align(g, fbar, q);
    for (int i = 0; i < g.rows; ++i) {
        for (int j = 0; j < d; ++j) {
            double s = q.bias(0, j);
            for (int x = 0; x < d; ++x) {
                s += fbar(0, x) * g(i, x) * q.weight(x, j);
                s += g(i, x) * q.weight(d + x, j);
            }
            CHECK(out(i, j) == doctest::Approx(s).epsilon(1e-12));
        }
    }
}

TEST_CASE("score matrix is the cosine table of unit rows") {
    const Matrix f = normalize_rows(rand_mat(6, 8, 7));
    Matrix g = normalize_rows(rand_mat(4, 8, 8));
    for (int j = 0; j < 8; ++j) g(0, j) = f(2, j);  // copy one pixel row

    const Matrix s = score_matrix(f, g);
    CHECK(s(2, 0) == doctest::Approx(1.0).epsilon(1e-12));
    for (double v : s.data) {
        CHECK(v <= 1.0 + 1e-9);
        CHECK(v >= -1.0 - 1e-9);
    }
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) {
            double dot = 0;
            for (int x = 0; x < 8; ++x) dot += f(i, x) * g(j, x);
            CHECK(s(i, j) == doctest::Approx(dot).epsilon(1e-12));
        }

    Matrix e1(1, 3), e2(1, 3);
    e1(0, 0) = 1.0;
    e2(0, 1) = 1.0;
    CHECK(score_matrix(e1, e2)(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("per-class plans equal direct solver calls") {
    Rng rng(9);
    const Matrix s = random_uniform(6, 8, rng, -1.0, 1.0);  // K=2, N=4
    ot::SinkhornConfig cfg;
    const auto plans = solve_layer_plans(s, 4, cfg);
    REQUIRE(plans.size() == 2);
    for (int k = 0; k < 2; ++k) {
        Matrix cost(6, 4);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 4; ++j) cost(i, j) = 1.0 - s(i, k * 4 + j);
        const auto direct = ot::sinkhorn_plan(cost, ot::uniform_marginals(6, 4), cfg);
        CHECK(max_abs_diff(plans[k].values, direct.values) == 0.0);
    }

    // constant block -> uniform plan; identical blocks -> identical plans
    const auto up = solve_layer_plans(Matrix(4, 4, 0.3), 4, cfg);
    for (double v : up[0].values.data) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-9));
    Matrix twin(6, 8);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) twin(i, j) = twin(i, 4 + j) = s(i, j);
    const auto tp = solve_layer_plans(twin, 4, cfg);
    CHECK(max_abs_diff(tp[0].values, tp[1].values) == 0.0);
}

TEST_CASE("refine_scores is the entrywise product with concatenated plans") {
    Rng rng(10);
    const Matrix s = random_uniform(5, 6, rng, -1.0, 1.0);
    std::vector<ot::TransportPlan> plans(2);
    plans[0].values = random_uniform(5, 3, rng, 0.01, 1.0);
    plans[1].values = random_uniform(5, 3, rng, 0.01, 1.0);
    const Matrix r = refine_scores(s, plans);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) {
            const double p = (j < 3) ? plans[0].values(i, j) : plans[1].values(i, j - 3);
            CHECK(r(i, j) == doctest::Approx(s(i, j) * p).epsilon(1e-12));
            // positive plans preserve sign; zero score stays zero
            if (s(i, j) != 0.0) CHECK(std::signbit(r(i, j)) == std::signbit(s(i, j)));
        }

    std::vector<ot::TransportPlan> uni(1);
    uni[0].values = Matrix(5, 6, 0.25);
    const Matrix scaled = refine_scores(s, uni);
    for (size_t e = 0; e < s.data.size(); ++e)
        CHECK(scaled.data[e] == doctest::Approx(0.25 * s.data[e]).epsilon(1e-12));

    Matrix zs = s;
    zs(2, 4) = 0.0;
    CHECK(refine_scores(zs, uni)(2, 4) == 0.0);
}

TEST_CASE("fuse_layers formula") {
    Rng rng(11);
    // single layer: the (x+1)/2 transform of the last (only) layer
    const Matrix one = random_uniform(3, 4, rng, -0.9, 0.9);
    const Matrix f1 = fuse_layers({one});
    for (size_t e = 0; e < one.data.size(); ++e)
        CHECK(f1.data[e] == doctest::Approx((one.data[e] + 1.0) / 2.0).epsilon(1e-12));

    // zero intermediates contribute sigmoid(0)^{1/d} = 0.5^{1/3}
    const Matrix z(2, 2, 0.0);
    const Matrix f3 = fuse_layers({z, z, Matrix(2, 2, 0.2)});
    for (double v : f3.data)
        CHECK(v == doctest::Approx(std::pow(0.5, 2.0 / 3) * std::pow(0.6, 1.0 / 3)));

    // random stack vs direct evaluation
    std::vector<Matrix> stack = {random_uniform(3, 4, rng, -2.0, 2.0),
                                 random_uniform(3, 4, rng, -2.0, 2.0),
                                 random_uniform(3, 4, rng, -0.9, 0.9)};
    const Matrix fused = fuse_layers(stack);
    for (size_t e = 0; e < fused.data.size(); ++e) {
        const double a = 1.0 / (1.0 + std::exp(-stack[0].data[e]));
        const double b = 1.0 / (1.0 + std::exp(-stack[1].data[e]));
        const double c = (stack[2].data[e] + 1.0) / 2.0;
        CHECK(fused.data[e] ==
              doctest::Approx(std::pow(a * b * c, 1.0 / 3)).epsilon(1e-12));
        CHECK(fused.data[e] > 0.0);
    }
    CHECK_THROWS(fuse_layers({}));
}

TEST_CASE("fusion is monotone in any intermediate score entry") {
    Rng rng(12);
    std::vector<Matrix> stack = {random_uniform(2, 3, rng, -1.0, 1.0),
                                 random_uniform(2, 3, rng, -1.0, 1.0)};
    const Matrix base = fuse_layers(stack);
    stack[0](1, 2) += 0.4;
    const Matrix bumped = fuse_layers(stack);
    CHECK(bumped(1, 2) >= base(1, 2));
    for (size_t e = 0; e < base.data.size(); ++e)
        if (e != 5) CHECK(bumped.data[e] == doctest::Approx(base.data[e]));
}

TEST_CASE("collapse_prompts") {
    Rng rng(13);
    const Matrix s = random_uniform(4, 6, rng, -1.0, 1.0);
    CHECK(max_abs_diff(collapse_prompts(s, 1), s) == 0.0);
    const Matrix ones = collapse_prompts(Matrix(3, 8, 1.0), 4);
    for (double v : ones.data) CHECK(v == doctest::Approx(4.0));
    const Matrix c = collapse_prompts(s, 3);
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 2; ++k)
            CHECK(c(i, k) ==
                  doctest::Approx(s(i, 3 * k) + s(i, 3 * k + 1) + s(i, 3 * k + 2)));
    CHECK_THROWS(collapse_prompts(s, 4));
}

TEST_CASE("argmax class is invariant to a common positive column scale") {
    Rng rng(14);
    const Matrix s = random_uniform(8, 6, rng, -1.0, 1.0);
    const Matrix c1 = collapse_prompts(s, 3);
    Matrix scaled = s;
    for (double& v : scaled.data) v *= 3.7;
    const Matrix c2 = collapse_prompts(scaled, 3);
    for (int i = 0; i < 8; ++i) {
        int a1 = 0, a2 = 0;
        for (int k = 1; k < 2; ++k) {
            if (c1(i, k) > c1(i, a1)) a1 = k;
            if (c2(i, k) > c2(i, a2)) a2 = k;
        }
        CHECK(a1 == a2);
    }
}

TEST_CASE("blend") {
    Rng rng(15);
    const Matrix y = random_uniform(4, 3, rng, -1.0, 1.0);
    const Matrix yt = random_uniform(4, 3, rng, -1.0, 1.0);
    CHECK(max_abs_diff(blend(y, yt, 1.0), y) == 0.0);
    CHECK(max_abs_diff(blend(y, yt, 0.0), yt) == 0.0);
    const Matrix b = blend(Matrix(4, 3, 1.0), Matrix(4, 3, 0.0), 0.2);
    for (double v : b.data) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
    CHECK_THROWS(blend(y, yt, 1.5));
}

TEST_CASE("matcher=none reduces the transport path to plain score fusion") {
    world::WorldConfig wc;
    wc.height = wc.width = 8;
    wc.num_classes = 3;
    wc.num_unseen = 1;
    wc.num_layers = 3;
    wc.embed_dim = 12;
    wc.ctx_dim = 6;
    wc.seed = 5;
    const world::World w = world::make_world(wc);
    const world::SceneBatch scene = world::generate_scene(w, 17);

    const Matrix ctx = world::init_prompt_contexts(wc, 5);
    const Matrix gw = rand_mat(2 * wc.embed_dim, wc.embed_dim, 20, 0.3);
    const Matrix gb = rand_mat(1, wc.embed_dim, 21, 0.1);
    const Matrix w1 = rand_mat(wc.num_layers * wc.num_classes, 32, 22, 0.3);
    const Matrix b1 = Matrix(1, 32);
    const Matrix w2 = rand_mat(32, wc.num_classes, 23, 0.3);
    const Matrix b2 = Matrix(1, wc.num_classes);

    ForwardOptions opt;
    opt.matcher = Matcher::none;
    opt.layer_start = 2;

    ad::Tape t;
    const ForwardResult r = forward(
        t, w, scene, const_params(t, ctx, gw, gb, w1, b1, w2, b2), opt);

    // hand-chain the ablated path from the raw scores
    const Matrix text = world::text_encoder_stub(ctx, w);
    GtaParams q{gw, gb};
    const Matrix g_ga = normalize_rows(global_text_align(text, scene.global_embedding, q));
    std::vector<Matrix> refined;
    for (int li = opt.layer_start - 1; li < wc.num_layers; ++li)
        refined.push_back(score_matrix(scene.layer_embeddings[li], g_ga));
    const Matrix y_tilde = upsample_bilinear(
        collapse_prompts(fuse_layers(refined), wc.num_prompts), scene.grid_h,
        scene.grid_w, scene.height, scene.width);
    CHECK(max_abs_diff(t.value(r.y_tilde), y_tilde) < 1e-12);

    // raw scores equal the chained score matrices
    for (int li = 0; li < wc.num_layers; ++li)
        CHECK(max_abs_diff(t.value(r.raw_scores[li]),
                           score_matrix(scene.layer_embeddings[li], g_ga)) < 1e-12);

    // blend identity
    const Matrix y_star = blend(t.value(r.y_dec), t.value(r.y_tilde), opt.blend_lambda);
    CHECK(max_abs_diff(t.value(r.y_star), y_star) < 1e-12);
}

TEST_CASE("taped sinkhorn values match the plain solver at fixed iterations") {
    Rng rng(16);
    const Matrix cost = random_uniform(6, 4, rng, 0.0, 2.0);
    ot::SinkhornConfig cfg;
    cfg.max_iter = 37;
    cfg.tol = -1.0;  // plain solver: run exactly max_iter
    const Matrix plain = ot::sinkhorn_plan(cost, ot::uniform_marginals(6, 4), cfg).values;
    ad::Tape t;
    const Matrix taped = t.value(sinkhorn_plan_taped(t, t.constant(cost), cfg));
    CHECK(max_abs_diff(plain, taped) == 0.0);
}

TEST_CASE("forward is deterministic") {
    world::WorldConfig wc;
    wc.height = wc.width = 8;
    wc.num_classes = 3;
    wc.num_unseen = 1;
    wc.num_layers = 2;
    wc.embed_dim = 10;
    wc.ctx_dim = 6;
    wc.seed = 6;
    const world::World w = world::make_world(wc);
    const world::SceneBatch scene = world::generate_scene(w, 30);
    const Matrix ctx = world::init_prompt_contexts(wc, 6);
    const Matrix gw = rand_mat(2 * wc.embed_dim, wc.embed_dim, 31, 0.3);
    const Matrix gb = Matrix(1, wc.embed_dim);
    const Matrix w1 = rand_mat(wc.num_layers * wc.num_classes, 32, 32, 0.3);
    const Matrix b1 = Matrix(1, 32);
    const Matrix w2 = rand_mat(32, wc.num_classes, 33, 0.3);
    const Matrix b2 = Matrix(1, wc.num_classes);
    ForwardOptions opt;
    opt.layer_start = 1;
    opt.sinkhorn.max_iter = 25;

    ad::Tape t1, t2;
    const auto r1 = forward(t1, w, scene, const_params(t1, ctx, gw, gb, w1, b1, w2, b2), opt);
    const auto r2 = forward(t2, w, scene, const_params(t2, ctx, gw, gb, w1, b1, w2, b2), opt);
    CHECK(max_abs_diff(t1.value(r1.y_star), t2.value(r2.y_star)) == 0.0);
    CHECK(max_abs_diff(t1.value(r1.y_dec), t2.value(r2.y_dec)) == 0.0);
    CHECK(max_abs_diff(t1.value(r1.y_tilde), t2.value(r2.y_tilde)) == 0.0);
}

TEST_CASE("zero decoder weights give zero logits") {
    world::WorldConfig wc;
    wc.height = wc.width = 8;
    wc.num_classes = 2;
    wc.num_unseen = 1;
    wc.num_layers = 2;
    wc.embed_dim = 10;
    wc.ctx_dim = 6;
    wc.seed = 8;
    const world::World w = world::make_world(wc);
    const world::SceneBatch scene = world::generate_scene(w, 40);
    ad::Tape t;
    ForwardOptions opt;
    opt.matcher = Matcher::none;
    opt.layer_start = 1;
    const auto r = forward(
        t, w, scene,
        const_params(t, world::init_prompt_contexts(wc, 8),
                     Matrix(2 * wc.embed_dim, wc.embed_dim, 0.1), Matrix(1, wc.embed_dim),
                     Matrix(wc.num_layers * wc.num_classes, 32), Matrix(1, 32),
                     Matrix(32, wc.num_classes), Matrix(1, wc.num_classes)),
        opt);
    for (double v : t.value(r.y_dec).data) CHECK(v == 0.0);
}

TEST_CASE("decoder can express select-last-layer-and-upsample") {
    // With a tiny pre-tanh scale the hidden layer is linear to ~1e-12, so
    // the decoder reproduces upsample(collapse(S_L)) to within tolerance.
    world::WorldConfig wc;
    wc.height = wc.width = 8;
    wc.num_classes = 2;
    wc.num_unseen = 1;
    wc.num_layers = 2;
    wc.embed_dim = 10;
    wc.ctx_dim = 6;
    wc.seed = 9;
    const world::World w = world::make_world(wc);
    const world::SceneBatch scene = world::generate_scene(w, 50);
    const Matrix ctx = world::init_prompt_contexts(wc, 9);

    const double delta = 1e-4;
    const int in = wc.num_layers * wc.num_classes;
    Matrix w1(in, 32), w2(32, wc.num_classes);
    for (int k = 0; k < wc.num_classes; ++k) {
        w1((wc.num_layers - 1) * wc.num_classes + k, k) = delta;
        w2(k, k) = 1.0 / delta;
    }
    Matrix gw(2 * wc.embed_dim, wc.embed_dim);
    for (int j = 0; j < wc.embed_dim; ++j) gw(wc.embed_dim + j, j) = 1.0;

    ad::Tape t;
    ForwardOptions opt;
    opt.matcher = Matcher::none;
    opt.layer_start = 1;
    const auto r = forward(t, w, scene,
                           const_params(t, ctx, gw, Matrix(1, wc.embed_dim), w1,
                                        Matrix(1, 32), w2, Matrix(1, wc.num_classes)),
                           opt);

    const Matrix text = world::text_encoder_stub(ctx, w);
    const Matrix g_ga = normalize_rows(text);  // gta selects the plain block
    const Matrix expect = upsample_bilinear(
        collapse_prompts(score_matrix(scene.layer_embeddings.back(), g_ga),
                         wc.num_prompts),
        scene.grid_h, scene.grid_w, scene.height, scene.width);
    CHECK(max_abs_diff(t.value(r.y_dec), expect) < 1e-6);
}
