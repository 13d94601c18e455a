#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "metaconv/meta.hpp"
#include "metaconv/synth.hpp"

using namespace metaconv;
using Catch::Approx;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.vocab_size = 9;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.d_ff = 6;
    cfg.max_len = 8;
    return cfg;
}

// 6 speakers, prefix train block of 4, ring graph.
DatasetBundle tiny_bundle(int samples_per_speaker, int vocab = 9) {
    DatasetBundle b;
    b.vocab_size = vocab;
    b.k_shot = 2;
    b.max_len = 8;
    int n = 6;
    Rng rng(40);
    b.samples_by_speaker.resize(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s)
        for (int i = 0; i < samples_per_speaker; ++i) {
            ConversationSample cs;
            cs.speaker = s;
            cs.query.tokens = {3, static_cast<int>(3 + rng.uniform_index(3))};
            cs.response.tokens = {static_cast<int>(3 + (s % 3)),
                                  static_cast<int>(3 + rng.uniform_index(5))};
            b.samples_by_speaker[static_cast<std::size_t>(s)].push_back(cs);
        }
    b.full_graph = SocialGraph::from_edges(n, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 5}});
    b.train_ids = {0, 1, 2, 3};
    b.valid_ids = {4};
    b.test_ids = {5};
    b.validate();
    b.train_graph = b.full_graph.induced_prefix(4);
    b.rebuild_views();
    b.compute_content_hash();
    return b;
}

// Small tanh MLP regression model as a FlatTask factory: layers 1-H-H-1,
// least squares on (x, y) pairs. Used for the sine harness and the
// second-order checks.
struct MlpShape {
    int hidden;
    int params() const { return hidden + hidden + hidden * hidden + hidden + hidden + 1; }
};

double mlp_forward(const MlpShape& shape, const Vec& w, double x, Vec* acts = nullptr) {
    int hd = shape.hidden;
    int at = 0;
    auto seg = [&](int n) {
        auto s = w.segment(at, n);
        at += n;
        return s;
    };
    Vec w1 = seg(hd), b1 = seg(hd);
    Vec w2 = seg(hd * hd), b2 = seg(hd);
    Vec w3 = seg(hd);
    double b3 = w[at];
    Vec a1 = (w1 * x + b1).array().tanh();
    Vec z2 = Eigen::Map<const Mat>(w2.data(), hd, hd).transpose() * a1 + b2;
    Vec a2 = z2.array().tanh();
    if (acts) {
        acts->resize(2 * hd);
        acts->head(hd) = a1;
        acts->tail(hd) = a2;
    }
    return w3.dot(a2) + b3;
}

FlatTask mlp_task(const MlpShape& shape, std::vector<std::pair<double, double>> data) {
    FlatTask task;
    task.loss = [shape, data](const Vec& w) {
        double acc = 0;
        for (auto [x, y] : data) {
            double d = mlp_forward(shape, w, x) - y;
            acc += d * d;
        }
        return acc / static_cast<double>(data.size());
    };
    task.grad = [shape, data](const Vec& w) {
        // backward pass, mean squared error over the pairs
        int hd = shape.hidden;
        Vec g = Vec::Zero(w.size());
        for (auto [x, y] : data) {
            Vec acts;
            double out = mlp_forward(shape, w, x, &acts);
            double dout = 2.0 * (out - y) / static_cast<double>(data.size());
            Vec a1 = acts.head(hd), a2 = acts.tail(hd);
            Eigen::Map<const Mat> w2(w.data() + 2 * hd, hd, hd);
            Vec w3 = w.segment(2 * hd + hd * hd + hd, hd);
            Vec da2 = dout * w3;
            Vec dz2 = da2.array() * (1.0 - a2.array().square());
            Vec da1 = w2 * dz2;  // z2 = w2^T a1 + b2
            Vec dz1 = da1.array() * (1.0 - a1.array().square());
            g.segment(0, hd) += dz1 * x;                         // w1
            g.segment(hd, hd) += dz1;                            // b1
            Eigen::Map<Mat>(g.data() + 2 * hd, hd, hd) += a1 * dz2.transpose();  // w2
            g.segment(2 * hd + hd * hd, hd) += dz2;              // b2
            g.segment(2 * hd + hd * hd + hd, hd) += dout * a2;   // w3
            g[2 * hd + hd * hd + 2 * hd] += dout;                // b3
        }
        return g;
    };
    return task;
}

}  // namespace

TEST_CASE("mlp task gradient is consistent with finite differences") {
    MlpShape shape{4};
    Rng rng(9);
    Vec w(shape.params());
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = 0.5 * rng.normal();
    auto task = mlp_task(shape, {{0.3, 1.0}, {-0.8, 0.2}, {1.5, -0.4}});
    Vec g = task.grad(w);
    const double step = 1e-6;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        Vec wp = w, wm = w;
        wp[i] += step;
        wm[i] -= step;
        double fd = (task.loss(wp) - task.loss(wm)) / (2 * step);
        REQUIRE(std::abs(g[i] - fd) / (1.0 + std::abs(g[i])) < 1e-5);
    }
}

TEST_CASE("inner sgd on the scalar quadratic (w*x - y)^2") {
    // w=0, x=1, y=1, lr=0.5: gradient is 2(w-1) = -2, so one step lands on 1
    FlatTask quad;
    quad.loss = [](const Vec& w) { return (w[0] - 1.0) * (w[0] - 1.0); };
    quad.grad = [](const Vec& w) { return Vec::Constant(1, 2.0 * (w[0] - 1.0)); };
    Vec start = Vec::Zero(1);
    auto path = inner_sgd(quad, start, 1, 0.5);
    CHECK(path.adapted()[0] == Approx(1.0));
    CHECK(quad.loss(path.points.front()) == Approx(1.0));
    CHECK(quad.loss(path.adapted()) == Approx(0.0).margin(1e-15));

    auto no_steps = inner_sgd(quad, start, 0, 0.5);
    CHECK(no_steps.adapted()[0] == 0.0);
}

TEST_CASE("second-order outer gradient matches finite differences of the composite") {
    MlpShape shape{4};  // 33 parameters
    REQUIRE(shape.params() <= 100);
    Rng rng(11);
    Vec w(shape.params());
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = 0.4 * rng.normal();
    auto support = mlp_task(shape, {{0.1, 0.8}, {-0.5, -0.3}, {0.9, 0.6}, {1.4, -0.2}});
    auto query = mlp_task(shape, {{0.4, 0.1}, {-1.1, 0.5}, {0.7, -0.6}});
    const double lr = 0.05;
    const int steps = 2;

    auto path = inner_sgd(support, w, steps, lr);
    Vec qgrad = query.grad(path.adapted());
    Vec so = maml_outer_grad(support, path, qgrad, lr, false);
    Vec fo = maml_outer_grad(support, path, qgrad, lr, true);

    auto composite = [&](const Vec& start) {
        return query.loss(inner_sgd(support, start, steps, lr).adapted());
    };
    const double step = 1e-5;
    double max_rel_so = 0, max_rel_fo = 0;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        Vec wp = w, wm = w;
        wp[i] += step;
        wm[i] -= step;
        double fd = (composite(wp) - composite(wm)) / (2 * step);
        max_rel_so = std::max(max_rel_so, std::abs(so[i] - fd) / (1.0 + std::abs(fd)));
        max_rel_fo = std::max(max_rel_fo, std::abs(fo[i] - fd) / (1.0 + std::abs(fd)));
    }
    CHECK(max_rel_so < 1e-3);
    CHECK(max_rel_fo > 1e-3);  // first order genuinely differs on this problem
}

TEST_CASE("second-order chain through the conversation model matches finite differences") {
    ModelConfig cfg = tiny_model();
    Rng rng(3);
    auto phi = ModelParameters::init(cfg, rng);
    auto b = tiny_bundle(4);
    Rng ep_rng(1);
    auto ep = build_episode(b.train, 1, 2, ep_rng);

    MetaConfig mc;
    mc.alpha = 0.05;
    mc.inner_steps = 1;
    mc.k_shot = 2;
    mc.first_order = false;

    std::vector<Vec> flat_path;
    auto phi_s = inner_adapt(phi, nullptr, ep.support, mc, &flat_path);
    auto qgrads = ModelParameters::zeros(cfg);
    cm_loss_and_grad(phi_s, nullptr, ep.query, &qgrads, nullptr);
    FlatTask support = make_cm_flat_task(cfg, nullptr, ep.support);
    InnerSgdPath path;
    path.points = std::move(flat_path);
    Vec so = maml_outer_grad(support, path, flatten(qgrads), mc.alpha, false);

    auto composite = [&](const Vec& flat) {
        auto start = ModelParameters::zeros(cfg);
        unflatten(start, flat);
        auto adapted = inner_adapt(start, nullptr, ep.support, mc);
        return cm_loss(adapted, nullptr, ep.query);
    };
    Vec w = flatten(phi);
    Rng pick(5);
    const double step = 1e-5;
    for (int probe = 0; probe < 50; ++probe) {
        Eigen::Index i =
            static_cast<Eigen::Index>(pick.uniform_index(static_cast<std::size_t>(w.size())));
        Vec wp = w, wm = w;
        wp[i] += step;
        wm[i] -= step;
        double fd = (composite(wp) - composite(wm)) / (2 * step);
        REQUIRE(std::abs(so[i] - fd) / (1.0 + std::abs(fd)) < 1e-3);
    }
}

TEST_CASE("inner_adapt: alpha=0 keeps parameters bit-identical; aggregator never touched") {
    ModelConfig cfg = tiny_model();
    Rng rng(7);
    auto phi = ModelParameters::init(cfg, rng);
    auto b = tiny_bundle(4);
    Rng ep_rng(3);
    auto ep = build_episode(b.train, 0, 2, ep_rng);

    MetaConfig mc;
    mc.alpha = 0.0;
    mc.inner_steps = 3;
    mc.k_shot = 2;
    auto adapted = inner_adapt(phi, nullptr, ep.support, mc);
    CHECK(checksum(adapted) == checksum(phi));

    mc.alpha = 0.05;
    auto adapted2 = inner_adapt(phi, nullptr, ep.support, mc);
    CHECK(checksum(adapted2) != checksum(phi));
    CHECK(checksum(phi) == checksum(phi));  // phi itself untouched by value copy
}

TEST_CASE("paml mode reduces to a hand-rolled first-order MAML loop, bit for bit") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(4);

    MetaConfig mc;
    mc.mode = MetaMode::paml;
    mc.lambda_ns = 0.0;
    mc.alpha = 0.05;
    mc.beta = 1e-3;
    mc.inner_steps = 2;
    mc.k_shot = 2;
    mc.meta_batch_size = 1;

    const uint64_t seed = 99;
    TrainState st = init_train_state(cfg, 4, seed);
    ModelParameters mirror = st.phi;  // same init

    // independent Adam bookkeeping for the mirror
    Vec madam_m, madam_v;
    long madam_t = 0;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    for (long step = 0; step < 3; ++step) {
        auto metrics = outer_step(st, b.train, mc);
        REQUIRE(metrics.speaker_losses.size() == 1);

        // mirror: replay the same draws through the public seed derivations
        Rng brng(batch_seed(seed, step));
        auto batch = speaker_batch(b.train, 1, brng);
        int s = batch[0];
        Rng erng(episode_seed(seed, step, s));
        auto ep = build_episode(b.train, s, 2, erng);

        ModelParameters phi_s = mirror;
        for (int t = 0; t < mc.inner_steps; ++t) {
            auto grads = ModelParameters::zeros(cfg);
            cm_loss_and_grad(phi_s, nullptr, ep.support, &grads, nullptr);
            add_scaled(phi_s, grads, -mc.alpha);
        }
        auto qgrads = ModelParameters::zeros(cfg);
        double qloss = cm_loss_and_grad(phi_s, nullptr, ep.query, &qgrads, nullptr);
        CHECK(qloss == metrics.speaker_losses[0].second);

        Vec w = flatten(mirror), g = flatten(qgrads);
        if (madam_t == 0) {
            madam_m = Vec::Zero(w.size());
            madam_v = Vec::Zero(w.size());
        }
        ++madam_t;
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            madam_m[i] = beta1 * madam_m[i] + (1.0 - beta1) * g[i];
            madam_v[i] = beta2 * madam_v[i] + (1.0 - beta2) * g[i] * g[i];
            double bc1 = 1.0 - std::pow(beta1, static_cast<double>(madam_t));
            double bc2 = 1.0 - std::pow(beta2, static_cast<double>(madam_t));
            w[i] -= mc.beta * (madam_m[i] / bc1) / (std::sqrt(madam_v[i] / bc2) + eps);
        }
        unflatten(mirror, w);
        REQUIRE(checksum(mirror) == checksum(st.phi));
    }
}

TEST_CASE("ta-as-base with alpha=0 coincides with the full mode exactly") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(4);
    MetaConfig base;
    base.alpha = 0.0;
    base.beta = 1e-3;
    base.inner_steps = 2;
    base.fit_steps = 0;  // alpha=0 makes fitting a no-op anyway
    base.k_shot = 2;
    base.meta_batch_size = 2;
    base.k_ns = 2;

    MetaConfig full_cfg = base;
    full_cfg.mode = MetaMode::full;
    MetaConfig tab_cfg = base;
    tab_cfg.mode = MetaMode::ta_as_base;

    TrainState a = init_train_state(cfg, 4, 5);
    TrainState c = init_train_state(cfg, 4, 5);
    for (int i = 0; i < 2; ++i) {
        outer_step(a, b.train, full_cfg);
        outer_step(c, b.train, tab_cfg);
    }
    CHECK(checksum(a.phi) == checksum(c.phi));
    CHECK(a.agg.checksum() == c.agg.checksum());
    CHECK(a.table.checksum() == c.table.checksum());
}

TEST_CASE("ta-as-base inner loop really moves the aggregator copy") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(4);
    MetaConfig mc;
    mc.mode = MetaMode::ta_as_base;
    mc.alpha = 0.05;
    mc.inner_steps = 2;
    mc.fit_steps = 1;
    mc.k_shot = 2;
    mc.meta_batch_size = 2;
    TrainState st = init_train_state(cfg, 4, 17);
    uint64_t agg_before = st.agg.checksum();
    outer_step(st, b.train, mc);
    // the outer Adam update moved the base aggregator as well; the real
    // contract is that training ran without freezing the TA inside
    CHECK(st.agg.checksum() != agg_before);
}

TEST_CASE("large lambda pushes neighbor dot products up") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(4);
    MetaConfig mc;
    mc.mode = MetaMode::full;
    mc.lambda_ns = 1e6;
    mc.alpha = 0.01;
    mc.beta = 0.01;
    mc.inner_steps = 1;
    mc.fit_steps = 1;
    mc.k_shot = 2;
    mc.meta_batch_size = 1;
    mc.k_ns = 2;

    const uint64_t seed = 31;
    TrainState st = init_train_state(cfg, 4, seed);

    // compute h for the speaker the first step will draw, before the update
    Rng brng(batch_seed(seed, 0));
    int s = speaker_batch(b.train, 1, brng)[0];
    Rng erng(episode_seed(seed, 0, s));
    auto ep = build_episode(b.train, s, 2, erng);
    Vec v_fit = fit_task_embedding(st.phi, st.table.row(s), ep.support, mc.fit_steps, mc.alpha);
    std::unordered_map<int, Vec> overlay{{s, v_fit}};
    Vec h = aggregate(st.agg, TableView(st.table).with_overlay(overlay), *b.train.graph, s, true);

    double before = 0;
    for (int i : b.train.graph->neighbors(s)) before += st.table.row(i).dot(h);
    outer_step(st, b.train, mc);
    double after = 0;
    for (int i : b.train.graph->neighbors(s)) after += st.table.row(i).dot(h);
    CHECK(after > before);
}

TEST_CASE("no-ns mode: rows outside the batch neighborhoods take no update") {
    ModelConfig cfg = tiny_model();
    // two far-apart components: 0-1 and 2-3
    DatasetBundle b = tiny_bundle(4);
    b.full_graph = SocialGraph::from_edges(6, {{0, 1}, {2, 3}, {4, 5}});
    b.train_graph = b.full_graph.induced_prefix(4);
    b.rebuild_views();

    MetaConfig mc;
    mc.mode = MetaMode::no_ns;
    mc.alpha = 0.02;
    mc.beta = 1e-2;
    mc.inner_steps = 1;
    mc.fit_steps = 1;
    mc.k_shot = 2;
    mc.meta_batch_size = 1;

    TrainState st = init_train_state(cfg, 4, 7);
    Mat rows_before = st.table.rows;
    Rng brng(batch_seed(st.run_seed, 0));
    int s = speaker_batch(b.train, 1, brng)[0];
    outer_step(st, b.train, mc);

    std::set<int> allowed{s};
    for (int u : b.train_graph.neighbors(s)) allowed.insert(u);
    for (int u : b.train_graph.two_hop_frontier(s)) allowed.insert(u);
    for (int r = 0; r < 4; ++r) {
        bool moved = (st.table.rows.row(r) - rows_before.row(r)).norm() > 0;
        if (allowed.count(r))
            CHECK(moved);
        else
            CHECK(!moved);
    }
}

TEST_CASE("outer steps are deterministic under config and seed") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(4);
    MetaConfig mc;
    mc.k_shot = 2;
    mc.meta_batch_size = 2;
    mc.inner_steps = 1;
    mc.fit_steps = 2;
    mc.k_ns = 2;

    TrainState a = init_train_state(cfg, 4, 123);
    TrainState c = init_train_state(cfg, 4, 123);
    for (int i = 0; i < 3; ++i) {
        outer_step(a, b.train, mc);
        outer_step(c, b.train, mc);
    }
    CHECK(checksum(a.phi) == checksum(c.phi));
    CHECK(a.agg.checksum() == c.agg.checksum());
    CHECK(a.table.checksum() == c.table.checksum());

    TrainState d = init_train_state(cfg, 4, 124);
    outer_step(d, b.train, mc);
    TrainState e = init_train_state(cfg, 4, 123);
    outer_step(e, b.train, mc);
    CHECK(checksum(d.phi) != checksum(e.phi));
}

TEST_CASE("episode errors carry the speaker id") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(3);  // 3 samples cannot cover 2k=4
    MetaConfig mc;
    mc.k_shot = 2;
    mc.meta_batch_size = 1;
    TrainState st = init_train_state(cfg, 4, 1);
    try {
        outer_step(st, b.train, mc);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("speaker") != std::string::npos);
    }
}

TEST_CASE("no-self-emb mode skips isolated speakers rather than dying") {
    ModelConfig cfg = tiny_model();
    DatasetBundle b = tiny_bundle(4);
    b.full_graph = SocialGraph::from_edges(6, {{0, 1}, {4, 5}});  // speakers 2,3 isolated
    b.train_graph = b.full_graph.induced_prefix(4);
    b.rebuild_views();

    MetaConfig mc;
    mc.mode = MetaMode::no_self_emb;
    mc.k_shot = 2;
    mc.meta_batch_size = 4;
    mc.inner_steps = 1;
    mc.fit_steps = 1;
    mc.k_ns = 2;
    TrainState st = init_train_state(cfg, 4, 3);
    auto metrics = outer_step(st, b.train, mc);
    CHECK(metrics.skipped_speakers.size() == 2);
    CHECK(metrics.speaker_losses.size() == 2);
}

TEST_CASE("test_adapt_generate: global state purity and K usage") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(6);
    MetaConfig mc;
    mc.k_shot = 2;
    mc.inner_steps = 1;
    mc.fit_steps = 2;
    mc.max_decode_len = 5;
    TrainState st = init_train_state(cfg, 4, 55);

    auto table = expand_table(st.table, 6);
    uint64_t phi_sum = checksum(st.phi);
    uint64_t agg_sum = st.agg.checksum();
    uint64_t table_sum = table.checksum();

    Rng erng(2);
    auto ep = build_episode(b.test, 5, 2, erng);
    auto res = test_adapt_generate(st.phi, st.agg, table, b.full_graph, ep, mc, 77);

    CHECK(checksum(st.phi) == phi_sum);
    CHECK(st.agg.checksum() == agg_sum);
    CHECK(table.checksum() == table_sum);
    CHECK(res.support_size == 2);
    CHECK(res.generations.size() == ep.query.size());
    CHECK(res.h.size() == cfg.d_model);
    CHECK(res.fitted_row.size() == cfg.d_model);
}

TEST_CASE("test_adapt_generate: no adaptation and no TA reproduces the base decode") {
    ModelConfig cfg = tiny_model();
    auto b = tiny_bundle(6);
    MetaConfig mc;
    mc.mode = MetaMode::paml;
    mc.inner_steps = 0;
    mc.k_shot = 2;
    mc.decode_top_k = 3;
    mc.max_decode_len = 5;
    TrainState st = init_train_state(cfg, 4, 21);
    auto table = expand_table(st.table, 6);
    Rng erng(4);
    auto ep = build_episode(b.test, 5, 2, erng);
    const uint64_t seed = 909;
    auto res = test_adapt_generate(st.phi, st.agg, table, b.full_graph, ep, mc, seed);
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
        Rng dec(derive_seed(seed, {31, static_cast<uint64_t>(i)}));
        auto direct = decode_topk(st.phi, nullptr, ep.query[i].query, 3, 5, dec);
        CHECK(res.generations[i] == direct);
    }
    CHECK(res.pre_adapt_query_loss == res.post_adapt_query_loss);
}

TEST_CASE("sine regression: first-order meta-training adapts held-out tasks") {
    MlpShape shape{24};
    Rng init_rng(100);
    Vec w(shape.params());
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = 0.5 * init_rng.normal();

    auto sample_task = [&](Rng& rng, int k) {
        double amp = 0.5 + 2.5 * rng.uniform_real();
        double phase = 3.14159265358979 * rng.uniform_real();
        std::vector<std::pair<double, double>> sup, qry;
        for (int i = 0; i < k; ++i)
            sup.emplace_back(-5 + 10 * rng.uniform_real(), 0.0);
        for (int i = 0; i < k; ++i)
            qry.emplace_back(-5 + 10 * rng.uniform_real(), 0.0);
        for (auto& [x, y] : sup) y = amp * std::sin(x + phase);
        for (auto& [x, y] : qry) y = amp * std::sin(x + phase);
        return std::make_pair(sup, qry);
    };

    const double alpha = 0.01;
    AdamState adam;
    Rng task_rng(200);
    for (int step = 0; step < 600; ++step) {
        Vec outer = Vec::Zero(w.size());
        for (int b = 0; b < 4; ++b) {
            auto [sup, qry] = sample_task(task_rng, 10);
            auto s_task = mlp_task(shape, sup);
            auto q_task = mlp_task(shape, qry);
            auto path = inner_sgd(s_task, w, 2, alpha);
            outer += maml_outer_grad(s_task, path, q_task.grad(path.adapted()), alpha, true);
        }
        adam_update(w, outer, adam, 2e-3);
    }

    Rng heldout_rng(300);
    int improved = 0;
    const int trials = 40;
    for (int i = 0; i < trials; ++i) {
        auto [sup, qry] = sample_task(heldout_rng, 10);
        auto s_task = mlp_task(shape, sup);
        auto q_task = mlp_task(shape, qry);
        double pre = q_task.loss(w);
        auto path = inner_sgd(s_task, w, 2, alpha);
        double post = q_task.loss(path.adapted());
        if (post < pre) ++improved;
    }
    CHECK(improved >= trials * 8 / 10);
}

TEST_CASE("training on a small synthetic corpus reduces meta query loss") {
    SynthConfig sc;
    sc.train_speakers = 24;
    sc.valid_speakers = 2;
    sc.test_speakers = 4;
    sc.samples_per_train_speaker = 8;
    sc.samples_per_eval_speaker = 8;
    sc.vocab_size = 80;
    sc.n_topics = 4;
    sc.topic_words_per_topic = 4;
    sc.answer_words_per_topic = 1;
    sc.k_shot = 3;
    sc.max_len = 16;
    sc.avg_degree = 4;
    auto b = generate_synthetic(sc, 77);

    ModelConfig cfg;
    cfg.vocab_size = 80;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.d_ff = 32;
    cfg.max_len = 16;

    MetaConfig mc;
    mc.k_shot = 3;
    mc.meta_batch_size = 4;
    mc.inner_steps = 1;
    mc.fit_steps = 2;
    mc.beta = 2e-3;
    mc.k_ns = 3;

    TrainState st = init_train_state(cfg, sc.train_speakers, 7);
    std::vector<double> losses;
    train_loop(st, b.train, mc, 80, [&](const StepMetrics& m) {
        losses.push_back(m.mean_query_loss);
    });
    double first = 0, last = 0;
    for (int i = 0; i < 15; ++i) {
        first += losses[static_cast<std::size_t>(i)];
        last += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
    }
    CHECK(last < first);
}

TEST_CASE("meta config json round trip") {
    MetaConfig c;
    c.mode = MetaMode::no_gcn;
    c.alpha = 0.02;
    c.first_order = false;
    auto j = meta_config_to_json(c);
    auto back = meta_config_from_json(j);
    CHECK(back.mode == MetaMode::no_gcn);
    CHECK(back.alpha == Approx(0.02));
    CHECK(back.first_order == false);
    CHECK_THROWS_AS(meta_mode_from_name("bogus"), ConfigError);
}
