#pragma once

// Meta-training: per-speaker inner-loop adaptation of the conversation
// model, outer-loop updates of the model, the aggregator and the embedding
// table (SGD inside, Adam outside), the ablation modes, and the test-time
// adapt-and-generate procedure. Episode processing reads a parameter
// snapshot and is pure; all mutation happens in the outer update.

#include <Eigen/Dense>
#include <chrono>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaconv/aggregator.hpp"
#include "metaconv/common.hpp"
#include "metaconv/data.hpp"
#include "metaconv/graph.hpp"
#include "metaconv/meta_grad.hpp"
#include "metaconv/seq_model.hpp"

namespace metaconv {

enum class MetaMode {
    full,          // fitted self embedding + GCN + negative sampling
    no_ns,         // drop the structural loss
    no_gcn,        // mean aggregation instead of the GCN
    no_ns_no_gcn,  // both of the above
    no_self_emb,   // aggregate neighbors only, never fit the target's row
    speaker_emb,   // fitted speaker embedding alone, no graph anywhere
    paml,          // no task aggregator at all (plain first-order MAML)
    ta_as_base,    // aggregator and touched rows adapt inside the inner loop
};

inline const char* meta_mode_name(MetaMode m) {
    switch (m) {
        case MetaMode::full: return "full";
        case MetaMode::no_ns: return "no-ns";
        case MetaMode::no_gcn: return "no-gcn";
        case MetaMode::no_ns_no_gcn: return "no-ns-no-gcn";
        case MetaMode::no_self_emb: return "no-self-emb";
        case MetaMode::speaker_emb: return "speaker-emb";
        case MetaMode::paml: return "paml";
        case MetaMode::ta_as_base: return "ta-as-base";
    }
    return "?";
}

inline MetaMode meta_mode_from_name(const std::string& s) {
    for (MetaMode m : {MetaMode::full, MetaMode::no_ns, MetaMode::no_gcn, MetaMode::no_ns_no_gcn,
                       MetaMode::no_self_emb, MetaMode::speaker_emb, MetaMode::paml,
                       MetaMode::ta_as_base})
        if (s == meta_mode_name(m)) return m;
    throw ConfigError("unknown mode '" + s + "'");
}

inline bool mode_uses_table(MetaMode m) { return m != MetaMode::paml; }
inline bool mode_uses_gcn(MetaMode m) {
    return m == MetaMode::full || m == MetaMode::no_ns || m == MetaMode::no_self_emb ||
           m == MetaMode::ta_as_base;
}
inline bool mode_uses_mean_aggregation(MetaMode m) {
    return m == MetaMode::no_gcn || m == MetaMode::no_ns_no_gcn;
}
inline bool mode_uses_ns(MetaMode m) {
    return m == MetaMode::full || m == MetaMode::no_gcn || m == MetaMode::no_self_emb ||
           m == MetaMode::ta_as_base;
}
inline bool mode_fits_embedding(MetaMode m) {
    return mode_uses_table(m) && m != MetaMode::no_self_emb;
}
inline bool mode_self_inclusion(MetaMode m) { return m != MetaMode::no_self_emb; }

struct MetaConfig {
    double alpha = 0.01;    // inner-loop SGD rate, shared with embedding fitting
    double beta = 3e-4;     // outer-loop Adam rate
    double lambda_ns = 1.0; // weight of the negative-sampling loss
    int inner_steps = 3;
    int fit_steps = 5;
    int meta_batch_size = 8;
    int k_shot = 10;
    int k_ns = 5;
    bool first_order = true;
    bool resample_episodes = true;  // fresh support/query partition per draw
    MetaMode mode = MetaMode::full;
    int decode_top_k = 5;
    int max_decode_len = 16;

    void validate() const {
        // alpha = 0 is legal (degenerate no-op adaptation, used by tests)
        if (alpha < 0 || beta <= 0) throw ConfigError("meta: bad learning rates");
        if (lambda_ns < 0) throw ConfigError("meta: lambda must be non-negative");
        if (inner_steps < 0 || fit_steps < 0) throw ConfigError("meta: negative step counts");
        if (meta_batch_size < 1 || k_shot < 1 || k_ns < 1 || decode_top_k < 1 ||
            max_decode_len < 1)
            throw ConfigError("meta: counts must be positive");
    }
};

inline json meta_config_to_json(const MetaConfig& c) {
    return json{{"alpha", c.alpha},
                {"beta", c.beta},
                {"lambda_ns", c.lambda_ns},
                {"inner_steps", c.inner_steps},
                {"fit_steps", c.fit_steps},
                {"meta_batch_size", c.meta_batch_size},
                {"k_shot", c.k_shot},
                {"k_ns", c.k_ns},
                {"first_order", c.first_order},
                {"resample_episodes", c.resample_episodes},
                {"mode", meta_mode_name(c.mode)},
                {"decode_top_k", c.decode_top_k},
                {"max_decode_len", c.max_decode_len}};
}

inline MetaConfig meta_config_from_json(const json& j) {
    MetaConfig c;
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.lambda_ns = j.value("lambda_ns", c.lambda_ns);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.fit_steps = j.value("fit_steps", c.fit_steps);
    c.meta_batch_size = j.value("meta_batch_size", c.meta_batch_size);
    c.k_shot = j.value("k_shot", c.k_shot);
    c.k_ns = j.value("k_ns", c.k_ns);
    c.first_order = j.value("first_order", c.first_order);
    c.resample_episodes = j.value("resample_episodes", c.resample_episodes);
    c.mode = meta_mode_from_name(j.value("mode", std::string("full")));
    c.decode_top_k = j.value("decode_top_k", c.decode_top_k);
    c.max_decode_len = j.value("max_decode_len", c.max_decode_len);
    return c;
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamState {
    Vec m, v;
    long t = 0;
};

// Plain scalar loop: keeps the arithmetic identical to a straightforward
// reimplementation regardless of how the compiler vectorizes expression
// templates, which the reproducibility tests rely on.
inline void adam_update(Vec& params, const Vec& grad, AdamState& st, double lr,
                        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (st.m.size() != grad.size()) {
        st.m = Vec::Zero(grad.size());
        st.v = Vec::Zero(grad.size());
        st.t = 0;
    }
    ++st.t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * grad[i];
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        params[i] -= lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + eps);
    }
}

// Lazy per-row Adam for the embedding table: untouched rows keep their
// moments and take no step.
struct TableAdamState {
    Mat m, v;
    std::vector<long> t;
};

inline void table_adam_update(TaskEmbeddingTable& table,
                              const std::unordered_map<int, Vec>& row_grads, TableAdamState& st,
                              double lr, double beta1 = 0.9, double beta2 = 0.999,
                              double eps = 1e-8) {
    if (st.m.rows() != table.rows.rows()) {
        st.m = Mat::Zero(table.rows.rows(), table.rows.cols());
        st.v = Mat::Zero(table.rows.rows(), table.rows.cols());
        st.t.assign(static_cast<std::size_t>(table.rows.rows()), 0);
    }
    std::vector<int> touched;
    touched.reserve(row_grads.size());
    for (const auto& [s, g] : row_grads) touched.push_back(s);
    std::sort(touched.begin(), touched.end());
    for (int s : touched) {
        const Vec& g = row_grads.at(s);
        auto m = st.m.row(s);
        auto v = st.v.row(s);
        long& t = st.t[static_cast<std::size_t>(s)];
        ++t;
        m = beta1 * m + (1.0 - beta1) * g.transpose();
        v = (beta2 * v.array() + (1.0 - beta2) * g.transpose().array().square()).matrix();
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        table.rows.row(s).array() -=
            lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    }
}

// ---------------------------------------------------------------------------
// Training state

struct TrainState {
    ModelParameters phi;
    AggregatorParameters agg;
    TaskEmbeddingTable table;
    AdamState adam_phi, adam_agg;
    TableAdamState adam_table;
    uint64_t run_seed = 0;
    long step = 0;
};

inline TrainState init_train_state(const ModelConfig& model_cfg, int num_train_speakers,
                                   uint64_t seed) {
    TrainState st;
    Rng phi_rng(derive_seed(seed, {11}));
    Rng agg_rng(derive_seed(seed, {12}));
    Rng table_rng(derive_seed(seed, {13}));
    st.phi = ModelParameters::init(model_cfg, phi_rng);
    st.agg = AggregatorParameters::random_init(model_cfg.d_model, agg_rng);
    st.table = TaskEmbeddingTable::random_init(num_train_speakers, model_cfg.d_model, table_rng);
    st.run_seed = seed;
    return st;
}

// Seed derivation for the independent random streams inside one run. Public
// so tests can replay the exact draws.
inline uint64_t batch_seed(uint64_t run_seed, long step) {
    return derive_seed(run_seed, {21, static_cast<uint64_t>(step)});
}
inline uint64_t episode_seed(uint64_t run_seed, long step, int speaker) {
    return derive_seed(run_seed, {22, static_cast<uint64_t>(step), static_cast<uint64_t>(speaker)});
}
inline uint64_t fixed_partition_seed(uint64_t run_seed, int speaker) {
    return derive_seed(run_seed, {23, static_cast<uint64_t>(speaker)});
}
inline uint64_t negatives_seed(uint64_t run_seed, long step, int speaker) {
    return derive_seed(run_seed, {24, static_cast<uint64_t>(step), static_cast<uint64_t>(speaker)});
}

// ---------------------------------------------------------------------------
// Inner loop

// phi_s = phi - alpha * grad L_support, applied inner_steps times with the
// task representation held fixed. phi itself is untouched; the optional
// flat_path records the descent trajectory for second-order outer gradients.
inline ModelParameters inner_adapt(const ModelParameters& phi, const Vec* h,
                                   const std::vector<ConversationSample>& support,
                                   const MetaConfig& cfg,
                                   std::vector<Vec>* flat_path = nullptr) {
    ModelParameters adapted = phi;
    if (flat_path) flat_path->push_back(flatten(adapted));
    for (int t = 0; t < cfg.inner_steps; ++t) {
        auto grads = ModelParameters::zeros(phi.config);
        cm_loss_and_grad(adapted, h, support, &grads, nullptr);
        add_scaled(adapted, grads, -cfg.alpha);
        if (!all_finite(adapted))
            throw NumericError("inner_adapt: non-finite parameters at step " + std::to_string(t));
        if (flat_path) flat_path->push_back(flatten(adapted));
    }
    return adapted;
}

// FlatTask adapter so the generic second-order chain can drive the
// conversation model. Expensive (one unflatten per call); used only when
// first_order is off.
inline FlatTask make_cm_flat_task(const ModelConfig& cfg, const Vec* h,
                                  const std::vector<ConversationSample>& batch) {
    auto scratch = std::make_shared<ModelParameters>(ModelParameters::zeros(cfg));
    Vec h_copy;
    bool has_h = h != nullptr;
    if (has_h) h_copy = *h;
    FlatTask task;
    task.loss = [scratch, h_copy, has_h, &batch](const Vec& flat) {
        unflatten(*scratch, flat);
        return cm_loss(*scratch, has_h ? &h_copy : nullptr, batch);
    };
    task.grad = [scratch, cfg, h_copy, has_h, &batch](const Vec& flat) {
        unflatten(*scratch, flat);
        auto grads = ModelParameters::zeros(cfg);
        cm_loss_and_grad(*scratch, has_h ? &h_copy : nullptr, batch, &grads, nullptr);
        return flatten(grads);
    };
    return task;
}

// ---------------------------------------------------------------------------
// Episode processing (shared between the outer step and testing)

struct EpisodeOutcome {
    int speaker = -1;
    double query_loss = 0.0;
    double ns = 0.0;
    Vec h;           // empty when the mode carries no task representation
    Vec fitted_row;  // empty when the mode does not fit one
};

namespace metadetail {

struct GradSink {
    ModelParameters* phi = nullptr;
    AggregatorParameters* agg = nullptr;
    std::unordered_map<int, Vec>* rows = nullptr;
};

// One speaker's episode against a frozen snapshot. When `sink` carries
// destinations this accumulates the outer-loop gradients (Eq. 3-5 style:
// summed over the batch); with an empty sink it is a pure evaluation.
inline EpisodeOutcome process_episode(const ModelParameters& phi, const AggregatorParameters& agg,
                                      const TaskEmbeddingTable& table, const SocialGraph& g,
                                      const Episode& ep, const MetaConfig& cfg,
                                      uint64_t neg_seed, const GradSink& sink) {
    EpisodeOutcome out;
    out.speaker = ep.speaker;
    const int s = ep.speaker;
    const bool training = sink.phi != nullptr;

    // --- task representation ---
    std::unordered_map<int, Vec> overlay;
    TableView view = TableView(table).with_overlay(overlay);
    AggregateCache gcn_cache;
    std::vector<int> mean_members;
    bool has_h = mode_uses_table(cfg.mode);

    if (mode_fits_embedding(cfg.mode)) {
        Vec start = table.has_row(s) ? table.row(s) : new_speaker_row(table, g, s);
        out.fitted_row = fit_task_embedding(phi, start, ep.support, cfg.fit_steps, cfg.alpha);
        overlay.emplace(s, out.fitted_row);
    }

    Vec h;
    if (has_h) {
        if (mode_uses_gcn(cfg.mode))
            h = aggregate(agg, view, g, s, mode_self_inclusion(cfg.mode), &gcn_cache);
        else if (mode_uses_mean_aggregation(cfg.mode))
            h = aggregate_mean_ablation(view, g, s, mode_self_inclusion(cfg.mode), &mean_members);
        else  // speaker_emb: the fitted row is the representation
            h = out.fitted_row;
        out.h = h;
    }

    // --- TA-as-base ablation: aggregator and touched rows join the inner loop ---
    if (cfg.mode == MetaMode::ta_as_base) {
        AggregatorParameters agg_t = agg;
        ModelParameters phi_t = phi;
        for (int t = 0; t < cfg.inner_steps; ++t) {
            AggregateCache cache_t;
            Vec h_t = aggregate(agg_t, view, g, s, true, &cache_t);
            auto phi_grads = ModelParameters::zeros(phi.config);
            Vec h_grad(h_t.size());
            cm_loss_and_grad(phi_t, &h_t, ep.support, &phi_grads, &h_grad);
            auto agg_grads = AggregatorParameters::zeros(static_cast<int>(h_t.size()));
            std::unordered_map<int, Vec> row_grads;
            aggregate_backward(agg_t, cache_t, h_grad, &agg_grads, &row_grads);
            add_scaled(phi_t, phi_grads, -cfg.alpha);
            agg_t.add_scaled(agg_grads, -cfg.alpha);
            for (auto& [u, gv] : row_grads) {
                auto [it, fresh] = overlay.try_emplace(u, view.row(u));
                it->second -= cfg.alpha * gv;
            }
            if (!all_finite(phi_t))
                throw NumericError("ta_as_base inner loop: non-finite parameters");
        }
        AggregateCache cache_T;
        Vec h_T = aggregate(agg_t, view, g, s, true, &cache_T);
        out.h = h_T;
        Vec h_grad_q(h_T.size());
        out.query_loss = training
                             ? cm_loss_and_grad(phi_t, &h_T, ep.query, sink.phi, &h_grad_q)
                             : cm_loss(phi_t, &h_T, ep.query);
        if (training) {
            Vec dh_total = h_grad_q;
            if (mode_uses_ns(cfg.mode) && cfg.lambda_ns > 0) {
                Rng neg_rng(neg_seed);
                auto negatives = g.sample_negatives(s, cfg.k_ns, neg_rng);
                NsLossGrads ns_grads;
                out.ns = ns_loss(h_T, view, g, s, negatives, &ns_grads);
                dh_total += cfg.lambda_ns * ns_grads.dh;
                for (auto& [u, gv] : ns_grads.dv) {
                    auto [it, fresh] = sink.rows->try_emplace(u, Vec::Zero(h_T.size()));
                    it->second += cfg.lambda_ns * gv;
                }
            }
            aggregate_backward(agg_t, cache_T, dh_total, sink.agg, sink.rows);
        }
        return out;
    }

    // --- standard pipeline ---
    std::vector<Vec> flat_path;
    std::vector<Vec>* path_ptr = (training && !cfg.first_order) ? &flat_path : nullptr;
    ModelParameters phi_s = inner_adapt(phi, has_h ? &h : nullptr, ep.support, cfg, path_ptr);

    if (!training) {
        out.query_loss = cm_loss(phi_s, has_h ? &h : nullptr, ep.query);
        return out;
    }

    Vec h_grad_q = has_h ? Vec(h.size()) : Vec();
    if (cfg.first_order) {
        out.query_loss = cm_loss_and_grad(phi_s, has_h ? &h : nullptr, ep.query, sink.phi,
                                          has_h ? &h_grad_q : nullptr);
    } else {
        // exact chain through the inner descent for the model parameters
        auto local = ModelParameters::zeros(phi.config);
        out.query_loss = cm_loss_and_grad(phi_s, has_h ? &h : nullptr, ep.query, &local,
                                          has_h ? &h_grad_q : nullptr);
        FlatTask support_task = make_cm_flat_task(phi.config, has_h ? &h : nullptr, ep.support);
        InnerSgdPath path;
        path.points = std::move(flat_path);
        Vec chained = maml_outer_grad(support_task, path, flatten(local), cfg.alpha, false);
        auto chained_struct = ModelParameters::zeros(phi.config);
        unflatten(chained_struct, chained);
        add_scaled(*sink.phi, chained_struct, 1.0);
    }

    if (!has_h) return out;

    Vec dh_total = h_grad_q;
    if (mode_uses_ns(cfg.mode) && cfg.lambda_ns > 0) {
        Rng neg_rng(neg_seed);
        auto negatives = g.sample_negatives(s, cfg.k_ns, neg_rng);
        NsLossGrads ns_grads;
        out.ns = ns_loss(h, view, g, s, negatives, &ns_grads);
        dh_total += cfg.lambda_ns * ns_grads.dh;
        for (auto& [u, gv] : ns_grads.dv) {
            auto [it, fresh] = sink.rows->try_emplace(u, Vec::Zero(h.size()));
            it->second += cfg.lambda_ns * gv;
        }
    }

    if (mode_uses_gcn(cfg.mode)) {
        aggregate_backward(agg, gcn_cache, dh_total, sink.agg, sink.rows);
    } else if (mode_uses_mean_aggregation(cfg.mode)) {
        aggregate_mean_backward(mean_members, dh_total, sink.rows);
    } else {  // speaker_emb: representation is the row itself
        auto [it, fresh] = sink.rows->try_emplace(s, Vec::Zero(h.size()));
        it->second += dh_total;
    }
    return out;
}

}  // namespace metadetail

// ---------------------------------------------------------------------------
// Outer loop

struct StepMetrics {
    long step = 0;
    double mean_query_loss = 0.0;
    double ns_loss = 0.0;  // summed over the batch
    double wall_ms = 0.0;
    std::vector<std::pair<int, double>> speaker_losses;
    std::vector<int> skipped_speakers;
};

// One meta-step over an explicit speaker batch. Gradients from all episodes
// are accumulated against the same snapshot, then applied simultaneously:
// one Adam step each for the model, the aggregator, and the touched rows.
inline StepMetrics outer_step_on(TrainState& st, const Dataset& train,
                                 const std::vector<int>& batch, const MetaConfig& cfg) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();
    const SocialGraph& g = *train.graph;

    auto phi_grad = ModelParameters::zeros(st.phi.config);
    auto agg_grad = AggregatorParameters::zeros(st.phi.config.d_model);
    std::unordered_map<int, Vec> row_grads;
    metadetail::GradSink sink{&phi_grad, &agg_grad, &row_grads};

    StepMetrics metrics;
    metrics.step = st.step;
    int processed = 0;
    for (int s : batch) {
        if (cfg.mode == MetaMode::no_self_emb && g.neighbors(s).empty()) {
            // the variant has no representation for isolated speakers
            metrics.skipped_speakers.push_back(s);
            continue;
        }
        uint64_t ep_seed = cfg.resample_episodes ? episode_seed(st.run_seed, st.step, s)
                                                 : fixed_partition_seed(st.run_seed, s);
        Rng ep_rng(ep_seed);
        Episode ep = build_episode(train, s, cfg.k_shot, ep_rng);
        try {
            auto outcome = metadetail::process_episode(
                st.phi, st.agg, st.table, g, ep, cfg,
                negatives_seed(st.run_seed, st.step, s), sink);
            metrics.speaker_losses.emplace_back(s, outcome.query_loss);
            metrics.mean_query_loss += outcome.query_loss;
            metrics.ns_loss += outcome.ns;
            ++processed;
        } catch (const Error& e) {
            throw Error("speaker " + std::to_string(s) + ": " + e.what());
        }
    }
    if (processed == 0) throw ConfigError("outer step: every speaker in the batch was skipped");
    metrics.mean_query_loss /= processed;

    Vec phi_flat = flatten(st.phi);
    adam_update(phi_flat, flatten(phi_grad), st.adam_phi, cfg.beta);
    unflatten(st.phi, phi_flat);

    if (mode_uses_gcn(cfg.mode)) {
        Vec agg_flat = st.agg.flatten();
        adam_update(agg_flat, agg_grad.flatten(), st.adam_agg, cfg.beta);
        st.agg.unflatten(agg_flat);
    }
    if (mode_uses_table(cfg.mode)) table_adam_update(st.table, row_grads, st.adam_table, cfg.beta);

    ++st.step;
    if (!all_finite(st.phi) || !st.table.rows.allFinite() || !st.agg.flatten().allFinite())
        throw NumericError("outer step " + std::to_string(st.step) +
                           ": training produced non-finite parameters");
    metrics.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    return metrics;
}

inline StepMetrics outer_step(TrainState& st, const Dataset& train, const MetaConfig& cfg) {
    Rng rng(batch_seed(st.run_seed, st.step));
    auto batch = speaker_batch(train, cfg.meta_batch_size, rng);
    return outer_step_on(st, train, batch, cfg);
}

// ---------------------------------------------------------------------------
// Testing

// Table copy widened to cover newcomer ids; their rows stay invalid until a
// caller installs one.
inline TaskEmbeddingTable expand_table(const TaskEmbeddingTable& base, int total_speakers) {
    if (total_speakers < base.size()) throw ConfigError("expand_table: cannot shrink");
    TaskEmbeddingTable t;
    t.rows = Mat::Zero(total_speakers, base.dim());
    t.rows.topRows(base.rows.rows()) = base.rows;
    t.valid = base.valid;
    t.valid.resize(static_cast<std::size_t>(total_speakers), 0);
    return t;
}

struct TestEpisodeResult {
    int speaker = -1;
    double pre_adapt_query_loss = 0.0;
    double post_adapt_query_loss = 0.0;
    std::vector<std::vector<int>> generations;  // one per query sample
    Vec h;           // task representation used at generation time
    Vec fitted_row;  // post-fit embedding (empty when the mode skips fitting)
    int support_size = 0;
};

// The training procedure minus the outer-loop update: fit the embedding,
// aggregate, adapt the model copy, then decode every query with top-k
// sampling. Everything global is taken by const reference; nothing persists.
inline TestEpisodeResult test_adapt_generate(const ModelParameters& phi,
                                             const AggregatorParameters& agg,
                                             const TaskEmbeddingTable& table,
                                             const SocialGraph& g, const Episode& ep,
                                             const MetaConfig& cfg, uint64_t seed) {
    cfg.validate();
    TestEpisodeResult res;
    res.speaker = ep.speaker;
    res.support_size = static_cast<int>(ep.support.size());
    const int s = ep.speaker;

    std::unordered_map<int, Vec> overlay;
    TableView view = TableView(table).with_overlay(overlay);
    bool has_h = mode_uses_table(cfg.mode);

    if (mode_fits_embedding(cfg.mode)) {
        Vec start = table.has_row(s) ? table.row(s) : new_speaker_row(table, g, s);
        res.fitted_row = fit_task_embedding(phi, start, ep.support, cfg.fit_steps, cfg.alpha);
        overlay.emplace(s, res.fitted_row);
    }

    Vec h;
    ModelParameters phi_s = phi;
    if (cfg.mode == MetaMode::ta_as_base) {
        // the joint inner loop runs at test time too, on local copies
        AggregatorParameters agg_t = agg;
        for (int t = 0; t < cfg.inner_steps; ++t) {
            AggregateCache cache_t;
            Vec h_t = aggregate(agg_t, view, g, s, true, &cache_t);
            auto phi_grads = ModelParameters::zeros(phi.config);
            Vec h_grad(h_t.size());
            cm_loss_and_grad(phi_s, &h_t, ep.support, &phi_grads, &h_grad);
            auto agg_grads = AggregatorParameters::zeros(static_cast<int>(h_t.size()));
            std::unordered_map<int, Vec> row_grads;
            aggregate_backward(agg_t, cache_t, h_grad, &agg_grads, &row_grads);
            add_scaled(phi_s, phi_grads, -cfg.alpha);
            agg_t.add_scaled(agg_grads, -cfg.alpha);
            for (auto& [u, gv] : row_grads) {
                auto [it, fresh] = overlay.try_emplace(u, view.row(u));
                it->second -= cfg.alpha * gv;
            }
            if (!all_finite(phi_s))
                throw NumericError("ta_as_base inner loop: non-finite parameters");
        }
        h = aggregate(agg_t, view, g, s, true);
        res.h = h;
        res.pre_adapt_query_loss = cm_loss(phi, &h, ep.query);
        res.post_adapt_query_loss = cm_loss(phi_s, &h, ep.query);
    } else {
        if (has_h) {
            if (mode_uses_gcn(cfg.mode))
                h = aggregate(agg, view, g, s, mode_self_inclusion(cfg.mode));
            else if (mode_uses_mean_aggregation(cfg.mode))
                h = aggregate_mean_ablation(view, g, s, mode_self_inclusion(cfg.mode));
            else
                h = res.fitted_row;
            res.h = h;
        }
        const Vec* hp0 = has_h ? &h : nullptr;
        res.pre_adapt_query_loss = cm_loss(phi, hp0, ep.query);
        phi_s = inner_adapt(phi, hp0, ep.support, cfg);
        res.post_adapt_query_loss = cm_loss(phi_s, hp0, ep.query);
    }
    const Vec* hp = has_h ? &h : nullptr;

    for (std::size_t i = 0; i < ep.query.size(); ++i) {
        Rng dec_rng(derive_seed(seed, {31, static_cast<uint64_t>(i)}));
        res.generations.push_back(decode_topk(phi_s, hp, ep.query[i].query, cfg.decode_top_k,
                                              cfg.max_decode_len, dec_rng));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Training driver

struct TrainRecord {
    long step;
    double mean_query_loss;
    double ns_loss;
    double wall_ms;
};

template <class Callback>
void train_loop(TrainState& st, const Dataset& train, const MetaConfig& cfg, long steps,
                Callback&& on_step) {
    for (long i = 0; i < steps; ++i) {
        auto metrics = outer_step(st, train, cfg);
        on_step(metrics);
    }
}

}  // namespace metaconv
