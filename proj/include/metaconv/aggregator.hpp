#pragma once

// Task aggregator: per-speaker task embeddings, the 2-layer GCN neighbor
// aggregation that refines them into task representations, the
// negative-sampling structural loss, and the mean-aggregation ablation.
// Aggregation reads only the target's 2-hop neighborhood; nothing here
// propagates over the whole graph.

#include <Eigen/Dense>
#include <cmath>
#include <unordered_map>
#include <vector>

#include "metaconv/common.hpp"
#include "metaconv/graph.hpp"
#include "metaconv/seq_model.hpp"

namespace metaconv {

struct TaskEmbeddingTable {
    Mat rows;                    // num_speakers x d
    std::vector<uint8_t> valid;  // rows of unseen speakers stay invalid until initialized

    // test hook: when set, every row read is recorded
    mutable std::vector<int>* access_log = nullptr;

    int size() const { return static_cast<int>(rows.rows()); }
    int dim() const { return static_cast<int>(rows.cols()); }

    static TaskEmbeddingTable random_init(int num_speakers, int d, Rng& rng) {
        TaskEmbeddingTable t;
        t.rows.resize(num_speakers, d);
        double s = 1.0 / std::sqrt(static_cast<double>(d));
        for (int i = 0; i < num_speakers; ++i)
            for (int j = 0; j < d; ++j) t.rows(i, j) = s * rng.normal();
        t.valid.assign(static_cast<std::size_t>(num_speakers), 1);
        return t;
    }

    bool has_row(int s) const {
        return s >= 0 && s < size() && valid[static_cast<std::size_t>(s)] != 0;
    }

    Vec row(int s) const {
        if (!has_row(s)) throw DataError("task embedding missing for speaker " + std::to_string(s));
        if (access_log) access_log->push_back(s);
        return rows.row(s).transpose();
    }

    uint64_t checksum() const {
        uint64_t h = fnv1a64(rows.data(), static_cast<std::size_t>(rows.size()) * sizeof(double));
        return fnv1a64(valid.data(), valid.size(), h);
    }
};

// Read-only view of the table with selected rows overridden (the episode's
// freshly fitted v_s, or the inner-adapted rows in the TA-as-base ablation).
// Keeps episode processing pure: the base table is never written.
class TableView {
public:
    explicit TableView(const TaskEmbeddingTable& base) : base_(&base) {}

    TableView with_overlay(const std::unordered_map<int, Vec>& overlay) const {
        TableView v = *this;
        v.overlay_ = &overlay;
        return v;
    }

    bool has_embedding(int s) const {
        if (overlay_ && overlay_->count(s)) return true;
        return base_->has_row(s);
    }

    Vec row(int s) const {
        if (overlay_) {
            auto it = overlay_->find(s);
            if (it != overlay_->end()) {
                if (base_->access_log) base_->access_log->push_back(s);
                return it->second;
            }
        }
        return base_->row(s);
    }

    const TaskEmbeddingTable& base() const { return *base_; }

private:
    const TaskEmbeddingTable* base_;
    const std::unordered_map<int, Vec>* overlay_ = nullptr;
};

// Two square layers; output dimension equals d_model so the representation
// can occupy the sequence model's prepended slot.
struct AggregatorParameters {
    Mat w1, w2;
    Vec b1, b2;

    static AggregatorParameters zeros(int d) {
        AggregatorParameters p;
        p.w1 = Mat::Zero(d, d);
        p.w2 = Mat::Zero(d, d);
        p.b1 = Vec::Zero(d);
        p.b2 = Vec::Zero(d);
        return p;
    }

    static AggregatorParameters identity(int d) {
        AggregatorParameters p = zeros(d);
        p.w1.setIdentity();
        p.w2.setIdentity();
        return p;
    }

    static AggregatorParameters random_init(int d, Rng& rng) {
        AggregatorParameters p = zeros(d);
        double s = std::sqrt(2.0 / static_cast<double>(2 * d));
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                p.w1(i, j) = s * rng.normal();
                p.w2(i, j) = s * rng.normal();
            }
        return p;
    }

    Vec flatten() const {
        Vec f(w1.size() + w2.size() + b1.size() + b2.size());
        Eigen::Index at = 0;
        auto put = [&](const auto& t) {
            f.segment(at, t.size()) = Eigen::Map<const Vec>(t.data(), t.size());
            at += t.size();
        };
        put(w1);
        put(w2);
        put(b1);
        put(b2);
        return f;
    }

    void unflatten(const Vec& f) {
        Eigen::Index at = 0;
        auto take = [&](auto& t) {
            Eigen::Map<Vec>(t.data(), t.size()) = f.segment(at, t.size());
            at += t.size();
        };
        take(w1);
        take(w2);
        take(b1);
        take(b2);
    }

    void add_scaled(const AggregatorParameters& g, double c) {
        w1 += c * g.w1;
        w2 += c * g.w2;
        b1 += c * g.b1;
        b2 += c * g.b2;
    }

    uint64_t checksum() const {
        uint64_t h = fnv1a64(w1.data(), static_cast<std::size_t>(w1.size()) * sizeof(double));
        h = fnv1a64(w2.data(), static_cast<std::size_t>(w2.size()) * sizeof(double), h);
        h = fnv1a64(b1.data(), static_cast<std::size_t>(b1.size()) * sizeof(double), h);
        h = fnv1a64(b2.data(), static_cast<std::size_t>(b2.size()) * sizeof(double), h);
        return h;
    }
};

namespace aggdetail {

// Aggregation membership of node x: its neighbors, plus x itself when
// self_emb is on, restricted to speakers that actually have an embedding
// (unseen newcomers without rows simply do not contribute).
inline std::vector<int> members(const TableView& table, const SocialGraph& g, int x,
                                bool self_emb) {
    std::vector<int> m;
    if (self_emb && table.has_embedding(x)) m.push_back(x);
    for (int u : g.neighbors(x))
        if (table.has_embedding(u)) m.push_back(u);
    return m;
}

}  // namespace aggdetail

struct AggregateCache {
    int target = -1;
    bool self_emb = true;
    std::vector<int> a_s;                // layer-2 membership
    std::vector<std::vector<int>> a_u;   // layer-1 membership per a_s entry
    std::vector<Vec> mean1;              // layer-1 mean inputs
    std::vector<Vec> h1;                 // post-ReLU layer-1 values
    Vec mean2;
};

// h_s from two rounds of mean-aggregate + linear (ReLU after the first
// round only, so the representation can carry negative components).
// Isolated target with self_emb reduces to W2*ReLU(W1*v_s + b1) + b2.
inline Vec aggregate(const AggregatorParameters& p, const TableView& table, const SocialGraph& g,
                     int s, bool self_emb, AggregateCache* cache = nullptr) {
    auto a_s = aggdetail::members(table, g, s, self_emb);
    AggregateCache local;
    AggregateCache& c = cache ? *cache : local;
    c.target = s;
    c.self_emb = self_emb;
    c.a_s.clear();
    c.a_u.clear();
    c.mean1.clear();
    c.h1.clear();
    for (int u : a_s) {
        auto a_u = aggdetail::members(table, g, u, self_emb);
        if (a_u.empty()) continue;  // no layer-1 value available for this member
        Vec m = Vec::Zero(table.base().dim());
        for (int w : a_u) m += table.row(w);
        m /= static_cast<double>(a_u.size());
        Vec z = p.w1 * m + p.b1;
        c.a_s.push_back(u);
        c.a_u.push_back(std::move(a_u));
        c.mean1.push_back(std::move(m));
        c.h1.push_back(z.cwiseMax(0.0));
    }
    if (c.a_s.empty())
        throw DataError("aggregate: speaker " + std::to_string(s) +
                        " has no usable neighborhood (isolated with self embedding disabled)");
    c.mean2 = Vec::Zero(table.base().dim());
    for (const auto& h1 : c.h1) c.mean2 += h1;
    c.mean2 /= static_cast<double>(c.h1.size());
    Vec h = p.w2 * c.mean2 + p.b2;
    if (!h.allFinite()) throw NumericError("aggregate: non-finite task representation");
    return h;
}

// Backward of aggregate. Adds parameter gradients into `pg` and per-row
// gradients into `row_grads` (keyed by speaker id; the override row's
// gradient lands under the target's id).
inline void aggregate_backward(const AggregatorParameters& p, const AggregateCache& c,
                               const Vec& dh, AggregatorParameters* pg,
                               std::unordered_map<int, Vec>* row_grads) {
    if (pg) {
        pg->w2.noalias() += dh * c.mean2.transpose();
        pg->b2 += dh;
    }
    Vec dmean2 = p.w2.transpose() * dh;
    double inv2 = 1.0 / static_cast<double>(c.h1.size());
    for (std::size_t i = 0; i < c.a_s.size(); ++i) {
        Vec dh1 = dmean2 * inv2;
        Vec dz = (c.h1[i].array() > 0.0).select(dh1.array(), 0.0).matrix();
        if (pg) {
            pg->w1.noalias() += dz * c.mean1[i].transpose();
            pg->b1 += dz;
        }
        if (row_grads) {
            Vec dmean1 = p.w1.transpose() * dz;
            double inv1 = 1.0 / static_cast<double>(c.a_u[i].size());
            for (int w : c.a_u[i]) {
                auto [it, inserted] = row_grads->try_emplace(w, Vec::Zero(dh.size()));
                it->second += dmean1 * inv1;
            }
        }
    }
}

// Table 2's -GCN variant: plain mean of the member embeddings.
inline Vec aggregate_mean_ablation(const TableView& table, const SocialGraph& g, int s,
                                   bool self_emb, std::vector<int>* members_out = nullptr) {
    auto a_s = aggdetail::members(table, g, s, self_emb);
    if (a_s.empty())
        throw DataError("aggregate: speaker " + std::to_string(s) +
                        " has no usable neighborhood (isolated with self embedding disabled)");
    Vec h = Vec::Zero(table.base().dim());
    for (int u : a_s) h += table.row(u);
    h /= static_cast<double>(a_s.size());
    if (members_out) *members_out = a_s;
    return h;
}

inline void aggregate_mean_backward(const std::vector<int>& members, const Vec& dh,
                                    std::unordered_map<int, Vec>* row_grads) {
    if (!row_grads) return;
    double inv = 1.0 / static_cast<double>(members.size());
    for (int u : members) {
        auto [it, inserted] = row_grads->try_emplace(u, Vec::Zero(dh.size()));
        it->second += dh * inv;
    }
}

namespace aggdetail {

inline double log_sigmoid(double x) {
    // stable: log sigma(x) = -softplus(-x)
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace aggdetail

struct NsConfig {
    int k_ns = 5;        // negative samples per speaker
    double weight = 1.0; // lambda
};

struct NsLossGrads {
    Vec dh;
    std::unordered_map<int, Vec> dv;
};

// -( sum_{i in N_s} log sigma(v_i . h) + sum_{j in negatives} log sigma(-v_j . h) ).
// Raw table rows pair with the refined representation; duplicates among the
// negatives accumulate. Neighbors without embeddings contribute nothing, so
// an isolated speaker gets a negatives-only loss.
inline double ns_loss(const Vec& h, const TableView& table, const SocialGraph& g, int s,
                      const std::vector<int>& negatives, NsLossGrads* grads = nullptr) {
    if (grads) {
        grads->dh = Vec::Zero(h.size());
        grads->dv.clear();
    }
    double loss = 0.0;
    auto push_row_grad = [&](int u, const Vec& g_row) {
        auto [it, inserted] = grads->dv.try_emplace(u, Vec::Zero(h.size()));
        it->second += g_row;
    };
    for (int i : g.neighbors(s)) {
        if (!table.has_embedding(i)) continue;
        Vec vi = table.row(i);
        double dot = vi.dot(h);
        require_finite(dot, "ns_loss neighbor dot product");
        loss -= aggdetail::log_sigmoid(dot);
        if (grads) {
            double coeff = -(1.0 - aggdetail::sigmoid(dot));  // d(-log sigma(a))/da
            grads->dh += coeff * vi;
            push_row_grad(i, coeff * h);
        }
    }
    for (int j : negatives) {
        Vec vj = table.row(j);
        double dot = vj.dot(h);
        require_finite(dot, "ns_loss negative dot product");
        loss -= aggdetail::log_sigmoid(-dot);
        if (grads) {
            double coeff = aggdetail::sigmoid(dot);  // d(-log sigma(-b))/db
            grads->dh += coeff * vj;
            push_row_grad(j, coeff * h);
        }
    }
    require_finite(loss, "ns_loss");
    return loss;
}

// Initialization rule for a speaker that has no trained row yet: mean of the
// neighbor rows that exist, else the zero vector.
inline Vec new_speaker_row(const TaskEmbeddingTable& table, const SocialGraph& g, int s) {
    Vec acc = Vec::Zero(table.dim());
    int n = 0;
    for (int u : g.neighbors(s))
        if (table.has_row(u)) {
            acc += table.row(u);
            ++n;
        }
    if (n > 0) acc /= static_cast<double>(n);
    return acc;
}

// `steps` SGD updates of the embedding alone against a frozen conversation
// model: the embedding rides in the prepended slot and only its gradient is
// applied. Returns the updated row; the model is untouched.
inline Vec fit_task_embedding(const ModelParameters& cm, Vec v,
                              const std::vector<ConversationSample>& support, int steps,
                              double lr) {
    if (support.empty()) throw ConfigError("fit_task_embedding: empty support set");
    if (steps < 0) throw ConfigError("fit_task_embedding: negative step count");
    Vec grad(v.size());
    for (int step = 0; step < steps; ++step) {
        cm_loss_and_grad(cm, &v, support, nullptr, &grad);
        v -= lr * grad;
        if (!v.allFinite())
            throw NumericError("fit_task_embedding: non-finite embedding at step " +
                               std::to_string(step));
    }
    return v;
}

}  // namespace metaconv
