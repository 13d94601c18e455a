#pragma once

// Synthetic corpus generator. Plants the structure the method exploits:
// a random social graph, per-speaker style vectors smoothed along edges so
// neighbors share style, queries drawn from shared topic vocabulary, and
// responses that open with topic-determined answer tokens followed by
// style-conditioned unigrams. Neighbor/random similarity diagnostics are
// computed with the same TokSim metric used for evaluation.

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaconv/common.hpp"
#include "metaconv/data.hpp"
#include "metaconv/graph.hpp"
#include "metaconv/metrics.hpp"

namespace metaconv {

struct SynthConfig {
    int train_speakers = 500;
    int valid_speakers = 30;
    int test_speakers = 60;
    int samples_per_train_speaker = 40;
    int samples_per_eval_speaker = 20;  // valid and test splits
    int vocab_size = 200;
    double avg_degree = 6.0;
    enum class GraphKind { erdos_renyi, preferential } graph_kind = GraphKind::erdos_renyi;
    int style_dim = 8;
    int diffusion_rounds = 3;
    double style_temperature = 0.30;  // lower = more concentrated speaker styles
    int n_topics = 10;
    int topic_words_per_topic = 6;
    int answer_words_per_topic = 2;
    int query_len_min = 4, query_len_max = 7;
    int style_tokens_min = 3, style_tokens_max = 5;
    int k_shot = 10;
    int max_len = 80;

    int num_speakers() const { return train_speakers + valid_speakers + test_speakers; }
    int first_topic_word() const { return kNumSpecialTokens; }
    int first_answer_word() const { return first_topic_word() + n_topics * topic_words_per_topic; }
    int first_style_word() const { return first_answer_word() + n_topics * answer_words_per_topic; }
    int n_style_words() const { return vocab_size - first_style_word(); }

    void validate() const {
        if (train_speakers < 1 || valid_speakers < 0 || test_speakers < 0)
            throw ConfigError("synth: speaker counts must be positive");
        if (samples_per_train_speaker < 2 * k_shot || samples_per_eval_speaker < 2 * k_shot)
            throw ConfigError("synth: speakers need at least 2*K=" + std::to_string(2 * k_shot) +
                              " samples for episode building");
        if (n_style_words() < 10)
            throw ConfigError("synth: vocabulary too small for the topic/style layout");
        if (style_dim < 1 || diffusion_rounds < 0)
            throw ConfigError("synth: bad style parameters");
        if (query_len_min < 1 || query_len_max < query_len_min || style_tokens_min < 1 ||
            style_tokens_max < style_tokens_min)
            throw ConfigError("synth: bad length ranges");
        int longest = std::max(query_len_max, style_tokens_max + answer_words_per_topic);
        if (longest > max_len) throw ConfigError("synth: utterance lengths exceed max_len");
        if (avg_degree < 0 || avg_degree >= num_speakers())
            throw ConfigError("synth: average degree out of range");
    }
};

inline json synth_config_to_json(const SynthConfig& c) {
    return json{{"train_speakers", c.train_speakers},
                {"valid_speakers", c.valid_speakers},
                {"test_speakers", c.test_speakers},
                {"samples_per_train_speaker", c.samples_per_train_speaker},
                {"samples_per_eval_speaker", c.samples_per_eval_speaker},
                {"vocab_size", c.vocab_size},
                {"avg_degree", c.avg_degree},
                {"graph_kind", c.graph_kind == SynthConfig::GraphKind::erdos_renyi
                                   ? "erdos_renyi"
                                   : "preferential"},
                {"style_dim", c.style_dim},
                {"diffusion_rounds", c.diffusion_rounds},
                {"style_temperature", c.style_temperature},
                {"n_topics", c.n_topics},
                {"topic_words_per_topic", c.topic_words_per_topic},
                {"answer_words_per_topic", c.answer_words_per_topic},
                {"query_len_min", c.query_len_min},
                {"query_len_max", c.query_len_max},
                {"style_tokens_min", c.style_tokens_min},
                {"style_tokens_max", c.style_tokens_max},
                {"k_shot", c.k_shot},
                {"max_len", c.max_len}};
}

inline SynthConfig synth_config_from_json(const json& j) {
    SynthConfig c;
    c.train_speakers = j.value("train_speakers", c.train_speakers);
    c.valid_speakers = j.value("valid_speakers", c.valid_speakers);
    c.test_speakers = j.value("test_speakers", c.test_speakers);
    c.samples_per_train_speaker = j.value("samples_per_train_speaker", c.samples_per_train_speaker);
    c.samples_per_eval_speaker = j.value("samples_per_eval_speaker", c.samples_per_eval_speaker);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.avg_degree = j.value("avg_degree", c.avg_degree);
    if (j.value("graph_kind", "erdos_renyi") == std::string("preferential"))
        c.graph_kind = SynthConfig::GraphKind::preferential;
    c.style_dim = j.value("style_dim", c.style_dim);
    c.diffusion_rounds = j.value("diffusion_rounds", c.diffusion_rounds);
    c.style_temperature = j.value("style_temperature", c.style_temperature);
    c.n_topics = j.value("n_topics", c.n_topics);
    c.topic_words_per_topic = j.value("topic_words_per_topic", c.topic_words_per_topic);
    c.answer_words_per_topic = j.value("answer_words_per_topic", c.answer_words_per_topic);
    c.query_len_min = j.value("query_len_min", c.query_len_min);
    c.query_len_max = j.value("query_len_max", c.query_len_max);
    c.style_tokens_min = j.value("style_tokens_min", c.style_tokens_min);
    c.style_tokens_max = j.value("style_tokens_max", c.style_tokens_max);
    c.k_shot = j.value("k_shot", c.k_shot);
    c.max_len = j.value("max_len", c.max_len);
    return c;
}

namespace detail {

inline SocialGraph random_graph(const SynthConfig& cfg, Rng& rng) {
    int n = cfg.num_speakers();
    std::vector<std::pair<int, int>> edges;
    if (cfg.graph_kind == SynthConfig::GraphKind::erdos_renyi) {
        double p = n > 1 ? cfg.avg_degree / static_cast<double>(n - 1) : 0.0;
        for (int u = 0; u < n; ++u)
            for (int v = u + 1; v < n; ++v)
                if (rng.uniform_real() < p) edges.emplace_back(u, v);
    } else {
        int m = std::max(1, static_cast<int>(std::lround(cfg.avg_degree / 2.0)));
        std::vector<int> degree(static_cast<std::size_t>(n), 0);
        auto connect = [&](int u, int v) {
            edges.emplace_back(u, v);
            ++degree[static_cast<std::size_t>(u)];
            ++degree[static_cast<std::size_t>(v)];
        };
        int seed_nodes = std::min(n, m + 1);
        for (int u = 0; u < seed_nodes; ++u)
            for (int v = u + 1; v < seed_nodes; ++v) connect(u, v);
        for (int u = seed_nodes; u < n; ++u) {
            std::set<int> targets;
            int guard = 0;
            while (static_cast<int>(targets.size()) < std::min(m, u) && guard++ < 10000) {
                // weight existing nodes by degree + 1
                long long total = 0;
                for (int v = 0; v < u; ++v) total += degree[static_cast<std::size_t>(v)] + 1;
                long long pick = static_cast<long long>(
                    rng.uniform_index(static_cast<std::size_t>(total)));
                int chosen = 0;
                for (int v = 0; v < u; ++v) {
                    pick -= degree[static_cast<std::size_t>(v)] + 1;
                    if (pick < 0) {
                        chosen = v;
                        break;
                    }
                }
                targets.insert(chosen);
            }
            for (int v : targets) connect(u, v);
        }
    }
    return SocialGraph::from_edges(n, edges);
}

// Synchronous smoothing: each round every speaker moves to the mean of its
// closed neighborhood. Fixed point on a connected graph is a constant style.
inline Eigen::MatrixXd diffuse_styles(const Eigen::MatrixXd& styles, const SocialGraph& g,
                                      int rounds) {
    Eigen::MatrixXd cur = styles;
    for (int r = 0; r < rounds; ++r) {
        Eigen::MatrixXd next = cur;
        for (int s = 0; s < g.num_speakers(); ++s) {
            Eigen::VectorXd acc = cur.row(s).transpose();
            const auto& ns = g.neighbors(s);
            for (int u : ns) acc += cur.row(u).transpose();
            next.row(s) = acc.transpose() / static_cast<double>(1 + ns.size());
        }
        cur = std::move(next);
    }
    return cur;
}

inline int sample_categorical(const Eigen::VectorXd& probs, Rng& rng) {
    double u = rng.uniform_real();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size() - 1);
}

}  // namespace detail

struct SynthArtifacts {
    Eigen::MatrixXd styles;  // diffused style vectors, one row per speaker
};

inline DatasetBundle generate_synthetic(const SynthConfig& cfg, uint64_t seed,
                                        SynthArtifacts* artifacts = nullptr) {
    cfg.validate();
    int n = cfg.num_speakers();

    Rng graph_rng(derive_seed(seed, {1}));
    Rng style_rng(derive_seed(seed, {2}));
    Rng text_rng(derive_seed(seed, {3}));

    DatasetBundle b;
    b.vocab_size = cfg.vocab_size;
    b.k_shot = cfg.k_shot;
    b.max_len = cfg.max_len;
    b.seed = seed;
    b.config_hash = hash_hex(fnv1a64(synth_config_to_json(cfg).dump()));

    b.full_graph = detail::random_graph(cfg, graph_rng);

    // style vectors, smoothed along edges
    Eigen::MatrixXd styles(n, cfg.style_dim);
    for (int s = 0; s < n; ++s)
        for (int d = 0; d < cfg.style_dim; ++d) styles(s, d) = style_rng.normal();
    styles = detail::diffuse_styles(styles, b.full_graph, cfg.diffusion_rounds);
    if (artifacts) artifacts->styles = styles;

    // shared projection from style space to style-word logits
    int n_style = cfg.n_style_words();
    Eigen::MatrixXd style_proj(n_style, cfg.style_dim);
    for (int w = 0; w < n_style; ++w)
        for (int d = 0; d < cfg.style_dim; ++d) style_proj(w, d) = style_rng.normal();

    Eigen::MatrixXd style_probs(n, n_style);
    for (int s = 0; s < n; ++s) {
        Eigen::VectorXd dir = styles.row(s).transpose();
        double norm = dir.norm();
        if (norm > 0) dir /= norm;
        Eigen::VectorXd logits = style_proj * dir / cfg.style_temperature;
        Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
        style_probs.row(s) = (p / p.sum()).transpose();
    }

    b.samples_by_speaker.resize(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
        int count = s < cfg.train_speakers ? cfg.samples_per_train_speaker
                                           : cfg.samples_per_eval_speaker;
        auto& out = b.samples_by_speaker[static_cast<std::size_t>(s)];
        out.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            int topic = static_cast<int>(text_rng.uniform_index(static_cast<std::size_t>(cfg.n_topics)));
            ConversationSample sample;
            sample.speaker = s;

            int qlen = cfg.query_len_min +
                       static_cast<int>(text_rng.uniform_index(
                           static_cast<std::size_t>(cfg.query_len_max - cfg.query_len_min + 1)));
            for (int t = 0; t < qlen; ++t) {
                int w = static_cast<int>(text_rng.uniform_index(
                    static_cast<std::size_t>(cfg.topic_words_per_topic)));
                sample.query.tokens.push_back(cfg.first_topic_word() +
                                              topic * cfg.topic_words_per_topic + w);
            }

            for (int a = 0; a < cfg.answer_words_per_topic; ++a)
                sample.response.tokens.push_back(cfg.first_answer_word() +
                                                 topic * cfg.answer_words_per_topic + a);
            int slen = cfg.style_tokens_min +
                       static_cast<int>(text_rng.uniform_index(static_cast<std::size_t>(
                           cfg.style_tokens_max - cfg.style_tokens_min + 1)));
            for (int t = 0; t < slen; ++t)
                sample.response.tokens.push_back(
                    cfg.first_style_word() +
                    detail::sample_categorical(style_probs.row(s).transpose(), text_rng));
            out.push_back(std::move(sample));
        }
    }

    for (int s = 0; s < cfg.train_speakers; ++s) b.train_ids.push_back(s);
    for (int s = cfg.train_speakers; s < cfg.train_speakers + cfg.valid_speakers; ++s)
        b.valid_ids.push_back(s);
    for (int s = cfg.train_speakers + cfg.valid_speakers; s < n; ++s) b.test_ids.push_back(s);

    b.validate();
    b.train_graph = b.full_graph.induced_prefix(cfg.train_speakers);
    b.rebuild_views();
    b.compute_content_hash();
    return b;
}

// Neighbor-vs-random similarity diagnostics over a generated corpus.
struct SynthDiagnostics {
    double neighbor_toksim = 0.0;
    double random_toksim = 0.0;
    double toksim_gap = 0.0;
    int edge_pairs = 0;
    int random_pairs = 0;
};

inline SynthDiagnostics corpus_similarity_diagnostics(const DatasetBundle& b, Rng& rng) {
    std::vector<TokenSeq> response_bags(static_cast<std::size_t>(b.num_speakers()));
    std::vector<TokenSeq> train_responses;
    for (int s = 0; s < b.num_speakers(); ++s)
        for (const auto& sample : b.samples_by_speaker[static_cast<std::size_t>(s)]) {
            auto& bag = response_bags[static_cast<std::size_t>(s)];
            bag.insert(bag.end(), sample.response.tokens.begin(), sample.response.tokens.end());
        }
    for (int s : b.train_ids)
        for (const auto& sample : b.samples_by_speaker[static_cast<std::size_t>(s)])
            train_responses.push_back(sample.response.tokens);

    IdfTable idf = IdfTable::from_documents(train_responses, b.vocab_size);
    auto stop = top_frequency_stopwords(train_responses, b.vocab_size);

    SynthDiagnostics d;
    auto edges = b.full_graph.edges();
    double acc = 0.0;
    for (const auto& [u, v] : edges)
        acc += toksim(response_bags[static_cast<std::size_t>(u)],
                      response_bags[static_cast<std::size_t>(v)], idf, stop);
    d.edge_pairs = static_cast<int>(edges.size());
    d.neighbor_toksim = edges.empty() ? 0.0 : acc / static_cast<double>(edges.size());

    int n = b.num_speakers();
    int wanted = std::max<int>(1, static_cast<int>(edges.size()));
    acc = 0.0;
    int got = 0, guard = 0;
    while (got < wanted && guard++ < 100 * wanted) {
        int u = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n)));
        int v = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n)));
        if (u == v || b.full_graph.has_edge(u, v)) continue;
        acc += toksim(response_bags[static_cast<std::size_t>(u)],
                      response_bags[static_cast<std::size_t>(v)], idf, stop);
        ++got;
    }
    d.random_pairs = got;
    d.random_toksim = got > 0 ? acc / got : 0.0;
    d.toksim_gap = d.neighbor_toksim - d.random_toksim;
    return d;
}

}  // namespace metaconv
