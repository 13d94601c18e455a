#pragma once

// Automatic response metrics: appropriateness (corpus BLEU-1..4), diversity
// (Dist-1/2), consistency with the speaker's history (TokSim, Grd-F1), and
// the gamma-margin probe for task-embedding quality. All functions are pure
// over immutable inputs.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "metaconv/common.hpp"
#include "metaconv/graph.hpp"

namespace metaconv {

using TokenSeq = std::vector<int>;

namespace detail {

// n <= 4 and token ids < 2^16, so an n-gram packs exactly into a u64.
inline uint64_t pack_ngram(const TokenSeq& toks, std::size_t start, int n) {
    uint64_t key = 1;  // length marker so ("a") and ("a", pad) differ
    for (int j = 0; j < n; ++j) {
        uint64_t t = static_cast<uint64_t>(toks[start + static_cast<std::size_t>(j)]);
        key = (key << 16) | (t & 0xffffULL);
    }
    return key;
}

inline std::unordered_map<uint64_t, int> ngram_counts(const TokenSeq& toks, int n) {
    std::unordered_map<uint64_t, int> counts;
    if (static_cast<int>(toks.size()) >= n)
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
            ++counts[pack_ngram(toks, i, n)];
    return counts;
}

}  // namespace detail

// Corpus-level BLEU-n: geometric mean of modified k-gram precisions for
// k = 1..n times the brevity penalty. Orders above 1 get add-one smoothing;
// order 1 is left raw so fully disjoint corpora score exactly 0.
inline double bleu_n(const std::vector<TokenSeq>& hypotheses,
                     const std::vector<TokenSeq>& references, int n) {
    if (n < 1 || n > 4) throw ConfigError("bleu_n: order must be in 1..4");
    if (hypotheses.empty()) throw ConfigError("bleu_n: empty corpus");
    if (hypotheses.size() != references.size())
        throw DataError("bleu_n: hypothesis/reference count mismatch (" +
                        std::to_string(hypotheses.size()) + " vs " +
                        std::to_string(references.size()) + ")");

    double log_prec_sum = 0.0;
    std::size_t hyp_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        hyp_len += hypotheses[i].size();
        ref_len += references[i].size();
    }
    for (int k = 1; k <= n; ++k) {
        long long matched = 0, total = 0;
        for (std::size_t i = 0; i < hypotheses.size(); ++i) {
            auto hyp_counts = detail::ngram_counts(hypotheses[i], k);
            auto ref_counts = detail::ngram_counts(references[i], k);
            for (const auto& [gram, c] : hyp_counts) {
                auto it = ref_counts.find(gram);
                int clip = it == ref_counts.end() ? 0 : it->second;
                matched += std::min(c, clip);
                total += c;
            }
        }
        double p;
        if (k == 1)
            p = total > 0 ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
        else
            p = static_cast<double>(matched + 1) / static_cast<double>(total + 1);
        if (p <= 0.0) return 0.0;
        log_prec_sum += std::log(p);
    }
    if (hyp_len == 0) return 0.0;
    double bp = hyp_len >= ref_len
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return bp * std::exp(log_prec_sum / n);
}

// Distinct n-grams over the whole corpus divided by total n-grams.
inline double dist_n(const std::vector<TokenSeq>& hypotheses, int n) {
    if (hypotheses.empty()) throw ConfigError("dist_n: metric undefined on an empty corpus");
    std::unordered_set<uint64_t> distinct;
    std::size_t total = 0;
    for (const auto& h : hypotheses) {
        if (static_cast<int>(h.size()) < n) continue;
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= h.size(); ++i) {
            distinct.insert(detail::pack_ngram(h, i, n));
            ++total;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

// Inverse document frequency over a training corpus; tokens never seen get
// the maximum value. Smoothed so every weight stays strictly positive.
struct IdfTable {
    std::vector<double> idf;
    double max_idf = 1.0;

    double at(int token) const {
        if (token < 0) throw DataError("IdfTable: negative token id");
        if (token >= static_cast<int>(idf.size())) return max_idf;
        return idf[static_cast<std::size_t>(token)];
    }

    static IdfTable uniform(int vocab_size) {
        IdfTable t;
        t.idf.assign(static_cast<std::size_t>(vocab_size), 1.0);
        t.max_idf = 1.0;
        return t;
    }

    static IdfTable from_documents(const std::vector<TokenSeq>& docs, int vocab_size) {
        std::vector<int> df(static_cast<std::size_t>(vocab_size), 0);
        for (const auto& d : docs) {
            std::set<int> seen(d.begin(), d.end());
            for (int t : seen)
                if (t >= 0 && t < vocab_size) ++df[static_cast<std::size_t>(t)];
        }
        IdfTable table;
        table.idf.resize(static_cast<std::size_t>(vocab_size));
        double n = static_cast<double>(docs.size());
        for (int t = 0; t < vocab_size; ++t)
            table.idf[static_cast<std::size_t>(t)] =
                std::log((1.0 + n) / (1.0 + df[static_cast<std::size_t>(t)])) + 1.0;
        table.max_idf = std::log(1.0 + n) + 1.0;
        return table;
    }
};

// The synthetic corpora carry no curated stopword list, so use the most
// frequent training tokens: top `fraction` of the vocabulary by count.
inline std::vector<int> top_frequency_stopwords(const std::vector<TokenSeq>& docs, int vocab_size,
                                                double fraction = 0.01) {
    std::vector<long long> counts(static_cast<std::size_t>(vocab_size), 0);
    for (const auto& d : docs)
        for (int t : d)
            if (t >= 0 && t < vocab_size) ++counts[static_cast<std::size_t>(t)];
    std::vector<int> order(static_cast<std::size_t>(vocab_size));
    for (int t = 0; t < vocab_size; ++t) order[static_cast<std::size_t>(t)] = t;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)];
    });
    auto n_stop = static_cast<std::size_t>(std::ceil(fraction * vocab_size));
    std::vector<int> stop;
    for (std::size_t i = 0; i < n_stop && i < order.size(); ++i)
        if (counts[static_cast<std::size_t>(order[i])] > 0) stop.push_back(order[i]);
    return stop;
}

namespace detail {

inline std::unordered_map<int, int> filtered_counts(const TokenSeq& toks,
                                                    const std::unordered_set<int>& stop) {
    std::unordered_map<int, int> counts;
    for (int t : toks)
        if (!stop.count(t)) ++counts[t];
    return counts;
}

}  // namespace detail

// TF-IDF weighted cosine similarity between the response's token-count
// vector and the history's, both after stopword removal. Degenerate inputs
// (either side empty after filtering) score 0.
inline double toksim(const TokenSeq& response, const TokenSeq& history, const IdfTable& idf,
                     const std::vector<int>& stopwords) {
    std::unordered_set<int> stop(stopwords.begin(), stopwords.end());
    auto r = detail::filtered_counts(response, stop);
    auto h = detail::filtered_counts(history, stop);
    if (r.empty() || h.empty()) return 0.0;
    double dot = 0.0, nr = 0.0, nh = 0.0;
    for (const auto& [t, c] : r) {
        double w = c * idf.at(t);
        nr += w * w;
        auto it = h.find(t);
        if (it != h.end()) dot += w * (it->second * idf.at(t));
    }
    for (const auto& [t, c] : h) {
        double w = c * idf.at(t);
        nh += w * w;
    }
    if (nr <= 0.0 || nh <= 0.0) return 0.0;
    return dot / (std::sqrt(nr) * std::sqrt(nh));
}

// Harmonic mean of precision and recall over distinct post-filter tokens.
inline double grd_f1(const TokenSeq& response, const TokenSeq& history,
                     const std::vector<int>& stopwords) {
    std::unordered_set<int> stop(stopwords.begin(), stopwords.end());
    std::set<int> r, h;
    for (int t : response)
        if (!stop.count(t)) r.insert(t);
    for (int t : history)
        if (!stop.count(t)) h.insert(t);
    if (r.empty() && h.empty()) return 0.0;
    std::size_t inter = 0;
    for (int t : r) inter += h.count(t);
    double p = r.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(r.size());
    double rec = h.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(h.size());
    if (p + rec <= 0.0) return 0.0;
    return 2.0 * p * rec / (p + rec);
}

struct EvalReport {
    double bleu[4] = {0, 0, 0, 0};
    double dist1 = 0.0, dist2 = 0.0;
    double toksim = 0.0, grd_f1 = 0.0;
    std::size_t sample_count = 0;
};

struct GammaProbe {
    std::vector<double> margins;
    std::vector<double> ratios;  // gamma_c per margin, non-increasing in c
    int speaker_count = 0;       // probed speakers actually scored
    int skipped = 0;             // neighbor-less speakers excluded from |s|
};

inline double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double na = a.norm(), nb = b.norm();
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

// For each probed speaker: one seeded neighbor pick s_n and one random
// non-neighbor s_r, both restricted to speakers with a valid comparator
// embedding; gamma_c = #(sim(s, s_n) > sim(s, s_r) + c) / |s|.
inline GammaProbe gamma_probe(const std::vector<std::pair<int, Eigen::VectorXd>>& probe_embeddings,
                              const Eigen::MatrixXd& comparator_rows,
                              const std::vector<uint8_t>& comparator_valid, const SocialGraph& g,
                              const std::vector<double>& margins, Rng& rng) {
    if (comparator_rows.rows() != static_cast<Eigen::Index>(comparator_valid.size()))
        throw ConfigError("gamma_probe: comparator mask size mismatch");
    GammaProbe probe;
    probe.margins = margins;
    probe.ratios.assign(margins.size(), 0.0);
    std::vector<int> wins(margins.size(), 0);

    std::vector<int> population;
    for (int u = 0; u < static_cast<int>(comparator_valid.size()); ++u)
        if (comparator_valid[static_cast<std::size_t>(u)]) population.push_back(u);

    for (const auto& [s, h] : probe_embeddings) {
        std::vector<int> valid_neighbors;
        for (int u : g.neighbors(s))
            if (comparator_valid[static_cast<std::size_t>(u)]) valid_neighbors.push_back(u);
        if (valid_neighbors.empty()) {
            ++probe.skipped;
            continue;
        }
        std::vector<int> non_neighbors;
        for (int u : population)
            if (u != s && !g.has_edge(s, u)) non_neighbors.push_back(u);
        if (non_neighbors.empty()) {
            ++probe.skipped;
            continue;
        }
        int s_n = valid_neighbors[rng.uniform_index(valid_neighbors.size())];
        int s_r = non_neighbors[rng.uniform_index(non_neighbors.size())];
        double sim_n = cosine_similarity(h, comparator_rows.row(s_n).transpose());
        double sim_r = cosine_similarity(h, comparator_rows.row(s_r).transpose());
        for (std::size_t m = 0; m < margins.size(); ++m)
            if (sim_n > sim_r + margins[m]) ++wins[m];
        ++probe.speaker_count;
    }
    if (probe.speaker_count > 0)
        for (std::size_t m = 0; m < margins.size(); ++m)
            probe.ratios[m] = static_cast<double>(wins[m]) / probe.speaker_count;
    // Monotone by construction; keep the guard hot in case margins arrive unsorted.
    for (std::size_t m = 1; m < margins.size(); ++m)
        if (margins[m] >= margins[m - 1] && probe.ratios[m] > probe.ratios[m - 1] + 1e-12)
            throw NumericError("gamma_probe: ratios not non-increasing in the margin");
    return probe;
}

}  // namespace metaconv
