#pragma once

// Undirected speaker social graph. Edges mean "the two speakers follow each
// other". Immutable after construction; all queries are read-only, and
// sampling takes a caller-owned Rng so concurrent samplers use independent
// streams.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "metaconv/common.hpp"

namespace metaconv {

class SocialGraph {
public:
    SocialGraph() = default;

    explicit SocialGraph(int num_speakers) : adjacency_(static_cast<std::size_t>(num_speakers)) {
        if (num_speakers < 0) throw ConfigError("SocialGraph: negative speaker count");
    }

    static SocialGraph from_edges(int num_speakers, const std::vector<std::pair<int, int>>& edges) {
        SocialGraph g(num_speakers);
        for (const auto& [u, v] : edges) g.add_edge(u, v);
        g.sort_adjacency();
        return g;
    }

    int num_speakers() const { return static_cast<int>(adjacency_.size()); }
    std::size_t num_edges() const { return num_edges_; }

    // N_s, sorted ascending. Empty for isolated speakers.
    const std::vector<int>& neighbors(int s) const {
        check_speaker(s);
        return adjacency_[static_cast<std::size_t>(s)];
    }

    int degree(int s) const { return static_cast<int>(neighbors(s).size()); }

    bool has_edge(int u, int v) const {
        check_speaker(u);
        check_speaker(v);
        const auto& n = adjacency_[static_cast<std::size_t>(u)];
        return std::binary_search(n.begin(), n.end(), v);
    }

    // k_ns draws with replacement, uniform over all speakers except s itself.
    // Neighbors of s stay eligible: the structural loss does not exclude them.
    std::vector<int> sample_negatives(int s, int k_ns, Rng& rng) const {
        check_speaker(s);
        if (k_ns < 1) throw ConfigError("sample_negatives: k_ns must be >= 1");
        if (num_speakers() < 2)
            throw DataError("sample_negatives: insufficient population (need >= 2 speakers)");
        std::vector<int> out(static_cast<std::size_t>(k_ns));
        for (auto& o : out) {
            int j = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(num_speakers() - 1)));
            o = j >= s ? j + 1 : j;
        }
        return out;
    }

    // Union of the neighbors' neighbor sets; may contain s itself. Sorted.
    std::vector<int> two_hop_frontier(int s) const {
        check_speaker(s);
        std::set<int> frontier;
        for (int u : neighbors(s))
            for (int w : adjacency_[static_cast<std::size_t>(u)]) frontier.insert(w);
        return std::vector<int>(frontier.begin(), frontier.end());
    }

    // Every edge once, u < v, sorted.
    std::vector<std::pair<int, int>> edges() const {
        std::vector<std::pair<int, int>> es;
        es.reserve(num_edges_);
        for (int u = 0; u < num_speakers(); ++u)
            for (int v : adjacency_[static_cast<std::size_t>(u)])
                if (u < v) es.emplace_back(u, v);
        return es;
    }

    // Edges among a prefix block [0, n) of speakers (the train split).
    SocialGraph induced_prefix(int n) const {
        if (n < 0 || n > num_speakers()) throw ConfigError("induced_prefix: bad size");
        std::vector<std::pair<int, int>> es;
        for (const auto& [u, v] : edges())
            if (u < n && v < n) es.emplace_back(u, v);
        return from_edges(n, es);
    }

    void save_tsv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("cannot open graph file for writing: " + path);
        for (const auto& [u, v] : edges()) out << u << '\t' << v << '\n';
    }

    // One `u<TAB>v` pair per line. Rejects self-loops and re-declared edges.
    static SocialGraph load_tsv(const std::string& path, int num_speakers) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open graph file: " + path);
        SocialGraph g(num_speakers);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream ss(line);
            int u = -1, v = -1;
            if (!(ss >> u >> v))
                throw DataError("graph file " + path + ": malformed line " + std::to_string(lineno));
            g.add_edge(u, v);
        }
        g.sort_adjacency();
        return g;
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        int n = num_speakers();
        h = fnv1a64(&n, sizeof(n), h);
        for (const auto& [u, v] : edges()) {
            h = fnv1a64(&u, sizeof(u), h);
            h = fnv1a64(&v, sizeof(v), h);
        }
        return h;
    }

private:
    void add_edge(int u, int v) {
        check_speaker(u);
        check_speaker(v);
        if (u == v) throw DataError("self-loop rejected: speaker " + std::to_string(u));
        if (u > v) std::swap(u, v);
        if (!edge_set_.insert((static_cast<uint64_t>(u) << 32) | static_cast<uint64_t>(v)).second)
            throw DataError("duplicate edge rejected: " + std::to_string(u) + "-" + std::to_string(v));
        adjacency_[static_cast<std::size_t>(u)].push_back(v);
        adjacency_[static_cast<std::size_t>(v)].push_back(u);
        ++num_edges_;
    }

    void sort_adjacency() {
        for (auto& n : adjacency_) std::sort(n.begin(), n.end());
    }

    void check_speaker(int s) const {
        if (s < 0 || s >= num_speakers())
            throw DataError("invalid speaker id " + std::to_string(s) + " (graph has " +
                            std::to_string(num_speakers()) + " speakers)");
    }

    std::vector<std::vector<int>> adjacency_;
    std::set<uint64_t> edge_set_;
    std::size_t num_edges_ = 0;
};

}  // namespace metaconv
