#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <queue>
#include <set>

#include "metaconv/graph.hpp"

using namespace metaconv;

namespace {

SocialGraph triangle() { return SocialGraph::from_edges(3, {{0, 1}, {1, 2}, {2, 0}}); }

std::string temp_path(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    return p.string();
}

}  // namespace

TEST_CASE("neighbors: hand-checked shapes") {
    CHECK(triangle().neighbors(1) == std::vector<int>{0, 2});
    CHECK(SocialGraph::from_edges(2, {{0, 1}}).neighbors(0) == std::vector<int>{1});
    // star: center 0, leaves 1..4; the only edge at leaf 3 goes to the center
    auto star = SocialGraph::from_edges(5, {{0, 1}, {0, 2}, {0, 3}, {0, 4}});
    CHECK(star.neighbors(3) == std::vector<int>{0});
    CHECK(star.neighbors(0) == std::vector<int>{1, 2, 3, 4});
    CHECK(SocialGraph(4).neighbors(2).empty());
}

TEST_CASE("neighbors: invalid speaker rejected") {
    CHECK_THROWS_AS(triangle().neighbors(3), DataError);
    CHECK_THROWS_AS(triangle().neighbors(-1), DataError);
}

TEST_CASE("symmetry holds exhaustively on a random graph") {
    Rng rng(11);
    std::vector<std::pair<int, int>> edges;
    std::set<std::pair<int, int>> seen;
    int n = 300;
    while (edges.size() < 9000) {
        int u = static_cast<int>(rng.uniform_index(n));
        int v = static_cast<int>(rng.uniform_index(n));
        if (u == v) continue;
        auto key = std::minmax(u, v);
        if (!seen.insert(key).second) continue;
        edges.emplace_back(key.first, key.second);
    }
    auto g = SocialGraph::from_edges(n, edges);
    for (int s = 0; s < n; ++s)
        for (int u : g.neighbors(s)) {
            const auto& back = g.neighbors(u);
            REQUIRE(std::binary_search(back.begin(), back.end(), s));
        }
    CHECK(g.num_edges() == 9000);
}

TEST_CASE("sample_negatives: forced candidate and exclusion") {
    auto pair_graph = SocialGraph::from_edges(2, {{0, 1}});
    Rng rng(0);
    CHECK(pair_graph.sample_negatives(0, 3, rng) == std::vector<int>{1, 1, 1});

    auto g = SocialGraph::from_edges(8, {{0, 1}, {2, 3}});
    Rng rng2(99);
    for (int trial = 0; trial < 200; ++trial) {
        for (int s = 0; s < 8; ++s) {
            auto negs = g.sample_negatives(s, 4, rng2);
            REQUIRE(negs.size() == 4);
            for (int j : negs) {
                CHECK(j != s);
                CHECK(j >= 0);
                CHECK(j < 8);
            }
        }
    }
}

TEST_CASE("sample_negatives: seeded draw is reproducible") {
    auto g = SocialGraph::from_edges(5, {{0, 1}, {1, 2}, {3, 4}});
    Rng a(7), b(7);
    auto first = g.sample_negatives(2, 2, a);
    CHECK(first == g.sample_negatives(2, 2, b));
    // golden value frozen from one seeded run (Rng seed 7, s=2, k_ns=2)
    CHECK(first == std::vector<int>{0, 0});
}

TEST_CASE("sample_negatives: single-speaker population rejected") {
    SocialGraph g(1);
    Rng rng(1);
    CHECK_THROWS_AS(g.sample_negatives(0, 1, rng), DataError);
}

TEST_CASE("sample_negatives: uniform over candidates within 3 sigma") {
    SocialGraph g(10);
    Rng rng(123);
    const int draws = 100000;
    std::vector<int> counts(10, 0);
    for (int i = 0; i < draws; i += 5)
        for (int j : g.sample_negatives(4, 5, rng)) ++counts[static_cast<std::size_t>(j)];
    CHECK(counts[4] == 0);
    double p = 1.0 / 9.0;
    double mean = draws * p;
    double sigma = std::sqrt(draws * p * (1 - p));
    for (int s = 0; s < 10; ++s) {
        if (s == 4) continue;
        CHECK(std::abs(counts[static_cast<std::size_t>(s)] - mean) <= 3.0 * sigma);
    }
}

TEST_CASE("two_hop_frontier: hand walks") {
    auto path = SocialGraph::from_edges(3, {{0, 1}, {1, 2}});
    CHECK(path.two_hop_frontier(0) == std::vector<int>{0, 2});
    CHECK(SocialGraph(3).two_hop_frontier(1).empty());
    CHECK(triangle().two_hop_frontier(0) == std::vector<int>{0, 1, 2});
}

TEST_CASE("two_hop_frontier: brute-force oracle on random graphs") {
    Rng rng(5);
    for (int round = 0; round < 5; ++round) {
        int n = 50 + static_cast<int>(rng.uniform_index(150));
        std::set<std::pair<int, int>> seen;
        std::vector<std::pair<int, int>> edges;
        int m = 3 * n;
        while (static_cast<int>(edges.size()) < m) {
            int u = static_cast<int>(rng.uniform_index(n));
            int v = static_cast<int>(rng.uniform_index(n));
            if (u == v) continue;
            auto key = std::minmax(u, v);
            if (!seen.insert(key).second) continue;
            edges.emplace_back(key.first, key.second);
        }
        auto g = SocialGraph::from_edges(n, edges);
        for (int s = 0; s < n; ++s) {
            // oracle: every node one edge away from a neighbor of s
            std::set<int> expect;
            for (const auto& [u, v] : edges) {
                bool u_adj = g.has_edge(s, u), v_adj = g.has_edge(s, v);
                if (u_adj) expect.insert(v);
                if (v_adj) expect.insert(u);
            }
            auto got = g.two_hop_frontier(s);
            REQUIRE(got == std::vector<int>(expect.begin(), expect.end()));
            // and it stays inside the BFS <=2-hop ball
            std::vector<int> dist(static_cast<std::size_t>(n), -1);
            std::queue<int> q;
            dist[static_cast<std::size_t>(s)] = 0;
            q.push(s);
            while (!q.empty()) {
                int u = q.front();
                q.pop();
                if (dist[static_cast<std::size_t>(u)] >= 2) continue;
                for (int w : g.neighbors(u))
                    if (dist[static_cast<std::size_t>(w)] < 0) {
                        dist[static_cast<std::size_t>(w)] = dist[static_cast<std::size_t>(u)] + 1;
                        q.push(w);
                    }
            }
            for (int w : got) REQUIRE(dist[static_cast<std::size_t>(w)] >= 0);
        }
    }
}

TEST_CASE("edge-list file round-trip") {
    auto g = SocialGraph::from_edges(6, {{0, 5}, {1, 2}, {2, 4}});
    auto path = temp_path("metaconv_graph_test.tsv");
    g.save_tsv(path);
    auto loaded = SocialGraph::load_tsv(path, 6);
    CHECK(loaded.edges() == g.edges());
    CHECK(loaded.content_hash() == g.content_hash());
    std::remove(path.c_str());
}

TEST_CASE("edge-list loader rejects self-loops and duplicates") {
    auto path = temp_path("metaconv_graph_bad.tsv");
    {
        std::ofstream out(path);
        out << "0\t1\n1\t0\n";
    }
    CHECK_THROWS_AS(SocialGraph::load_tsv(path, 3), DataError);
    {
        std::ofstream out(path);
        out << "2\t2\n";
    }
    CHECK_THROWS_AS(SocialGraph::load_tsv(path, 3), DataError);
    {
        std::ofstream out(path);
        out << "0\t7\n";
    }
    CHECK_THROWS_AS(SocialGraph::load_tsv(path, 3), DataError);
    std::remove(path.c_str());
}
