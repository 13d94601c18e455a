#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "metaconv/data.hpp"
#include "metaconv/synth.hpp"

using namespace metaconv;

namespace {

// A small hand-built bundle: 4 train speakers (prefix), 2 test speakers.
DatasetBundle tiny_bundle(int samples_per_speaker = 6, int k = 2) {
    DatasetBundle b;
    b.vocab_size = 20;
    b.k_shot = k;
    b.max_len = 10;
    int n = 6;
    b.samples_by_speaker.resize(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s)
        for (int i = 0; i < samples_per_speaker; ++i) {
            ConversationSample cs;
            cs.speaker = s;
            cs.query.tokens = {3, 4, static_cast<int>(5 + (i % 3))};
            cs.response.tokens = {static_cast<int>(8 + s), 9};
            b.samples_by_speaker[static_cast<std::size_t>(s)].push_back(cs);
        }
    b.full_graph = SocialGraph::from_edges(n, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 5}});
    b.train_ids = {0, 1, 2, 3};
    b.valid_ids = {};
    b.test_ids = {4, 5};
    b.validate();
    b.train_graph = b.full_graph.induced_prefix(4);
    b.rebuild_views();
    b.compute_content_hash();
    return b;
}

}  // namespace

TEST_CASE("build_episode: exact 2k pool uses every sample") {
    auto b = tiny_bundle(4, 2);
    Rng rng(1);
    auto ep = build_episode(b.train, 0, 2, rng);
    REQUIRE(ep.support.size() == 2);
    REQUIRE(ep.query.size() == 2);
    std::set<std::size_t> used(ep.support_idx.begin(), ep.support_idx.end());
    used.insert(ep.query_idx.begin(), ep.query_idx.end());
    CHECK(used == std::set<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("build_episode: k=1 with two samples realizes both partitions") {
    auto b = tiny_bundle(2, 1);
    std::set<std::size_t> support_firsts;
    for (uint64_t seed = 0; seed < 32; ++seed) {
        Rng rng(seed);
        auto ep = build_episode(b.train, 1, 1, rng);
        REQUIRE(ep.support_idx.size() == 1);
        REQUIRE(ep.query_idx.size() == 1);
        CHECK(ep.support_idx[0] != ep.query_idx[0]);
        support_firsts.insert(ep.support_idx[0]);
    }
    CHECK(support_firsts == std::set<std::size_t>{0, 1});
}

TEST_CASE("build_episode: support and query never share a sample identity") {
    auto b = tiny_bundle(9, 3);
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        auto ep = build_episode(b.train, 2, 3, rng);
        std::set<std::size_t> sup(ep.support_idx.begin(), ep.support_idx.end());
        REQUIRE(sup.size() == 3);
        for (auto qi : ep.query_idx) CHECK(!sup.count(qi));
    }
}

TEST_CASE("build_episode: insufficient samples names the speaker") {
    auto b = tiny_bundle(5, 3);
    Rng rng(0);
    try {
        build_episode(b.train, 3, 3, rng);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("speaker 3") != std::string::npos);
    }
}

TEST_CASE("build_episode: golden seeded partition (k=10, 30 samples)") {
    auto b = [&] {
        DatasetBundle bb;
        bb.vocab_size = 8;
        bb.k_shot = 10;
        bb.max_len = 4;
        bb.samples_by_speaker.resize(1);
        for (int i = 0; i < 30; ++i) {
            ConversationSample cs;
            cs.speaker = 0;
            cs.query.tokens = {3};
            cs.response.tokens = {4};
            bb.samples_by_speaker[0].push_back(cs);
        }
        bb.full_graph = SocialGraph(1);
        bb.train_ids = {0};
        bb.validate();
        bb.train_graph = bb.full_graph.induced_prefix(1);
        bb.rebuild_views();
        return bb;
    }();
    Rng rng(3);
    auto ep = build_episode(b.train, 0, 10, rng);
    // frozen from one seeded draw (Rng seed 3)
    CHECK(ep.support_idx == std::vector<std::size_t>{4, 26, 10, 6, 17, 29, 13, 25, 18, 21});
    CHECK(ep.query_idx == std::vector<std::size_t>{20, 14, 19, 8, 23, 0, 7, 22, 5, 1});
}

TEST_CASE("speaker_batch: full-split batch is a permutation; seeded draws repeat") {
    auto b = tiny_bundle();
    Rng r1(9), r2(9);
    auto all = speaker_batch(b.train, 4, r1);
    std::set<int> ids(all.begin(), all.end());
    CHECK(ids == std::set<int>{0, 1, 2, 3});
    CHECK(all == speaker_batch(b.train, 4, r2));
    Rng r3(0);
    CHECK_THROWS_AS(speaker_batch(b.train, 5, r3), ConfigError);
}

TEST_CASE("speaker_batch: golden seeded draw (100 speakers, batch 8)") {
    DatasetBundle b;
    b.vocab_size = 8;
    b.k_shot = 1;
    b.max_len = 4;
    b.samples_by_speaker.resize(100);
    for (int s = 0; s < 100; ++s) {
        ConversationSample cs;
        cs.speaker = s;
        cs.query.tokens = {3};
        cs.response.tokens = {4};
        b.samples_by_speaker[static_cast<std::size_t>(s)] = {cs, cs};
        b.train_ids.push_back(s);
    }
    b.full_graph = SocialGraph(100);
    b.validate();
    b.train_graph = b.full_graph.induced_prefix(100);
    b.rebuild_views();
    Rng rng(1);
    auto batch = speaker_batch(b.train, 8, rng);
    // frozen from one seeded draw (Rng seed 1)
    CHECK(batch == std::vector<int>{74, 71, 92, 94, 80, 88, 31, 63});
}

TEST_CASE("dataset validation: split overlap and non-prefix train ids rejected") {
    auto b = tiny_bundle();
    b.test_ids.push_back(0);
    CHECK_THROWS_AS(b.validate(), DataError);

    auto c = tiny_bundle();
    c.train_ids = {0, 1, 2, 4};
    c.test_ids = {3, 5};
    CHECK_THROWS_AS(c.validate(), DataError);
}

TEST_CASE("dataset directory round-trip preserves content") {
    SynthConfig cfg;
    cfg.train_speakers = 30;
    cfg.valid_speakers = 4;
    cfg.test_speakers = 6;
    cfg.samples_per_train_speaker = 8;
    cfg.samples_per_eval_speaker = 8;
    cfg.k_shot = 3;
    auto b = generate_synthetic(cfg, 77);

    auto dir = (std::filesystem::temp_directory_path() / "metaconv_data_rt").string();
    std::filesystem::remove_all(dir);
    save_dataset_dir(b, dir);
    auto loaded = load_dataset_dir(dir);

    CHECK(loaded.content_hash == b.content_hash);
    CHECK(loaded.vocab_size == b.vocab_size);
    CHECK(loaded.k_shot == b.k_shot);
    CHECK(loaded.train_ids == b.train_ids);
    CHECK(loaded.test_ids == b.test_ids);
    CHECK(loaded.full_graph.edges() == b.full_graph.edges());
    CHECK(loaded.train_graph.num_speakers() == 30);
    REQUIRE(loaded.samples_by_speaker.size() == b.samples_by_speaker.size());
    for (std::size_t s = 0; s < loaded.samples_by_speaker.size(); ++s) {
        REQUIRE(loaded.samples_by_speaker[s].size() == b.samples_by_speaker[s].size());
        for (std::size_t i = 0; i < loaded.samples_by_speaker[s].size(); ++i) {
            CHECK(loaded.samples_by_speaker[s][i].query.tokens ==
                  b.samples_by_speaker[s][i].query.tokens);
            CHECK(loaded.samples_by_speaker[s][i].response.tokens ==
                  b.samples_by_speaker[s][i].response.tokens);
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("utterance validation catches bad tokens and lengths") {
    Utterance u;
    CHECK_THROWS_AS(u.validate(10, 5, "query"), DataError);
    u.tokens = {1, 2, 11};
    CHECK_THROWS_AS(u.validate(10, 5, "query"), DataError);
    u.tokens = {1, 2, 3, 4, 5, 6};
    CHECK_THROWS_AS(u.validate(10, 5, "query"), DataError);
    u.tokens = {1, 2, 3};
    CHECK_NOTHROW(u.validate(10, 5, "query"));
}
