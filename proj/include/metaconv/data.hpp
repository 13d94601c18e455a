#pragma once

// Dataset model: speakers, conversation pairs, splits and episodes, plus the
// on-disk directory layout (samples.jsonl / graph.tsv / splits.json /
// meta.json). Speaker ids are dense in [0, n) across the whole dataset with
// the train split occupying the prefix block, so the train graph is the
// induced prefix subgraph and negative sampling at train time only ever sees
// train speakers.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaconv/common.hpp"
#include "metaconv/graph.hpp"

namespace metaconv {

using json = nlohmann::json;

constexpr int kPadToken = 0;
constexpr int kBosToken = 1;
constexpr int kEosToken = 2;
constexpr int kNumSpecialTokens = 3;

struct Utterance {
    std::vector<int> tokens;

    void validate(int vocab_size, int max_len, const char* what) const {
        if (tokens.empty()) throw DataError(std::string(what) + ": empty utterance");
        if (static_cast<int>(tokens.size()) > max_len)
            throw DataError(std::string(what) + ": utterance longer than max_len " +
                            std::to_string(max_len));
        for (int t : tokens)
            if (t < 0 || t >= vocab_size)
                throw DataError(std::string(what) + ": token id " + std::to_string(t) +
                                " outside vocabulary of size " + std::to_string(vocab_size));
    }
};

struct ConversationSample {
    int speaker = -1;
    Utterance query;
    Utterance response;
};

struct Episode {
    int speaker = -1;
    std::vector<ConversationSample> support;
    std::vector<ConversationSample> query;
    // positional identities within the speaker's sample list, for
    // disjointness checks
    std::vector<std::size_t> support_idx;
    std::vector<std::size_t> query_idx;
};

struct Dataset {
    std::string split;                 // train / valid / test
    std::vector<int> speakers;         // ids belonging to this split, sorted
    const SocialGraph* graph = nullptr;
    int vocab_size = 0;
    int k_shot = 0;
    int max_len = 0;

    // indexed by global speaker id; empty for speakers of other splits
    const std::vector<std::vector<ConversationSample>>* samples_by_speaker = nullptr;

    const std::vector<ConversationSample>& samples(int s) const {
        if (s < 0 || s >= static_cast<int>(samples_by_speaker->size()))
            throw DataError("unknown speaker id " + std::to_string(s));
        return (*samples_by_speaker)[static_cast<std::size_t>(s)];
    }

    bool contains_speaker(int s) const {
        return std::binary_search(speakers.begin(), speakers.end(), s);
    }
};

// Owns the storage all three split views point into.
struct DatasetBundle {
    std::vector<std::vector<ConversationSample>> samples_by_speaker;
    SocialGraph full_graph;   // all speakers
    SocialGraph train_graph;  // induced on the train prefix block
    std::vector<int> train_ids, valid_ids, test_ids;
    int vocab_size = 0;
    int k_shot = 10;
    int max_len = 80;
    uint64_t seed = 0;
    std::string config_hash;  // producing config, hex
    std::string content_hash; // corpus content, hex

    Dataset train, valid, test;

    int num_speakers() const { return static_cast<int>(samples_by_speaker.size()); }

    void rebuild_views() {
        auto mk = [&](const char* name, std::vector<int>& ids, const SocialGraph& g) {
            Dataset d;
            d.split = name;
            std::sort(ids.begin(), ids.end());
            d.speakers = ids;
            d.graph = &g;
            d.vocab_size = vocab_size;
            d.k_shot = k_shot;
            d.max_len = max_len;
            d.samples_by_speaker = &samples_by_speaker;
            return d;
        };
        train = mk("train", train_ids, train_graph);
        valid = mk("valid", valid_ids, full_graph);
        test = mk("test", test_ids, full_graph);
    }

    void validate() const {
        std::set<int> tr(train_ids.begin(), train_ids.end());
        for (int s : valid_ids)
            if (tr.count(s)) throw DataError("split overlap: speaker " + std::to_string(s) +
                                             " is in both train and valid");
        for (int s : test_ids)
            if (tr.count(s)) throw DataError("split overlap: speaker " + std::to_string(s) +
                                             " is in both train and test");
        if (!train_ids.empty()) {
            int max_train = *std::max_element(train_ids.begin(), train_ids.end());
            if (static_cast<int>(train_ids.size()) != max_train + 1)
                throw DataError("train split must occupy the dense id prefix [0, n_train)");
        }
        std::size_t n = samples_by_speaker.size();
        if (static_cast<std::size_t>(full_graph.num_speakers()) != n)
            throw DataError("graph speaker count does not match sample table");
        for (std::size_t s = 0; s < n; ++s)
            for (const auto& sample : samples_by_speaker[s]) {
                if (sample.speaker != static_cast<int>(s))
                    throw DataError("sample attributed to speaker " +
                                    std::to_string(sample.speaker) + " stored under " +
                                    std::to_string(s));
                sample.query.validate(vocab_size, max_len, "query");
                sample.response.validate(vocab_size, max_len, "response");
            }
    }

    void compute_content_hash() {
        uint64_t h = 0xcbf29ce484222325ULL;
        h = fnv1a64(&vocab_size, sizeof(vocab_size), h);
        h = fnv1a64(&k_shot, sizeof(k_shot), h);
        h = fnv1a64(&max_len, sizeof(max_len), h);
        uint64_t gh = full_graph.content_hash();
        h = fnv1a64(&gh, sizeof(gh), h);
        auto mix_ids = [&h](const std::vector<int>& ids) {
            for (int s : ids) h = fnv1a64(&s, sizeof(s), h);
        };
        mix_ids(train_ids);
        mix_ids(valid_ids);
        mix_ids(test_ids);
        for (const auto& per_speaker : samples_by_speaker)
            for (const auto& sample : per_speaker) {
                h = fnv1a64(&sample.speaker, sizeof(sample.speaker), h);
                for (int t : sample.query.tokens) h = fnv1a64(&t, sizeof(t), h);
                int sep = -1;
                h = fnv1a64(&sep, sizeof(sep), h);
                for (int t : sample.response.tokens) h = fnv1a64(&t, sizeof(t), h);
                sep = -2;
                h = fnv1a64(&sep, sizeof(sep), h);
            }
        content_hash = hash_hex(h);
    }
};

// 2k distinct samples of s, split into support and query. Deterministic
// under the caller's rng stream.
inline Episode build_episode(const Dataset& d, int s, int k, Rng& rng) {
    if (!d.contains_speaker(s))
        throw DataError("build_episode: speaker " + std::to_string(s) + " not in split '" +
                        d.split + "'");
    const auto& pool = d.samples(s);
    if (static_cast<int>(pool.size()) < 2 * k)
        throw DataError("build_episode: speaker " + std::to_string(s) + " has " +
                        std::to_string(pool.size()) + " samples, needs " + std::to_string(2 * k));
    auto picks = rng.sample_distinct(pool.size(), static_cast<std::size_t>(2 * k));
    Episode ep;
    ep.speaker = s;
    for (int i = 0; i < k; ++i) {
        ep.support.push_back(pool[picks[static_cast<std::size_t>(i)]]);
        ep.support_idx.push_back(picks[static_cast<std::size_t>(i)]);
    }
    for (int i = k; i < 2 * k; ++i) {
        ep.query.push_back(pool[picks[static_cast<std::size_t>(i)]]);
        ep.query_idx.push_back(picks[static_cast<std::size_t>(i)]);
    }
    return ep;
}

// Uniform sample of distinct speakers from the split.
inline std::vector<int> speaker_batch(const Dataset& d, int batch_size, Rng& rng) {
    if (batch_size < 1 || batch_size > static_cast<int>(d.speakers.size()))
        throw ConfigError("speaker_batch: batch size " + std::to_string(batch_size) +
                          " exceeds split population " + std::to_string(d.speakers.size()));
    auto picks = rng.sample_distinct(d.speakers.size(), static_cast<std::size_t>(batch_size));
    std::vector<int> batch;
    batch.reserve(picks.size());
    for (auto i : picks) batch.push_back(d.speakers[i]);
    return batch;
}

// ---------------------------------------------------------------------------
// Directory layout

inline void save_dataset_dir(const DatasetBundle& b, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::ofstream samples(fs::path(dir) / "samples.jsonl");
    if (!samples) throw DataError("cannot write " + dir + "/samples.jsonl");
    for (const auto& per_speaker : b.samples_by_speaker)
        for (const auto& s : per_speaker) {
            json rec{{"speaker", s.speaker},
                     {"query", s.query.tokens},
                     {"response", s.response.tokens}};
            samples << rec.dump() << '\n';
        }

    b.full_graph.save_tsv((fs::path(dir) / "graph.tsv").string());

    json splits{{"train", b.train_ids}, {"valid", b.valid_ids}, {"test", b.test_ids}};
    std::ofstream(fs::path(dir) / "splits.json") << splits.dump(2) << '\n';

    json meta{{"vocab_size", b.vocab_size},
              {"k", b.k_shot},
              {"max_len", b.max_len},
              {"num_speakers", b.num_speakers()},
              {"seed", b.seed},
              {"config_hash", b.config_hash}};
    std::ofstream(fs::path(dir) / "meta.json") << meta.dump(2) << '\n';
}

inline DatasetBundle load_dataset_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    auto read_json = [&](const char* name) {
        std::ifstream in(fs::path(dir) / name);
        if (!in) throw DataError("cannot open " + dir + "/" + name);
        json j;
        in >> j;
        return j;
    };
    json meta = read_json("meta.json");
    json splits = read_json("splits.json");

    DatasetBundle b;
    b.vocab_size = meta.at("vocab_size").get<int>();
    b.k_shot = meta.at("k").get<int>();
    b.max_len = meta.at("max_len").get<int>();
    b.seed = meta.value("seed", uint64_t{0});
    b.config_hash = meta.value("config_hash", std::string{});
    int num_speakers = meta.at("num_speakers").get<int>();

    b.train_ids = splits.at("train").get<std::vector<int>>();
    b.valid_ids = splits.at("valid").get<std::vector<int>>();
    b.test_ids = splits.at("test").get<std::vector<int>>();

    b.samples_by_speaker.resize(static_cast<std::size_t>(num_speakers));
    std::ifstream samples(fs::path(dir) / "samples.jsonl");
    if (!samples) throw DataError("cannot open " + dir + "/samples.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(samples, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = json::parse(line);
        ConversationSample s;
        s.speaker = rec.at("speaker").get<int>();
        s.query.tokens = rec.at("query").get<std::vector<int>>();
        s.response.tokens = rec.at("response").get<std::vector<int>>();
        if (s.speaker < 0 || s.speaker >= num_speakers)
            throw DataError("samples.jsonl line " + std::to_string(lineno) +
                            ": speaker id out of range");
        b.samples_by_speaker[static_cast<std::size_t>(s.speaker)].push_back(std::move(s));
    }

    b.full_graph = SocialGraph::load_tsv((fs::path(dir) / "graph.tsv").string(), num_speakers);
    b.validate();
    b.train_graph = b.full_graph.induced_prefix(static_cast<int>(b.train_ids.size()));
    b.rebuild_views();
    b.compute_content_hash();
    return b;
}

}  // namespace metaconv
