#pragma once

// Experiment orchestration: dataset generation, training, test-time
// adaptation + generation, metric aggregation, the gamma probe and the
// ablation matrix. Every artifact embeds the producing config hash and
// seed, and evaluation refuses checkpoints whose dataset hash does not
// match the data it is pointed at.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaconv/checkpoint.hpp"
#include "metaconv/common.hpp"
#include "metaconv/data.hpp"
#include "metaconv/meta.hpp"
#include "metaconv/metrics.hpp"
#include "metaconv/synth.hpp"

namespace metaconv {

// How newcomer rows behave during evaluation: with "train-only", every test
// speaker aggregates trained neighbor rows only; "accumulate-newcomers"
// additionally installs each fitted test row into the local working table so
// later newcomers can aggregate earlier ones. The report records the policy.
enum class NewcomerPolicy { train_only, accumulate_newcomers };

inline const char* newcomer_policy_name(NewcomerPolicy p) {
    return p == NewcomerPolicy::train_only ? "train-only" : "accumulate-newcomers";
}

inline NewcomerPolicy newcomer_policy_from_name(const std::string& s) {
    if (s == "train-only") return NewcomerPolicy::train_only;
    if (s == "accumulate-newcomers") return NewcomerPolicy::accumulate_newcomers;
    throw ConfigError("unknown newcomer policy '" + s + "'");
}

struct RunConfig {
    SynthConfig synth;
    std::string dataset_dir;
    ModelConfig model;
    MetaConfig meta;
    long train_steps = 240;
    uint64_t seed = 1;
    std::string out_dir = "runs/out";
    int checkpoint_every = 0;  // 0: final checkpoint only
    NewcomerPolicy newcomer_policy = NewcomerPolicy::train_only;
    std::vector<double> probe_margins{0.0, 0.1, 0.2};

    void validate() const {
        model.validate();
        meta.validate();
        if (train_steps < 1) throw ConfigError("run: train_steps must be positive");
    }
};

inline json run_config_to_json(const RunConfig& c) {
    return json{{"synth", synth_config_to_json(c.synth)},
                {"dataset_dir", c.dataset_dir},
                {"model", model_config_to_json(c.model)},
                {"meta", meta_config_to_json(c.meta)},
                {"train_steps", c.train_steps},
                {"seed", c.seed},
                {"out_dir", c.out_dir},
                {"checkpoint_every", c.checkpoint_every},
                {"newcomer_policy", newcomer_policy_name(c.newcomer_policy)},
                {"probe_margins", c.probe_margins}};
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"));
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("meta")) c.meta = meta_config_from_json(j.at("meta"));
    c.train_steps = j.value("train_steps", c.train_steps);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.newcomer_policy =
        newcomer_policy_from_name(j.value("newcomer_policy", std::string("train-only")));
    if (j.contains("probe_margins"))
        c.probe_margins = j.at("probe_margins").get<std::vector<double>>();
    return c;
}

// Hash of the canonical config serialization. out_dir and dataset_dir are
// paths, not semantics, so they stay out of the hash.
inline std::string run_config_hash(const RunConfig& c) {
    json j = run_config_to_json(c);
    j.erase("out_dir");
    j.erase("dataset_dir");
    return hash_hex(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataResult {
    std::string dir;
    std::string dataset_hash;
    SynthDiagnostics diagnostics;
};

inline GenDataResult cmd_gen_data(const SynthConfig& cfg, uint64_t seed,
                                  const std::string& out_dir) {
    auto bundle = generate_synthetic(cfg, seed);
    save_dataset_dir(bundle, out_dir);
    Rng diag_rng(derive_seed(seed, {91}));
    GenDataResult res;
    res.dir = out_dir;
    res.dataset_hash = bundle.content_hash;
    res.diagnostics = corpus_similarity_diagnostics(bundle, diag_rng);
    return res;
}

// ---------------------------------------------------------------------------
// train

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    long steps = 0;
    double first_window_mean = 0.0;  // mean query loss over the first 50 steps
    double last_window_mean = 0.0;   // and over the last 50
    double wall_s = 0.0;
    std::string config_hash;
    std::string dataset_hash;
};

inline TrainResult cmd_train(RunConfig cfg) {
    namespace fs = std::filesystem;
    auto bundle = load_dataset_dir(cfg.dataset_dir);
    cfg.model.vocab_size = bundle.vocab_size;
    cfg.model.max_len = bundle.max_len;
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    TrainResult res;
    res.config_hash = run_config_hash(cfg);
    res.dataset_hash = bundle.content_hash;
    res.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    res.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
    std::ofstream(fs::path(cfg.out_dir) / "config.json")
        << run_config_to_json(cfg).dump(2) << '\n';

    std::ofstream metrics(res.metrics_path);
    if (!metrics) throw DataError("cannot write " + res.metrics_path);

    TrainState st = init_train_state(cfg.model, static_cast<int>(bundle.train_ids.size()),
                                     cfg.seed);
    CheckpointMeta meta;
    meta.dataset_hash = bundle.content_hash;
    meta.config_hash = res.config_hash;
    meta.seed = cfg.seed;
    meta.run_config = run_config_to_json(cfg);

    std::vector<double> losses;
    auto t0 = std::chrono::steady_clock::now();
    for (long i = 0; i < cfg.train_steps; ++i) {
        StepMetrics m;
        try {
            m = outer_step(st, bundle.train, cfg.meta);
        } catch (const Error& e) {
            throw Error("training step " + std::to_string(i) + ": " + e.what());
        }
        losses.push_back(m.mean_query_loss);
        json rec{{"step", m.step},
                 {"mean_query_loss", m.mean_query_loss},
                 {"ns_loss", m.ns_loss},
                 {"wall_ms", m.wall_ms}};
        json per = json::array();
        for (auto& [s, l] : m.speaker_losses) per.push_back(json::array({s, l}));
        rec["speakers"] = per;
        metrics << rec.dump() << '\n';
        if (cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 &&
            i + 1 < cfg.train_steps) {
            meta.step = st.step;
            save_checkpoint((fs::path(cfg.out_dir) / ("checkpoint_" + std::to_string(i + 1) +
                                                      ".bin"))
                                .string(),
                            st, meta);
        }
    }
    res.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.steps = cfg.train_steps;

    std::size_t window = std::min<std::size_t>(50, losses.size());
    for (std::size_t i = 0; i < window; ++i) {
        res.first_window_mean += losses[i] / static_cast<double>(window);
        res.last_window_mean += losses[losses.size() - 1 - i] / static_cast<double>(window);
    }
    meta.step = st.step;
    save_checkpoint(res.checkpoint_path, st, meta);
    return res;
}

// ---------------------------------------------------------------------------
// eval / probe

struct SpeakerEvalRecord {
    int speaker = -1;
    double pre_loss = 0, post_loss = 0;
    double toksim = 0, grd_f1 = 0;
    std::vector<std::vector<int>> generations;
};

struct EvalResult {
    EvalReport report;
    GammaProbe probe;
    double mean_pre_loss = 0, mean_post_loss = 0;
    int speakers_evaluated = 0, speakers_skipped = 0;
    std::string mode, policy, config_hash, dataset_hash, checkpoint_hash;
    uint64_t seed = 0;
    std::vector<SpeakerEvalRecord> records;
};

inline uint64_t file_content_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

inline EvalResult evaluate_split(const RunConfig& cfg, const Checkpoint& ck,
                                 const DatasetBundle& bundle, const Dataset& split,
                                 bool generate) {
    const MetaConfig& mc = cfg.meta;
    EvalResult res;
    res.mode = meta_mode_name(mc.mode);
    res.policy = newcomer_policy_name(cfg.newcomer_policy);
    res.seed = cfg.seed;
    res.dataset_hash = bundle.content_hash;
    res.config_hash = run_config_hash(cfg);

    // working copy widened to all speakers; global state stays untouched
    TaskEmbeddingTable table = expand_table(ck.state.table, bundle.num_speakers());
    const SocialGraph& g = *split.graph;

    // history and idf material from the training split responses
    std::vector<TokenSeq> train_responses;
    for (int s : bundle.train_ids)
        for (const auto& smp : bundle.samples_by_speaker[static_cast<std::size_t>(s)])
            train_responses.push_back(smp.response.tokens);
    IdfTable idf = IdfTable::from_documents(train_responses, bundle.vocab_size);
    auto stopwords = top_frequency_stopwords(train_responses, bundle.vocab_size);

    std::vector<TokenSeq> hyps, refs;
    std::vector<std::pair<int, Vec>> probe_embeddings;

    for (int s : split.speakers) {
        uint64_t sp_seed = derive_seed(cfg.seed, {41, static_cast<uint64_t>(s)});
        Rng ep_rng(sp_seed);
        Episode ep;
        TestEpisodeResult out;
        try {
            ep = build_episode(split, s, mc.k_shot, ep_rng);
            out = test_adapt_generate(ck.state.phi, ck.state.agg, table, g, ep, mc,
                                      derive_seed(sp_seed, {1}));
        } catch (const Error&) {
            ++res.speakers_skipped;
            continue;
        }
        SpeakerEvalRecord rec;
        rec.speaker = s;
        rec.pre_loss = out.pre_adapt_query_loss;
        rec.post_loss = out.post_adapt_query_loss;

        TokenSeq history;
        for (const auto& smp : ep.support)
            history.insert(history.end(), smp.response.tokens.begin(),
                           smp.response.tokens.end());
        if (generate) {
            double ts = 0, gf = 0;
            for (std::size_t i = 0; i < ep.query.size(); ++i) {
                hyps.push_back(out.generations[i]);
                refs.push_back(ep.query[i].response.tokens);
                ts += toksim(out.generations[i], history, idf, stopwords);
                gf += grd_f1(out.generations[i], history, stopwords);
            }
            rec.toksim = ts / static_cast<double>(ep.query.size());
            rec.grd_f1 = gf / static_cast<double>(ep.query.size());
            rec.generations = out.generations;
        }
        if (out.h.size() > 0) probe_embeddings.emplace_back(s, out.h);
        if (cfg.newcomer_policy == NewcomerPolicy::accumulate_newcomers &&
            out.fitted_row.size() > 0 && !table.has_row(s)) {
            table.rows.row(s) = out.fitted_row.transpose();
            table.valid[static_cast<std::size_t>(s)] = 1;
        }
        res.mean_pre_loss += rec.pre_loss;
        res.mean_post_loss += rec.post_loss;
        ++res.speakers_evaluated;
        res.records.push_back(std::move(rec));
    }
    if (res.speakers_evaluated > 0) {
        res.mean_pre_loss /= res.speakers_evaluated;
        res.mean_post_loss /= res.speakers_evaluated;
    }

    if (generate && !hyps.empty()) {
        for (int n = 1; n <= 4; ++n)
            res.report.bleu[n - 1] = bleu_n(hyps, refs, n);
        res.report.dist1 = dist_n(hyps, 1);
        res.report.dist2 = dist_n(hyps, 2);
        double ts = 0, gf = 0;
        for (const auto& rec : res.records) {
            ts += rec.toksim;
            gf += rec.grd_f1;
        }
        res.report.toksim = ts / static_cast<double>(res.records.size());
        res.report.grd_f1 = gf / static_cast<double>(res.records.size());
        res.report.sample_count = hyps.size();
    }

    if (!probe_embeddings.empty()) {
        Rng probe_rng(derive_seed(cfg.seed, {42}));
        res.probe = gamma_probe(probe_embeddings, table.rows, table.valid, g, cfg.probe_margins,
                                probe_rng);
    } else {
        res.probe.margins = cfg.probe_margins;
        res.probe.ratios.assign(cfg.probe_margins.size(), 0.0);
    }
    return res;
}

inline json eval_result_to_json(const EvalResult& r) {
    json probe_j{{"margins", r.probe.margins},
                 {"ratios", r.probe.ratios},
                 {"speaker_count", r.probe.speaker_count},
                 {"skipped", r.probe.skipped}};
    return json{{"mode", r.mode},
                {"policy", r.policy},
                {"seed", r.seed},
                {"config_hash", r.config_hash},
                {"dataset_hash", r.dataset_hash},
                {"checkpoint_hash", r.checkpoint_hash},
                {"speakers_evaluated", r.speakers_evaluated},
                {"speakers_skipped", r.speakers_skipped},
                {"mean_pre_adapt_loss", r.mean_pre_loss},
                {"mean_post_adapt_loss", r.mean_post_loss},
                {"bleu1", r.report.bleu[0]},
                {"bleu2", r.report.bleu[1]},
                {"bleu3", r.report.bleu[2]},
                {"bleu4", r.report.bleu[3]},
                {"dist1", r.report.dist1},
                {"dist2", r.report.dist2},
                {"toksim", r.report.toksim},
                {"grd_f1", r.report.grd_f1},
                {"sample_count", r.report.sample_count},
                {"gamma_probe", probe_j}};
}

inline std::string eval_result_table(const EvalResult& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "mode=" << r.mode << "  policy=" << r.policy << "  speakers="
       << r.speakers_evaluated << " (+" << r.speakers_skipped << " skipped)\n";
    os << "  Bleu1 " << 100 * r.report.bleu[0] << "  Bleu2 " << 100 * r.report.bleu[1]
       << "  Bleu3 " << 100 * r.report.bleu[2] << "  Bleu4 " << 100 * r.report.bleu[3] << "\n";
    os << "  Dist1 " << r.report.dist1 << "  Dist2 " << r.report.dist2 << "\n";
    os << "  TokSim " << r.report.toksim << "  Grd-F1 " << r.report.grd_f1 << "\n";
    os << "  query loss pre " << r.mean_pre_loss << " -> post " << r.mean_post_loss << "\n";
    os << "  gamma:";
    for (std::size_t i = 0; i < r.probe.margins.size(); ++i)
        os << "  c=" << std::setprecision(2) << r.probe.margins[i] << ": "
           << std::setprecision(4) << r.probe.ratios[i];
    os << "  (over " << r.probe.speaker_count << " speakers)\n";
    return os.str();
}

// checkpoint + dataset -> full evaluation on a split (test by default)
inline EvalResult cmd_eval(const RunConfig& cfg_in, const std::string& checkpoint_path,
                           const std::string& split_name = "test", bool generate = true) {
    RunConfig cfg = cfg_in;
    auto ck = load_checkpoint(checkpoint_path);
    auto bundle = load_dataset_dir(cfg.dataset_dir);
    if (ck.meta.dataset_hash != bundle.content_hash)
        throw ConfigError("dataset_hash mismatch: checkpoint was trained on " +
                          ck.meta.dataset_hash + " but " + cfg.dataset_dir + " hashes to " +
                          bundle.content_hash);
    cfg.model.vocab_size = bundle.vocab_size;
    cfg.model.max_len = bundle.max_len;
    if (ck.state.phi.config.vocab_size != bundle.vocab_size)
        throw ConfigError("checkpoint vocab_size " +
                          std::to_string(ck.state.phi.config.vocab_size) +
                          " does not match dataset vocab_size " +
                          std::to_string(bundle.vocab_size));

    const Dataset* split = &bundle.test;
    if (split_name == "valid") split = &bundle.valid;
    else if (split_name == "train") split = &bundle.train;
    else if (split_name != "test") throw ConfigError("unknown split '" + split_name + "'");

    auto res = evaluate_split(cfg, ck, bundle, *split, generate);
    res.checkpoint_hash = hash_hex(file_content_hash(checkpoint_path));
    return res;
}

inline void write_eval_outputs(const EvalResult& res, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / "eval.json") << eval_result_to_json(res).dump(2) << '\n';
    std::ofstream records(fs::path(out_dir) / "eval_records.jsonl");
    for (const auto& rec : res.records) {
        json j{{"speaker", rec.speaker},
               {"pre_loss", rec.pre_loss},
               {"post_loss", rec.post_loss},
               {"toksim", rec.toksim},
               {"grd_f1", rec.grd_f1},
               {"generations", rec.generations}};
        records << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// ablate

struct AblateRow {
    std::string variant;
    uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalResult eval;
    TrainResult train;
};

struct AblateResult {
    std::vector<AblateRow> rows;
    std::vector<std::string> variants;
    std::vector<uint64_t> seeds;
};

inline std::vector<std::string> default_ablate_variants() {
    return {"full", "no-ns", "no-gcn", "no-ns-no-gcn", "no-self-emb", "paml", "ta-as-base"};
}

// Trains and evaluates every (variant, seed) pair on the same dataset.
// Failures are recorded per variant; the matrix keeps going.
inline AblateResult cmd_ablate(const RunConfig& base, std::vector<std::string> variants,
                               std::vector<uint64_t> seeds,
                               std::ostream* progress = nullptr) {
    namespace fs = std::filesystem;
    if (variants.empty()) variants = default_ablate_variants();
    if (seeds.empty()) seeds = {base.seed};
    AblateResult result;
    result.variants = variants;
    result.seeds = seeds;
    for (const auto& variant : variants) {
        for (uint64_t seed : seeds) {
            AblateRow row;
            row.variant = variant;
            row.seed = seed;
            RunConfig cfg = base;
            cfg.meta.mode = meta_mode_from_name(variant);
            cfg.seed = seed;
            cfg.out_dir = (fs::path(base.out_dir) / (variant + "_seed" + std::to_string(seed)))
                              .string();
            try {
                row.train = cmd_train(cfg);
                row.eval = cmd_eval(cfg, row.train.checkpoint_path);
                write_eval_outputs(row.eval, cfg.out_dir);
                row.ok = true;
            } catch (const std::exception& e) {
                row.error = e.what();
            }
            if (progress) {
                *progress << "[ablate] " << variant << " seed " << seed << ": "
                          << (row.ok ? "ok" : row.error) << "\n";
                progress->flush();
            }
            result.rows.push_back(std::move(row));
        }
    }
    return result;
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2]
                        : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

// Per-variant seed medians of each reported metric.
inline json ablate_summary(const AblateResult& r) {
    json rows = json::array();
    for (const auto& variant : r.variants) {
        std::vector<double> b1, b2, b3, b4, d1, d2, ts, gf, g0, g1, g2;
        int ok = 0;
        std::vector<std::string> errors;
        for (const auto& row : r.rows) {
            if (row.variant != variant) continue;
            if (!row.ok) {
                errors.push_back(row.error);
                continue;
            }
            ++ok;
            b1.push_back(row.eval.report.bleu[0]);
            b2.push_back(row.eval.report.bleu[1]);
            b3.push_back(row.eval.report.bleu[2]);
            b4.push_back(row.eval.report.bleu[3]);
            d1.push_back(row.eval.report.dist1);
            d2.push_back(row.eval.report.dist2);
            ts.push_back(row.eval.report.toksim);
            gf.push_back(row.eval.report.grd_f1);
            if (row.eval.probe.ratios.size() >= 3) {
                g0.push_back(row.eval.probe.ratios[0]);
                g1.push_back(row.eval.probe.ratios[1]);
                g2.push_back(row.eval.probe.ratios[2]);
            }
        }
        rows.push_back(json{{"variant", variant},
                            {"runs_ok", ok},
                            {"errors", errors},
                            {"bleu1", median(b1)},
                            {"bleu2", median(b2)},
                            {"bleu3", median(b3)},
                            {"bleu4", median(b4)},
                            {"dist1", median(d1)},
                            {"dist2", median(d2)},
                            {"toksim", median(ts)},
                            {"grd_f1", median(gf)},
                            {"gamma0", median(g0)},
                            {"gamma01", median(g1)},
                            {"gamma02", median(g2)}});
    }
    return json{{"rows", rows}};
}

inline std::string ablate_table(const AblateResult& r) {
    json summary = ablate_summary(r);
    std::ostringstream os;
    os << std::left << std::setw(14) << "variant" << std::right << std::setw(7) << "Bleu1"
       << std::setw(7) << "Bleu2" << std::setw(7) << "Bleu3" << std::setw(7) << "Bleu4"
       << std::setw(7) << "Dist1" << std::setw(7) << "Dist2" << std::setw(8) << "TokSim"
       << std::setw(8) << "Grd-F1" << std::setw(7) << "g-0" << std::setw(7) << "g-.1"
       << std::setw(7) << "g-.2" << "\n";
    os << std::fixed;
    for (const auto& row : summary.at("rows")) {
        os << std::left << std::setw(14) << row.at("variant").get<std::string>() << std::right;
        auto col = [&](const char* key, int mul, int prec) {
            os << std::setw(key[0] == 'B' ? 7 : (key[0] == 'g' ? 7 : 8))
               << std::setprecision(prec) << mul * row.at(key).get<double>();
        };
        col("bleu1", 100, 2);
        col("bleu2", 100, 2);
        col("bleu3", 100, 2);
        col("bleu4", 100, 2);
        os << std::setw(7) << std::setprecision(3) << row.at("dist1").get<double>();
        os << std::setw(7) << std::setprecision(3) << row.at("dist2").get<double>();
        os << std::setw(8) << std::setprecision(4) << row.at("toksim").get<double>();
        os << std::setw(8) << std::setprecision(4) << row.at("grd_f1").get<double>();
        os << std::setw(7) << std::setprecision(2) << row.at("gamma0").get<double>();
        os << std::setw(7) << std::setprecision(2) << row.at("gamma01").get<double>();
        os << std::setw(7) << std::setprecision(2) << row.at("gamma02").get<double>();
        if (row.at("runs_ok").get<int>() == 0) os << "   (all runs failed)";
        os << "\n";
    }
    return os.str();
}

}  // namespace metaconv
