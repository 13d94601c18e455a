// Command-line harness: gen-data, train, eval, probe, ablate.
// A JSON config file seeds the run configuration; explicit flags win.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "metaconv/harness.hpp"

using namespace metaconv;

namespace {

RunConfig load_base_config(const std::string& config_path) {
    RunConfig cfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config file: " + config_path);
        json j;
        in >> j;
        cfg = run_config_from_json(j);
    }
    return cfg;
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
    std::vector<uint64_t> seeds;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) seeds.push_back(std::stoull(item));
    return seeds;
}

std::vector<std::string> parse_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"metaconv: few-shot personalized response generation with a social-network task aggregator"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, checkpoint_path, mode, graph_kind, policy,
        variants_csv, seeds_csv, margins_csv, split = "test";
    uint64_t seed = 0;
    long steps = 0;
    int train_speakers = 0, valid_speakers = 0, test_speakers = 0, samples_train = 0,
        samples_eval = 0, vocab = 0, diffusion = -1, k_shot = 0, k_ns = 0, inner_steps = -1,
        fit_steps = -1, batch = 0, d_model = 0, n_heads = 0, enc_layers = 0, dec_layers = 0,
        d_ff = 0, checkpoint_every = -1, decode_len = 0, top_k = 0;
    double avg_degree = -1, style_temp = -1, alpha = -1, beta = -1, lambda_ns = -1;
    bool second_order = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file (flags override it)");
        cmd->add_option("--seed", seed, "run seed");
    };
    auto add_synth_flags = [&](CLI::App* cmd) {
        cmd->add_option("--train-speakers", train_speakers);
        cmd->add_option("--valid-speakers", valid_speakers);
        cmd->add_option("--test-speakers", test_speakers);
        cmd->add_option("--samples-train", samples_train, "samples per training speaker");
        cmd->add_option("--samples-eval", samples_eval, "samples per valid/test speaker");
        cmd->add_option("--vocab", vocab);
        cmd->add_option("--avg-degree", avg_degree);
        cmd->add_option("--diffusion", diffusion, "style diffusion rounds");
        cmd->add_option("--graph", graph_kind, "erdos_renyi | preferential");
        cmd->add_option("--style-temp", style_temp);
    };
    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--steps", steps, "outer-loop steps");
        cmd->add_option("--mode", mode, "full | no-ns | no-gcn | no-ns-no-gcn | no-self-emb | "
                                        "speaker-emb | paml | ta-as-base");
        cmd->add_option("--alpha", alpha, "inner-loop SGD rate");
        cmd->add_option("--beta", beta, "outer-loop Adam rate");
        cmd->add_option("--lambda", lambda_ns, "negative-sampling loss weight");
        cmd->add_option("--inner-steps", inner_steps);
        cmd->add_option("--fit-steps", fit_steps, "embedding fitting steps");
        cmd->add_option("--batch", batch, "meta batch size");
        cmd->add_option("--k", k_shot, "shot count");
        cmd->add_option("--k-ns", k_ns, "negative samples");
        cmd->add_flag("--second-order", second_order, "exact meta-gradient chain");
        cmd->add_option("--d-model", d_model);
        cmd->add_option("--heads", n_heads);
        cmd->add_option("--enc-layers", enc_layers);
        cmd->add_option("--dec-layers", dec_layers);
        cmd->add_option("--d-ff", d_ff);
        cmd->add_option("--checkpoint-every", checkpoint_every);
        cmd->add_option("--decode-len", decode_len, "max generated tokens");
        cmd->add_option("--top-k", top_k, "decode sampling pool");
    };

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus directory");
    add_common(gen);
    add_synth_flags(gen);
    gen->add_option("--out", out_dir, "output dataset directory")->required();

    auto* train = app.add_subcommand("train", "meta-train on a dataset directory");
    add_common(train);
    add_train_flags(train);
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_dir, "run output directory");

    auto* eval = app.add_subcommand("eval", "adapt to test speakers, generate, score");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint_path)->required();
    eval->add_option("--data", data_dir)->required();
    eval->add_option("--out", out_dir, "where to write eval.json / eval_records.jsonl");
    eval->add_option("--split", split, "test | valid | train");
    eval->add_option("--mode", mode, "override the checkpoint's mode");
    eval->add_option("--policy", policy, "train-only | accumulate-newcomers");
    eval->add_option("--k", k_shot);
    eval->add_option("--decode-len", decode_len);
    eval->add_option("--top-k", top_k);

    auto* probe = app.add_subcommand("probe", "task-embedding quality probe (gamma margins)");
    add_common(probe);
    probe->add_option("--checkpoint", checkpoint_path)->required();
    probe->add_option("--data", data_dir)->required();
    probe->add_option("--margins", margins_csv, "comma-separated margins, default 0,0.1,0.2");
    probe->add_option("--split", split);
    probe->add_option("--mode", mode);

    auto* ablate = app.add_subcommand("ablate", "train + evaluate the variant matrix");
    add_common(ablate);
    add_train_flags(ablate);
    ablate->add_option("--data", data_dir)->required();
    ablate->add_option("--out", out_dir, "matrix output directory");
    ablate->add_option("--variants", variants_csv, "comma-separated variant list");
    ablate->add_option("--seeds", seeds_csv, "comma-separated seeds (default: --seed)");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg;
        // eval/probe default to the configuration embedded in the checkpoint
        if ((eval->parsed() || probe->parsed()) && config_path.empty()) {
            auto ck = load_checkpoint(checkpoint_path);
            if (!ck.meta.run_config.empty()) cfg = run_config_from_json(ck.meta.run_config);
        } else {
            cfg = load_base_config(config_path);
        }
        CLI::App* sub = app.get_subcommands().front();
        auto given = [&](const char* name) { return sub->count(name) > 0; };

        if (given("--seed")) cfg.seed = seed;
        if (!data_dir.empty()) cfg.dataset_dir = data_dir;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (given("--train-speakers")) cfg.synth.train_speakers = train_speakers;
        if (given("--valid-speakers")) cfg.synth.valid_speakers = valid_speakers;
        if (given("--test-speakers")) cfg.synth.test_speakers = test_speakers;
        if (given("--samples-train")) cfg.synth.samples_per_train_speaker = samples_train;
        if (given("--samples-eval")) cfg.synth.samples_per_eval_speaker = samples_eval;
        if (given("--vocab")) cfg.synth.vocab_size = vocab;
        if (given("--avg-degree")) cfg.synth.avg_degree = avg_degree;
        if (given("--diffusion")) cfg.synth.diffusion_rounds = diffusion;
        if (given("--style-temp")) cfg.synth.style_temperature = style_temp;
        if (given("--graph"))
            cfg.synth.graph_kind = graph_kind == "preferential"
                                       ? SynthConfig::GraphKind::preferential
                                       : SynthConfig::GraphKind::erdos_renyi;
        if (sub->get_option_no_throw("--steps") && given("--steps")) cfg.train_steps = steps;
        if (sub->get_option_no_throw("--mode") && given("--mode"))
            cfg.meta.mode = meta_mode_from_name(mode);
        if (sub->get_option_no_throw("--alpha") && given("--alpha")) cfg.meta.alpha = alpha;
        if (sub->get_option_no_throw("--beta") && given("--beta")) cfg.meta.beta = beta;
        if (sub->get_option_no_throw("--lambda") && given("--lambda"))
            cfg.meta.lambda_ns = lambda_ns;
        if (sub->get_option_no_throw("--inner-steps") && given("--inner-steps"))
            cfg.meta.inner_steps = inner_steps;
        if (sub->get_option_no_throw("--fit-steps") && given("--fit-steps"))
            cfg.meta.fit_steps = fit_steps;
        if (sub->get_option_no_throw("--batch") && given("--batch"))
            cfg.meta.meta_batch_size = batch;
        if (sub->get_option_no_throw("--k") && given("--k")) cfg.meta.k_shot = k_shot;
        if (sub->get_option_no_throw("--k-ns") && given("--k-ns")) cfg.meta.k_ns = k_ns;
        if (sub->get_option_no_throw("--second-order") && given("--second-order"))
            cfg.meta.first_order = false;
        if (sub->get_option_no_throw("--d-model") && given("--d-model"))
            cfg.model.d_model = d_model;
        if (sub->get_option_no_throw("--heads") && given("--heads")) cfg.model.n_heads = n_heads;
        if (sub->get_option_no_throw("--enc-layers") && given("--enc-layers"))
            cfg.model.enc_layers = enc_layers;
        if (sub->get_option_no_throw("--dec-layers") && given("--dec-layers"))
            cfg.model.dec_layers = dec_layers;
        if (sub->get_option_no_throw("--d-ff") && given("--d-ff")) cfg.model.d_ff = d_ff;
        if (sub->get_option_no_throw("--checkpoint-every") && given("--checkpoint-every"))
            cfg.checkpoint_every = checkpoint_every;
        if (sub->get_option_no_throw("--decode-len") && given("--decode-len"))
            cfg.meta.max_decode_len = decode_len;
        if (sub->get_option_no_throw("--top-k") && given("--top-k"))
            cfg.meta.decode_top_k = top_k;
        if (sub->get_option_no_throw("--policy") && given("--policy"))
            cfg.newcomer_policy = newcomer_policy_from_name(policy);
        if (!margins_csv.empty()) {
            cfg.probe_margins.clear();
            for (const auto& m : parse_list(margins_csv)) cfg.probe_margins.push_back(std::stod(m));
        }

        if (gen->parsed()) {
            auto res = cmd_gen_data(cfg.synth, cfg.seed, out_dir);
            std::cout << "dataset: " << res.dir << "\n"
                      << "dataset_hash: " << res.dataset_hash << "\n"
                      << "neighbor toksim: " << res.diagnostics.neighbor_toksim
                      << "  random toksim: " << res.diagnostics.random_toksim
                      << "  gap: " << res.diagnostics.toksim_gap << "\n";
        } else if (train->parsed()) {
            auto res = cmd_train(cfg);
            std::cout << "checkpoint: " << res.checkpoint_path << "\n"
                      << "metrics: " << res.metrics_path << "\n"
                      << "config_hash: " << res.config_hash << "\n"
                      << "query loss: first-50 " << res.first_window_mean << " -> last-50 "
                      << res.last_window_mean << "\n"
                      << "wall: " << res.wall_s << "s over " << res.steps << " steps\n";
        } else if (eval->parsed()) {
            auto res = cmd_eval(cfg, checkpoint_path, split);
            std::cout << eval_result_table(res);
            if (!cfg.out_dir.empty()) {
                write_eval_outputs(res, cfg.out_dir);
                std::cout << "written: " << cfg.out_dir << "/eval.json\n";
            }
        } else if (probe->parsed()) {
            auto res = cmd_eval(cfg, checkpoint_path, split, /*generate=*/false);
            std::cout << "gamma probe over " << res.probe.speaker_count << " speakers ("
                      << res.probe.skipped << " skipped)\n";
            for (std::size_t i = 0; i < res.probe.margins.size(); ++i)
                std::cout << "  gamma-" << res.probe.margins[i] << " = " << res.probe.ratios[i]
                          << "\n";
        } else if (ablate->parsed()) {
            auto res = cmd_ablate(cfg, parse_list(variants_csv), parse_seeds(seeds_csv),
                                  &std::cerr);
            std::cout << ablate_table(res);
            if (!cfg.out_dir.empty()) {
                std::filesystem::create_directories(cfg.out_dir);
                std::ofstream(std::filesystem::path(cfg.out_dir) / "ablation.json")
                    << ablate_summary(res).dump(2) << '\n';
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
