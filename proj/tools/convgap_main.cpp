// convgap: model-diffing toolkit for layerwise prediction-convergence
// analysis on paired checkpoints. Subcommand per pipeline; every run
// writes a run_config.json echo of the resolved parameters next to its
// outputs so artifact directories are self-describing.

#include <fstream>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "convgap/common.hpp"
#include "convgap/oracle.hpp"
#include "convgap/pipelines.hpp"
#include "convgap/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace convgap;

namespace {

window_spec parse_window(const std::string& text, int n_layers) {
    const auto windows = depth_windows(n_layers);
    if (text == "early") return windows.early;
    if (text == "mid") return windows.mid;
    if (text == "late") return windows.late;
    const auto dash = text.find('-');
    if (dash == std::string::npos) {
        fail("window '%s' is not early/mid/late or lo-hi", text.c_str());
    }
    window_spec w;
    w.label = "custom";
    w.lo = std::stoi(text.substr(0, dash));
    w.hi = std::stoi(text.substr(dash + 1));
    return w;
}

void print_estimate(const std::string& name, const estimate_with_ci& e) {
    std::printf("%-32s %s\n", name.c_str(), format_estimate(e).c_str());
}

struct synth_cli {
    uint64_t seed = 7;
    double strength = 0.5;
    double template_sensitivity = 0.0;
    std::string out;
    int layers = 8, d_model = 64, heads = 4, d_mlp = 128, vocab = 256;
    std::string norm = "rmsnorm", positional = "rotary";
    bool ungated = false;
    bool moe = false;
    std::string window;
    // optional corpus emission
    int corpus_prompts = 0;
    int corpus_len = 32;
    int corpus_clusters = 20;
};

int run_synth(const synth_cli& args) {
    synth_spec spec;
    spec.seed = args.seed;
    spec.divergence_strength = args.strength;
    spec.template_sensitivity = args.template_sensitivity;
    spec.config.n_layers = args.layers;
    spec.config.d_model = args.d_model;
    spec.config.n_heads = args.heads;
    spec.config.d_mlp = args.d_mlp;
    spec.config.vocab_size = args.vocab;
    spec.config.norm = norm_kind_from_string(args.norm);
    spec.config.positional = positional_kind_from_string(args.positional);
    spec.config.mlp_gated = !args.ungated;
    spec.config.moe_flag = args.moe;
    if (!args.window.empty()) {
        spec.divergence_window = parse_window(args.window, args.layers);
    }
    const auto [pt, it] = make_paired_checkpoints(spec);
    const fs::path out(args.out);
    save_checkpoint(pt, out / "pt");
    save_checkpoint(it, out / "it");

    const window_spec window =
        spec.divergence_window.value_or(depth_windows(spec.config.n_layers).late);
    json record = {{"seed", spec.seed},
                   {"divergence_strength", spec.divergence_strength},
                   {"divergence_window", window.range_text()},
                   {"template_sensitivity", spec.template_sensitivity},
                   {"n_layers", spec.config.n_layers},
                   {"d_model", spec.config.d_model},
                   {"n_heads", spec.config.n_heads},
                   {"d_mlp", spec.config.d_mlp},
                   {"vocab_size", spec.config.vocab_size},
                   {"note", "divergence_strength 0 produces a bit-identical pair"}};
    std::ofstream sf(out / "spec.json");
    sf << record.dump(2) << "\n";

    if (args.corpus_prompts > 0) {
        const auto corpus =
            make_synthetic_corpus(spec.seed, args.corpus_prompts, args.corpus_len,
                                  args.corpus_clusters, synth_prompt_token_limit(spec.config));
        save_corpus(corpus, out / "corpus.jsonl");
    }
    write_run_config(out, record);
    std::printf("wrote %s/pt, %s/it\n", args.out.c_str(), args.out.c_str());
    return 0;
}

// Experiment config file: {pt_path, it_path, prompts_path,
// windows: [...] | audit: true, forced_steps, seeds, late_fraction,
// resamples?, seed?, output_dir}.
int run_intervene_config(const fs::path& config_path) {
    std::ifstream f(config_path);
    if (!f) fail("intervene: cannot open config %s", config_path.c_str());
    json cfg;
    f >> cfg;

    const checkpoint pt = load_checkpoint(cfg.at("pt_path").get<std::string>());
    const checkpoint it = load_checkpoint(cfg.at("it_path").get<std::string>());
    const auto prompts = load_corpus(cfg.at("prompts_path").get<std::string>());
    const fs::path dir = cfg.at("output_dir").get<std::string>();

    intervention_params params;
    params.late_fraction = cfg.value("late_fraction", 0.2);
    params.forced_steps = cfg.value("forced_steps", 128);
    params.boot = {cfg.value("resamples", 2000), cfg.value("seed", uint64_t{0})};

    std::vector<intervention_outcome> outcomes;
    if (cfg.value("audit", false)) {
        const auto audit = window_audit(pt, it, prompts, params);
        const summary s = audit_summary(audit, pt.config.n_layers);
        save_summary(s, dir / "summary.json");
        for (const auto& row : audit) {
            write_intervention_rows_csv(row.graft, dir / ("rows_" + row.graft.arm + ".csv"));
            write_intervention_rows_csv(row.swap, dir / ("rows_" + row.swap.arm + ".csv"));
        }
        write_run_config(dir, cfg);
        std::printf("audit complete: %zu windows\n", audit.size());
        return 0;
    }

    const std::vector<uint64_t> seeds = cfg.value("seeds", std::vector<uint64_t>{});
    for (const auto& w : cfg.value("windows", std::vector<std::string>{"late"})) {
        const window_spec window = parse_window(w, pt.config.n_layers);
        if (!seeds.empty()) {
            const auto rc = run_random_control(pt, it, window, prompts, seeds, params);
            outcomes.push_back(rc.true_graft);
            outcomes.push_back(rc.random);
            write_intervention_rows_csv(rc.true_graft,
                                        dir / ("rows_true_graft_" + window.label + ".csv"));
            write_intervention_rows_csv(rc.random,
                                        dir / ("rows_random_" + window.label + ".csv"));
        } else {
            outcomes.push_back(run_graft_experiment(pt, it, window, prompts, params));
            write_intervention_rows_csv(outcomes.back(),
                                        dir / ("rows_" + outcomes.back().arm + ".csv"));
            outcomes.push_back(run_swap_experiment(it, pt, window, prompts, params));
            write_intervention_rows_csv(outcomes.back(),
                                        dir / ("rows_" + outcomes.back().arm + ".csv"));
        }
    }
    save_summary(intervention_summary(outcomes, "interventions"), dir / "summary.json");
    write_run_config(dir, cfg);
    for (const auto& o : outcomes) {
        print_estimate(o.arm + " delta", o.delta_late);
    }
    return 0;
}

std::vector<int> parse_token_list(const std::string& text) {
    std::vector<int> tokens;
    std::string cur;
    for (char c : text) {
        if (c == ',' || c == ' ') {
            if (!cur.empty()) {
                tokens.push_back(std::stoi(cur));
                cur.clear();
            }
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) {
        tokens.push_back(std::stoi(cur));
    }
    return tokens;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"convgap: convergence-gap model diffing toolkit"};
    app.require_subcommand(1);

    // --- synth ---
    synth_cli synth_args;
    auto* synth = app.add_subcommand("synth", "generate a paired synthetic checkpoint fixture");
    synth->add_option("--seed", synth_args.seed, "master seed")->capture_default_str();
    synth->add_option("--strength", synth_args.strength, "planted divergence strength")
        ->capture_default_str();
    synth->add_option("--template-sensitivity", synth_args.template_sensitivity,
                      "template-conditioned divergence strength")
        ->capture_default_str();
    synth->add_option("--out", synth_args.out, "output directory")->required();
    synth->add_option("--layers", synth_args.layers)->capture_default_str();
    synth->add_option("--d-model", synth_args.d_model)->capture_default_str();
    synth->add_option("--heads", synth_args.heads)->capture_default_str();
    synth->add_option("--d-mlp", synth_args.d_mlp)->capture_default_str();
    synth->add_option("--vocab", synth_args.vocab)->capture_default_str();
    synth->add_option("--norm", synth_args.norm, "rmsnorm|layernorm")->capture_default_str();
    synth->add_option("--positional", synth_args.positional, "rotary|learned|none")
        ->capture_default_str();
    synth->add_flag("--ungated", synth_args.ungated, "plain GELU MLP instead of gated");
    synth->add_flag("--moe", synth_args.moe,
                    "set the MoE flag (excluded from dense intervention pools)");
    synth->add_option("--window", synth_args.window, "divergence window (early|mid|late|lo-hi)");
    synth->add_option("--corpus-prompts", synth_args.corpus_prompts,
                      "also emit corpus.jsonl with this many prompts");
    synth->add_option("--corpus-len", synth_args.corpus_len)->capture_default_str();
    synth->add_option("--corpus-clusters", synth_args.corpus_clusters)->capture_default_str();

    // --- corpus ---
    struct {
        uint64_t seed = 0;
        int n_prompts = 200, len = 32, clusters = 20, max_token = 248;
        std::string out;
    } corpus_args;
    auto* corpus_cmd = app.add_subcommand("corpus", "generate a synthetic prompt corpus (JSONL)");
    corpus_cmd->add_option("--seed", corpus_args.seed)->capture_default_str();
    corpus_cmd->add_option("--n-prompts", corpus_args.n_prompts)->capture_default_str();
    corpus_cmd->add_option("--len", corpus_args.len)->capture_default_str();
    corpus_cmd->add_option("--clusters", corpus_args.clusters)->capture_default_str();
    corpus_cmd->add_option("--max-token", corpus_args.max_token)->capture_default_str();
    corpus_cmd->add_option("--out", corpus_args.out)->required();

    // --- trace ---
    struct {
        std::string model, tokens, out;
    } trace_args;
    auto* trace_cmd =
        app.add_subcommand("trace", "forward one token sequence and dump its raw-lens curves");
    trace_cmd->add_option("--model", trace_args.model)->required();
    trace_cmd->add_option("--tokens", trace_args.tokens, "comma-separated token ids")->required();
    trace_cmd->add_option("--out", trace_args.out)->required();

    // --- fit-lens ---
    struct {
        std::string model, corpus, out;
        int steps = 400, batch = 32;
        double step_size = 0.05;
        uint64_t seed = 0;
    } fit_args;
    auto* fit_cmd = app.add_subcommand("fit-lens", "fit tuned-lens translators");
    fit_cmd->add_option("--model", fit_args.model)->required();
    fit_cmd->add_option("--corpus", fit_args.corpus)->required();
    fit_cmd->add_option("--steps", fit_args.steps)->capture_default_str();
    fit_cmd->add_option("--step-size", fit_args.step_size)->capture_default_str();
    fit_cmd->add_option("--batch", fit_args.batch)->capture_default_str();
    fit_cmd->add_option("--seed", fit_args.seed)->capture_default_str();
    fit_cmd->add_option("--out", fit_args.out)->required();

    // --- gap ---
    struct {
        std::string pt, it, corpus, lens_pt, lens_it, out;
        double late_fraction = 0.2, tau = 0.05;
        int reference_layer = -1, forced_steps = 0, resamples = 2000, workers = 0;
        uint64_t seed = 0;
        bool dump_curves = false;
        bool flips_vs_final = false;
    } gap_args;
    auto* gap_cmd = app.add_subcommand("gap", "convergence-gap comparison of a PT/IT pair");
    gap_cmd->add_option("--pt", gap_args.pt)->required();
    gap_cmd->add_option("--it", gap_args.it)->required();
    gap_cmd->add_option("--corpus", gap_args.corpus)->required();
    gap_cmd->add_option("--lens-pt", gap_args.lens_pt, "tuned lens dir for the PT side");
    gap_cmd->add_option("--lens-it", gap_args.lens_it, "tuned lens dir for the IT side");
    gap_cmd->add_option("--late-fraction", gap_args.late_fraction)->capture_default_str();
    gap_cmd->add_option("--reference-layer", gap_args.reference_layer,
                        "endpoint-free reference layer (-1 = floor(0.8 L))")
        ->capture_default_str();
    gap_cmd->add_option("--tau", gap_args.tau, "commitment threshold")->capture_default_str();
    gap_cmd->add_option("--forced-steps", gap_args.forced_steps)->capture_default_str();
    gap_cmd->add_option("--resamples", gap_args.resamples)->capture_default_str();
    gap_cmd->add_option("--seed", gap_args.seed)->capture_default_str();
    gap_cmd->add_option("--workers", gap_args.workers)->capture_default_str();
    gap_cmd->add_flag("--dump-curves", gap_args.dump_curves, "also write curves.csv");
    gap_cmd->add_flag("--flips-vs-final", gap_args.flips_vs_final,
                      "count flips against the final top-1 instead of adjacent pairs");
    gap_cmd->add_option("--out", gap_args.out)->required();

    // --- match ---
    struct {
        std::string rows, out;
        int n_bins = 5, resamples = 2000;
        uint64_t seed = 0;
    } match_args;
    auto* match_cmd = app.add_subcommand("match", "endpoint-matched (CEM) effect from a rows file");
    match_cmd->add_option("--rows", match_args.rows, "rows.csv or rows.jsonl")->required();
    match_cmd->add_option("--n-bins", match_args.n_bins)->capture_default_str();
    match_cmd->add_option("--resamples", match_args.resamples)->capture_default_str();
    match_cmd->add_option("--seed", match_args.seed)->capture_default_str();
    match_cmd->add_option("--out", match_args.out)->required();

    // --- intervene ---
    struct {
        std::string pt, it, corpus, window = "late", out, config;
        double late_fraction = 0.2;
        int forced_steps = 128, resamples = 2000, workers = 0, random_seeds = 0;
        uint64_t seed = 0;
        bool graft = false, swap = false;
    } iv_args;
    auto* iv_cmd = app.add_subcommand("intervene", "matched-prefix MLP graft/swap experiments");
    iv_cmd->add_option("--config", iv_args.config,
                       "experiment config JSON ({pt_path, it_path, prompts_path, windows | "
                       "audit, forced_steps, seeds, late_fraction, output_dir}); overrides "
                       "the other flags");
    iv_cmd->add_option("--pt", iv_args.pt);
    iv_cmd->add_option("--it", iv_args.it);
    iv_cmd->add_option("--corpus", iv_args.corpus);
    iv_cmd->add_option("--window", iv_args.window, "early|mid|late|lo-hi")->capture_default_str();
    iv_cmd->add_flag("--graft", iv_args.graft, "IT window into PT host (default: both)");
    iv_cmd->add_flag("--swap", iv_args.swap, "PT window into IT host (default: both)");
    iv_cmd->add_option("--random-seeds", iv_args.random_seeds,
                       "also run the matched random control with this many seeds");
    iv_cmd->add_option("--late-fraction", iv_args.late_fraction)->capture_default_str();
    iv_cmd->add_option("--forced-steps", iv_args.forced_steps)->capture_default_str();
    iv_cmd->add_option("--resamples", iv_args.resamples)->capture_default_str();
    iv_cmd->add_option("--seed", iv_args.seed)->capture_default_str();
    iv_cmd->add_option("--workers", iv_args.workers)->capture_default_str();
    iv_cmd->add_option("--out", iv_args.out);

    // --- audit ---
    struct {
        std::string pt, it, corpus, out;
        double late_fraction = 0.2;
        int forced_steps = 128, resamples = 2000, workers = 0;
        uint64_t seed = 0;
    } audit_args;
    auto* audit_cmd = app.add_subcommand("audit", "six-window width/center graft+swap audit");
    audit_cmd->add_option("--pt", audit_args.pt)->required();
    audit_cmd->add_option("--it", audit_args.it)->required();
    audit_cmd->add_option("--corpus", audit_args.corpus)->required();
    audit_cmd->add_option("--late-fraction", audit_args.late_fraction)->capture_default_str();
    audit_cmd->add_option("--forced-steps", audit_args.forced_steps)->capture_default_str();
    audit_cmd->add_option("--resamples", audit_args.resamples)->capture_default_str();
    audit_cmd->add_option("--seed", audit_args.seed)->capture_default_str();
    audit_cmd->add_option("--workers", audit_args.workers)->capture_default_str();
    audit_cmd->add_option("--out", audit_args.out)->required();

    // --- replay ---
    struct {
        std::string pt, it, corpus, teacher = "it_native", decoding = "greedy", out;
        int max_new = 16, n_bins = 5, resamples = 2000, workers = 0;
        double temperature = 1.0, late_fraction = 0.2;
        uint64_t seed = 0;
    } replay_args;
    auto* replay_cmd = app.add_subcommand("replay", "fixed-history template replay cells");
    replay_cmd->add_option("--pt", replay_args.pt)->required();
    replay_cmd->add_option("--it", replay_args.it)->required();
    replay_cmd->add_option("--corpus", replay_args.corpus)->required();
    replay_cmd->add_option("--teacher", replay_args.teacher, "it_native|pt_raw")
        ->capture_default_str();
    replay_cmd->add_option("--max-new", replay_args.max_new)->capture_default_str();
    replay_cmd->add_option("--decoding", replay_args.decoding, "greedy|temperature")
        ->capture_default_str();
    replay_cmd->add_option("--temperature", replay_args.temperature)->capture_default_str();
    replay_cmd->add_option("--n-bins", replay_args.n_bins)->capture_default_str();
    replay_cmd->add_option("--late-fraction", replay_args.late_fraction)->capture_default_str();
    replay_cmd->add_option("--resamples", replay_args.resamples)->capture_default_str();
    replay_cmd->add_option("--seed", replay_args.seed)->capture_default_str();
    replay_cmd->add_option("--workers", replay_args.workers)->capture_default_str();
    replay_cmd->add_option("--out", replay_args.out)->required();

    // --- report ---
    struct {
        std::string summaries, out, claims;
    } report_args;
    auto* report_cmd = app.add_subcommand("report", "render tables / check claims from summaries");
    auto* render_cmd = report_cmd->add_subcommand("render", "render summary JSONs into tables");
    render_cmd->add_option("--summaries", report_args.summaries)->required();
    render_cmd->add_option("--out", report_args.out)->required();
    auto* check_cmd = report_cmd->add_subcommand("check", "re-derive quoted numbers and compare");
    check_cmd->add_option("--summaries", report_args.summaries)->required();
    check_cmd->add_option("--claims", report_args.claims)->required();
    report_cmd->require_subcommand(1);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            return run_synth(synth_args);
        }
        if (*corpus_cmd) {
            const auto corpus =
                make_synthetic_corpus(corpus_args.seed, corpus_args.n_prompts, corpus_args.len,
                                      corpus_args.clusters, corpus_args.max_token);
            save_corpus(corpus, corpus_args.out);
            {
                std::ofstream cf(corpus_args.out + ".run_config.json");
                cf << json{{"subcommand", "corpus"},
                           {"seed", corpus_args.seed},
                           {"n_prompts", corpus_args.n_prompts},
                           {"len", corpus_args.len},
                           {"clusters", corpus_args.clusters},
                           {"max_token", corpus_args.max_token}}
                          .dump(2)
                   << "\n";
            }
            std::printf("wrote %s (%d prompts)\n", corpus_args.out.c_str(), corpus_args.n_prompts);
            return 0;
        }
        if (*trace_cmd) {
            const checkpoint model = load_checkpoint(trace_args.model);
            const auto tokens = parse_token_list(trace_args.tokens);
            const layer_trace trace = forward_trace(model, tokens);
            raw_lens lens{&model};
            std::vector<curve_dump_entry> entries;
            for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
                const auto decodes = decode_layers(trace, pos, lens.decoder());
                const auto curve = curve_from_decodes(decodes, softmax(trace.logits(pos)));
                for (int l = 0; l < model.config.n_layers; ++l) {
                    entries.push_back({model.config.family_id, model.config.role, "raw",
                                       "cli#" + std::to_string(pos), "cli", l,
                                       curve.values[static_cast<size_t>(l)]});
                }
            }
            const fs::path out(trace_args.out);
            write_curve_csv(entries, out / "curves.csv");
            write_run_config(out, json{{"subcommand", "trace"},
                                       {"model", trace_args.model},
                                       {"tokens", tokens}});
            std::printf("wrote %s/curves.csv\n", trace_args.out.c_str());
            return 0;
        }
        if (*fit_cmd) {
            const checkpoint model = load_checkpoint(fit_args.model);
            const auto corpus = load_corpus(fit_args.corpus);
            lens_hyperparams hp;
            hp.steps = fit_args.steps;
            hp.step_size = fit_args.step_size;
            hp.batch = fit_args.batch;
            hp.seed = fit_args.seed;
            hp.corpus_id = fit_args.corpus;
            const tuned_lens lens = fit_tuned_lens(model, token_sequences(corpus), hp);
            save_tuned_lens(lens, fit_args.out);
            write_run_config(fit_args.out, json{{"subcommand", "fit-lens"},
                                                {"model", fit_args.model},
                                                {"corpus", fit_args.corpus},
                                                {"steps", hp.steps},
                                                {"step_size", hp.step_size},
                                                {"batch", hp.batch},
                                                {"seed", hp.seed},
                                                {"initial_loss", lens.meta.initial_loss},
                                                {"final_loss", lens.meta.final_loss}});
            std::printf("fit loss %.6f -> %.6f, wrote %s\n", lens.meta.initial_loss,
                        lens.meta.final_loss, fit_args.out.c_str());
            return 0;
        }
        if (*gap_cmd) {
            const checkpoint pt = load_checkpoint(gap_args.pt);
            const checkpoint it = load_checkpoint(gap_args.it);
            const auto prompts = load_corpus(gap_args.corpus);
            std::optional<tuned_lens> lens_pt, lens_it;
            if (!gap_args.lens_pt.empty()) {
                lens_pt = load_tuned_lens(gap_args.lens_pt, pt.config);
            }
            if (!gap_args.lens_it.empty()) {
                lens_it = load_tuned_lens(gap_args.lens_it, it.config);
            }
            gap_params params;
            params.late_fraction = gap_args.late_fraction;
            params.reference_layer = gap_args.reference_layer;
            params.commitment_tau = gap_args.tau;
            params.forced_steps = gap_args.forced_steps;
            params.boot = {gap_args.resamples, gap_args.seed};
            params.workers = gap_args.workers;
            params.dump_curves = gap_args.dump_curves;
            params.flips_vs_final = gap_args.flips_vs_final;
            const gap_output out = run_gap_pipeline(pt, it, prompts,
                                                     lens_pt ? &*lens_pt : nullptr,
                                                     lens_it ? &*lens_it : nullptr, params);
            const fs::path dir(gap_args.out);
            write_rows_csv(out.rows, dir / "rows.csv");
            if (params.dump_curves) {
                write_curve_csv(out.curves, dir / "curves.csv");
            }
            save_summary(gap_summary(out, params), dir / "summary.json");
            write_run_config(dir, json{{"subcommand", "gap"},
                                       {"pt", gap_args.pt},
                                       {"it", gap_args.it},
                                       {"corpus", gap_args.corpus},
                                       {"late_fraction", params.late_fraction},
                                       {"reference_layer", out.reference_layer},
                                       {"commitment_tau", params.commitment_tau},
                                       {"forced_steps", params.forced_steps},
                                       {"resamples", params.boot.n_resamples},
                                       {"seed", params.boot.seed}});
            print_estimate("late gap effect (raw)", out.late_gap_effect_raw);
            if (out.late_gap_effect_tuned) {
                print_estimate("late gap effect (tuned)", *out.late_gap_effect_tuned);
            }
            print_estimate("adjacent JS effect", out.adjacent_js_effect);
            print_estimate("future top-1 flips effect", out.flips_effect);
            return 0;
        }
        if (*match_cmd) {
            const auto rows = load_rows(match_args.rows);
            const match_output out =
                run_match_pipeline(rows, match_args.n_bins, {match_args.resamples, match_args.seed});
            const fs::path dir(match_args.out);
            save_summary(match_summary(out, match_args.n_bins), dir / "summary.json");
            write_run_config(dir, json{{"subcommand", "match"},
                                       {"rows", match_args.rows},
                                       {"n_bins", match_args.n_bins},
                                       {"resamples", match_args.resamples},
                                       {"seed", match_args.seed}});
            std::printf("retention %.3f (pt %.3f, it %.3f), max SMD %.3f%s\n", out.match.retention,
                        out.match.retention_pt, out.match.retention_it, out.max_smd,
                        out.balance_flag ? "  [BALANCE FLAG]" : "");
            print_estimate("matched effect (raw)", out.effect_raw);
            if (out.effect_tuned) {
                print_estimate("matched effect (tuned)", *out.effect_tuned);
            }
            return 0;
        }
        if (*iv_cmd) {
            if (!iv_args.config.empty()) {
                return run_intervene_config(iv_args.config);
            }
            if (iv_args.pt.empty() || iv_args.it.empty() || iv_args.corpus.empty() ||
                iv_args.out.empty()) {
                fail("intervene: --pt/--it/--corpus/--out are required without --config");
            }
            const checkpoint pt = load_checkpoint(iv_args.pt);
            const checkpoint it = load_checkpoint(iv_args.it);
            const auto prompts = load_corpus(iv_args.corpus);
            const window_spec window = parse_window(iv_args.window, pt.config.n_layers);
            intervention_params params;
            params.late_fraction = iv_args.late_fraction;
            params.forced_steps = iv_args.forced_steps;
            params.boot = {iv_args.resamples, iv_args.seed};
            params.workers = iv_args.workers;
            const bool both = !iv_args.graft && !iv_args.swap;
            std::vector<intervention_outcome> outcomes;
            const fs::path dir(iv_args.out);
            if (iv_args.random_seeds > 0) {
                std::vector<uint64_t> seeds;
                for (int s = 0; s < iv_args.random_seeds; ++s) {
                    seeds.push_back(iv_args.seed + static_cast<uint64_t>(s));
                }
                const auto rc = run_random_control(pt, it, window, prompts, seeds, params);
                outcomes.push_back(rc.true_graft);
                outcomes.push_back(rc.random);
                write_intervention_rows_csv(rc.true_graft, dir / "rows_true_graft.csv");
                write_intervention_rows_csv(rc.random, dir / "rows_random_control.csv");
                print_estimate("true graft delta", rc.true_graft.delta_late);
                print_estimate("random control delta", rc.random.delta_late);
            } else {
                if (both || iv_args.graft) {
                    outcomes.push_back(run_graft_experiment(pt, it, window, prompts, params));
                    write_intervention_rows_csv(outcomes.back(),
                                                dir / ("rows_" + outcomes.back().arm + ".csv"));
                    print_estimate(outcomes.back().arm + " delta", outcomes.back().delta_late);
                }
                if (both || iv_args.swap) {
                    outcomes.push_back(run_swap_experiment(it, pt, window, prompts, params));
                    write_intervention_rows_csv(outcomes.back(),
                                                dir / ("rows_" + outcomes.back().arm + ".csv"));
                    print_estimate(outcomes.back().arm + " delta", outcomes.back().delta_late);
                }
            }
            save_summary(intervention_summary(outcomes, "interventions"), dir / "summary.json");
            write_run_config(dir, json{{"subcommand", "intervene"},
                                       {"pt", iv_args.pt},
                                       {"it", iv_args.it},
                                       {"corpus", iv_args.corpus},
                                       {"window", window.range_text()},
                                       {"random_seeds", iv_args.random_seeds},
                                       {"late_fraction", params.late_fraction},
                                       {"forced_steps", params.forced_steps},
                                       {"resamples", params.boot.n_resamples},
                                       {"seed", params.boot.seed}});
            return 0;
        }
        if (*audit_cmd) {
            const checkpoint pt = load_checkpoint(audit_args.pt);
            const checkpoint it = load_checkpoint(audit_args.it);
            const auto prompts = load_corpus(audit_args.corpus);
            intervention_params params;
            params.late_fraction = audit_args.late_fraction;
            params.forced_steps = audit_args.forced_steps;
            params.boot = {audit_args.resamples, audit_args.seed};
            params.workers = audit_args.workers;
            const auto audit = window_audit(pt, it, prompts, params);
            const fs::path dir(audit_args.out);
            const summary s = audit_summary(audit, pt.config.n_layers);
            save_summary(s, dir / "summary.json");
            for (const auto& row : audit) {
                write_intervention_rows_csv(row.graft, dir / ("rows_" + row.graft.arm + ".csv"));
                write_intervention_rows_csv(row.swap, dir / ("rows_" + row.swap.arm + ".csv"));
            }
            write_run_config(dir, json{{"subcommand", "audit"},
                                       {"pt", audit_args.pt},
                                       {"it", audit_args.it},
                                       {"corpus", audit_args.corpus},
                                       {"window_geometry", s.meta.at("window_geometry")},
                                       {"late_fraction", params.late_fraction},
                                       {"forced_steps", params.forced_steps},
                                       {"resamples", params.boot.n_resamples},
                                       {"seed", params.boot.seed}});
            for (const auto& row : audit) {
                std::printf("%-20s graft %s | swap %s\n", row.window.label.c_str(),
                            format_estimate(row.graft.delta_late).c_str(),
                            format_estimate(row.swap.delta_late).c_str());
            }
            return 0;
        }
        if (*replay_cmd) {
            const checkpoint pt = load_checkpoint(replay_args.pt);
            const checkpoint it = load_checkpoint(replay_args.it);
            const auto prompts = load_corpus(replay_args.corpus);
            replay_run_params params;
            params.teacher = replay_args.teacher;
            params.max_new_tokens = replay_args.max_new;
            params.decoding.greedy = replay_args.decoding == "greedy";
            params.decoding.temperature = replay_args.temperature;
            params.decoding.seed = replay_args.seed;
            params.late_fraction = replay_args.late_fraction;
            params.n_bins = replay_args.n_bins;
            params.boot = {replay_args.resamples, replay_args.seed};
            params.workers = replay_args.workers;
            const replay_output out = run_replay_pipeline(pt, it, prompts, params);
            const fs::path dir(replay_args.out);
            write_replay_rows_csv(out.result, dir / "rows.csv");
            save_summary(replay_summary(out, params), dir / "summary.json");
            write_run_config(dir, json{{"subcommand", "replay"},
                                       {"pt", replay_args.pt},
                                       {"it", replay_args.it},
                                       {"corpus", replay_args.corpus},
                                       {"teacher", params.teacher},
                                       {"max_new_tokens", params.max_new_tokens},
                                       {"decoding", replay_args.decoding},
                                       {"late_fraction", params.late_fraction},
                                       {"n_bins", params.n_bins},
                                       {"resamples", params.boot.n_resamples},
                                       {"seed", params.boot.seed}});
            for (const auto& [name, e] : out.paired) {
                print_estimate("paired " + name, e);
            }
            std::printf("quality: malformed %zu, missing aligned %zu\n", out.result.malformed,
                        out.result.missing_aligned);
            return 0;
        }
        if (*report_cmd) {
            if (*render_cmd) {
                const auto summaries = load_summaries_dir(report_args.summaries);
                render_tables(summaries, fs::path(report_args.out));
                std::printf("rendered %zu tables into %s\n", summaries.size(),
                            report_args.out.c_str());
                return 0;
            }
            const auto results = claim_check(report_args.summaries, report_args.claims);
            size_t failed = 0;
            for (const auto& r : results) {
                std::printf("[%s] %s%s%s\n", r.pass ? "PASS" : "FAIL", r.id.c_str(),
                            r.pass ? "" : ": ", r.pass ? "" : r.detail.c_str());
                failed += r.pass ? 0 : 1;
            }
            std::printf("%zu/%zu claims pass\n", results.size() - failed, results.size());
            return failed == 0 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
