#include "convgap/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "convgap/common.hpp"
#include "convgap/metrics.hpp"
#include "convgap/parallel.hpp"
#include "convgap/rng.hpp"

namespace convgap {

using nlohmann::json;

void write_rows_csv(const std::vector<endpoint_row>& rows, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path);
    if (!f) fail("write_rows_csv: cannot write %s", path.c_str());
    f << "token_step_id,cluster_id,role,confidence,entropy,margin,late_gap_raw,late_gap_tuned\n";
    for (const auto& r : rows) {
        f << r.token_step_id << ',' << r.cluster_id << ','
          << (r.role == row_role::pt ? "pt" : "it") << ',' << strfmt("%.17g", r.confidence) << ','
          << strfmt("%.17g", r.entropy) << ',' << strfmt("%.17g", r.margin) << ','
          << strfmt("%.17g", r.late_gap_raw) << ',';
        if (r.late_gap_tuned) {
            f << strfmt("%.17g", *r.late_gap_tuned);
        }
        f << '\n';
    }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

endpoint_row row_from_fields(const std::vector<std::string>& fields, size_t lineno) {
    if (fields.size() != 8) {
        fail("load_rows: line %zu has %zu fields, expected 8", lineno, fields.size());
    }
    endpoint_row r;
    r.token_step_id = fields[0];
    r.cluster_id = fields[1];
    if (fields[2] == "pt") {
        r.role = row_role::pt;
    } else if (fields[2] == "it") {
        r.role = row_role::it;
    } else {
        fail("load_rows: line %zu has unknown role '%s'", lineno, fields[2].c_str());
    }
    r.confidence = std::stod(fields[3]);
    r.entropy = std::stod(fields[4]);
    r.margin = std::stod(fields[5]);
    r.late_gap_raw = std::stod(fields[6]);
    if (!fields[7].empty()) {
        r.late_gap_tuned = std::stod(fields[7]);
    }
    return r;
}

}  // namespace

std::vector<endpoint_row> load_rows(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) fail("load_rows: cannot open %s", path.c_str());
    std::vector<endpoint_row> out;
    std::string line;
    size_t lineno = 0;
    const bool jsonl = path.extension() == ".jsonl";
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        if (jsonl) {
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                fail("load_rows: %s line %zu: %s", path.c_str(), lineno, e.what());
            }
            endpoint_row r;
            r.token_step_id = j.at("token_step_id").get<std::string>();
            r.cluster_id = j.at("cluster_id").get<std::string>();
            const std::string role = j.at("role").get<std::string>();
            if (role != "pt" && role != "it") {
                fail("load_rows: %s line %zu: unknown role '%s'", path.c_str(), lineno,
                     role.c_str());
            }
            r.role = role == "pt" ? row_role::pt : row_role::it;
            r.confidence = j.at("confidence").get<double>();
            r.entropy = j.at("entropy").get<double>();
            r.margin = j.at("margin").get<double>();
            r.late_gap_raw = j.at("late_gap_raw").get<double>();
            if (j.contains("late_gap_tuned") && !j.at("late_gap_tuned").is_null()) {
                r.late_gap_tuned = j.at("late_gap_tuned").get<double>();
            }
            out.push_back(std::move(r));
        } else {
            if (lineno == 1 && line.rfind("token_step_id", 0) == 0) {
                continue;  // header
            }
            out.push_back(row_from_fields(split_csv_line(line), lineno));
        }
    }
    if (out.empty()) {
        fail("load_rows: %s holds no rows", path.c_str());
    }
    return out;
}

void write_curve_csv(const std::vector<curve_dump_entry>& entries,
                     const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path);
    if (!f) fail("write_curve_csv: cannot write %s", path.c_str());
    f << "family,checkpoint_role,lens_kind,token_step_id,cluster_id,layer,value_nats\n";
    for (const auto& e : entries) {
        f << e.family << ',' << e.checkpoint_role << ',' << e.lens_kind << ',' << e.token_step_id
          << ',' << e.cluster_id << ',' << e.layer << ',' << strfmt("%.17g", e.value_nats) << '\n';
    }
}

// --- gap pipeline -------------------------------------------------------

namespace {

struct per_prompt_gap {
    double late_raw_mean = 0.0;
    double late_tuned_mean = 0.0;
    double adjacent_js_mean = 0.0;
    double flips_mean = 0.0;
    double commitment_mean = 0.0;
    std::vector<endpoint_row> rows;
    std::vector<curve_dump_entry> curves;
};

per_prompt_gap score_prompt(const checkpoint& model, const prompt_seq& prompt,
                            const tuned_lens* lens, const gap_params& params, row_role role) {
    std::vector<int> tokens = prompt.tokens;
    if (params.forced_steps > 0 && tokens.size() > static_cast<size_t>(params.forced_steps)) {
        tokens.resize(static_cast<size_t>(params.forced_steps));
    }
    const layer_trace trace = forward_trace(model, tokens);
    raw_lens raw{&model};
    const auto raw_decode = raw.decoder();
    const int n_layers = model.config.n_layers;
    const int ref = params.reference_layer >= 0
                        ? params.reference_layer
                        : static_cast<int>(std::floor(0.8 * n_layers));

    per_prompt_gap out;
    for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
        const auto decodes = decode_layers(trace, pos, raw_decode);
        const auto final_dist = softmax(trace.logits(pos));
        const auto curve = curve_from_decodes(decodes, final_dist);
        const double lg_raw = late_gap(curve.values, params.late_fraction);
        const auto stats = endpoint_stats(final_dist);

        endpoint_row row;
        row.token_step_id = prompt.prompt_id + "#" + std::to_string(pos);
        row.cluster_id = prompt.cluster_id;
        row.role = role;
        row.confidence = stats.confidence;
        row.entropy = stats.entropy;
        row.margin = stats.margin;
        row.late_gap_raw = lg_raw;

        if (lens != nullptr) {
            const auto tuned_decode = lens->decoder(model);
            const auto tuned_decodes = decode_layers(trace, pos, tuned_decode);
            const auto tuned_curve = curve_from_decodes(tuned_decodes, final_dist);
            row.late_gap_tuned = late_gap(tuned_curve.values, params.late_fraction);
            out.late_tuned_mean += *row.late_gap_tuned;
        }

        out.late_raw_mean += lg_raw;
        out.adjacent_js_mean += adjacent_js_profile(decodes, ref, n_layers - 1);
        const int flip_ref = std::min(ref, n_layers - 2);
        out.flips_mean += params.flips_vs_final ? future_top1_flips_vs_final(decodes, flip_ref)
                                                : future_top1_flips(decodes, flip_ref);
        out.commitment_mean += commitment_depth(curve.values, params.commitment_tau);
        out.rows.push_back(std::move(row));

        if (params.dump_curves) {
            for (int l = 0; l < n_layers; ++l) {
                out.curves.push_back({model.config.family_id,
                                      role == row_role::pt ? "pt" : "it", "raw",
                                      out.rows.back().token_step_id, prompt.cluster_id, l,
                                      curve.values[static_cast<size_t>(l)]});
            }
        }
    }
    const double n = static_cast<double>(trace.n_positions());
    out.late_raw_mean /= n;
    out.late_tuned_mean /= n;
    out.adjacent_js_mean /= n;
    out.flips_mean /= n;
    out.commitment_mean /= n;
    return out;
}

}  // namespace

gap_output run_gap_pipeline(const checkpoint& pt, const checkpoint& it,
                            const std::vector<prompt_seq>& prompts, const tuned_lens* lens_pt,
                            const tuned_lens* lens_it, const gap_params& params) {
    if (prompts.empty()) {
        fail("run_gap_pipeline: no prompts");
    }
    if (!pt.config.paired_with(it.config)) {
        fail("run_gap_pipeline: checkpoints are not paired");
    }
    const int n_layers = pt.config.n_layers;
    gap_output out;
    out.reference_layer = params.reference_layer >= 0
                              ? params.reference_layer
                              : static_cast<int>(std::floor(0.8 * n_layers));

    std::vector<per_prompt_gap> pt_scores(prompts.size()), it_scores(prompts.size());
    const int workers = params.workers > 0 ? params.workers : default_workers();
    parallel_for(prompts.size(), workers, [&](size_t i) {
        pt_scores[i] = score_prompt(pt, prompts[i], lens_pt, params, row_role::pt);
        it_scores[i] = score_prompt(it, prompts[i], lens_it, params, row_role::it);
    });

    std::vector<double> raw_diffs, tuned_diffs, js_diffs, flip_diffs;
    std::vector<std::string> clusters;
    for (size_t i = 0; i < prompts.size(); ++i) {
        raw_diffs.push_back(it_scores[i].late_raw_mean - pt_scores[i].late_raw_mean);
        if (lens_pt != nullptr && lens_it != nullptr) {
            tuned_diffs.push_back(it_scores[i].late_tuned_mean - pt_scores[i].late_tuned_mean);
        }
        js_diffs.push_back(it_scores[i].adjacent_js_mean - pt_scores[i].adjacent_js_mean);
        flip_diffs.push_back(it_scores[i].flips_mean - pt_scores[i].flips_mean);
        clusters.push_back(prompts[i].cluster_id);
        out.commitment_mean_pt += pt_scores[i].commitment_mean;
        out.commitment_mean_it += it_scores[i].commitment_mean;
    }
    out.commitment_mean_pt /= static_cast<double>(prompts.size());
    out.commitment_mean_it /= static_cast<double>(prompts.size());

    out.late_gap_effect_raw = cluster_bootstrap_mean(raw_diffs, clusters, params.boot, "nats");
    if (!tuned_diffs.empty()) {
        out.late_gap_effect_tuned =
            cluster_bootstrap_mean(tuned_diffs, clusters, params.boot, "nats");
    }
    out.adjacent_js_effect = cluster_bootstrap_mean(js_diffs, clusters, params.boot, "JS");
    out.flips_effect = cluster_bootstrap_mean(flip_diffs, clusters, params.boot, "flips");

    for (auto& scores : pt_scores) {
        out.rows.insert(out.rows.end(), scores.rows.begin(), scores.rows.end());
        out.curves.insert(out.curves.end(), scores.curves.begin(), scores.curves.end());
    }
    for (auto& scores : it_scores) {
        out.rows.insert(out.rows.end(), scores.rows.begin(), scores.rows.end());
        out.curves.insert(out.curves.end(), scores.curves.begin(), scores.curves.end());
    }
    return out;
}

summary gap_summary(const gap_output& out, const gap_params& params) {
    summary s;
    s.claim_group = "gap_pipeline";
    auto add = [&](const std::string& name, const estimate_with_ci& e, const std::string& note) {
        summary_row row = make_row(name, e);
        row.note = note;
        s.rows.push_back(row);
    };
    add("late_gap_effect_raw", out.late_gap_effect_raw, "IT minus PT, raw lens");
    if (out.late_gap_effect_tuned) {
        add("late_gap_effect_tuned", *out.late_gap_effect_tuned, "IT minus PT, tuned lens");
    }
    add("adjacent_js_effect", out.adjacent_js_effect,
        "endpoint-free adjacent-layer movement, IT minus PT");
    add("flips_effect", out.flips_effect,
        params.flips_vs_final
            ? "endpoint-free top-1 flips vs the final top-1 (variant definition), IT minus PT"
            : "endpoint-free adjacent-pair top-1 flips, IT minus PT");
    summary_row commit_pt;
    commit_pt.name = "commitment_mean_pt";
    commit_pt.estimate = out.commitment_mean_pt;
    commit_pt.units = "layers";
    commit_pt.note = "summary only";
    s.rows.push_back(commit_pt);
    summary_row commit_it = commit_pt;
    commit_it.name = "commitment_mean_it";
    commit_it.estimate = out.commitment_mean_it;
    s.rows.push_back(commit_it);
    s.meta = json{{"late_fraction", params.late_fraction},
                  {"reference_layer", out.reference_layer},
                  {"commitment_tau", params.commitment_tau},
                  {"flip_definition", params.flips_vs_final ? "vs_final_top1" : "adjacent_pair"},
                  {"kl_epsilon_floor", 1e-12}};
    return s;
}

// --- matching pipeline ----------------------------------------------------

match_output run_match_pipeline(const std::vector<endpoint_row>& rows, int n_bins,
                                const bootstrap_params& boot) {
    std::vector<endpoint_row> pt_rows, it_rows;
    for (const auto& r : rows) {
        (r.role == row_role::pt ? pt_rows : it_rows).push_back(r);
    }
    match_output out;
    out.match = cem_match(pt_rows, it_rows, n_bins);
    bool tuned = !pt_rows.empty() && !it_rows.empty();
    for (const auto& r : rows) {
        tuned = tuned && r.late_gap_tuned.has_value();
    }
    for (covariate c : kall_covariates) {
        const double post = smd(out.match, pt_rows, it_rows, c);
        out.smd_by_covariate[to_string(c)] = post;
        out.pre_smd_by_covariate[to_string(c)] = smd_unmatched(pt_rows, it_rows, c);
        out.max_smd = std::max(out.max_smd, post);
    }
    out.balance_flag = out.max_smd > ksmd_flag_threshold;
    out.effect_raw = matched_effect(out.match, pt_rows, it_rows, match_metric::late_gap_raw, boot);
    if (tuned) {
        out.effect_tuned =
            matched_effect(out.match, pt_rows, it_rows, match_metric::late_gap_tuned, boot);
    }
    return out;
}

summary match_summary(const match_output& out, int n_bins) {
    summary s;
    s.claim_group = "endpoint_matching";
    summary_row effect = make_row("matched_effect_raw", out.effect_raw);
    effect.note = "endpoint-matched IT minus PT late gap";
    s.rows.push_back(effect);
    if (out.effect_tuned) {
        summary_row tuned = make_row("matched_effect_tuned", *out.effect_tuned);
        tuned.note = "endpoint-matched IT minus PT late gap, tuned lens";
        s.rows.push_back(tuned);
    }
    auto plain = [&](const std::string& name, double v, const std::string& units) {
        summary_row row;
        row.name = name;
        row.estimate = v;
        row.units = units;
        s.rows.push_back(row);
    };
    plain("retention", out.match.retention, "fraction");
    plain("retention_pt", out.match.retention_pt, "fraction");
    plain("retention_it", out.match.retention_it, "fraction");
    plain("max_smd", out.max_smd, "sd");
    for (const auto& [name, v] : out.smd_by_covariate) {
        plain("smd." + name, v, "sd");
    }
    s.meta = json{{"n_bins", n_bins},
                  {"weighting", "min-count stratum weights"},
                  {"smd_flag_threshold", ksmd_flag_threshold},
                  {"balance_flag", out.balance_flag},
                  {"n_strata", out.match.strata.size()}};
    return s;
}

// --- interventions ---------------------------------------------------------

void write_intervention_rows_csv(const intervention_outcome& outcome,
                                 const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path);
    if (!f) fail("write_intervention_rows_csv: cannot write %s", path.c_str());
    f << "arm,window,prompt_id,cluster_id,host_late,arm_late,delta_late,host_window,arm_window,"
         "delta_window\n";
    for (const auto& r : outcome.rows) {
        f << outcome.arm << ',' << outcome.window.range_text() << ',' << r.prompt_id << ','
          << r.cluster_id << ',' << strfmt("%.17g", r.host_late) << ','
          << strfmt("%.17g", r.arm_late) << ',' << strfmt("%.17g", r.delta_late) << ','
          << strfmt("%.17g", r.host_window) << ',' << strfmt("%.17g", r.arm_window) << ','
          << strfmt("%.17g", r.delta_window) << '\n';
    }
}

summary intervention_summary(const std::vector<intervention_outcome>& outcomes,
                             const std::string& claim_group) {
    summary s;
    s.claim_group = claim_group;
    for (const auto& o : outcomes) {
        std::string note = "window " + o.window.range_text();
        if (o.arm == "random_control") {
            // The sampling family is part of the result: isotropic
            // unit-normalized directions, not a learned residual-projection
            // subspace.
            note += "; isotropic unit-normalized random directions";
        }
        summary_row late = make_row(o.arm + "/delta_late", o.delta_late);
        late.label = o.arm;
        late.note = note;
        s.rows.push_back(late);
        summary_row win = make_row(o.arm + "/delta_window", o.delta_window);
        win.label = o.arm;
        win.note = note;
        s.rows.push_back(win);
    }
    return s;
}

summary audit_summary(const std::vector<window_audit_row>& audit, int n_layers) {
    summary s;
    s.claim_group = "window_audit";
    json geometry = json::object();
    json row_order = json::array();
    for (const auto& row : audit) {
        geometry[row.window.label] = row.window.range_text();
        row_order.push_back(row.window.label);
        auto cell = [&](const std::string& col, const estimate_with_ci& e) {
            summary_row r = make_row(row.window.label + "/" + col, e);
            r.label = row.window.label;
            s.rows.push_back(r);
        };
        cell("final20_graft", row.graft.delta_late);
        cell("final20_swap", row.swap.delta_late);
        cell("window_graft", row.graft.delta_window);
        cell("window_swap", row.swap.delta_window);
    }
    // The emitted geometry header is the window-definition contract.
    s.meta = json{{"n_layers", n_layers}, {"window_geometry", geometry}, {"row_order", row_order}};
    return s;
}

// --- replay pipeline ---------------------------------------------------------

replay_output run_replay_pipeline(const checkpoint& pt, const checkpoint& it,
                                  const std::vector<prompt_seq>& prompts,
                                  const replay_run_params& params) {
    if (!pt.config.paired_with(it.config)) {
        fail("run_replay_pipeline: checkpoints are not paired");
    }
    const bool reverse = params.teacher == "pt_raw";
    if (!reverse && params.teacher != "it_native") {
        fail("run_replay_pipeline: unknown teacher '%s' (want it_native or pt_raw)",
             params.teacher.c_str());
    }

    replay_output out;
    out.continuations.resize(prompts.size());
    const checkpoint& teacher_model = reverse ? pt : it;
    const template_regime teacher_regime =
        reverse ? template_regime::raw : template_regime::native_chat;
    const int workers = params.workers > 0 ? params.workers : default_workers();
    parallel_for(prompts.size(), workers, [&](size_t i) {
        const auto context = serialize_prompt(prompts[i].tokens, teacher_regime, teacher_model);
        decoding_params decoding = params.decoding;
        decoding.seed = mix_seed({params.decoding.seed, hash_str(prompts[i].prompt_id)});
        out.continuations[i] =
            generate_continuation(teacher_model, context, params.max_new_tokens, decoding);
    });

    const std::vector<cell_spec> cells = {{"pt_raw", &pt, template_regime::raw},
                                          {"it_native", &it, template_regime::native_chat},
                                          {"it_raw", &it, template_regime::raw}};
    replay_params rp;
    rp.late_fraction = params.late_fraction;
    rp.workers = params.workers;
    out.result = replay_cells(prompts, out.continuations, cells, rp);

    const auto& pt_raw = out.result.rows_by_cell.at("pt_raw");
    const auto& it_native = out.result.rows_by_cell.at("it_native");
    const auto& it_raw = out.result.rows_by_cell.at("it_raw");
    out.paired["it_native_minus_pt_raw"] = paired_cell_effect(it_native, pt_raw, params.boot);
    out.paired["it_raw_minus_pt_raw"] = paired_cell_effect(it_raw, pt_raw, params.boot);
    out.paired["it_native_minus_it_raw"] = paired_cell_effect(it_native, it_raw, params.boot);
    out.matched["it_native_minus_pt_raw"] =
        paired_cell_effect_cem(it_native, pt_raw, params.n_bins, params.boot);
    out.matched["it_raw_minus_pt_raw"] =
        paired_cell_effect_cem(it_raw, pt_raw, params.n_bins, params.boot);
    out.matched["it_native_minus_it_raw"] =
        paired_cell_effect_cem(it_native, it_raw, params.n_bins, params.boot);
    return out;
}

void write_replay_rows_csv(const replay_result& result, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path);
    if (!f) fail("write_replay_rows_csv: cannot write %s", path.c_str());
    f << "prompt_id,step,cell,late_gap,confidence,entropy,margin\n";
    for (const auto& [cell, rows] : result.rows_by_cell) {
        for (const auto& r : rows) {
            f << r.prompt_id << ',' << r.step << ',' << cell << ',' << strfmt("%.17g", r.late_gap)
              << ',' << strfmt("%.17g", r.confidence) << ',' << strfmt("%.17g", r.entropy) << ','
              << strfmt("%.17g", r.margin) << '\n';
        }
    }
}

summary replay_summary(const replay_output& out, const replay_run_params& params) {
    summary s;
    s.claim_group = "replay_pipeline";
    for (const auto& [name, e] : out.paired) {
        summary_row row = make_row("paired/" + name, e);
        row.note = "paired same prompt/step";
        s.rows.push_back(row);
    }
    for (const auto& [name, m] : out.matched) {
        summary_row row = make_row("cem/" + name, m.effect);
        row.note = strfmt("retention %.3f; max SMD %.3f", m.retention, m.max_smd);
        s.rows.push_back(row);
    }
    summary_row malformed;
    malformed.name = "quality/malformed";
    malformed.estimate = static_cast<double>(out.result.malformed);
    malformed.units = "count";
    s.rows.push_back(malformed);
    summary_row missing;
    missing.name = "quality/missing_aligned";
    missing.estimate = static_cast<double>(out.result.missing_aligned);
    missing.units = "count";
    s.rows.push_back(missing);
    s.meta = json{{"teacher", params.teacher},
                  {"max_new_tokens", params.max_new_tokens},
                  {"decoding", params.decoding.greedy
                                   ? std::string("greedy")
                                   : strfmt("temperature=%.3f", params.decoding.temperature)},
                  {"late_fraction", params.late_fraction},
                  {"n_bins", params.n_bins}};
    return s;
}

void write_run_config(const std::filesystem::path& out_dir, const json& resolved) {
    std::filesystem::create_directories(out_dir);
    std::ofstream f(out_dir / "run_config.json");
    if (!f) fail("write_run_config: cannot write %s", (out_dir / "run_config.json").c_str());
    f << resolved.dump(2) << "\n";
}

}  // namespace convgap
