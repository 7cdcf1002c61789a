#include <doctest.h>

#include <fstream>

#include "convgap/common.hpp"
#include "convgap/metrics.hpp"
#include "convgap/pipelines.hpp"
#include "convgap/synthetic.hpp"
#include "test_helpers.hpp"

using namespace convgap;
using convgap::testing::temp_dir;

TEST_CASE("endpoint-row CSV round trip") {
    std::vector<endpoint_row> rows;
    for (int i = 0; i < 5; ++i) {
        endpoint_row r;
        r.token_step_id = "p0#" + std::to_string(i);
        r.cluster_id = "c" + std::to_string(i % 2);
        r.role = i % 2 == 0 ? row_role::pt : row_role::it;
        r.confidence = 0.1 * i + 0.05;
        r.entropy = 1.234567890123 + i;
        r.margin = 0.01 * i;
        r.late_gap_raw = 0.5 / (i + 1);
        if (i != 2) {
            r.late_gap_tuned = 0.25 / (i + 1);
        }
        rows.push_back(r);
    }
    temp_dir dir("rows");
    write_rows_csv(rows, dir.path / "rows.csv");
    const auto loaded = load_rows(dir.path / "rows.csv");
    REQUIRE(loaded.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(loaded[i].token_step_id == rows[i].token_step_id);
        CHECK(loaded[i].cluster_id == rows[i].cluster_id);
        CHECK(loaded[i].role == rows[i].role);
        CHECK(loaded[i].confidence == rows[i].confidence);
        CHECK(loaded[i].entropy == rows[i].entropy);
        CHECK(loaded[i].late_gap_raw == rows[i].late_gap_raw);
        CHECK(loaded[i].late_gap_tuned.has_value() == rows[i].late_gap_tuned.has_value());
    }
}

TEST_CASE("endpoint rows load from JSONL too") {
    temp_dir dir("rows_jsonl");
    std::ofstream f(dir.path / "rows.jsonl");
    f << R"({"token_step_id":"a#0","cluster_id":"c0","role":"pt","confidence":0.5,)"
      << R"("entropy":1.0,"margin":0.2,"late_gap_raw":0.7})" << "\n";
    f << R"({"token_step_id":"a#0","cluster_id":"c0","role":"it","confidence":0.5,)"
      << R"("entropy":1.0,"margin":0.2,"late_gap_raw":0.9,"late_gap_tuned":0.8})" << "\n";
    f.close();
    const auto rows = load_rows(dir.path / "rows.jsonl");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].role == row_role::pt);
    CHECK(rows[1].late_gap_tuned == 0.8);
}

TEST_CASE("corpus JSONL round trip") {
    const auto corpus = make_synthetic_corpus(3, 7, 9, 3, 100);
    temp_dir dir("corpus");
    save_corpus(corpus, dir.path / "c.jsonl");
    const auto loaded = load_corpus(dir.path / "c.jsonl");
    REQUIRE(loaded.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].prompt_id == corpus[i].prompt_id);
        CHECK(loaded[i].cluster_id == corpus[i].cluster_id);
        CHECK(loaded[i].tokens == corpus[i].tokens);
    }
    CHECK_THROWS_AS(static_cast<void>(load_corpus(dir.path / "missing.jsonl")), error);
}

TEST_CASE("future_top1_flips_vs_final counts disagreement with the last layer") {
    auto dist_peaked_at = [](size_t idx) {
        std::vector<double> p(4, 0.1);
        p[idx] = 0.7;
        return p;
    };
    const std::vector<std::vector<double>> seq = {dist_peaked_at(0), dist_peaked_at(0),
                                                  dist_peaked_at(1), dist_peaked_at(1),
                                                  dist_peaked_at(2)};
    CHECK(future_top1_flips_vs_final(seq, 0) == 4);
    CHECK(future_top1_flips_vs_final(seq, 2) == 2);
}

TEST_CASE("gap pipeline names the flip definition and honors the variant flag") {
    synth_spec spec;
    spec.seed = 19;
    spec.divergence_strength = 0.5;
    const auto [pt, it] = make_paired_checkpoints(spec);
    const auto prompts = make_synthetic_corpus(19, 8, 8, 4, synth_prompt_token_limit(spec.config));

    gap_params params;
    params.boot = {50, 1};
    const auto adjacent = run_gap_pipeline(pt, it, prompts, nullptr, nullptr, params);
    params.flips_vs_final = true;
    const auto vs_final = run_gap_pipeline(pt, it, prompts, nullptr, nullptr, params);

    const summary s1 = gap_summary(adjacent, gap_params{});
    CHECK(s1.meta.at("flip_definition") == "adjacent_pair");
    gap_params p2;
    p2.flips_vs_final = true;
    const summary s2 = gap_summary(vs_final, p2);
    CHECK(s2.meta.at("flip_definition") == "vs_final_top1");
    // both definitions see the planted flip surplus
    CHECK(adjacent.flips_effect.estimate > 0.0);
    CHECK(vs_final.flips_effect.estimate > 0.0);
}

TEST_CASE("matched effect on the planted pair is positive with CI excluding zero") {
    synth_spec spec;
    spec.seed = 23;
    spec.divergence_strength = 0.5;
    const auto [pt, it] = make_paired_checkpoints(spec);
    const auto prompts = make_synthetic_corpus(23, 16, 10, 8, synth_prompt_token_limit(spec.config));
    gap_params params;
    params.boot = {100, 2};
    const auto gap = run_gap_pipeline(pt, it, prompts, nullptr, nullptr, params);

    const auto match = run_match_pipeline(gap.rows, 5, {300, 2});
    CHECK(match.match.retention > 0.0);
    CHECK(match.match.retention <= 1.0);
    CHECK(match.effect_raw.estimate > 0.0);
    CHECK(match.effect_raw.ci_low > 0.0);
    CHECK(std::isfinite(match.max_smd));

    const summary s = match_summary(match, 5);
    CHECK(s.claim_group == "endpoint_matching");
    CHECK(s.meta.at("n_bins") == 5);
}

TEST_CASE("run-config echo lands beside outputs") {
    temp_dir dir("echo");
    write_run_config(dir.path / "out", nlohmann::json{{"subcommand", "test"}, {"seed", 1}});
    CHECK(std::filesystem::exists(dir.path / "out" / "run_config.json"));
}

TEST_CASE("curve dump CSV has the documented schema") {
    temp_dir dir("curves");
    std::vector<curve_dump_entry> entries = {
        {"synth", "pt", "raw", "p0#0", "c0", 0, 0.5},
        {"synth", "pt", "raw", "p0#0", "c0", 1, 0.25},
    };
    write_curve_csv(entries, dir.path / "curves.csv");
    std::ifstream f(dir.path / "curves.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "family,checkpoint_role,lens_kind,token_step_id,cluster_id,layer,value_nats");
    std::string line;
    size_t count = 0;
    while (std::getline(f, line)) {
        count += line.empty() ? 0 : 1;
    }
    CHECK(count == 2);
}
