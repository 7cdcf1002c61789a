#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "convgap/common.hpp"
#include "convgap/reporting.hpp"
#include "test_helpers.hpp"

using namespace convgap;
using convgap::testing::temp_dir;

namespace {

const std::filesystem::path kfixtures = CONVGAP_FIXTURE_DIR;

estimate_with_ci est(double e, double lo, double hi, const std::string& units) {
    estimate_with_ci out;
    out.estimate = e;
    out.ci_low = lo;
    out.ci_high = hi;
    out.units = units;
    return out;
}

}  // namespace

TEST_CASE("format_estimate exact string contract") {
    CHECK(format_estimate(est(0.425, 0.356, 0.493, "nats")) == "+0.425 nats [+0.356, +0.493]");
    CHECK(format_estimate(est(-0.509, -0.9, -0.2, "nats")) == "-0.509 nats [-0.900, -0.200]");
    CHECK(format_estimate(est(0.0, 0.0, 0.0, "nats")) == "+0.000 nats [+0.000, +0.000]");
    CHECK(format_estimate(est(0.052, 0.048, 0.057, "JS")) == "+0.052 JS [+0.048, +0.057]");
    CHECK(format_estimate(est(0.203, 0.19, 0.215, "flips")) == "+0.203 flips [+0.190, +0.215]");
}

TEST_CASE("count and plain formatting") {
    CHECK(format_count(1273606) == "1,273,606");
    CHECK(format_count(0) == "0");
    CHECK(format_count(999) == "999");
    CHECK(format_count(1000) == "1,000");
    CHECK(format_count(-1234567) == "-1,234,567");
    CHECK(format_plain(0.796, 3) == "0.796");
    CHECK(format_signed(0.34, 2) == "+0.34");
    CHECK(format_ci_cell(1.181, 1.153, 1.211) == "+1.181 [+1.153, +1.211]");
}

TEST_CASE("summary round trip") {
    summary s;
    s.claim_group = "unit_group";
    summary_row row = make_row("x", est(1.5, 1.0, 2.0, "nats"));
    row.note = "hello";
    s.rows.push_back(row);
    temp_dir dir("summary");
    save_summary(s, dir.path / "s.json");
    const summary loaded = load_summary(dir.path / "s.json");
    CHECK(loaded.claim_group == "unit_group");
    REQUIRE(loaded.rows.size() == 1);
    CHECK(loaded.rows[0].name == "x");
    CHECK(loaded.rows[0].estimate == 1.5);
    CHECK(loaded.rows[0].note == "hello");

    std::ofstream(dir.path / "bad.json") << "{\"rows\": []}";
    CHECK_THROWS_WITH_AS(static_cast<void>(load_summary(dir.path / "bad.json")),
                         doctest::Contains("claim_group"), error);
}

TEST_CASE("fixture render reproduces the quoted strings byte-exactly") {
    const auto summaries = load_summaries_dir(kfixtures / "summaries");
    const auto tables = render_tables(summaries, std::nullopt);

    const std::string& estimates = tables.at("estimates_main");
    CHECK(estimates.find("+0.425 nats [+0.356, +0.493]") != std::string::npos);
    CHECK(estimates.find("+0.762 nats [+0.709, +0.814]") != std::string::npos);
    CHECK(estimates.find("+0.052 JS [+0.048, +0.057]") != std::string::npos);
    CHECK(estimates.find("+0.203 flips [+0.190, +0.215]") != std::string::npos);

    const std::string& counts = tables.at("discovery_counts");
    CHECK(counts.find("1,273,606") != std::string::npos);
    CHECK(counts.find("Gemma 3 4B") != std::string::npos);

    const std::string& grid = tables.at("graft_swap");
    CHECK(grid.find("+0.34") != std::string::npos);
    CHECK(grid.find("-0.51") != std::string::npos);

    const std::string& audit = tables.at("window_audit");
    CHECK(audit.find("Pre-late half") != std::string::npos);
    CHECK(audit.find("-0.625") != std::string::npos);
    CHECK(audit.find("+0.365") != std::string::npos);

    const std::string& replay = tables.at("replay_grid");
    CHECK(replay.find("+1.181 [+1.153, +1.211]") != std::string::npos);
    CHECK(replay.find("retention 0.999; max SMD 0.061") != std::string::npos);

    // Appendix-B row order is preserved
    const auto pre = audit.find("Pre-late half");
    const auto term = audit.find("Terminal quarter");
    CHECK(pre < term);
}

TEST_CASE("rendering is byte-stable across runs and row order") {
    auto summaries = load_summaries_dir(kfixtures / "summaries");
    const auto first = render_tables(summaries, std::nullopt);
    for (auto& s : summaries) {
        std::reverse(s.rows.begin(), s.rows.end());
    }
    std::reverse(summaries.begin(), summaries.end());
    const auto second = render_tables(summaries, std::nullopt);
    CHECK(first == second);

    temp_dir dir("render");
    render_tables(summaries, dir.path / "tables");
    CHECK(std::filesystem::exists(dir.path / "tables" / "estimates_main.txt"));
    CHECK(std::filesystem::exists(dir.path / "tables" / "estimates_main.csv"));
}

TEST_CASE("empty summary renders as a header-only table") {
    summary s;
    s.claim_group = "empty_group";
    const auto tables = render_tables({s}, std::nullopt);
    const std::string& text = tables.at("empty_group");
    // header + rule, nothing else
    CHECK(std::count(text.begin(), text.end(), '\n') == 2);
}

TEST_CASE("claim check passes on the committed fixtures") {
    const auto results = claim_check(kfixtures / "summaries", kfixtures / "claims.jsonl");
    CHECK(results.size() >= 40);
    for (const auto& r : results) {
        INFO(r.id, ": ", r.detail);
        CHECK(r.pass);
    }
    CHECK(all_passed(results));
}

TEST_CASE("claim check fails when a fixture value is perturbed beyond tolerance") {
    temp_dir dir("perturb");
    const auto src = kfixtures / "summaries";
    for (const auto& entry : std::filesystem::directory_iterator(src)) {
        std::filesystem::copy_file(entry.path(), dir.path / entry.path().filename());
    }
    // perturb the raw late-KL estimate by 5e-3 (> the 1e-9 tolerance and
    // enough to change the rendered string)
    summary s = load_summary(dir.path / "estimates_main.json");
    for (auto& row : s.rows) {
        if (row.name == "endpoint_matched_raw_late_kl") {
            row.estimate = *row.estimate + 5e-3;
        }
    }
    save_summary(s, dir.path / "estimates_main.json");
    const auto results = claim_check(dir.path, kfixtures / "claims.jsonl");
    CHECK_FALSE(all_passed(results));
    size_t failures = 0;
    for (const auto& r : results) {
        failures += r.pass ? 0 : 1;
    }
    CHECK(failures == 2);  // the string claim and the value claim
}

TEST_CASE("claim check reports missing summaries and rows") {
    temp_dir dir("missing");
    std::ofstream(dir.path / "claims.jsonl")
        << R"({"id": "gone", "summary": "nope.json", "row": "x", "kind": "value", "expect": 1.0, "tolerance": 0.1})"
        << "\n";
    const auto results = claim_check(kfixtures / "summaries", dir.path / "claims.jsonl");
    REQUIRE(results.size() == 1);
    CHECK_FALSE(results[0].pass);
    CHECK(results[0].detail.find("missing summary") != std::string::npos);
}
