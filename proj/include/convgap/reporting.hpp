#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convgap/bootstrap.hpp"

namespace convgap {

// --- formatting -------------------------------------------------------

// Sign-prefixed fixed point: +0.425 / -0.509.
std::string format_signed(double v, int decimals);
// Exact estimate string contract: "+0.425 nats [+0.356, +0.493]".
std::string format_estimate(const estimate_with_ci& e);
// CI cell without units: "+1.181 [+1.153, +1.211]".
std::string format_ci_cell(double estimate, double ci_low, double ci_high);
// Thousands-separated integer: "1,273,606".
std::string format_count(int64_t v);
// Unsigned fixed point ("0.796").
std::string format_plain(double v, int decimals);

// --- summaries --------------------------------------------------------

struct summary_row {
    std::string name;  // machine id; grid cells use "<row>/<col>"
    std::string label;
    std::optional<double> estimate;
    std::optional<double> ci_low;
    std::optional<double> ci_high;
    std::string units;
    size_t n_rows = 0;
    size_t n_clusters = 0;
    uint64_t seed = 0;
    std::string note;  // free-text interpretation / quality column
    std::string text;  // verbatim cell content for non-numeric cells
    nlohmann::json config;
};

struct summary {
    std::string claim_group;
    std::vector<summary_row> rows;
    nlohmann::json meta;
};

summary_row make_row(const std::string& name, const estimate_with_ci& e);
summary load_summary(const std::filesystem::path& path);
void save_summary(const summary& s, const std::filesystem::path& path);
std::vector<summary> load_summaries_dir(const std::filesystem::path& dir);

// --- rendering --------------------------------------------------------

// Renders each summary into the table shape of its claim group (known
// groups get the grid layout; unknown groups get a generic listing).
// Returns group -> rendered text; also writes <group>.txt and
// <group>.csv into out_dir when set. Byte-stable across runs and input
// row order (rows are sorted by a documented key).
std::map<std::string, std::string> render_tables(const std::vector<summary>& summaries,
                                                 const std::optional<std::filesystem::path>& out_dir);

// --- claim checking ---------------------------------------------------

struct claim {
    std::string id;
    std::string summary_file;
    std::string row;
    std::string kind;  // estimate_string | ci_string | value | count_string |
                       // plain3_string | signed2_string | signed3_string | text
    std::string expect_string;
    double expect_value = 0.0;
    double tolerance = 0.0;
    std::string field = "estimate";  // for kind == value
};

struct claim_result {
    std::string id;
    bool pass = false;
    std::string detail;
};

std::vector<claim> load_claims(const std::filesystem::path& path);

// Recomputes every claim from the committed summaries; a claim fails
// loudly (with detail) rather than being skipped when its row is absent.
std::vector<claim_result> claim_check(const std::filesystem::path& summaries_dir,
                                      const std::filesystem::path& claims_path);

bool all_passed(const std::vector<claim_result>& results);

}  // namespace convgap
