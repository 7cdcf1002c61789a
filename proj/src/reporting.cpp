#include "convgap/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "convgap/common.hpp"

namespace convgap {

using nlohmann::json;

std::string format_signed(double v, int decimals) {
    return strfmt("%+.*f", decimals, v);
}

std::string format_estimate(const estimate_with_ci& e) {
    return format_signed(e.estimate, 3) + " " + e.units + " [" + format_signed(e.ci_low, 3) +
           ", " + format_signed(e.ci_high, 3) + "]";
}

std::string format_ci_cell(double estimate, double ci_low, double ci_high) {
    return format_signed(estimate, 3) + " [" + format_signed(ci_low, 3) + ", " +
           format_signed(ci_high, 3) + "]";
}

std::string format_count(int64_t v) {
    const bool negative = v < 0;
    std::string digits = std::to_string(negative ? -v : v);
    std::string out;
    const size_t n = digits.size();
    for (size_t i = 0; i < n; ++i) {
        if (i > 0 && (n - i) % 3 == 0) {
            out.push_back(',');
        }
        out.push_back(digits[i]);
    }
    return negative ? "-" + out : out;
}

std::string format_plain(double v, int decimals) {
    return strfmt("%.*f", decimals, v);
}

summary_row make_row(const std::string& name, const estimate_with_ci& e) {
    summary_row row;
    row.name = name;
    row.estimate = e.estimate;
    row.ci_low = e.ci_low;
    row.ci_high = e.ci_high;
    row.units = e.units;
    row.n_rows = e.n_rows;
    row.n_clusters = e.n_clusters;
    row.seed = e.seed;
    row.config = json{{"method", e.method}};
    return row;
}

namespace {

json row_to_json(const summary_row& r) {
    json j;
    j["name"] = r.name;
    if (!r.label.empty()) j["label"] = r.label;
    if (r.estimate) j["estimate"] = *r.estimate;
    if (r.ci_low) j["ci_low"] = *r.ci_low;
    if (r.ci_high) j["ci_high"] = *r.ci_high;
    if (!r.units.empty()) j["units"] = r.units;
    if (r.n_rows != 0) j["n_rows"] = r.n_rows;
    if (r.n_clusters != 0) j["n_clusters"] = r.n_clusters;
    if (r.seed != 0) j["seed"] = r.seed;
    if (!r.note.empty()) j["note"] = r.note;
    if (!r.text.empty()) j["text"] = r.text;
    if (!r.config.is_null()) j["config"] = r.config;
    return j;
}

summary_row row_from_json(const json& j) {
    summary_row r;
    r.name = j.at("name").get<std::string>();
    r.label = j.value("label", std::string());
    if (j.contains("estimate")) r.estimate = j.at("estimate").get<double>();
    if (j.contains("ci_low")) r.ci_low = j.at("ci_low").get<double>();
    if (j.contains("ci_high")) r.ci_high = j.at("ci_high").get<double>();
    r.units = j.value("units", std::string());
    r.n_rows = j.value("n_rows", size_t{0});
    r.n_clusters = j.value("n_clusters", size_t{0});
    r.seed = j.value("seed", uint64_t{0});
    r.note = j.value("note", std::string());
    r.text = j.value("text", std::string());
    if (j.contains("config")) r.config = j.at("config");
    return r;
}

}  // namespace

summary load_summary(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) fail("load_summary: cannot open %s", path.c_str());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        fail("load_summary: %s: %s", path.c_str(), e.what());
    }
    summary s;
    if (!j.contains("claim_group")) {
        fail("load_summary: %s: missing field 'claim_group'", path.c_str());
    }
    s.claim_group = j.at("claim_group").get<std::string>();
    if (!j.contains("rows") || !j.at("rows").is_array()) {
        fail("load_summary: %s: missing array field 'rows'", path.c_str());
    }
    for (const auto& row : j.at("rows")) {
        try {
            s.rows.push_back(row_from_json(row));
        } catch (const json::exception& e) {
            fail("load_summary: %s: bad row: %s", path.c_str(), e.what());
        }
    }
    if (j.contains("meta")) s.meta = j.at("meta");
    return s;
}

void save_summary(const summary& s, const std::filesystem::path& path) {
    json j;
    j["claim_group"] = s.claim_group;
    json rows = json::array();
    for (const auto& r : s.rows) {
        rows.push_back(row_to_json(r));
    }
    j["rows"] = rows;
    if (!s.meta.is_null()) j["meta"] = s.meta;
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path);
    if (!f) fail("save_summary: cannot write %s", path.c_str());
    f << j.dump(2) << "\n";
}

std::vector<summary> load_summaries_dir(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> paths;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".json") {
            paths.push_back(entry.path());
        }
    }
    std::sort(paths.begin(), paths.end());
    std::vector<summary> out;
    out.reserve(paths.size());
    for (const auto& p : paths) {
        out.push_back(load_summary(p));
    }
    return out;
}

// --- rendering --------------------------------------------------------

namespace {

const summary_row* find_row(const summary& s, const std::string& name) {
    for (const auto& r : s.rows) {
        if (r.name == name) {
            return &r;
        }
    }
    return nullptr;
}

std::string pad(const std::string& s, size_t width) {
    return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string render_grid(const std::vector<std::string>& header,
                        const std::vector<std::vector<std::string>>& cells) {
    std::vector<size_t> widths(header.size(), 0);
    for (size_t c = 0; c < header.size(); ++c) {
        widths[c] = header[c].size();
        for (const auto& row : cells) {
            widths[c] = std::max(widths[c], row[c].size());
        }
    }
    auto emit = [&](const std::vector<std::string>& row) {
        std::string line;
        for (size_t c = 0; c < row.size(); ++c) {
            if (c > 0) {
                line += "  ";
            }
            line += pad(row[c], widths[c]);
        }
        // Trim trailing spaces for byte-stable output.
        const size_t end = line.find_last_not_of(' ');
        line.erase(end == std::string::npos ? 0 : end + 1);
        return line + "\n";
    };
    std::string text = emit(header);
    std::vector<std::string> rule;
    for (size_t c = 0; c < header.size(); ++c) {
        rule.push_back(std::string(widths[c], '-'));
    }
    text += emit(rule);
    for (const auto& row : cells) {
        text += emit(row);
    }
    return text;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

std::string render_csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& cells) {
    std::ostringstream out;
    for (size_t c = 0; c < header.size(); ++c) {
        out << (c == 0 ? "" : ",") << csv_escape(header[c]);
    }
    out << "\n";
    for (const auto& row : cells) {
        for (size_t c = 0; c < row.size(); ++c) {
            out << (c == 0 ? "" : ",") << csv_escape(row[c]);
        }
        out << "\n";
    }
    return out.str();
}

// Grid cell lookup for "<row_key>/<col_key>" names.
std::string grid_cell(const summary& s, const std::string& row_key, const std::string& col_key,
                      const std::string& fmt) {
    const summary_row* r = find_row(s, row_key + "/" + col_key);
    if (r == nullptr) {
        return "";
    }
    if (!r->text.empty()) {
        return r->text;
    }
    if (!r->estimate) {
        return "";
    }
    if (fmt == "count") return format_count(static_cast<int64_t>(std::llround(*r->estimate)));
    if (fmt == "signed2") return format_signed(*r->estimate, 2);
    if (fmt == "signed3") return format_signed(*r->estimate, 3);
    if (fmt == "ci") {
        if (r->ci_low && r->ci_high) {
            return format_ci_cell(*r->estimate, *r->ci_low, *r->ci_high);
        }
        return format_signed(*r->estimate, 3);
    }
    return format_plain(*r->estimate, 3);
}

// Display label for a grid row key, taken from any cell of that row.
std::string grid_row_label(const summary& s, const std::string& row_key) {
    for (const auto& r : s.rows) {
        if (r.name.rfind(row_key + "/", 0) == 0 && !r.label.empty()) {
            return r.label;
        }
    }
    return row_key;
}

// Row keys present in a grid summary, ordered by the meta "row_order"
// list, then lexicographically for stragglers.
std::vector<std::string> grid_row_keys(const summary& s) {
    std::vector<std::string> keys;
    auto seen = [&](const std::string& k) {
        return std::find(keys.begin(), keys.end(), k) != keys.end();
    };
    if (s.meta.contains("row_order")) {
        for (const auto& k : s.meta.at("row_order")) {
            keys.push_back(k.get<std::string>());
        }
    }
    std::vector<std::string> rest;
    for (const auto& r : s.rows) {
        const auto slash = r.name.find('/');
        if (slash == std::string::npos) {
            continue;
        }
        const std::string key = r.name.substr(0, slash);
        if (!seen(key) && std::find(rest.begin(), rest.end(), key) == rest.end()) {
            rest.push_back(key);
        }
    }
    std::sort(rest.begin(), rest.end());
    keys.insert(keys.end(), rest.begin(), rest.end());
    return keys;
}

struct grid_layout {
    std::vector<std::string> header;
    std::vector<std::pair<std::string, std::string>> columns;  // col_key, fmt
    std::string row_header;
};

std::optional<grid_layout> layout_for(const std::string& group) {
    if (group == "discovery_counts") {
        return grid_layout{{"Family", "PT token steps", "IT token steps", "Layers"},
                           {{"pt_steps", "count"}, {"it_steps", "count"}, {"layers", "plain0"}},
                           "Family"};
    }
    if (group == "graft_swap") {
        return grid_layout{{"Intervention", "Early", "Middle", "Late"},
                           {{"early", "signed2"}, {"mid", "signed2"}, {"late", "signed2"}},
                           "Intervention"};
    }
    if (group == "window_audit") {
        return grid_layout{{"Window", "Final-20 IT graft into PT", "Final-20 PT swap into IT",
                            "Edited-window IT graft into PT", "Edited-window PT swap into IT"},
                           {{"final20_graft", "signed3"},
                            {"final20_swap", "signed3"},
                            {"window_graft", "signed3"},
                            {"window_swap", "signed3"}},
                           "Window"};
    }
    if (group == "replay_grid") {
        return grid_layout{{"Teacher history", "Estimator", "IT native - PT raw",
                            "IT raw - PT raw", "IT native - IT raw", "Use/quality"},
                           {{"estimator", "text"},
                            {"it_native_minus_pt_raw", "ci"},
                            {"it_raw_minus_pt_raw", "ci"},
                            {"it_native_minus_it_raw", "ci"},
                            {"quality", "text"}},
                           "Teacher history"};
    }
    if (group == "per_family_late") {
        return grid_layout{{"Family", "Late IT graft into PT host", "Late PT swap into IT host",
                            "Late window"},
                           {{"graft", "signed3"}, {"swap", "signed3"}, {"window", "text"}},
                           "Family"};
    }
    return std::nullopt;
}

void render_generic(const summary& s, std::vector<std::string>& header,
                    std::vector<std::vector<std::string>>& cells) {
    header = {"Name", "Estimate", "Units", "Note"};
    std::vector<const summary_row*> rows;
    for (const auto& r : s.rows) {
        rows.push_back(&r);
    }
    std::sort(rows.begin(), rows.end(),
              [](const summary_row* a, const summary_row* b) { return a->name < b->name; });
    for (const summary_row* r : rows) {
        std::string value;
        if (!r->text.empty()) {
            value = r->text;
        } else if (r->estimate && r->ci_low && r->ci_high) {
            value = format_ci_cell(*r->estimate, *r->ci_low, *r->ci_high);
        } else if (r->estimate) {
            value = format_signed(*r->estimate, 3);
        }
        cells.push_back({r->label.empty() ? r->name : r->label, value, r->units, r->note});
    }
}

}  // namespace

std::map<std::string, std::string> render_tables(
    const std::vector<summary>& summaries, const std::optional<std::filesystem::path>& out_dir) {
    // Deterministic group order.
    std::vector<const summary*> sorted;
    for (const auto& s : summaries) {
        sorted.push_back(&s);
    }
    std::sort(sorted.begin(), sorted.end(),
              [](const summary* a, const summary* b) { return a->claim_group < b->claim_group; });

    std::map<std::string, std::string> rendered;
    for (const summary* s : sorted) {
        std::vector<std::string> header;
        std::vector<std::vector<std::string>> cells;
        const auto layout = layout_for(s->claim_group);
        if (s->claim_group == "estimates_main" || s->claim_group == "estimates") {
            header = {"Check", "Estimate", "Interpretation"};
            std::vector<const summary_row*> rows;
            for (const auto& r : s->rows) {
                rows.push_back(&r);
            }
            std::sort(rows.begin(), rows.end(), [&](const summary_row* a, const summary_row* b) {
                const int oa = a->config.is_object() ? a->config.value("order", 1 << 20) : (1 << 20);
                const int ob = b->config.is_object() ? b->config.value("order", 1 << 20) : (1 << 20);
                return oa != ob ? oa < ob : a->name < b->name;
            });
            for (const summary_row* r : rows) {
                estimate_with_ci e;
                e.estimate = r->estimate.value_or(0.0);
                e.ci_low = r->ci_low.value_or(0.0);
                e.ci_high = r->ci_high.value_or(0.0);
                e.units = r->units;
                cells.push_back({r->label.empty() ? r->name : r->label, format_estimate(e), r->note});
            }
        } else if (layout) {
            header = layout->header;
            for (const auto& row_key : grid_row_keys(*s)) {
                std::vector<std::string> line = {grid_row_label(*s, row_key)};
                for (const auto& [col_key, fmt] : layout->columns) {
                    if (fmt == "text") {
                        const summary_row* cell = find_row(*s, row_key + "/" + col_key);
                        line.push_back(cell == nullptr ? "" : cell->text);
                    } else if (fmt == "plain0") {
                        const summary_row* cell = find_row(*s, row_key + "/" + col_key);
                        line.push_back(cell != nullptr && cell->estimate
                                           ? std::to_string(static_cast<int64_t>(
                                                 std::llround(*cell->estimate)))
                                           : "");
                    } else {
                        line.push_back(grid_cell(*s, row_key, col_key, fmt));
                    }
                }
                cells.push_back(line);
            }
        } else {
            render_generic(*s, header, cells);
        }

        const std::string text = render_grid(header, cells);
        rendered[s->claim_group] = text;
        if (out_dir) {
            std::filesystem::create_directories(*out_dir);
            std::ofstream tf(*out_dir / (s->claim_group + ".txt"));
            tf << text;
            std::ofstream cf(*out_dir / (s->claim_group + ".csv"));
            cf << render_csv(header, cells);
        }
    }
    return rendered;
}

// --- claim checking ---------------------------------------------------

std::vector<claim> load_claims(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) fail("load_claims: cannot open %s", path.c_str());
    std::vector<claim> claims;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            fail("load_claims: %s line %zu: %s", path.c_str(), lineno, e.what());
        }
        claim c;
        c.id = j.at("id").get<std::string>();
        c.summary_file = j.at("summary").get<std::string>();
        c.row = j.at("row").get<std::string>();
        c.kind = j.at("kind").get<std::string>();
        if (j.contains("expect")) {
            if (j.at("expect").is_string()) {
                c.expect_string = j.at("expect").get<std::string>();
            } else {
                c.expect_value = j.at("expect").get<double>();
            }
        }
        c.tolerance = j.value("tolerance", 0.0);
        c.field = j.value("field", std::string("estimate"));
        claims.push_back(std::move(c));
    }
    return claims;
}

std::vector<claim_result> claim_check(const std::filesystem::path& summaries_dir,
                                      const std::filesystem::path& claims_path) {
    const auto claims = load_claims(claims_path);
    std::map<std::string, summary> cache;
    std::vector<claim_result> results;

    for (const auto& c : claims) {
        claim_result res;
        res.id = c.id;
        try {
            auto it = cache.find(c.summary_file);
            if (it == cache.end()) {
                const auto path = summaries_dir / c.summary_file;
                if (!std::filesystem::exists(path)) {
                    fail("missing summary '%s'", c.summary_file.c_str());
                }
                it = cache.emplace(c.summary_file, load_summary(path)).first;
            }
            const summary_row* row = find_row(it->second, c.row);
            if (row == nullptr) {
                fail("summary '%s' has no row '%s'", c.summary_file.c_str(), c.row.c_str());
            }

            std::string got;
            if (c.kind == "estimate_string") {
                estimate_with_ci e;
                e.estimate = row->estimate.value_or(0.0);
                e.ci_low = row->ci_low.value_or(0.0);
                e.ci_high = row->ci_high.value_or(0.0);
                e.units = row->units;
                got = format_estimate(e);
            } else if (c.kind == "ci_string") {
                got = format_ci_cell(row->estimate.value_or(0.0), row->ci_low.value_or(0.0),
                                     row->ci_high.value_or(0.0));
            } else if (c.kind == "count_string") {
                got = format_count(static_cast<int64_t>(std::llround(row->estimate.value_or(0.0))));
            } else if (c.kind == "plain3_string") {
                got = format_plain(row->estimate.value_or(0.0), 3);
            } else if (c.kind == "signed2_string") {
                got = format_signed(row->estimate.value_or(0.0), 2);
            } else if (c.kind == "signed3_string") {
                got = format_signed(row->estimate.value_or(0.0), 3);
            } else if (c.kind == "text") {
                got = row->text;
            } else if (c.kind == "value") {
                double v = 0.0;
                if (c.field == "estimate") v = row->estimate.value_or(0.0);
                else if (c.field == "ci_low") v = row->ci_low.value_or(0.0);
                else if (c.field == "ci_high") v = row->ci_high.value_or(0.0);
                else fail("claim '%s': unknown field '%s'", c.id.c_str(), c.field.c_str());
                const double diff = std::abs(v - c.expect_value);
                res.pass = diff <= c.tolerance;
                res.detail = res.pass
                                 ? "ok"
                                 : strfmt("value %.9g differs from expected %.9g by %.3g (> %.3g)",
                                          v, c.expect_value, diff, c.tolerance);
                results.push_back(res);
                continue;
            } else {
                fail("claim '%s': unknown kind '%s'", c.id.c_str(), c.kind.c_str());
            }
            res.pass = got == c.expect_string;
            res.detail = res.pass ? "ok" : "got \"" + got + "\", expected \"" + c.expect_string + "\"";
        } catch (const std::exception& e) {
            res.pass = false;
            res.detail = e.what();
        }
        results.push_back(res);
    }
    return results;
}

bool all_passed(const std::vector<claim_result>& results) {
    for (const auto& r : results) {
        if (!r.pass) {
            return false;
        }
    }
    return true;
}

}  // namespace convgap
