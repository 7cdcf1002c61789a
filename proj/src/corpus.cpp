#include "convgap/corpus.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "convgap/common.hpp"
#include "convgap/rng.hpp"

namespace convgap {

using nlohmann::json;

std::vector<prompt_seq> load_corpus(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) fail("load_corpus: cannot open %s", path.c_str());
    std::vector<prompt_seq> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            fail("load_corpus: %s line %zu: %s", path.c_str(), lineno, e.what());
        }
        prompt_seq p;
        p.prompt_id = j.at("prompt_id").get<std::string>();
        p.cluster_id = j.at("cluster_id").get<std::string>();
        p.tokens = j.at("tokens").get<std::vector<int>>();
        p.register_tag = j.value("register", std::string());
        if (p.tokens.empty()) {
            fail("load_corpus: prompt '%s' has no tokens", p.prompt_id.c_str());
        }
        out.push_back(std::move(p));
    }
    if (out.empty()) {
        fail("load_corpus: %s holds no prompts", path.c_str());
    }
    return out;
}

void save_corpus(const std::vector<prompt_seq>& prompts, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path);
    if (!f) fail("save_corpus: cannot write %s", path.c_str());
    for (const auto& p : prompts) {
        json j = {{"prompt_id", p.prompt_id}, {"cluster_id", p.cluster_id}, {"tokens", p.tokens}};
        if (!p.register_tag.empty()) {
            j["register"] = p.register_tag;
        }
        f << j.dump() << "\n";
    }
}

std::vector<prompt_seq> make_synthetic_corpus(uint64_t seed, int n_prompts, int length,
                                              int n_clusters, int max_token_exclusive) {
    if (n_prompts < 1 || length < 1 || n_clusters < 1 || max_token_exclusive < 2) {
        fail("make_synthetic_corpus: bad parameters");
    }
    std::vector<prompt_seq> out;
    out.reserve(static_cast<size_t>(n_prompts));
    for (int i = 0; i < n_prompts; ++i) {
        rng stream(mix_seed({seed, 0xc0911ull, static_cast<uint64_t>(i)}));
        prompt_seq p;
        p.prompt_id = strfmt("p%04d", i);
        p.cluster_id = strfmt("c%03d", i % n_clusters);
        p.tokens.reserve(static_cast<size_t>(length));
        for (int t = 0; t < length; ++t) {
            p.tokens.push_back(static_cast<int>(stream.next_below(static_cast<uint64_t>(max_token_exclusive))));
        }
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<std::vector<int>> token_sequences(const std::vector<prompt_seq>& prompts) {
    std::vector<std::vector<int>> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) {
        out.push_back(p.tokens);
    }
    return out;
}

}  // namespace convgap
