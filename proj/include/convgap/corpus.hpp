#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace convgap {

struct prompt_seq {
    std::string prompt_id;
    std::string cluster_id;
    std::vector<int> tokens;
    std::string register_tag;  // optional free-form register label
};

// JSONL: {"prompt_id": ..., "cluster_id": ..., "tokens": [...], "register": ...?}
std::vector<prompt_seq> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::vector<prompt_seq>& prompts, const std::filesystem::path& path);

// Seeded random prompt corpus over token ids [0, max_token_exclusive),
// cluster ids assigned round-robin over n_clusters.
std::vector<prompt_seq> make_synthetic_corpus(uint64_t seed, int n_prompts, int length,
                                              int n_clusters, int max_token_exclusive);

std::vector<std::vector<int>> token_sequences(const std::vector<prompt_seq>& prompts);

}  // namespace convgap
