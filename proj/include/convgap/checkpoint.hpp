#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace convgap {

enum class norm_kind { rmsnorm, layernorm };
enum class positional_kind { rotary, learned, none };

const char* to_string(norm_kind k);
const char* to_string(positional_kind k);
norm_kind norm_kind_from_string(std::string_view s);
positional_kind positional_kind_from_string(std::string_view s);

struct model_config {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int d_mlp = 0;
    int vocab_size = 0;
    norm_kind norm = norm_kind::rmsnorm;
    bool tied_unembedding = false;
    positional_kind positional = positional_kind::rotary;
    std::string family_id;
    bool moe_flag = false;
    // Family-role tag ("pt" / "it"); the one field pairing ignores.
    std::string role;
    bool mlp_gated = true;
    int max_seq_len = 512;
    double rotary_base = 10000.0;
    double norm_eps = 1e-5;

    int d_head() const { return d_model / n_heads; }
    void validate() const;  // throws convgap::error on violation
    // Paired = identical configs up to the role tag.
    bool paired_with(const model_config& other) const;
    bool operator==(const model_config&) const = default;
};

struct tensor {
    std::string name;
    std::vector<size_t> shape;
    std::vector<float> data;

    size_t size() const {
        size_t n = 1;
        for (size_t d : shape) {
            n *= d;
        }
        return n;
    }
    float* row(size_t i) { return data.data() + i * shape.back(); }
    const float* row(size_t i) const { return data.data() + i * shape.back(); }
};

struct tensor_decl {
    std::string name;
    std::vector<size_t> shape;
};

// The full tensor table implied by a config; single source of truth for
// save, load validation and the synthetic generator.
std::vector<tensor_decl> expected_tensors(const model_config& cfg);

// Names of the MLP tensors for one layer (the graft/swap unit).
std::vector<std::string> mlp_tensor_names(const model_config& cfg, int layer);

struct checkpoint {
    model_config config;
    std::map<std::string, tensor> tensors;
    // Chat-template metadata: named token-id sequences
    // (template.system_prefix, template.user_prefix, ...).
    std::map<std::string, std::vector<int>> token_sequences;

    const tensor& t(std::string_view name) const;
    bool has(std::string_view name) const { return tensors.count(std::string(name)) > 0; }
    // Unembedding tensor, honoring tied_unembedding.
    const tensor& unembedding() const;
    void validate() const;  // config + tensor table consistency
};

inline constexpr int kcheckpoint_format_version = 1;

checkpoint load_checkpoint(const std::filesystem::path& dir);
void save_checkpoint(const checkpoint& ckpt, const std::filesystem::path& dir);

}  // namespace convgap
