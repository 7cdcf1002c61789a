#pragma once

#include <span>
#include <vector>

#include "convgap/checkpoint.hpp"

namespace convgap::oracle {

// Straight-line dense-math reference path: plain nested loops, double
// precision, no code shared with the optimized engine. Used as the
// independent cross-check for forward traces, curves and rollouts.

struct trace {
    // residuals[pos][layer][d_model], post-block.
    std::vector<std::vector<std::vector<double>>> residuals;
    // logits[pos][vocab] from the final readout.
    std::vector<std::vector<double>> logits;
};

trace forward(const checkpoint& model, std::span<const int> tokens);

std::vector<double> softmax(const std::vector<double>& logits);

// Raw-lens decode of one captured residual.
std::vector<double> decode(const checkpoint& model, const std::vector<double>& residual);

double kl(const std::vector<double>& p, const std::vector<double>& q);

// Raw-lens convergence curve for one position of an oracle trace.
std::vector<double> curve_at(const checkpoint& model, const trace& tr, size_t pos);

double late_gap(const std::vector<double>& curve, double fraction);

std::vector<int> greedy_rollout(const checkpoint& model, std::span<const int> context,
                                int max_tokens);

// Mean IT-minus-PT late gap over prompts (per-prompt step means averaged
// per prompt, then across prompts).
double gap_delta(const checkpoint& pt, const checkpoint& it,
                 const std::vector<std::vector<int>>& prompts, double late_fraction);

}  // namespace convgap::oracle
