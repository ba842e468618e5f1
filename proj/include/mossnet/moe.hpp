#pragma once
#include <cstddef>
#include <functional>
#include <vector>

#include "mossnet/ops.hpp"

namespace mossnet::moe {

// one routing decision per token: which experts run and with what mixture
// weight. Weights are the full-softmax probabilities of the selected experts
// (descending, ties broken toward the lower index); the optional
// renormalisation divides each token's weights by their sum.
struct Route {
    std::size_t n_tokens = 0;
    std::size_t n_experts = 0;
    std::size_t k = 0;
    std::vector<int> experts; // [n_tokens * k] selected ids, slot 0 = top-1
    Tensor weights;           // [n_tokens * k] mixture weights, differentiable
    Tensor probs;             // [n_tokens x n_experts] full softmax
};

// routes a batch of tokens given router logits
Route route(const Tensor& logits, std::size_t k, bool renorm_topk = false);

// single-token convenience wrapper: logits = x^T weight
Route route_token(const Tensor& x, const Tensor& weight, std::size_t k,
                  bool renorm_topk = false);

// token rows and weight slots grouped per expert, for batched expert GEMMs
struct Grouping {
    std::vector<std::vector<int>> rows;          // per expert: token row ids
    std::vector<std::vector<std::size_t>> slots; // per expert: indices into experts/weights
};
Grouping group_by_expert(const Route& rt);

// y[token] = sum over selected experts of weight * expert(x[token]).
// apply(e, xs) maps the gathered token rows through expert e; it is called
// once per expert that owns at least one token, and eval_count (when given)
// accumulates one tick per token per expert application.
Tensor combine(const Tensor& x, const Route& rt,
               const std::function<Tensor(int expert, const Tensor& xs)>& apply,
               std::size_t* eval_count = nullptr);

// alpha * N * sum_i f_i * P_i. P_i is the mean router probability of expert
// i (differentiable); f_i is the fraction of tokens assigned to expert i,
// treated as a constant. top-1 slots count by default; count_all spreads the
// count over every selected slot instead.
Tensor load_balance_loss(const Tensor& probs, const std::vector<int>& experts, std::size_t k,
                         bool count_all, double alpha);

// alternating 900 steps of k=3 with 100 steps of k=2, repeating
std::size_t topk_schedule(std::size_t step);

} // namespace mossnet::moe
