#include "mossnet/moe.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "mossnet/errors.hpp"

namespace mossnet::moe {

Route route(const Tensor& logits, std::size_t k, bool renorm_topk) {
    std::size_t n = logits.rows(), E = logits.cols();
    if (k < 1 || k > E)
        throw DomainError("route: need 1 <= k <= N_experts, got k = " + std::to_string(k) +
                          ", N_experts = " + std::to_string(E));
    Route rt;
    rt.n_tokens = n;
    rt.n_experts = E;
    rt.k = k;
    rt.probs = softmax_rows(logits);
    rt.experts.resize(n * k);

    std::vector<int> ord(E);
    std::vector<std::size_t> flat(n * k);
    for (std::size_t t = 0; t < n; ++t) {
        std::iota(ord.begin(), ord.end(), 0);
        const double* p = rt.probs.data() + t * E;
        std::sort(ord.begin(), ord.end(),
                  [p](int a, int b) { return p[a] != p[b] ? p[a] > p[b] : a < b; });
        for (std::size_t j = 0; j < k; ++j) {
            rt.experts[t * k + j] = ord[j];
            flat[t * k + j] = t * E + std::size_t(ord[j]);
        }
    }
    Tensor w = take_flat(rt.probs, flat);
    if (renorm_topk) {
        Tensor w2 = reshape(w, {n, k});
        Tensor sums = reshape(matmul(w2, Tensor::full({k, 1}, 1.0)), {n});
        w = reshape(mul_colvec(w2, recip(sums)), {n * k});
    }
    rt.weights = w;
    return rt;
}

Route route_token(const Tensor& x, const Tensor& weight, std::size_t k, bool renorm_topk) {
    if (x.ndim() != 1 || x.numel() != weight.rows())
        throw ShapeError("route_token: x " + shape_str(x.shape()) + " vs router " +
                         shape_str(weight.shape()));
    Tensor logits = matmul(reshape(x, {1, x.numel()}), weight);
    return route(logits, k, renorm_topk);
}

Grouping group_by_expert(const Route& rt) {
    Grouping g;
    g.rows.resize(rt.n_experts);
    g.slots.resize(rt.n_experts);
    for (std::size_t t = 0; t < rt.n_tokens; ++t)
        for (std::size_t j = 0; j < rt.k; ++j) {
            std::size_t slot = t * rt.k + j;
            int e = rt.experts[slot];
            g.rows[std::size_t(e)].push_back(int(t));
            g.slots[std::size_t(e)].push_back(slot);
        }
    return g;
}

Tensor combine(const Tensor& x, const Route& rt,
               const std::function<Tensor(int expert, const Tensor& xs)>& apply,
               std::size_t* eval_count) {
    if (x.rows() != rt.n_tokens)
        throw ShapeError("combine: " + std::to_string(x.rows()) + " rows vs " +
                         std::to_string(rt.n_tokens) + " routed tokens");
    Grouping grp = group_by_expert(rt);
    Tensor out; // shaped after the first expert output
    bool have = false;
    for (std::size_t e = 0; e < rt.n_experts; ++e) {
        if (grp.rows[e].empty()) continue;
        Tensor xs = gather_rows(x, grp.rows[e]);
        Tensor ys = apply(int(e), xs);
        if (ys.rows() != grp.rows[e].size())
            throw ShapeError("combine: expert returned " + std::to_string(ys.rows()) +
                             " rows for " + std::to_string(grp.rows[e].size()) + " tokens");
        if (eval_count) *eval_count += grp.rows[e].size();
        Tensor weighted = mul_colvec(ys, take_flat(rt.weights, grp.slots[e]));
        if (!have) {
            out = scatter_add_rows(Tensor::zeros({rt.n_tokens, ys.cols()}), weighted,
                                   grp.rows[e]);
            have = true;
        } else {
            out = scatter_add_rows(out, weighted, grp.rows[e]);
        }
    }
    if (!have) throw DomainError("combine: route selected no experts");
    return out;
}

Tensor load_balance_loss(const Tensor& probs, const std::vector<int>& experts, std::size_t k,
                         bool count_all, double alpha) {
    std::size_t n = probs.rows(), E = probs.cols();
    if (n == 0) throw DomainError("load_balance_loss: empty batch");
    if (experts.size() != n * k)
        throw ShapeError("load_balance_loss: " + std::to_string(experts.size()) +
                         " assignments for " + std::to_string(n) + " tokens with k = " +
                         std::to_string(k));
    Tensor f = Tensor::zeros({E, 1});
    {
        double* fd = f.mutable_data();
        if (count_all) {
            for (std::size_t s = 0; s < n * k; ++s) fd[std::size_t(experts[s])] += 1.0;
            for (std::size_t e = 0; e < E; ++e) fd[e] /= double(n * k);
        } else {
            for (std::size_t t = 0; t < n; ++t) fd[std::size_t(experts[t * k])] += 1.0;
            for (std::size_t e = 0; e < E; ++e) fd[e] /= double(n);
        }
    }
    // P = column means of the router probabilities, differentiable
    Tensor P = scale(matmul(transpose(probs), Tensor::full({n, 1}, 1.0)), 1.0 / double(n));
    return scale(sum_all(mul(P, f)), alpha * double(E));
}

std::size_t topk_schedule(std::size_t step) { return step % 1000 < 900 ? 3 : 2; }

} // namespace mossnet::moe
