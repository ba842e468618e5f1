#pragma once
#include <cstddef>
#include <string>
#include <vector>

#include "mossnet/moe.hpp"
#include "mossnet/ops.hpp"
#include "mossnet/rng.hpp"

namespace mossnet {

// Time-mixing block: expert-routed input/gate/output projections around a
// depthwise causal conv and a selective state-space kernel whose delta/B/C
// parameters are themselves expert mixtures. One routing decision per token
// is shared by all six expert sites unless per_site_routers is set.
struct BlockConfig {
    std::size_t d_model = 0;
    std::size_t d_inner = 0;  // conventionally 2 * d_model
    std::size_t d_state = 16; // P
    std::size_t dt_rank = 0;  // ceil(d_model / 16)
    std::size_t n_experts = 1;
    std::size_t k = 1;
    std::size_t conv_width = 4;
    // strips the block to the form the attention-equivalence oracle covers:
    // identity input/output maps (d_inner == d_model), no conv, no gate,
    // single delta path, expert mixtures on B and C only
    bool theorem_mode = false;
    bool per_site_routers = false;
    bool renorm_topk = false;

    void validate() const;
};

// streaming cache for one sequence: SSM state plus the conv history ring
struct BlockState {
    std::vector<double> ssm;       // d_inner * d_state
    std::vector<double> conv_tail; // (conv_width - 1) * d_inner, oldest first
    std::size_t bytes() const { return (ssm.size() + conv_tail.size()) * sizeof(double); }
};

struct BlockOut {
    Tensor y;                       // [n x d_model]
    std::vector<moe::Route> routes; // one per router (1 shared, or 6 per-site)
    std::size_t expert_evals = 0;   // token-expert applications across sites
};

class MossNetBlock {
public:
    static MossNetBlock create(const BlockConfig& cfg, const std::string& prefix, Rng rng);

    // x is [n x d_model] holding n / seq_len sequences back to back; pass a
    // graph to record gradients, nullptr for tape-free evaluation
    BlockOut forward(Graph* g, const Tensor& x, std::size_t seq_len, bool use_scan);

    BlockState initial_state() const;
    // single-token streaming step; identical math to forward on the prefix
    Tensor step(const Tensor& x_t, BlockState& st) const;

    std::vector<Param*> params();
    std::vector<const Param*> params() const;
    const BlockConfig& config() const { return cfg_; }
    // runtime top-k override for dynamic-k schedules
    void set_k(std::size_t k);

    // per-expert banks (size n_experts each)
    std::vector<Param> in_proj;   // [d_model x d_inner]
    std::vector<Param> gate_proj; // [d_model x d_inner]
    std::vector<Param> out_proj;  // [d_inner x d_model]
    std::vector<Param> dt_low;    // [d_inner x dt_rank]
    std::vector<Param> b_proj;    // [d_inner x d_state]
    std::vector<Param> c_proj;    // [d_inner x d_state]
    // shared
    Param conv_w;    // [d_inner x conv_width]
    Param conv_b;    // [d_inner]
    Param a_log;     // [d_inner x d_state]
    Param dt_expand; // [dt_rank x d_inner]
    Param dt_bias;   // [d_inner]
    std::vector<Param> routers; // [d_model x n_experts]; 1 shared or 6 per-site

private:
    BlockConfig cfg_;

    moe::Route route_site(Graph* g, const Tensor& x, std::size_t site);
    Tensor mix(Graph* g, const moe::Route& rt, const Tensor& x, std::vector<Param>& bank,
               std::size_t* evals);
};

} // namespace mossnet
