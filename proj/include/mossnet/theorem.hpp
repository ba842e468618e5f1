#pragma once
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mossnet/tensor.hpp"

namespace mossnet::theorem {

// A small expert-mixed diagonal SSM in closed form: per-token decay abar
// shared across the N input dims, per-expert discretised input maps bbar and
// readout maps c, and per-token mixture weights. The recurrence with mixed
// parameters and the expanded attention-style triple sum must agree on these.
struct TheoremInstance {
    std::size_t T = 0, P = 0, N = 0, M = 0;
    Tensor abar;              // [T x P], entries within the safe decay window
    std::vector<Tensor> bbar; // M tensors [T x P]
    std::vector<Tensor> c;    // M tensors [T x P]
    Tensor probs;             // [T x M] mixture weights per token
    Tensor x;                 // [T x N]
};

TheoremInstance random_instance(std::uint64_t seed, std::size_t T, std::size_t P, std::size_t N,
                                std::size_t M);

// ground truth: run the recurrence with the mixed parameters
// bbar_t = sum_m w_m(t) bbar^m_t, c_t = sum_m w_m(t) c^m_t
Tensor ssm_reference(const TheoremInstance& inst); // [T x N]

// the expanded form: query rows carry the readout experts and the cumulative
// decay, key rows carry the input experts and the inverse cumulative decay,
// values are the raw inputs shared by every head pair
struct HeadVectors {
    std::size_t T = 0, P = 0, N = 0, M = 0;
    std::vector<Tensor> q; // per readout expert m: [T x P]
    std::vector<Tensor> k; // per input expert n: [T x P]
    Tensor v;              // [T x N]
};
HeadVectors build_heads(const TheoremInstance& inst);

struct MhaOptions {
    bool cross_terms = true;     // include head pairs with m != n
    bool flip_cross_sign = false; // fault injection: negate the cross terms
};
struct MhaOut {
    Tensor y;              // [T x N]
    std::size_t terms = 0; // head-pair summands actually accumulated
};
MhaOut mha_moa_forward(const HeadVectors& h, const MhaOptions& opt = {});

// max_t |ssm_reference - mha_moa| over all positions and dims
double verify_equivalence(const TheoremInstance& inst, const MhaOptions& opt = {});

// Builds a stripped block (identity in/out, no conv, no gate, single delta
// path, mixtures on B and C), runs its forward pass, then re-derives one
// single-input-dim instance per channel from the block's own routing and
// parameters and compares against the expanded attention form.
struct BlockEquivResult {
    double max_diff = 0;
    std::size_t T = 0, M = 0, P = 0;
};
BlockEquivResult verify_block_equivalence(std::uint64_t seed, std::size_t T, std::size_t d_model,
                                          std::size_t d_state, std::size_t n_experts,
                                          std::size_t k, bool flip_cross_sign = false);

} // namespace mossnet::theorem
