#pragma once
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mossnet/block.hpp"
#include "mossnet/moe.hpp"
#include "mossnet/ops.hpp"

namespace mossnet {

// Byte-level language model: a stack of pre-norm residual sublayers. The
// default plan alternates a MossNet block and an expert-routed gated MLP per
// layer, with grouped-query attention sublayers spliced in at the configured
// positions. The "attention" arch swaps every MossNet block for attention
// and makes the MLPs dense, giving the efficiency baseline.
struct ModelConfig {
    std::string arch = "mossnet"; // "mossnet" or "attention"
    std::size_t d_model = 64;
    std::size_t d_state = 16;
    std::size_t n_layers = 4; // (mixer, mlp) layer pairs
    bool use_mlp = true;      // false drops the MLP half of every pair
    std::size_t n_experts = 4;
    std::size_t k = 2;
    double alpha = 0.001; // load-balance loss weight
    std::size_t n_heads = 2;
    std::size_t n_kv_heads = 1;
    std::size_t sliding_window = 0; // 0 = full causal
    bool tie_embeddings = true;
    std::size_t vocab_size = 257; // bytes plus BOS
    std::size_t context_length = 256;
    double lr_max = 1e-2;
    double warmup_frac = 0.03;
    std::string schedule = "cosine"; // "cosine" or "wsd"
    std::uint64_t seed = 0;
    bool theorem_mode = false;
    bool dynamic_k = false; // top-k follows topk_schedule during training
    std::size_t conv_width = 4;
    // attention insertion points in layer-pair space; -1 means the middle
    std::vector<long long> attn_layer_indices = {-1};

    std::size_t d_inner() const { return 2 * d_model; }
    std::size_t dt_rank() const { return (d_model + 15) / 16; }
    std::size_t mlp_hidden() const { return 2 * d_model; }
    std::size_t d_head() const { return d_model / n_heads; }
    std::vector<std::size_t> attn_positions() const; // resolved, sorted, deduped
    void validate() const;
};

enum class LayerKind { Moss, Attn, Mlp };

// the sublayer sequence the config expands to, exposed so tests and the
// parameter accounting can reason about structure without a built model
std::vector<LayerKind> layer_plan(const ModelConfig& cfg);

struct Batch {
    std::size_t B = 0, L = 0;
    std::vector<int> tokens; // B rows of L+1 token ids, BOS-anchored
};

struct ParamStats {
    std::size_t total = 0;
    std::size_t active = 0; // per token at the configured k
};

struct ForwardOut {
    Tensor logits;                  // [B*L x vocab]
    std::vector<moe::Route> routes; // every routing decision, layer order
    std::size_t expert_evals = 0;
};

struct LossOut {
    Tensor total;       // scalar node (attached when a graph was passed)
    double ce = 0;      // cross-entropy term, nats
    double balance = 0; // summed load-balance term (already alpha-weighted)
};

class Model {
public:
    static Model build(const ModelConfig& cfg);

    ForwardOut forward(Graph* g, const std::vector<int>& tokens, std::size_t seq_len,
                       bool use_scan);
    LossOut loss(Graph* g, const Batch& batch, bool use_scan);

    // streaming decode cache: block states plus growing attention KV rows
    struct AttnCache {
        std::vector<double> k, v; // pos * (n_kv_heads * d_head) each
    };
    struct State {
        std::vector<BlockState> blocks;
        std::vector<AttnCache> attn;
        std::size_t pos = 0;
        std::size_t bytes() const;
    };
    State initial_state() const;
    Tensor step_logits(int token, State& st) const; // [vocab]

    // greedy when temperature == 0, softmax sampling otherwise
    std::vector<int> generate(const std::vector<int>& prompt, std::size_t n_tokens,
                              double temperature, std::uint64_t sample_seed) const;

    void set_k(std::size_t k); // dynamic top-k override for every routed site
    std::size_t current_k() const { return k_; }

    std::vector<Param*> params();
    ParamStats stats() const;
    const ModelConfig& config() const { return cfg_; }
    const std::vector<LayerKind>& plan() const { return plan_; }

    // closed-form attention cache footprint at a given context length
    std::size_t kv_bytes(std::size_t context) const;

    struct Sublayer {
        LayerKind kind = LayerKind::Moss;
        Param norm_w;
        std::unique_ptr<MossNetBlock> moss;
        // expert-routed gated MLP
        Param mlp_router;
        std::vector<Param> mlp_gate, mlp_up, mlp_down;
        // grouped-query attention
        Param wq, wk, wv, wo;
    };
    std::vector<Sublayer> layers; // fixed after build; param addresses stable

    Param embedding;  // [vocab x d_model], doubles as unembedding when tied
    Param unembed;    // [d_model x vocab], only when untied
    Param final_norm; // [d_model]

private:
    ModelConfig cfg_;
    std::vector<LayerKind> plan_;
    std::size_t k_ = 1;

    Tensor attn_forward(Graph* g, Sublayer& sl, const Tensor& x, std::size_t seq_len);
    Tensor mlp_forward(Graph* g, Sublayer& sl, const Tensor& x, std::vector<moe::Route>& routes,
                       std::size_t* evals);
};

// exp(mean next-token cross-entropy) over the text, teacher forced in
// non-overlapping windows of the model's context length
double perplexity(Model& model, const std::vector<std::uint8_t>& text, bool use_scan = true);

} // namespace mossnet
