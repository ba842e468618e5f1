#include "mossnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mossnet/errors.hpp"
#include "mossnet/rng.hpp"

namespace mossnet {

namespace {

Tensor use(Graph* g, Param& p) { return g ? g->attach(p) : p.value; }

Tensor uniform_fan_in(const Shape& shape, std::size_t fan_in, Rng rng) {
    double bound = 1.0 / std::sqrt(double(fan_in));
    Tensor t = Tensor::zeros(shape);
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] = rng.uniform(-bound, bound);
    return t;
}

Tensor normal_init(const Shape& shape, double std_dev, Rng rng) {
    Tensor t = Tensor::zeros(shape);
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] = std_dev * rng.normal();
    return t;
}

Tensor ones_init(const Shape& shape) {
    Tensor t = Tensor::zeros(shape);
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] = 1.0;
    return t;
}

// additive causal mask, optionally banded by a sliding window
Tensor causal_mask(std::size_t L, std::size_t window) {
    Tensor m = Tensor::zeros({L, L});
    double* d = m.mutable_data();
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            bool ok = j <= i && (window == 0 || i - j < window);
            d[i * L + j] = ok ? 0.0 : -1e30;
        }
    return m;
}

} // namespace

std::vector<std::size_t> ModelConfig::attn_positions() const {
    std::set<std::size_t> out;
    for (long long raw : attn_layer_indices) {
        long long idx = raw < 0 ? (long long)(n_layers / 2) : raw;
        if (idx < 0 || std::size_t(idx) >= n_layers)
            throw ConfigError("model: attention index " + std::to_string(raw) +
                              " outside the " + std::to_string(n_layers) + "-layer stack");
        out.insert(std::size_t(idx));
    }
    return {out.begin(), out.end()};
}

void ModelConfig::validate() const {
    if (arch != "mossnet" && arch != "attention")
        throw ConfigError("model: arch must be mossnet or attention, got " + arch);
    if (!d_model || !d_state || !n_layers) throw ConfigError("model: zero dimension");
    if (k < 1 || k > n_experts)
        throw ConfigError("model: need k ≤ N_experts, got k = " + std::to_string(k) +
                          ", N_experts = " + std::to_string(n_experts));
    if (!n_heads || d_model % n_heads)
        throw ConfigError("model: n_heads must divide d_model");
    if (!n_kv_heads || n_heads % n_kv_heads)
        throw ConfigError("model: n_kv_heads must divide n_heads");
    if (vocab_size < 257) throw ConfigError("model: vocab must cover bytes plus BOS");
    if (!context_length) throw ConfigError("model: context_length must be positive");
    if (schedule != "cosine" && schedule != "wsd")
        throw ConfigError("model: schedule must be cosine or wsd, got " + schedule);
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw ConfigError("model: warmup_frac must lie in [0, 1)");
    if (theorem_mode && arch != "mossnet")
        throw ConfigError("model: theorem mode only applies to the mossnet arch");
    (void)attn_positions();
}

std::vector<LayerKind> layer_plan(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<LayerKind> plan;
    if (cfg.arch == "attention") {
        for (std::size_t i = 0; i < cfg.n_layers; ++i) {
            plan.push_back(LayerKind::Attn);
            if (cfg.use_mlp) plan.push_back(LayerKind::Mlp);
        }
        return plan;
    }
    std::vector<std::size_t> attn = cfg.attn_positions();
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        if (std::binary_search(attn.begin(), attn.end(), i)) plan.push_back(LayerKind::Attn);
        plan.push_back(LayerKind::Moss);
        if (cfg.use_mlp) plan.push_back(LayerKind::Mlp);
    }
    return plan;
}

Model Model::build(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    m.plan_ = layer_plan(cfg);
    m.k_ = cfg.k;
    Rng root(cfg.seed);

    m.embedding = Param{"emb", normal_init({cfg.vocab_size, cfg.d_model}, 0.02,
                                           root.derive("emb")),
                        {}, true, false};
    if (!cfg.tie_embeddings)
        m.unembed = Param{"unemb", uniform_fan_in({cfg.d_model, cfg.vocab_size}, cfg.d_model,
                                                  root.derive("unemb")),
                          {}, true, false};
    m.final_norm = Param{"final_norm", ones_init({cfg.d_model}), {}, false, false};

    const std::size_t D = cfg.d_model, H = cfg.mlp_hidden(), E = cfg.n_experts;
    const std::size_t dh = cfg.d_head(), dq = cfg.n_heads * dh, dkv = cfg.n_kv_heads * dh;
    m.layers.resize(m.plan_.size());
    for (std::size_t i = 0; i < m.plan_.size(); ++i) {
        Sublayer& sl = m.layers[i];
        sl.kind = m.plan_[i];
        std::string base = "layer." + std::to_string(i);
        sl.norm_w = Param{base + ".norm", ones_init({D}), {}, false, false};
        if (sl.kind == LayerKind::Moss) {
            BlockConfig bc;
            bc.d_model = D;
            bc.d_inner = cfg.theorem_mode ? D : cfg.d_inner();
            bc.d_state = cfg.d_state;
            bc.dt_rank = cfg.dt_rank();
            bc.n_experts = E;
            bc.k = cfg.k;
            bc.conv_width = cfg.conv_width;
            bc.theorem_mode = cfg.theorem_mode;
            // renormalised top-k mixing keeps the expert contribution and
            // its gradients at the same scale however wide the expert pool
            // is; without it a near-uniform router attenuates both by k/N
            bc.renorm_topk = true;
            sl.moss = std::make_unique<MossNetBlock>(
                MossNetBlock::create(bc, base + ".moss", root.derive(base + ".moss")));
        } else if (sl.kind == LayerKind::Mlp) {
            std::string p = base + ".mlp.router";
            sl.mlp_router = Param{p, uniform_fan_in({D, E}, D, root.derive(p)), {}, true, false};
            for (std::size_t e = 0; e < E; ++e) {
                std::string pe = base + ".mlp.gate." + std::to_string(e);
                sl.mlp_gate.push_back(
                    Param{pe, uniform_fan_in({D, H}, D, root.derive(pe)), {}, true, E > 1});
                pe = base + ".mlp.up." + std::to_string(e);
                sl.mlp_up.push_back(
                    Param{pe, uniform_fan_in({D, H}, D, root.derive(pe)), {}, true, E > 1});
                pe = base + ".mlp.down." + std::to_string(e);
                sl.mlp_down.push_back(
                    Param{pe, uniform_fan_in({H, D}, H, root.derive(pe)), {}, true, E > 1});
            }
        } else {
            std::string p = base + ".attn.wq";
            sl.wq = Param{p, uniform_fan_in({D, dq}, D, root.derive(p)), {}, true, false};
            p = base + ".attn.wk";
            sl.wk = Param{p, uniform_fan_in({D, dkv}, D, root.derive(p)), {}, true, false};
            p = base + ".attn.wv";
            sl.wv = Param{p, uniform_fan_in({D, dkv}, D, root.derive(p)), {}, true, false};
            p = base + ".attn.wo";
            sl.wo = Param{p, uniform_fan_in({dq, D}, dq, root.derive(p)), {}, true, false};
        }
    }
    return m;
}

std::vector<Param*> Model::params() {
    std::vector<Param*> out;
    out.push_back(&embedding);
    if (!cfg_.tie_embeddings) out.push_back(&unembed);
    for (Sublayer& sl : layers) {
        out.push_back(&sl.norm_w);
        if (sl.kind == LayerKind::Moss) {
            for (Param* p : sl.moss->params()) out.push_back(p);
        } else if (sl.kind == LayerKind::Mlp) {
            out.push_back(&sl.mlp_router);
            for (auto* bank : {&sl.mlp_gate, &sl.mlp_up, &sl.mlp_down})
                for (Param& p : *bank) out.push_back(&p);
        } else {
            out.push_back(&sl.wq);
            out.push_back(&sl.wk);
            out.push_back(&sl.wv);
            out.push_back(&sl.wo);
        }
    }
    out.push_back(&final_norm);
    return out;
}

ParamStats Model::stats() const {
    ParamStats st;
    std::size_t shared = 0, expert = 0;
    for (const Param* p : const_cast<Model*>(this)->params())
        (p->expert ? expert : shared) += p->value.numel();
    st.total = shared + expert;
    st.active = shared + (expert / cfg_.n_experts) * k_;
    return st;
}

void Model::set_k(std::size_t k) {
    if (k < 1 || k > cfg_.n_experts)
        throw ConfigError("model: need k ≤ N_experts, got k = " + std::to_string(k) +
                          ", N_experts = " + std::to_string(cfg_.n_experts));
    k_ = k;
    for (Sublayer& sl : layers)
        if (sl.kind == LayerKind::Moss) sl.moss->set_k(k);
}

Tensor Model::mlp_forward(Graph* g, Sublayer& sl, const Tensor& x,
                          std::vector<moe::Route>& routes, std::size_t* evals) {
    moe::Route rt = moe::route(matmul(x, use(g, sl.mlp_router)), k_, true);
    Tensor y = moe::combine(x, rt,
                            [&](int e, const Tensor& xs) {
                                auto ei = std::size_t(e);
                                Tensor gatev = silu(matmul(xs, use(g, sl.mlp_gate[ei])));
                                Tensor upv = matmul(xs, use(g, sl.mlp_up[ei]));
                                return matmul(mul(gatev, upv), use(g, sl.mlp_down[ei]));
                            },
                            evals);
    routes.push_back(std::move(rt));
    return y;
}

Tensor Model::attn_forward(Graph* g, Sublayer& sl, const Tensor& x, std::size_t seq_len) {
    const std::size_t n = x.rows(), L = seq_len, S = n / L;
    const std::size_t Hq = cfg_.n_heads, dh = cfg_.d_head();
    const std::size_t group = Hq / cfg_.n_kv_heads;
    Tensor q = matmul(x, use(g, sl.wq));
    Tensor kk = matmul(x, use(g, sl.wk));
    Tensor vv = matmul(x, use(g, sl.wv));
    Tensor mask = causal_mask(L, cfg_.sliding_window);
    const double sc = 1.0 / std::sqrt(double(dh));

    std::vector<Tensor> seq_out;
    for (std::size_t s = 0; s < S; ++s) {
        Tensor qs = slice_rows(q, s * L, L);
        Tensor ks = slice_rows(kk, s * L, L);
        Tensor vs = slice_rows(vv, s * L, L);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < Hq; ++h) {
            Tensor qh = slice_cols(qs, h * dh, dh);
            Tensor kh = slice_cols(ks, (h / group) * dh, dh);
            Tensor vh = slice_cols(vs, (h / group) * dh, dh);
            Tensor att = softmax_rows(add(scale(matmul(qh, transpose(kh)), sc), mask));
            heads.push_back(matmul(att, vh));
        }
        seq_out.push_back(concat_cols(heads));
    }
    Tensor ctx = S == 1 ? seq_out[0] : concat_rows(seq_out);
    return matmul(ctx, use(g, sl.wo));
}

ForwardOut Model::forward(Graph* g, const std::vector<int>& tokens, std::size_t seq_len,
                          bool use_scan) {
    if (tokens.empty() || seq_len == 0 || tokens.size() % seq_len)
        throw ShapeError("model: token count must be a positive multiple of seq_len");
    for (int t : tokens)
        if (t < 0 || std::size_t(t) >= cfg_.vocab_size)
            throw DomainError("model: token id " + std::to_string(t) + " outside vocab");

    ForwardOut out;
    Tensor h = gather_rows(use(g, embedding), tokens);
    for (Sublayer& sl : layers) {
        Tensor xn = rmsnorm(h, use(g, sl.norm_w));
        Tensor y;
        if (sl.kind == LayerKind::Moss) {
            BlockOut bo = sl.moss->forward(g, xn, seq_len, use_scan);
            y = bo.y;
            for (auto& rt : bo.routes) out.routes.push_back(std::move(rt));
            out.expert_evals += bo.expert_evals;
        } else if (sl.kind == LayerKind::Mlp) {
            y = mlp_forward(g, sl, xn, out.routes, &out.expert_evals);
        } else {
            y = attn_forward(g, sl, xn, seq_len);
        }
        h = add(h, y);
    }
    Tensor hf = rmsnorm(h, use(g, final_norm));
    out.logits = cfg_.tie_embeddings ? matmul(hf, transpose(use(g, embedding)))
                                     : matmul(hf, use(g, unembed));
    return out;
}

LossOut Model::loss(Graph* g, const Batch& batch, bool use_scan) {
    if (!batch.B || !batch.L || batch.tokens.size() != batch.B * (batch.L + 1))
        throw ShapeError("model: batch tokens must be B rows of L+1 ids");
    std::vector<int> inputs, targets;
    inputs.reserve(batch.B * batch.L);
    targets.reserve(batch.B * batch.L);
    for (std::size_t b = 0; b < batch.B; ++b) {
        const int* row = batch.tokens.data() + b * (batch.L + 1);
        inputs.insert(inputs.end(), row, row + batch.L);
        targets.insert(targets.end(), row + 1, row + batch.L + 1);
    }
    ForwardOut fo = forward(g, inputs, batch.L, use_scan);
    Tensor ce = cross_entropy(fo.logits, targets);

    LossOut out;
    out.ce = ce.at(0);
    out.total = ce;
    for (const moe::Route& rt : fo.routes) {
        Tensor bal = moe::load_balance_loss(rt.probs, rt.experts, rt.k, false, cfg_.alpha);
        out.balance += bal.at(0);
        out.total = add(out.total, bal);
    }
    return out;
}

std::size_t Model::State::bytes() const {
    std::size_t n = 0;
    for (const BlockState& b : blocks) n += b.bytes();
    for (const AttnCache& c : attn) n += (c.k.size() + c.v.size()) * sizeof(double);
    return n;
}

Model::State Model::initial_state() const {
    State st;
    for (const Sublayer& sl : layers) {
        if (sl.kind == LayerKind::Moss) st.blocks.push_back(sl.moss->initial_state());
        if (sl.kind == LayerKind::Attn) st.attn.push_back({});
    }
    return st;
}

Tensor Model::step_logits(int token, State& st) const {
    if (token < 0 || std::size_t(token) >= cfg_.vocab_size)
        throw DomainError("model: token id " + std::to_string(token) + " outside vocab");
    auto& self = const_cast<Model&>(*this);
    const std::size_t D = cfg_.d_model;

    Tensor h = Tensor::zeros({D});
    {
        const double* e = embedding.value.data() + std::size_t(token) * D;
        std::copy(e, e + D, h.mutable_data());
    }
    std::size_t bi = 0, ai = 0;
    for (Sublayer& sl : self.layers) {
        Tensor xn = reshape(rmsnorm(reshape(h, {1, D}), sl.norm_w.value), {D});
        Tensor y;
        if (sl.kind == LayerKind::Moss) {
            y = sl.moss->step(xn, st.blocks[bi++]);
        } else if (sl.kind == LayerKind::Mlp) {
            Tensor row = reshape(xn, {1, D});
            moe::Route rt = moe::route_token(xn, sl.mlp_router.value, k_, true);
            Tensor yr = moe::combine(row, rt,
                                     [&](int e, const Tensor& xs) {
                                         auto ei = std::size_t(e);
                                         Tensor gatev = silu(matmul(xs, sl.mlp_gate[ei].value));
                                         Tensor upv = matmul(xs, sl.mlp_up[ei].value);
                                         return matmul(mul(gatev, upv), sl.mlp_down[ei].value);
                                     },
                                     nullptr);
            y = reshape(yr, {D});
        } else {
            AttnCache& cache = st.attn[ai++];
            const std::size_t Hq = cfg_.n_heads, dh = cfg_.d_head();
            const std::size_t dkv = cfg_.n_kv_heads * dh, group = Hq / cfg_.n_kv_heads;
            Tensor row = reshape(xn, {1, D});
            Tensor q = matmul(row, sl.wq.value);
            Tensor kr = matmul(row, sl.wk.value);
            Tensor vr = matmul(row, sl.wv.value);
            cache.k.insert(cache.k.end(), kr.data(), kr.data() + dkv);
            cache.v.insert(cache.v.end(), vr.data(), vr.data() + dkv);
            // a sliding window bounds the live cache exactly
            if (cfg_.sliding_window && cache.k.size() > cfg_.sliding_window * dkv) {
                cache.k.erase(cache.k.begin(), cache.k.begin() + std::ptrdiff_t(dkv));
                cache.v.erase(cache.v.begin(), cache.v.begin() + std::ptrdiff_t(dkv));
            }
            const std::size_t ctx = cache.k.size() / dkv;
            const double isc = 1.0 / std::sqrt(double(dh));
            Tensor yv = Tensor::zeros({D});
            double* yp = yv.mutable_data();
            std::vector<double> scores(ctx);
            for (std::size_t hh = 0; hh < Hq; ++hh) {
                const double* qh = q.data() + hh * dh;
                const std::size_t koff = (hh / group) * dh;
                double mx = -1e300;
                for (std::size_t j = 0; j < ctx; ++j) {
                    double dot = 0.0;
                    const double* kj = cache.k.data() + j * dkv + koff;
                    for (std::size_t p = 0; p < dh; ++p) dot += qh[p] * kj[p];
                    scores[j] = dot * isc;
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < ctx; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                for (std::size_t j = 0; j < ctx; ++j) {
                    const double w = scores[j] / z;
                    const double* vj = cache.v.data() + j * dkv + koff;
                    for (std::size_t p = 0; p < dh; ++p) yp[hh * dh + p] += w * vj[p];
                }
            }
            y = reshape(matmul(reshape(yv, {1, D}), sl.wo.value), {D});
        }
        h = add(h, y);
    }
    Tensor hf = rmsnorm(reshape(h, {1, D}), final_norm.value);
    Tensor logits = cfg_.tie_embeddings ? matmul(hf, transpose(embedding.value))
                                        : matmul(hf, unembed.value);
    ++st.pos;
    return reshape(logits, {cfg_.vocab_size});
}

std::vector<int> Model::generate(const std::vector<int>& prompt, std::size_t n_tokens,
                                 double temperature, std::uint64_t sample_seed) const {
    State st = initial_state();
    Tensor logits;
    for (int t : prompt) logits = step_logits(t, st);
    if (prompt.empty()) throw DomainError("model: generation needs at least a BOS prompt");

    Rng rng(sample_seed);
    std::vector<int> out;
    for (std::size_t i = 0; i < n_tokens; ++i) {
        int next = 0;
        if (temperature <= 0.0) {
            const double* lp = logits.data();
            for (std::size_t v = 1; v < cfg_.vocab_size; ++v)
                if (lp[v] > lp[next]) next = int(v);
        } else {
            Tensor probs = softmax(scale(logits, 1.0 / temperature));
            double r = rng.uniform(0.0, 1.0), acc = 0.0;
            next = int(cfg_.vocab_size) - 1;
            for (std::size_t v = 0; v < cfg_.vocab_size; ++v) {
                acc += probs.at(v);
                if (r < acc) {
                    next = int(v);
                    break;
                }
            }
        }
        out.push_back(next);
        logits = step_logits(next, st);
    }
    return out;
}

std::size_t Model::kv_bytes(std::size_t context) const {
    std::size_t n_attn = 0;
    for (LayerKind kind : plan_)
        if (kind == LayerKind::Attn) ++n_attn;
    std::size_t live = cfg_.sliding_window ? std::min(context, cfg_.sliding_window) : context;
    return 2 * n_attn * cfg_.n_kv_heads * cfg_.d_head() * live * sizeof(double);
}

double perplexity(Model& model, const std::vector<std::uint8_t>& text, bool use_scan) {
    if (text.empty()) throw DomainError("perplexity: empty text");
    const ModelConfig& cfg = model.config();
    const std::size_t L = std::min(cfg.context_length, text.size());
    const std::size_t windows = text.size() / L;
    const int BOS = 256;

    double ce_sum = 0.0;
    std::size_t count = 0;
    const std::size_t chunk = 8; // windows per forward pass
    for (std::size_t w0 = 0; w0 < windows; w0 += chunk) {
        const std::size_t nw = std::min(chunk, windows - w0);
        std::vector<int> inputs, targets;
        inputs.reserve(nw * L);
        targets.reserve(nw * L);
        for (std::size_t w = w0; w < w0 + nw; ++w) {
            const std::uint8_t* s = text.data() + w * L;
            inputs.push_back(BOS);
            for (std::size_t i = 0; i + 1 < L; ++i) inputs.push_back(s[i]);
            for (std::size_t i = 0; i < L; ++i) targets.push_back(s[i]);
        }
        ForwardOut fo = model.forward(nullptr, inputs, L, use_scan);
        Tensor ce = cross_entropy(fo.logits, targets);
        ce_sum += ce.at(0) * double(nw * L);
        count += nw * L;
    }
    return std::exp(ce_sum / double(count));
}

} // namespace mossnet
