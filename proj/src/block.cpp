#include "mossnet/block.hpp"

#include <cmath>

#include "mossnet/ssm.hpp"

namespace mossnet {

namespace {

Tensor uniform_fan_in(const Shape& shape, std::size_t fan_in, Rng rng) {
    double bound = 1.0 / std::sqrt(double(fan_in));
    Tensor t = Tensor::zeros(shape);
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] = rng.uniform(-bound, bound);
    return t;
}

// value of a param as seen by the graph (recorded leaf) or raw (evaluation)
Tensor use(Graph* g, Param& p) { return g ? g->attach(p) : p.value; }

// delta pre-activations that softplus maps into [lo, hi] at initialisation
Tensor dt_bias_init(std::size_t d_inner, Rng rng, double lo = 1e-3, double hi = 1e-1) {
    Tensor t = Tensor::zeros({d_inner});
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < d_inner; ++i) {
        double dt = std::exp(rng.uniform(std::log(lo), std::log(hi)));
        d[i] = std::log(std::expm1(dt)); // inverse softplus
    }
    return t;
}

} // namespace

void BlockConfig::validate() const {
    if (!d_model || !d_inner || !d_state || !dt_rank)
        throw ConfigError("block: d_model, d_inner, d_state and dt_rank must be positive");
    if (k < 1 || k > n_experts)
        throw ConfigError("block: need k ≤ N_experts, got k = " + std::to_string(k) +
                          ", N_experts = " + std::to_string(n_experts));
    if (conv_width < 1) throw ConfigError("block: conv_width must be at least 1");
    if (theorem_mode && d_inner != d_model)
        throw ConfigError("block: theorem mode needs identity projections, so d_inner must "
                          "equal d_model");
    if (theorem_mode && per_site_routers)
        throw ConfigError("block: theorem mode requires the shared router");
}

MossNetBlock MossNetBlock::create(const BlockConfig& cfg, const std::string& prefix, Rng rng) {
    cfg.validate();
    MossNetBlock b;
    b.cfg_ = cfg;
    auto bank = [&](std::vector<Param>& v, const char* name, Shape shape, std::size_t fan_in) {
        for (std::size_t e = 0; e < cfg.n_experts; ++e) {
            std::string path = prefix + "." + name + "." + std::to_string(e);
            v.push_back(Param{path, uniform_fan_in(shape, fan_in, rng.derive(path)), {}, true,
                              cfg.n_experts > 1});
        }
    };
    bank(b.in_proj, "in_proj", {cfg.d_model, cfg.d_inner}, cfg.d_model);
    bank(b.gate_proj, "gate_proj", {cfg.d_model, cfg.d_inner}, cfg.d_model);
    bank(b.out_proj, "out_proj", {cfg.d_inner, cfg.d_model}, cfg.d_inner);
    bank(b.dt_low, "dt_low", {cfg.d_inner, cfg.dt_rank}, cfg.d_inner);
    bank(b.b_proj, "b_proj", {cfg.d_inner, cfg.d_state}, cfg.d_inner);
    bank(b.c_proj, "c_proj", {cfg.d_inner, cfg.d_state}, cfg.d_inner);

    std::string p;
    p = prefix + ".conv.w";
    b.conv_w = Param{p, uniform_fan_in({cfg.d_inner, cfg.conv_width}, cfg.conv_width,
                                       rng.derive(p)),
                     {}, false, false};
    p = prefix + ".conv.b";
    b.conv_b = Param{p, uniform_fan_in({cfg.d_inner}, cfg.conv_width, rng.derive(p)), {}, false,
                     false};
    // A = -exp(a_log) spreads decay rates 1..d_state across the state axis
    {
        Tensor t = Tensor::zeros({cfg.d_inner, cfg.d_state});
        double* d = t.mutable_data();
        for (std::size_t i = 0; i < cfg.d_inner; ++i)
            for (std::size_t j = 0; j < cfg.d_state; ++j)
                d[i * cfg.d_state + j] = std::log(double(j + 1));
        b.a_log = Param{prefix + ".a_log", t, {}, false, false};
    }
    p = prefix + ".dt_expand";
    b.dt_expand =
        Param{p, uniform_fan_in({cfg.dt_rank, cfg.d_inner}, cfg.dt_rank, rng.derive(p)), {}, true,
              false};
    p = prefix + ".dt_bias";
    b.dt_bias = Param{p, dt_bias_init(cfg.d_inner, rng.derive(p)), {}, false, false};

    std::size_t n_routers = cfg.per_site_routers ? 6 : 1;
    for (std::size_t r = 0; r < n_routers; ++r) {
        p = prefix + ".router." + std::to_string(r);
        b.routers.push_back(Param{
            p, uniform_fan_in({cfg.d_model, cfg.n_experts}, cfg.d_model, rng.derive(p)), {},
            true, false});
    }
    return b;
}

std::vector<Param*> MossNetBlock::params() {
    std::vector<Param*> out;
    for (auto* bank : {&in_proj, &gate_proj, &out_proj, &dt_low, &b_proj, &c_proj})
        for (Param& p : *bank) out.push_back(&p);
    out.push_back(&conv_w);
    out.push_back(&conv_b);
    out.push_back(&a_log);
    out.push_back(&dt_expand);
    out.push_back(&dt_bias);
    for (Param& p : routers) out.push_back(&p);
    return out;
}

std::vector<const Param*> MossNetBlock::params() const {
    auto mut = const_cast<MossNetBlock*>(this)->params();
    return {mut.begin(), mut.end()};
}

void MossNetBlock::set_k(std::size_t k) {
    if (k < 1 || k > cfg_.n_experts)
        throw ConfigError("block: need k ≤ N_experts, got k = " + std::to_string(k) +
                          ", N_experts = " + std::to_string(cfg_.n_experts));
    cfg_.k = k;
}

moe::Route MossNetBlock::route_site(Graph* g, const Tensor& x, std::size_t site) {
    Param& r = routers[cfg_.per_site_routers ? site : 0];
    return moe::route(matmul(x, use(g, r)), cfg_.k, cfg_.renorm_topk);
}

Tensor MossNetBlock::mix(Graph* g, const moe::Route& rt, const Tensor& x,
                         std::vector<Param>& bank, std::size_t* evals) {
    return moe::combine(
        x, rt, [&](int e, const Tensor& xs) { return matmul(xs, use(g, bank[std::size_t(e)])); },
        evals);
}

BlockOut MossNetBlock::forward(Graph* g, const Tensor& x, std::size_t seq_len, bool use_scan) {
    std::size_t n = x.rows();
    if (x.cols() != cfg_.d_model)
        throw ShapeError("block: input " + shape_str(x.shape()) + " vs d_model " +
                         std::to_string(cfg_.d_model));
    if (seq_len == 0 || n % seq_len)
        throw ShapeError("block: " + std::to_string(n) + " rows not a multiple of seq_len " +
                         std::to_string(seq_len));
    BlockOut out;

    // one routing decision per token, shared across sites by default
    std::vector<moe::Route> site_rt;
    if (cfg_.per_site_routers) {
        for (std::size_t s = 0; s < 6; ++s) site_rt.push_back(route_site(g, x, s));
        out.routes = site_rt;
    } else {
        moe::Route shared = route_site(g, x, 0);
        site_rt.assign(6, shared);
        out.routes = {shared};
    }

    // u: expert-mixed input projection, then causal conv and SiLU
    Tensor u;
    if (cfg_.theorem_mode) {
        u = x; // identity input map
    } else {
        u = mix(g, site_rt[0], x, in_proj, &out.expert_evals);
        u = silu(conv1d_causal(u, use(g, conv_w), use(g, conv_b), seq_len));
    }

    // continuous SSM parameters as expert mixtures of projections of u
    Tensor dt_pre;
    if (cfg_.theorem_mode) {
        // single delta path: expert 0 only, no mixture
        dt_pre = matmul(matmul(u, use(g, dt_low[0])), use(g, dt_expand));
    } else {
        dt_pre = matmul(mix(g, site_rt[3], u, dt_low, &out.expert_evals), use(g, dt_expand));
    }
    Tensor delta = softplus(add_rowvec(dt_pre, use(g, dt_bias)));
    Tensor bc = mix(g, site_rt[4], u, b_proj, &out.expert_evals);
    Tensor cc = mix(g, site_rt[5], u, c_proj, &out.expert_evals);

    Tensor y = selective_ssm(delta, use(g, a_log), bc, cc, u, seq_len, use_scan);

    if (cfg_.theorem_mode) {
        out.y = y; // identity output map, no gate
        return out;
    }
    Tensor gate = silu(mix(g, site_rt[1], x, gate_proj, &out.expert_evals));
    out.y = mix(g, site_rt[2], mul(y, gate), out_proj, &out.expert_evals);
    return out;
}

BlockState MossNetBlock::initial_state() const {
    BlockState st;
    st.ssm.assign(cfg_.d_inner * cfg_.d_state, 0.0);
    st.conv_tail.assign((cfg_.conv_width - 1) * cfg_.d_inner, 0.0);
    return st;
}

Tensor MossNetBlock::step(const Tensor& x_t, BlockState& st) const {
    const BlockConfig& c = cfg_;
    if (x_t.shape() != Shape{c.d_model})
        throw ShapeError("block step: input " + shape_str(x_t.shape()) + " vs d_model " +
                         std::to_string(c.d_model));
    auto& self = const_cast<MossNetBlock&>(*this);
    Tensor row = reshape(x_t, {1, c.d_model});

    std::vector<moe::Route> site_rt;
    if (c.per_site_routers)
        for (std::size_t s = 0; s < 6; ++s) site_rt.push_back(self.route_site(nullptr, row, s));
    else
        site_rt.assign(6, self.route_site(nullptr, row, 0));

    Tensor u;
    if (c.theorem_mode) {
        u = row;
    } else {
        u = self.mix(nullptr, site_rt[0], row, self.in_proj, nullptr);
        // conv over the stored tail plus the fresh u, same tap order as the
        // batched op: tap conv_width-1 is the current token
        std::vector<double> uc(c.d_inner);
        for (std::size_t d = 0; d < c.d_inner; ++d) {
            double acc = conv_b.value.at(d);
            for (std::size_t j = 0; j + 1 < c.conv_width; ++j)
                acc += conv_w.value.at(d * c.conv_width + j) * st.conv_tail[j * c.d_inner + d];
            acc += conv_w.value.at(d * c.conv_width + (c.conv_width - 1)) * u.at(d);
            uc[d] = acc;
        }
        // shift the ring: drop the oldest row, append the new u
        if (c.conv_width > 1) {
            std::copy(st.conv_tail.begin() + std::ptrdiff_t(c.d_inner), st.conv_tail.end(),
                      st.conv_tail.begin());
            for (std::size_t d = 0; d < c.d_inner; ++d)
                st.conv_tail[(c.conv_width - 2) * c.d_inner + d] = u.at(d);
        }
        u = silu(Tensor::from_data({1, c.d_inner}, std::move(uc)));
    }

    Tensor dt_pre;
    if (c.theorem_mode)
        dt_pre = matmul(matmul(u, dt_low[0].value), dt_expand.value);
    else
        dt_pre = matmul(self.mix(nullptr, site_rt[3], u, self.dt_low, nullptr), dt_expand.value);
    Tensor delta = softplus(add_rowvec(dt_pre, dt_bias.value));
    Tensor bc = self.mix(nullptr, site_rt[4], u, self.b_proj, nullptr);
    Tensor cc = self.mix(nullptr, site_rt[5], u, self.c_proj, nullptr);

    // per-token ZOH discretisation, then one recurrence step in place
    std::size_t D = c.d_inner, P = c.d_state;
    std::vector<double> y(D);
    for (std::size_t d = 0; d < D; ++d) {
        double dt = delta.at(d);
        double ut = u.at(d);
        double acc = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
            double a = -std::exp(a_log.value.at(d * P + p));
            double abar, phi;
            ssm::zoh_pair(dt * a, abar, phi);
            double bbar = dt * phi * bc.at(p);
            double s = abar * st.ssm[d * P + p] + bbar * ut;
            st.ssm[d * P + p] = s;
            acc += cc.at(p) * s;
        }
        y[d] = acc;
    }
    Tensor ys = Tensor::from_data({1, D}, std::move(y));

    if (c.theorem_mode) return reshape(ys, {c.d_model});
    Tensor gate = silu(self.mix(nullptr, site_rt[1], row, self.gate_proj, nullptr));
    Tensor out = self.mix(nullptr, site_rt[2], mul(ys, gate), self.out_proj, nullptr);
    return reshape(out, {c.d_model});
}

} // namespace mossnet
