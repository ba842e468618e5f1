#include "mossnet/theorem.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "mossnet/block.hpp"
#include "mossnet/errors.hpp"
#include "mossnet/moe.hpp"
#include "mossnet/ops.hpp"
#include "mossnet/rng.hpp"
#include "mossnet/ssm.hpp"

namespace mossnet::theorem {

namespace {

constexpr double kDecayLo = 1e-3;

void check_instance(const TheoremInstance& inst) {
    if (inst.T == 0 || inst.T > 32) throw DomainError("theorem: need 1 <= T <= 32");
    if (inst.M == 0 || inst.M > 4) throw DomainError("theorem: need 1 <= M <= 4");
    if (inst.P == 0 || inst.N == 0) throw DomainError("theorem: empty state or input dim");
    if (inst.abar.shape() != Shape{inst.T, inst.P})
        throw ShapeError("theorem: abar must be [T x P]");
    if (inst.bbar.size() != inst.M || inst.c.size() != inst.M)
        throw ShapeError("theorem: need one bbar and one c bank per expert");
    for (std::size_t m = 0; m < inst.M; ++m) {
        if (inst.bbar[m].shape() != Shape{inst.T, inst.P})
            throw ShapeError("theorem: bbar bank must be [T x P]");
        if (inst.c[m].shape() != Shape{inst.T, inst.P})
            throw ShapeError("theorem: c bank must be [T x P]");
    }
    if (inst.probs.shape() != Shape{inst.T, inst.M})
        throw ShapeError("theorem: probs must be [T x M]");
    if (inst.x.shape() != Shape{inst.T, inst.N}) throw ShapeError("theorem: x must be [T x N]");
}

} // namespace

TheoremInstance random_instance(std::uint64_t seed, std::size_t T, std::size_t P, std::size_t N,
                                std::size_t M) {
    Rng rng(seed);
    TheoremInstance inst;
    inst.T = T;
    inst.P = P;
    inst.N = N;
    inst.M = M;

    inst.abar = Tensor::zeros({T, P});
    {
        Rng r = rng.derive("abar");
        double* a = inst.abar.mutable_data();
        for (std::size_t i = 0; i < T * P; ++i) a[i] = r.uniform(kDecayLo, 1.0 - kDecayLo);
    }
    for (std::size_t m = 0; m < M; ++m) {
        Rng rb = rng.derive("bbar" + std::to_string(m));
        Rng rc = rng.derive("c" + std::to_string(m));
        Tensor b = Tensor::zeros({T, P});
        Tensor c = Tensor::zeros({T, P});
        double* bp = b.mutable_data();
        double* cp = c.mutable_data();
        for (std::size_t i = 0; i < T * P; ++i) {
            bp[i] = rb.uniform(-1.0, 1.0);
            cp[i] = rc.uniform(-1.0, 1.0);
        }
        inst.bbar.push_back(std::move(b));
        inst.c.push_back(std::move(c));
    }

    // mixture weights come from the same full-softmax routing op the blocks use
    Tensor logits = Tensor::zeros({T, M});
    {
        Rng r = rng.derive("logits");
        double* lp = logits.mutable_data();
        for (std::size_t i = 0; i < T * M; ++i) lp[i] = r.uniform(-2.0, 2.0);
    }
    inst.probs = moe::route(logits, 1).probs;

    inst.x = Tensor::zeros({T, N});
    {
        Rng r = rng.derive("x");
        double* xp = inst.x.mutable_data();
        for (std::size_t i = 0; i < T * N; ++i) xp[i] = r.uniform(-1.0, 1.0);
    }
    check_instance(inst);
    return inst;
}

Tensor ssm_reference(const TheoremInstance& inst) {
    check_instance(inst);
    const std::size_t T = inst.T, P = inst.P, N = inst.N, M = inst.M;
    const double* ab = inst.abar.data();
    const double* pr = inst.probs.data();
    const double* xp = inst.x.data();

    Tensor y = Tensor::zeros({T, N});
    double* yp = y.mutable_data();
    std::vector<double> s(P * N, 0.0); // state rows indexed by p, cols by input dim
    std::vector<double> bmix(P), cmix(P);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t p = 0; p < P; ++p) {
            double bm = 0.0, cm = 0.0;
            for (std::size_t m = 0; m < M; ++m) {
                const double w = pr[t * M + m];
                bm += w * inst.bbar[m].data()[t * P + p];
                cm += w * inst.c[m].data()[t * P + p];
            }
            bmix[p] = bm;
            cmix[p] = cm;
        }
        for (std::size_t p = 0; p < P; ++p) {
            const double a = ab[t * P + p];
            for (std::size_t nn = 0; nn < N; ++nn)
                s[p * N + nn] = a * s[p * N + nn] + bmix[p] * xp[t * N + nn];
        }
        for (std::size_t nn = 0; nn < N; ++nn) {
            double acc = 0.0;
            for (std::size_t p = 0; p < P; ++p) acc += cmix[p] * s[p * N + nn];
            yp[t * N + nn] = acc;
        }
    }
    return y;
}

HeadVectors build_heads(const TheoremInstance& inst) {
    check_instance(inst);
    const std::size_t T = inst.T, P = inst.P, M = inst.M;
    const double* ab = inst.abar.data();
    for (std::size_t i = 0; i < T * P; ++i) {
        if (!(ab[i] >= kDecayLo && ab[i] <= 1.0))
            throw DomainError("theorem: decay " + std::to_string(ab[i]) +
                              " outside safe range, inverse products would blow up");
    }

    // running products down the time axis; the inverse side multiplies
    // reciprocals in the same order rather than dividing one big product
    Tensor cum = Tensor::zeros({T, P});
    Tensor cuminv = Tensor::zeros({T, P});
    double* cu = cum.mutable_data();
    double* ci = cuminv.mutable_data();
    for (std::size_t p = 0; p < P; ++p) {
        double f = 1.0, fi = 1.0;
        for (std::size_t t = 0; t < T; ++t) {
            f *= ab[t * P + p];
            fi *= 1.0 / ab[t * P + p];
            cu[t * P + p] = f;
            ci[t * P + p] = fi;
        }
    }

    HeadVectors h;
    h.T = T;
    h.P = P;
    h.N = inst.N;
    h.M = M;
    h.v = inst.x;
    const double* pr = inst.probs.data();
    for (std::size_t m = 0; m < M; ++m) {
        Tensor q = Tensor::zeros({T, P});
        Tensor k = Tensor::zeros({T, P});
        double* qp = q.mutable_data();
        double* kp = k.mutable_data();
        const double* cp = inst.c[m].data();
        const double* bp = inst.bbar[m].data();
        for (std::size_t t = 0; t < T; ++t) {
            const double w = pr[t * M + m];
            for (std::size_t p = 0; p < P; ++p) {
                qp[t * P + p] = w * cp[t * P + p] * cu[t * P + p];
                kp[t * P + p] = w * ci[t * P + p] * bp[t * P + p];
            }
        }
        h.q.push_back(std::move(q));
        h.k.push_back(std::move(k));
    }
    return h;
}

MhaOut mha_moa_forward(const HeadVectors& h, const MhaOptions& opt) {
    const std::size_t T = h.T, P = h.P, N = h.N, M = h.M;
    if (h.q.size() != M || h.k.size() != M) throw ShapeError("theorem: head bank size mismatch");
    MhaOut out;
    out.y = Tensor::zeros({T, N});
    double* yp = out.y.mutable_data();
    const double* vp = h.v.data();
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t m = 0; m < M; ++m) {
            const double* qp = h.q[m].data() + t * P;
            for (std::size_t n = 0; n < M; ++n) {
                if (!opt.cross_terms && m != n) continue;
                const double sign = (opt.flip_cross_sign && m != n) ? -1.0 : 1.0;
                const double* kb = h.k[n].data();
                for (std::size_t i = 0; i <= t; ++i) {
                    double dot = 0.0;
                    for (std::size_t p = 0; p < P; ++p) dot += qp[p] * kb[i * P + p];
                    dot *= sign;
                    for (std::size_t nn = 0; nn < N; ++nn)
                        yp[t * N + nn] += dot * vp[i * N + nn];
                    ++out.terms;
                }
            }
        }
    }
    return out;
}

double verify_equivalence(const TheoremInstance& inst, const MhaOptions& opt) {
    Tensor ref = ssm_reference(inst);
    MhaOut got = mha_moa_forward(build_heads(inst), opt);
    const double* a = ref.data();
    const double* b = got.y.data();
    double worst = 0.0;
    for (std::size_t i = 0; i < ref.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

BlockEquivResult verify_block_equivalence(std::uint64_t seed, std::size_t T, std::size_t d_model,
                                          std::size_t d_state, std::size_t n_experts,
                                          std::size_t k, bool flip_cross_sign) {
    BlockConfig cfg;
    cfg.d_model = d_model;
    cfg.d_inner = d_model;
    cfg.d_state = d_state;
    cfg.dt_rank = (d_model + 15) / 16;
    cfg.n_experts = n_experts;
    cfg.k = k;
    cfg.theorem_mode = true;
    Rng rng(seed);
    MossNetBlock blk = MossNetBlock::create(cfg, "blk", rng.derive("params"));

    Tensor x = Tensor::zeros({T, d_model});
    {
        Rng r = rng.derive("x");
        double* xp = x.mutable_data();
        for (std::size_t i = 0; i < T * d_model; ++i) xp[i] = r.uniform(-1.0, 1.0);
    }
    Tensor y_block = blk.forward(nullptr, x, T, true).y;

    const std::size_t D = d_model, P = d_state, M = n_experts;
    const double* xp = x.data();

    // redo the routing the block performed and spread the kept weights into a
    // dense per-token mixture; dropped experts contribute weight zero, which
    // the expanded form handles the same way the grouped matmuls do
    moe::Route rt = moe::route(matmul(x, blk.routers[0].value), k, cfg.renorm_topk);
    Tensor mixw = Tensor::zeros({T, M});
    {
        double* mw = mixw.mutable_data();
        const double* wp = rt.weights.data();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t s = 0; s < k; ++s) mw[t * M + rt.experts[t * k + s]] = wp[t * k + s];
    }

    // the single delta path and the per-expert continuous B and C projections
    Tensor dt_pre = matmul(matmul(x, blk.dt_low[0].value), blk.dt_expand.value);
    Tensor delta = Tensor::zeros({T, D});
    {
        double* dp = delta.mutable_data();
        const double* pp = dt_pre.data();
        const double* bias = blk.dt_bias.value.data();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < D; ++d) {
                const double z = pp[t * D + d] + bias[d];
                dp[t * D + d] = z > 30.0 ? z : std::log1p(std::exp(z));
            }
    }
    std::vector<Tensor> bcont, ccont; // per expert [T x P]
    for (std::size_t m = 0; m < M; ++m) {
        bcont.push_back(matmul(x, blk.b_proj[m].value));
        ccont.push_back(matmul(x, blk.c_proj[m].value));
    }

    BlockEquivResult res;
    res.T = T;
    res.M = M;
    res.P = P;
    const double* dp = delta.data();
    const double* alp = blk.a_log.value.data();
    const double* yb = y_block.data();
    for (std::size_t d = 0; d < D; ++d) {
        TheoremInstance inst;
        inst.T = T;
        inst.P = P;
        inst.N = 1;
        inst.M = M;
        inst.probs = mixw;
        inst.abar = Tensor::zeros({T, P});
        double* ap = inst.abar.mutable_data();
        for (std::size_t t = 0; t < T; ++t) {
            const double dt = dp[t * D + d];
            for (std::size_t p = 0; p < P; ++p)
                ap[t * P + p] = std::exp(dt * -std::exp(alp[d * P + p]));
        }
        for (std::size_t m = 0; m < M; ++m) {
            Tensor bb = Tensor::zeros({T, P});
            double* bp = bb.mutable_data();
            const double* bc = bcont[m].data();
            for (std::size_t t = 0; t < T; ++t) {
                const double dt = dp[t * D + d];
                for (std::size_t p = 0; p < P; ++p) {
                    const double a = -std::exp(alp[d * P + p]);
                    bp[t * P + p] = dt * ssm::zoh_phi(dt * a) * bc[t * P + p];
                }
            }
            inst.bbar.push_back(std::move(bb));
            inst.c.push_back(ccont[m]);
        }
        inst.x = Tensor::zeros({T, 1});
        {
            double* ip = inst.x.mutable_data();
            for (std::size_t t = 0; t < T; ++t) ip[t] = xp[t * D + d];
        }

        MhaOptions opt;
        opt.flip_cross_sign = flip_cross_sign;
        MhaOut got = mha_moa_forward(build_heads(inst), opt);
        const double* gy = got.y.data();
        for (std::size_t t = 0; t < T; ++t)
            res.max_diff = std::max(res.max_diff, std::abs(gy[t] - yb[t * D + d]));
    }
    return res;
}

} // namespace mossnet::theorem
