#include "mossnet/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mossnet/data.hpp"
#include "mossnet/errors.hpp"
#include "mossnet/moe.hpp"

namespace mossnet::train {

Adam::Adam(std::vector<Param*> params, AdamOptions opt)
    : params_(std::move(params)), opt_(opt) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Param* p : params_) {
        m_.emplace_back(p->value.numel(), 0.0);
        v_.emplace_back(p->value.numel(), 0.0);
    }
}

void Adam::step(double lr) {
    ++t_;
    double clip_scale = 1.0;
    if (opt_.clip_norm > 0) {
        double sq = 0.0;
        for (Param* p : params_)
            for (double gv : p->grad) sq += gv * gv;
        double norm = std::sqrt(sq);
        if (norm > opt_.clip_norm) clip_scale = opt_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param& p = *params_[i];
        if (p.grad.size() != p.value.numel())
            throw ShapeError("adam: missing gradient for " + p.path);
        double* w = p.value.mutable_data();
        if (opt_.weight_decay > 0 && p.decay)
            for (std::size_t j = 0; j < p.grad.size(); ++j) w[j] -= lr * opt_.weight_decay * w[j];
        for (std::size_t j = 0; j < p.grad.size(); ++j) {
            const double g = p.grad[j] * clip_scale;
            m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * g;
            v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            w[j] -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
        }
    }
}

double lr_at(std::size_t step, std::size_t total_steps, const ModelConfig& cfg) {
    if (total_steps == 0) return 0.0;
    const double pi = 3.14159265358979323846;
    std::size_t warm = std::size_t(std::llround(cfg.warmup_frac * double(total_steps)));
    if (warm >= total_steps) warm = total_steps - 1;
    if (step < warm) return cfg.lr_max * double(step) / double(warm);
    const std::size_t last = total_steps - 1;
    if (cfg.schedule == "cosine") {
        double prog = last > warm ? double(step - warm) / double(last - warm) : 1.0;
        prog = std::min(1.0, std::max(0.0, prog));
        return cfg.lr_max * 0.5 * (1.0 + std::cos(pi * prog));
    }
    // wsd: hold at lr_max, then decay linearly over the final fifth to 10%
    std::size_t decay_start = total_steps - std::max<std::size_t>(1, total_steps / 5);
    if (decay_start <= warm) decay_start = warm;
    if (step < decay_start) return cfg.lr_max;
    double prog = last > decay_start ? double(step - decay_start) / double(last - decay_start)
                                     : 1.0;
    return cfg.lr_max * (1.0 - 0.9 * std::min(1.0, prog));
}

TrainResult train_model(Model& model, const std::vector<std::uint8_t>& corpus,
                        const TrainOptions& opts) {
    const ModelConfig& cfg = model.config();
    const std::size_t L = cfg.context_length;
    if (corpus.size() < L + 1)
        throw DomainError("train: corpus must hold at least context_length + 1 bytes");
    if (opts.steps == 0) throw DomainError("train: steps must be positive");

    // hold out the corpus tail for evaluation when there is room for both
    std::vector<std::uint8_t> train_part, eval_part;
    if (corpus.size() >= 2 * opts.eval_bytes && opts.eval_bytes >= L) {
        train_part.assign(corpus.begin(), corpus.end() - std::ptrdiff_t(opts.eval_bytes));
        eval_part.assign(corpus.end() - std::ptrdiff_t(opts.eval_bytes), corpus.end());
    } else {
        train_part = corpus;
        eval_part = corpus;
    }

    Rng data_rng = Rng(cfg.seed).derive("data");
    Adam adam(model.params());
    TrainResult res;
    res.log.reserve(opts.steps);

    double initial_ce = 0.0;
    std::size_t bad_streak = 0;
    for (std::size_t step = 0; step < opts.steps; ++step) {
        std::size_t k = cfg.k;
        if (cfg.dynamic_k) k = std::min(moe::topk_schedule(step), cfg.n_experts);
        if (k != model.current_k()) model.set_k(k);

        Batch batch = data::sample_batch(train_part, opts.batch_size, L, data_rng);
        double ce = 0, balance = 0;
        try {
            // the tape and loss node must release the parameter buffers
            // before the optimizer mutates them in place
            Graph g;
            LossOut lo = model.loss(&g, batch, opts.use_scan);
            g.backward(lo.total);
            for (Param* p : model.params()) g.take_grad(*p);
            ce = lo.ce;
            balance = lo.balance;
        } catch (const DomainError& e) {
            // runaway weights can push a kernel out of its domain (for
            // example delta underflowing to zero) before the loss streak
            // trips; treat that as divergence too
            res.diverged = true;
            res.diagnostic = std::string("training diverged: numerical failure at step ") +
                             std::to_string(step) + ": " + e.what();
            res.data_counter = data_rng.counter();
            return res;
        }
        adam.step(lr_at(step, opts.steps, cfg));

        if (step == 0) initial_ce = ce;
        // negated form so a NaN loss also counts toward the divergence streak
        if (step > 0 && !(ce <= 2.0 * initial_ce)) {
            if (++bad_streak >= 100) {
                res.diverged = true;
                res.diagnostic = "training diverged: cross-entropy " + std::to_string(ce) +
                                 " stayed above twice the initial " + std::to_string(initial_ce) +
                                 " for 100 consecutive steps, aborted at step " +
                                 std::to_string(step);
                res.data_counter = data_rng.counter();
                return res;
            }
        } else {
            bad_streak = 0;
        }

        StepMetrics sm;
        sm.step = step;
        sm.lr = lr_at(step, opts.steps, cfg);
        sm.ce = ce;
        sm.balance = balance;
        sm.k_active = k;
        bool do_eval = (opts.eval_every && (step + 1) % opts.eval_every == 0) ||
                       step + 1 == opts.steps;
        if (do_eval) {
            sm.ppl_eval = perplexity(model, eval_part, opts.use_scan);
            res.final_ppl = sm.ppl_eval;
        }
        res.log.push_back(sm);
    }
    res.data_counter = data_rng.counter();
    return res;
}

void write_metrics_csv(const std::string& path, const std::vector<StepMetrics>& log) {
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    if (!o) throw IoError("metrics: cannot write " + path);
    o << "step,lr,ce,balance,ppl_eval,k_active\n";
    char buf[64];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const StepMetrics& m : log) {
        o << m.step << ',' << fmt(m.lr) << ',' << fmt(m.ce) << ',' << fmt(m.balance) << ',';
        if (m.ppl_eval >= 0) o << fmt(m.ppl_eval);
        o << ',' << m.k_active << '\n';
    }
    if (!o) throw IoError("metrics: short write to " + path);
}

} // namespace mossnet::train
