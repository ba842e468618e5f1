#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "mossnet/model.hpp"

namespace mossnet::train {

// decoupled weight decay applies only to params tagged decay (linear weights)
struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0; // global gradient-norm clip, 0 disables
};

class Adam {
public:
    Adam(std::vector<Param*> params, AdamOptions opt = {});
    // consumes p->grad for every param; lr is the already-scheduled rate
    void step(double lr);
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<Param*> params_;
    AdamOptions opt_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// scheduled learning rate for a run of total_steps; linear warmup to lr_max,
// then cosine decay to zero, or warmup-stable-decay with a 10% floor
double lr_at(std::size_t step, std::size_t total_steps, const ModelConfig& cfg);

struct TrainOptions {
    std::size_t steps = 200;
    std::size_t batch_size = 8;
    std::size_t eval_every = 100; // 0 = final eval only
    std::size_t eval_bytes = 16384; // held-out tail of the corpus
    bool use_scan = true;
};

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0;
    double ce = 0;
    double balance = 0;
    double ppl_eval = -1; // negative = not evaluated this step
    std::size_t k_active = 0;
};

struct TrainResult {
    bool diverged = false;
    std::string diagnostic;
    double final_ppl = 0;
    std::vector<StepMetrics> log;
    std::uint64_t data_counter = 0; // batch-sampler position, for resume
};

TrainResult train_model(Model& model, const std::vector<std::uint8_t>& corpus,
                        const TrainOptions& opts);

// header `step,lr,ce,balance,ppl_eval,k_active`; floats printed with %.17g
// so reruns are byte-identical
void write_metrics_csv(const std::string& path, const std::vector<StepMetrics>& log);

} // namespace mossnet::train
