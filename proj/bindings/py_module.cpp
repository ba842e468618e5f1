#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <vector>

#include "mossnet/block.hpp"
#include "mossnet/data.hpp"
#include "mossnet/model.hpp"
#include "mossnet/moe.hpp"
#include "mossnet/ssm.hpp"
#include "mossnet/theorem.hpp"

namespace py = pybind11;
using namespace mossnet;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
    Shape shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = std::size_t(a.shape(i));
    Tensor t = Tensor::zeros(shape);
    std::copy(a.data(), a.data() + t.numel(), t.mutable_data());
    return t;
}

py::array_t<double> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> a(shape);
    std::copy(t.data(), t.data() + t.numel(), a.mutable_data());
    return a;
}

} // namespace

PYBIND11_MODULE(mossnet, m) {
    m.doc() = "mixture-of-state-space-experts kernels, routing, and the "
              "attention-form equivalence oracle";

    m.def("zoh_phi", &ssm::zoh_phi, py::arg("z"),
          "(exp(z)-1)/z with a series guard near zero");

    m.def(
        "discretize",
        [](const DoubleArray& A, const DoubleArray& B, const DoubleArray& dt) {
            ssm::Discretized d = ssm::discretize(to_tensor(A), to_tensor(B), to_tensor(dt));
            return py::make_tuple(to_array(d.abar), to_array(d.bbar));
        },
        py::arg("A"), py::arg("B"), py::arg("dt"),
        "exact zero-order hold of a diagonal continuous system: (abar, bbar)");

    m.def(
        "scan",
        [](const DoubleArray& a, const DoubleArray& b) {
            return to_array(ssm::scan(to_tensor(a), to_tensor(b)));
        },
        py::arg("a"), py::arg("b"),
        "inclusive Blelloch scan of s_t = a_t * s_(t-1) + b_t over rows");

    m.def(
        "scan_sequential",
        [](const DoubleArray& a, const DoubleArray& b) {
            return to_array(ssm::scan_sequential(to_tensor(a), to_tensor(b)));
        },
        py::arg("a"), py::arg("b"), "reference recurrence, same contract as scan");

    m.def(
        "unroll",
        [](const DoubleArray& abar, const DoubleArray& bbar, const DoubleArray& C,
           const DoubleArray& x) {
            return to_array(
                ssm::unroll(to_tensor(abar), to_tensor(bbar), to_tensor(C), to_tensor(x)));
        },
        py::arg("abar"), py::arg("bbar"), py::arg("C"), py::arg("x"),
        "brute-force double-sum evaluation of the unrolled recurrence");

    m.def(
        "route",
        [](const DoubleArray& logits, std::size_t k, bool renorm_topk) {
            moe::Route rt = moe::route(to_tensor(logits), k, renorm_topk);
            py::array_t<int> experts({py::ssize_t(rt.n_tokens), py::ssize_t(rt.k)});
            std::copy(rt.experts.begin(), rt.experts.end(), experts.mutable_data());
            py::array_t<double> weights({py::ssize_t(rt.n_tokens), py::ssize_t(rt.k)});
            std::copy(rt.weights.data(), rt.weights.data() + rt.weights.numel(),
                      weights.mutable_data());
            py::dict out;
            out["experts"] = experts;
            out["weights"] = weights;
            out["probs"] = to_array(rt.probs);
            return out;
        },
        py::arg("logits"), py::arg("k"), py::arg("renorm_topk") = false,
        "top-k routing from router logits: selected ids, mixture weights, full softmax");

    m.def(
        "load_balance_loss",
        [](const DoubleArray& probs, const std::vector<int>& experts, std::size_t k,
           bool count_all, double alpha) {
            return moe::load_balance_loss(to_tensor(probs), experts, k, count_all, alpha)
                .at(0);
        },
        py::arg("probs"), py::arg("experts"), py::arg("k"), py::arg("count_all") = false,
        py::arg("alpha") = 0.001,
        "alpha * N * sum_i f_i * P_i over a batch of routing decisions");

    m.def("topk_schedule", &moe::topk_schedule, py::arg("step"),
          "dynamic top-k: 900 steps of k=3 then 100 steps of k=2, repeating");

    m.def(
        "verify_equivalence",
        [](std::uint64_t seed, std::size_t T, std::size_t P, std::size_t N, std::size_t M) {
            return theorem::verify_equivalence(theorem::random_instance(seed, T, P, N, M));
        },
        py::arg("seed"), py::arg("T") = 8, py::arg("P") = 4, py::arg("N") = 2,
        py::arg("M") = 2,
        "max |recurrence - attention form| on a random mixture instance");

    m.def(
        "verify_block_equivalence",
        [](std::uint64_t seed, std::size_t T, std::size_t d_model, std::size_t d_state,
           std::size_t n_experts, std::size_t k, bool flip_cross_sign) {
            theorem::BlockEquivResult r = theorem::verify_block_equivalence(
                seed, T, d_model, d_state, n_experts, k, flip_cross_sign);
            py::dict out;
            out["max_diff"] = r.max_diff;
            out["T"] = r.T;
            out["M"] = r.M;
            out["P"] = r.P;
            return out;
        },
        py::arg("seed"), py::arg("T") = 10, py::arg("d_model") = 8, py::arg("d_state") = 4,
        py::arg("n_experts") = 3, py::arg("k") = 2, py::arg("flip_cross_sign") = false,
        "re-derives the attention form from a real block forward pass");

    m.def(
        "block_forward",
        [](std::uint64_t seed, const DoubleArray& x, std::size_t d_state,
           std::size_t n_experts, std::size_t k, std::size_t seq_len, bool theorem_mode) {
            Tensor xt = to_tensor(x);
            if (xt.shape().size() != 2)
                throw ShapeError("block_forward: x must be [n x d_model]");
            BlockConfig cfg;
            cfg.d_model = xt.size(1);
            cfg.d_inner = theorem_mode ? cfg.d_model : 2 * cfg.d_model;
            cfg.d_state = d_state;
            cfg.dt_rank = (cfg.d_model + 15) / 16;
            cfg.n_experts = n_experts;
            cfg.k = k;
            cfg.theorem_mode = theorem_mode;
            MossNetBlock blk = MossNetBlock::create(cfg, "block", Rng(seed));
            BlockOut out = blk.forward(nullptr, xt, seq_len ? seq_len : xt.size(0), true);
            return to_array(out.y);
        },
        py::arg("seed"), py::arg("x"), py::arg("d_state") = 16, py::arg("n_experts") = 4,
        py::arg("k") = 2, py::arg("seq_len") = 0, py::arg("theorem_mode") = false,
        "one freshly initialised block applied to x, tape-free");

    m.def(
        "param_counts",
        [](const std::string& arch, std::size_t d_model, std::size_t d_state,
           std::size_t n_layers, bool use_mlp, std::size_t n_experts, std::size_t k,
           std::size_t n_heads, std::size_t n_kv_heads, std::size_t vocab_size,
           bool tie_embeddings, std::vector<long long> attn_layer_indices) {
            ModelConfig cfg;
            cfg.arch = arch;
            cfg.d_model = d_model;
            cfg.d_state = d_state;
            cfg.n_layers = n_layers;
            cfg.use_mlp = use_mlp;
            cfg.n_experts = n_experts;
            cfg.k = k;
            cfg.n_heads = n_heads;
            cfg.n_kv_heads = n_kv_heads;
            cfg.vocab_size = vocab_size;
            cfg.tie_embeddings = tie_embeddings;
            cfg.attn_layer_indices = std::move(attn_layer_indices);
            Model model = Model::build(cfg);
            ParamStats st = model.stats();
            return py::make_tuple(st.total, st.active);
        },
        py::arg("arch") = "mossnet", py::arg("d_model") = 64, py::arg("d_state") = 16,
        py::arg("n_layers") = 4, py::arg("use_mlp") = true, py::arg("n_experts") = 4,
        py::arg("k") = 2, py::arg("n_heads") = 2, py::arg("n_kv_heads") = 1,
        py::arg("vocab_size") = 257, py::arg("tie_embeddings") = true,
        py::arg("attn_layer_indices") = std::vector<long long>{-1},
        "(total, active-per-token) parameter counts for a model config");

    m.def(
        "synth_corpus",
        [](std::size_t n_bytes, std::uint64_t seed) {
            std::vector<std::uint8_t> c = data::synth_corpus(n_bytes, seed);
            return py::bytes(reinterpret_cast<const char*>(c.data()), c.size());
        },
        py::arg("n_bytes"), py::arg("seed") = 0,
        "deterministic multi-domain synthetic byte corpus");

    m.attr("__version__") = "0.1.0";
}
