#pragma once
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mossnet/tensor.hpp"

namespace mossnet {

// trainable tensor with identity; grad is filled after Graph::backward
struct Param {
    std::string path;
    Tensor value;
    std::vector<double> grad;
    bool decay = false;  // weight decay applies (rank-2 linear weights)
    bool expert = false; // member of an expert bank, counts as active/n_experts
};

// reverse-mode tape. Nodes are appended in evaluation order, which is already
// topological, so backward is a single reverse pass. One graph per training
// step; recording and backward are single-threaded.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int self)>;

    // leaf for a parameter; memoized by identity so tied weights attached
    // twice accumulate into one gradient
    Tensor attach(Param& p);
    // anonymous leaf (inputs/constants that still need a node id)
    Tensor leaf(const Tensor& v);

    // publishes out as the value of a new node; parents may contain -1 for
    // detached inputs, backward fns must guard
    void record(Tensor& out, std::vector<int> parents, BackwardFn fn);

    void backward(const Tensor& loss);

    // gradient buffer of a node, zero-initialised to the node's numel;
    // nullptr when node < 0 (detached parent)
    std::vector<double>* grad_buf(int node);
    // read-only gradient of a finished node (empty if never touched)
    const std::vector<double>& grad_of(int node) const;
    Tensor grad(const Tensor& t) const;

    // moves the accumulated gradient into p.grad (zeros when p unused)
    void take_grad(Param& p);

    std::size_t n_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<int> parents;
        BackwardFn backward;
        std::vector<double> grad;
    };
    std::vector<Node> nodes_;
    std::unordered_map<const Param*, int> by_param_;
    static const std::vector<double> empty_;
};

// central finite differences; the independent oracle every backward is
// checked against
std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& fn,
                                     std::vector<double> x, double h = 1e-5);

} // namespace mossnet
