#include "mossnet/autograd.hpp"

namespace mossnet {

const std::vector<double> Graph::empty_;

Tensor Graph::attach(Param& p) {
    auto it = by_param_.find(&p);
    if (it != by_param_.end()) {
        Tensor t = p.value;
        t.graph_ = this;
        t.node_ = it->second;
        return t;
    }
    Tensor t = p.value.detached();
    record(t, {}, nullptr);
    by_param_.emplace(&p, t.node_);
    return t;
}

Tensor Graph::leaf(const Tensor& v) {
    Tensor t = v.detached();
    record(t, {}, nullptr);
    return t;
}

void Graph::record(Tensor& out, std::vector<int> parents, BackwardFn fn) {
    // one model step records a few thousand nodes; reserving avoids moving
    // every closure on each growth of the tape
    if (nodes_.capacity() == nodes_.size()) nodes_.reserve(nodes_.size() ? 2 * nodes_.size() : 4096);
    out.graph_ = this;
    out.node_ = int(nodes_.size());
    nodes_.push_back(Node{out, std::move(parents), std::move(fn), {}});
}

std::vector<double>* Graph::grad_buf(int node) {
    if (node < 0) return nullptr;
    Node& n = nodes_[std::size_t(node)];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return &n.grad;
}

const std::vector<double>& Graph::grad_of(int node) const {
    if (node < 0) return empty_;
    return nodes_[std::size_t(node)].grad;
}

Tensor Graph::grad(const Tensor& t) const {
    if (!t.attached() || t.graph() != this)
        throw Error("grad: tensor is not attached to this graph");
    const auto& g = grad_of(t.node());
    if (g.empty()) return Tensor::zeros(t.shape());
    return Tensor::from_data(t.shape(), g);
}

void Graph::backward(const Tensor& loss) {
    if (!loss.attached() || loss.graph() != this)
        throw Error("backward: loss is not attached to this graph");
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto* seed = grad_buf(loss.node());
    (*seed)[0] += 1.0;
    for (int i = loss.node(); i >= 0; --i) {
        Node& n = nodes_[std::size_t(i)];
        if (n.grad.empty()) continue;
        if (n.backward) {
            n.backward(*this, i);
            // interior gradients are consumed by now; free them eagerly
            std::vector<double>().swap(n.grad);
        }
    }
}

void Graph::take_grad(Param& p) {
    auto it = by_param_.find(&p);
    if (it == by_param_.end() || nodes_[std::size_t(it->second)].grad.empty()) {
        p.grad.assign(p.value.numel(), 0.0);
        return;
    }
    p.grad = std::move(nodes_[std::size_t(it->second)].grad);
}

std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& fn,
                                     std::vector<double> x, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + h;
        double fp = fn(x);
        x[i] = keep - h;
        double fm = fn(x);
        x[i] = keep;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

} // namespace mossnet
