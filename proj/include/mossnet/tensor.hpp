#pragma once
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "mossnet/errors.hpp"

namespace mossnet {

class Graph;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

// dense row-major tensor of doubles; data is shared and treated as immutable
// once the tensor escapes the op that built it. A tensor may be attached to an
// autodiff graph via (graph, node); detached tensors have node == -1.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from_data(Shape shape, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const;
    std::size_t size(std::size_t i) const { return shape_.at(i); }
    std::size_t rows() const; // rank-2 helpers, throw on other ranks
    std::size_t cols() const;

    bool defined() const { return data_ != nullptr; }
    const double* data() const { return data_->data(); }
    double at(std::size_t i) const { return (*data_)[i]; }
    const std::vector<double>& vec() const { return *data_; }

    // writable only while this tensor uniquely owns its buffer
    double* mutable_data();

    bool attached() const { return node_ >= 0; }
    int node() const { return node_; }
    Graph* graph() const { return graph_; }
    Tensor detached() const;

    Tensor reshaped(Shape shape) const; // view with same buffer, detached semantics handled by ops

private:
    friend class Graph;
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Graph* graph_ = nullptr;
    int node_ = -1;
};

// structural allocation accounting used by the profiler; counts live tensor
// payload bytes, not OS RSS
std::size_t tensor_bytes_current();
std::size_t tensor_bytes_peak();
void tensor_bytes_reset_peak();

void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

} // namespace mossnet
