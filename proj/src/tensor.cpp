#include "mossnet/tensor.hpp"

#include <atomic>
#include <sstream>

namespace mossnet {

namespace {
std::atomic<std::size_t> g_bytes_current{0};
std::atomic<std::size_t> g_bytes_peak{0};

void account_alloc(std::size_t bytes) {
    std::size_t cur = g_bytes_current.fetch_add(bytes) + bytes;
    std::size_t peak = g_bytes_peak.load();
    while (cur > peak && !g_bytes_peak.compare_exchange_weak(peak, cur)) {
    }
}

// shared buffers are wrapped so every allocation/free passes the accountant
std::shared_ptr<std::vector<double>> make_buffer(std::size_t n, double fill) {
    auto raw = new std::vector<double>(n, fill);
    account_alloc(n * sizeof(double));
    return std::shared_ptr<std::vector<double>>(raw, [n](std::vector<double>* p) {
        g_bytes_current.fetch_sub(n * sizeof(double));
        delete p;
    });
}

std::shared_ptr<std::vector<double>> adopt_buffer(std::vector<double>&& v) {
    std::size_t n = v.size();
    auto raw = new std::vector<double>(std::move(v));
    account_alloc(n * sizeof(double));
    return std::shared_ptr<std::vector<double>>(raw, [n](std::vector<double>* p) {
        g_bytes_current.fetch_sub(n * sizeof(double));
        delete p;
    });
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}
} // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = make_buffer(shape_numel(t.shape_), v);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = adopt_buffer(std::move(data));
    return t;
}

std::size_t Tensor::numel() const { return data_ ? data_->size() : 0; }

std::size_t Tensor::rows() const {
    if (ndim() != 2) throw ShapeError("rows: rank-2 expected, got " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (ndim() != 2) throw ShapeError("cols: rank-2 expected, got " + shape_str(shape_));
    return shape_[1];
}

double* Tensor::mutable_data() {
    if (!data_ || data_.use_count() != 1 || node_ >= 0)
        throw Error("mutable_data: buffer is shared or already published");
    return data_->data();
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.graph_ = nullptr;
    t.node_ = -1;
    return t;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
        throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    t.graph_ = nullptr;
    t.node_ = -1;
    return t;
}

std::size_t tensor_bytes_current() { return g_bytes_current.load(); }
std::size_t tensor_bytes_peak() { return g_bytes_peak.load(); }
void tensor_bytes_reset_peak() { g_bytes_peak.store(g_bytes_current.load()); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

} // namespace mossnet
