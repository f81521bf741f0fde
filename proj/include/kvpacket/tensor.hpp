#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kvpacket/error.hpp"

namespace kvp {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

template <class S>
struct TensorNodeT {
    using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

    Array value;
    Array grad; // empty until first accumulation; non-leaf grads are dropped after backward
    Shape shape;
    bool requires_grad = false; // trainable leaf
    bool needs_grad = false;    // requires_grad, or computed from something that is
    bool leaf = true;
    // Called with this node during reverse replay; accumulates into parents
    // captured by the closure. Takes the node as an argument (not captured)
    // so nodes never own a reference to themselves.
    std::function<void(const TensorNodeT&)> backward_fn;

    void ensure_grad() {
        if (grad.size() == 0) grad = Array::Zero(value.size());
    }
};

template <class S>
class TapeT;

template <class S>
class TapeScopeT;

// Value-semantic handle to a node in the computation graph.
template <class S>
class TensorT {
public:
    using Node = TensorNodeT<S>;
    using Array = typename Node::Array;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return check().shape; }
    int64_t numel() const { return check().value.size(); }
    int64_t rank() const { return static_cast<int64_t>(shape().size()); }

    int64_t rows() const {
        if (rank() != 2) throw ShapeError("rows() needs rank 2, have " + shape_str(shape()));
        return shape()[0];
    }
    int64_t cols() const {
        if (rank() != 2) throw ShapeError("cols() needs rank 2, have " + shape_str(shape()));
        return shape()[1];
    }

    bool requires_grad() const { return check().requires_grad; }
    bool is_leaf() const { return check().leaf; }

    // Leaf-only toggle; freezing drops any accumulated gradient.
    void set_requires_grad(bool on) {
        Node& n = check();
        if (!n.leaf) throw StateError("set_requires_grad: not a leaf");
        n.requires_grad = on;
        n.needs_grad = on;
        if (!on) n.grad.resize(0);
    }

    const Array& value() const { return check().value; }
    // Direct mutation is for optimizers and initializers; never mutate a
    // tensor that a live tape has already consumed.
    Array& mutable_value() { return check().value; }

    bool has_grad() const { return check().grad.size() != 0; }

    // Gradient after backward. A requires_grad leaf that the loss never
    // touched reads as all zeros.
    const Array& grad() const {
        Node& n = check();
        if (n.grad.size() == 0) {
            if (!n.requires_grad)
                throw StateError("grad(): tensor does not require grad");
            n.ensure_grad();
        }
        return n.grad;
    }

    void zero_grad() { check().grad.resize(0); }

    S item() const {
        if (numel() != 1) throw ShapeError("item() needs 1 element, have " + shape_str(shape()));
        return check().value[0];
    }

    S at(int64_t i) const {
        if (i < 0 || i >= numel()) throw RangeError("at(" + std::to_string(i) + ") out of range");
        return check().value[i];
    }

    S at(int64_t i, int64_t j) const {
        int64_t r = rows(), c = cols();
        if (i < 0 || i >= r || j < 0 || j >= c)
            throw RangeError("at(" + std::to_string(i) + "," + std::to_string(j) + ") out of range for " + shape_str(shape()));
        return check().value[i * c + j];
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    Node& check() const {
        if (!node_) throw StateError("use of undefined Tensor");
        return *node_;
    }
    std::shared_ptr<Node> node_;
};

// Explicitly scoped gradient recorder. One tape per thread; ops executed
// while it is active and touching grad-requiring inputs are recorded.
// Replay order is exactly reverse execution order.
template <class S>
class TapeT {
public:
    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT* current() { return current_; }

    void record(std::shared_ptr<TensorNodeT<S>> node) { nodes_.push_back(std::move(node)); }

    size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse,
    // accumulating into every reachable requires_grad leaf and nothing else.
    void backward(const TensorT<S>& loss);

private:
    friend class TapeScopeT<S>;
    std::vector<std::shared_ptr<TensorNodeT<S>>> nodes_;
    bool used_ = false;
    static thread_local TapeT* current_;
};

template <class S>
thread_local TapeT<S>* TapeT<S>::current_ = nullptr;

template <class S>
class TapeScopeT {
public:
    explicit TapeScopeT(TapeT<S>& tape) {
        if (TapeT<S>::current_) throw StateError("a Tape is already active on this thread");
        TapeT<S>::current_ = &tape;
    }
    ~TapeScopeT() { TapeT<S>::current_ = nullptr; }
    TapeScopeT(const TapeScopeT&) = delete;
    TapeScopeT& operator=(const TapeScopeT&) = delete;
};

// ---- leaf constructors ----

template <class S>
TensorT<S> tensor_zeros(Shape shape, bool requires_grad = false);

template <class S>
TensorT<S> tensor_from(std::vector<S> data, Shape shape, bool requires_grad = false);

template <class S>
TensorT<S> tensor_from_array(typename TensorNodeT<S>::Array data, Shape shape, bool requires_grad = false);

template <class S>
TensorT<S> tensor_scalar(S v);

// ---- ops ----

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b); // [m×k]·[k×n]

template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b); // [m×k]·[n×k]ᵀ

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b);

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b);

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b);

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c);

template <class S>
TensorT<S> rowwise_mul(const TensorT<S>& a, const TensorT<S>& w); // [n×d] ⊙ [d] per row

template <class S>
TensorT<S> silu(const TensorT<S>& x);

template <class S>
TensorT<S> rms_normalize(const TensorT<S>& x, S eps); // per row: x / sqrt(mean(x²)+eps)

template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x);

// Rotates each row's per-head (2j, 2j+1) pairs by positions[i]·base^(−2j/head_dim).
// An orthogonal map, so the gradient is the inverse rotation.
template <class S>
TensorT<S> rope_rows(const TensorT<S>& x, std::span<const int64_t> positions, int n_heads, S base);

template <class S>
TensorT<S> concat_rows(std::span<const TensorT<S>> parts);

template <class S>
TensorT<S> slice_rows(const TensorT<S>& x, int64_t start, int64_t len);

template <class S>
TensorT<S> concat_cols(std::span<const TensorT<S>> parts);

template <class S>
TensorT<S> slice_cols(const TensorT<S>& x, int64_t start, int64_t len);

template <class S>
TensorT<S> embedding_rows(const TensorT<S>& table, std::span<const int> ids); // [V×d] gather

template <class S>
TensorT<S> sum_all(const TensorT<S>& x); // scalar

// Mean over rows of −log softmax(row)[target]; fused for stability.
template <class S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, std::span<const int> targets);

// (1/T)·Σ_t Σ_v p[t,v]·(log p[t,v] − log q[t,v]); p is treated as a constant,
// gradient flows to q only. Rows of both must be probability distributions.
template <class S>
TensorT<S> kl_divergence(const TensorT<S>& p, const TensorT<S>& q);

template <class S>
void backward(const TensorT<S>& loss);

// Product-wide scalar: 32-bit float. The double instantiation exists for
// test oracles only.
using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TapeScope = TapeScopeT<float>;

extern template class TensorT<float>;
extern template class TensorT<double>;
extern template class TapeT<float>;
extern template class TapeT<double>;

} // namespace kvp
