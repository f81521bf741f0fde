#include "kvpacket/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "kvpacket/flops.hpp"

namespace kvp {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
        n *= d;
    }
    return n;
}

namespace {

template <class S>
using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<Mat<S>>;
template <class S>
using CMapM = Eigen::Map<const Mat<S>>;

template <class S>
CMapM<S> as_mat(const Arr<S>& a, int64_t r, int64_t c) {
    return CMapM<S>(a.data(), r, c);
}

template <class S>
MapM<S> grad_mat(TensorNodeT<S>& n, int64_t r, int64_t c) {
    n.ensure_grad();
    return MapM<S>(n.grad.data(), r, c);
}

template <class S>
void require_rank2(const TensorT<S>& t, const char* who) {
    if (t.rank() != 2) throw ShapeError(std::string(who) + ": need rank 2, have " + shape_str(t.shape()));
}

template <class S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* who) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + ": shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
void require_finite(const TensorT<S>& t, const char* who) {
    if (!t.value().isFinite().all()) throw NumericError(std::string(who) + ": non-finite input");
}

// Builds the result node; the backward closure is only materialized when an
// active tape will actually replay it.
template <class S, class FnFactory>
TensorT<S> make_result(Arr<S> value, Shape shape,
                       std::initializer_list<std::shared_ptr<TensorNodeT<S>>> parents,
                       FnFactory&& make_fn) {
    auto node = std::make_shared<TensorNodeT<S>>();
    node->value = std::move(value);
    node->shape = std::move(shape);
    node->leaf = false;
    if (TapeT<S>* tape = TapeT<S>::current()) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p->needs_grad;
        if (needs) {
            node->needs_grad = true;
            node->backward_fn = make_fn();
            tape->record(node);
        }
    }
    return TensorT<S>(node);
}

} // namespace

// ---- leaf constructors ----

template <class S>
TensorT<S> tensor_zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<TensorNodeT<S>>();
    node->value = Arr<S>::Zero(shape_numel(shape));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    node->needs_grad = requires_grad;
    return TensorT<S>(node);
}

template <class S>
TensorT<S> tensor_from_array(typename TensorNodeT<S>::Array data, Shape shape, bool requires_grad) {
    if (data.size() != shape_numel(shape))
        throw ShapeError("tensor_from: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    auto node = std::make_shared<TensorNodeT<S>>();
    node->value = std::move(data);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    node->needs_grad = requires_grad;
    return TensorT<S>(node);
}

template <class S>
TensorT<S> tensor_from(std::vector<S> data, Shape shape, bool requires_grad) {
    Arr<S> a = Eigen::Map<const Arr<S>>(data.data(), static_cast<int64_t>(data.size()));
    return tensor_from_array<S>(std::move(a), std::move(shape), requires_grad);
}

template <class S>
TensorT<S> tensor_scalar(S v) {
    Arr<S> a(1);
    a[0] = v;
    return tensor_from_array<S>(std::move(a), Shape{}, false);
}

// ---- ops ----

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    meter_matmul(static_cast<uint64_t>(m), static_cast<uint64_t>(n), static_cast<uint64_t>(k));
    Arr<S> out(m * n);
    MapM<S>(out.data(), m, n).noalias() = as_mat<S>(a.value(), m, k) * as_mat<S>(b.value(), k, n);
    auto an = a.node(), bn = b.node();
    return make_result<S>(std::move(out), Shape{m, n}, {an, bn}, [&] {
        return [an, bn, m, k, n](const TensorNodeT<S>& o) {
            CMapM<S> g(o.grad.data(), m, n);
            if (an->needs_grad)
                grad_mat(*an, m, k).noalias() += g * as_mat<S>(bn->value, k, n).transpose();
            if (bn->needs_grad)
                grad_mat(*bn, k, n).noalias() += as_mat<S>(an->value, m, k).transpose() * g;
        };
    });
}

template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    meter_matmul(static_cast<uint64_t>(m), static_cast<uint64_t>(n), static_cast<uint64_t>(k));
    Arr<S> out(m * n);
    MapM<S>(out.data(), m, n).noalias() = as_mat<S>(a.value(), m, k) * as_mat<S>(b.value(), n, k).transpose();
    auto an = a.node(), bn = b.node();
    return make_result<S>(std::move(out), Shape{m, n}, {an, bn}, [&] {
        return [an, bn, m, k, n](const TensorNodeT<S>& o) {
            CMapM<S> g(o.grad.data(), m, n);
            if (an->needs_grad)
                grad_mat(*an, m, k).noalias() += g * as_mat<S>(bn->value, n, k);
            if (bn->needs_grad)
                grad_mat(*bn, n, k).noalias() += g.transpose() * as_mat<S>(an->value, m, k);
        };
    });
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "add");
    Arr<S> out = a.value() + b.value();
    auto an = a.node(), bn = b.node();
    return make_result<S>(std::move(out), a.shape(), {an, bn}, [&] {
        return [an, bn](const TensorNodeT<S>& o) {
            if (an->needs_grad) { an->ensure_grad(); an->grad += o.grad; }
            if (bn->needs_grad) { bn->ensure_grad(); bn->grad += o.grad; }
        };
    });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "sub");
    Arr<S> out = a.value() - b.value();
    auto an = a.node(), bn = b.node();
    return make_result<S>(std::move(out), a.shape(), {an, bn}, [&] {
        return [an, bn](const TensorNodeT<S>& o) {
            if (an->needs_grad) { an->ensure_grad(); an->grad += o.grad; }
            if (bn->needs_grad) { bn->ensure_grad(); bn->grad -= o.grad; }
        };
    });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "mul");
    Arr<S> out = a.value() * b.value();
    auto an = a.node(), bn = b.node();
    return make_result<S>(std::move(out), a.shape(), {an, bn}, [&] {
        return [an, bn](const TensorNodeT<S>& o) {
            if (an->needs_grad) { an->ensure_grad(); an->grad += o.grad * bn->value; }
            if (bn->needs_grad) { bn->ensure_grad(); bn->grad += o.grad * an->value; }
        };
    });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    Arr<S> out = a.value() * c;
    auto an = a.node();
    return make_result<S>(std::move(out), a.shape(), {an}, [&] {
        return [an, c](const TensorNodeT<S>& o) {
            if (an->needs_grad) { an->ensure_grad(); an->grad += o.grad * c; }
        };
    });
}

template <class S>
TensorT<S> rowwise_mul(const TensorT<S>& a, const TensorT<S>& w) {
    require_rank2(a, "rowwise_mul");
    if (w.rank() != 1 || w.shape()[0] != a.cols())
        throw ShapeError("rowwise_mul: weight " + shape_str(w.shape()) + " does not match cols of " + shape_str(a.shape()));
    const int64_t n = a.rows(), d = a.cols();
    Arr<S> out(n * d);
    MapM<S>(out.data(), n, d).array() =
        as_mat<S>(a.value(), n, d).array().rowwise() * w.value().transpose();
    auto an = a.node(), wn = w.node();
    return make_result<S>(std::move(out), a.shape(), {an, wn}, [&] {
        return [an, wn, n, d](const TensorNodeT<S>& o) {
            CMapM<S> g(o.grad.data(), n, d);
            if (an->needs_grad)
                grad_mat(*an, n, d).array() += g.array().rowwise() * wn->value.transpose();
            if (wn->needs_grad) {
                wn->ensure_grad();
                wn->grad += (g.array() * as_mat<S>(an->value, n, d).array()).colwise().sum().transpose();
            }
        };
    });
}

template <class S>
TensorT<S> silu(const TensorT<S>& x) {
    Arr<S> sig = S(1) / (S(1) + (-x.value()).exp());
    Arr<S> out = x.value() * sig;
    auto xn = x.node();
    return make_result<S>(std::move(out), x.shape(), {xn}, [&] {
        return [xn](const TensorNodeT<S>& o) {
            if (!xn->needs_grad) return;
            Arr<S> sig = S(1) / (S(1) + (-xn->value).exp());
            xn->ensure_grad();
            xn->grad += o.grad * sig * (S(1) + xn->value * (S(1) - sig));
        };
    });
}

template <class S>
TensorT<S> rms_normalize(const TensorT<S>& x, S eps) {
    require_rank2(x, "rms_normalize");
    const int64_t n = x.rows(), d = x.cols();
    Arr<S> rinv(n);
    Arr<S> out(n * d);
    CMapM<S> X(x.value().data(), n, d);
    for (int64_t i = 0; i < n; ++i) {
        S ms = X.row(i).squaredNorm() / static_cast<S>(d);
        rinv[i] = S(1) / std::sqrt(ms + eps);
        MapM<S>(out.data(), n, d).row(i) = X.row(i) * rinv[i];
    }
    auto xn = x.node();
    return make_result<S>(std::move(out), x.shape(), {xn}, [&] {
        return [xn, rinv = std::move(rinv), n, d](const TensorNodeT<S>& o) {
            if (!xn->needs_grad) return;
            CMapM<S> g(o.grad.data(), n, d);
            CMapM<S> y(o.value.data(), n, d);
            MapM<S> gx = grad_mat(*xn, n, d);
            for (int64_t i = 0; i < n; ++i) {
                S dot = g.row(i).dot(y.row(i)) / static_cast<S>(d);
                gx.row(i) += (g.row(i) - y.row(i) * dot) * rinv[i];
            }
        };
    });
}

template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    require_rank2(x, "softmax_rows");
    require_finite(x, "softmax_rows");
    const int64_t n = x.rows(), d = x.cols();
    if (d < 1) throw ShapeError("softmax_rows: empty rows");
    Arr<S> out(n * d);
    CMapM<S> X(x.value().data(), n, d);
    MapM<S> Y(out.data(), n, d);
    for (int64_t i = 0; i < n; ++i) {
        S m = X.row(i).maxCoeff();
        Y.row(i) = (X.row(i).array() - m).exp();
        Y.row(i) /= Y.row(i).sum();
    }
    auto xn = x.node();
    return make_result<S>(std::move(out), x.shape(), {xn}, [&] {
        return [xn, n, d](const TensorNodeT<S>& o) {
            if (!xn->needs_grad) return;
            CMapM<S> g(o.grad.data(), n, d);
            CMapM<S> y(o.value.data(), n, d);
            MapM<S> gx = grad_mat(*xn, n, d);
            for (int64_t i = 0; i < n; ++i) {
                S dot = g.row(i).dot(y.row(i));
                gx.row(i).array() += y.row(i).array() * (g.row(i).array() - dot);
            }
        };
    });
}

template <class S>
TensorT<S> rope_rows(const TensorT<S>& x, std::span<const int64_t> positions, int n_heads, S base) {
    require_rank2(x, "rope_rows");
    const int64_t n = x.rows(), D = x.cols();
    if (static_cast<int64_t>(positions.size()) != n)
        throw ShapeError("rope_rows: " + std::to_string(positions.size()) + " positions for " + std::to_string(n) + " rows");
    if (n_heads < 1 || D % n_heads != 0)
        throw ShapeError("rope_rows: cols " + std::to_string(D) + " not divisible into " + std::to_string(n_heads) + " heads");
    const int64_t hd = D / n_heads;
    if (hd % 2 != 0) throw ShapeError("rope_rows: head_dim must be even, have " + std::to_string(hd));
    const int64_t pairs = hd / 2;

    // Angles in double regardless of S, so a rotation by S then by Δ composes
    // to the rotation by S+Δ up to one rounding of cos/sin.
    std::vector<double> inv_freq(pairs);
    for (int64_t j = 0; j < pairs; ++j)
        inv_freq[j] = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(j) / static_cast<double>(hd));

    Arr<S> cosv(n * n_heads * pairs), sinv(n * n_heads * pairs);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < pairs; ++j) {
            double ang = static_cast<double>(positions[i]) * inv_freq[j];
            S c = static_cast<S>(std::cos(ang));
            S s = static_cast<S>(std::sin(ang));
            for (int h = 0; h < n_heads; ++h) {
                cosv[(i * n_heads + h) * pairs + j] = c;
                sinv[(i * n_heads + h) * pairs + j] = s;
            }
        }
    }

    Arr<S> out(n * D);
    for (int64_t i = 0; i < n; ++i) {
        const S* xin = x.value().data() + i * D;
        S* xo = out.data() + i * D;
        for (int h = 0; h < n_heads; ++h) {
            for (int64_t j = 0; j < pairs; ++j) {
                S c = cosv[(i * n_heads + h) * pairs + j];
                S s = sinv[(i * n_heads + h) * pairs + j];
                S a = xin[h * hd + 2 * j], b = xin[h * hd + 2 * j + 1];
                xo[h * hd + 2 * j] = c * a - s * b;
                xo[h * hd + 2 * j + 1] = s * a + c * b;
            }
        }
    }
    auto xn = x.node();
    return make_result<S>(std::move(out), x.shape(), {xn}, [&] {
        return [xn, cosv = std::move(cosv), sinv = std::move(sinv), n, D, hd, pairs,
                n_heads](const TensorNodeT<S>& o) {
            if (!xn->needs_grad) return;
            xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const S* g = o.grad.data() + i * D;
                S* gx = xn->grad.data() + i * D;
                for (int h = 0; h < n_heads; ++h) {
                    for (int64_t j = 0; j < pairs; ++j) {
                        S c = cosv[(i * n_heads + h) * pairs + j];
                        S s = sinv[(i * n_heads + h) * pairs + j];
                        S ga = g[h * hd + 2 * j], gb = g[h * hd + 2 * j + 1];
                        gx[h * hd + 2 * j] += c * ga + s * gb;
                        gx[h * hd + 2 * j + 1] += -s * ga + c * gb;
                    }
                }
            }
        };
    });
}

template <class S>
TensorT<S> concat_rows(std::span<const TensorT<S>> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int64_t d = parts[0].cols();
    int64_t total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.cols() != d)
            throw ShapeError("concat_rows: column mismatch, " + shape_str(p.shape()) + " vs width " + std::to_string(d));
        total += p.rows();
    }
    Arr<S> out(total * d);
    int64_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data(), p.value().data() + p.numel(), out.data() + row * d);
        row += p.rows();
    }
    std::vector<std::shared_ptr<TensorNodeT<S>>> nodes;
    nodes.reserve(parts.size());
    bool needs = false;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        needs = needs || p.node()->needs_grad;
    }
    // make_result takes an initializer_list; variadic parents need the long form.
    auto node = std::make_shared<TensorNodeT<S>>();
    node->value = std::move(out);
    node->shape = Shape{total, d};
    node->leaf = false;
    if (TapeT<S>* tape = TapeT<S>::current(); tape && needs) {
        node->needs_grad = true;
        node->backward_fn = [nodes = std::move(nodes), total, d](const TensorNodeT<S>& o) {
            CMapM<S> g(o.grad.data(), total, d);
            int64_t row = 0;
            for (const auto& pn : nodes) {
                int64_t r = pn->shape[0];
                if (pn->needs_grad)
                    grad_mat(*pn, r, d) += g.middleRows(row, r);
                row += r;
            }
        };
        tape->record(node);
    }
    return TensorT<S>(node);
}

template <class S>
TensorT<S> slice_rows(const TensorT<S>& x, int64_t start, int64_t len) {
    require_rank2(x, "slice_rows");
    const int64_t n = x.rows(), d = x.cols();
    if (start < 0 || len < 0 || start + len > n)
        throw RangeError("slice_rows: [" + std::to_string(start) + "," + std::to_string(start + len) + ") of " + std::to_string(n) + " rows");
    Arr<S> out(len * d);
    std::copy(x.value().data() + start * d, x.value().data() + (start + len) * d, out.data());
    auto xn = x.node();
    return make_result<S>(std::move(out), Shape{len, d}, {xn}, [&] {
        return [xn, start, len, n, d](const TensorNodeT<S>& o) {
            if (!xn->needs_grad) return;
            grad_mat(*xn, n, d).middleRows(start, len) += CMapM<S>(o.grad.data(), len, d);
        };
    });
}

template <class S>
TensorT<S> concat_cols(std::span<const TensorT<S>> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int64_t n = parts[0].rows();
    int64_t total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != n)
            throw ShapeError("concat_cols: row mismatch, " + shape_str(p.shape()) + " vs height " + std::to_string(n));
        total += p.cols();
    }
    Arr<S> out(n * total);
    MapM<S> O(out.data(), n, total);
    int64_t col = 0;
    for (const auto& p : parts) {
        O.middleCols(col, p.cols()) = as_mat<S>(p.value(), n, p.cols());
        col += p.cols();
    }
    std::vector<std::shared_ptr<TensorNodeT<S>>> nodes;
    nodes.reserve(parts.size());
    bool needs = false;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        needs = needs || p.node()->needs_grad;
    }
    auto node = std::make_shared<TensorNodeT<S>>();
    node->value = std::move(out);
    node->shape = Shape{n, total};
    node->leaf = false;
    if (TapeT<S>* tape = TapeT<S>::current(); tape && needs) {
        node->needs_grad = true;
        node->backward_fn = [nodes = std::move(nodes), n, total](const TensorNodeT<S>& o) {
            CMapM<S> g(o.grad.data(), n, total);
            int64_t col = 0;
            for (const auto& pn : nodes) {
                int64_t c = pn->shape[1];
                if (pn->needs_grad)
                    grad_mat(*pn, n, c) += g.middleCols(col, c);
                col += c;
            }
        };
        tape->record(node);
    }
    return TensorT<S>(node);
}

template <class S>
TensorT<S> slice_cols(const TensorT<S>& x, int64_t start, int64_t len) {
    require_rank2(x, "slice_cols");
    const int64_t n = x.rows(), d = x.cols();
    if (start < 0 || len < 0 || start + len > d)
        throw RangeError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) + ") of " + std::to_string(d) + " cols");
    Arr<S> out(n * len);
    MapM<S>(out.data(), n, len) = as_mat<S>(x.value(), n, d).middleCols(start, len);
    auto xn = x.node();
    return make_result<S>(std::move(out), Shape{n, len}, {xn}, [&] {
        return [xn, start, len, n, d](const TensorNodeT<S>& o) {
            if (!xn->needs_grad) return;
            grad_mat(*xn, n, d).middleCols(start, len) += CMapM<S>(o.grad.data(), n, len);
        };
    });
}

template <class S>
TensorT<S> embedding_rows(const TensorT<S>& table, std::span<const int> ids) {
    require_rank2(table, "embedding_rows");
    const int64_t V = table.rows(), d = table.cols();
    const int64_t n = static_cast<int64_t>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= V)
            throw RangeError("embedding_rows: id " + std::to_string(id) + " outside vocab of " + std::to_string(V));
    Arr<S> out(n * d);
    for (int64_t i = 0; i < n; ++i)
        std::copy(table.value().data() + static_cast<int64_t>(ids[i]) * d,
                  table.value().data() + (static_cast<int64_t>(ids[i]) + 1) * d, out.data() + i * d);
    auto tn = table.node();
    return make_result<S>(std::move(out), Shape{n, d}, {tn}, [&] {
        return [tn, ids = std::vector<int>(ids.begin(), ids.end()), V, d, n](const TensorNodeT<S>& o) {
            if (!tn->needs_grad) return;
            MapM<S> gt = grad_mat(*tn, V, d);
            CMapM<S> g(o.grad.data(), n, d);
            for (int64_t i = 0; i < n; ++i) gt.row(ids[i]) += g.row(i);
        };
    });
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
    Arr<S> out(1);
    out[0] = x.value().sum();
    auto xn = x.node();
    return make_result<S>(std::move(out), Shape{}, {xn}, [&] {
        return [xn](const TensorNodeT<S>& o) {
            if (!xn->needs_grad) return;
            xn->ensure_grad();
            xn->grad += o.grad[0];
        };
    });
}

template <class S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, std::span<const int> targets) {
    require_rank2(logits, "cross_entropy_rows");
    require_finite(logits, "cross_entropy_rows");
    const int64_t n = logits.rows(), V = logits.cols();
    if (static_cast<int64_t>(targets.size()) != n)
        throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
    for (int t : targets)
        if (t < 0 || t >= V) throw RangeError("cross_entropy_rows: target " + std::to_string(t) + " outside vocab");
    CMapM<S> X(logits.value().data(), n, V);
    S total = 0;
    for (int64_t i = 0; i < n; ++i) {
        S m = X.row(i).maxCoeff();
        S lse = m + std::log((X.row(i).array() - m).exp().sum());
        total += lse - X(i, targets[i]);
    }
    Arr<S> out(1);
    out[0] = total / static_cast<S>(n);
    auto ln = logits.node();
    return make_result<S>(std::move(out), Shape{}, {ln}, [&] {
        return [ln, targets = std::vector<int>(targets.begin(), targets.end()), n, V](const TensorNodeT<S>& o) {
            if (!ln->needs_grad) return;
            const S g0 = o.grad[0] / static_cast<S>(n);
            CMapM<S> X(ln->value.data(), n, V);
            MapM<S> gx = grad_mat(*ln, n, V);
            for (int64_t i = 0; i < n; ++i) {
                S m = X.row(i).maxCoeff();
                Eigen::Array<S, 1, Eigen::Dynamic> p = (X.row(i).array() - m).exp();
                p /= p.sum();
                gx.row(i).array() += g0 * p;
                gx(i, targets[i]) -= g0;
            }
        };
    });
}

template <class S>
TensorT<S> kl_divergence(const TensorT<S>& p, const TensorT<S>& q) {
    require_same_shape(p, q, "kl_divergence");
    require_rank2(p, "kl_divergence");
    require_finite(p, "kl_divergence");
    require_finite(q, "kl_divergence");
    const int64_t T = p.rows(), V = p.cols();
    CMapM<S> P(p.value().data(), T, V), Q(q.value().data(), T, V);
    for (int64_t t = 0; t < T; ++t) {
        if (std::abs(P.row(t).sum() - S(1)) > S(1e-5) || std::abs(Q.row(t).sum() - S(1)) > S(1e-5))
            throw NumericError("kl_divergence: row " + std::to_string(t) + " is not a probability distribution");
        if ((P.row(t).array() < S(0)).any())
            throw NumericError("kl_divergence: negative teacher probability in row " + std::to_string(t));
    }
    S total = 0;
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t v = 0; v < V; ++v) {
            S pv = P(t, v);
            if (pv <= S(0)) continue;
            S qv = Q(t, v);
            if (qv <= S(0))
                throw NumericError("kl_divergence: q[" + std::to_string(t) + "," + std::to_string(v) + "] <= 0 where p > 0");
            total += pv * (std::log(pv) - std::log(qv));
        }
    }
    Arr<S> out(1);
    out[0] = total / static_cast<S>(T);
    auto pn = p.node(), qn = q.node();
    // p is the teacher: a constant by contract, so only q is a parent.
    return make_result<S>(std::move(out), Shape{}, {qn}, [&] {
        return [pn, qn, T, V](const TensorNodeT<S>& o) {
            if (!qn->needs_grad) return;
            const S g0 = o.grad[0] / static_cast<S>(T);
            qn->ensure_grad();
            for (int64_t i = 0; i < T * V; ++i) {
                S pv = pn->value[i];
                if (pv > S(0)) qn->grad[i] -= g0 * pv / qn->value[i];
            }
        };
    });
}

// ---- backward ----

template <class S>
void TapeT<S>::backward(const TensorT<S>& loss) {
    if (used_) throw StateError("tape already replayed");
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, have " + shape_str(loss.shape()));
    auto ln = loss.node();
    bool recorded = false;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
        if (it->get() == ln.get()) { recorded = true; break; }
    if (!recorded) throw StateError("backward: loss was not produced under this tape");
    used_ = true;
    ln->ensure_grad();
    ln->grad[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        TensorNodeT<S>& node = **it;
        if (node.grad.size() != 0 && node.backward_fn) node.backward_fn(node);
    }
    // Intermediates are spent; only leaves keep their accumulated grads.
    for (auto& n : nodes_)
        if (!n->leaf) n->grad.resize(0);
}

template <class S>
void backward(const TensorT<S>& loss) {
    TapeT<S>* t = TapeT<S>::current();
    if (!t) throw StateError("backward: no active Tape on this thread");
    t->backward(loss);
}

// ---- instantiations (float for the product, double for test oracles) ----

template class TensorT<float>;
template class TensorT<double>;
template class TapeT<float>;
template class TapeT<double>;

#define KVP_INSTANTIATE_OPS(S)                                                              \
    template TensorT<S> tensor_zeros<S>(Shape, bool);                                       \
    template TensorT<S> tensor_from<S>(std::vector<S>, Shape, bool);                        \
    template TensorT<S> tensor_from_array<S>(typename TensorNodeT<S>::Array, Shape, bool);        \
    template TensorT<S> tensor_scalar<S>(S);                                                \
    template TensorT<S> matmul<S>(const TensorT<S>&, const TensorT<S>&);                    \
    template TensorT<S> matmul_nt<S>(const TensorT<S>&, const TensorT<S>&);                 \
    template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);                       \
    template TensorT<S> sub<S>(const TensorT<S>&, const TensorT<S>&);                       \
    template TensorT<S> mul<S>(const TensorT<S>&, const TensorT<S>&);                       \
    template TensorT<S> scale<S>(const TensorT<S>&, S);                                     \
    template TensorT<S> rowwise_mul<S>(const TensorT<S>&, const TensorT<S>&);               \
    template TensorT<S> silu<S>(const TensorT<S>&);                                         \
    template TensorT<S> rms_normalize<S>(const TensorT<S>&, S);                             \
    template TensorT<S> softmax_rows<S>(const TensorT<S>&);                                 \
    template TensorT<S> rope_rows<S>(const TensorT<S>&, std::span<const int64_t>, int, S);  \
    template TensorT<S> concat_rows<S>(std::span<const TensorT<S>>);                        \
    template TensorT<S> slice_rows<S>(const TensorT<S>&, int64_t, int64_t);                 \
    template TensorT<S> concat_cols<S>(std::span<const TensorT<S>>);                        \
    template TensorT<S> slice_cols<S>(const TensorT<S>&, int64_t, int64_t);                 \
    template TensorT<S> embedding_rows<S>(const TensorT<S>&, std::span<const int>);         \
    template TensorT<S> sum_all<S>(const TensorT<S>&);                                      \
    template TensorT<S> cross_entropy_rows<S>(const TensorT<S>&, std::span<const int>);     \
    template TensorT<S> kl_divergence<S>(const TensorT<S>&, const TensorT<S>&);             \
    template void backward<S>(const TensorT<S>&);

KVP_INSTANTIATE_OPS(float)
KVP_INSTANTIATE_OPS(double)

#undef KVP_INSTANTIATE_OPS

} // namespace kvp
