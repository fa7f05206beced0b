#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "tucl/errors.hpp"
#include "tucl/rng.hpp"

namespace tucl {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // sized lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

/// Dense row-major double tensor with define-by-run reverse-mode autodiff.
/// Value-semantic handle to a shared node; the graph is rebuilt on every
/// forward pass and freed when the handles go out of scope.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != static_cast<int64_t>(data.size()))
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel(shape)), value);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0, bool requires_grad = false) {
        std::vector<double> d(static_cast<size_t>(numel(shape)));
        for (double& v : d) v = stddev * rng.next_normal();
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->data.size()); }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    size_t ndim() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    double item() const {
        if (node_->data.size() != 1)
            throw contract_error("item() on non-scalar tensor " + shape_str(node_->shape));
        return node_->data[0];
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Leaf copy that blocks gradient flow.
    Tensor detach() const { return from_data(node_->shape, node_->data, false); }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

namespace detail {

inline Tensor make_node(Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents,
                        std::function<void(TensorNode&)> backprop) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        for (const Tensor& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_node(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        if (pb->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_node(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        if (pb->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_node(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
        if (pb->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& v : out) v *= s;
    auto pa = a.node();
    return detail::make_node(a.shape(), std::move(out), {a}, [pa, s](TensorNode& self) {
        if (pa->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += s * self.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& v : out) v += s;
    auto pa = a.node();
    return detail::make_node(a.shape(), std::move(out), {a}, [pa](TensorNode& self) {
        if (pa->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    auto pa = a.node();
    return detail::make_node(a.shape(), std::move(out), {a}, [pa](TensorNode& self) {
        if (!pa->requires_grad) return;
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (pa->data[i] > 0.0) pa->grad[i] += self.grad[i];
    });
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.data());
    for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
    auto pa = a.node();
    auto saved = std::make_shared<std::vector<double>>(out);
    return detail::make_node(a.shape(), std::move(out), {a}, [pa, saved](TensorNode& self) {
        if (!pa->requires_grad) return;
        const auto& y = *saved;
        for (size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] * y[i] * (1.0 - y[i]);
    });
}

/// log(max(x, floor)); the clamp keeps losses finite at hard 0/1 probabilities.
inline Tensor log_clamped(const Tensor& a, double floor = 1e-12) {
    std::vector<double> out(a.data());
    for (double& v : out) v = std::log(std::max(v, floor));
    auto pa = a.node();
    return detail::make_node(a.shape(), std::move(out), {a}, [pa, floor](TensorNode& self) {
        if (!pa->requires_grad) return;
        for (size_t i = 0; i < self.grad.size(); ++i)
            pa->grad[i] += self.grad[i] / std::max(pa->data[i], floor);
    });
}

// ---------------------------------------------------------------------------
// reductions and shape ops

inline Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    auto pa = a.node();
    return detail::make_node({1}, {s}, {a}, [pa](TensorNode& self) {
        if (!pa->requires_grad) return;
        const double g = self.grad[0];
        for (double& v : pa->grad) v += g;
    });
}

inline Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.size());
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) / n;
    auto pa = a.node();
    return detail::make_node({1}, {s}, {a}, [pa, n](TensorNode& self) {
        if (!pa->requires_grad) return;
        const double g = self.grad[0] / n;
        for (double& v : pa->grad) v += g;
    });
}

/// Per-row mean of a 2D tensor: [r x c] -> [r].
inline Tensor mean_rows(const Tensor& a) {
    if (a.ndim() != 2) throw shape_error("mean_rows expects 2D, got " + shape_str(a.shape()));
    const int64_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(static_cast<size_t>(r), 0.0);
    for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += a.data()[i * c + j];
        out[static_cast<size_t>(i)] = s / static_cast<double>(c);
    }
    auto pa = a.node();
    return detail::make_node({r}, std::move(out), {a}, [pa, r, c](TensorNode& self) {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < r; ++i) {
            const double g = self.grad[static_cast<size_t>(i)] / static_cast<double>(c);
            for (int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += g;
        }
    });
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                          shape_str(new_shape));
    auto pa = a.node();
    return detail::make_node(std::move(new_shape), a.data(), {a}, [pa](TensorNode& self) {
        if (!pa->requires_grad) return;
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

inline Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2) throw shape_error("transpose2d expects 2D, got " + shape_str(a.shape()));
    const int64_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(a.data().size());
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    auto pa = a.node();
    return detail::make_node({c, r}, std::move(out), {a}, [pa, r, c](TensorNode& self) {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += self.grad[j * r + i];
    });
}

/// Columns [c0, c1) of a 2D tensor.
inline Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
    if (a.ndim() != 2) throw shape_error("slice_cols expects 2D, got " + shape_str(a.shape()));
    const int64_t r = a.dim(0), c = a.dim(1);
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw shape_error("slice_cols: bad range [" + std::to_string(c0) + "," +
                          std::to_string(c1) + ") for " + shape_str(a.shape()));
    const int64_t w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(r * w));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * c + c0 + j];
    auto pa = a.node();
    return detail::make_node({r, w}, std::move(out), {a}, [pa, r, c, c0, w](TensorNode& self) {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < w; ++j) pa->grad[i * c + c0 + j] += self.grad[i * w + j];
    });
}

/// Rows [r0, r1) of a 2D tensor (contiguous copy).
inline Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
    if (a.ndim() != 2) throw shape_error("slice_rows expects 2D, got " + shape_str(a.shape()));
    const int64_t r = a.dim(0), c = a.dim(1);
    if (r0 < 0 || r1 > r || r0 >= r1)
        throw shape_error("slice_rows: bad range [" + std::to_string(r0) + "," +
                          std::to_string(r1) + ") for " + shape_str(a.shape()));
    std::vector<double> out(a.data().begin() + r0 * c, a.data().begin() + r1 * c);
    auto pa = a.node();
    return detail::make_node({r1 - r0, c}, std::move(out), {a}, [pa, r0, c](TensorNode& self) {
        if (!pa->requires_grad) return;
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[r0 * c + static_cast<int64_t>(i)] += self.grad[i];
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] /= bd[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_node(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode& self) {
        if (pa->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] / pb->data[i];
        if (pb->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] -= self.grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
    });
}

/// Concatenate 2D tensors along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw param_error("concat: empty input list");
    if (axis != 0 && axis != 1) throw param_error("concat: axis must be 0 or 1");
    for (const Tensor& p : parts)
        if (p.ndim() != 2) throw shape_error("concat expects 2D tensors");
    const int64_t fixed = parts[0].dim(1 - axis);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.dim(1 - axis) != fixed)
            throw shape_error("concat: mismatched shapes " + shape_str(parts[0].shape()) +
                              " vs " + shape_str(p.shape()));
        total += p.dim(axis);
    }
    Shape out_shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
    std::vector<double> out(static_cast<size_t>(numel(out_shape)));
    const int64_t rows = out_shape[0], cols = out_shape[1];
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const int64_t pr = p.dim(0), pc = p.dim(1);
        for (int64_t i = 0; i < pr; ++i)
            for (int64_t j = 0; j < pc; ++j) {
                const int64_t oi = axis == 0 ? off + i : i;
                const int64_t oj = axis == 0 ? j : off + j;
                out[oi * cols + oj] = p.data()[i * pc + j];
            }
        off += p.dim(axis);
    }
    std::vector<std::shared_ptr<TensorNode>> pnodes;
    for (const Tensor& p : parts) pnodes.push_back(p.node());
    (void)rows;
    return detail::make_node(out_shape, std::move(out), parts,
                             [pnodes, offsets, axis, cols](TensorNode& self) {
        for (size_t k = 0; k < pnodes.size(); ++k) {
            auto& p = *pnodes[k];
            if (!p.requires_grad) continue;
            const int64_t pr = p.shape[0], pc = p.shape[1];
            const int64_t o = offsets[k];
            for (int64_t i = 0; i < pr; ++i)
                for (int64_t j = 0; j < pc; ++j) {
                    const int64_t oi = axis == 0 ? o + i : i;
                    const int64_t oj = axis == 0 ? j : o + j;
                    p.grad[i * pc + j] += self.grad[oi * cols + oj];
                }
        }
    });
}

/// Broadcast a scalar tensor to an arbitrary shape.
inline Tensor broadcast_scalar(const Tensor& s, Shape shape) {
    if (s.size() != 1) throw shape_error("broadcast_scalar expects a scalar");
    std::vector<double> out(static_cast<size_t>(numel(shape)), s.data()[0]);
    auto ps = s.node();
    return detail::make_node(std::move(shape), std::move(out), {s}, [ps](TensorNode& self) {
        if (!ps->requires_grad) return;
        double g = 0.0;
        for (double v : self.grad) g += v;
        ps->grad[0] += g;
    });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) out[i * n + j] += av * bd[p * n + j];
        }
    auto pa = a.node(), pb = b.node();
    return detail::make_node({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](TensorNode& self) {
        // dA = dY B^T, dB = A^T dY
        if (pa->requires_grad)
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    const double g = self.grad[i * n + j];
                    if (g == 0.0) continue;
                    for (int64_t p = 0; p < k; ++p) pa->grad[i * k + p] += g * pb->data[p * n + j];
                }
        if (pb->requires_grad)
            for (int64_t i = 0; i < m; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    const double av = pa->data[i * k + p];
                    if (av == 0.0) continue;
                    for (int64_t j = 0; j < n; ++j) pb->grad[p * n + j] += av * self.grad[i * n + j];
                }
    });
}

/// x [m x n] + row vector b [n], broadcast over rows.
inline Tensor add_row_vector(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.dim(1))
        throw shape_error("add_row_vector: shapes " + shape_str(x.shape()) + " and " +
                          shape_str(b.shape()));
    const int64_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.data());
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] += b.data()[j];
    auto px = x.node(), pb = b.node();
    return detail::make_node({m, n}, std::move(out), {x, b}, [px, pb, m, n](TensorNode& self) {
        if (px->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        if (pb->requires_grad)
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
    });
}

// ---------------------------------------------------------------------------
// softmax

/// Softmax over one axis, max-subtracted for stability.
inline Tensor softmax(const Tensor& x, int axis) {
    const int nd = static_cast<int>(x.ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw shape_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                          shape_str(x.shape()));
    const int64_t n = x.shape()[static_cast<size_t>(axis)];
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];

    std::vector<double> out(x.data().size());
    const auto& xd = x.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t i = 0; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
            double z = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                const double e = std::exp(xd[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (int64_t i = 0; i < n; ++i) out[base + i * inner] /= z;
        }
    auto px = x.node();
    auto saved = std::make_shared<std::vector<double>>(out);
    return detail::make_node(x.shape(), std::move(out), {x},
                             [px, saved, n, inner, outer](TensorNode& self) {
        if (!px->requires_grad) return;
        const auto& y = *saved;
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                double dot = 0.0;
                for (int64_t i = 0; i < n; ++i) dot += self.grad[base + i * inner] * y[base + i * inner];
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t ix = base + i * inner;
                    px->grad[ix] += y[ix] * (self.grad[ix] - dot);
                }
            }
    });
}

// ---------------------------------------------------------------------------
// layer normalization

/// Row-wise layer norm of x [n x d] with learnable gain/bias [d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.ndim() != 2) throw shape_error("layer_norm expects 2D, got " + shape_str(x.shape()));
    const int64_t n = x.dim(0), d = x.dim(1);
    if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
        throw shape_error("layer_norm: gain/bias must have width " + std::to_string(d));
    std::vector<double> out(x.data().size());
    auto xhat = std::make_shared<std::vector<double>>(x.data().size());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    const auto& xd = x.data();
    for (int64_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xd[i * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = xd[i * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < d; ++j) {
            const double h = (xd[i * d + j] - mu) * is;
            (*xhat)[i * d + j] = h;
            out[i * d + j] = gain.data()[j] * h + bias.data()[j];
        }
    }
    auto px = x.node(), pg = gain.node(), pb = bias.node();
    return detail::make_node({n, d}, std::move(out), {x, gain, bias},
                             [px, pg, pb, xhat, inv_sigma, n, d](TensorNode& self) {
        for (int64_t i = 0; i < n; ++i) {
            const double is = (*inv_sigma)[static_cast<size_t>(i)];
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                const double dh = self.grad[i * d + j] * pg->data[j];
                sum_dh += dh;
                sum_dh_h += dh * (*xhat)[i * d + j];
            }
            if (px->requires_grad) {
                for (int64_t j = 0; j < d; ++j) {
                    const double dh = self.grad[i * d + j] * pg->data[j];
                    const double h = (*xhat)[i * d + j];
                    px->grad[i * d + j] +=
                        is * (dh - (sum_dh + h * sum_dh_h) / static_cast<double>(d));
                }
            }
            if (pg->requires_grad)
                for (int64_t j = 0; j < d; ++j)
                    pg->grad[j] += self.grad[i * d + j] * (*xhat)[i * d + j];
            if (pb->requires_grad)
                for (int64_t j = 0; j < d; ++j) pb->grad[j] += self.grad[i * d + j];
        }
    });
}

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation semantics)

/// x: [C_in x W x H x D], w: [C_out x C_in x k x k x k].
inline Tensor conv3d(const Tensor& x, const Tensor& w, int stride, int padding) {
    if (x.ndim() != 4) throw shape_error("conv3d: input must be 4D, got " + shape_str(x.shape()));
    if (w.ndim() != 5) throw shape_error("conv3d: kernel must be 5D, got " + shape_str(w.shape()));
    const int64_t cin = x.dim(0), W = x.dim(1), H = x.dim(2), D = x.dim(3);
    const int64_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin)
        throw shape_error("conv3d: kernel expects " + std::to_string(w.dim(1)) +
                          " input channels, input has " + std::to_string(cin));
    if (w.dim(3) != k || w.dim(4) != k) throw shape_error("conv3d: kernel must be cubic");
    if (k % 2 == 0) throw param_error("conv3d: kernel size must be odd");
    if (stride < 1) throw param_error("conv3d: stride must be >= 1");
    const int64_t Wo = (W + 2 * padding - k) / stride + 1;
    const int64_t Ho = (H + 2 * padding - k) / stride + 1;
    const int64_t Do = (D + 2 * padding - k) / stride + 1;
    if (Wo < 1 || Ho < 1 || Do < 1)
        throw shape_error("conv3d: kernel larger than padded input");

    std::vector<double> out(static_cast<size_t>(cout * Wo * Ho * Do), 0.0);
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    for (int64_t co = 0; co < cout; ++co)
        for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t kx = 0; kx < k; ++kx)
                for (int64_t ky = 0; ky < k; ++ky)
                    for (int64_t kz = 0; kz < k; ++kz) {
                        const double wv = wd[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                        if (wv == 0.0) continue;
                        for (int64_t ox = 0; ox < Wo; ++ox) {
                            const int64_t ix = ox * stride - padding + kx;
                            if (ix < 0 || ix >= W) continue;
                            for (int64_t oy = 0; oy < Ho; ++oy) {
                                const int64_t iy = oy * stride - padding + ky;
                                if (iy < 0 || iy >= H) continue;
                                const double* xrow = xd + ((ci * W + ix) * H + iy) * D;
                                double* orow = out.data() + ((co * Wo + ox) * Ho + oy) * Do;
                                for (int64_t oz = 0; oz < Do; ++oz) {
                                    const int64_t iz = oz * stride - padding + kz;
                                    if (iz < 0 || iz >= D) continue;
                                    orow[oz] += wv * xrow[iz];
                                }
                            }
                        }
                    }
    auto px = x.node(), pw = w.node();
    return detail::make_node(
        {cout, Wo, Ho, Do}, std::move(out), {x, w},
        [px, pw, cin, W, H, D, cout, k, stride, padding, Wo, Ho, Do](TensorNode& self) {
            for (int64_t co = 0; co < cout; ++co)
                for (int64_t ci = 0; ci < cin; ++ci)
                    for (int64_t kx = 0; kx < k; ++kx)
                        for (int64_t ky = 0; ky < k; ++ky)
                            for (int64_t kz = 0; kz < k; ++kz) {
                                const int64_t widx = (((co * cin + ci) * k + kx) * k + ky) * k + kz;
                                const double wv = pw->data[widx];
                                double wgrad = 0.0;
                                for (int64_t ox = 0; ox < Wo; ++ox) {
                                    const int64_t ix = ox * stride - padding + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    for (int64_t oy = 0; oy < Ho; ++oy) {
                                        const int64_t iy = oy * stride - padding + ky;
                                        if (iy < 0 || iy >= H) continue;
                                        const double* xrow = px->data.data() + ((ci * W + ix) * H + iy) * D;
                                        double* xgrow = px->requires_grad
                                                            ? px->grad.data() + ((ci * W + ix) * H + iy) * D
                                                            : nullptr;
                                        const double* grow =
                                            self.grad.data() + ((co * Wo + ox) * Ho + oy) * Do;
                                        for (int64_t oz = 0; oz < Do; ++oz) {
                                            const int64_t iz = oz * stride - padding + kz;
                                            if (iz < 0 || iz >= D) continue;
                                            const double g = grow[oz];
                                            wgrad += g * xrow[iz];
                                            if (xgrow) xgrow[iz] += g * wv;
                                        }
                                    }
                                }
                                if (pw->requires_grad) pw->grad[widx] += wgrad;
                            }
        });
}

/// x [C x W x H x D] + per-channel bias [C].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 4 || b.ndim() != 1 || b.dim(0) != x.dim(0))
        throw shape_error("add_channel_bias: shapes " + shape_str(x.shape()) + " and " +
                          shape_str(b.shape()));
    const int64_t c = x.dim(0);
    const int64_t spatial = x.size() / c;
    std::vector<double> out(x.data());
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < spatial; ++i) out[ch * spatial + i] += b.data()[static_cast<size_t>(ch)];
    auto px = x.node(), pb = b.node();
    return detail::make_node(x.shape(), std::move(out), {x, b}, [px, pb, c, spatial](TensorNode& self) {
        if (px->requires_grad)
            for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        if (pb->requires_grad)
            for (int64_t ch = 0; ch < c; ++ch) {
                double g = 0.0;
                for (int64_t i = 0; i < spatial; ++i) g += self.grad[ch * spatial + i];
                pb->grad[static_cast<size_t>(ch)] += g;
            }
    });
}

/// Nearest-neighbor x2 upsampling of [C x W x H x D].
inline Tensor upsample_nearest2(const Tensor& x) {
    if (x.ndim() != 4) throw shape_error("upsample_nearest2 expects 4D, got " + shape_str(x.shape()));
    const int64_t c = x.dim(0), W = x.dim(1), H = x.dim(2), D = x.dim(3);
    const int64_t Wo = 2 * W, Ho = 2 * H, Do = 2 * D;
    std::vector<double> out(static_cast<size_t>(c * Wo * Ho * Do));
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ox = 0; ox < Wo; ++ox)
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t oz = 0; oz < Do; ++oz)
                    out[((ch * Wo + ox) * Ho + oy) * Do + oz] =
                        x.data()[((ch * W + ox / 2) * H + oy / 2) * D + oz / 2];
    auto px = x.node();
    return detail::make_node({c, Wo, Ho, Do}, std::move(out), {x},
                             [px, c, W, H, D, Wo, Ho, Do](TensorNode& self) {
        if (!px->requires_grad) return;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t ox = 0; ox < Wo; ++ox)
                for (int64_t oy = 0; oy < Ho; ++oy)
                    for (int64_t oz = 0; oz < Do; ++oz)
                        px->grad[((ch * W + ox / 2) * H + oy / 2) * D + oz / 2] +=
                            self.grad[((ch * Wo + ox) * Ho + oy) * Do + oz];
    });
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted dropout: survivors are scaled by 1/(1-rate) at apply time, so
/// inference (active=false) is a plain identity.
inline Tensor dropout(const Tensor& x, double rate, RngStream& rng, bool active) {
    if (rate < 0.0 || rate >= 1.0)
        throw param_error("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (!active || rate == 0.0) {
        auto px = x.node();
        return detail::make_node(x.shape(), x.data(), {x}, [px](TensorNode& self) {
            if (!px->requires_grad) return;
            for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        });
    }
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<uint8_t>>(x.data().size());
    std::vector<double> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const bool keep = rng.next_double() >= rate;
        (*mask)[i] = keep ? 1 : 0;
        out[i] = keep ? x.data()[i] * keep_scale : 0.0;
    }
    auto px = x.node();
    return detail::make_node(x.shape(), std::move(out), {x}, [px, mask, keep_scale](TensorNode& self) {
        if (!px->requires_grad) return;
        for (size_t i = 0; i < self.grad.size(); ++i)
            if ((*mask)[i]) px->grad[i] += self.grad[i] * keep_scale;
    });
}

// ---------------------------------------------------------------------------
// backward

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// across fan-out; each recorded node is visited exactly once.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw contract_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Iterative postorder DFS for a topological order.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (!n->backprop) continue;
        n->ensure_grad();
        for (auto& p : n->parents)
            if (p->requires_grad) p->ensure_grad();
        n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// optimizer

struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t t = 0;
};

/// One Adam update over a parameter list, reading each tensor's grad.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].data().size(), 0.0);
            state.v[i].assign(params[i].data().size(), 0.0);
        }
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].mutable_data();
        const auto& g = params[i].mutable_grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < p.size(); ++j) {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
}

inline double grad_norm(const std::vector<Tensor>& params) {
    double s = 0.0;
    for (const Tensor& p : params)
        for (double g : p.grad()) s += g * g;
    return std::sqrt(s);
}

inline void zero_grads(std::vector<Tensor>& params) {
    for (Tensor& p : params) p.zero_grad();
}

} // namespace tucl
