#pragma once
// Dense row-major double arrays plus a dynamic reverse-mode tape.
// Ops compute values eagerly and record a local backward rule; backward()
// walks the graph once in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hstory {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct RealArray {
    Shape shape;
    std::vector<double> data;

    RealArray() = default;

    explicit RealArray(Shape sh, double fill = 0.0) : shape(std::move(sh)) {
        data.assign(checked_numel(shape), fill);
    }

    RealArray(Shape sh, std::vector<double> values) : shape(std::move(sh)), data(std::move(values)) {
        if (checked_numel(shape) != data.size())
            throw std::invalid_argument("RealArray: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " values");
    }

    static std::size_t checked_numel(const Shape& s) {
        if (s.empty()) throw std::invalid_argument("RealArray: empty shape");
        std::size_t n = 1;
        for (std::size_t d : s) {
            if (d == 0) throw std::invalid_argument("RealArray: zero dimension in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }

    bool is_matrix() const { return shape.size() == 2; }
    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }

    double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// raw matrix kernels (shared by forward values and backward rules)

namespace detail {

// C += A * B
inline void matmul_nn_acc(const RealArray& a, const RealArray& b, RealArray& c) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data[i * k];
        double* crow = &c.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T
inline void matmul_nt_acc(const RealArray& a, const RealArray& b, RealArray& c) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.data[i * k];
        double* crow = &c.data[i * n];
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = &b.data[j * k];
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C += A^T * B
inline void matmul_tn_acc(const RealArray& a, const RealArray& b, RealArray& c) {
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = &a.data[p * m];
        const double* brow = &b.data[p * n];
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = &c.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// tape

struct GradNode;
using NodePtr = std::shared_ptr<GradNode>;

struct GradNode {
    RealArray value;
    RealArray grad;  // materialized lazily, same shape as value
    std::vector<NodePtr> parents;
    std::function<void(GradNode&)> backprop;  // accumulates into parents' grads
    bool trainable = false;
    std::string name;

    void ensure_grad() {
        if (grad.shape != value.shape) grad = RealArray(value.shape);
        else std::fill(grad.data.begin(), grad.data.end(), 0.0);
    }
};

inline NodePtr constant(RealArray v) {
    auto n = std::make_shared<GradNode>();
    n->value = std::move(v);
    return n;
}

inline NodePtr scalar(double v) { return constant(RealArray({1}, {v})); }

inline NodePtr parameter(std::string name, RealArray v) {
    auto n = std::make_shared<GradNode>();
    n->value = std::move(v);
    n->trainable = true;
    n->name = std::move(name);
    return n;
}

namespace detail {

inline NodePtr make_op(RealArray value, std::vector<NodePtr> parents,
                       std::function<void(GradNode&)> backprop) {
    auto n = std::make_shared<GradNode>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
    return n;
}

inline void require_matrix(const NodePtr& a, const char* op) {
    if (!a->value.is_matrix())
        throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " + shape_str(a->value.shape));
}

inline void require_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
    if (a->value.shape != b->value.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->value.shape) + " vs " +
                                    shape_str(b->value.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ops

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    if (a->value.cols() != b->value.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a->value.shape) + " vs " +
                                    shape_str(b->value.shape));
    RealArray out({a->value.rows(), b->value.cols()});
    detail::matmul_nn_acc(a->value, b->value, out);
    return detail::make_op(std::move(out), {a, b}, [a, b](GradNode& self) {
        detail::matmul_nt_acc(self.grad, b->value, a->grad);
        detail::matmul_tn_acc(a->value, self.grad, b->grad);
    });
}

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    detail::require_same_shape(a, b, "add");
    RealArray out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b->value.data[i];
    return detail::make_op(std::move(out), {a, b}, [a, b](GradNode& self) {
        for (std::size_t i = 0; i < self.grad.numel(); ++i) {
            a->grad.data[i] += self.grad.data[i];
            b->grad.data[i] += self.grad.data[i];
        }
    });
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
    detail::require_same_shape(a, b, "mul");
    RealArray out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b->value.data[i];
    return detail::make_op(std::move(out), {a, b}, [a, b](GradNode& self) {
        for (std::size_t i = 0; i < self.grad.numel(); ++i) {
            a->grad.data[i] += self.grad.data[i] * b->value.data[i];
            b->grad.data[i] += self.grad.data[i] * a->value.data[i];
        }
    });
}

inline NodePtr sigmoid(const NodePtr& a) {
    RealArray out = a->value;
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return detail::make_op(std::move(out), {a}, [a](GradNode& self) {
        for (std::size_t i = 0; i < self.grad.numel(); ++i) {
            const double s = self.value.data[i];
            a->grad.data[i] += self.grad.data[i] * s * (1.0 - s);
        }
    });
}

inline NodePtr tanh(const NodePtr& a) {
    RealArray out = a->value;
    for (double& v : out.data) v = std::tanh(v);
    return detail::make_op(std::move(out), {a}, [a](GradNode& self) {
        for (std::size_t i = 0; i < self.grad.numel(); ++i) {
            const double t = self.value.data[i];
            a->grad.data[i] += self.grad.data[i] * (1.0 - t * t);
        }
    });
}

namespace detail {

// Sum in ascending value order: invariant under permutation of the inputs,
// so softmax weights permute bit-exactly when their logits do.
inline double ordered_sum(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    double total = 0.0;
    for (double v : values) total += v;
    return total;
}

}  // namespace detail

// Softmax over all entries (max-subtracted for stability). Shape preserved.
inline NodePtr softmax(const NodePtr& a) {
    if (a->value.numel() == 0) throw std::invalid_argument("softmax: empty input");
    RealArray out = a->value;
    const double mx = *std::max_element(out.data.begin(), out.data.end());
    for (double& v : out.data) v = std::exp(v - mx);
    const double total = detail::ordered_sum(out.data);
    for (double& v : out.data) v /= total;
    return detail::make_op(std::move(out), {a}, [a](GradNode& self) {
        double dot = 0.0;
        for (std::size_t i = 0; i < self.grad.numel(); ++i) dot += self.grad.data[i] * self.value.data[i];
        for (std::size_t i = 0; i < self.grad.numel(); ++i)
            a->grad.data[i] += self.value.data[i] * (self.grad.data[i] - dot);
    });
}

// Log-softmax over all entries, computed via log-sum-exp.
inline NodePtr log_softmax(const NodePtr& a) {
    if (a->value.numel() == 0) throw std::invalid_argument("log_softmax: empty input");
    RealArray out = a->value;
    const double mx = *std::max_element(out.data.begin(), out.data.end());
    std::vector<double> exps(out.data.size());
    for (std::size_t i = 0; i < out.data.size(); ++i) exps[i] = std::exp(out.data[i] - mx);
    const double lse = mx + std::log(detail::ordered_sum(std::move(exps)));
    for (double& v : out.data) v -= lse;
    return detail::make_op(std::move(out), {a}, [a](GradNode& self) {
        double gsum = 0.0;
        for (double g : self.grad.data) gsum += g;
        for (std::size_t i = 0; i < self.grad.numel(); ++i)
            a->grad.data[i] += self.grad.data[i] - std::exp(self.value.data[i]) * gsum;
    });
}

// Single entry by flat index, as a [1] scalar.
inline NodePtr pick(const NodePtr& a, std::size_t index) {
    if (index >= a->value.numel())
        throw std::out_of_range("pick: index " + std::to_string(index) + " out of range for shape " +
                                shape_str(a->value.shape));
    return detail::make_op(RealArray({1}, {a->value.data[index]}), {a},
                           [a, index](GradNode& self) { a->grad.data[index] += self.grad.data[0]; });
}

// Row r of a matrix, as [1 x C].
inline NodePtr row(const NodePtr& a, std::size_t r) {
    detail::require_matrix(a, "row");
    const std::size_t c = a->value.cols();
    if (r >= a->value.rows())
        throw std::out_of_range("row: index " + std::to_string(r) + " out of range for shape " +
                                shape_str(a->value.shape));
    RealArray out({1, c});
    std::copy_n(&a->value.data[r * c], c, out.data.begin());
    return detail::make_op(std::move(out), {a}, [a, r, c](GradNode& self) {
        for (std::size_t j = 0; j < c; ++j) a->grad.data[r * c + j] += self.grad.data[j];
    });
}

inline NodePtr transpose(const NodePtr& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t r = a->value.rows(), c = a->value.cols();
    RealArray out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = a->value.data[i * c + j];
    return detail::make_op(std::move(out), {a}, [a, r, c](GradNode& self) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) a->grad.data[i * c + j] += self.grad.data[j * r + i];
    });
}

// Broadcast-add a [1 x C] row vector onto every row of an [R x C] matrix.
inline NodePtr add_rowvec(const NodePtr& m, const NodePtr& v) {
    detail::require_matrix(m, "add_rowvec");
    detail::require_matrix(v, "add_rowvec");
    if (v->value.rows() != 1 || v->value.cols() != m->value.cols())
        throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(m->value.shape) + " vs " +
                                    shape_str(v->value.shape));
    const std::size_t r = m->value.rows(), c = m->value.cols();
    RealArray out = m->value;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += v->value.data[j];
    return detail::make_op(std::move(out), {m, v}, [m, v, r, c](GradNode& self) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                m->grad.data[i * c + j] += self.grad.data[i * c + j];
                v->grad.data[j] += self.grad.data[i * c + j];
            }
    });
}

// Column-wise mean of an [R x C] matrix, as [1 x C].
inline NodePtr mean_rows(const NodePtr& a) {
    detail::require_matrix(a, "mean_rows");
    const std::size_t r = a->value.rows(), c = a->value.cols();
    RealArray out({1, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data[j] += a->value.data[i * c + j];
    for (double& v : out.data) v /= static_cast<double>(r);
    return detail::make_op(std::move(out), {a}, [a, r, c](GradNode& self) {
        const double inv = 1.0 / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) a->grad.data[i * c + j] += self.grad.data[j] * inv;
    });
}

inline NodePtr scale(const NodePtr& a, double k) {
    RealArray out = a->value;
    for (double& v : out.data) v *= k;
    return detail::make_op(std::move(out), {a}, [a, k](GradNode& self) {
        for (std::size_t i = 0; i < self.grad.numel(); ++i) a->grad.data[i] += k * self.grad.data[i];
    });
}

// Sum of all entries, as a [1] scalar.
inline NodePtr sum_all(const NodePtr& a) {
    double total = 0.0;
    for (double v : a->value.data) total += v;
    return detail::make_op(RealArray({1}, {total}), {a}, [a](GradNode& self) {
        for (std::size_t i = 0; i < a->grad.numel(); ++i) a->grad.data[i] += self.grad.data[0];
    });
}

// ---------------------------------------------------------------------------
// backward

namespace detail {

// Parents-before-children ordering of every node reachable from root.
inline std::vector<GradNode*> topo_order(GradNode* root) {
    std::vector<GradNode*> order;
    std::unordered_set<GradNode*> seen{root};
    std::vector<std::pair<GradNode*, std::size_t>> stack{{root, 0}};
    while (!stack.empty()) {
        GradNode* node = stack.back().first;
        std::size_t i = stack.back().second;
        if (i < node->parents.size()) {
            ++stack.back().second;
            GradNode* p = node->parents[i].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. Every reachable node is visited
// exactly once; returns the gradients of all reachable named parameters.
inline std::map<std::string, RealArray> backward(const NodePtr& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root->value.shape));
    std::vector<GradNode*> order = detail::topo_order(root.get());
    for (GradNode* n : order) n->ensure_grad();
    root->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
    std::map<std::string, RealArray> grads;
    for (GradNode* n : order)
        if (n->trainable) grads.emplace(n->name, n->grad);
    return grads;
}

}  // namespace hstory
