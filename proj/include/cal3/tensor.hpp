#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cal3/errors.hpp"

namespace cal3 {

// ---------------------------------------------------------------------------
// Dense row-major tensor with reverse-mode autodiff.
//
// The computation graph is implicit: every tracked tensor keeps shared
// pointers to the tracked inputs it was computed from plus a closure that
// pushes gradient to them. backward() builds a topological order on demand
// and walks it in reverse. Gradients of leaf tensors (parameters) accumulate
// across backward calls; gradients of interior nodes are reset at the start
// of each backward. Tensors are never mutated once they participate in a
// graph; optimizers mutate leaf data between graph constructions only.
// ---------------------------------------------------------------------------

struct GraphStats {
    long long live_tracked = 0;  // tracked nodes currently alive
    long long peak_tracked = 0;  // high-water mark since last reset
};

namespace detail {
inline long long g_live_tracked = 0;
inline long long g_peak_tracked = 0;
inline thread_local int g_no_grad_depth = 0;

inline void count_tracked() {
    ++g_live_tracked;
    if (g_live_tracked > g_peak_tracked) g_peak_tracked = g_live_tracked;
}
inline void uncount_tracked() { --g_live_tracked; }
}  // namespace detail

inline GraphStats graph_stats() { return {detail::g_live_tracked, detail::g_peak_tracked}; }
inline void reset_graph_peak() { detail::g_peak_tracked = detail::g_live_tracked; }

inline bool grad_enabled() { return detail::g_no_grad_depth == 0; }

// RAII guard disabling graph recording, like an inference-mode scope.
struct NoGradGuard {
    NoGradGuard() { ++detail::g_no_grad_depth; }
    ~NoGradGuard() { --detail::g_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

template <typename T>
struct NodeT {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty == absent
    bool requires_grad = false;
    bool counted = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backward_fn;

    ~NodeT() {
        if (counted) detail::uncount_tracked();
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    bool is_leaf() const { return parents.empty() && !backward_fn; }

    void mark_tracked() {
        if (!counted) {
            counted = true;
            detail::count_tracked();
        }
        requires_grad = true;
    }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class TensorT {
public:
    using Node = NodeT<T>;

    TensorT() = default;

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static TensorT full(std::vector<int> shape, T value, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.assign(static_cast<std::size_t>(shape_numel(n->shape)), value);
        TensorT t(std::move(n));
        if (requires_grad) t.node_->mark_tracked();
        return t;
    }

    static TensorT from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                 std::to_string(data.size()) + " values");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        TensorT t(std::move(n));
        if (requires_grad) t.node_->mark_tracked();
        return t;
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return node_->numel(); }

    const std::vector<T>& data() const { return node_->data; }
    // Leaf mutation hook for optimizers; never call on graph interior nodes.
    std::vector<T>& mutable_data() { return node_->data; }

    T item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) {
        if (rg) {
            node_->mark_tracked();
        } else {
            if (node_->counted) {
                node_->counted = false;
                detail::uncount_tracked();
            }
            node_->requires_grad = false;
        }
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (node_->grad.empty()) throw ContractError("grad: no gradient present");
        return node_->grad;
    }
    std::vector<T>& mutable_grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Value-identical tensor cut from the graph.
    TensorT detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node_->shape;
        n->data = node_->data;
        return TensorT(std::move(n));
    }

    void backward() const {
        if (numel() != 1) throw ContractError("backward: root must be scalar, got " + shape_str(shape()));

        // post-order DFS over tracked parents, iterative
        std::vector<Node*> topo;
        std::unordered_set<Node*> visited;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next].get();
                ++next;
                if (!visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }

        // interior gradients are per-call, leaf gradients accumulate
        for (Node* n : topo) {
            if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
        }
        node_->ensure_grad();
        node_->grad[0] += T(1);

        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

private:
    explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;

    template <typename U>
    friend TensorT<U> make_op_result(std::vector<int> shape, std::vector<U> data,
                                     std::vector<TensorT<U>> tracked_inputs,
                                     std::function<void(NodeT<U>&)> backward_fn);
};

// Shared op-construction helper: records the graph edge only when gradients
// are enabled and at least one input is tracked.
template <typename T>
TensorT<T> make_op_result(std::vector<int> shape, std::vector<T> data,
                          std::vector<TensorT<T>> tracked_inputs,
                          std::function<void(NodeT<T>&)> backward_fn) {
    TensorT<T> out = TensorT<T>::from_data(std::move(shape), std::move(data));
    bool track = grad_enabled();
    if (track) {
        track = false;
        for (const auto& t : tracked_inputs)
            if (t.requires_grad()) track = true;
    }
    if (track) {
        out.node_->mark_tracked();
        for (const auto& t : tracked_inputs)
            if (t.requires_grad()) out.node_->parents.push_back(t.node());
        out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
}

namespace detail {

template <typename T>
inline void add_into(std::vector<T>& dst, const T* src, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        T* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <typename T>
void matmul_nt_acc(const T* a, const T* b, T* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * n;
        T* crow = c + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const T* brow = b + static_cast<std::size_t>(j) * n;
            T acc = T(0);
            for (int p = 0; p < n; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void matmul_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        const T* brow = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            T* crow = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
    detail::matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);

    return make_op_result<T>(
        {m, n}, std::move(out), {a, b}, [a, b, m, k, n](NodeT<T>& self) {
            if (a.requires_grad()) {
                a.node()->ensure_grad();
                detail::matmul_nt_acc(self.grad.data(), b.data().data(), a.node()->grad.data(), m, n, k);
            }
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                detail::matmul_tn_acc(a.data().data(), self.grad.data(), b.node()->grad.data(), m, k, n);
            }
        });
}

template <typename T>
TensorT<T> transpose2d(const TensorT<T>& x) {
    if (x.rank() != 2) throw DimensionError("transpose2d: need rank-2 tensor, got " + shape_str(x.shape()));
    int m = x.dim(0), n = x.dim(1);
    std::vector<T> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = x.data()[static_cast<std::size_t>(i) * n + j];

    return make_op_result<T>({n, m}, std::move(out), {x}, [x, m, n](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        auto& gx = x.node()->grad;
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                gx[static_cast<std::size_t>(i) * n + j] += self.grad[static_cast<std::size_t>(j) * m + i];
    });
}

// ---------------------------------------------------------------------------
// elementwise ops (binary ops allow scalar broadcast on either side)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { add, sub, mul };

template <typename T>
TensorT<T> binary_op(BinKind kind, const TensorT<T>& a, const TensorT<T>& b, const char* name) {
    bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
    if (a.shape() != b.shape() && !a_scalar && !b_scalar)
        throw DimensionError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));

    const auto& bigger = (a_scalar && !b_scalar) ? b : a;
    std::size_t n = static_cast<std::size_t>(bigger.numel());
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        T va = a_scalar ? pa[0] : pa[i];
        T vb = b_scalar ? pb[0] : pb[i];
        out[i] = kind == BinKind::add ? va + vb : kind == BinKind::sub ? va - vb : va * vb;
    }

    return make_op_result<T>(
        bigger.shape(), std::move(out), {a, b}, [kind, a, b, a_scalar, b_scalar, n](NodeT<T>& self) {
            const T* g = self.grad.data();
            if (a.requires_grad()) {
                a.node()->ensure_grad();
                auto& ga = a.node()->grad;
                for (std::size_t i = 0; i < n; ++i) {
                    T contrib = g[i];
                    if (kind == BinKind::mul) contrib *= b_scalar ? b.data()[0] : b.data()[i];
                    ga[a_scalar ? 0 : i] += contrib;
                }
            }
            if (b.requires_grad()) {
                b.node()->ensure_grad();
                auto& gb = b.node()->grad;
                for (std::size_t i = 0; i < n; ++i) {
                    T contrib = g[i];
                    if (kind == BinKind::sub) contrib = -contrib;
                    if (kind == BinKind::mul) contrib = g[i] * (a_scalar ? a.data()[0] : a.data()[i]);
                    gb[b_scalar ? 0 : i] += contrib;
                }
            }
        });
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(detail::BinKind::add, a, b, "add");
}
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(detail::BinKind::sub, a, b, "sub");
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(detail::BinKind::mul, a, b, "mul");
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i] * c;
    return make_op_result<T>(x.shape(), std::move(out), {x}, [x, c, n](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) x.node()->grad[i] += self.grad[i] * c;
    });
}

template <typename T>
TensorT<T> negate(const TensorT<T>& x) {
    return scale(x, T(-1));
}

template <typename T>
TensorT<T> exp(const TensorT<T>& x) {
    std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x.data()[i]);
    std::vector<T> saved = out;
    return make_op_result<T>(x.shape(), std::move(out), {x}, [x, saved, n](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) x.node()->grad[i] += self.grad[i] * saved[i];
    });
}

template <typename T>
TensorT<T> log(const TensorT<T>& x) {
    std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(x.data()[i] > T(0)))
            throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(x.data()[i])) +
                              " at flat index " + std::to_string(i));
        out[i] = std::log(x.data()[i]);
    }
    return make_op_result<T>(x.shape(), std::move(out), {x}, [x, n](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) x.node()->grad[i] += self.grad[i] / x.data()[i];
    });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    return make_op_result<T>(x.shape(), std::move(out), {x}, [x, n](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
            if (x.data()[i] > T(0)) x.node()->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    std::size_t n = static_cast<std::size_t>(x.numel());
    return make_op_result<T>({1}, {acc}, {x}, [x, n](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        T g = self.grad[0];
        for (std::size_t i = 0; i < n; ++i) x.node()->grad[i] += g;
    });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

namespace detail {

inline void reduce_geometry(const std::vector<int>& shape, int axis, std::int64_t& outer,
                            std::int64_t& n_axis, std::int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    n_axis = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

inline std::vector<int> reduced_shape(const std::vector<int>& shape, int axis) {
    std::vector<int> out;
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (static_cast<int>(i) != axis) out.push_back(shape[i]);
    if (out.empty()) out.push_back(1);
    return out;
}

inline void check_axis(const std::vector<int>& shape, int axis, const char* name) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw DimensionError(std::string(name) + ": axis " + std::to_string(axis) +
                             " invalid for shape " + shape_str(shape));
}

}  // namespace detail

template <typename T>
TensorT<T> sum(const TensorT<T>& x, int axis) {
    detail::check_axis(x.shape(), axis, "sum");
    std::int64_t outer, n_axis, inner;
    detail::reduce_geometry(x.shape(), axis, outer, n_axis, inner);
    std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
    const T* px = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t a = 0; a < n_axis; ++a) {
            const T* src = px + (o * n_axis + a) * inner;
            T* dst = out.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }

    return make_op_result<T>(detail::reduced_shape(x.shape(), axis), std::move(out), {x},
                             [x, outer, n_axis, inner](NodeT<T>& self) {
                                 if (!x.requires_grad()) return;
                                 x.node()->ensure_grad();
                                 T* gx = x.node()->grad.data();
                                 const T* g = self.grad.data();
                                 for (std::int64_t o = 0; o < outer; ++o)
                                     for (std::int64_t a = 0; a < n_axis; ++a) {
                                         T* dst = gx + (o * n_axis + a) * inner;
                                         const T* src = g + o * inner;
                                         for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                                     }
                             });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x, int axis) {
    detail::check_axis(x.shape(), axis, "mean");
    return scale(sum(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

// max over an axis; ties route the gradient to the lowest flat index
template <typename T>
TensorT<T> max(const TensorT<T>& x, int axis) {
    detail::check_axis(x.shape(), axis, "max");
    std::int64_t outer, n_axis, inner;
    detail::reduce_geometry(x.shape(), axis, outer, n_axis, inner);
    std::vector<T> out(static_cast<std::size_t>(outer * inner));
    std::vector<std::int64_t> arg(static_cast<std::size_t>(outer * inner));
    const T* px = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            T best = px[(o * n_axis) * inner + i];
            std::int64_t best_a = 0;
            for (std::int64_t a = 1; a < n_axis; ++a) {
                T v = px[(o * n_axis + a) * inner + i];
                if (v > best) {
                    best = v;
                    best_a = a;
                }
            }
            out[static_cast<std::size_t>(o * inner + i)] = best;
            arg[static_cast<std::size_t>(o * inner + i)] = (o * n_axis + best_a) * inner + i;
        }

    return make_op_result<T>(detail::reduced_shape(x.shape(), axis), std::move(out), {x},
                             [x, arg](NodeT<T>& self) {
                                 if (!x.requires_grad()) return;
                                 x.node()->ensure_grad();
                                 for (std::size_t i = 0; i < arg.size(); ++i)
                                     x.node()->grad[static_cast<std::size_t>(arg[i])] += self.grad[i];
                             });
}

template <typename T>
TensorT<T> max(const TensorT<T>& x) {
    return max(reshape(x, {static_cast<int>(x.numel())}), 0);
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    std::vector<T> out = x.data();
    std::size_t n = out.size();
    return make_op_result<T>(std::move(new_shape), std::move(out), {x}, [x, n](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        detail::add_into(x.node()->grad, self.grad.data(), n);
    });
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    int cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
    if (cols < 0) throw DimensionError("concat_rows: need rank-2 inputs");
    int rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols)
            throw DimensionError("concat_rows: incompatible part " + shape_str(p.shape()));
        rows += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(rows) * cols);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

    return make_op_result<T>({rows, cols}, std::move(out), parts, [parts](NodeT<T>& self) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
            std::size_t n = static_cast<std::size_t>(p.numel());
            if (p.requires_grad()) {
                p.node()->ensure_grad();
                detail::add_into(p.node()->grad, self.grad.data() + offset, n);
            }
            offset += n;
        }
    });
}

// out[l, :] = table[ids[l], :]; gradient scatter-adds into table rows
template <typename T>
TensorT<T> embedding_lookup(const TensorT<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank-2");
    int v = table.dim(0), e = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw DimensionError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                                 std::to_string(v) + " rows");
    int l = static_cast<int>(ids.size());
    std::vector<T> out(static_cast<std::size_t>(l) * e);
    for (int i = 0; i < l; ++i)
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * e,
                    e, out.data() + static_cast<std::size_t>(i) * e);

    return make_op_result<T>({l, e}, std::move(out), {table}, [table, ids, e](NodeT<T>& self) {
        if (!table.requires_grad()) return;
        table.node()->ensure_grad();
        T* gt = table.node()->grad.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const T* g = self.grad.data() + i * static_cast<std::size_t>(e);
            T* dst = gt + static_cast<std::size_t>(ids[i]) * e;
            for (int j = 0; j < e; ++j) dst[j] += g[j];
        }
    });
}

// ---------------------------------------------------------------------------
// normalized / softmax ops
// ---------------------------------------------------------------------------

// Row-wise L2 normalization with an epsilon guard under the square root.
template <typename T>
TensorT<T> l2_normalize_rows(const TensorT<T>& x) {
    if (x.rank() != 2) throw DimensionError("l2_normalize_rows: need rank-2 tensor, got " + shape_str(x.shape()));
    constexpr T kEps = static_cast<T>(1e-12);
    int n = x.dim(0), d = x.dim(1);
    std::vector<T> out(static_cast<std::size_t>(n) * d);
    std::vector<T> norms(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* row = x.data().data() + static_cast<std::size_t>(i) * d;
        T sq = T(0);
        for (int j = 0; j < d; ++j) sq += row[j] * row[j];
        T norm = std::sqrt(sq + kEps);
        norms[static_cast<std::size_t>(i)] = norm;
        T* orow = out.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) orow[j] = row[j] / norm;
    }
    std::vector<T> saved = out;

    return make_op_result<T>({n, d}, std::move(out), {x}, [x, saved, norms, n, d](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const T* y = saved.data() + static_cast<std::size_t>(i) * d;
            const T* g = self.grad.data() + static_cast<std::size_t>(i) * d;
            T* gx = x.node()->grad.data() + static_cast<std::size_t>(i) * d;
            T gy = T(0);
            for (int j = 0; j < d; ++j) gy += g[j] * y[j];
            T inv = T(1) / norms[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) gx[j] += (g[j] - y[j] * gy) * inv;
        }
    });
}

// Row-wise softmax, stabilized by subtracting the row max.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    if (x.rank() != 2) throw DimensionError("softmax_rows: need rank-2 tensor, got " + shape_str(x.shape()));
    int n = x.dim(0), m = x.dim(1);
    std::vector<T> out(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i) {
        const T* row = x.data().data() + static_cast<std::size_t>(i) * m;
        T* orow = out.data() + static_cast<std::size_t>(i) * m;
        T mx = row[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        T s = T(0);
        for (int j = 0; j < m; ++j) {
            orow[j] = std::exp(row[j] - mx);
            s += orow[j];
        }
        for (int j = 0; j < m; ++j) orow[j] /= s;
    }
    std::vector<T> saved = out;

    return make_op_result<T>({n, m}, std::move(out), {x}, [x, saved, n, m](NodeT<T>& self) {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const T* p = saved.data() + static_cast<std::size_t>(i) * m;
            const T* g = self.grad.data() + static_cast<std::size_t>(i) * m;
            T* gx = x.node()->grad.data() + static_cast<std::size_t>(i) * m;
            T dot = T(0);
            for (int j = 0; j < m; ++j) dot += g[j] * p[j];
            for (int j = 0; j < m; ++j) gx[j] += p[j] * (g[j] - dot);
        }
    });
}

// Mean over rows of -log softmax(row)[row index]; the targets are the
// diagonal, so the logits must be square. Stabilized by the row max.
template <typename T>
TensorT<T> softmax_cross_entropy_rows(const TensorT<T>& logits) {
    if (logits.rank() != 2 || logits.dim(0) != logits.dim(1))
        throw DimensionError("softmax_cross_entropy_rows: need square logits, got " + shape_str(logits.shape()));
    int n = logits.dim(0);
    std::vector<T> probs(static_cast<std::size_t>(n) * n);
    T loss = T(0);
    for (int i = 0; i < n; ++i) {
        const T* row = logits.data().data() + static_cast<std::size_t>(i) * n;
        T* prow = probs.data() + static_cast<std::size_t>(i) * n;
        T mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T s = T(0);
        for (int j = 0; j < n; ++j) {
            prow[j] = std::exp(row[j] - mx);
            s += prow[j];
        }
        for (int j = 0; j < n; ++j) prow[j] /= s;
        loss += -(row[i] - mx - std::log(s));
    }
    loss /= static_cast<T>(n);

    return make_op_result<T>({1}, {loss}, {logits}, [logits, probs, n](NodeT<T>& self) {
        if (!logits.requires_grad()) return;
        logits.node()->ensure_grad();
        T g = self.grad[0] / static_cast<T>(n);
        T* gx = logits.node()->grad.data();
        for (int i = 0; i < n; ++i) {
            const T* prow = probs.data() + static_cast<std::size_t>(i) * n;
            T* grow = gx + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) grow[j] += g * (prow[j] - (i == j ? T(1) : T(0)));
        }
    });
}

// ---------------------------------------------------------------------------
// 3D convolutions (kernel 3, stride 2, padding 1) for cubic feature maps
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_size(int s) { return (s - 1) / 2 + 1; }

// Valid output range for a kernel offset d: ix = 2*ox + d - 1 in [0, iw).
inline void conv_x_range(int d, int iw, int ow, int& lo, int& hi) {
    lo = d == 0 ? 1 : 0;
    hi = std::min(ow - 1, (iw - d) / 2);
}

}  // namespace detail

// input [C_in, S, S, S] -> output [C_out, S', S', S'] with S' = (S-1)/2 + 1;
// weight [C_out, C_in, 3, 3, 3], bias [C_out]
template <typename T>
TensorT<T> conv3d(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias) {
    if (input.rank() != 4 || input.dim(1) != input.dim(2) || input.dim(1) != input.dim(3))
        throw DimensionError("conv3d: input must be [C,S,S,S], got " + shape_str(input.shape()));
    if (weight.rank() != 5 || weight.dim(2) != 3 || weight.dim(3) != 3 || weight.dim(4) != 3 ||
        weight.dim(1) != input.dim(0))
        throw DimensionError("conv3d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                             shape_str(input.shape()));
    if (bias.numel() != weight.dim(0)) throw DimensionError("conv3d: bias size mismatch");

    const int in_c = input.dim(0), s = input.dim(1);
    const int out_c = weight.dim(0), os = detail::conv_out_size(s);
    const std::size_t in_plane = static_cast<std::size_t>(s) * s;
    const std::size_t out_plane = static_cast<std::size_t>(os) * os;

    std::vector<T> out(static_cast<std::size_t>(out_c) * os * out_plane);
    for (int oc = 0; oc < out_c; ++oc)
        std::fill_n(out.data() + static_cast<std::size_t>(oc) * os * out_plane, os * out_plane,
                    bias.data()[static_cast<std::size_t>(oc)]);

    const T* pin = input.data().data();
    const T* pw = weight.data().data();
    for (int oc = 0; oc < out_c; ++oc) {
        for (int ic = 0; ic < in_c; ++ic) {
            const T* wk = pw + (static_cast<std::size_t>(oc) * in_c + ic) * 27;
            const T* in_ch = pin + static_cast<std::size_t>(ic) * s * in_plane;
            T* out_ch = out.data() + static_cast<std::size_t>(oc) * os * out_plane;
            for (int oz = 0; oz < os; ++oz)
                for (int dz = 0; dz < 3; ++dz) {
                    int iz = 2 * oz + dz - 1;
                    if (iz < 0 || iz >= s) continue;
                    for (int oy = 0; oy < os; ++oy)
                        for (int dy = 0; dy < 3; ++dy) {
                            int iy = 2 * oy + dy - 1;
                            if (iy < 0 || iy >= s) continue;
                            const T* irow = in_ch + iz * in_plane + static_cast<std::size_t>(iy) * s;
                            T* orow = out_ch + oz * out_plane + static_cast<std::size_t>(oy) * os;
                            const T* wrow = wk + (dz * 3 + dy) * 3;
                            for (int dx = 0; dx < 3; ++dx) {
                                T wv = wrow[dx];
                                int lo, hi;
                                detail::conv_x_range(dx, s, os, lo, hi);
                                for (int ox = lo; ox <= hi; ++ox) orow[ox] += wv * irow[2 * ox + dx - 1];
                            }
                        }
                }
        }
    }

    return make_op_result<T>(
        {out_c, os, os, os}, std::move(out), {input, weight, bias},
        [input, weight, bias, in_c, s, out_c, os, in_plane, out_plane](NodeT<T>& self) {
            const T* g = self.grad.data();
            const T* pin = input.data().data();
            const T* pw = weight.data().data();
            if (bias.requires_grad()) {
                bias.node()->ensure_grad();
                for (int oc = 0; oc < out_c; ++oc) {
                    T acc = T(0);
                    const T* gch = g + static_cast<std::size_t>(oc) * os * out_plane;
                    for (std::size_t i = 0; i < static_cast<std::size_t>(os) * out_plane; ++i) acc += gch[i];
                    bias.node()->grad[static_cast<std::size_t>(oc)] += acc;
                }
            }
            bool need_w = weight.requires_grad();
            bool need_in = input.requires_grad();
            if (!need_w && !need_in) return;
            if (need_w) weight.node()->ensure_grad();
            if (need_in) input.node()->ensure_grad();
            T* gw = need_w ? weight.node()->grad.data() : nullptr;
            T* gin = need_in ? input.node()->grad.data() : nullptr;
            for (int oc = 0; oc < out_c; ++oc) {
                const T* gch = g + static_cast<std::size_t>(oc) * os * out_plane;
                for (int ic = 0; ic < in_c; ++ic) {
                    const std::size_t wk_off = (static_cast<std::size_t>(oc) * in_c + ic) * 27;
                    const T* in_ch = pin + static_cast<std::size_t>(ic) * s * in_plane;
                    T* gin_ch = need_in ? gin + static_cast<std::size_t>(ic) * s * in_plane : nullptr;
                    for (int oz = 0; oz < os; ++oz)
                        for (int dz = 0; dz < 3; ++dz) {
                            int iz = 2 * oz + dz - 1;
                            if (iz < 0 || iz >= s) continue;
                            for (int oy = 0; oy < os; ++oy)
                                for (int dy = 0; dy < 3; ++dy) {
                                    int iy = 2 * oy + dy - 1;
                                    if (iy < 0 || iy >= s) continue;
                                    const T* irow = in_ch + iz * in_plane + static_cast<std::size_t>(iy) * s;
                                    const T* grow = gch + oz * out_plane + static_cast<std::size_t>(oy) * os;
                                    for (int dx = 0; dx < 3; ++dx) {
                                        int lo, hi;
                                        detail::conv_x_range(dx, s, os, lo, hi);
                                        const std::size_t widx = wk_off + (dz * 3 + dy) * 3 + dx;
                                        if (need_w) {
                                            T acc = T(0);
                                            for (int ox = lo; ox <= hi; ++ox)
                                                acc += grow[ox] * irow[2 * ox + dx - 1];
                                            gw[widx] += acc;
                                        }
                                        if (need_in) {
                                            T wv = pw[widx];
                                            T* girow = gin_ch + iz * in_plane + static_cast<std::size_t>(iy) * s;
                                            for (int ox = lo; ox <= hi; ++ox)
                                                girow[2 * ox + dx - 1] += wv * grow[ox];
                                        }
                                    }
                                }
                        }
                }
            }
        });
}

// Transposed counterpart doubling the spatial size: [C_in, S, S, S] ->
// [C_out, 2S, 2S, 2S]; weight [C_in, C_out, 3, 3, 3], bias [C_out].
template <typename T>
TensorT<T> conv3d_transpose(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias) {
    if (input.rank() != 4 || input.dim(1) != input.dim(2) || input.dim(1) != input.dim(3))
        throw DimensionError("conv3d_transpose: input must be [C,S,S,S], got " + shape_str(input.shape()));
    if (weight.rank() != 5 || weight.dim(0) != input.dim(0) || weight.dim(2) != 3 || weight.dim(3) != 3 ||
        weight.dim(4) != 3)
        throw DimensionError("conv3d_transpose: weight " + shape_str(weight.shape()) +
                             " incompatible with input " + shape_str(input.shape()));
    const int in_c = input.dim(0), s = input.dim(1);
    const int out_c = weight.dim(1), os = 2 * s;
    if (bias.numel() != out_c) throw DimensionError("conv3d_transpose: bias size mismatch");
    const std::size_t in_plane = static_cast<std::size_t>(s) * s;
    const std::size_t out_plane = static_cast<std::size_t>(os) * os;

    std::vector<T> out(static_cast<std::size_t>(out_c) * os * out_plane);
    for (int oc = 0; oc < out_c; ++oc)
        std::fill_n(out.data() + static_cast<std::size_t>(oc) * os * out_plane, os * out_plane,
                    bias.data()[static_cast<std::size_t>(oc)]);

    const T* pin = input.data().data();
    const T* pw = weight.data().data();
    for (int ic = 0; ic < in_c; ++ic) {
        const T* in_ch = pin + static_cast<std::size_t>(ic) * s * in_plane;
        for (int oc = 0; oc < out_c; ++oc) {
            const T* wk = pw + (static_cast<std::size_t>(ic) * out_c + oc) * 27;
            T* out_ch = out.data() + static_cast<std::size_t>(oc) * os * out_plane;
            for (int z = 0; z < s; ++z)
                for (int dz = 0; dz < 3; ++dz) {
                    int oz = 2 * z + dz - 1;
                    if (oz < 0 || oz >= os) continue;
                    for (int y = 0; y < s; ++y)
                        for (int dy = 0; dy < 3; ++dy) {
                            int oy = 2 * y + dy - 1;
                            if (oy < 0 || oy >= os) continue;
                            const T* irow = in_ch + z * in_plane + static_cast<std::size_t>(y) * s;
                            T* orow = out_ch + oz * out_plane + static_cast<std::size_t>(oy) * os;
                            const T* wrow = wk + (dz * 3 + dy) * 3;
                            for (int dx = 0; dx < 3; ++dx) {
                                T wv = wrow[dx];
                                for (int x = 0; x < s; ++x) {
                                    int ox = 2 * x + dx - 1;
                                    if (ox >= 0 && ox < os) orow[ox] += wv * irow[x];
                                }
                            }
                        }
                }
        }
    }

    return make_op_result<T>(
        {out_c, os, os, os}, std::move(out), {input, weight, bias},
        [input, weight, bias, in_c, s, out_c, os, in_plane, out_plane](NodeT<T>& self) {
            const T* g = self.grad.data();
            const T* pin = input.data().data();
            const T* pw = weight.data().data();
            if (bias.requires_grad()) {
                bias.node()->ensure_grad();
                for (int oc = 0; oc < out_c; ++oc) {
                    T acc = T(0);
                    const T* gch = g + static_cast<std::size_t>(oc) * os * out_plane;
                    for (std::size_t i = 0; i < static_cast<std::size_t>(os) * out_plane; ++i) acc += gch[i];
                    bias.node()->grad[static_cast<std::size_t>(oc)] += acc;
                }
            }
            bool need_w = weight.requires_grad();
            bool need_in = input.requires_grad();
            if (!need_w && !need_in) return;
            if (need_w) weight.node()->ensure_grad();
            if (need_in) input.node()->ensure_grad();
            T* gw = need_w ? weight.node()->grad.data() : nullptr;
            T* gin = need_in ? input.node()->grad.data() : nullptr;
            for (int ic = 0; ic < in_c; ++ic) {
                const T* in_ch = pin + static_cast<std::size_t>(ic) * s * in_plane;
                T* gin_ch = need_in ? gin + static_cast<std::size_t>(ic) * s * in_plane : nullptr;
                for (int oc = 0; oc < out_c; ++oc) {
                    const std::size_t wk_off = (static_cast<std::size_t>(ic) * out_c + oc) * 27;
                    const T* gch = g + static_cast<std::size_t>(oc) * os * out_plane;
                    for (int z = 0; z < s; ++z)
                        for (int dz = 0; dz < 3; ++dz) {
                            int oz = 2 * z + dz - 1;
                            if (oz < 0 || oz >= os) continue;
                            for (int y = 0; y < s; ++y)
                                for (int dy = 0; dy < 3; ++dy) {
                                    int oy = 2 * y + dy - 1;
                                    if (oy < 0 || oy >= os) continue;
                                    const T* irow = in_ch + z * in_plane + static_cast<std::size_t>(y) * s;
                                    const T* grow = gch + oz * out_plane + static_cast<std::size_t>(oy) * os;
                                    T* girow =
                                        need_in ? gin_ch + z * in_plane + static_cast<std::size_t>(y) * s : nullptr;
                                    for (int dx = 0; dx < 3; ++dx) {
                                        const std::size_t widx = wk_off + (dz * 3 + dy) * 3 + dx;
                                        T wv = pw[widx];
                                        T wacc = T(0);
                                        for (int x = 0; x < s; ++x) {
                                            int ox = 2 * x + dx - 1;
                                            if (ox < 0 || ox >= os) continue;
                                            if (need_w) wacc += grow[ox] * irow[x];
                                            if (need_in) girow[x] += wv * grow[ox];
                                        }
                                        if (need_w) gw[widx] += wacc;
                                    }
                                }
                        }
                }
            }
        });
}

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace cal3
