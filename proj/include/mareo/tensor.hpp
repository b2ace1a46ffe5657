#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// Forward ops execute eagerly; when a Tape is active and an input carries
// gradient, the op pushes a record (inputs, output, backward rule) onto it.
// Tensors are immutable after creation; a training step mutates parameter
// buffers only between tapes.  Adjoints live on the tape, keyed by node, so
// independent tapes (one per sample) can run on separate threads against
// shared read-only parameters.
//
// Matrix products run through Eigen; everything else is plain loops.

#include "mareo/common.hpp"

#include <Eigen/Core>
#include <Eigen/StdVector>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mareo {

using Dims = std::vector<int>;

// All numeric buffers share one alignment class: Eigen's packed kernels pick
// code paths by pointer alignment, and mixed alignments would make repeated
// identical calls differ in the last ulp.
using dvec = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::vector<double> to_vector(const dvec& v) { return {v.begin(), v.end()}; }

inline std::int64_t numel(const Dims& d) {
    std::int64_t n = 1;
    for (int x : d) n *= x;
    return n;
}

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
    os << "]";
    return os.str();
}

inline void check_dims_valid(const Dims& d) {
    if (d.empty()) throw ShapeError("empty shape");
    for (int x : d)
        if (x < 1) throw ShapeError("non-positive dimension in " + dims_str(d));
}

struct Node {
    Dims shape;
    dvec value;
    dvec grad;  // filled by Tape::backward for requires_grad nodes
    bool requires_grad = false;
    bool on_path = false;  // produced by a recorded op
};

using NodePtr = std::shared_ptr<Node>;

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor alloc(Dims shape) {
        check_dims_valid(shape);
        auto n = std::make_shared<Node>();
        n->value.assign(static_cast<std::size_t>(numel(shape)), 0.0);
        n->shape = std::move(shape);
        return Tensor(std::move(n));
    }
    static Tensor zeros(Dims shape) { return alloc(std::move(shape)); }
    static Tensor full(Dims shape, double v) {
        Tensor t = alloc(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }
    static Tensor ones(Dims shape) { return full(std::move(shape), 1.0); }
    static Tensor uniform(Dims shape, double lo, double hi, Rng& rng) {
        Tensor t = alloc(std::move(shape));
        for (double& v : t.data()) v = rng.uniform(lo, hi);
        return t;
    }
    static Tensor from(Dims shape, const std::vector<double>& values) {
        check_dims_valid(shape);
        if (numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("data length " + std::to_string(values.size()) + " does not match " + dims_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value.assign(values.begin(), values.end());
        return Tensor(std::move(n));
    }
    static Tensor scalar(double v) { return from({1}, {v}); }

    bool defined() const { return static_cast<bool>(n_); }
    const Dims& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(n_->value.size()); }
    dvec& data() { return n_->value; }
    const dvec& data() const { return n_->value; }
    double operator[](std::int64_t i) const { return n_->value[static_cast<std::size_t>(i)]; }
    double& at(std::int64_t i) { return n_->value[static_cast<std::size_t>(i)]; }
    double item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar " + dims_str(shape()));
        return n_->value[0];
    }

    Tensor& set_requires_grad(bool v = true) {
        n_->requires_grad = v;
        return *this;
    }
    bool requires_grad() const { return n_->requires_grad; }
    bool grad_path() const { return n_->requires_grad || n_->on_path; }

    dvec& grad() {
        if (n_->grad.empty()) n_->grad.assign(n_->value.size(), 0.0);
        return n_->grad;
    }
    const dvec& grad() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

    Node* node() const { return n_.get(); }
    const NodePtr& node_sp() const { return n_; }

    bool same_node(const Tensor& o) const { return n_ == o.n_; }

  private:
    NodePtr n_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
  public:
    struct Record {
        NodePtr out;
        std::vector<NodePtr> inputs;
        std::function<void(Tape&)> back;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(Record r) { recs_.push_back(std::move(r)); }
    std::size_t num_records() const { return recs_.size(); }

    // Adjoint of n, created zero-filled on first access.
    dvec& adj(const NodePtr& n) {
        auto it = adj_.find(n.get());
        if (it == adj_.end()) {
            it = adj_.emplace(n.get(), dvec(n->value.size(), 0.0)).first;
            owners_.push_back(n);
        }
        return it->second;
    }
    const dvec* find_adj(const Node* n) const {
        auto it = adj_.find(n);
        return it == adj_.end() ? nullptr : &it->second;
    }
    const dvec* grad_of(const Tensor& t) const { return find_adj(t.node()); }

    // Reverse sweep.  Visits each recorded op exactly once, newest first.
    // When write_node_grads is set, adjoints of requires_grad leaves are
    // accumulated into Node::grad (additive across calls).
    void backward(const Tensor& loss, bool write_node_grads = true) {
        if (loss.size() != 1) throw StateError("backward: loss must be a scalar, got " + dims_str(loss.shape()));
        if (!loss.grad_path()) throw StateError("backward: loss is not on the tape");
        adj(loss.node_sp())[0] += 1.0;
        for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) {
            if (find_adj(it->out.get()) != nullptr) it->back(*this);
        }
        if (write_node_grads) {
            for (const NodePtr& n : owners_) {
                if (!n->requires_grad) continue;
                const auto& a = adj_.at(n.get());
                if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
                for (std::size_t i = 0; i < a.size(); ++i) n->grad[i] += a[i];
            }
        }
    }

    void clear() {
        recs_.clear();
        adj_.clear();
        owners_.clear();
    }

    static Tape*& active() {
        static thread_local Tape* a = nullptr;
        return a;
    }

    struct Scope {
        explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
        ~Scope() { active() = prev_; }
        Scope(const Scope&) = delete;

      private:
        Tape* prev_;
    };

  private:
    std::vector<Record> recs_;
    std::unordered_map<const Node*, dvec> adj_;
    std::vector<NodePtr> owners_;  // keeps adjoint keys alive; iteration order = first touch
};

// Free-function form: backward on the active tape.
inline void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (t == nullptr) throw StateError("backward: no active tape");
    t->backward(loss);
}

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> ins) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : ins)
        if (t->grad_path()) return true;
    return false;
}

inline void mark_and_record(Tensor& out, std::vector<NodePtr> inputs, std::function<void(Tape&)> back) {
    out.node()->on_path = true;
    Tape::active()->record({out.node_sp(), std::move(inputs), std::move(back)});
}

inline bool wants(const NodePtr& n) { return n->requires_grad || n->on_path; }

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops.  Binary ops take equal shapes or broadcast a trailing
// vector over the rows of a 2-D grid.
// ---------------------------------------------------------------------------

namespace detail {

enum class Bcast { Same, TrailingVec };

inline Bcast binary_mode(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (a.ndim() == 2 && b.ndim() == 1 && a.dim(1) == b.dim(0)) return Bcast::TrailingVec;
    throw ShapeError(std::string(op) + ": incompatible shapes " + dims_str(a.shape()) + " vs " + dims_str(b.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto mode = detail::binary_mode(a, b, "add");
    Tensor out = Tensor::alloc(a.shape());
    const std::int64_t n = a.size(), cols = mode == detail::Bcast::Same ? n : b.size();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a[i] + b[i % cols];
    if (detail::should_record({&a, &b})) {
        auto an = a.node_sp(), bn = b.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {an, bn}, [an, bn, on, cols](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (detail::wants(an)) {
                auto& ga = t.adj(an);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (detail::wants(bn)) {
                auto& gb = t.adj(bn);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i % static_cast<std::size_t>(cols)] += go[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    const auto mode = detail::binary_mode(a, b, "sub");
    Tensor out = Tensor::alloc(a.shape());
    const std::int64_t n = a.size(), cols = mode == detail::Bcast::Same ? n : b.size();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a[i] - b[i % cols];
    if (detail::should_record({&a, &b})) {
        auto an = a.node_sp(), bn = b.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {an, bn}, [an, bn, on, cols](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (detail::wants(an)) {
                auto& ga = t.adj(an);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (detail::wants(bn)) {
                auto& gb = t.adj(bn);
                for (std::size_t i = 0; i < go.size(); ++i) gb[i % static_cast<std::size_t>(cols)] -= go[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const auto mode = detail::binary_mode(a, b, "mul");
    Tensor out = Tensor::alloc(a.shape());
    const std::int64_t n = a.size(), cols = mode == detail::Bcast::Same ? n : b.size();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a[i] * b[i % cols];
    if (detail::should_record({&a, &b})) {
        auto an = a.node_sp(), bn = b.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {an, bn}, [an, bn, on, cols](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (detail::wants(an)) {
                auto& ga = t.adj(an);
                for (std::size_t i = 0; i < go.size(); ++i)
                    ga[i] += go[i] * bn->value[i % static_cast<std::size_t>(cols)];
            }
            if (detail::wants(bn)) {
                auto& gb = t.adj(bn);
                for (std::size_t i = 0; i < go.size(); ++i)
                    gb[i % static_cast<std::size_t>(cols)] += go[i] * an->value[i];
            }
        });
    }
    return out;
}

// Broadcast a column vector v[m] over every column of a[m,n].
inline Tensor mul_colvec(const Tensor& a, const Tensor& v) {
    if (a.ndim() != 2 || v.ndim() != 1 || a.dim(0) != v.dim(0))
        throw ShapeError("mul_colvec: need [m,n] and [m], got " + dims_str(a.shape()) + " and " + dims_str(v.shape()));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::alloc(a.shape());
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out.at(static_cast<std::int64_t>(r) * n + c) = a[static_cast<std::int64_t>(r) * n + c] * v[r];
    if (detail::should_record({&a, &v})) {
        auto an = a.node_sp(), vn = v.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {an, vn}, [an, vn, on, m, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (detail::wants(an)) {
                auto& ga = t.adj(an);
                for (int r = 0; r < m; ++r)
                    for (int c = 0; c < n; ++c) ga[static_cast<std::size_t>(r) * n + c] += go[static_cast<std::size_t>(r) * n + c] * vn->value[static_cast<std::size_t>(r)];
            }
            if (detail::wants(vn)) {
                auto& gv = t.adj(vn);
                for (int r = 0; r < m; ++r) {
                    double s = 0.0;
                    for (int c = 0; c < n; ++c) s += go[static_cast<std::size_t>(r) * n + c] * an->value[static_cast<std::size_t>(r) * n + c];
                    gv[static_cast<std::size_t>(r)] += s;
                }
            }
        });
    }
    return out;
}

inline Tensor add_colvec(const Tensor& a, const Tensor& v) {
    if (a.ndim() != 2 || v.ndim() != 1 || a.dim(0) != v.dim(0))
        throw ShapeError("add_colvec: need [m,n] and [m], got " + dims_str(a.shape()) + " and " + dims_str(v.shape()));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::alloc(a.shape());
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out.at(static_cast<std::int64_t>(r) * n + c) = a[static_cast<std::int64_t>(r) * n + c] + v[r];
    if (detail::should_record({&a, &v})) {
        auto an = a.node_sp(), vn = v.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {an, vn}, [an, vn, on, m, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (detail::wants(an)) {
                auto& ga = t.adj(an);
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (detail::wants(vn)) {
                auto& gv = t.adj(vn);
                for (int r = 0; r < m; ++r) {
                    double s = 0.0;
                    for (int c = 0; c < n; ++c) s += go[static_cast<std::size_t>(r) * n + c];
                    gv[static_cast<std::size_t>(r)] += s;
                }
            }
        });
    }
    return out;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd dfdx_from_xy) {
    Tensor out = Tensor::alloc(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = fwd(x[i]);
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, dfdx_from_xy](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * dfdx_from_xy(xn->value[i], on->value[i]);
        });
    }
    return out;
}

inline double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double xi, double) { return xi > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return detail::sigmoid_stable(v); }, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh_act(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor scale(const Tensor& x, double c) {
    return detail::unary_op(
        x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

// Seeded Gaussian perturbation; gradient passes through unchanged.
inline Tensor add_noise(const Tensor& x, double sigma, Rng& rng) {
    Tensor out = Tensor::alloc(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = x[i] + sigma * rng.gaussian();
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Dims shape) {
    check_dims_valid(shape);
    if (numel(shape) != x.size())
        throw ShapeError("reshape: cannot view " + dims_str(x.shape()) + " as " + dims_str(shape));
    Tensor out = Tensor::alloc(std::move(shape));
    out.data() = x.data();
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

inline Tensor slice(const Tensor& x, int offset, int len) {
    if (x.ndim() != 1) throw ShapeError("slice: 1-D only, got " + dims_str(x.shape()));
    if (offset < 0 || len < 1 || offset + len > x.dim(0)) throw ShapeError("slice: range out of bounds");
    Tensor out = Tensor::alloc({len});
    for (int i = 0; i < len; ++i) out.at(i) = x[offset + i];
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, offset, len](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (int i = 0; i < len; ++i) gx[static_cast<std::size_t>(offset + i)] += go[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, int row0, int rows) {
    if (x.ndim() != 2) throw ShapeError("slice_rows: 2-D only, got " + dims_str(x.shape()));
    if (row0 < 0 || rows < 1 || row0 + rows > x.dim(0)) throw ShapeError("slice_rows: range out of bounds");
    const int n = x.dim(1);
    Tensor out = Tensor::alloc({rows, n});
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(row0) * n, static_cast<std::size_t>(rows) * n,
                out.data().begin());
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, row0, rows, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * n; ++i)
                gx[static_cast<std::size_t>(row0) * n + i] += go[i];
        });
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat: no parts");
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 1) throw ShapeError("concat: 1-D only");
        total += p.dim(0);
    }
    Tensor out = Tensor::alloc({total});
    int off = 0;
    bool any = false;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.dim(0);
        any = any || p.grad_path();
    }
    if (Tape::active() != nullptr && any) {
        std::vector<NodePtr> ins;
        ins.reserve(parts.size());
        for (const Tensor& p : parts) ins.push_back(p.node_sp());
        auto on = out.node_sp();
        detail::mark_and_record(out, ins, [ins, on](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            std::size_t off2 = 0;
            for (const NodePtr& p : ins) {
                if (detail::wants(p)) {
                    auto& gp = t.adj(p);
                    for (std::size_t i = 0; i < p->value.size(); ++i) gp[i] += go[off2 + i];
                }
                off2 += p->value.size();
            }
        });
    }
    return out;
}

// Stack equal-length 1-D tensors as the rows of a matrix.
inline Tensor concat_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ShapeError("concat_rows: no rows");
    const int n = rows[0].dim(0);
    for (const Tensor& r : rows)
        if (r.ndim() != 1 || r.dim(0) != n) throw ShapeError("concat_rows: rows must be equal-length vectors");
    Tensor out = Tensor::alloc({static_cast<int>(rows.size()), n});
    bool any = false;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy(rows[r].data().begin(), rows[r].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r) * n);
        any = any || rows[r].grad_path();
    }
    if (Tape::active() != nullptr && any) {
        std::vector<NodePtr> ins;
        ins.reserve(rows.size());
        for (const Tensor& r : rows) ins.push_back(r.node_sp());
        auto on = out.node_sp();
        detail::mark_and_record(out, ins, [ins, on, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            for (std::size_t r = 0; r < ins.size(); ++r) {
                if (!detail::wants(ins[r])) continue;
                auto& gr = t.adj(ins[r]);
                for (int i = 0; i < n; ++i) gr[static_cast<std::size_t>(i)] += go[r * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) s += x[i];
    Tensor out = Tensor::from({1}, {s});
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on](Tape& t) {
            const double go = (*t.find_adj(on.get()))[0];
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (double& g : gx) g += go;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

// Row-wise mean of a [m,n] matrix -> [m].
inline Tensor row_mean(const Tensor& x) {
    if (x.ndim() != 2) throw ShapeError("row_mean: 2-D only, got " + dims_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::alloc({m});
    for (int r = 0; r < m; ++r) {
        double s = 0.0;
        for (int c = 0; c < n; ++c) s += x[static_cast<std::int64_t>(r) * n + c];
        out.at(r) = s / n;
    }
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, m, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            const double inv = 1.0 / n;
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c) gx[static_cast<std::size_t>(r) * n + c] += go[static_cast<std::size_t>(r)] * inv;
        });
    }
    return out;
}

// Row-wise sum of a [m,n] matrix -> [m].
inline Tensor row_sum(const Tensor& x) {
    if (x.ndim() != 2) throw ShapeError("row_sum: 2-D only, got " + dims_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::alloc({m});
    for (int r = 0; r < m; ++r) {
        double s = 0.0;
        for (int c = 0; c < n; ++c) s += x[static_cast<std::int64_t>(r) * n + c];
        out.at(r) = s;
    }
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, m, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c) gx[static_cast<std::size_t>(r) * n + c] += go[static_cast<std::size_t>(r)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: need 2-D operands");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw ShapeError("matmul: inner dims differ, " + dims_str(a.shape()) + " vs " + dims_str(b.shape()));
    Tensor out = Tensor::alloc({m, n});
    {
        detail::MapC A(a.data().data(), m, k), B(b.data().data(), k, n);
        detail::MapM C(out.data().data(), m, n);
        C.noalias() = A * B;
    }
    if (detail::should_record({&a, &b})) {
        auto an = a.node_sp(), bn = b.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {an, bn}, [an, bn, on, m, k, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            detail::MapC G(go.data(), m, n);
            if (detail::wants(an)) {
                detail::MapC B(bn->value.data(), k, n);
                detail::MapM GA(t.adj(an).data(), m, k);
                GA.noalias() += G * B.transpose();
            }
            if (detail::wants(bn)) {
                detail::MapC A(an->value.data(), m, k);
                detail::MapM GB(t.adj(bn).data(), k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2) throw ShapeError("transpose: 2-D only");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::alloc({n, m});
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out.at(static_cast<std::int64_t>(c) * m + r) = x[static_cast<std::int64_t>(r) * n + c];
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, m, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c) gx[static_cast<std::size_t>(r) * n + c] += go[static_cast<std::size_t>(c) * m + r];
        });
    }
    return out;
}

// y = W x + b with W[m,n], x[n], b[m].
inline Tensor affine(const Tensor& W, const Tensor& x, const Tensor& b) {
    if (W.ndim() != 2 || x.ndim() != 1 || b.ndim() != 1)
        throw ShapeError("affine: need W[m,n], x[n], b[m]");
    const int m = W.dim(0), n = W.dim(1);
    if (x.dim(0) != n || b.dim(0) != m)
        throw ShapeError("affine: shapes " + dims_str(W.shape()) + ", " + dims_str(x.shape()) + ", " + dims_str(b.shape()));
    Tensor out = Tensor::alloc({m});
    {
        detail::MapC Wm(W.data().data(), m, n);
        Eigen::Map<const Eigen::VectorXd> xv(x.data().data(), n);
        Eigen::Map<Eigen::VectorXd> yv(out.data().data(), m);
        yv.noalias() = Wm * xv;
        for (int i = 0; i < m; ++i) out.at(i) += b[i];
    }
    if (detail::should_record({&W, &x, &b})) {
        auto Wn = W.node_sp(), xn = x.node_sp(), bn = b.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {Wn, xn, bn}, [Wn, xn, bn, on, m, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            Eigen::Map<const Eigen::VectorXd> g(go.data(), m);
            if (detail::wants(Wn)) {
                detail::MapM GW(t.adj(Wn).data(), m, n);
                Eigen::Map<const Eigen::VectorXd> xv(xn->value.data(), n);
                GW.noalias() += g * xv.transpose();
            }
            if (detail::wants(xn)) {
                detail::MapC Wm(Wn->value.data(), m, n);
                Eigen::Map<Eigen::VectorXd> gx(t.adj(xn).data(), n);
                gx.noalias() += Wm.transpose() * g;
            }
            if (detail::wants(bn)) {
                auto& gb = t.adj(bn);
                for (int i = 0; i < m; ++i) gb[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

// y = W x with W[m,n], x[n].
inline Tensor matmul_vec(const Tensor& W, const Tensor& x) {
    if (W.ndim() != 2 || x.ndim() != 1 || W.dim(1) != x.dim(0))
        throw ShapeError("matmul_vec: shapes " + dims_str(W.shape()) + " and " + dims_str(x.shape()));
    const int m = W.dim(0), n = W.dim(1);
    Tensor out = Tensor::alloc({m});
    {
        detail::MapC Wm(W.data().data(), m, n);
        Eigen::Map<const Eigen::VectorXd> xv(x.data().data(), n);
        Eigen::Map<Eigen::VectorXd> yv(out.data().data(), m);
        yv.noalias() = Wm * xv;
    }
    if (detail::should_record({&W, &x})) {
        auto Wn = W.node_sp(), xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {Wn, xn}, [Wn, xn, on, m, n](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            Eigen::Map<const Eigen::VectorXd> g(go.data(), m);
            if (detail::wants(Wn)) {
                detail::MapM GW(t.adj(Wn).data(), m, n);
                Eigen::Map<const Eigen::VectorXd> xv(xn->value.data(), n);
                GW.noalias() += g * xv.transpose();
            }
            if (detail::wants(xn)) {
                detail::MapC Wm(Wn->value.data(), m, n);
                Eigen::Map<Eigen::VectorXd> gx(t.adj(xn).data(), n);
                gx.noalias() += Wm.transpose() * g;
            }
        });
    }
    return out;
}

// Adaptive average pooling of a flattened square grid x[g*g] down (or up) to
// out_g*out_g, with the usual floor/ceil window rule.  Lets fixed-size heads
// consume attention maps from inputs of any resolution.
inline Tensor adaptive_avg_grid(const Tensor& x, int out_g) {
    if (x.ndim() != 1) throw ShapeError("adaptive_avg_grid: 1-D flattened grid expected");
    const int n = x.dim(0);
    const int g = static_cast<int>(std::llround(std::sqrt(static_cast<double>(n))));
    if (g * g != n) throw ShapeError("adaptive_avg_grid: length is not a perfect square");
    if (out_g < 1) throw ConfigError("adaptive_avg_grid: bad output size");
    if (g == out_g) {
        // identity fast path keeps gradients exact
        Tensor out = Tensor::alloc({n});
        out.data() = x.data();
        if (detail::should_record({&x})) {
            auto xn = x.node_sp(), on = out.node_sp();
            detail::mark_and_record(out, {xn}, [xn, on](Tape& t) {
                const auto& go = *t.find_adj(on.get());
                if (!detail::wants(xn)) return;
                auto& gx = t.adj(xn);
                for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            });
        }
        return out;
    }
    const auto lo = [](int i, int gg, int og) { return (i * gg) / og; };
    const auto hi = [](int i, int gg, int og) { return ((i + 1) * gg + og - 1) / og; };
    Tensor out = Tensor::alloc({out_g * out_g});
    for (int oy = 0; oy < out_g; ++oy)
        for (int ox = 0; ox < out_g; ++ox) {
            double s = 0.0;
            int count = 0;
            for (int y = lo(oy, g, out_g); y < hi(oy, g, out_g); ++y)
                for (int xx = lo(ox, g, out_g); xx < hi(ox, g, out_g); ++xx) {
                    s += x[static_cast<std::int64_t>(y) * g + xx];
                    ++count;
                }
            out.at(static_cast<std::int64_t>(oy) * out_g + ox) = s / count;
        }
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, g, out_g, lo, hi](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (int oy = 0; oy < out_g; ++oy)
                for (int ox = 0; ox < out_g; ++ox) {
                    const int y0 = lo(oy, g, out_g), y1 = hi(oy, g, out_g);
                    const int x0 = lo(ox, g, out_g), x1 = hi(ox, g, out_g);
                    const int count = (y1 - y0) * (x1 - x0);
                    const double gshare = go[static_cast<std::size_t>(oy) * out_g + ox] / count;
                    for (int y = y0; y < y1; ++y)
                        for (int xx = x0; xx < x1; ++xx) gx[static_cast<std::size_t>(y) * g + xx] += gshare;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const dvec& x, int ci, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, dvec& cols) {
    const int ckk = ci * kh * kw;
    cols.assign(static_cast<std::size_t>(ckk) * ho * wo, 0.0);
    for (int c = 0; c < ci; ++c)
        for (int di = 0; di < kh; ++di)
            for (int dj = 0; dj < kw; ++dj) {
                const std::size_t row = (static_cast<std::size_t>(c) * kh + di) * kw + dj;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + di - pad;
                    if (iy < 0 || iy >= h) continue;
                    const std::size_t xbase = (static_cast<std::size_t>(c) * h + iy) * w;
                    const std::size_t obase = row * static_cast<std::size_t>(ho) * wo + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + dj - pad;
                        if (ix < 0 || ix >= w) continue;
                        cols[obase + static_cast<std::size_t>(ox)] = x[xbase + static_cast<std::size_t>(ix)];
                    }
                }
            }
}

inline void col2im_acc(const dvec& cols, int ci, int h, int w, int kh, int kw, int stride, int pad,
                       int ho, int wo, dvec& gx) {
    for (int c = 0; c < ci; ++c)
        for (int di = 0; di < kh; ++di)
            for (int dj = 0; dj < kw; ++dj) {
                const std::size_t row = (static_cast<std::size_t>(c) * kh + di) * kw + dj;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + di - pad;
                    if (iy < 0 || iy >= h) continue;
                    const std::size_t xbase = (static_cast<std::size_t>(c) * h + iy) * w;
                    const std::size_t obase = row * static_cast<std::size_t>(ho) * wo + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + dj - pad;
                        if (ix < 0 || ix >= w) continue;
                        gx[xbase + static_cast<std::size_t>(ix)] += cols[obase + static_cast<std::size_t>(ox)];
                    }
                }
            }
}

}  // namespace detail

// Cross-correlation over x[Ci,H,W] with kernels[Co,Ci,kh,kw] and bias[Co].
inline Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, int stride = 1, int pad = 0) {
    if (x.ndim() != 3 || kernels.ndim() != 4 || bias.ndim() != 1) throw ShapeError("conv2d: need x[Ci,H,W], k[Co,Ci,kh,kw], b[Co]");
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int co = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    if (kernels.dim(1) != ci) throw ShapeError("conv2d: input channels mismatch");
    if (bias.dim(0) != co) throw ShapeError("conv2d: bias length mismatch");
    if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel dims must be odd");
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/padding");
    if ((h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0)
        throw ConfigError("conv2d: output size not integral");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w + 2 * pad - kw) / stride + 1;
    const int ckk = ci * kh * kw;

    auto cols = std::make_shared<dvec>();
    detail::im2col(x.data(), ci, h, w, kh, kw, stride, pad, ho, wo, *cols);

    Tensor out = Tensor::alloc({co, ho, wo});
    {
        detail::MapC K(kernels.data().data(), co, ckk);
        detail::MapC C(cols->data(), ckk, ho * wo);
        detail::MapM Y(out.data().data(), co, ho * wo);
        Y.noalias() = K * C;
        for (int o = 0; o < co; ++o) {
            double* row = out.data().data() + static_cast<std::ptrdiff_t>(o) * ho * wo;
            const double b = bias[o];
            for (int i = 0; i < ho * wo; ++i) row[i] += b;
        }
    }
    if (detail::should_record({&x, &kernels, &bias})) {
        auto xn = x.node_sp(), kn = kernels.node_sp(), bn = bias.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn, kn, bn},
                                [xn, kn, bn, on, cols, ci, h, w, co, kh, kw, stride, pad, ho, wo, ckk](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            detail::MapC G(go.data(), co, ho * wo);
            if (detail::wants(kn)) {
                detail::MapC C(cols->data(), ckk, ho * wo);
                detail::MapM GK(t.adj(kn).data(), co, ckk);
                GK.noalias() += G * C.transpose();
            }
            if (detail::wants(bn)) {
                auto& gb = t.adj(bn);
                for (int o = 0; o < co; ++o) {
                    double s = 0.0;
                    const double* row = go.data() + static_cast<std::ptrdiff_t>(o) * ho * wo;
                    for (int i = 0; i < ho * wo; ++i) s += row[i];
                    gb[static_cast<std::size_t>(o)] += s;
                }
            }
            if (detail::wants(xn)) {
                dvec gcols(static_cast<std::size_t>(ckk) * ho * wo);
                detail::MapC K(kn->value.data(), co, ckk);
                detail::MapM GC(gcols.data(), ckk, ho * wo);
                GC.noalias() = K.transpose() * G;
                detail::col2im_acc(gcols, ci, h, w, kh, kw, stride, pad, ho, wo, t.adj(xn));
            }
        });
    }
    return out;
}

// Max pool over x[C,H,W].  Gradient routes to the argmax; ties break to the
// lowest flat index.
inline Tensor maxpool2d(const Tensor& x, int win, int stride) {
    if (x.ndim() != 3) throw ShapeError("maxpool2d: need [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (win < 1 || stride < 1) throw ConfigError("maxpool2d: bad window/stride");
    if ((h - win) % stride != 0 || (w - win) % stride != 0) throw ConfigError("maxpool2d: window does not tile input");
    const int ho = (h - win) / stride + 1, wo = (w - win) / stride + 1;
    Tensor out = Tensor::alloc({c, ho, wo});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(c) * ho * wo);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::int64_t besti = -1;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx) {
                        const std::int64_t i = (static_cast<std::int64_t>(ch) * h + oy * stride + dy) * w + ox * stride + dx;
                        if (x[i] > best) {
                            best = x[i];
                            besti = i;
                        }
                    }
                const std::size_t oi = (static_cast<std::size_t>(ch) * ho + oy) * wo + ox;
                out.at(static_cast<std::int64_t>(oi)) = best;
                (*argmax)[oi] = besti;
            }
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, argmax](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (std::size_t i = 0; i < go.size(); ++i) gx[static_cast<std::size_t>((*argmax)[i])] += go[i];
        });
    }
    return out;
}

inline Tensor avgpool2d(const Tensor& x, int win, int stride) {
    if (x.ndim() != 3) throw ShapeError("avgpool2d: need [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (win < 1 || stride < 1) throw ConfigError("avgpool2d: bad window/stride");
    if ((h - win) % stride != 0 || (w - win) % stride != 0) throw ConfigError("avgpool2d: window does not tile input");
    const int ho = (h - win) / stride + 1, wo = (w - win) / stride + 1;
    const double inv = 1.0 / (static_cast<double>(win) * win);
    Tensor out = Tensor::alloc({c, ho, wo});
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double s = 0.0;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx)
                        s += x[(static_cast<std::int64_t>(ch) * h + oy * stride + dy) * w + ox * stride + dx];
                out.at((static_cast<std::int64_t>(ch) * ho + oy) * wo + ox) = s * inv;
            }
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {xn}, [xn, on, c, h, w, ho, wo, win, stride, inv](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        const double g = go[(static_cast<std::size_t>(ch) * ho + oy) * wo + ox] * inv;
                        for (int dy = 0; dy < win; ++dy)
                            for (int dx = 0; dx < win; ++dx)
                                gx[(static_cast<std::size_t>(ch) * h + oy * stride + dy) * w + ox * stride + dx] += g;
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax and losses
// ---------------------------------------------------------------------------

// Softmax along `axis` of a 1-D or 2-D tensor, max-subtraction stabilized.
inline Tensor softmax(const Tensor& x, int axis = -1) {
    const int nd = x.ndim();
    if (nd == 1) axis = 0;
    if (axis < 0) axis += nd;
    if (nd > 2 || axis < 0 || axis >= nd) throw ShapeError("softmax: 1-D/2-D only, bad axis");
    for (std::int64_t i = 0; i < x.size(); ++i)
        if (std::isnan(x[i])) throw NumericError("softmax: NaN input");

    const int rows = nd == 1 ? 1 : x.dim(0);
    const int cols = nd == 1 ? x.dim(0) : x.dim(1);
    Tensor out = Tensor::alloc(x.shape());
    auto apply_slice = [&](int count, auto idx) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < count; ++i) mx = std::max(mx, x[idx(i)]);
        double z = 0.0;
        for (int i = 0; i < count; ++i) z += std::exp(x[idx(i)] - mx);
        for (int i = 0; i < count; ++i) out.at(idx(i)) = std::exp(x[idx(i)] - mx) / z;
    };
    if (nd == 1 || axis == 1) {
        for (int r = 0; r < rows; ++r)
            apply_slice(cols, [&](int i) { return static_cast<std::int64_t>(r) * cols + i; });
    } else {
        for (int c = 0; c < cols; ++c)
            apply_slice(rows, [&](int i) { return static_cast<std::int64_t>(i) * cols + c; });
    }
    if (detail::should_record({&x})) {
        auto xn = x.node_sp(), on = out.node_sp();
        const bool along_cols = (nd == 1 || axis == 1);
        detail::mark_and_record(out, {xn}, [xn, on, rows, cols, along_cols](Tape& t) {
            const auto& go = *t.find_adj(on.get());
            if (!detail::wants(xn)) return;
            auto& gx = t.adj(xn);
            auto run = [&](int count, auto idx) {
                double dot = 0.0;
                for (int i = 0; i < count; ++i) dot += go[static_cast<std::size_t>(idx(i))] * on->value[static_cast<std::size_t>(idx(i))];
                for (int i = 0; i < count; ++i) {
                    const std::size_t k = static_cast<std::size_t>(idx(i));
                    gx[k] += on->value[k] * (go[k] - dot);
                }
            };
            if (along_cols) {
                for (int r = 0; r < rows; ++r)
                    run(cols, [&](int i) { return static_cast<std::int64_t>(r) * cols + i; });
            } else {
                for (int c = 0; c < cols; ++c)
                    run(rows, [&](int i) { return static_cast<std::int64_t>(i) * cols + c; });
            }
        });
    }
    return out;
}

// Mean binary cross-entropy from logits.  logits[B], targets in {0,1}.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 1 || logits.dim(0) != static_cast<int>(targets.size()))
        throw ShapeError("bce_with_logits: logits/targets length mismatch");
    for (int y : targets)
        if (y != 0 && y != 1) throw ValueError("bce_with_logits: target must be 0 or 1");
    const int b = logits.dim(0);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const double z = logits[i];
        // softplus(z) - z*y, stabilized
        total += std::max(z, 0.0) - z * targets[static_cast<std::size_t>(i)] + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out = Tensor::from({1}, {total / b});
    if (detail::should_record({&logits})) {
        auto ln = logits.node_sp(), on = out.node_sp();
        auto tgt = targets;
        detail::mark_and_record(out, {ln}, [ln, on, tgt, b](Tape& t) {
            const double go = (*t.find_adj(on.get()))[0];
            if (!detail::wants(ln)) return;
            auto& gl = t.adj(ln);
            for (int i = 0; i < b; ++i)
                gl[static_cast<std::size_t>(i)] += go * (detail::sigmoid_stable(ln->value[static_cast<std::size_t>(i)]) - tgt[static_cast<std::size_t>(i)]) / b;
        });
    }
    return out;
}

inline Tensor bce_with_logits(const Tensor& logit, int target) { return bce_with_logits(logit, std::vector<int>{target}); }

// Cross-entropy from a single logit row [k] against a class index.
inline Tensor cross_entropy(const Tensor& logits, int target) {
    if (logits.ndim() != 1) throw ShapeError("cross_entropy: need 1-D logits");
    const int k = logits.dim(0);
    if (target < 0 || target >= k) throw ValueError("cross_entropy: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) mx = std::max(mx, logits[i]);
    double z = 0.0;
    for (int i = 0; i < k; ++i) z += std::exp(logits[i] - mx);
    const double lse = mx + std::log(z);
    Tensor out = Tensor::from({1}, {lse - logits[target]});
    if (detail::should_record({&logits})) {
        auto ln = logits.node_sp(), on = out.node_sp();
        detail::mark_and_record(out, {ln}, [ln, on, k, target, mx](Tape& t) {
            const double go = (*t.find_adj(on.get()))[0];
            if (!detail::wants(ln)) return;
            auto& gl = t.adj(ln);
            double z2 = 0.0;
            for (int i = 0; i < k; ++i) z2 += std::exp(ln->value[static_cast<std::size_t>(i)] - mx);
            for (int i = 0; i < k; ++i) {
                const double p = std::exp(ln->value[static_cast<std::size_t>(i)] - mx) / z2;
                gl[static_cast<std::size_t>(i)] += go * (p - (i == target ? 1.0 : 0.0));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamState {
    AdamConfig cfg;
    std::int64_t step = 0;
    std::vector<dvec> m, v;  // per parameter tensor

    void init(const std::vector<Tensor>& params) {
        m.clear();
        v.clear();
        for (const Tensor& p : params) {
            m.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
            v.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
        }
        step = 0;
    }
    bool initialized_for(const std::vector<Tensor>& params) const {
        if (m.size() != params.size()) return false;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i].size() != static_cast<std::size_t>(params[i].size())) return false;
        return true;
    }
};

namespace detail {

inline void adam_update_one(dvec& theta, const double* g, dvec& m,
                            dvec& v, const AdamConfig& c, double bc1, double bc2) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        theta[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps) + c.lr * c.weight_decay * theta[i];
    }
}

}  // namespace detail

// Updates params from their Node::grad buffers.
inline void adam_step(std::vector<Tensor>& params, AdamState& st) {
    if (!st.initialized_for(params)) throw StateError("adam_step: state not initialized for these parameters");
    for (const Tensor& p : params)
        if (!p.has_grad()) throw StateError("adam_step: parameter missing gradient");
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i)
        detail::adam_update_one(params[i].data(), params[i].grad().data(), st.m[i], st.v[i], st.cfg, bc1, bc2);
}

// Updates params from a flat gradient laid out in registry order.
inline void adam_step_flat(std::vector<Tensor>& params, const std::vector<double>& flat, AdamState& st,
                           const std::vector<bool>* frozen = nullptr) {
    if (!st.initialized_for(params)) throw StateError("adam_step_flat: state not initialized");
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
    std::size_t off = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::size_t n = static_cast<std::size_t>(params[i].size());
        if (off + n > flat.size()) throw StateError("adam_step_flat: gradient buffer too short");
        if (frozen == nullptr || !(*frozen)[i])
            detail::adam_update_one(params[i].data(), flat.data() + off, st.m[i], st.v[i], st.cfg, bc1, bc2);
        off += n;
    }
}

// ---------------------------------------------------------------------------
// Gradient checking.  Central differences against reverse-mode adjoints.
// ---------------------------------------------------------------------------

struct GradProbe {
    Tensor t;
    std::int64_t idx;
};

// loss_fn must be a deterministic function of the probe tensors' current
// values; it is re-evaluated with no tape for the finite-difference side.
inline double gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<GradProbe>& probes,
                        double h = 1e-5) {
    std::vector<double> analytic(probes.size(), 0.0);
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = loss_fn();
        tape.backward(loss, false);
        for (std::size_t i = 0; i < probes.size(); ++i) {
            const auto* a = tape.grad_of(probes[i].t);
            analytic[i] = a == nullptr ? 0.0 : (*a)[static_cast<std::size_t>(probes[i].idx)];
        }
    }
    double max_rel = 0.0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        Tensor t = probes[i].t;
        const std::int64_t k = probes[i].idx;
        const double saved = t[k];
        t.at(k) = saved + h;
        const double fp = loss_fn().item();
        t.at(k) = saved - h;
        const double fm = loss_fn().item();
        t.at(k) = saved;
        const double num = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic[i] - num) / std::max({std::abs(analytic[i]), std::abs(num), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace mareo
