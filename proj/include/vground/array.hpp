#pragma once

// Dense row-major arrays with reverse-mode differentiation.
//
// Arrays are immutable values once they have entered an op; gradients are
// tracked by a Tape that records one backward closure per executed op and
// replays them in exact reverse execution order. Ops run untaped (forward
// only) unless a Tape is active on the current thread, so inference pays no
// autograd cost. Independent tapes may live on independent threads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vground/errors.hpp"

namespace vground {

template <typename Real>
class Tape;

namespace detail {

template <typename Real>
Tape<Real>*& active_tape_slot() {
    static thread_local Tape<Real>* slot = nullptr;
    return slot;
}

// Debug hook: scales the named op's backward contribution so a deliberately
// corrupted rule fails the finite-difference suite (negative control).
std::string& corrupt_op_slot();

inline double backward_scale_for(std::string_view op) {
    const std::string& target = corrupt_op_slot();
    return (!target.empty() && target == op) ? 1.01 : 1.0;
}

}  // namespace detail

void set_backward_corruption(std::string_view op_name);
void clear_backward_corruption();

inline int shape_product(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= d;
    }
    return n;
}

template <typename Real>
class Array {
  public:
    Array() : shape_{0}, data_(std::make_shared<std::vector<Real>>()) {}

    explicit Array(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<Real>>(static_cast<std::size_t>(shape_product(shape_)), Real(0))) {}

    Array(std::vector<int> shape, std::vector<Real> data)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<Real>>(std::move(data))) {
        if (static_cast<int>(data_->size()) != shape_product(shape_))
            throw ShapeError("data length does not match shape product");
    }

    static Array scalar(Real v) { return Array({1}, {v}); }

    static Array full(std::vector<int> shape, Real v) {
        Array out(std::move(shape));
        std::fill(out.data_->begin(), out.data_->end(), v);
        return out;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int size() const { return static_cast<int>(data_->size()); }

    std::span<const Real> data() const { return {data_->data(), data_->size()}; }

    // Only valid before the array participates in any op (initialization,
    // optimizer updates between tapes).
    std::span<Real> mutable_data() { return {data_->data(), data_->size()}; }

    Real item() const {
        if (size() != 1) throw ContractError("item() requires a single-element array");
        return (*data_)[0];
    }

    Real at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    Real at(int i, int j) const {
        return (*data_)[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_.back()) +
                        static_cast<std::size_t>(j)];
    }

    bool requires_grad() const { return requires_grad_; }
    Array& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    // Identity key for gradient bookkeeping; aliases (reshape) share it.
    const void* key() const { return static_cast<const void*>(data_.get()); }

    Array reshaped(std::vector<int> new_shape) const {
        if (shape_product(new_shape) != size()) throw ShapeError("reshape changes element count");
        Array out = *this;
        out.shape_ = std::move(new_shape);
        return out;
    }

    bool all_finite() const {
        for (Real v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

  private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<Real>> data_;
    bool requires_grad_ = false;
};

template <typename Real>
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Runs all recorded closures in reverse execution order, seeding
    // d(loss)/d(loss) = 1. The loss must be a single element.
    void backward(const Array<Real>& loss) {
        if (loss.size() != 1) throw ContractError("backward() requires a scalar loss");
        grad_buffer(loss)[0] += Real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

    Array<Real> grad(const Array<Real>& a) const {
        Array<Real> g(a.shape());
        auto it = grads_.find(a.key());
        if (it != grads_.end()) std::copy(it->second.begin(), it->second.end(), g.mutable_data().begin());
        return g;
    }

    // -- op support ----------------------------------------------------

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    std::vector<Real>& grad_buffer(const Array<Real>& a) {
        auto [it, inserted] = grads_.try_emplace(a.key());
        if (inserted) it->second.assign(static_cast<std::size_t>(a.size()), Real(0));
        return it->second;
    }

    const std::vector<Real>* find_grad(const Array<Real>& a) const {
        auto it = grads_.find(a.key());
        return it == grads_.end() ? nullptr : &it->second;
    }

    void accumulate(const Array<Real>& a, std::span<const Real> values, Real scale) {
        auto& buf = grad_buffer(a);
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += scale * values[i];
    }

  private:
    std::vector<std::function<void()>> nodes_;
    std::unordered_map<const void*, std::vector<Real>> grads_;
};

// RAII activation of a tape on the current thread.
template <typename Real>
class TapeScope {
  public:
    explicit TapeScope(Tape<Real>& tape) : previous_(detail::active_tape_slot<Real>()) {
        detail::active_tape_slot<Real>() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot<Real>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape<Real>* previous_;
};

template <typename Real>
Tape<Real>* active_tape() {
    return detail::active_tape_slot<Real>();
}

namespace detail {

template <typename Real>
bool tracked(const Array<Real>& a) {
    return active_tape<Real>() != nullptr && a.requires_grad();
}

template <typename Real, typename BackwardFn>
void tape_op(std::string_view op, Array<Real>& out, bool any_tracked, BackwardFn&& fn) {
    Tape<Real>* tape = active_tape<Real>();
    if (tape == nullptr || !any_tracked) return;
    out.set_requires_grad(true);
    const Real scale = static_cast<Real>(backward_scale_for(op));
    tape->record([tape, out, scale, fn = std::forward<BackwardFn>(fn)]() {
        const std::vector<Real>* go = tape->find_grad(out);
        if (go == nullptr) return;
        fn(*tape, *go, scale);
    });
}

inline void check_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch");
}

// C[m x n] (+)= A[m x k] * B[k x n]; transposition applies to the logical
// operand, storage stays row-major with the given leading sizes.
template <typename Real>
void raw_matmul(const Real* a, const Real* b, Real* c, int m, int k, int n, bool trans_a, bool trans_b,
                bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * static_cast<std::size_t>(n), Real(0));
    if (!trans_a && !trans_b) {
        for (int i = 0; i < m; ++i) {
            const Real* arow = a + static_cast<std::size_t>(i) * static_cast<std::size_t>(k);
            Real* crow = c + static_cast<std::size_t>(i) * static_cast<std::size_t>(n);
            for (int p = 0; p < k; ++p) {
                const Real av = arow[p];
                const Real* brow = b + static_cast<std::size_t>(p) * static_cast<std::size_t>(n);
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // A[m x k] * B^T with B stored [n x k]
        for (int i = 0; i < m; ++i) {
            const Real* arow = a + static_cast<std::size_t>(i) * static_cast<std::size_t>(k);
            Real* crow = c + static_cast<std::size_t>(i) * static_cast<std::size_t>(n);
            for (int j = 0; j < n; ++j) {
                const Real* brow = b + static_cast<std::size_t>(j) * static_cast<std::size_t>(k);
                Real acc = 0;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        // A^T with A stored [k x m]
        for (int p = 0; p < k; ++p) {
            const Real* arow = a + static_cast<std::size_t>(p) * static_cast<std::size_t>(m);
            const Real* brow = b + static_cast<std::size_t>(p) * static_cast<std::size_t>(n);
            for (int i = 0; i < m; ++i) {
                const Real av = arow[i];
                Real* crow = c + static_cast<std::size_t>(i) * static_cast<std::size_t>(n);
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                Real acc = 0;
                for (int p = 0; p < k; ++p)
                    acc += a[static_cast<std::size_t>(p) * static_cast<std::size_t>(m) + static_cast<std::size_t>(i)] *
                           b[static_cast<std::size_t>(j) * static_cast<std::size_t>(k) + static_cast<std::size_t>(p)];
                c[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)] += acc;
            }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename Real>
Array<Real> add(const Array<Real>& a, const Array<Real>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "add");
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + pb[i];
    detail::tape_op<Real>("add", out, a.requires_grad() || b.requires_grad(),
                          [a, b](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              if (a.requires_grad()) t.accumulate(a, go, s);
                              if (b.requires_grad()) t.accumulate(b, go, s);
                          });
    return out;
}

template <typename Real>
Array<Real> sub(const Array<Real>& a, const Array<Real>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "sub");
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] - pb[i];
    detail::tape_op<Real>("sub", out, a.requires_grad() || b.requires_grad(),
                          [a, b](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              if (a.requires_grad()) t.accumulate(a, go, s);
                              if (b.requires_grad()) {
                                  std::vector<Real> gb(go.size());
                                  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -go[i];
                                  t.accumulate(b, gb, s);
                              }
                          });
    return out;
}

template <typename Real>
Array<Real> mul(const Array<Real>& a, const Array<Real>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "mul");
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * pb[i];
    detail::tape_op<Real>("mul", out, a.requires_grad() || b.requires_grad(),
                          [a, b](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              if (a.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  auto pb2 = b.data();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] = go[i] * pb2[i];
                                  t.accumulate(a, g, s);
                              }
                              if (b.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  auto pa2 = a.data();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] = go[i] * pa2[i];
                                  t.accumulate(b, g, s);
                              }
                          });
    return out;
}

template <typename Real>
Array<Real> divide(const Array<Real>& a, const Array<Real>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "divide");
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] / pb[i];
    detail::tape_op<Real>("divide", out, a.requires_grad() || b.requires_grad(),
                          [a, b](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              auto pa2 = a.data();
                              auto pb2 = b.data();
                              if (a.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] = go[i] / pb2[i];
                                  t.accumulate(a, g, s);
                              }
                              if (b.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] = -go[i] * pa2[i] / (pb2[i] * pb2[i]);
                                  t.accumulate(b, g, s);
                              }
                          });
    return out;
}

template <typename Real>
Array<Real> scale(const Array<Real>& a, Real c) {
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * c;
    detail::tape_op<Real>("scale", out, a.requires_grad(),
                          [a, c](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              std::vector<Real> g(go.size());
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] = go[i] * c;
                              t.accumulate(a, g, s);
                          });
    return out;
}

template <typename Real>
Array<Real> add_scalar(const Array<Real>& a, Real c) {
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + c;
    detail::tape_op<Real>("add_scalar", out, a.requires_grad(),
                          [a](Tape<Real>& t, const std::vector<Real>& go, Real s) { t.accumulate(a, go, s); });
    return out;
}

// [m x n] plus a length-n bias row added to every row.
template <typename Real>
Array<Real> add_rowvec(const Array<Real>& a, const Array<Real>& row) {
    if (a.rank() != 2 || row.rank() != 1 || row.dim(0) != a.dim(1))
        throw ShapeError("add_rowvec: need [m x n] and [n]");
    const int m = a.dim(0), n = a.dim(1);
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    auto pr = row.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j);
            o[idx] = pa[idx] + pr[static_cast<std::size_t>(j)];
        }
    detail::tape_op<Real>("add_rowvec", out, a.requires_grad() || row.requires_grad(),
                          [a, row, m, n](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              if (a.requires_grad()) t.accumulate(a, go, s);
                              if (row.requires_grad()) {
                                  std::vector<Real> g(static_cast<std::size_t>(n), Real(0));
                                  for (int i = 0; i < m; ++i)
                                      for (int j = 0; j < n; ++j)
                                          g[static_cast<std::size_t>(j)] +=
                                              go[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) +
                                                 static_cast<std::size_t>(j)];
                                  t.accumulate(row, g, s);
                              }
                          });
    return out;
}

namespace detail {

template <typename Real, typename Fwd, typename Dfn>
Array<Real> unary_op(std::string_view name, const Array<Real>& a, Fwd fwd, Dfn dfn) {
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(pa[i]);
    detail::tape_op<Real>(name, out, a.requires_grad(),
                          [a, out, dfn](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              std::vector<Real> g(go.size());
                              auto pa2 = a.data();
                              auto po = out.data();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] = go[i] * dfn(pa2[i], po[i]);
                              t.accumulate(a, g, s);
                          });
    return out;
}

}  // namespace detail

template <typename Real>
Array<Real> exp_op(const Array<Real>& a) {
    return detail::unary_op<Real>(
        "exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <typename Real>
Array<Real> log_op(const Array<Real>& a) {
    return detail::unary_op<Real>(
        "log", a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

template <typename Real>
Array<Real> sqrt_op(const Array<Real>& a) {
    return detail::unary_op<Real>(
        "sqrt", a, [](Real x) { return std::sqrt(x); }, [](Real, Real y) { return Real(0.5) / y; });
}

template <typename Real>
Array<Real> abs_op(const Array<Real>& a) {
    return detail::unary_op<Real>(
        "abs", a, [](Real x) { return std::abs(x); },
        [](Real x, Real) { return x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0)); });
}

template <typename Real>
Array<Real> sigmoid(const Array<Real>& a) {
    return detail::unary_op<Real>(
        "sigmoid", a,
        [](Real x) {
            if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
            const Real e = std::exp(x);
            return e / (Real(1) + e);
        },
        [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Array<Real> relu(const Array<Real>& a) {
    return detail::unary_op<Real>(
        "relu", a, [](Real x) { return x > Real(0) ? x : Real(0); },
        [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); });
}

// Saturated regions pass no gradient.
template <typename Real>
Array<Real> clamp(const Array<Real>& a, Real lo, Real hi) {
    return detail::unary_op<Real>(
        "clamp", a, [lo, hi](Real x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](Real x, Real) { return (x > lo && x < hi) ? Real(1) : Real(0); });
}

template <typename Real>
Array<Real> maximum(const Array<Real>& a, const Array<Real>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "maximum");
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(pa[i], pb[i]);
    detail::tape_op<Real>("maximum", out, a.requires_grad() || b.requires_grad(),
                          [a, b](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              auto pa2 = a.data();
                              auto pb2 = b.data();
                              if (a.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] = pa2[i] >= pb2[i] ? go[i] : Real(0);
                                  t.accumulate(a, g, s);
                              }
                              if (b.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] = pb2[i] > pa2[i] ? go[i] : Real(0);
                                  t.accumulate(b, g, s);
                              }
                          });
    return out;
}

template <typename Real>
Array<Real> minimum(const Array<Real>& a, const Array<Real>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "minimum");
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::min(pa[i], pb[i]);
    detail::tape_op<Real>("minimum", out, a.requires_grad() || b.requires_grad(),
                          [a, b](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              auto pa2 = a.data();
                              auto pb2 = b.data();
                              if (a.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] = pa2[i] <= pb2[i] ? go[i] : Real(0);
                                  t.accumulate(a, g, s);
                              }
                              if (b.requires_grad()) {
                                  std::vector<Real> g(go.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] = pb2[i] < pa2[i] ? go[i] : Real(0);
                                  t.accumulate(b, g, s);
                              }
                          });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename Real>
Array<Real> sum(const Array<Real>& a) {
    Real acc = 0;
    for (Real v : a.data()) acc += v;
    Array<Real> out = Array<Real>::scalar(acc);
    detail::tape_op<Real>("sum", out, a.requires_grad(),
                          [a](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              std::vector<Real> g(static_cast<std::size_t>(a.size()), go[0]);
                              t.accumulate(a, g, s);
                          });
    return out;
}

template <typename Real>
Array<Real> mean(const Array<Real>& a) {
    if (a.size() == 0) throw ShapeError("mean of empty array");
    return scale(sum(a), Real(1) / static_cast<Real>(a.size()));
}

// ---------------------------------------------------------------------------
// Structure ops (2-D)
// ---------------------------------------------------------------------------

template <typename Real>
Array<Real> matmul(const Array<Real>& a, const Array<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 arrays");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw ShapeError("matmul inner dimensions disagree");
    Array<Real> out({m, n});
    detail::raw_matmul(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n, false, false, false);
    detail::tape_op<Real>("matmul", out, a.requires_grad() || b.requires_grad(),
                          [a, b, m, k, n](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              if (a.requires_grad()) {
                                  std::vector<Real> g(static_cast<std::size_t>(a.size()), Real(0));
                                  detail::raw_matmul(go.data(), b.data().data(), g.data(), m, n, k, false, true, true);
                                  t.accumulate(a, g, s);
                              }
                              if (b.requires_grad()) {
                                  std::vector<Real> g(static_cast<std::size_t>(b.size()), Real(0));
                                  detail::raw_matmul(a.data().data(), go.data(), g.data(), k, m, n, true, false, true);
                                  t.accumulate(b, g, s);
                              }
                          });
    return out;
}

template <typename Real>
Array<Real> transpose(const Array<Real>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 array");
    const int m = a.dim(0), n = a.dim(1);
    Array<Real> out({n, m});
    auto o = out.mutable_data();
    auto pa = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            o[static_cast<std::size_t>(j) * static_cast<std::size_t>(m) + static_cast<std::size_t>(i)] =
                pa[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
    detail::tape_op<Real>("transpose", out, a.requires_grad(),
                          [a, m, n](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              std::vector<Real> g(static_cast<std::size_t>(a.size()));
                              for (int i = 0; i < m; ++i)
                                  for (int j = 0; j < n; ++j)
                                      g[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) +
                                        static_cast<std::size_t>(j)] =
                                          go[static_cast<std::size_t>(j) * static_cast<std::size_t>(m) +
                                             static_cast<std::size_t>(i)];
                              t.accumulate(a, g, s);
                          });
    return out;
}

template <typename Real>
Array<Real> slice_rows(const Array<Real>& a, int r0, int r1) {
    if (a.rank() != 2) throw ShapeError("slice_rows expects a rank-2 array");
    const int m = a.dim(0), n = a.dim(1);
    if (r0 < 0 || r1 > m || r0 >= r1) throw ShapeError("slice_rows: bad row range");
    Array<Real> out({r1 - r0, n});
    auto o = out.mutable_data();
    auto pa = a.data();
    std::copy(pa.begin() + static_cast<std::ptrdiff_t>(r0) * n, pa.begin() + static_cast<std::ptrdiff_t>(r1) * n,
              o.begin());
    detail::tape_op<Real>("slice_rows", out, a.requires_grad(),
                          [a, r0, n](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              auto& buf = t.grad_buffer(a);
                              for (std::size_t i = 0; i < go.size(); ++i)
                                  buf[static_cast<std::size_t>(r0) * static_cast<std::size_t>(n) + i] += s * go[i];
                          });
    return out;
}

template <typename Real>
Array<Real> slice_cols(const Array<Real>& a, int c0, int c1) {
    if (a.rank() != 2) throw ShapeError("slice_cols expects a rank-2 array");
    const int m = a.dim(0), n = a.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad column range");
    const int w = c1 - c0;
    Array<Real> out({m, w});
    auto o = out.mutable_data();
    auto pa = a.data();
    for (int i = 0; i < m; ++i)
        std::copy(pa.begin() + static_cast<std::ptrdiff_t>(i) * n + c0,
                  pa.begin() + static_cast<std::ptrdiff_t>(i) * n + c1, o.begin() + static_cast<std::ptrdiff_t>(i) * w);
    detail::tape_op<Real>("slice_cols", out, a.requires_grad(),
                          [a, c0, m, n, w](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              auto& buf = t.grad_buffer(a);
                              for (int i = 0; i < m; ++i)
                                  for (int j = 0; j < w; ++j)
                                      buf[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) +
                                          static_cast<std::size_t>(c0 + j)] +=
                                          s * go[static_cast<std::size_t>(i) * static_cast<std::size_t>(w) +
                                                 static_cast<std::size_t>(j)];
                          });
    return out;
}

template <typename Real>
Array<Real> concat_rows(const std::vector<Array<Real>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const int n = parts.front().dim(1);
    int rows = 0;
    bool any = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != n) throw ShapeError("concat_rows: column counts disagree");
        rows += p.dim(0);
        any = any || p.requires_grad();
    }
    Array<Real> out({rows, n});
    auto o = out.mutable_data();
    std::size_t off = 0;
    for (const auto& p : parts) {
        auto pd = p.data();
        std::copy(pd.begin(), pd.end(), o.begin() + static_cast<std::ptrdiff_t>(off));
        off += pd.size();
    }
    detail::tape_op<Real>("concat_rows", out, any, [parts](Tape<Real>& t, const std::vector<Real>& go, Real s) {
        std::size_t off2 = 0;
        for (const auto& p : parts) {
            const std::size_t len = static_cast<std::size_t>(p.size());
            if (p.requires_grad()) t.accumulate(p, {go.data() + off2, len}, s);
            off2 += len;
        }
    });
    return out;
}

template <typename Real>
Array<Real> concat_cols(const std::vector<Array<Real>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const int m = parts.front().dim(0);
    int cols = 0;
    bool any = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) throw ShapeError("concat_cols: row counts disagree");
        cols += p.dim(1);
        any = any || p.requires_grad();
    }
    Array<Real> out({m, cols});
    auto o = out.mutable_data();
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        auto pd = p.data();
        for (int i = 0; i < m; ++i)
            std::copy(pd.begin() + static_cast<std::ptrdiff_t>(i) * w,
                      pd.begin() + static_cast<std::ptrdiff_t>(i + 1) * w,
                      o.begin() + static_cast<std::ptrdiff_t>(i) * cols + c0);
        c0 += w;
    }
    detail::tape_op<Real>("concat_cols", out, any,
                          [parts, m, cols](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              int base = 0;
                              for (const auto& p : parts) {
                                  const int w = p.dim(1);
                                  if (p.requires_grad()) {
                                      auto& buf = t.grad_buffer(p);
                                      for (int i = 0; i < m; ++i)
                                          for (int j = 0; j < w; ++j)
                                              buf[static_cast<std::size_t>(i) * static_cast<std::size_t>(w) +
                                                  static_cast<std::size_t>(j)] +=
                                                  s * go[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) +
                                                         static_cast<std::size_t>(base + j)];
                                  }
                                  base += w;
                              }
                          });
    return out;
}

// Row gather (embedding lookup); backward scatters into the table.
template <typename Real>
Array<Real> take_rows(const Array<Real>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ShapeError("take_rows expects a rank-2 table");
    const int rows = table.dim(0), n = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= rows) throw ContractError("take_rows: id out of range");
    Array<Real> out({static_cast<int>(ids.size()), n});
    auto o = out.mutable_data();
    auto pt = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy(pt.begin() + static_cast<std::ptrdiff_t>(ids[i]) * n,
                  pt.begin() + static_cast<std::ptrdiff_t>(ids[i] + 1) * n,
                  o.begin() + static_cast<std::ptrdiff_t>(i) * n);
    detail::tape_op<Real>("take_rows", out, table.requires_grad(),
                          [table, ids, n](Tape<Real>& t, const std::vector<Real>& go, Real s) {
                              auto& buf = t.grad_buffer(table);
                              for (std::size_t i = 0; i < ids.size(); ++i)
                                  for (int j = 0; j < n; ++j)
                                      buf[static_cast<std::size_t>(ids[i]) * static_cast<std::size_t>(n) +
                                          static_cast<std::size_t>(j)] +=
                                          s * go[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
                          });
    return out;
}

// ---------------------------------------------------------------------------
// Normalization / softmax
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
void axis_geometry(const Array<Real>& a, int axis, int& outer, int& axis_len, int& inner) {
    if (axis < 0 || axis >= a.rank()) throw ShapeError("axis out of range");
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    axis_len = a.dim(axis);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
}

}  // namespace detail

// Max-subtracted softmax along `axis`; strictly positive, slices sum to 1.
template <typename Real>
Array<Real> softmax(const Array<Real>& a, int axis) {
    int outer, len, inner;
    detail::axis_geometry(a, axis, outer, len, inner);
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    for (int u = 0; u < outer; ++u)
        for (int v = 0; v < inner; ++v) {
            const std::size_t base = static_cast<std::size_t>(u) * static_cast<std::size_t>(len) * inner + v;
            Real mx = pa[base];
            for (int i = 1; i < len; ++i) mx = std::max(mx, pa[base + static_cast<std::size_t>(i) * inner]);
            Real z = 0;
            for (int i = 0; i < len; ++i) {
                const Real e = std::exp(pa[base + static_cast<std::size_t>(i) * inner] - mx);
                o[base + static_cast<std::size_t>(i) * inner] = e;
                z += e;
            }
            for (int i = 0; i < len; ++i) o[base + static_cast<std::size_t>(i) * inner] /= z;
        }
    detail::tape_op<Real>("softmax", out, a.requires_grad(),
                          [a, out, outer, len, inner](Tape<Real>& t, const std::vector<Real>& go, Real sc) {
                              std::vector<Real> g(go.size());
                              auto po = out.data();
                              for (int u = 0; u < outer; ++u)
                                  for (int v = 0; v < inner; ++v) {
                                      const std::size_t base =
                                          static_cast<std::size_t>(u) * static_cast<std::size_t>(len) * inner + v;
                                      Real dot = 0;
                                      for (int i = 0; i < len; ++i) {
                                          const std::size_t idx = base + static_cast<std::size_t>(i) * inner;
                                          dot += go[idx] * po[idx];
                                      }
                                      for (int i = 0; i < len; ++i) {
                                          const std::size_t idx = base + static_cast<std::size_t>(i) * inner;
                                          g[idx] = po[idx] * (go[idx] - dot);
                                      }
                                  }
                              t.accumulate(a, g, sc);
                          });
    return out;
}

template <typename Real>
Array<Real> log_softmax(const Array<Real>& a, int axis) {
    int outer, len, inner;
    detail::axis_geometry(a, axis, outer, len, inner);
    Array<Real> out(a.shape());
    auto o = out.mutable_data();
    auto pa = a.data();
    for (int u = 0; u < outer; ++u)
        for (int v = 0; v < inner; ++v) {
            const std::size_t base = static_cast<std::size_t>(u) * static_cast<std::size_t>(len) * inner + v;
            Real mx = pa[base];
            for (int i = 1; i < len; ++i) mx = std::max(mx, pa[base + static_cast<std::size_t>(i) * inner]);
            Real z = 0;
            for (int i = 0; i < len; ++i) z += std::exp(pa[base + static_cast<std::size_t>(i) * inner] - mx);
            const Real lse = mx + std::log(z);
            for (int i = 0; i < len; ++i) {
                const std::size_t idx = base + static_cast<std::size_t>(i) * inner;
                o[idx] = pa[idx] - lse;
            }
        }
    detail::tape_op<Real>("log_softmax", out, a.requires_grad(),
                          [a, out, outer, len, inner](Tape<Real>& t, const std::vector<Real>& go, Real sc) {
                              std::vector<Real> g(go.size());
                              auto po = out.data();
                              for (int u = 0; u < outer; ++u)
                                  for (int v = 0; v < inner; ++v) {
                                      const std::size_t base =
                                          static_cast<std::size_t>(u) * static_cast<std::size_t>(len) * inner + v;
                                      Real gsum = 0;
                                      for (int i = 0; i < len; ++i)
                                          gsum += go[base + static_cast<std::size_t>(i) * inner];
                                      for (int i = 0; i < len; ++i) {
                                          const std::size_t idx = base + static_cast<std::size_t>(i) * inner;
                                          g[idx] = go[idx] - std::exp(po[idx]) * gsum;
                                      }
                                  }
                              t.accumulate(a, g, sc);
                          });
    return out;
}

// Normalizes the last axis to mean 0 / variance 1 (epsilon inside the square
// root), then applies the affine gain/bias. A constant slice maps to zeros.
template <typename Real>
Array<Real> layer_norm(const Array<Real>& x, const Array<Real>& gain, const Array<Real>& bias,
                       Real eps = Real(1e-5)) {
    if (x.rank() < 1) throw ShapeError("layer_norm expects rank >= 1");
    const int n = x.dim(x.rank() - 1);
    if (gain.size() != n || bias.size() != n) throw ShapeError("layer_norm: gain/bias must match last axis");
    const int slices = x.size() / n;
    Array<Real> out(x.shape());
    auto o = out.mutable_data();
    auto px = x.data();
    auto pg = gain.data();
    auto pb = bias.data();
    std::vector<Real> xhat(static_cast<std::size_t>(x.size()));
    std::vector<Real> inv_std(static_cast<std::size_t>(slices));
    for (int s = 0; s < slices; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * static_cast<std::size_t>(n);
        Real mu = 0;
        for (int i = 0; i < n; ++i) mu += px[base + static_cast<std::size_t>(i)];
        mu /= static_cast<Real>(n);
        Real var = 0;
        for (int i = 0; i < n; ++i) {
            const Real d = px[base + static_cast<std::size_t>(i)] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(n);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(s)] = is;
        for (int i = 0; i < n; ++i) {
            const std::size_t idx = base + static_cast<std::size_t>(i);
            xhat[idx] = (px[idx] - mu) * is;
            o[idx] = xhat[idx] * pg[static_cast<std::size_t>(i)] + pb[static_cast<std::size_t>(i)];
        }
    }
    detail::tape_op<Real>(
        "layer_norm", out, x.requires_grad() || gain.requires_grad() || bias.requires_grad(),
        [x, gain, bias, n, slices, xhat = std::move(xhat), inv_std = std::move(inv_std)](
            Tape<Real>& t, const std::vector<Real>& go, Real sc) {
            auto pg2 = gain.data();
            if (bias.requires_grad()) {
                std::vector<Real> gb(static_cast<std::size_t>(n), Real(0));
                for (int s = 0; s < slices; ++s)
                    for (int i = 0; i < n; ++i)
                        gb[static_cast<std::size_t>(i)] +=
                            go[static_cast<std::size_t>(s) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
                t.accumulate(bias, gb, sc);
            }
            if (gain.requires_grad()) {
                std::vector<Real> gg(static_cast<std::size_t>(n), Real(0));
                for (int s = 0; s < slices; ++s)
                    for (int i = 0; i < n; ++i) {
                        const std::size_t idx =
                            static_cast<std::size_t>(s) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i);
                        gg[static_cast<std::size_t>(i)] += go[idx] * xhat[idx];
                    }
                t.accumulate(gain, gg, sc);
            }
            if (x.requires_grad()) {
                std::vector<Real> gx(go.size());
                for (int s = 0; s < slices; ++s) {
                    const std::size_t base = static_cast<std::size_t>(s) * static_cast<std::size_t>(n);
                    Real m1 = 0, m2 = 0;
                    for (int i = 0; i < n; ++i) {
                        const std::size_t idx = base + static_cast<std::size_t>(i);
                        const Real gy = go[idx] * pg2[static_cast<std::size_t>(i)];
                        m1 += gy;
                        m2 += gy * xhat[idx];
                    }
                    m1 /= static_cast<Real>(n);
                    m2 /= static_cast<Real>(n);
                    const Real is = inv_std[static_cast<std::size_t>(s)];
                    for (int i = 0; i < n; ++i) {
                        const std::size_t idx = base + static_cast<std::size_t>(i);
                        const Real gy = go[idx] * pg2[static_cast<std::size_t>(i)];
                        gx[idx] = is * (gy - m1 - xhat[idx] * m2);
                    }
                }
                t.accumulate(x, gx, sc);
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Boolean attention mask, true = key visible to that query row.
struct AttentionMask {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> allow;

    bool allowed(int i, int j) const {
        return allow[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)] != 0;
    }
};

template <typename Real>
struct AttentionResult {
    Array<Real> output;                      // [Tq x d]
    std::vector<Array<Real>> head_weights;   // heads entries of [Tq x Tk]
};

// Scaled dot-product attention over pre-projected queries/keys/values, split
// into `heads` equal column blocks with 1/sqrt(d/heads) scaling. Masked
// positions get exactly zero weight. Weights are returned per head so loss
// terms can differentiate through them.
template <typename Real>
AttentionResult<Real> attention(const Array<Real>& queries, const Array<Real>& keys, const Array<Real>& values,
                                int heads, const AttentionMask* mask = nullptr) {
    if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2)
        throw ShapeError("attention expects rank-2 inputs");
    const int d = queries.dim(1);
    if (keys.dim(1) != d || values.dim(1) != d) throw ShapeError("attention: feature sizes disagree");
    if (keys.dim(0) != values.dim(0)) throw ShapeError("attention: key/value counts disagree");
    if (heads < 1 || d % heads != 0) throw ShapeError("attention: d must be divisible by heads");
    const int tq = queries.dim(0), tk = keys.dim(0), dh = d / heads;
    if (mask != nullptr) {
        if (mask->rows != tq || mask->cols != tk) throw ShapeError("attention: mask shape mismatch");
        for (int i = 0; i < tq; ++i) {
            bool any = false;
            for (int j = 0; j < tk && !any; ++j) any = mask->allowed(i, j);
            if (!any) throw ContractError("attention: fully masked query row");
        }
    }

    Array<Real> penalty;  // 0 where allowed, large negative where masked
    if (mask != nullptr) {
        penalty = Array<Real>({tq, tk});
        auto p = penalty.mutable_data();
        for (int i = 0; i < tq; ++i)
            for (int j = 0; j < tk; ++j)
                p[static_cast<std::size_t>(i) * static_cast<std::size_t>(tk) + static_cast<std::size_t>(j)] =
                    mask->allowed(i, j) ? Real(0) : Real(-1e9);
    }

    AttentionResult<Real> result;
    result.head_weights.reserve(static_cast<std::size_t>(heads));
    std::vector<Array<Real>> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
    for (int h = 0; h < heads; ++h) {
        Array<Real> qh = slice_cols(queries, h * dh, (h + 1) * dh);
        Array<Real> kh = slice_cols(keys, h * dh, (h + 1) * dh);
        Array<Real> vh = slice_cols(values, h * dh, (h + 1) * dh);
        Array<Real> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (mask != nullptr) scores = add(scores, penalty);
        Array<Real> weights = softmax(scores, 1);
        result.head_weights.push_back(weights);
        head_outputs.push_back(matmul(weights, vh));
    }
    result.output = heads == 1 ? head_outputs.front() : concat_cols(head_outputs);
    return result;
}

// ---------------------------------------------------------------------------
// grad()
// ---------------------------------------------------------------------------

// d(loss)/d(param) for each param; params off the path get zero arrays.
template <typename Real>
std::vector<Array<Real>> grad(Tape<Real>& tape, const Array<Real>& loss, const std::vector<Array<Real>>& params) {
    if (loss.size() != 1) throw ContractError("grad() requires a scalar loss");
    tape.backward(loss);
    std::vector<Array<Real>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(tape.grad(p));
    return out;
}

}  // namespace vground
