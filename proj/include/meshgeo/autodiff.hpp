#pragma once

#include "meshgeo/common.hpp"
#include "meshgeo/sparse.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace meshgeo::ad {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while its tape lives.
template <class T>
class Tensor {
public:
    Tensor() = default;
    Tensor(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    const Matrix<T>& value() const { return tape_->value(id_); }
    const Matrix<T>& grad() const { return tape_->grad(id_); }
    bool requires_grad() const { return tape_->requires_grad(id_); }
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    Index size() const { return value().size(); }
    T item() const {
        if (size() != 1) throw ShapeError("item() on a " + shape_str(rows(), cols()) + " tensor");
        return value()(0, 0);
    }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Records primitive applications in execution order and replays them in reverse
/// to accumulate gradients. One tape per forward pass, one backward per tape.
template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix<T>& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Value that never receives a gradient.
    Tensor<T> constant(Matrix<T> value) { return push(std::move(value), nullptr, nullptr, false); }

    /// Owned leaf that receives a gradient.
    Tensor<T> variable(Matrix<T> value) { return push(std::move(value), nullptr, nullptr, true); }

    /// Leaf that reads `value` in place and adds its gradient into `grad_sink`
    /// (which is resized and zeroed if empty). Both must outlive the tape.
    Tensor<T> parameter(const Matrix<T>& value, Matrix<T>* grad_sink) {
        if (grad_sink && grad_sink->size() == 0) *grad_sink = Matrix<T>::Zero(value.rows(), value.cols());
        if (grad_sink && (grad_sink->rows() != value.rows() || grad_sink->cols() != value.cols()))
            throw ShapeError("gradient sink shape mismatch");
        return push(Matrix<T>(), &value, grad_sink, grad_sink != nullptr);
    }

    /// Records an operation output. `backward` is kept only if some input needs a gradient.
    Tensor<T> record(Matrix<T> value, std::initializer_list<Tensor<T>> inputs, Backward backward) {
        bool needs = false;
        for (const auto& t : inputs) {
            if (t.valid() && &t.tape() != this) throw std::invalid_argument("tensors from different tapes");
            needs = needs || requires_grad(t.id());
        }
        auto out = push(std::move(value), nullptr, nullptr, needs);
        if (needs) nodes_.back().backward = std::move(backward);
        return out;
    }

    const Matrix<T>& value(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.ref ? *n.ref : n.value;
    }

    const Matrix<T>& grad(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.sink ? *n.sink : n.grad;
    }

    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Adds `g` (any Eigen expression of the node's shape) to node `id`'s gradient.
    template <class Expr>
    void accumulate(std::size_t id, const Expr& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        Matrix<T>& dst = n.sink ? *n.sink : n.grad;
        if (dst.size() == 0 && !n.sink)
            dst = g;
        else
            dst.noalias() += g;
    }

    /// Reverse sweep from a scalar loss. Gradients of shared operands are summed.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.rows(), loss.cols()));
        if (&loss.tape() != this) throw std::invalid_argument("loss is not on this tape");
        Node& root = nodes_[loss.id()];
        if (!root.requires_grad) return;
        accumulate(loss.id(), Matrix<T>::Ones(1, 1));
        for (std::size_t k = loss.id() + 1; k-- > 0;) {
            Node& n = nodes_[k];
            if (!n.backward || n.grad.size() == 0) continue;
            n.backward(*this, n.grad);
        }
    }

private:
    struct Node {
        Matrix<T> value;
        const Matrix<T>* ref = nullptr;
        Matrix<T>* sink = nullptr;
        Matrix<T> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Tensor<T> push(Matrix<T> value, const Matrix<T>* ref, Matrix<T>* sink, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.ref = ref;
        n.sink = sink;
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Tensor<T>(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": " + shape_str(a.rows(), a.cols()) + " vs " + shape_str(b.rows(), b.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " + shape_str(b.rows(), b.cols()));
    Matrix<T> out(a.rows(), b.cols());
    out.noalias() = a.value() * b.value();
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Matrix<T>& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
    });
}

/// M * X for a constant sparse M; backward is M^T * grad.
template <class T>
Tensor<T> spmm(const SparseMatrix& m, const Tensor<T>& x) {
    Matrix<T> out = m.apply(x.value());
    const auto ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix, &m](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ix, m.apply_transpose(g));
    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, -g);
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    const auto ia = a.id(), ib = b.id();
    return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape<T>& t, const Matrix<T>& g) {
        if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    const auto ia = a.id();
    return a.tape().record(a.value() * s, {a}, [ia, s](Tape<T>& t, const Matrix<T>& g) { t.accumulate(ia, g * s); });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    const auto ia = a.id();
    Matrix<T> out = a.value().array() + s;
    return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, const Matrix<T>& g) { t.accumulate(ia, g); });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    const auto ia = a.id();
    return a.tape().record(a.value().cwiseAbs2(), {a}, [ia](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ia, T(2) * g.cwiseProduct(t.value(ia)));
    });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
    if ((a.value().array() < T(0)).any()) throw std::domain_error("sqrt of a negative entry");
    const auto ia = a.id();
    Matrix<T> out = a.value().cwiseSqrt();
    const auto io = a.tape().size();
    return a.tape().record(std::move(out), {a}, [ia, io](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ia, (g.array() / (T(2) * t.value(io).array())).matrix());
    });
}

/// Euclidean norm of all entries, as a 1x1 tensor. The gradient at the zero tensor is taken as zero.
template <class T>
Tensor<T> l2_norm(const Tensor<T>& a) {
    const auto ia = a.id();
    const T n = a.value().norm();
    Matrix<T> out(1, 1);
    out(0, 0) = n;
    return a.tape().record(std::move(out), {a}, [ia, n](Tape<T>& t, const Matrix<T>& g) {
        if (n < T(1e-12)) return;
        t.accumulate(ia, t.value(ia) * (g(0, 0) / n));
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    const auto ia = a.id();
    const Index r = a.rows(), c = a.cols();
    Matrix<T> out(1, 1);
    out(0, 0) = a.value().sum();
    return a.tape().record(std::move(out), {a}, [ia, r, c](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ia, Matrix<T>::Constant(r, c, g(0, 0)));
    });
}

/// Column means: m x n -> 1 x n.
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    if (a.rows() < 1) throw ShapeError("mean_rows of an empty tensor");
    const auto ia = a.id();
    const Index m = a.rows();
    Matrix<T> out = a.value().colwise().mean();
    return a.tape().record(std::move(out), {a}, [ia, m](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ia, (g / static_cast<T>(m)).replicate(m, 1));
    });
}

// ---------------------------------------------------------------------------
// Activations

/// x for x > 0, slope * x otherwise (the slope is also the derivative at 0).
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
    const auto ia = a.id();
    Matrix<T> out = a.value().unaryExpr([slope](T v) { return v > T(0) ? v : slope * v; });
    return a.tape().record(std::move(out), {a}, [ia, slope](Tape<T>& t, const Matrix<T>& g) {
        const auto& x = t.value(ia);
        t.accumulate(ia, g.binaryExpr(x, [slope](T gv, T xv) { return xv > T(0) ? gv : slope * gv; }));
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return leaky_relu(a, T(0));
}

/// Row-wise softmax with max subtraction.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    const auto ia = a.id();
    Matrix<T> out = a.value();
    for (Index r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
    }
    const auto io = a.tape().size();
    return a.tape().record(std::move(out), {a}, [ia, io](Tape<T>& t, const Matrix<T>& g) {
        const auto& y = t.value(io);
        Matrix<T> gin = y.cwiseProduct(g);
        const Eigen::Matrix<T, Eigen::Dynamic, 1> dots = gin.rowwise().sum();
        gin -= y.cwiseProduct(dots.replicate(1, y.cols()));
        t.accumulate(ia, gin);
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Row-major flatten to 1 x (rows * cols).
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Index rows, Index cols) {
    if (rows * cols != a.size())
        throw ShapeError("reshape " + shape_str(a.rows(), a.cols()) + " to " + shape_str(rows, cols));
    const auto ia = a.id();
    const Index r0 = a.rows(), c0 = a.cols();
    Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
    return a.tape().record(std::move(out), {a}, [ia, r0, c0](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ia, Eigen::Map<const Matrix<T>>(g.data(), r0, c0));
    });
}

template <class T>
Tensor<T> flatten(const Tensor<T>& a) {
    return reshape(a, 1, a.size());
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols())
        throw ShapeError("slice_cols [" + std::to_string(start) + ", " + std::to_string(start + count) + ") of " +
                         shape_str(a.rows(), a.cols()));
    const auto ia = a.id();
    const Index r = a.rows(), c = a.cols();
    Matrix<T> out = a.value().middleCols(start, count);
    return a.tape().record(std::move(out), {a}, [ia, r, c, start, count](Tape<T>& t, const Matrix<T>& g) {
        Matrix<T> full = Matrix<T>::Zero(r, c);
        full.middleCols(start, count) = g;
        t.accumulate(ia, full);
    });
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows())
        throw ShapeError("concat_cols: " + shape_str(a.rows(), a.cols()) + " | " + shape_str(b.rows(), b.cols()));
    const auto ia = a.id(), ib = b.id();
    const Index ca = a.cols(), cb = b.cols();
    Matrix<T> out(a.rows(), ca + cb);
    out << a.value(), b.value();
    return a.tape().record(std::move(out), {a, b}, [ia, ib, ca, cb](Tape<T>& t, const Matrix<T>& g) {
        if (ca > 0) t.accumulate(ia, g.leftCols(ca));
        if (cb > 0) t.accumulate(ib, g.rightCols(cb));
    });
}

/// Repeats a 1 x n row m times.
template <class T>
Tensor<T> broadcast_row(const Tensor<T>& row, Index m) {
    if (row.rows() != 1) throw ShapeError("broadcast_row needs a single row, got " + shape_str(row.rows(), row.cols()));
    const auto ir = row.id();
    Matrix<T> out = row.value().replicate(m, 1);
    return row.tape().record(std::move(out), {row}, [ir](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ir, g.colwise().sum());
    });
}

/// X + 1 * b for a 1 x n bias row.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rows() != 1 || b.cols() != x.cols())
        throw ShapeError("add_row: " + shape_str(x.rows(), x.cols()) + " + " + shape_str(b.rows(), b.cols()));
    const auto ix = x.id(), ib = b.id();
    Matrix<T> out = x.value().rowwise() + b.value().row(0);
    return x.tape().record(std::move(out), {x, b}, [ix, ib](Tape<T>& t, const Matrix<T>& g) {
        t.accumulate(ix, g);
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
    });
}

/// diag(w) * X for an m x 1 weight column.
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w) {
    if (w.cols() != 1 || w.rows() != x.rows())
        throw ShapeError("scale_rows: " + shape_str(x.rows(), x.cols()) + " by " + shape_str(w.rows(), w.cols()));
    const auto ix = x.id(), iw = w.id();
    Matrix<T> out = x.value().array().colwise() * w.value().col(0).array();
    return x.tape().record(std::move(out), {x, w}, [ix, iw](Tape<T>& t, const Matrix<T>& g) {
        if (t.requires_grad(ix)) t.accumulate(ix, (g.array().colwise() * t.value(iw).col(0).array()).matrix());
        if (t.requires_grad(iw)) t.accumulate(iw, g.cwiseProduct(t.value(ix)).rowwise().sum());
    });
}

// ---------------------------------------------------------------------------
// Finite-difference checking

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<double> per_param;  ///< max relative error per parameter tensor
    std::size_t probes = 0;
};

struct GradCheckOptions {
    double eps = 1e-6;
    Index full_threshold = 512;  ///< tensors above this size are probed at random coordinates
    int random_probes = 64;
    std::uint64_t seed = 0x5eed;
};

/// Compares reverse-mode gradients of `loss_fn` with central differences
/// (f(p + eps e_k) - f(p - eps e_k)) / 2 eps. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8). `params` is perturbed in place and restored.
template <class T, class LossFn>
GradCheckReport gradient_check(LossFn&& loss_fn, std::vector<Matrix<T>>& params, const GradCheckOptions& opt = {}) {
    if (!(opt.eps >= 1e-7 && opt.eps <= 1e-4)) throw std::invalid_argument("gradient_check eps outside [1e-7, 1e-4]");
    std::vector<Matrix<T>> grads(params.size());
    {
        Tape<T> tape;
        std::vector<Tensor<T>> leaves;
        for (std::size_t p = 0; p < params.size(); ++p) leaves.push_back(tape.parameter(params[p], &grads[p]));
        Tensor<T> loss = loss_fn(tape, std::span<const Tensor<T>>(leaves));
        tape.backward(loss);
    }
    auto eval = [&]() -> double {
        Tape<T> tape;
        std::vector<Tensor<T>> leaves;
        for (auto& p : params) leaves.push_back(tape.parameter(p, nullptr));
        return static_cast<double>(loss_fn(tape, std::span<const Tensor<T>>(leaves)).item());
    };

    GradCheckReport report;
    std::mt19937_64 rng(opt.seed);
    for (std::size_t p = 0; p < params.size(); ++p) {
        Matrix<T>& x = params[p];
        std::vector<Index> coords;
        if (x.size() <= opt.full_threshold) {
            for (Index k = 0; k < x.size(); ++k) coords.push_back(k);
        } else {
            std::uniform_int_distribution<Index> pick(0, x.size() - 1);
            for (int k = 0; k < opt.random_probes; ++k) coords.push_back(pick(rng));
        }
        double worst = 0.0;
        for (Index k : coords) {
            const T saved = x.data()[k];
            x.data()[k] = saved + static_cast<T>(opt.eps);
            const double fp = eval();
            x.data()[k] = saved - static_cast<T>(opt.eps);
            const double fm = eval();
            x.data()[k] = saved;
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double analytic = static_cast<double>(grads[p].data()[k]);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
            ++report.probes;
        }
        report.per_param.push_back(worst);
        report.max_rel_error = std::max(report.max_rel_error, worst);
    }
    return report;
}

}  // namespace meshgeo::ad
