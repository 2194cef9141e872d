#pragma once

// Dense 64-bit tensors and a tape for reverse-mode differentiation.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "doufu/error.hpp"
#include "doufu/util.hpp"

namespace doufu::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

/// Row-major matrix; vectors are 1 x n, scalars 1 x 1.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) throw ShapeError("tensor data length does not match shape");
    }
    static Tensor row(std::vector<double> v) {
        const auto n = v.size();
        return Tensor(1, n, std::move(v));
    }
    static Tensor scalar(double v) { return Tensor(1, 1, v); }
    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return {};
        Tensor t(rows.size(), rows.front().size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != t.cols_) throw ShapeError("ragged rows");
            std::copy(rows[r].begin(), rows[r].end(), t.data_.begin() + static_cast<std::ptrdiff_t>(r * t.cols_));
        }
        return t;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    std::vector<std::size_t> shape() const { return {rows_, cols_}; }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    double item() const {
        if (data_.size() != 1) throw ShapeError("item() on a non-scalar tensor");
        return data_[0];
    }
    std::vector<double> row_vector(std::size_t r) const {
        return {data_.begin() + static_cast<std::ptrdiff_t>(r * cols_), data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_)};
    }

    MapRM mat() { return MapRM(data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)); }
    CMapRM mat() const { return CMapRM(data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }
    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Tensor from_eigen(const MatRM& m) {
    Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    t.mat() = m;
    return t;
}

// ---------------------------------------------------------------------------
// Parameters

enum class Init { zeros, ones, fan_in_uniform, identity };

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m; ///< first moment
    Tensor v; ///< second moment
    std::uint64_t seed = 0;
    Init init = Init::zeros;
};

inline const char* init_name(Init i) {
    switch (i) {
    case Init::zeros: return "zeros";
    case Init::ones: return "ones";
    case Init::fan_in_uniform: return "fan_in_uniform";
    default: return "identity";
    }
}

/// Named parameters with seeded initialization; references stay valid as parameters are added.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    Parameter& add(const std::string& name, std::size_t rows, std::size_t cols, Init init) {
        if (index_.count(name)) throw Error("duplicate parameter name " + name);
        Parameter p;
        p.name = name;
        p.init = init;
        p.seed = derive_seed(seed_, fnv1a(name));
        p.value = Tensor(rows, cols);
        switch (init) {
        case Init::zeros: break;
        case Init::ones: std::fill(p.value.data().begin(), p.value.data().end(), 1.0); break;
        case Init::identity:
            for (std::size_t i = 0; i < std::min(rows, cols); ++i) p.value(i, i) = 1.0;
            break;
        case Init::fan_in_uniform: {
            Rng rng(p.seed);
            const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (auto& x : p.value.data()) x = u(rng);
            break;
        }
        }
        p.grad = Tensor(rows, cols);
        p.m = Tensor(rows, cols);
        p.v = Tensor(rows, cols);
        index_.emplace(name, params_.size());
        params_.push_back(std::move(p));
        return params_.back();
    }

    Parameter& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw LookupError("unknown parameter " + name);
        return params_[it->second];
    }
    const Parameter& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw LookupError("unknown parameter " + name);
        return params_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::deque<Parameter>& params() { return params_; }
    const std::deque<Parameter>& params() const { return params_; }
    std::size_t step_count() const { return step_; }
    std::size_t& step_count() { return step_; }
    bool grads_ready() const { return grads_ready_; }
    void set_grads_ready(bool v) { grads_ready_ = v; }
    std::uint64_t seed() const { return seed_; }

    void zero_grad() {
        for (auto& p : params_) std::fill(p.grad.data().begin(), p.grad.data().end(), 0.0);
        grads_ready_ = false;
    }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

private:
    std::uint64_t seed_;
    std::deque<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t step_ = 0;
    bool grads_ready_ = false;
};

// ---------------------------------------------------------------------------
// Tape

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;
    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        Backward backward;
        Parameter* param = nullptr;
        ParamStore* store = nullptr;
        bool needs_grad = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) {
        nodes_.push_back({"const", std::move(value), {}, {}, {}, nullptr, nullptr, false});
        return {this, nodes_.size() - 1};
    }

    /// Leaf bound to a parameter; its gradient flows into the store on backward().
    Var param(ParamStore& store, const std::string& name) {
        auto& p = store.get(name);
        nodes_.push_back({"param:" + name, p.value, {}, {}, {}, &p, &store, true});
        return {this, nodes_.size() - 1};
    }

    Var push(std::string op, Tensor value, std::vector<std::size_t> inputs, Backward backward) {
        check_live();
        bool needs = false;
        for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
        nodes_.push_back({std::move(op), std::move(value), {}, std::move(inputs), needs ? std::move(backward) : Backward{},
                          nullptr, nullptr, needs});
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    /// Upstream gradient of node `id` (zeros if nothing flowed into it).
    const Tensor& grad(std::size_t id) {
        ensure_grad(id);
        return nodes_[id].grad;
    }
    /// Mutable gradient buffer of an input, allocated on demand.
    Tensor& grad_buffer(std::size_t id) {
        ensure_grad(id);
        return nodes_[id].grad;
    }

    void backward(Var loss) {
        if (consumed_) throw Error("backward called twice on the same tape; run the forward pass again");
        if (loss.tape != this) throw Error("loss belongs to a different tape");
        if (nodes_[loss.id].value.size() != 1) throw ShapeError("backward requires a scalar loss");
        consumed_ = true;
        ensure_grad(loss.id);
        nodes_[loss.id].grad[0] = 1.0;
        for (std::size_t k = loss.id + 1; k-- > 0;) {
            auto& n = nodes_[k];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, k);
        }
        for (auto& n : nodes_) {
            if (!n.param) continue;
            if (n.grad.size()) n.param->grad.mat() += n.grad.mat();
            n.store->set_grads_ready(true);
        }
    }

    bool consumed() const { return consumed_; }

private:
    void ensure_grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Tensor(n.value.rows(), n.value.cols());
    }
    void check_live() const {
        if (consumed_) throw Error("tape already consumed by backward()");
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Differentiable operations

namespace detail {
inline void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}
inline Tape& tape_of(Var a, Var b) {
    require(a.tape == b.tape, "operands recorded on different tapes");
    return *a.tape;
}
} // namespace detail

inline Var matmul(Var a, Var b) {
    auto& t = detail::tape_of(a, b);
    detail::require(a.cols() == b.rows(), "matmul inner dimension mismatch");
    Tensor out(a.rows(), b.cols());
    out.mat().noalias() = a.value().mat() * b.value().mat();
    return t.push("matmul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).mat();
        if (tp.needs_grad(ia)) tp.grad_buffer(ia).mat().noalias() += g * tp.value(ib).mat().transpose();
        if (tp.needs_grad(ib)) tp.grad_buffer(ib).mat().noalias() += tp.value(ia).mat().transpose() * g;
    });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
    auto& t = detail::tape_of(a, b);
    detail::require(a.cols() == b.cols(), "matmul_nt dimension mismatch");
    Tensor out(a.rows(), b.rows());
    out.mat().noalias() = a.value().mat() * b.value().mat().transpose();
    return t.push("matmul_nt", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).mat();
        if (tp.needs_grad(ia)) tp.grad_buffer(ia).mat().noalias() += g * tp.value(ib).mat();
        if (tp.needs_grad(ib)) tp.grad_buffer(ib).mat().noalias() += g.transpose() * tp.value(ia).mat();
    });
}

inline Var add(Var a, Var b) {
    auto& t = detail::tape_of(a, b);
    detail::require(a.value().same_shape(b.value()), "add shape mismatch");
    Tensor out = a.value();
    out.mat() += b.value().mat();
    return t.push("add", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.needs_grad(ia)) tp.grad_buffer(ia).mat() += g.mat();
        if (tp.needs_grad(ib)) tp.grad_buffer(ib).mat() += g.mat();
    });
}

inline Var sub(Var a, Var b) {
    auto& t = detail::tape_of(a, b);
    detail::require(a.value().same_shape(b.value()), "sub shape mismatch");
    Tensor out = a.value();
    out.mat() -= b.value().mat();
    return t.push("sub", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.needs_grad(ia)) tp.grad_buffer(ia).mat() += g.mat();
        if (tp.needs_grad(ib)) tp.grad_buffer(ib).mat() -= g.mat();
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    auto& t = detail::tape_of(a, b);
    detail::require(a.value().same_shape(b.value()), "mul shape mismatch");
    Tensor out = a.value();
    out.mat().array() *= b.value().mat().array();
    return t.push("mul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).mat().array();
        if (tp.needs_grad(ia)) tp.grad_buffer(ia).mat().array() += g * tp.value(ib).mat().array();
        if (tp.needs_grad(ib)) tp.grad_buffer(ib).mat().array() += g * tp.value(ia).mat().array();
    });
}

/// Adds a 1 x n row to every row of a.
inline Var add_row(Var a, Var row) {
    auto& t = detail::tape_of(a, row);
    detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row expects a 1 x cols row");
    Tensor out = a.value();
    out.mat().rowwise() += row.value().mat().row(0);
    return t.push("add_row", std::move(out), {a.id, row.id}, [ia = a.id, ib = row.id](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).mat();
        if (tp.needs_grad(ia)) tp.grad_buffer(ia).mat() += g;
        if (tp.needs_grad(ib)) tp.grad_buffer(ib).mat() += g.colwise().sum();
    });
}

inline Var scale(Var a, double s) {
    Tensor out = a.value();
    out.mat() *= s;
    return a.tape->push("scale", std::move(out), {a.id}, [ia = a.id, s](Tape& tp, std::size_t self) {
        tp.grad_buffer(ia).mat() += s * tp.grad(self).mat();
    });
}

namespace detail {
template <class F, class DF>
Var unary(Var a, const char* op, F f, DF df_from_out) {
    Tensor out = a.value();
    for (auto& x : out.data()) x = f(x);
    return a.tape->push(op, std::move(out), {a.id}, [ia = a.id, df_from_out](Tape& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& y = tp.value(self);
        const auto& x = tp.value(ia);
        auto& gi = tp.grad_buffer(ia);
        for (std::size_t k = 0; k < g.size(); ++k) gi[k] += g[k] * df_from_out(x[k], y[k]);
    });
}
} // namespace detail

inline Var relu(Var a) {
    return detail::unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Var tanh(Var a) {
    return detail::unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline double sigmoid_scalar(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline Var sigmoid(Var a) {
    return detail::unary(a, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}
inline Var exp(Var a) {
    return detail::unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
/// 1 - a
inline Var one_minus(Var a) {
    return detail::unary(a, "one_minus", [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

inline Var transpose(Var a) {
    Tensor out(a.cols(), a.rows());
    out.mat() = a.value().mat().transpose();
    return a.tape->push("transpose", std::move(out), {a.id}, [ia = a.id](Tape& tp, std::size_t self) {
        tp.grad_buffer(ia).mat() += tp.grad(self).mat().transpose();
    });
}

inline Var sum(Var a) {
    Tensor out = Tensor::scalar(a.value().mat().sum());
    return a.tape->push("sum", std::move(out), {a.id}, [ia = a.id](Tape& tp, std::size_t self) {
        tp.grad_buffer(ia).mat().array() += tp.grad(self)[0];
    });
}

/// Mean over rows: (n x d) -> (1 x d).
inline Var mean_rows(Var a) {
    detail::require(a.rows() > 0, "mean_rows of an empty tensor");
    Tensor out(1, a.cols());
    out.mat() = a.value().mat().colwise().mean();
    return a.tape->push("mean_rows", std::move(out), {a.id}, [ia = a.id](Tape& tp, std::size_t self) {
        const double n = static_cast<double>(tp.value(ia).rows());
        tp.grad_buffer(ia).mat().rowwise() += tp.grad(self).mat().row(0) / n;
    });
}

/// Sum over columns: (n x d) -> (n x 1).
inline Var row_sum(Var a) {
    Tensor out(a.rows(), 1);
    out.mat() = a.value().mat().rowwise().sum();
    return a.tape->push("row_sum", std::move(out), {a.id}, [ia = a.id](Tape& tp, std::size_t self) {
        tp.grad_buffer(ia).mat().colwise() += tp.grad(self).mat().col(0);
    });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t count) {
    detail::require(start + count <= a.cols(), "slice_cols out of range");
    Tensor out(a.rows(), count);
    out.mat() = a.value().mat().middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
    return a.tape->push("slice_cols", std::move(out), {a.id}, [ia = a.id, start, count](Tape& tp, std::size_t self) {
        tp.grad_buffer(ia).mat().middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) += tp.grad(self).mat();
    });
}

inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
    detail::require(start + count <= a.rows(), "slice_rows out of range");
    Tensor out(count, a.cols());
    out.mat() = a.value().mat().middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
    return a.tape->push("slice_rows", std::move(out), {a.id}, [ia = a.id, start, count](Tape& tp, std::size_t self) {
        tp.grad_buffer(ia).mat().middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) += tp.grad(self).mat();
    });
}

inline Var gather_rows(Var a, std::vector<std::size_t> idx) {
    Tensor out(idx.size(), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        detail::require(idx[r] < a.rows(), "gather_rows index out of range");
        out.mat().row(static_cast<Eigen::Index>(r)) = a.value().mat().row(static_cast<Eigen::Index>(idx[r]));
    }
    return a.tape->push("gather_rows", std::move(out), {a.id}, [ia = a.id, idx = std::move(idx)](Tape& tp, std::size_t self) {
        auto gi = tp.grad_buffer(ia).mat();
        const auto g = tp.grad(self).mat();
        for (std::size_t r = 0; r < idx.size(); ++r) gi.row(static_cast<Eigen::Index>(idx[r])) += g.row(static_cast<Eigen::Index>(r));
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    detail::require(!parts.empty(), "concat_cols of nothing");
    std::size_t cols = 0;
    for (auto p : parts) {
        detail::require(p.rows() == parts.front().rows(), "concat_cols row mismatch");
        cols += p.cols();
    }
    Tensor out(parts.front().rows(), cols);
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (auto p : parts) {
        out.mat().middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(p.cols())) = p.value().mat();
        ids.push_back(p.id);
        offsets.push_back(off);
        off += p.cols();
    }
    return parts.front().tape->push("concat_cols", std::move(out), ids, [ids, offsets](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).mat();
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tp.needs_grad(ids[k])) continue;
            auto& gi = tp.grad_buffer(ids[k]);
            gi.mat() += g.middleCols(static_cast<Eigen::Index>(offsets[k]), static_cast<Eigen::Index>(gi.cols()));
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    detail::require(!parts.empty(), "concat_rows of nothing");
    std::size_t rows = 0;
    for (auto p : parts) {
        detail::require(p.cols() == parts.front().cols(), "concat_rows column mismatch");
        rows += p.rows();
    }
    Tensor out(rows, parts.front().cols());
    std::vector<std::size_t> ids, offsets;
    std::size_t off = 0;
    for (auto p : parts) {
        out.mat().middleRows(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(p.rows())) = p.value().mat();
        ids.push_back(p.id);
        offsets.push_back(off);
        off += p.rows();
    }
    return parts.front().tape->push("concat_rows", std::move(out), ids, [ids, offsets](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).mat();
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!tp.needs_grad(ids[k])) continue;
            auto& gi = tp.grad_buffer(ids[k]);
            gi.mat() += g.middleRows(static_cast<Eigen::Index>(offsets[k]), static_cast<Eigen::Index>(gi.rows()));
        }
    });
}

/// Boolean attention mask, row-major; true = allowed.
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<char> allowed;
    bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
    static Mask all(std::size_t r, std::size_t c) { return {r, c, std::vector<char>(r * c, 1)}; }
};

/// Row-wise softmax with max subtraction; masked entries get probability 0.
inline Var softmax_rows(Var a, const Mask* mask = nullptr) {
    const auto& x = a.value();
    if (mask) detail::require(mask->rows == x.rows() && mask->cols == x.cols(), "mask shape mismatch");
    Tensor out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < x.cols(); ++c)
            if (!mask || (*mask)(r, c)) mx = std::max(mx, x(r, c));
        if (mx == -std::numeric_limits<double>::infinity()) throw ShapeError("softmax row " + std::to_string(r) + " is fully masked");
        double z = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double e = (!mask || (*mask)(r, c)) ? std::exp(x(r, c) - mx) : 0.0;
            out(r, c) = e;
            z += e;
        }
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) /= z;
    }
    return a.tape->push("softmax_rows", std::move(out), {a.id}, [ia = a.id](Tape& tp, std::size_t self) {
        const auto y = tp.value(self).mat().array();
        const auto g = tp.grad(self).mat().array();
        const Eigen::ArrayXd dot = (g * y).rowwise().sum();
        tp.grad_buffer(ia).mat().array() += y * (g.colwise() - dot);
    });
}

inline constexpr double layer_norm_eps = 1e-5;

/// Per-row normalization to zero mean and unit variance, then gain * x + bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = layer_norm_eps) {
    auto& t = detail::tape_of(x, gain);
    const std::size_t n = x.rows(), d = x.cols();
    detail::require(d >= 2, "layer_norm needs at least 2 features");
    detail::require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d, "layer_norm parameter shape");
    Tensor xhat(n, d), out(n, d);
    std::vector<double> inv_std(n);
    for (std::size_t r = 0; r < n; ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += x.value()(r, c);
        mu /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) var += (x.value()(r, c) - mu) * (x.value()(r, c) - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat(r, c) = (x.value()(r, c) - mu) * inv_std[r];
            out(r, c) = xhat(r, c) * gain.value()[c] + bias.value()[c];
        }
    }
    return t.push("layer_norm", std::move(out), {x.id, gain.id, bias.id},
                  [ix = x.id, ig = gain.id, ib = bias.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                      const auto& g = tp.grad(self);
                      const std::size_t n = g.rows(), d = g.cols();
                      if (tp.needs_grad(ig)) tp.grad_buffer(ig).mat() += (g.mat().array() * xhat.mat().array()).colwise().sum().matrix();
                      if (tp.needs_grad(ib)) tp.grad_buffer(ib).mat() += g.mat().colwise().sum();
                      if (!tp.needs_grad(ix)) return;
                      const auto& gamma = tp.value(ig);
                      auto& gx = tp.grad_buffer(ix);
                      for (std::size_t r = 0; r < n; ++r) {
                          double s1 = 0.0, s2 = 0.0;
                          for (std::size_t c = 0; c < d; ++c) {
                              const double gh = g(r, c) * gamma[c];
                              s1 += gh;
                              s2 += gh * xhat(r, c);
                          }
                          for (std::size_t c = 0; c < d; ++c) {
                              const double gh = g(r, c) * gamma[c];
                              gx(r, c) += inv_std[r] * (gh - s1 / static_cast<double>(d) - xhat(r, c) * s2 / static_cast<double>(d));
                          }
                      }
                  });
}

/// Mean softmax cross-entropy of logit rows against integer labels.
inline Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
    const auto& x = logits.value();
    detail::require(labels.size() == x.rows(), "cross_entropy label count mismatch");
    Tensor prob(x.rows(), x.cols());
    double loss = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        if (labels[r] >= x.cols()) throw LookupError("label " + std::to_string(labels[r]) + " outside class range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) z += std::exp(x(r, c) - mx);
        for (std::size_t c = 0; c < x.cols(); ++c) prob(r, c) = std::exp(x(r, c) - mx) / z;
        loss += -(x(r, labels[r]) - mx - std::log(z));
    }
    const double n = static_cast<double>(x.rows());
    return logits.tape->push("cross_entropy", Tensor::scalar(loss / n), {logits.id},
                             [il = logits.id, prob = std::move(prob), labels, n](Tape& tp, std::size_t self) {
                                 const double g = tp.grad(self)[0];
                                 auto& gi = tp.grad_buffer(il);
                                 for (std::size_t r = 0; r < prob.rows(); ++r)
                                     for (std::size_t c = 0; c < prob.cols(); ++c)
                                         gi(r, c) += g * (prob(r, c) - (c == labels[r] ? 1.0 : 0.0)) / n;
                             });
}

/// Mean binary cross-entropy of logits (n x 1) against 0/1 targets.
inline Var bce_with_logits(Var logits, const std::vector<double>& targets) {
    const auto& x = logits.value();
    detail::require(x.cols() == 1 && x.rows() == targets.size(), "bce_with_logits expects n x 1 logits");
    double loss = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double s = x[r];
        // log(1 + e^-|s|) + max(s, 0) - s * y
        loss += std::log1p(std::exp(-std::abs(s))) + std::max(s, 0.0) - s * targets[r];
    }
    const double n = static_cast<double>(x.rows());
    return logits.tape->push("bce_with_logits", Tensor::scalar(loss / n), {logits.id},
                             [il = logits.id, targets, n](Tape& tp, std::size_t self) {
                                 const double g = tp.grad(self)[0];
                                 const auto& x = tp.value(il);
                                 auto& gi = tp.grad_buffer(il);
                                 for (std::size_t r = 0; r < x.rows(); ++r) gi[r] += g * (sigmoid_scalar(x[r]) - targets[r]) / n;
                             });
}

} // namespace doufu::nn
