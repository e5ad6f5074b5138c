#pragma once

// Dense tensors of 64-bit floats on a recording graph, with reverse-mode
// differentiation. Shapes are rank 0..2; rank-1 tensors broadcast as row
// vectors where noted. Forward evaluation is eager and bit-deterministic:
// the same build sequence always yields the same values.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qrlab/errors.hpp"
#include "qrlab/params.hpp"

namespace qrlab {

class Graph;

/// Lightweight handle to one value in a Graph.
class Tensor {
public:
    Tensor() = default;

    bool defined() const { return graph_ != nullptr; }
    Graph* graph() const { return graph_; }
    std::uint32_t id() const { return id_; }

    const Shape& shape() const;
    int rows() const;
    int cols() const;
    std::size_t size() const;
    std::span<const double> values() const;
    double at(int i, int j) const;
    double item() const; // value of a single-element tensor

private:
    friend class Graph;
    Tensor(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

namespace detail {

enum class Op : std::uint8_t {
    Input,
    Param,
    Add,
    AddRow,
    Sub,
    Mul,
    Div,
    Affine,
    Matmul,
    MatmulNT,
    SoftmaxRows,
    LayerNorm,
    Softplus,
    Sigmoid,
    Abs,
    Min,
    Max,
    ClampMin,
    Sum,
    Rows,
    Cols,
    CrossEntropy,
};

constexpr std::uint32_t kNone = 0xffffffffu;

struct Node {
    Op op = Op::Input;
    int rows = 0, cols = 0;
    Shape shape;
    std::array<std::uint32_t, 3> in{kNone, kNone, kNone};
    std::vector<double> val;
    std::vector<double> grad;
    std::vector<double> aux; // op-specific saved forward state
    std::vector<int> idx;    // gather indices / class labels
    std::vector<double> wts; // per-row loss weights
    double c0 = 0.0, c1 = 0.0;
    int param = -1; // index into Graph::param_names_
};

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

} // namespace detail

/// Recording tape. One Graph per forward pass; not thread-shared.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        param_names_.clear();
        param_cache_.clear();
    }

    Tensor input(Shape shape, std::vector<double> data) {
        if (numel(shape) != data.size())
            throw ShapeError("input data length does not match shape");
        detail::Node n;
        set_shape(n, std::move(shape));
        n.val = std::move(data);
        return push(std::move(n));
    }

    Tensor constant(double v) { return input({1}, {v}); }

    Tensor zeros(Shape shape) {
        std::vector<double> d(numel(shape), 0.0);
        return input(std::move(shape), std::move(d));
    }

    /// Parameter leaf. Repeated requests for the same path return the same
    /// node, so gradients accumulate once per path.
    Tensor param(ParamStore& ps, const std::string& name) {
        auto it = param_cache_.find(name);
        if (it != param_cache_.end()) return Tensor(this, it->second);
        const auto& entry = ps.at(name);
        detail::Node n;
        n.op = detail::Op::Param;
        set_shape(n, entry.shape);
        n.val = entry.value;
        n.param = static_cast<int>(param_names_.size());
        Tensor t = push(std::move(n));
        param_names_.push_back(name);
        param_cache_.emplace(name, t.id());
        return t;
    }

    // ---- elementwise / structural ops -------------------------------------

    Tensor add(Tensor a, Tensor b) { return binary(detail::Op::Add, a, b); }
    Tensor sub(Tensor a, Tensor b) { return binary(detail::Op::Sub, a, b); }
    Tensor mul(Tensor a, Tensor b) { return binary(detail::Op::Mul, a, b); }
    Tensor div(Tensor a, Tensor b) { return binary(detail::Op::Div, a, b); }
    Tensor vmin(Tensor a, Tensor b) { return binary(detail::Op::Min, a, b); }
    Tensor vmax(Tensor a, Tensor b) { return binary(detail::Op::Max, a, b); }

    /// x [n,d] + row vector [d].
    Tensor add_row(Tensor a, Tensor r) {
        const auto& na = node(a);
        const auto& nr = node(r);
        if (nr.rows != 1 || nr.cols != na.cols)
            throw ShapeError("add_row: row vector length must equal column count");
        detail::Node n;
        n.op = detail::Op::AddRow;
        set_shape(n, na.shape);
        n.in = {a.id(), r.id(), detail::kNone};
        n.val.resize(na.val.size());
        for (int i = 0; i < na.rows; ++i)
            for (int j = 0; j < na.cols; ++j)
                n.val[static_cast<std::size_t>(i) * na.cols + j] =
                    na.val[static_cast<std::size_t>(i) * na.cols + j] + nr.val[j];
        return push(std::move(n));
    }

    /// alpha * x + beta, elementwise.
    Tensor affine(Tensor a, double alpha, double beta) {
        const auto& na = node(a);
        detail::Node n;
        n.op = detail::Op::Affine;
        set_shape(n, na.shape);
        n.in = {a.id(), detail::kNone, detail::kNone};
        n.c0 = alpha;
        n.c1 = beta;
        n.val.resize(na.val.size());
        for (std::size_t i = 0; i < na.val.size(); ++i) n.val[i] = alpha * na.val[i] + beta;
        return push(std::move(n));
    }

    Tensor softplus(Tensor a) {
        return unary(detail::Op::Softplus, a, [](double x) { return detail::stable_softplus(x); });
    }

    Tensor sigmoid(Tensor a) {
        return unary(detail::Op::Sigmoid, a, [](double x) { return detail::stable_sigmoid(x); });
    }

    Tensor vabs(Tensor a) {
        return unary(detail::Op::Abs, a, [](double x) { return std::fabs(x); });
    }

    Tensor clamp_min(Tensor a, double c) {
        Tensor t = unary(detail::Op::ClampMin, a, [c](double x) { return x > c ? x : c; });
        nodes_[t.id()].c0 = c;
        return t;
    }

    Tensor sum(Tensor a) {
        const auto& na = node(a);
        detail::Node n;
        n.op = detail::Op::Sum;
        set_shape(n, Shape{1});
        n.in = {a.id(), detail::kNone, detail::kNone};
        double s = 0.0;
        for (double v : na.val) s += v;
        n.val = {s};
        return push(std::move(n));
    }

    /// Row gather: out[r, :] = x[indices[r], :].
    Tensor rows(Tensor a, std::vector<int> indices) {
        const auto& na = node(a);
        for (int i : indices)
            if (i < 0 || i >= na.rows) throw ShapeError("rows: index out of range");
        detail::Node n;
        n.op = detail::Op::Rows;
        set_shape(n, Shape{static_cast<int>(indices.size()), na.cols});
        n.in = {a.id(), detail::kNone, detail::kNone};
        n.val.resize(indices.size() * static_cast<std::size_t>(na.cols));
        for (std::size_t r = 0; r < indices.size(); ++r)
            for (int j = 0; j < na.cols; ++j)
                n.val[r * na.cols + j] = na.val[static_cast<std::size_t>(indices[r]) * na.cols + j];
        n.idx = std::move(indices);
        return push(std::move(n));
    }

    /// Column slice [j0, j1).
    Tensor cols(Tensor a, int j0, int j1) {
        const auto& na = node(a);
        if (j0 < 0 || j1 > na.cols || j0 >= j1) throw ShapeError("cols: bad slice bounds");
        detail::Node n;
        n.op = detail::Op::Cols;
        set_shape(n, Shape{na.rows, j1 - j0});
        n.in = {a.id(), detail::kNone, detail::kNone};
        n.c0 = j0;
        n.val.resize(static_cast<std::size_t>(na.rows) * (j1 - j0));
        for (int i = 0; i < na.rows; ++i)
            for (int j = j0; j < j1; ++j)
                n.val[static_cast<std::size_t>(i) * (j1 - j0) + (j - j0)] =
                    na.val[static_cast<std::size_t>(i) * na.cols + j];
        return push(std::move(n));
    }

    // ---- linear algebra ---------------------------------------------------

    Tensor matmul(Tensor a, Tensor b) {
        const auto& na = node(a);
        const auto& nb = node(b);
        if (na.cols != nb.rows)
            throw ShapeError("matmul: inner dimensions disagree (" + shape_str(na) + " x " +
                             shape_str(nb) + ")");
        detail::Node n;
        n.op = detail::Op::Matmul;
        set_shape(n, Shape{na.rows, nb.cols});
        n.in = {a.id(), b.id(), detail::kNone};
        n.val.assign(static_cast<std::size_t>(na.rows) * nb.cols, 0.0);
        mm_acc(na.val.data(), nb.val.data(), n.val.data(), na.rows, na.cols, nb.cols);
        return push(std::move(n));
    }

    /// a [n,k] times b^T where b is [m,k]; result [n,m].
    Tensor matmul_nt(Tensor a, Tensor b) {
        const auto& na = node(a);
        const auto& nb = node(b);
        if (na.cols != nb.cols)
            throw ShapeError("matmul_nt: feature dimensions disagree (" + shape_str(na) + " x " +
                             shape_str(nb) + "^T)");
        detail::Node n;
        n.op = detail::Op::MatmulNT;
        set_shape(n, Shape{na.rows, nb.rows});
        n.in = {a.id(), b.id(), detail::kNone};
        n.val.resize(static_cast<std::size_t>(na.rows) * nb.rows);
        for (int i = 0; i < na.rows; ++i) {
            const double* ai = na.val.data() + static_cast<std::size_t>(i) * na.cols;
            double* out = n.val.data() + static_cast<std::size_t>(i) * nb.rows;
            for (int j = 0; j < nb.rows; ++j) {
                const double* bj = nb.val.data() + static_cast<std::size_t>(j) * nb.cols;
                double s = 0.0;
                for (int p = 0; p < na.cols; ++p) s += ai[p] * bj[p];
                out[j] = s;
            }
        }
        return push(std::move(n));
    }

    Tensor softmax_rows(Tensor a) {
        const auto& na = node(a);
        detail::Node n;
        n.op = detail::Op::SoftmaxRows;
        set_shape(n, na.shape);
        n.in = {a.id(), detail::kNone, detail::kNone};
        n.val.resize(na.val.size());
        for (int i = 0; i < na.rows; ++i) {
            const double* x = na.val.data() + static_cast<std::size_t>(i) * na.cols;
            double* y = n.val.data() + static_cast<std::size_t>(i) * na.cols;
            double m = x[0];
            for (int j = 1; j < na.cols; ++j) m = std::max(m, x[j]);
            double s = 0.0;
            for (int j = 0; j < na.cols; ++j) {
                y[j] = std::exp(x[j] - m);
                s += y[j];
            }
            const double inv = 1.0 / s;
            for (int j = 0; j < na.cols; ++j) y[j] *= inv;
        }
        return push(std::move(n));
    }

    /// Per-row normalization to mean 0, population variance 1, then an affine
    /// map by gain/bias (both length = column count). Epsilon 1e-5.
    Tensor layer_norm(Tensor x, Tensor gain, Tensor bias) {
        const auto& nx = node(x);
        const auto& ng = node(gain);
        const auto& nb = node(bias);
        if (ng.rows != 1 || nb.rows != 1 || ng.cols != nx.cols || nb.cols != nx.cols)
            throw ShapeError("layer_norm: gain/bias length must equal the last dimension");
        detail::Node n;
        n.op = detail::Op::LayerNorm;
        set_shape(n, nx.shape);
        n.in = {x.id(), gain.id(), bias.id()};
        const int d = nx.cols;
        n.val.resize(nx.val.size());
        n.aux.resize(nx.val.size() + nx.rows); // normalized values, then per-row 1/std
        double* xhat = n.aux.data();
        double* rstd = n.aux.data() + nx.val.size();
        for (int i = 0; i < nx.rows; ++i) {
            const double* xi = nx.val.data() + static_cast<std::size_t>(i) * d;
            double mean = 0.0;
            for (int j = 0; j < d; ++j) mean += xi[j];
            mean /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                const double c = xi[j] - mean;
                var += c * c;
            }
            var /= d;
            const double r = 1.0 / std::sqrt(var + kLayerNormEps);
            rstd[i] = r;
            double* hi = xhat + static_cast<std::size_t>(i) * d;
            double* yi = n.val.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) {
                hi[j] = (xi[j] - mean) * r;
                yi[j] = hi[j] * ng.val[j] + nb.val[j];
            }
        }
        return push(std::move(n));
    }

    /// Weighted softmax cross-entropy over rows: sum_i w[i] * nll(logits[i], labels[i]).
    Tensor cross_entropy_rows(Tensor logits, std::vector<int> labels, std::vector<double> weights) {
        const auto& nl = node(logits);
        if (static_cast<int>(labels.size()) != nl.rows || weights.size() != labels.size())
            throw ShapeError("cross_entropy_rows: one label and weight per row required");
        for (int c : labels)
            if (c < 0 || c >= nl.cols) throw ShapeError("cross_entropy_rows: label out of range");
        detail::Node n;
        n.op = detail::Op::CrossEntropy;
        set_shape(n, Shape{1});
        n.in = {logits.id(), detail::kNone, detail::kNone};
        n.aux.resize(nl.val.size()); // softmax probabilities
        double total = 0.0;
        for (int i = 0; i < nl.rows; ++i) {
            const double* z = nl.val.data() + static_cast<std::size_t>(i) * nl.cols;
            double* p = n.aux.data() + static_cast<std::size_t>(i) * nl.cols;
            double m = z[0];
            for (int j = 1; j < nl.cols; ++j) m = std::max(m, z[j]);
            double s = 0.0;
            for (int j = 0; j < nl.cols; ++j) {
                p[j] = std::exp(z[j] - m);
                s += p[j];
            }
            const double inv = 1.0 / s;
            for (int j = 0; j < nl.cols; ++j) p[j] *= inv;
            total += weights[static_cast<std::size_t>(i)] * (std::log(s) + m - z[labels[static_cast<std::size_t>(i)]]);
        }
        n.val = {total};
        n.idx = std::move(labels);
        n.wts = std::move(weights);
        return push(std::move(n));
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates d(loss)/d(param) into the store for every parameter leaf
    /// reachable from `loss`. Loss must hold exactly one element.
    void backward_into(std::uint32_t loss_id, ParamStore& ps) {
        if (nodes_[loss_id].val.size() != 1)
            throw ContractError("backward requires a scalar loss");

        // Reachability from the loss over input edges.
        std::vector<char> reach(nodes_.size(), 0);
        std::vector<std::uint32_t> stack{loss_id};
        reach[loss_id] = 1;
        while (!stack.empty()) {
            const std::uint32_t u = stack.back();
            stack.pop_back();
            for (std::uint32_t v : nodes_[u].in) {
                if (v != detail::kNone && !reach[v]) {
                    reach[v] = 1;
                    stack.push_back(v);
                }
            }
        }

        for (std::uint32_t i = 0; i < nodes_.size(); ++i)
            if (reach[i]) nodes_[i].grad.assign(nodes_[i].val.size(), 0.0);
        nodes_[loss_id].grad[0] = 1.0;

        for (std::uint32_t i = loss_id + 1; i-- > 0;) {
            if (!reach[i]) continue;
            pull_gradients(nodes_[i]);
        }

        for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
            const auto& n = nodes_[i];
            if (n.param < 0 || !reach[i]) continue;
            auto& entry = ps.at(param_names_[static_cast<std::size_t>(n.param)]);
            if (entry.grad.size() != n.grad.size())
                throw ContractError("gradient shape does not match parameter shape");
            for (std::size_t k = 0; k < n.grad.size(); ++k) entry.grad[k] += n.grad[k];
        }
    }

    // ---- access -----------------------------------------------------------

    const detail::Node& node(const Tensor& t) const { return nodes_[t.id()]; }
    const detail::Node& node(std::uint32_t id) const { return nodes_[id]; }

    static constexpr double kLayerNormEps = 1e-5;

private:
    friend class Tensor;

    Tensor push(detail::Node&& n) {
        nodes_.push_back(std::move(n));
        return Tensor(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    }

    static void set_shape(detail::Node& n, Shape shape) {
        n.shape = std::move(shape);
        if (n.shape.empty()) {
            n.rows = 1;
            n.cols = 1;
        } else if (n.shape.size() == 1) {
            n.rows = 1;
            n.cols = n.shape[0];
        } else if (n.shape.size() == 2) {
            n.rows = n.shape[0];
            n.cols = n.shape[1];
        } else {
            throw ShapeError("rank above 2 is not supported");
        }
    }

    static std::string shape_str(const detail::Node& n) {
        return std::to_string(n.rows) + "x" + std::to_string(n.cols);
    }

    detail::Node& node_mut(const Tensor& t) { return nodes_[t.id()]; }

    void check_same_graph(const Tensor& a) const {
        if (a.graph() != this) throw ContractError("tensors belong to different graphs");
    }

    Tensor binary(detail::Op op, Tensor a, Tensor b) {
        check_same_graph(a);
        check_same_graph(b);
        const auto& na = node(a);
        const auto& nb = node(b);
        if (na.rows != nb.rows || na.cols != nb.cols)
            throw ShapeError("elementwise op: shapes disagree (" + shape_str(na) + " vs " +
                             shape_str(nb) + ")");
        detail::Node n;
        n.op = op;
        set_shape(n, na.shape);
        n.in = {a.id(), b.id(), detail::kNone};
        n.val.resize(na.val.size());
        const double* x = na.val.data();
        const double* y = nb.val.data();
        double* out = n.val.data();
        const std::size_t count = n.val.size();
        switch (op) {
        case detail::Op::Add:
            for (std::size_t i = 0; i < count; ++i) out[i] = x[i] + y[i];
            break;
        case detail::Op::Sub:
            for (std::size_t i = 0; i < count; ++i) out[i] = x[i] - y[i];
            break;
        case detail::Op::Mul:
            for (std::size_t i = 0; i < count; ++i) out[i] = x[i] * y[i];
            break;
        case detail::Op::Div:
            for (std::size_t i = 0; i < count; ++i) out[i] = x[i] / y[i];
            break;
        case detail::Op::Min:
            for (std::size_t i = 0; i < count; ++i) out[i] = x[i] <= y[i] ? x[i] : y[i];
            break;
        case detail::Op::Max:
            for (std::size_t i = 0; i < count; ++i) out[i] = x[i] >= y[i] ? x[i] : y[i];
            break;
        default:
            throw ContractError("not a binary op");
        }
        return push(std::move(n));
    }

    template <typename F>
    Tensor unary(detail::Op op, Tensor a, F&& f) {
        check_same_graph(a);
        const auto& na = node(a);
        detail::Node n;
        n.op = op;
        set_shape(n, na.shape);
        n.in = {a.id(), detail::kNone, detail::kNone};
        n.val.resize(na.val.size());
        for (std::size_t i = 0; i < na.val.size(); ++i) n.val[i] = f(na.val[i]);
        return push(std::move(n));
    }

    // C += A * B with the j-contiguous inner loop.
    static void mm_acc(const double* a, const double* b, double* c, int n, int k, int m) {
        for (int i = 0; i < n; ++i) {
            const double* ai = a + static_cast<std::size_t>(i) * k;
            double* ci = c + static_cast<std::size_t>(i) * m;
            for (int p = 0; p < k; ++p) {
                const double av = ai[p];
                const double* bp = b + static_cast<std::size_t>(p) * m;
                for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
            }
        }
    }

    void pull_gradients(detail::Node& n) {
        using detail::Op;
        if (n.op == Op::Input || n.op == Op::Param) return;
        detail::Node& a = nodes_[n.in[0]];
        const double* g = n.grad.data();
        switch (n.op) {
        case Op::Add: {
            detail::Node& b = nodes_[n.in[1]];
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                a.grad[i] += g[i];
                b.grad[i] += g[i];
            }
            break;
        }
        case Op::Sub: {
            detail::Node& b = nodes_[n.in[1]];
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                a.grad[i] += g[i];
                b.grad[i] -= g[i];
            }
            break;
        }
        case Op::Mul: {
            detail::Node& b = nodes_[n.in[1]];
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                a.grad[i] += g[i] * b.val[i];
                b.grad[i] += g[i] * a.val[i];
            }
            break;
        }
        case Op::Div: {
            detail::Node& b = nodes_[n.in[1]];
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                a.grad[i] += g[i] / b.val[i];
                b.grad[i] -= g[i] * n.val[i] / b.val[i];
            }
            break;
        }
        case Op::Min: {
            detail::Node& b = nodes_[n.in[1]];
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (a.val[i] <= b.val[i])
                    a.grad[i] += g[i];
                else
                    b.grad[i] += g[i];
            }
            break;
        }
        case Op::Max: {
            detail::Node& b = nodes_[n.in[1]];
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (a.val[i] >= b.val[i])
                    a.grad[i] += g[i];
                else
                    b.grad[i] += g[i];
            }
            break;
        }
        case Op::AddRow: {
            detail::Node& r = nodes_[n.in[1]];
            for (int i = 0; i < n.rows; ++i)
                for (int j = 0; j < n.cols; ++j) {
                    const double gv = g[static_cast<std::size_t>(i) * n.cols + j];
                    a.grad[static_cast<std::size_t>(i) * n.cols + j] += gv;
                    r.grad[j] += gv;
                }
            break;
        }
        case Op::Affine:
            for (std::size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.c0 * g[i];
            break;
        case Op::Softplus:
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                a.grad[i] += g[i] * detail::stable_sigmoid(a.val[i]);
            break;
        case Op::Sigmoid:
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                a.grad[i] += g[i] * n.val[i] * (1.0 - n.val[i]);
            break;
        case Op::Abs:
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (a.val[i] > 0.0)
                    a.grad[i] += g[i];
                else if (a.val[i] < 0.0)
                    a.grad[i] -= g[i];
            }
            break;
        case Op::ClampMin:
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (a.val[i] > n.c0) a.grad[i] += g[i];
            break;
        case Op::Sum:
            for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += g[0];
            break;
        case Op::Rows:
            for (std::size_t r = 0; r < n.idx.size(); ++r)
                for (int j = 0; j < n.cols; ++j)
                    a.grad[static_cast<std::size_t>(n.idx[r]) * a.cols + j] += g[r * n.cols + j];
            break;
        case Op::Cols: {
            const int j0 = static_cast<int>(n.c0);
            for (int i = 0; i < n.rows; ++i)
                for (int j = 0; j < n.cols; ++j)
                    a.grad[static_cast<std::size_t>(i) * a.cols + j0 + j] +=
                        g[static_cast<std::size_t>(i) * n.cols + j];
            break;
        }
        case Op::Matmul: {
            detail::Node& b = nodes_[n.in[1]];
            // dA[i,p] += sum_j G[i,j] B[p,j]
            for (int i = 0; i < a.rows; ++i) {
                const double* gi = g + static_cast<std::size_t>(i) * n.cols;
                double* dai = a.grad.data() + static_cast<std::size_t>(i) * a.cols;
                for (int p = 0; p < a.cols; ++p) {
                    const double* bp = b.val.data() + static_cast<std::size_t>(p) * b.cols;
                    double s = 0.0;
                    for (int j = 0; j < n.cols; ++j) s += gi[j] * bp[j];
                    dai[p] += s;
                }
            }
            // dB[p,j] += sum_i A[i,p] G[i,j]
            for (int i = 0; i < a.rows; ++i) {
                const double* ai = a.val.data() + static_cast<std::size_t>(i) * a.cols;
                const double* gi = g + static_cast<std::size_t>(i) * n.cols;
                for (int p = 0; p < a.cols; ++p) {
                    const double av = ai[p];
                    double* dbp = b.grad.data() + static_cast<std::size_t>(p) * b.cols;
                    for (int j = 0; j < n.cols; ++j) dbp[j] += av * gi[j];
                }
            }
            break;
        }
        case Op::MatmulNT: {
            detail::Node& b = nodes_[n.in[1]];
            // out[i,j] = sum_p A[i,p] B[j,p]
            for (int i = 0; i < a.rows; ++i) {
                const double* gi = g + static_cast<std::size_t>(i) * n.cols;
                double* dai = a.grad.data() + static_cast<std::size_t>(i) * a.cols;
                const double* ai = a.val.data() + static_cast<std::size_t>(i) * a.cols;
                for (int j = 0; j < n.cols; ++j) {
                    const double gv = gi[j];
                    if (gv == 0.0) continue;
                    const double* bj = b.val.data() + static_cast<std::size_t>(j) * b.cols;
                    double* dbj = b.grad.data() + static_cast<std::size_t>(j) * b.cols;
                    for (int p = 0; p < a.cols; ++p) {
                        dai[p] += gv * bj[p];
                        dbj[p] += gv * ai[p];
                    }
                }
            }
            break;
        }
        case Op::SoftmaxRows:
            for (int i = 0; i < n.rows; ++i) {
                const double* y = n.val.data() + static_cast<std::size_t>(i) * n.cols;
                const double* gi = g + static_cast<std::size_t>(i) * n.cols;
                double dot = 0.0;
                for (int j = 0; j < n.cols; ++j) dot += gi[j] * y[j];
                double* da = a.grad.data() + static_cast<std::size_t>(i) * n.cols;
                for (int j = 0; j < n.cols; ++j) da[j] += y[j] * (gi[j] - dot);
            }
            break;
        case Op::LayerNorm: {
            detail::Node& gain = nodes_[n.in[1]];
            detail::Node& bias = nodes_[n.in[2]];
            const int d = n.cols;
            const double* xhat = n.aux.data();
            const double* rstd = n.aux.data() + n.val.size();
            for (int i = 0; i < n.rows; ++i) {
                const double* gi = g + static_cast<std::size_t>(i) * d;
                const double* hi = xhat + static_cast<std::size_t>(i) * d;
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double dh = gi[j] * gain.val[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hi[j];
                    gain.grad[j] += gi[j] * hi[j];
                    bias.grad[j] += gi[j];
                }
                mean_dh /= d;
                mean_dh_h /= d;
                double* da = a.grad.data() + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) {
                    const double dh = gi[j] * gain.val[j];
                    da[j] += rstd[i] * (dh - mean_dh - hi[j] * mean_dh_h);
                }
            }
            break;
        }
        case Op::CrossEntropy: {
            const double gv = g[0];
            for (int i = 0; i < a.rows; ++i) {
                const double w = gv * n.wts[static_cast<std::size_t>(i)];
                const double* p = n.aux.data() + static_cast<std::size_t>(i) * a.cols;
                double* da = a.grad.data() + static_cast<std::size_t>(i) * a.cols;
                for (int j = 0; j < a.cols; ++j) da[j] += w * p[j];
                da[n.idx[static_cast<std::size_t>(i)]] -= w;
            }
            break;
        }
        default:
            break;
        }
    }

    std::vector<detail::Node> nodes_;
    std::vector<std::string> param_names_;
    std::unordered_map<std::string, std::uint32_t> param_cache_;
};

inline const Shape& Tensor::shape() const { return graph_->node(*this).shape; }
inline int Tensor::rows() const { return graph_->node(*this).rows; }
inline int Tensor::cols() const { return graph_->node(*this).cols; }
inline std::size_t Tensor::size() const { return graph_->node(*this).val.size(); }
inline std::span<const double> Tensor::values() const { return graph_->node(*this).val; }
inline double Tensor::at(int i, int j) const {
    return graph_->node(*this).val[static_cast<std::size_t>(i) * cols() + j];
}
inline double Tensor::item() const {
    const auto& n = graph_->node(*this);
    if (n.val.size() != 1) throw ContractError("item() requires a single-element tensor");
    return n.val[0];
}

// ---- free-function surface ------------------------------------------------

inline Tensor add(Tensor a, Tensor b) { return a.graph()->add(a, b); }
inline Tensor sub(Tensor a, Tensor b) { return a.graph()->sub(a, b); }
inline Tensor mul(Tensor a, Tensor b) { return a.graph()->mul(a, b); }
inline Tensor div(Tensor a, Tensor b) { return a.graph()->div(a, b); }
inline Tensor vmin(Tensor a, Tensor b) { return a.graph()->vmin(a, b); }
inline Tensor vmax(Tensor a, Tensor b) { return a.graph()->vmax(a, b); }
inline Tensor add_row(Tensor a, Tensor r) { return a.graph()->add_row(a, r); }
inline Tensor affine(Tensor a, double alpha, double beta) { return a.graph()->affine(a, alpha, beta); }
inline Tensor scale(Tensor a, double alpha) { return a.graph()->affine(a, alpha, 0.0); }
inline Tensor softplus(Tensor a) { return a.graph()->softplus(a); }
inline Tensor sigmoid(Tensor a) { return a.graph()->sigmoid(a); }
inline Tensor vabs(Tensor a) { return a.graph()->vabs(a); }
inline Tensor clamp_min(Tensor a, double c) { return a.graph()->clamp_min(a, c); }
inline Tensor sum(Tensor a) { return a.graph()->sum(a); }
inline Tensor rows(Tensor a, std::vector<int> indices) { return a.graph()->rows(a, std::move(indices)); }
inline Tensor cols(Tensor a, int j0, int j1) { return a.graph()->cols(a, j0, j1); }
inline Tensor matmul(Tensor a, Tensor b) { return a.graph()->matmul(a, b); }
inline Tensor matmul_nt(Tensor a, Tensor b) { return a.graph()->matmul_nt(a, b); }
inline Tensor softmax_rows(Tensor a) { return a.graph()->softmax_rows(a); }
inline Tensor layer_norm(Tensor x, Tensor gain, Tensor bias) {
    return x.graph()->layer_norm(x, gain, bias);
}
inline Tensor cross_entropy_rows(Tensor logits, std::vector<int> labels,
                                 std::vector<double> weights) {
    return logits.graph()->cross_entropy_rows(logits, std::move(labels), std::move(weights));
}

inline Tensor operator+(Tensor a, Tensor b) { return add(a, b); }
inline Tensor operator-(Tensor a, Tensor b) { return sub(a, b); }
inline Tensor operator*(Tensor a, Tensor b) { return mul(a, b); }

/// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
/// Single head; rows of the softmax matrix sum to 1.
inline Tensor attention(Tensor queries, Tensor keys, Tensor values) {
    if (keys.rows() < 1) throw ContractError("attention requires at least one key");
    if (queries.cols() != keys.cols())
        throw ShapeError("attention: query/key feature dimensions disagree");
    if (keys.rows() != values.rows())
        throw ShapeError("attention: key and value counts disagree");
    Tensor scores = scale(matmul_nt(queries, keys), 1.0 / std::sqrt(static_cast<double>(queries.cols())));
    return matmul(softmax_rows(scores), values);
}

/// Two-layer perceptron with a softplus rectifier between the affine maps.
/// Parameters live under `path/fc1/{w,b}` and `path/fc2/{w,b}`.
inline Tensor mlp(Tensor x, ParamStore& params, const std::string& path) {
    Graph* g = x.graph();
    Tensor h = add_row(matmul(x, g->param(params, path + "/fc1/w")), g->param(params, path + "/fc1/b"));
    h = softplus(h);
    return add_row(matmul(h, g->param(params, path + "/fc2/w")), g->param(params, path + "/fc2/b"));
}

/// Reverse pass from a scalar loss; gradients accumulate into `params`.
inline void backward(const Tensor& loss, ParamStore& params) {
    loss.graph()->backward_into(loss.id(), params);
}

} // namespace qrlab
