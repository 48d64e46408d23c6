#include "avflow/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace avflow {

namespace {

using detail::Node;
using detail::Op;

using ConstMat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void check_defined(const Tensor& t, const char* who) {
    if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

Graph* resolve_graph(std::initializer_list<const Tensor*> inputs) {
    Graph* g = nullptr;
    for (const Tensor* t : inputs) {
        if (t->graph() != nullptr) {
            if (g != nullptr && g != t->graph())
                throw ContractError("op inputs belong to different graphs");
            g = t->graph();
        }
    }
    return g;
}

int ensure_node(Graph& g, const Tensor& t) {
    if (t.graph() == &g) return t.node_id();
    return g.leaf(t, false).node_id();
}

// Shared shape plumbing for (optionally leading-dim broadcast) matmul.
struct MatmulPlan {
    std::int64_t batch = 1;
    std::int64_t m = 0, k = 0, n = 0;
    bool a_broadcast = false;
    bool b_broadcast = false;
    Shape out_shape;
};

MatmulPlan plan_matmul(const Shape& a, const Shape& b) {
    if (a.size() < 2 || b.size() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a) + " x " + shape_str(b));
    MatmulPlan p;
    p.m = a[a.size() - 2];
    p.k = a[a.size() - 1];
    const std::int64_t k2 = b[b.size() - 2];
    p.n = b[b.size() - 1];
    if (p.k != k2)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a) + " x " + shape_str(b));
    const Shape lead_a(a.begin(), a.end() - 2);
    const Shape lead_b(b.begin(), b.end() - 2);
    if (lead_a == lead_b) {
        p.out_shape = lead_a;
    } else if (lead_a.empty()) {
        p.a_broadcast = true;
        p.out_shape = lead_b;
    } else if (lead_b.empty()) {
        p.b_broadcast = true;
        p.out_shape = lead_a;
    } else {
        throw ShapeError("matmul: incompatible leading dimensions, " + shape_str(a) + " x " + shape_str(b));
    }
    p.batch = shape_size(p.out_shape);
    p.out_shape.push_back(static_cast<int>(p.m));
    p.out_shape.push_back(static_cast<int>(p.n));
    return p;
}

std::int64_t rows_of(const Shape& shape) {
    if (shape.empty()) throw ShapeError("operation needs a trailing axis, got scalar");
    std::int64_t rows = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
    return rows;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + ": shapes disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
    for (int d : shape_) {
        if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
    }
    if (shape_size(shape_) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)), 0.0);
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)), value);
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
    for (double& x : v) x = rng.normal() * stddev;
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

int Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const { return shape_size(shape_); }

double Tensor::item() const {
    if (!defined() || size() != 1) throw ContractError("item(): tensor is not scalar");
    return (*data_)[0];
}

bool Tensor::all_finite() const {
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::with_shape(Shape new_shape) const {
    if (shape_size(new_shape) != size())
        throw ShapeError("with_shape: " + shape_str(shape_) + " cannot view as " + shape_str(new_shape));
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
}

namespace {
std::uint64_t next_graph_uid() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace

Graph::Graph() : uid_(next_graph_uid()) {}

const Tensor& Gradients::at(const Tensor& t) const { return at_node(t.node_id()); }

const Tensor& Gradients::at_node(int node_id) const {
    auto it = by_node_.find(node_id);
    if (it == by_node_.end()) throw ContractError("no gradient recorded for node " + std::to_string(node_id));
    return it->second;
}

Tensor Graph::leaf(const Tensor& source, bool requires_grad) {
    check_defined(source, "Graph::leaf");
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    n.value = source;
    return record(std::move(n));
}

Tensor Graph::record(Node node) {
    const int id = static_cast<int>(nodes_.size());
    node.value.graph_ = this;
    node.value.node_ = id;
    node.value.requires_grad_ = node.requires_grad;
    nodes_.push_back(std::move(node));
    return nodes_.back().value;
}

namespace {

// Forward value computation shared by the op wrappers. Each returns a plain
// value vector; the wrapper decides whether a node gets recorded.

std::vector<double> matmul_values(const MatmulPlan& p, const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(static_cast<std::size_t>(p.batch * p.m * p.n));
    for (std::int64_t bi = 0; bi < p.batch; ++bi) {
        ConstMat A(a.data() + (p.a_broadcast ? 0 : bi * p.m * p.k), p.m, p.k);
        ConstMat B(b.data() + (p.b_broadcast ? 0 : bi * p.k * p.n), p.k, p.n);
        MutMat C(out.data() + bi * p.m * p.n, p.m, p.n);
        C.noalias() = A * B;
    }
    return out;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

Tensor record_unary(Graph* g, Op op, const Tensor& x, Tensor result, double scalar = 0.0) {
    if (g == nullptr) return result;
    Node n;
    n.op = op;
    n.inputs = {ensure_node(*g, x)};
    n.requires_grad = g->node(n.inputs[0]).requires_grad;
    n.scalar = scalar;
    n.value = std::move(result);
    return g->record(std::move(n));
}

Tensor record_binary(Graph* g, Op op, const Tensor& a, const Tensor& b, Tensor result) {
    if (g == nullptr) return result;
    Node n;
    n.op = op;
    n.inputs = {ensure_node(*g, a), ensure_node(*g, b)};
    n.requires_grad = g->node(n.inputs[0]).requires_grad || g->node(n.inputs[1]).requires_grad;
    n.value = std::move(result);
    return g->record(std::move(n));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    const MatmulPlan p = plan_matmul(a.shape(), b.shape());
    Tensor out(p.out_shape, matmul_values(p, a.values(), b.values()));
    return record_binary(resolve_graph({&a, &b}), Op::MatMul, a, b, std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    std::vector<double> v(a.values());
    const std::vector<double>& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
    return record_binary(resolve_graph({&a, &b}), Op::Add, a, b, Tensor(a.shape(), std::move(v)));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.values());
    const std::vector<double>& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
    return record_binary(resolve_graph({&a, &b}), Op::Sub, a, b, Tensor(a.shape(), std::move(v)));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.values());
    const std::vector<double>& bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
    return record_binary(resolve_graph({&a, &b}), Op::Mul, a, b, Tensor(a.shape(), std::move(v)));
}

Tensor scale(const Tensor& a, double factor) {
    check_defined(a, "scale");
    std::vector<double> v(a.values());
    for (double& x : v) x *= factor;
    return record_unary(a.graph(), Op::Scale, a, Tensor(a.shape(), std::move(v)), factor);
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    check_defined(x, "add_bias");
    check_defined(bias, "add_bias");
    if (bias.rank() != 1 || x.rank() < 1 || bias.dim(0) != x.shape().back())
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match trailing axis of " + shape_str(x.shape()));
    const std::int64_t d = bias.dim(0);
    const std::int64_t rows = rows_of(x.shape());
    std::vector<double> v(x.values());
    const std::vector<double>& bv = bias.values();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) v[static_cast<std::size_t>(r * d + j)] += bv[static_cast<std::size_t>(j)];
    return record_binary(resolve_graph({&x, &bias}), Op::AddBias, x, bias, Tensor(x.shape(), std::move(v)));
}

Tensor mul_bias(const Tensor& x, const Tensor& gain) {
    check_defined(x, "mul_bias");
    check_defined(gain, "mul_bias");
    if (gain.rank() != 1 || x.rank() < 1 || gain.dim(0) != x.shape().back())
        throw ShapeError("mul_bias: gain " + shape_str(gain.shape()) + " does not match trailing axis of " + shape_str(x.shape()));
    const std::int64_t d = gain.dim(0);
    const std::int64_t rows = rows_of(x.shape());
    std::vector<double> v(x.values());
    const std::vector<double>& gv = gain.values();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) v[static_cast<std::size_t>(r * d + j)] *= gv[static_cast<std::size_t>(j)];
    return record_binary(resolve_graph({&x, &gain}), Op::MulBias, x, gain, Tensor(x.shape(), std::move(v)));
}

Tensor sigmoid(const Tensor& x) {
    check_defined(x, "sigmoid");
    std::vector<double> v(x.values());
    for (double& e : v) e = stable_sigmoid(e);
    return record_unary(x.graph(), Op::Sigmoid, x, Tensor(x.shape(), std::move(v)));
}

Tensor softmax_last(const Tensor& x) {
    check_defined(x, "softmax");
    if (x.rank() < 1) throw ShapeError("softmax: scalar input");
    const std::int64_t d = x.shape().back();
    const std::int64_t rows = rows_of(x.shape());
    std::vector<double> v(x.values());
    for (std::int64_t r = 0; r < rows; ++r) {
        double* row = v.data() + r * d;
        double mx = row[0];
        for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::int64_t j = 0; j < d; ++j) row[j] /= sum;
    }
    return record_unary(x.graph(), Op::Softmax, x, Tensor(x.shape(), std::move(v)));
}

Tensor layer_norm(const Tensor& x, double eps) {
    check_defined(x, "layer_norm");
    if (x.rank() < 1) throw ShapeError("layer_norm: scalar input has no feature axis");
    if (eps <= 0.0) throw DomainError("layer_norm: eps must be positive");
    const std::int64_t d = x.shape().back();
    const std::int64_t rows = rows_of(x.shape());
    std::vector<double> v(x.values());
    std::vector<double> aux(static_cast<std::size_t>(2 * rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        double* row = v.data() + r * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv_std;
        aux[static_cast<std::size_t>(2 * r)] = mean;
        aux[static_cast<std::size_t>(2 * r + 1)] = inv_std;
    }
    Graph* g = x.graph();
    Tensor out(x.shape(), std::move(v));
    if (g == nullptr) return out;
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {ensure_node(*g, x)};
    n.requires_grad = g->node(n.inputs[0]).requires_grad;
    n.scalar = eps;
    n.aux = std::move(aux);
    n.value = std::move(out);
    return g->record(std::move(n));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    const int rank = static_cast<int>(first.size());
    if (axis < 0 || axis >= rank) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
    int total = 0;
    for (const Tensor& p : parts) {
        check_defined(p, "concat");
        if (p.rank() != rank) throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
        for (int ax = 0; ax < rank; ++ax) {
            if (ax != axis && p.shape()[static_cast<std::size_t>(ax)] != first[static_cast<std::size_t>(ax)])
                throw ShapeError("concat: shapes disagree off-axis, " + shape_str(p.shape()) + " vs " + shape_str(first));
        }
        total += p.shape()[static_cast<std::size_t>(axis)];
    }
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(axis)] = total;

    std::int64_t outer = 1, inner = 1;
    for (int ax = 0; ax < axis; ++ax) outer *= first[static_cast<std::size_t>(ax)];
    for (int ax = axis + 1; ax < rank; ++ax) inner *= first[static_cast<std::size_t>(ax)];

    std::vector<double> v(static_cast<std::size_t>(shape_size(out_shape)));
    const std::int64_t out_row = static_cast<std::int64_t>(total) * inner;
    std::int64_t at = 0;
    for (const Tensor& p : parts) {
        const std::int64_t chunk = static_cast<std::int64_t>(p.shape()[static_cast<std::size_t>(axis)]) * inner;
        const std::vector<double>& pv = p.values();
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(v.data() + o * out_row + at, pv.data() + o * chunk, static_cast<std::size_t>(chunk) * sizeof(double));
        at += chunk;
    }

    Graph* g = nullptr;
    for (const Tensor& p : parts) {
        if (p.graph() != nullptr) {
            if (g != nullptr && g != p.graph()) throw ContractError("concat inputs belong to different graphs");
            g = p.graph();
        }
    }
    Tensor out(out_shape, std::move(v));
    if (g == nullptr) return out;
    Node n;
    n.op = Op::Concat;
    n.axis = axis;
    bool req = false;
    for (const Tensor& p : parts) {
        n.inputs.push_back(ensure_node(*g, p));
        req = req || g->node(n.inputs.back()).requires_grad;
    }
    n.requires_grad = req;
    n.value = std::move(out);
    return g->record(std::move(n));
}

Tensor slice(const Tensor& x, int axis, int offset, int extent) {
    check_defined(x, "slice");
    if (axis < 0 || axis >= x.rank()) throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    const int d = x.dim(axis);
    if (offset < 0 || extent < 1 || offset + extent > d)
        throw ShapeError("slice: range [" + std::to_string(offset) + "," + std::to_string(offset + extent) + ") exceeds axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = extent;

    std::int64_t outer = 1, inner = 1;
    for (int ax = 0; ax < axis; ++ax) outer *= x.shape()[static_cast<std::size_t>(ax)];
    for (int ax = axis + 1; ax < x.rank(); ++ax) inner *= x.shape()[static_cast<std::size_t>(ax)];

    std::vector<double> v(static_cast<std::size_t>(shape_size(out_shape)));
    const std::int64_t in_row = static_cast<std::int64_t>(d) * inner;
    const std::int64_t out_chunk = static_cast<std::int64_t>(extent) * inner;
    const std::vector<double>& xv = x.values();
    for (std::int64_t o = 0; o < outer; ++o)
        std::memcpy(v.data() + o * out_chunk, xv.data() + o * in_row + static_cast<std::int64_t>(offset) * inner,
                    static_cast<std::size_t>(out_chunk) * sizeof(double));

    Graph* g = x.graph();
    Tensor out(out_shape, std::move(v));
    if (g == nullptr) return out;
    Node n;
    n.op = Op::Slice;
    n.axis = axis;
    n.offset = offset;
    n.inputs = {ensure_node(*g, x)};
    n.requires_grad = g->node(n.inputs[0]).requires_grad;
    n.value = std::move(out);
    return g->record(std::move(n));
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes) {
    check_defined(x, "split");
    if (axis < 0 || axis >= x.rank()) throw ShapeError("split: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    int total = 0;
    for (int s : sizes) {
        if (s < 1) throw ShapeError("split: sizes must be positive");
        total += s;
    }
    if (total != x.dim(axis))
        throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis " + std::to_string(axis) + " of " + shape_str(x.shape()) + " has extent " + std::to_string(x.dim(axis)));
    std::vector<Tensor> out;
    out.reserve(sizes.size());
    int at = 0;
    for (int s : sizes) {
        out.push_back(slice(x, axis, at, s));
        at += s;
    }
    return out;
}

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
    check_defined(x, "transpose");
    const int r = x.rank();
    auto norm = [r](int ax) { return ax < 0 ? ax + r : ax; };
    const int a = norm(axis_a);
    const int b = norm(axis_b);
    if (a < 0 || a >= r || b < 0 || b >= r) throw ShapeError("transpose: axes out of range for " + shape_str(x.shape()));
    if (a == b) throw ShapeError("transpose: axes must differ");
    Shape out_shape = x.shape();
    std::swap(out_shape[static_cast<std::size_t>(a)], out_shape[static_cast<std::size_t>(b)]);

    std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int ax = r - 2; ax >= 0; --ax)
        in_strides[static_cast<std::size_t>(ax)] = in_strides[static_cast<std::size_t>(ax + 1)] * x.shape()[static_cast<std::size_t>(ax + 1)];
    std::vector<std::int64_t> src_stride_for_out(in_strides);
    std::swap(src_stride_for_out[static_cast<std::size_t>(a)], src_stride_for_out[static_cast<std::size_t>(b)]);

    const std::int64_t n = x.size();
    std::vector<double> v(static_cast<std::size_t>(n));
    const std::vector<double>& xv = x.values();
    std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        v[static_cast<std::size_t>(i)] = xv[static_cast<std::size_t>(src)];
        for (int ax = r - 1; ax >= 0; --ax) {
            coord[static_cast<std::size_t>(ax)]++;
            src += src_stride_for_out[static_cast<std::size_t>(ax)];
            if (coord[static_cast<std::size_t>(ax)] < out_shape[static_cast<std::size_t>(ax)]) break;
            src -= src_stride_for_out[static_cast<std::size_t>(ax)] * coord[static_cast<std::size_t>(ax)];
            coord[static_cast<std::size_t>(ax)] = 0;
        }
    }

    Graph* g = x.graph();
    Tensor out(out_shape, std::move(v));
    if (g == nullptr) return out;
    Node n2;
    n2.op = Op::Transpose;
    n2.axis = a;
    n2.axis2 = b;
    n2.inputs = {ensure_node(*g, x)};
    n2.requires_grad = g->node(n2.inputs[0]).requires_grad;
    n2.value = std::move(out);
    return g->record(std::move(n2));
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    check_defined(x, "reshape");
    if (shape_size(new_shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " has " + std::to_string(x.size()) + " elements, target " + shape_str(new_shape) + " has " + std::to_string(shape_size(new_shape)));
    // Row-major relayout is a no-op; share the storage.
    Tensor out = x.with_shape(std::move(new_shape));
    Graph* g = x.graph();
    if (g == nullptr) return out;
    Node n;
    n.op = Op::Reshape;
    n.inputs = {ensure_node(*g, x)};
    n.requires_grad = g->node(n.inputs[0]).requires_grad;
    n.value = std::move(out);
    return g->record(std::move(n));
}

Tensor mean_sq(const Tensor& x) {
    check_defined(x, "mean_sq");
    const std::vector<double>& xv = x.values();
    double acc = 0.0;
    for (double v : xv) acc += v * v;
    acc /= static_cast<double>(xv.size());
    return record_unary(x.graph(), Op::MeanSq, x, Tensor::scalar(acc));
}

Tensor silu(const Tensor& x) { return mul(x, sigmoid(x)); }

Gradients Graph::backward(const Tensor& loss) {
    if (loss.graph() != this || loss.node_id() < 0)
        throw ContractError("backward: loss is not a node of this graph");
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

    std::vector<std::vector<double>> grads(nodes_.size());
    std::vector<char> touched(nodes_.size(), 0);
    auto grad_of = [&](int id) -> std::vector<double>& {
        auto idx = static_cast<std::size_t>(id);
        if (!touched[idx]) {
            grads[idx].assign(static_cast<std::size_t>(nodes_[idx].value.size()), 0.0);
            touched[idx] = 1;
        }
        return grads[idx];
    };

    if (nodes_[static_cast<std::size_t>(loss.node_id())].requires_grad) {
        grad_of(loss.node_id())[0] = 1.0;

        for (int id = loss.node_id(); id >= 0; --id) {
            const auto idx = static_cast<std::size_t>(id);
            if (!touched[idx]) continue;
            const Node& n = nodes_[idx];
            if (n.op == Op::Leaf || !n.requires_grad) continue;
            const std::vector<double>& dy = grads[idx];
            auto wants = [&](int input) { return nodes_[static_cast<std::size_t>(input)].requires_grad; };

            switch (n.op) {
                case Op::MatMul: {
                    const Tensor& a = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
                    const Tensor& b = nodes_[static_cast<std::size_t>(n.inputs[1])].value;
                    const MatmulPlan p = plan_matmul(a.shape(), b.shape());
                    if (wants(n.inputs[0])) {
                        std::vector<double>& da = grad_of(n.inputs[0]);
                        for (std::int64_t bi = 0; bi < p.batch; ++bi) {
                            ConstMat dC(dy.data() + bi * p.m * p.n, p.m, p.n);
                            ConstMat B(b.values().data() + (p.b_broadcast ? 0 : bi * p.k * p.n), p.k, p.n);
                            MutMat dA(da.data() + (p.a_broadcast ? 0 : bi * p.m * p.k), p.m, p.k);
                            dA.noalias() += dC * B.transpose();
                        }
                    }
                    if (wants(n.inputs[1])) {
                        std::vector<double>& db = grad_of(n.inputs[1]);
                        for (std::int64_t bi = 0; bi < p.batch; ++bi) {
                            ConstMat dC(dy.data() + bi * p.m * p.n, p.m, p.n);
                            ConstMat A(a.values().data() + (p.a_broadcast ? 0 : bi * p.m * p.k), p.m, p.k);
                            MutMat dB(db.data() + (p.b_broadcast ? 0 : bi * p.k * p.n), p.k, p.n);
                            dB.noalias() += A.transpose() * dC;
                        }
                    }
                    break;
                }
                case Op::Add: {
                    for (int which = 0; which < 2; ++which) {
                        if (!wants(n.inputs[which])) continue;
                        std::vector<double>& d = grad_of(n.inputs[which]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
                    }
                    break;
                }
                case Op::Sub: {
                    if (wants(n.inputs[0])) {
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
                    }
                    if (wants(n.inputs[1])) {
                        std::vector<double>& d = grad_of(n.inputs[1]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] -= dy[i];
                    }
                    break;
                }
                case Op::Mul: {
                    const std::vector<double>& av = nodes_[static_cast<std::size_t>(n.inputs[0])].value.values();
                    const std::vector<double>& bv = nodes_[static_cast<std::size_t>(n.inputs[1])].value.values();
                    if (wants(n.inputs[0])) {
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * bv[i];
                    }
                    if (wants(n.inputs[1])) {
                        std::vector<double>& d = grad_of(n.inputs[1]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * av[i];
                    }
                    break;
                }
                case Op::Scale: {
                    if (wants(n.inputs[0])) {
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * n.scalar;
                    }
                    break;
                }
                case Op::AddBias: {
                    const Tensor& bias = nodes_[static_cast<std::size_t>(n.inputs[1])].value;
                    const std::int64_t d = bias.size();
                    const std::int64_t rows = static_cast<std::int64_t>(dy.size()) / d;
                    if (wants(n.inputs[0])) {
                        std::vector<double>& dx = grad_of(n.inputs[0]);
                        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                    }
                    if (wants(n.inputs[1])) {
                        std::vector<double>& db = grad_of(n.inputs[1]);
                        for (std::int64_t r = 0; r < rows; ++r)
                            for (std::int64_t j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(r * d + j)];
                    }
                    break;
                }
                case Op::MulBias: {
                    const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
                    const Tensor& gain = nodes_[static_cast<std::size_t>(n.inputs[1])].value;
                    const std::int64_t d = gain.size();
                    const std::int64_t rows = static_cast<std::int64_t>(dy.size()) / d;
                    const std::vector<double>& xv = x.values();
                    const std::vector<double>& gv = gain.values();
                    if (wants(n.inputs[0])) {
                        std::vector<double>& dx = grad_of(n.inputs[0]);
                        for (std::int64_t r = 0; r < rows; ++r)
                            for (std::int64_t j = 0; j < d; ++j)
                                dx[static_cast<std::size_t>(r * d + j)] += dy[static_cast<std::size_t>(r * d + j)] * gv[static_cast<std::size_t>(j)];
                    }
                    if (wants(n.inputs[1])) {
                        std::vector<double>& dg = grad_of(n.inputs[1]);
                        for (std::int64_t r = 0; r < rows; ++r)
                            for (std::int64_t j = 0; j < d; ++j)
                                dg[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(r * d + j)] * xv[static_cast<std::size_t>(r * d + j)];
                    }
                    break;
                }
                case Op::Sigmoid: {
                    if (wants(n.inputs[0])) {
                        const std::vector<double>& y = n.value.values();
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                    break;
                }
                case Op::Softmax: {
                    if (wants(n.inputs[0])) {
                        const std::vector<double>& y = n.value.values();
                        const std::int64_t d = n.value.shape().back();
                        const std::int64_t rows = static_cast<std::int64_t>(dy.size()) / d;
                        std::vector<double>& dx = grad_of(n.inputs[0]);
                        for (std::int64_t r = 0; r < rows; ++r) {
                            double dot = 0.0;
                            for (std::int64_t j = 0; j < d; ++j) {
                                const auto i = static_cast<std::size_t>(r * d + j);
                                dot += dy[i] * y[i];
                            }
                            for (std::int64_t j = 0; j < d; ++j) {
                                const auto i = static_cast<std::size_t>(r * d + j);
                                dx[i] += y[i] * (dy[i] - dot);
                            }
                        }
                    }
                    break;
                }
                case Op::LayerNorm: {
                    if (wants(n.inputs[0])) {
                        const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
                        const std::vector<double>& xv = x.values();
                        const std::int64_t d = x.shape().back();
                        const std::int64_t rows = static_cast<std::int64_t>(dy.size()) / d;
                        std::vector<double>& dx = grad_of(n.inputs[0]);
                        for (std::int64_t r = 0; r < rows; ++r) {
                            const double mean = n.aux[static_cast<std::size_t>(2 * r)];
                            const double inv_std = n.aux[static_cast<std::size_t>(2 * r + 1)];
                            double mean_dy = 0.0, mean_dyxh = 0.0;
                            for (std::int64_t j = 0; j < d; ++j) {
                                const auto i = static_cast<std::size_t>(r * d + j);
                                const double xh = (xv[i] - mean) * inv_std;
                                mean_dy += dy[i];
                                mean_dyxh += dy[i] * xh;
                            }
                            mean_dy /= static_cast<double>(d);
                            mean_dyxh /= static_cast<double>(d);
                            for (std::int64_t j = 0; j < d; ++j) {
                                const auto i = static_cast<std::size_t>(r * d + j);
                                const double xh = (xv[i] - mean) * inv_std;
                                dx[i] += inv_std * (dy[i] - mean_dy - xh * mean_dyxh);
                            }
                        }
                    }
                    break;
                }
                case Op::Concat: {
                    const Shape& out_shape = n.value.shape();
                    const int axis = n.axis;
                    std::int64_t outer = 1, inner = 1;
                    for (int ax = 0; ax < axis; ++ax) outer *= out_shape[static_cast<std::size_t>(ax)];
                    for (int ax = axis + 1; ax < static_cast<int>(out_shape.size()); ++ax) inner *= out_shape[static_cast<std::size_t>(ax)];
                    const std::int64_t out_row = static_cast<std::int64_t>(out_shape[static_cast<std::size_t>(axis)]) * inner;
                    std::int64_t at = 0;
                    for (int input : n.inputs) {
                        const std::int64_t chunk = static_cast<std::int64_t>(nodes_[static_cast<std::size_t>(input)].value.dim(axis)) * inner;
                        if (wants(input)) {
                            std::vector<double>& d = grad_of(input);
                            for (std::int64_t o = 0; o < outer; ++o)
                                for (std::int64_t i = 0; i < chunk; ++i)
                                    d[static_cast<std::size_t>(o * chunk + i)] += dy[static_cast<std::size_t>(o * out_row + at + i)];
                        }
                        at += chunk;
                    }
                    break;
                }
                case Op::Slice: {
                    if (wants(n.inputs[0])) {
                        const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
                        const int axis = n.axis;
                        std::int64_t outer = 1, inner = 1;
                        for (int ax = 0; ax < axis; ++ax) outer *= x.shape()[static_cast<std::size_t>(ax)];
                        for (int ax = axis + 1; ax < x.rank(); ++ax) inner *= x.shape()[static_cast<std::size_t>(ax)];
                        const std::int64_t in_row = static_cast<std::int64_t>(x.dim(axis)) * inner;
                        const std::int64_t chunk = static_cast<std::int64_t>(n.value.dim(axis)) * inner;
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        for (std::int64_t o = 0; o < outer; ++o)
                            for (std::int64_t i = 0; i < chunk; ++i)
                                d[static_cast<std::size_t>(o * in_row + n.offset * inner + i)] += dy[static_cast<std::size_t>(o * chunk + i)];
                    }
                    break;
                }
                case Op::Transpose: {
                    if (wants(n.inputs[0])) {
                        // Gradient of transpose is the same axis swap applied to dy.
                        const Tensor& x = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
                        const Shape& out_shape = n.value.shape();
                        const int r = static_cast<int>(out_shape.size());
                        std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
                        for (int ax = r - 2; ax >= 0; --ax)
                            in_strides[static_cast<std::size_t>(ax)] = in_strides[static_cast<std::size_t>(ax + 1)] * x.shape()[static_cast<std::size_t>(ax + 1)];
                        std::vector<std::int64_t> src_stride_for_out(in_strides);
                        std::swap(src_stride_for_out[static_cast<std::size_t>(n.axis)], src_stride_for_out[static_cast<std::size_t>(n.axis2)]);
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
                        std::int64_t src = 0;
                        const std::int64_t count = n.value.size();
                        for (std::int64_t i = 0; i < count; ++i) {
                            d[static_cast<std::size_t>(src)] += dy[static_cast<std::size_t>(i)];
                            for (int ax = r - 1; ax >= 0; --ax) {
                                coord[static_cast<std::size_t>(ax)]++;
                                src += src_stride_for_out[static_cast<std::size_t>(ax)];
                                if (coord[static_cast<std::size_t>(ax)] < out_shape[static_cast<std::size_t>(ax)]) break;
                                src -= src_stride_for_out[static_cast<std::size_t>(ax)] * coord[static_cast<std::size_t>(ax)];
                                coord[static_cast<std::size_t>(ax)] = 0;
                            }
                        }
                    }
                    break;
                }
                case Op::Reshape: {
                    if (wants(n.inputs[0])) {
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
                    }
                    break;
                }
                case Op::MeanSq: {
                    if (wants(n.inputs[0])) {
                        const std::vector<double>& xv = nodes_[static_cast<std::size_t>(n.inputs[0])].value.values();
                        const double coef = dy[0] * 2.0 / static_cast<double>(xv.size());
                        std::vector<double>& d = grad_of(n.inputs[0]);
                        for (std::size_t i = 0; i < xv.size(); ++i) d[i] += coef * xv[i];
                    }
                    break;
                }
                case Op::Leaf:
                    break;
            }
        }
    }

    Gradients out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (n.op != Op::Leaf || !n.requires_grad) continue;
        if (touched[id]) {
            out.by_node_.emplace(static_cast<int>(id), Tensor(n.value.shape(), std::move(grads[id])));
        } else {
            out.by_node_.emplace(static_cast<int>(id), Tensor::zeros(n.value.shape()));
        }
    }
    return out;
}

double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& reference) {
    if (analytic.size() != reference.size())
        throw ContractError("max_relative_error: length mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max(std::abs(reference[i]), 1e-8);
        worst = std::max(worst, std::abs(analytic[i] - reference[i]) / denom);
    }
    return worst;
}

double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x, double step) {
    if (step < 1e-7 || step > 1e-3) throw DomainError("grad_check: step must lie in [1e-7, 1e-3]");

    Graph g;
    Tensor leaf = g.leaf(x, true);
    Tensor y = f(g, leaf);
    if (y.size() != 1) throw ContractError("grad_check: f must return a scalar");
    if (!std::isfinite(y.item())) throw EvalError("grad_check: f(x) is not finite");
    Gradients grads = g.backward(y);
    const std::vector<double> analytic = grads.at(leaf).values();

    auto eval_at = [&f](const Tensor& point) {
        Graph local;
        Tensor l = local.leaf(point, false);
        const double v = f(local, l).item();
        if (!std::isfinite(v)) throw EvalError("grad_check: f evaluated to a non-finite value");
        return v;
    };

    std::vector<double> fd(static_cast<std::size_t>(x.size()));
    std::vector<double> work(x.values());
    for (std::size_t i = 0; i < work.size(); ++i) {
        const double orig = work[i];
        work[i] = orig + step;
        const double up = eval_at(Tensor(x.shape(), work));
        work[i] = orig - step;
        const double down = eval_at(Tensor(x.shape(), work));
        work[i] = orig;
        fd[i] = (up - down) / (2.0 * step);
    }
    return max_relative_error(analytic, fd);
}

}  // namespace avflow
