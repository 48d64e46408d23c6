#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "avflow/errors.hpp"
#include "avflow/rng.hpp"

namespace avflow {

class Graph;

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::int64_t shape_size(const Shape& shape);

/// Dense row-major array of doubles, optionally attached to a Graph node.
///
/// A Tensor created directly (or via zeros/full/randn) is "free": it carries
/// values only. Any op that touches at least one graph-attached tensor records
/// onto that graph and auto-wraps free inputs as constant leaves. Values are
/// immutable once the tensor has been used as an op input; mutate_data() is
/// reserved for owners of free tensors (parameters) between recordings.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const;
    std::int64_t size() const;
    bool defined() const { return static_cast<bool>(data_); }

    const std::vector<double>& values() const { return *data_; }
    std::vector<double>& mutate_data() { return *data_; }
    double at(std::int64_t flat_index) const { return (*data_)[static_cast<std::size_t>(flat_index)]; }
    double item() const;

    bool requires_grad() const { return requires_grad_; }
    Graph* graph() const { return graph_; }
    int node_id() const { return node_; }

    bool all_finite() const;

    /// Detached view sharing this tensor's storage under a new shape.
    Tensor with_shape(Shape new_shape) const;

  private:
    friend class Graph;

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Graph* graph_ = nullptr;
    int node_ = -1;
    bool requires_grad_ = false;
};

namespace detail {

enum class Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MulBias,
    Sigmoid,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Transpose,
    Reshape,
    MeanSq,
};

struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    Tensor value;
    bool requires_grad = false;
    double scalar = 0.0;  // Scale factor or LayerNorm eps
    int axis = -1;        // Concat/Slice/Transpose first axis
    int axis2 = -1;       // Transpose second axis
    std::int64_t offset = 0;  // Slice start along axis
    std::vector<double> aux;  // LayerNorm per-row (mean, inv_std) pairs
};

}  // namespace detail

/// Gradient map returned by Graph::backward: one entry per requires_grad leaf.
class Gradients {
  public:
    bool contains(const Tensor& t) const { return by_node_.count(t.node_id()) > 0; }
    const Tensor& at(const Tensor& t) const;
    const Tensor& at_node(int node_id) const;
    std::size_t count() const { return by_node_.size(); }

  private:
    friend class Graph;
    std::unordered_map<int, Tensor> by_node_;
};

/// Records ops in creation order; backward replays them in exact reverse
/// creation order, so gradient accumulation is deterministic. Single writer
/// while recording; finished graphs are safe to read concurrently.
class Graph {
  public:
    Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Adopt a tensor's storage as a leaf of this graph (no copy).
    Tensor leaf(const Tensor& source, bool requires_grad);

    /// Reverse-mode sweep from a scalar loss.
    Gradients backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }
    const detail::Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    /// Process-unique id; distinguishes graphs whose addresses get reused.
    std::uint64_t uid() const { return uid_; }

    Tensor record(detail::Node node);

  private:
    std::vector<detail::Node> nodes_;
    std::uint64_t uid_;
};

// --- op set -----------------------------------------------------------------
// Fixed autodiff vocabulary: everything higher level (attention, RoPE, gating,
// losses) is composed from these.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_bias(const Tensor& x, const Tensor& bias);   // bias [D] over trailing axis
Tensor mul_bias(const Tensor& x, const Tensor& gain);   // gain [D] over trailing axis
Tensor sigmoid(const Tensor& x);
Tensor softmax_last(const Tensor& x);
Tensor layer_norm(const Tensor& x, double eps);         // pre-affine normalization
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes);
Tensor slice(const Tensor& x, int axis, int offset, int extent);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor mean_sq(const Tensor& x);                        // scalar mean of squares

Tensor silu(const Tensor& x);  // x * sigmoid(x), composed

/// Max relative error between reverse-mode gradients of f at x and elementwise
/// central differences with the given step. Denominator is the finite
/// difference magnitude clamped at 1e-8.
double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x, double step);

/// Comparator underneath grad_check, exposed so the checker itself can be
/// exercised against doctored gradients.
double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& reference);

}  // namespace avflow
