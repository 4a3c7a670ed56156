#pragma once

#include <atomic>
#include <deque>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hybridvfl/tensor.hpp"

namespace hvfl {

using NodeId = std::int32_t;

// Handle into a Graph's tape.
struct GraphVar {
    NodeId id = -1;
    bool valid() const { return id >= 0; }
};

enum class OpKind : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    SubScalar,
    MulScalar,
    DivScalar,
    Relu,
    Exp,
    Log,
    MatMul,
    BatchMatMul,
    TransposeLast2,
    Reshape,
    BiasAdd,
    SliceLast,
    ConcatLast,
    StackTokens,
    Softmax,
    LayerNorm,
    Conv2d,
    MaxPool2,
    MeanPoolSeq,
    SumAll,
    CrossEntropy,
    CosineConsistency,
};

const char* op_name(OpKind k);

// Gradients returned by a backward pass, keyed by node id. Every
// requires_grad leaf of the graph has an entry (zeros when unreached).
class GradTable {
public:
    void set(NodeId id, Tensor g) { grads_[id] = std::move(g); }
    bool contains(GraphVar v) const { return grads_.count(v.id) != 0; }
    const Tensor& at(GraphVar v) const;
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<NodeId, Tensor> grads_;
};

// Count of cosine-consistency rows that hit the zero-norm clamp (not fatal).
extern std::atomic<std::uint64_t> cosine_zero_norm_warnings;

// Append-only tape of recorded operations. One forward pass per graph; the
// tape is discarded after backward. Never shared across threads.
class Graph {
public:
    GraphVar leaf(Tensor value);

    // elementwise, equal shapes
    GraphVar add(GraphVar a, GraphVar b);
    GraphVar sub(GraphVar a, GraphVar b);
    GraphVar mul(GraphVar a, GraphVar b);
    GraphVar div(GraphVar a, GraphVar b);
    // tensor (op) scalar
    GraphVar add_scalar(GraphVar a, double c);
    GraphVar sub_scalar(GraphVar a, double c);
    GraphVar mul_scalar(GraphVar a, double c);
    GraphVar div_scalar(GraphVar a, double c);
    // unary
    GraphVar relu(GraphVar a);
    GraphVar exp(GraphVar a);
    GraphVar log(GraphVar a);

    GraphVar matmul(GraphVar a, GraphVar b);          // [m,k]x[k,n]
    GraphVar bmatmul(GraphVar a, GraphVar b);         // [B,m,k]x[B,k,n]
    GraphVar transpose_last2(GraphVar a);             // [...,m,n] -> [...,n,m]
    GraphVar reshape(GraphVar a, Shape shape);
    GraphVar bias_add(GraphVar x, GraphVar bias);     // [...,d] + [d]
    GraphVar slice_last(GraphVar x, std::size_t start, std::size_t len);
    GraphVar concat_last(const std::vector<GraphVar>& xs);
    GraphVar stack_tokens(const std::vector<GraphVar>& xs);  // n x [b,d] -> [b,n,d]

    GraphVar softmax(GraphVar x, int axis);
    GraphVar layer_norm(GraphVar x, GraphVar gain, GraphVar bias, double eps = 1e-5);
    GraphVar conv2d(GraphVar x, GraphVar kernel, GraphVar bias, int stride, int pad);
    GraphVar max_pool2(GraphVar x);
    GraphVar mean_pool_seq(GraphVar x);               // [b,s,d] -> [b,d]
    GraphVar sum_all(GraphVar x);                     // -> scalar

    GraphVar cross_entropy(GraphVar y_hat, GraphVar y_onehot);
    GraphVar cosine_consistency(GraphVar a, GraphVar b);

    const Tensor& value(GraphVar v) const;
    std::size_t num_nodes() const { return nodes_.size(); }
    OpKind kind(GraphVar v) const { return nodes_[check(v)].kind; }

    // Reverse pass seeded with d(loss)/d(loss) = 1. Loss must be scalar.
    GradTable backward(GraphVar loss) const;
    // General vector-Jacobian entry point: seed arbitrary nodes.
    GradTable backward_from(const std::vector<std::pair<GraphVar, Tensor>>& seeds) const;

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<NodeId> inputs;
        Tensor out;
        bool needs_grad = false;
        // op attributes
        double scalar = 0.0;
        int axis = 0;
        int stride = 1;
        int pad = 0;
        std::size_t start = 0;
        std::size_t len = 0;
        std::vector<std::int64_t> iaux;  // argmax indices for max_pool2
        std::vector<double> daux;        // cached statistics for fused backward rules
    };

    NodeId push(Node n);
    NodeId check(GraphVar v) const;
    const Tensor& val(NodeId id) const { return nodes_[id].out; }
    void backprop_node(NodeId id, const Tensor& gy, std::vector<Tensor>& grads) const;
    static void accumulate(Tensor& slot, const Shape& shape, const Tensor& add);

    std::deque<Node> nodes_;  // deque: node references stay valid while the tape grows
};

// ---------------------------------------------------------------------------
// Finite-difference oracle.

// Builds a scalar loss from one differentiable input leaf.
using ScalarBuilder = std::function<GraphVar(Graph&, GraphVar)>;
// Builds a scalar loss from several differentiable input leaves.
using MultiScalarBuilder = std::function<GraphVar(Graph&, const std::vector<GraphVar>&)>;

// Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|) with central
// differences. Throws OracleInvalidError when f is not deterministic.
double finite_diff_check(const ScalarBuilder& f, const Tensor& x, double epsilon);
double finite_diff_check_multi(const MultiScalarBuilder& f, const std::vector<Tensor>& xs,
                               double epsilon);

}  // namespace hvfl
