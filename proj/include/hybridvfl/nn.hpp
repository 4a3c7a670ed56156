#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hybridvfl/autodiff.hpp"
#include "hybridvfl/rng.hpp"
#include "hybridvfl/tensor.hpp"

namespace hvfl {

// Named parameter group. Weight shapes are fixed at construction; training
// mutates values in place. Same seed + same shapes => identical weights.
struct LayerParams {
    std::string name;
    std::vector<Tensor> weights;
    std::uint64_t seed = 0;
};

// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) from the layer's own stream.
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

// Per-pass binding of master parameter tensors to graph leaves. sgd_step
// walks the bindings to apply updates after backward.
class ParamBindings {
public:
    GraphVar bind(Graph& g, Tensor& param);
    const std::vector<std::pair<Tensor*, GraphVar>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

private:
    std::vector<std::pair<Tensor*, GraphVar>> entries_;
    std::unordered_map<const Tensor*, GraphVar> bound_;
};

// w <- w - lr * g for every bound parameter. Missing gradient entries mean
// the table came from a different pass: contract error.
void sgd_step(const ParamBindings& params, const GradTable& grads, double lr);

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

class Linear {
public:
    Linear() = default;
    Linear(std::string name, std::size_t in, std::size_t out, std::uint64_t seed);

    // x: [b,in] or [b,s,in]
    GraphVar forward(Graph& g, ParamBindings& pb, GraphVar x);

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }
    Tensor& weight() { return params_.weights[0]; }
    Tensor& bias() { return params_.weights[1]; }
    LayerParams& params() { return params_; }
    void collect(NamedParams& out);

private:
    LayerParams params_;
    std::size_t in_ = 0, out_ = 0;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t ksize, int stride,
           int pad, std::uint64_t seed);

    GraphVar forward(Graph& g, ParamBindings& pb, GraphVar x);

    Tensor& kernel() { return params_.weights[0]; }
    Tensor& bias() { return params_.weights[1]; }
    LayerParams& params() { return params_; }
    void collect(NamedParams& out);

private:
    LayerParams params_;
    int stride_ = 1, pad_ = 0;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(std::string name, std::size_t dim);

    GraphVar forward(Graph& g, ParamBindings& pb, GraphVar x);

    Tensor& gain() { return params_.weights[0]; }
    Tensor& bias() { return params_.weights[1]; }
    void collect(NamedParams& out);

private:
    LayerParams params_;
};

// Scaled dot-product attention, no parameters: softmax(Q K^T / sqrt(dk)) V.
GraphVar attention(Graph& g, GraphVar q, GraphVar k, GraphVar v);

class MultiHeadSelfAttention {
public:
    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(std::string name, std::size_t d_model, int heads, std::uint64_t seed);

    GraphVar forward(Graph& g, ParamBindings& pb, GraphVar x);  // [b,s,d] -> [b,s,d]

    Linear& wq() { return wq_; }
    Linear& wk() { return wk_; }
    Linear& wv() { return wv_; }
    Linear& wo() { return wo_; }
    int heads() const { return heads_; }
    void collect(NamedParams& out);

private:
    Linear wq_, wk_, wv_, wo_;
    std::size_t d_model_ = 0;
    int heads_ = 1;
};

// Pre-norm residual block: x + MHSA(LN(x)), then + FFN(LN(.)).
// FFN is linear -> relu -> linear with hidden width 4*d.
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(std::string name, std::size_t d_model, int heads, std::uint64_t seed);

    GraphVar forward(Graph& g, ParamBindings& pb, GraphVar x);

    MultiHeadSelfAttention& mhsa() { return mhsa_; }
    Linear& ffn1() { return ffn1_; }
    Linear& ffn2() { return ffn2_; }
    void collect(NamedParams& out);

private:
    LayerNorm ln1_, ln2_;
    MultiHeadSelfAttention mhsa_;
    Linear ffn1_, ffn2_;
};

// Sequence mean over axis 1: [b,s,d] -> [b,d].
inline GraphVar mean_pool(Graph& g, GraphVar x) { return g.mean_pool_seq(x); }

inline GraphVar softmax(Graph& g, GraphVar x, int axis = -1) { return g.softmax(x, axis); }

// -(1/N) sum_i sum_k y log(max(y_hat, 1e-12)); y rows must be one-hot.
inline GraphVar cross_entropy(Graph& g, GraphVar y_hat, GraphVar y) {
    return g.cross_entropy(y_hat, y);
}

// Mean over the batch of 1 - <a,b>/(|a||b|); norms clamped at 1e-12.
inline GraphVar cosine_consistency(Graph& g, GraphVar a, GraphVar b) {
    return g.cosine_consistency(a, b);
}

}  // namespace hvfl
