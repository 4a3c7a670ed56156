#include "hybridvfl/nn.hpp"

#include <cmath>

namespace hvfl {

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    t.requires_grad = true;
    return t;
}

GraphVar ParamBindings::bind(Graph& g, Tensor& param) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return it->second;
    Tensor leaf = param;
    leaf.requires_grad = true;
    GraphVar v = g.leaf(std::move(leaf));
    bound_.emplace(&param, v);
    entries_.emplace_back(&param, v);
    return v;
}

void sgd_step(const ParamBindings& params, const GradTable& grads, double lr) {
    for (const auto& [tensor, var] : params.entries()) {
        if (!grads.contains(var)) {
            throw ContractError("sgd_step: gradient table is misaligned with parameter set");
        }
        const Tensor& g = grads.at(var);
        if (!g.same_shape(*tensor)) {
            throw ContractError("sgd_step: gradient shape " + shape_str(g.shape()) +
                                " does not match parameter " + shape_str(tensor->shape()));
        }
        for (std::size_t i = 0; i < tensor->size(); ++i) (*tensor)[i] -= lr * g[i];
    }
}

// ------------------------------- Linear ------------------------------------

Linear::Linear(std::string name, std::size_t in, std::size_t out, std::uint64_t seed)
    : in_(in), out_(out) {
    params_.name = std::move(name);
    params_.seed = seed;
    Rng rng(seed);
    params_.weights.push_back(init_uniform({in, out}, in, rng));
    Tensor b(Shape{out});
    b.requires_grad = true;
    params_.weights.push_back(std::move(b));
}

GraphVar Linear::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    const Shape xs = g.value(x).shape();
    if (xs.empty() || xs.back() != in_) {
        throw DimensionError("linear '" + params_.name + "': input " + shape_str(xs) +
                             " does not end in " + std::to_string(in_));
    }
    GraphVar w = pb.bind(g, weight());
    GraphVar b = pb.bind(g, bias());
    if (xs.size() == 2) {
        return g.bias_add(g.matmul(x, w), b);
    }
    // fold leading dims into rows for the 2-D matmul
    const std::size_t rows = numel(xs) / in_;
    GraphVar flat = g.reshape(x, {rows, in_});
    GraphVar y = g.bias_add(g.matmul(flat, w), b);
    Shape out_shape = xs;
    out_shape.back() = out_;
    return g.reshape(y, out_shape);
}

void Linear::collect(NamedParams& out) {
    out.emplace_back(params_.name + ".W", &weight());
    out.emplace_back(params_.name + ".b", &bias());
}

// ------------------------------- Conv2d ------------------------------------

Conv2d::Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t ksize,
               int stride, int pad, std::uint64_t seed)
    : stride_(stride), pad_(pad) {
    params_.name = std::move(name);
    params_.seed = seed;
    Rng rng(seed);
    params_.weights.push_back(
        init_uniform({out_ch, in_ch, ksize, ksize}, in_ch * ksize * ksize, rng));
    Tensor b(Shape{out_ch});
    b.requires_grad = true;
    params_.weights.push_back(std::move(b));
}

GraphVar Conv2d::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    GraphVar k = pb.bind(g, kernel());
    GraphVar b = pb.bind(g, bias());
    return g.conv2d(x, k, b, stride_, pad_);
}

void Conv2d::collect(NamedParams& out) {
    out.emplace_back(params_.name + ".K", &kernel());
    out.emplace_back(params_.name + ".b", &bias());
}

// ------------------------------ LayerNorm ----------------------------------

LayerNorm::LayerNorm(std::string name, std::size_t dim) {
    params_.name = std::move(name);
    Tensor gain = Tensor::ones({dim});
    gain.requires_grad = true;
    Tensor bias(Shape{dim});
    bias.requires_grad = true;
    params_.weights.push_back(std::move(gain));
    params_.weights.push_back(std::move(bias));
}

GraphVar LayerNorm::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    return g.layer_norm(x, pb.bind(g, gain()), pb.bind(g, bias()));
}

void LayerNorm::collect(NamedParams& out) {
    out.emplace_back(params_.name + ".gain", &gain());
    out.emplace_back(params_.name + ".bias", &bias());
}

// ------------------------------ attention ----------------------------------

GraphVar attention(Graph& g, GraphVar q, GraphVar k, GraphVar v) {
    const Shape qs = g.value(q).shape();
    const Shape ks = g.value(k).shape();
    const Shape vs = g.value(v).shape();
    if (qs.size() != 3 || ks.size() != 3 || vs.size() != 3 || qs != ks || qs[0] != vs[0] ||
        qs[1] != vs[1]) {
        throw DimensionError("attention: incompatible shapes q=" + shape_str(qs) +
                             " k=" + shape_str(ks) + " v=" + shape_str(vs));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(qs[2]));
    GraphVar scores = g.mul_scalar(g.bmatmul(q, g.transpose_last2(k)), scale);
    GraphVar weights = g.softmax(scores, 2);
    return g.bmatmul(weights, v);
}

// ------------------------ MultiHeadSelfAttention ---------------------------

MultiHeadSelfAttention::MultiHeadSelfAttention(std::string name, std::size_t d_model, int heads,
                                               std::uint64_t seed)
    : d_model_(d_model), heads_(heads) {
    if (heads < 1 || d_model % static_cast<std::size_t>(heads) != 0) {
        throw ConfigError("multi_head_self_attention '" + name + "': d_model " +
                          std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    }
    wq_ = Linear(name + ".wq", d_model, d_model, derive_seed(seed, "wq"));
    wk_ = Linear(name + ".wk", d_model, d_model, derive_seed(seed, "wk"));
    wv_ = Linear(name + ".wv", d_model, d_model, derive_seed(seed, "wv"));
    wo_ = Linear(name + ".wo", d_model, d_model, derive_seed(seed, "wo"));
}

GraphVar MultiHeadSelfAttention::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    GraphVar q = wq_.forward(g, pb, x);
    GraphVar k = wk_.forward(g, pb, x);
    GraphVar v = wv_.forward(g, pb, x);
    const std::size_t dh = d_model_ / static_cast<std::size_t>(heads_);
    std::vector<GraphVar> head_outputs;
    head_outputs.reserve(heads_);
    for (int h = 0; h < heads_; ++h) {
        const std::size_t off = static_cast<std::size_t>(h) * dh;
        GraphVar qh = g.slice_last(q, off, dh);
        GraphVar kh = g.slice_last(k, off, dh);
        GraphVar vh = g.slice_last(v, off, dh);
        head_outputs.push_back(attention(g, qh, kh, vh));
    }
    GraphVar merged = heads_ == 1 ? head_outputs[0] : g.concat_last(head_outputs);
    return wo_.forward(g, pb, merged);
}

void MultiHeadSelfAttention::collect(NamedParams& out) {
    wq_.collect(out);
    wk_.collect(out);
    wv_.collect(out);
    wo_.collect(out);
}

// --------------------------- TransformerBlock ------------------------------

TransformerBlock::TransformerBlock(std::string name, std::size_t d_model, int heads,
                                   std::uint64_t seed) {
    ln1_ = LayerNorm(name + ".ln1", d_model);
    ln2_ = LayerNorm(name + ".ln2", d_model);
    mhsa_ = MultiHeadSelfAttention(name + ".mhsa", d_model, heads, derive_seed(seed, "mhsa"));
    ffn1_ = Linear(name + ".ffn1", d_model, 4 * d_model, derive_seed(seed, "ffn1"));
    ffn2_ = Linear(name + ".ffn2", 4 * d_model, d_model, derive_seed(seed, "ffn2"));
}

GraphVar TransformerBlock::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    GraphVar h = g.add(x, mhsa_.forward(g, pb, ln1_.forward(g, pb, x)));
    GraphVar ff = ffn2_.forward(g, pb, g.relu(ffn1_.forward(g, pb, ln2_.forward(g, pb, h))));
    return g.add(h, ff);
}

void TransformerBlock::collect(NamedParams& out) {
    ln1_.collect(out);
    mhsa_.collect(out);
    ln2_.collect(out);
    ffn1_.collect(out);
    ffn2_.collect(out);
}

}  // namespace hvfl
