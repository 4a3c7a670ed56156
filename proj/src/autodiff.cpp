#include "hybridvfl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace hvfl {

std::atomic<std::uint64_t> cosine_zero_norm_warnings{0};

namespace {

constexpr double kClamp = 1e-12;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = arow[t];
            if (av == 0.0) continue;
            const double* brow = b + t * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// da[m,k] += dc[m,n] * b[k,n]^T  (rows of dc dotted with rows of b)
void gemm_acc_nt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* dcrow = dc + i * n;
        double* darow = da + i * k;
        for (std::size_t t = 0; t < k; ++t) {
            const double* brow = b + t * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            darow[t] += acc;
        }
    }
}

// db[k,n] += a[m,k]^T * dc[m,n]
void gemm_acc_tn(const double* a, const double* dc, double* db, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* dcrow = dc + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = arow[t];
            if (av == 0.0) continue;
            double* dbrow = db + t * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

struct AxisSplit {
    std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    if (axis < 0) axis += static_cast<int>(shape.size());
    if (axis < 0 || axis >= static_cast<int>(shape.size())) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::SubScalar: return "sub_scalar";
        case OpKind::MulScalar: return "mul_scalar";
        case OpKind::DivScalar: return "div_scalar";
        case OpKind::Relu: return "relu";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::MatMul: return "matmul";
        case OpKind::BatchMatMul: return "bmatmul";
        case OpKind::TransposeLast2: return "transpose_last2";
        case OpKind::Reshape: return "reshape";
        case OpKind::BiasAdd: return "bias_add";
        case OpKind::SliceLast: return "slice_last";
        case OpKind::ConcatLast: return "concat_last";
        case OpKind::StackTokens: return "stack_tokens";
        case OpKind::Softmax: return "softmax";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::MaxPool2: return "max_pool2";
        case OpKind::MeanPoolSeq: return "mean_pool_seq";
        case OpKind::SumAll: return "sum_all";
        case OpKind::CrossEntropy: return "cross_entropy";
        case OpKind::CosineConsistency: return "cosine_consistency";
    }
    return "?";
}

const Tensor& GradTable::at(GraphVar v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) {
        throw ContractError("gradient table has no entry for node " + std::to_string(v.id));
    }
    return it->second;
}

NodeId Graph::check(GraphVar v) const {
    if (!v.valid() || v.id >= static_cast<NodeId>(nodes_.size())) {
        throw ContractError("graph variable does not belong to this graph");
    }
    return v.id;
}

NodeId Graph::push(Node n) {
    if (!n.out.all_finite()) {
        throw NumericDomainError(std::string(op_name(n.kind)) +
                                 ": non-finite value in forward result");
    }
    if (n.kind == OpKind::Leaf) {
        n.needs_grad = n.out.requires_grad;
    } else {
        for (NodeId in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

GraphVar Graph::leaf(Tensor value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.out = std::move(value);
    return {push(std::move(n))};
}

const Tensor& Graph::value(GraphVar v) const { return nodes_[check(v)].out; }

// --------------------------- elementwise -----------------------------------

GraphVar Graph::add(GraphVar a, GraphVar b) {
    const Tensor& ta = val(check(a));
    const Tensor& tb = val(check(b));
    require_same_shape("add", ta, tb);
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a.id, b.id};
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] + tb[i];
    return {push(std::move(n))};
}

GraphVar Graph::sub(GraphVar a, GraphVar b) {
    const Tensor& ta = val(check(a));
    const Tensor& tb = val(check(b));
    require_same_shape("sub", ta, tb);
    Node n;
    n.kind = OpKind::Sub;
    n.inputs = {a.id, b.id};
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] - tb[i];
    return {push(std::move(n))};
}

GraphVar Graph::mul(GraphVar a, GraphVar b) {
    const Tensor& ta = val(check(a));
    const Tensor& tb = val(check(b));
    require_same_shape("mul", ta, tb);
    Node n;
    n.kind = OpKind::Mul;
    n.inputs = {a.id, b.id};
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] * tb[i];
    return {push(std::move(n))};
}

GraphVar Graph::div(GraphVar a, GraphVar b) {
    const Tensor& ta = val(check(a));
    const Tensor& tb = val(check(b));
    require_same_shape("div", ta, tb);
    Node n;
    n.kind = OpKind::Div;
    n.inputs = {a.id, b.id};
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (tb[i] == 0.0) throw NumericDomainError("div: division by zero");
        n.out[i] = ta[i] / tb[i];
    }
    return {push(std::move(n))};
}

GraphVar Graph::add_scalar(GraphVar a, double c) {
    const Tensor& ta = val(check(a));
    Node n;
    n.kind = OpKind::AddScalar;
    n.inputs = {a.id};
    n.scalar = c;
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] + c;
    return {push(std::move(n))};
}

GraphVar Graph::sub_scalar(GraphVar a, double c) { return add_scalar(a, -c); }

GraphVar Graph::mul_scalar(GraphVar a, double c) {
    const Tensor& ta = val(check(a));
    Node n;
    n.kind = OpKind::MulScalar;
    n.inputs = {a.id};
    n.scalar = c;
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] * c;
    return {push(std::move(n))};
}

GraphVar Graph::div_scalar(GraphVar a, double c) {
    if (c == 0.0) throw NumericDomainError("div_scalar: division by zero");
    return mul_scalar(a, 1.0 / c);
}

GraphVar Graph::relu(GraphVar a) {
    const Tensor& ta = val(check(a));
    Node n;
    n.kind = OpKind::Relu;
    n.inputs = {a.id};
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) n.out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
    return {push(std::move(n))};
}

GraphVar Graph::exp(GraphVar a) {
    const Tensor& ta = val(check(a));
    Node n;
    n.kind = OpKind::Exp;
    n.inputs = {a.id};
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) n.out[i] = std::exp(ta[i]);
    return {push(std::move(n))};
}

GraphVar Graph::log(GraphVar a) {
    const Tensor& ta = val(check(a));
    Node n;
    n.kind = OpKind::Log;
    n.inputs = {a.id};
    n.out = Tensor(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i] <= 0.0) throw NumericDomainError("log: non-positive input");
        n.out[i] = std::log(ta[i]);
    }
    return {push(std::move(n))};
}

// --------------------------- linear algebra --------------------------------

GraphVar Graph::matmul(GraphVar a, GraphVar b) {
    const Tensor& ta = val(check(a));
    const Tensor& tb = val(check(b));
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(ta.shape()) + " vs " +
                             shape_str(tb.shape()));
    }
    const std::size_t m = ta.dim(0), k = ta.dim(1), nn = tb.dim(1);
    Node n;
    n.kind = OpKind::MatMul;
    n.inputs = {a.id, b.id};
    n.out = Tensor(Shape{m, nn});
    gemm_acc(ta.data(), tb.data(), n.out.data(), m, k, nn);
    return {push(std::move(n))};
}

GraphVar Graph::bmatmul(GraphVar a, GraphVar b) {
    const Tensor& ta = val(check(a));
    const Tensor& tb = val(check(b));
    if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1)) {
        throw DimensionError("bmatmul: incompatible shapes " + shape_str(ta.shape()) + " vs " +
                             shape_str(tb.shape()));
    }
    const std::size_t bsz = ta.dim(0), m = ta.dim(1), k = ta.dim(2), nn = tb.dim(2);
    Node n;
    n.kind = OpKind::BatchMatMul;
    n.inputs = {a.id, b.id};
    n.out = Tensor(Shape{bsz, m, nn});
    for (std::size_t i = 0; i < bsz; ++i) {
        gemm_acc(ta.data() + i * m * k, tb.data() + i * k * nn, n.out.data() + i * m * nn, m, k,
                 nn);
    }
    return {push(std::move(n))};
}

GraphVar Graph::transpose_last2(GraphVar a) {
    const Tensor& ta = val(check(a));
    if (ta.rank() < 2) {
        throw DimensionError("transpose_last2: need rank >= 2, got " + shape_str(ta.shape()));
    }
    Shape out_shape = ta.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    const std::size_t m = ta.dim(ta.rank() - 2), nn = ta.dim(ta.rank() - 1);
    const std::size_t outer = ta.size() / (m * nn);
    Node n;
    n.kind = OpKind::TransposeLast2;
    n.inputs = {a.id};
    n.out = Tensor(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = ta.data() + o * m * nn;
        double* dst = n.out.data() + o * m * nn;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nn; ++j) dst[j * m + i] = src[i * nn + j];
    }
    return {push(std::move(n))};
}

GraphVar Graph::reshape(GraphVar a, Shape shape) {
    const Tensor& ta = val(check(a));
    if (numel(shape) != ta.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(ta.shape()) + " as " +
                             shape_str(shape));
    }
    Node n;
    n.kind = OpKind::Reshape;
    n.inputs = {a.id};
    n.out = Tensor(std::move(shape), ta.vec());
    return {push(std::move(n))};
}

GraphVar Graph::bias_add(GraphVar x, GraphVar bias) {
    const Tensor& tx = val(check(x));
    const Tensor& tb = val(check(bias));
    if (tx.rank() < 1 || tb.rank() != 1 || tx.dim(tx.rank() - 1) != tb.dim(0)) {
        throw DimensionError("bias_add: shapes " + shape_str(tx.shape()) + " vs " +
                             shape_str(tb.shape()));
    }
    const std::size_t d = tb.dim(0), rows = tx.size() / d;
    Node n;
    n.kind = OpKind::BiasAdd;
    n.inputs = {x.id, bias.id};
    n.out = Tensor(tx.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) n.out[r * d + j] = tx[r * d + j] + tb[j];
    return {push(std::move(n))};
}

GraphVar Graph::slice_last(GraphVar x, std::size_t start, std::size_t len) {
    const Tensor& tx = val(check(x));
    const std::size_t d = tx.dim(tx.rank() - 1);
    if (start + len > d || len == 0) {
        throw DimensionError("slice_last: [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of range for " +
                             shape_str(tx.shape()));
    }
    Shape out_shape = tx.shape();
    out_shape.back() = len;
    const std::size_t rows = tx.size() / d;
    Node n;
    n.kind = OpKind::SliceLast;
    n.inputs = {x.id};
    n.start = start;
    n.len = len;
    n.out = Tensor(out_shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) n.out[r * len + j] = tx[r * d + start + j];
    return {push(std::move(n))};
}

GraphVar Graph::concat_last(const std::vector<GraphVar>& xs) {
    if (xs.empty()) throw DimensionError("concat_last: no inputs");
    Node n;
    n.kind = OpKind::ConcatLast;
    Shape lead = val(check(xs[0])).shape();
    lead.pop_back();
    std::size_t total = 0;
    for (GraphVar v : xs) {
        const Tensor& t = val(check(v));
        Shape l = t.shape();
        l.pop_back();
        if (l != lead) {
            throw DimensionError("concat_last: leading dims differ: " +
                                 shape_str(val(xs[0].id).shape()) + " vs " + shape_str(t.shape()));
        }
        total += t.dim(t.rank() - 1);
        n.inputs.push_back(v.id);
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    const std::size_t rows = numel(lead);
    n.out = Tensor(out_shape);
    std::size_t col = 0;
    for (GraphVar v : xs) {
        const Tensor& t = val(v.id);
        const std::size_t d = t.dim(t.rank() - 1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) n.out[r * total + col + j] = t[r * d + j];
        col += d;
    }
    return {push(std::move(n))};
}

GraphVar Graph::stack_tokens(const std::vector<GraphVar>& xs) {
    if (xs.empty()) throw DimensionError("stack_tokens: no inputs");
    const Tensor& first = val(check(xs[0]));
    if (first.rank() != 2) {
        throw DimensionError("stack_tokens: inputs must be [b,d], got " +
                             shape_str(first.shape()));
    }
    const std::size_t b = first.dim(0), d = first.dim(1), s = xs.size();
    Node n;
    n.kind = OpKind::StackTokens;
    for (GraphVar v : xs) {
        const Tensor& t = val(check(v));
        require_same_shape("stack_tokens", first, t);
        n.inputs.push_back(v.id);
    }
    n.out = Tensor(Shape{b, s, d});
    for (std::size_t t = 0; t < s; ++t) {
        const Tensor& tok = val(xs[t].id);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < d; ++j) n.out.at3(i, t, j) = tok.at2(i, j);
    }
    return {push(std::move(n))};
}

// --------------------------- fused nn ops ----------------------------------

GraphVar Graph::softmax(GraphVar x, int axis) {
    const Tensor& tx = val(check(x));
    AxisSplit s = split_axis(tx.shape(), axis);
    Node n;
    n.kind = OpKind::Softmax;
    n.inputs = {x.id};
    n.axis = axis;
    n.out = Tensor(tx.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.n * s.inner + in;
            double mx = -HUGE_VAL;
            for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, tx[base + i * s.inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) {
                double e = std::exp(tx[base + i * s.inner] - mx);
                n.out[base + i * s.inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < s.n; ++i) n.out[base + i * s.inner] /= z;
        }
    }
    return {push(std::move(n))};
}

GraphVar Graph::layer_norm(GraphVar x, GraphVar gain, GraphVar bias, double eps) {
    const Tensor& tx = val(check(x));
    const Tensor& tg = val(check(gain));
    const Tensor& tb = val(check(bias));
    const std::size_t d = tx.dim(tx.rank() - 1);
    if (tg.shape() != Shape{d} || tb.shape() != Shape{d}) {
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                             shape_str(tg.shape()) + " and " + shape_str(tb.shape()));
    }
    const std::size_t rows = tx.size() / d;
    Node n;
    n.kind = OpKind::LayerNorm;
    n.inputs = {x.id, gain.id, bias.id};
    n.scalar = eps;
    n.out = Tensor(tx.shape());
    n.daux.resize(rows * 2);  // per row: mean, inv_std
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = tx.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        n.daux[r * 2] = mean;
        n.daux[r * 2 + 1] = inv_std;
        for (std::size_t j = 0; j < d; ++j) {
            n.out[r * d + j] = (xr[j] - mean) * inv_std * tg[j] + tb[j];
        }
    }
    return {push(std::move(n))};
}

GraphVar Graph::conv2d(GraphVar x, GraphVar kernel, GraphVar bias, int stride, int pad) {
    const Tensor& tx = val(check(x));
    const Tensor& tk = val(check(kernel));
    const Tensor& tb = val(check(bias));
    if (tx.rank() != 4 || tk.rank() != 4) {
        throw DimensionError("conv2d: need x [b,c,h,w] and kernel [c',c,kh,kw], got " +
                             shape_str(tx.shape()) + " and " + shape_str(tk.shape()));
    }
    const std::size_t b = tx.dim(0), ci = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
    const std::size_t co = tk.dim(0), kh = tk.dim(2), kw = tk.dim(3);
    if (tk.dim(1) != ci) {
        throw DimensionError("conv2d: channel mismatch " + shape_str(tx.shape()) + " vs " +
                             shape_str(tk.shape()));
    }
    if (tb.shape() != Shape{co}) {
        throw DimensionError("conv2d: bias must be [" + std::to_string(co) + "], got " +
                             shape_str(tb.shape()));
    }
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
    const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
    if (kh > hp || kw > wp) {
        throw ConfigError("conv2d: kernel does not fit padded input");
    }
    if ((hp - kh) % stride != 0 || (wp - kw) % stride != 0) {
        throw ConfigError("conv2d: non-integer output size for stride " + std::to_string(stride));
    }
    const std::size_t ho = (hp - kh) / stride + 1, wo = (wp - kw) / stride + 1;
    Node n;
    n.kind = OpKind::Conv2d;
    n.inputs = {x.id, kernel.id, bias.id};
    n.stride = stride;
    n.pad = pad;
    n.out = Tensor(Shape{b, co, ho, wo});
    const std::int64_t ih = static_cast<std::int64_t>(h), iw = static_cast<std::int64_t>(w);
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t oc = 0; oc < co; ++oc) {
            double* orow = n.out.data() + ((bi * co + oc) * ho) * wo;
            for (std::size_t oy = 0; oy < ho; ++oy) {
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = tb[oc];
                    for (std::size_t ic = 0; ic < ci; ++ic) {
                        const double* xpl = tx.data() + ((bi * ci + ic) * h) * w;
                        const double* kpl = tk.data() + ((oc * ci + ic) * kh) * kw;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const std::int64_t y =
                                static_cast<std::int64_t>(oy) * stride - pad + ky;
                            if (y < 0 || y >= ih) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const std::int64_t xx =
                                    static_cast<std::int64_t>(ox) * stride - pad + kx;
                                if (xx < 0 || xx >= iw) continue;
                                acc += xpl[y * iw + xx] * kpl[ky * kw + kx];
                            }
                        }
                    }
                    orow[oy * wo + ox] = acc;
                }
            }
        }
    }
    return {push(std::move(n))};
}

GraphVar Graph::max_pool2(GraphVar x) {
    const Tensor& tx = val(check(x));
    if (tx.rank() != 4) {
        throw DimensionError("max_pool2: need [b,c,h,w], got " + shape_str(tx.shape()));
    }
    const std::size_t b = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError("max_pool2: odd spatial dims " + shape_str(tx.shape()));
    }
    const std::size_t ho = h / 2, wo = w / 2;
    Node n;
    n.kind = OpKind::MaxPool2;
    n.inputs = {x.id};
    n.out = Tensor(Shape{b, c, ho, wo});
    n.iaux.resize(b * c * ho * wo);
    for (std::size_t p = 0; p < b * c; ++p) {
        const double* xpl = tx.data() + p * h * w;
        double* opl = n.out.data() + p * ho * wo;
        std::int64_t* apl = n.iaux.data() + p * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = (2 * oy) * w + 2 * ox;
                double bv = xpl[best];
                const std::size_t cand[3] = {(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox,
                                             (2 * oy + 1) * w + 2 * ox + 1};
                for (std::size_t idx : cand) {
                    if (xpl[idx] > bv) {
                        bv = xpl[idx];
                        best = idx;
                    }
                }
                opl[oy * wo + ox] = bv;
                apl[oy * wo + ox] = static_cast<std::int64_t>(p * h * w + best);
            }
        }
    }
    return {push(std::move(n))};
}

GraphVar Graph::mean_pool_seq(GraphVar x) {
    const Tensor& tx = val(check(x));
    if (tx.rank() != 3 || tx.dim(1) == 0) {
        throw DimensionError("mean_pool_seq: need [b,s,d] with s >= 1, got " +
                             shape_str(tx.shape()));
    }
    const std::size_t b = tx.dim(0), s = tx.dim(1), d = tx.dim(2);
    Node n;
    n.kind = OpKind::MeanPoolSeq;
    n.inputs = {x.id};
    n.out = Tensor(Shape{b, d});
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t t = 0; t < s; ++t)
            for (std::size_t j = 0; j < d; ++j) n.out.at2(i, j) += tx.at3(i, t, j);
        for (std::size_t j = 0; j < d; ++j) n.out.at2(i, j) /= static_cast<double>(s);
    }
    return {push(std::move(n))};
}

GraphVar Graph::sum_all(GraphVar x) {
    const Tensor& tx = val(check(x));
    Node n;
    n.kind = OpKind::SumAll;
    n.inputs = {x.id};
    double acc = 0.0;
    for (std::size_t i = 0; i < tx.size(); ++i) acc += tx[i];
    n.out = Tensor::scalar(acc);
    return {push(std::move(n))};
}

GraphVar Graph::cross_entropy(GraphVar y_hat, GraphVar y_onehot) {
    const Tensor& tp = val(check(y_hat));
    const Tensor& ty = val(check(y_onehot));
    require_same_shape("cross_entropy", tp, ty);
    if (tp.rank() != 2) {
        throw DimensionError("cross_entropy: need [b,K], got " + shape_str(tp.shape()));
    }
    const std::size_t b = tp.dim(0), k = tp.dim(1);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t ones = 0;
        for (std::size_t j = 0; j < k; ++j) {
            const double v = ty.at2(i, j);
            if (v == 1.0) {
                ++ones;
            } else if (v != 0.0) {
                throw ValidationError("cross_entropy: labels row " + std::to_string(i) +
                                      " is not one-hot");
            }
        }
        if (ones != 1) {
            throw ValidationError("cross_entropy: labels row " + std::to_string(i) +
                                  " is not one-hot");
        }
    }
    Node n;
    n.kind = OpKind::CrossEntropy;
    n.inputs = {y_hat.id, y_onehot.id};
    double acc = 0.0;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < k; ++j)
            if (ty.at2(i, j) == 1.0) acc -= std::log(std::max(tp.at2(i, j), kClamp));
    n.out = Tensor::scalar(acc / static_cast<double>(b));
    return {push(std::move(n))};
}

GraphVar Graph::cosine_consistency(GraphVar a, GraphVar b) {
    const Tensor& ta = val(check(a));
    const Tensor& tb = val(check(b));
    require_same_shape("cosine_consistency", ta, tb);
    if (ta.rank() != 2) {
        throw DimensionError("cosine_consistency: need [b,d], got " + shape_str(ta.shape()));
    }
    const std::size_t bsz = ta.dim(0), d = ta.dim(1);
    Node n;
    n.kind = OpKind::CosineConsistency;
    n.inputs = {a.id, b.id};
    n.daux.resize(bsz * 4);  // per row: dot, norm_a, norm_b, clamped flag
    double acc = 0.0;
    for (std::size_t i = 0; i < bsz; ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += ta.at2(i, j) * tb.at2(i, j);
            na += ta.at2(i, j) * ta.at2(i, j);
            nb += tb.at2(i, j) * tb.at2(i, j);
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        bool clamped = false;
        if (na < kClamp || nb < kClamp) {
            clamped = true;
            cosine_zero_norm_warnings.fetch_add(1, std::memory_order_relaxed);
            na = std::max(na, kClamp);
            nb = std::max(nb, kClamp);
        }
        const double cosv = dot / (na * nb);
        acc += 1.0 - cosv;
        n.daux[i * 4 + 0] = dot;
        n.daux[i * 4 + 1] = na;
        n.daux[i * 4 + 2] = nb;
        n.daux[i * 4 + 3] = clamped ? 1.0 : 0.0;
    }
    n.out = Tensor::scalar(acc / static_cast<double>(bsz));
    return {push(std::move(n))};
}

// ------------------------------- backward ----------------------------------

void Graph::accumulate(Tensor& slot, const Shape& shape, const Tensor& add) {
    if (slot.size() == 0) slot = Tensor(shape);
    for (std::size_t i = 0; i < add.size(); ++i) slot[i] += add[i];
}

void Graph::backprop_node(NodeId id, const Tensor& gy, std::vector<Tensor>& grads) const {
    const Node& n = nodes_[id];
    auto want = [&](int idx) { return nodes_[n.inputs[idx]].needs_grad; };
    auto slot = [&](int idx) -> Tensor& {
        Tensor& g = grads[n.inputs[idx]];
        if (g.size() == 0) g = Tensor(nodes_[n.inputs[idx]].out.shape());
        return g;
    };

    switch (n.kind) {
        case OpKind::Leaf:
            return;
        case OpKind::Add: {
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            if (want(1)) {
                Tensor& g = slot(1);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            return;
        }
        case OpKind::Sub: {
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            if (want(1)) {
                Tensor& g = slot(1);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] -= gy[i];
            }
            return;
        }
        case OpKind::Mul: {
            const Tensor& a = val(n.inputs[0]);
            const Tensor& b = val(n.inputs[1]);
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * b[i];
            }
            if (want(1)) {
                Tensor& g = slot(1);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * a[i];
            }
            return;
        }
        case OpKind::Div: {
            const Tensor& a = val(n.inputs[0]);
            const Tensor& b = val(n.inputs[1]);
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] / b[i];
            }
            if (want(1)) {
                Tensor& g = slot(1);
                for (std::size_t i = 0; i < gy.size(); ++i)
                    g[i] -= gy[i] * a[i] / (b[i] * b[i]);
            }
            return;
        }
        case OpKind::AddScalar:
        case OpKind::SubScalar: {
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            return;
        }
        case OpKind::MulScalar:
        case OpKind::DivScalar: {
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * n.scalar;
            }
            return;
        }
        case OpKind::Relu: {
            if (want(0)) {
                const Tensor& a = val(n.inputs[0]);
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i)
                    if (a[i] > 0.0) g[i] += gy[i];
            }
            return;
        }
        case OpKind::Exp: {
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * n.out[i];
            }
            return;
        }
        case OpKind::Log: {
            if (want(0)) {
                const Tensor& a = val(n.inputs[0]);
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] / a[i];
            }
            return;
        }
        case OpKind::MatMul: {
            const Tensor& a = val(n.inputs[0]);
            const Tensor& b = val(n.inputs[1]);
            const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
            if (want(0)) gemm_acc_nt(gy.data(), b.data(), slot(0).data(), m, k, nn);
            if (want(1)) gemm_acc_tn(a.data(), gy.data(), slot(1).data(), m, k, nn);
            return;
        }
        case OpKind::BatchMatMul: {
            const Tensor& a = val(n.inputs[0]);
            const Tensor& b = val(n.inputs[1]);
            const std::size_t bsz = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(2);
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < bsz; ++i)
                    gemm_acc_nt(gy.data() + i * m * nn, b.data() + i * k * nn,
                                g.data() + i * m * k, m, k, nn);
            }
            if (want(1)) {
                Tensor& g = slot(1);
                for (std::size_t i = 0; i < bsz; ++i)
                    gemm_acc_tn(a.data() + i * m * k, gy.data() + i * m * nn,
                                g.data() + i * k * nn, m, k, nn);
            }
            return;
        }
        case OpKind::TransposeLast2: {
            if (want(0)) {
                const Tensor& a = val(n.inputs[0]);
                const std::size_t m = a.dim(a.rank() - 2), nn = a.dim(a.rank() - 1);
                const std::size_t outer = a.size() / (m * nn);
                Tensor& g = slot(0);
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = gy.data() + o * m * nn;  // [nn, m]
                    double* dst = g.data() + o * m * nn;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < nn; ++j) dst[i * nn + j] += src[j * m + i];
                }
            }
            return;
        }
        case OpKind::Reshape: {
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            return;
        }
        case OpKind::BiasAdd: {
            const Tensor& b = val(n.inputs[1]);
            const std::size_t d = b.dim(0), rows = gy.size() / d;
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
            }
            if (want(1)) {
                Tensor& g = slot(1);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j];
            }
            return;
        }
        case OpKind::SliceLast: {
            if (want(0)) {
                const Tensor& a = val(n.inputs[0]);
                const std::size_t d = a.dim(a.rank() - 1), rows = a.size() / d;
                Tensor& g = slot(0);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n.len; ++j)
                        g[r * d + n.start + j] += gy[r * n.len + j];
            }
            return;
        }
        case OpKind::ConcatLast: {
            const std::size_t total = n.out.dim(n.out.rank() - 1);
            const std::size_t rows = n.out.size() / total;
            std::size_t col = 0;
            for (std::size_t idx = 0; idx < n.inputs.size(); ++idx) {
                const Tensor& a = val(n.inputs[idx]);
                const std::size_t d = a.dim(a.rank() - 1);
                if (want(static_cast<int>(idx))) {
                    Tensor& g = slot(static_cast<int>(idx));
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j)
                            g[r * d + j] += gy[r * total + col + j];
                }
                col += d;
            }
            return;
        }
        case OpKind::StackTokens: {
            const std::size_t b = n.out.dim(0), s = n.out.dim(1), d = n.out.dim(2);
            for (std::size_t t = 0; t < s; ++t) {
                if (!want(static_cast<int>(t))) continue;
                Tensor& g = slot(static_cast<int>(t));
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        g[i * d + j] += gy[(i * s + t) * d + j];
            }
            return;
        }
        case OpKind::Softmax: {
            if (want(0)) {
                AxisSplit s = split_axis(n.out.shape(), n.axis);
                Tensor& g = slot(0);
                for (std::size_t o = 0; o < s.outer; ++o) {
                    for (std::size_t in = 0; in < s.inner; ++in) {
                        const std::size_t base = o * s.n * s.inner + in;
                        double dot = 0.0;
                        for (std::size_t i = 0; i < s.n; ++i)
                            dot += n.out[base + i * s.inner] * gy[base + i * s.inner];
                        for (std::size_t i = 0; i < s.n; ++i)
                            g[base + i * s.inner] +=
                                n.out[base + i * s.inner] * (gy[base + i * s.inner] - dot);
                    }
                }
            }
            return;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = val(n.inputs[0]);
            const Tensor& gain = val(n.inputs[1]);
            const std::size_t d = gain.dim(0), rows = x.size() / d;
            const double dd = static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double mean = n.daux[r * 2];
                const double inv_std = n.daux[r * 2 + 1];
                const double* xr = x.data() + r * d;
                const double* gyr = gy.data() + r * d;
                // dxhat = gy * gain; reduce terms
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double xhat = (xr[j] - mean) * inv_std;
                    const double dxhat = gyr[j] * gain[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if (want(0)) {
                    Tensor& g = slot(0);
                    double* gr = g.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mean) * inv_std;
                        const double dxhat = gyr[j] * gain[j];
                        gr[j] += inv_std * (dxhat - sum_dxhat / dd - xhat * sum_dxhat_xhat / dd);
                    }
                }
                if (want(1)) {
                    Tensor& g = slot(1);
                    for (std::size_t j = 0; j < d; ++j)
                        g[j] += gyr[j] * (xr[j] - mean) * inv_std;
                }
                if (want(2)) {
                    Tensor& g = slot(2);
                    for (std::size_t j = 0; j < d; ++j) g[j] += gyr[j];
                }
            }
            return;
        }
        case OpKind::Conv2d: {
            const Tensor& x = val(n.inputs[0]);
            const Tensor& k = val(n.inputs[1]);
            const std::size_t b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
            const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
            const std::size_t ho = n.out.dim(2), wo = n.out.dim(3);
            const std::int64_t ih = static_cast<std::int64_t>(h),
                               iw = static_cast<std::int64_t>(w);
            const bool wx = want(0), wk = want(1), wb = want(2);
            Tensor* gx = wx ? &slot(0) : nullptr;
            Tensor* gk = wk ? &slot(1) : nullptr;
            Tensor* gb = wb ? &slot(2) : nullptr;
            for (std::size_t bi = 0; bi < b; ++bi) {
                for (std::size_t oc = 0; oc < co; ++oc) {
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const double gv = gy[((bi * co + oc) * ho + oy) * wo + ox];
                            if (gv == 0.0) continue;
                            if (wb) (*gb)[oc] += gv;
                            if (!wx && !wk) continue;
                            for (std::size_t ic = 0; ic < ci; ++ic) {
                                const std::size_t xoff = ((bi * ci + ic) * h) * w;
                                const std::size_t koff = ((oc * ci + ic) * kh) * kw;
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::int64_t y =
                                        static_cast<std::int64_t>(oy) * n.stride - n.pad + ky;
                                    if (y < 0 || y >= ih) continue;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const std::int64_t xx =
                                            static_cast<std::int64_t>(ox) * n.stride - n.pad + kx;
                                        if (xx < 0 || xx >= iw) continue;
                                        if (wx)
                                            (*gx)[xoff + y * iw + xx] +=
                                                gv * k[koff + ky * kw + kx];
                                        if (wk)
                                            (*gk)[koff + ky * kw + kx] +=
                                                gv * x[xoff + y * iw + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            return;
        }
        case OpKind::MaxPool2: {
            if (want(0)) {
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < gy.size(); ++i)
                    g[static_cast<std::size_t>(n.iaux[i])] += gy[i];
            }
            return;
        }
        case OpKind::MeanPoolSeq: {
            if (want(0)) {
                const Tensor& a = val(n.inputs[0]);
                const std::size_t b = a.dim(0), s = a.dim(1), d = a.dim(2);
                const double inv = 1.0 / static_cast<double>(s);
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t t = 0; t < s; ++t)
                        for (std::size_t j = 0; j < d; ++j)
                            g[(i * s + t) * d + j] += gy[i * d + j] * inv;
            }
            return;
        }
        case OpKind::SumAll: {
            if (want(0)) {
                Tensor& g = slot(0);
                const double gv = gy[0];
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
            }
            return;
        }
        case OpKind::CrossEntropy: {
            if (want(0)) {
                const Tensor& p = val(n.inputs[0]);
                const Tensor& y = val(n.inputs[1]);
                const std::size_t b = p.dim(0), k = p.dim(1);
                const double gv = gy[0];
                Tensor& g = slot(0);
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        if (y.at2(i, j) != 1.0) continue;
                        // clamped log has zero slope below the clamp
                        if (p.at2(i, j) > kClamp) {
                            g[i * k + j] -= gv / (static_cast<double>(b) * p.at2(i, j));
                        }
                    }
                }
            }
            return;
        }
        case OpKind::CosineConsistency: {
            const Tensor& a = val(n.inputs[0]);
            const Tensor& b = val(n.inputs[1]);
            const std::size_t bsz = a.dim(0), d = a.dim(1);
            const double gv = gy[0] / static_cast<double>(bsz);
            const bool wa = want(0), wb = want(1);
            Tensor* ga = wa ? &slot(0) : nullptr;
            Tensor* gb = wb ? &slot(1) : nullptr;
            for (std::size_t i = 0; i < bsz; ++i) {
                if (n.daux[i * 4 + 3] != 0.0) continue;  // clamped row: no gradient
                const double dot = n.daux[i * 4 + 0];
                const double na = n.daux[i * 4 + 1];
                const double nb = n.daux[i * 4 + 2];
                const double inv = 1.0 / (na * nb);
                const double ca = dot / (na * na);
                const double cb = dot / (nb * nb);
                for (std::size_t j = 0; j < d; ++j) {
                    // d(1 - cos)/da_j = -(b_j - (dot/|a|^2) a_j) / (|a||b|)
                    if (wa) (*ga)[i * d + j] -= gv * inv * (b.at2(i, j) - ca * a.at2(i, j));
                    if (wb) (*gb)[i * d + j] -= gv * inv * (a.at2(i, j) - cb * b.at2(i, j));
                }
            }
            return;
        }
    }
}

GradTable Graph::backward(GraphVar loss) const {
    const Tensor& lt = value(loss);
    if (!lt.is_scalar()) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(lt.shape()));
    }
    return backward_from({{loss, Tensor::scalar(1.0)}});
}

GradTable Graph::backward_from(const std::vector<std::pair<GraphVar, Tensor>>& seeds) const {
    std::vector<Tensor> grads(nodes_.size());
    for (const auto& [v, g] : seeds) {
        NodeId id = check(v);
        if (!nodes_[id].out.same_shape(g)) {
            throw ContractError("backward_from: seed shape " + shape_str(g.shape()) +
                                " does not match node shape " +
                                shape_str(nodes_[id].out.shape()));
        }
        accumulate(grads[id], g.shape(), g);
    }
    for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
        if (grads[id].size() == 0 || !nodes_[id].needs_grad) continue;
        backprop_node(id, grads[id], grads);
    }
    GradTable table;
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
        const Node& n = nodes_[id];
        if (n.kind == OpKind::Leaf && n.out.requires_grad) {
            table.set(id, grads[id].size() ? std::move(grads[id]) : Tensor(n.out.shape()));
        }
    }
    return table;
}

// --------------------------- finite differences ----------------------------

double finite_diff_check_multi(const MultiScalarBuilder& f, const std::vector<Tensor>& xs,
                               double epsilon) {
    if (epsilon <= 0.0) throw ContractError("finite_diff_check: epsilon must be > 0");

    auto eval = [&](const std::vector<Tensor>& inputs, bool with_grad,
                    std::vector<Tensor>* out_grads) -> double {
        Graph g;
        std::vector<GraphVar> leaves;
        leaves.reserve(inputs.size());
        for (const Tensor& t : inputs) {
            Tensor leaf = t;
            leaf.requires_grad = with_grad;
            leaves.push_back(g.leaf(std::move(leaf)));
        }
        GraphVar loss = f(g, leaves);
        const double v = g.value(loss).scalar_value();
        if (with_grad && out_grads) {
            GradTable table = g.backward(loss);
            out_grads->clear();
            for (GraphVar leaf : leaves) out_grads->push_back(table.at(leaf));
        }
        return v;
    };

    std::vector<Tensor> analytic;
    const double v1 = eval(xs, true, &analytic);
    const double v2 = eval(xs, false, nullptr);
    if (v1 != v2) {
        throw OracleInvalidError("finite_diff_check: function is not deterministic (" +
                                 std::to_string(v1) + " vs " + std::to_string(v2) + ")");
    }

    double worst = 0.0;
    std::vector<Tensor> work = xs;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        for (std::size_t i = 0; i < xs[t].size(); ++i) {
            const double orig = work[t][i];
            work[t][i] = orig + epsilon;
            const double up = eval(work, false, nullptr);
            work[t][i] = orig - epsilon;
            const double down = eval(work, false, nullptr);
            work[t][i] = orig;
            const double fd = (up - down) / (2.0 * epsilon);
            const double err = std::fabs(analytic[t][i] - fd) / std::max(1.0, std::fabs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

double finite_diff_check(const ScalarBuilder& f, const Tensor& x, double epsilon) {
    return finite_diff_check_multi(
        [&](Graph& g, const std::vector<GraphVar>& vars) { return f(g, vars[0]); }, {x}, epsilon);
}

}  // namespace hvfl
