#include "hybridvfl/encoders.hpp"

namespace hvfl {

ImageSpine::ImageSpine(std::string name, const EncoderDims& dims, std::uint64_t seed)
    : dims_(dims) {
    if (dims.image_hw % 4 != 0) {
        throw ConfigError("image spine: side " + std::to_string(dims.image_hw) +
                          " must be divisible by 4 (two 2x2 pools)");
    }
    c1_ = Conv2d(name + ".conv1", dims.image_channels, dims.conv1_out, 3, 1, 1,
                 derive_seed(seed, "conv1"));
    c2_ = Conv2d(name + ".conv2", dims.conv1_out, dims.conv2_out, 3, 1, 1,
                 derive_seed(seed, "conv2"));
    fc_ = Linear(name + ".fc", dims.image_flat(), dims.image_fc, derive_seed(seed, "fc"));
}

GraphVar ImageSpine::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    GraphVar h = g.max_pool2(g.relu(c1_.forward(g, pb, x)));
    h = g.max_pool2(g.relu(c2_.forward(g, pb, h)));
    const std::size_t b = g.value(x).dim(0);
    h = g.reshape(h, {b, dims_.image_flat()});
    return g.relu(fc_.forward(g, pb, h));
}

void ImageSpine::collect(NamedParams& out) {
    c1_.collect(out);
    c2_.collect(out);
    fc_.collect(out);
}

TabularSpine::TabularSpine(std::string name, const EncoderDims& dims, std::uint64_t seed) {
    l1_ = Linear(name + ".l1", dims.tab_in, dims.tab_h1, derive_seed(seed, "l1"));
    l2_ = Linear(name + ".l2", dims.tab_h1, dims.tab_h2, derive_seed(seed, "l2"));
}

GraphVar TabularSpine::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    GraphVar h = g.relu(l1_.forward(g, pb, x));
    return g.relu(l2_.forward(g, pb, h));
}

void TabularSpine::collect(NamedParams& out) {
    l1_.collect(out);
    l2_.collect(out);
}

// ------------------------------ ImageEncoder --------------------------------

ImageEncoder::ImageEncoder(const EncoderDims& dims, std::uint64_t seed, std::string name)
    : dims_(dims) {
    spine_ = ImageSpine(name + ".spine", dims, derive_seed(seed, "spine"));
    head_inv_ = Linear(name + ".head_inv", dims.image_fc, dims.d_e, derive_seed(seed, "head_inv"));
    head_spec_ =
        Linear(name + ".head_spec", dims.image_fc, dims.d_e, derive_seed(seed, "head_spec"));
}

void ImageEncoder::check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != dims_.image_channels) {
        throw DimensionError("encode_image: expected [b," + std::to_string(dims_.image_channels) +
                             ",H,W], got " + shape_str(x.shape()));
    }
    if (x.dim(2) != dims_.image_hw || x.dim(3) != dims_.image_hw) {
        throw DimensionError("encode_image: expected " + std::to_string(dims_.image_hw) + "x" +
                             std::to_string(dims_.image_hw) + " input, got " +
                             shape_str(x.shape()));
    }
}

std::pair<GraphVar, GraphVar> ImageEncoder::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    check_input(g.value(x));
    GraphVar features = spine_.forward(g, pb, x);
    return {head_inv_.forward(g, pb, features), head_spec_.forward(g, pb, features)};
}

EmbeddingBundle ImageEncoder::encode(const Tensor& x, std::vector<std::uint32_t> batch_ids) {
    Graph g;
    ParamBindings pb;
    auto [zi, zs] = forward(g, pb, g.leaf(x));
    return {g.value(zi), g.value(zs), ClientSource::ImageClient, std::move(batch_ids)};
}

void ImageEncoder::collect(NamedParams& out) {
    spine_.collect(out);
    head_inv_.collect(out);
    head_spec_.collect(out);
}

// ----------------------------- TabularEncoder -------------------------------

TabularEncoder::TabularEncoder(const EncoderDims& dims, std::uint64_t seed, std::string name)
    : dims_(dims) {
    spine_ = TabularSpine(name + ".spine", dims, derive_seed(seed, "spine"));
    head_inv_ = Linear(name + ".head_inv", dims.tab_h2, dims.d_e, derive_seed(seed, "head_inv"));
    head_spec_ = Linear(name + ".head_spec", dims.tab_h2, dims.d_e, derive_seed(seed, "head_spec"));
}

void TabularEncoder::check_input(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != dims_.tab_in) {
        throw ValidationError("encode_tabular: feature width mismatch, expected [b," +
                              std::to_string(dims_.tab_in) + "], got " + shape_str(x.shape()));
    }
}

std::pair<GraphVar, GraphVar> TabularEncoder::forward(Graph& g, ParamBindings& pb, GraphVar x) {
    check_input(g.value(x));
    GraphVar features = spine_.forward(g, pb, x);
    return {head_inv_.forward(g, pb, features), head_spec_.forward(g, pb, features)};
}

EmbeddingBundle TabularEncoder::encode(const Tensor& x, std::vector<std::uint32_t> batch_ids) {
    Graph g;
    ParamBindings pb;
    auto [zi, zs] = forward(g, pb, g.leaf(x));
    return {g.value(zi), g.value(zs), ClientSource::TabularClient, std::move(batch_ids)};
}

void TabularEncoder::collect(NamedParams& out) {
    spine_.collect(out);
    head_inv_.collect(out);
    head_spec_.collect(out);
}

// --------------------------- single-head variants ---------------------------

SingleImageEncoder::SingleImageEncoder(const EncoderDims& dims, std::uint64_t seed,
                                       std::string name)
    : dims_(dims) {
    spine_ = ImageSpine(name + ".spine", dims, derive_seed(seed, "spine"));
    head_ = Linear(name + ".head", dims.image_fc, 2 * dims.d_e, derive_seed(seed, "head"));
}

std::pair<GraphVar, GraphVar> SingleImageEncoder::forward(Graph& g, ParamBindings& pb,
                                                          GraphVar x) {
    GraphVar z = head_.forward(g, pb, spine_.forward(g, pb, x));
    return {g.slice_last(z, 0, dims_.d_e), g.slice_last(z, dims_.d_e, dims_.d_e)};
}

void SingleImageEncoder::collect(NamedParams& out) {
    spine_.collect(out);
    head_.collect(out);
}

SingleTabularEncoder::SingleTabularEncoder(const EncoderDims& dims, std::uint64_t seed,
                                           std::string name)
    : dims_(dims) {
    spine_ = TabularSpine(name + ".spine", dims, derive_seed(seed, "spine"));
    head_ = Linear(name + ".head", dims.tab_h2, 2 * dims.d_e, derive_seed(seed, "head"));
}

std::pair<GraphVar, GraphVar> SingleTabularEncoder::forward(Graph& g, ParamBindings& pb,
                                                            GraphVar x) {
    GraphVar z = head_.forward(g, pb, spine_.forward(g, pb, x));
    return {g.slice_last(z, 0, dims_.d_e), g.slice_last(z, dims_.d_e, dims_.d_e)};
}

void SingleTabularEncoder::collect(NamedParams& out) {
    spine_.collect(out);
    head_.collect(out);
}

}  // namespace hvfl
