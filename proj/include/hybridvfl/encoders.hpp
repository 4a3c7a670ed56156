#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hybridvfl/nn.hpp"

namespace hvfl {

enum class ClientSource : std::uint8_t { ImageClient = 1, TabularClient = 2 };

// The pair (z_inv, z_spec) emitted by one client for one batch, in the
// server's requested batch order.
struct EmbeddingBundle {
    Tensor z_inv;   // [b, d_e]
    Tensor z_spec;  // [b, d_e]
    ClientSource source = ClientSource::ImageClient;
    std::vector<std::uint32_t> batch_ids;
};

struct EncoderDims {
    std::size_t d_e = 400;
    std::size_t image_hw = 28;
    std::size_t image_channels = 3;
    std::size_t conv1_out = 12;
    std::size_t conv2_out = 24;
    std::size_t image_fc = 512;
    std::size_t tab_in = 20;
    std::size_t tab_h1 = 128;
    std::size_t tab_h2 = 256;

    std::size_t image_flat() const {
        const std::size_t side = image_hw / 4;  // two 2x2 pools
        return conv2_out * side * side;
    }
};

// conv -> relu -> pool, twice, then flatten -> linear -> relu.
class ImageSpine {
public:
    ImageSpine() = default;
    ImageSpine(std::string name, const EncoderDims& dims, std::uint64_t seed);
    GraphVar forward(Graph& g, ParamBindings& pb, GraphVar x);  // [b,c,h,w] -> [b,fc]
    void collect(NamedParams& out);
    const EncoderDims& dims() const { return dims_; }

private:
    EncoderDims dims_;
    Conv2d c1_, c2_;
    Linear fc_;
};

// linear -> relu -> linear -> relu.
class TabularSpine {
public:
    TabularSpine() = default;
    TabularSpine(std::string name, const EncoderDims& dims, std::uint64_t seed);
    GraphVar forward(Graph& g, ParamBindings& pb, GraphVar x);  // [b,p] -> [b,h2]
    void collect(NamedParams& out);

private:
    Linear l1_, l2_;
};

// Dual-output image encoder: shared spine, two independent linear heads.
class ImageEncoder {
public:
    ImageEncoder() = default;
    ImageEncoder(const EncoderDims& dims, std::uint64_t seed, std::string name = "image_encoder");

    // graph-level: returns (z_inv, z_spec) vars
    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x);
    // value-level convenience used by tests and evaluation
    EmbeddingBundle encode(const Tensor& x, std::vector<std::uint32_t> batch_ids);

    void collect(NamedParams& out);
    Linear& head_inv() { return head_inv_; }
    Linear& head_spec() { return head_spec_; }
    const EncoderDims& dims() const { return dims_; }

private:
    void check_input(const Tensor& x) const;
    EncoderDims dims_;
    ImageSpine spine_;
    Linear head_inv_, head_spec_;
};

// Dual-output tabular encoder.
class TabularEncoder {
public:
    TabularEncoder() = default;
    TabularEncoder(const EncoderDims& dims, std::uint64_t seed,
                   std::string name = "tabular_encoder");

    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x);
    EmbeddingBundle encode(const Tensor& x, std::vector<std::uint32_t> batch_ids);

    void collect(NamedParams& out);
    Linear& head_inv() { return head_inv_; }
    Linear& head_spec() { return head_spec_; }

private:
    void check_input(const Tensor& x) const;
    EncoderDims dims_;
    TabularSpine spine_;
    Linear head_inv_, head_spec_;
};

// Single-output encoders for the plain-concatenation variant: one head of
// width 2*d_e, split into two d_e halves for transport so the wire schema
// (and the per-round byte budget) is identical to the dual-output encoders.
class SingleImageEncoder {
public:
    SingleImageEncoder() = default;
    SingleImageEncoder(const EncoderDims& dims, std::uint64_t seed,
                       std::string name = "image_encoder_single");
    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x);
    void collect(NamedParams& out);

private:
    EncoderDims dims_;
    ImageSpine spine_;
    Linear head_;
};

class SingleTabularEncoder {
public:
    SingleTabularEncoder() = default;
    SingleTabularEncoder(const EncoderDims& dims, std::uint64_t seed,
                         std::string name = "tabular_encoder_single");
    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x);
    void collect(NamedParams& out);

private:
    EncoderDims dims_;
    TabularSpine spine_;
    Linear head_;
};

}  // namespace hvfl
