#pragma once

#include <cstdint>
#include <vector>

#include "hybridvfl/encoders.hpp"
#include "hybridvfl/tensor.hpp"

namespace hvfl {

enum class Role : std::uint8_t { Server = 0, ImageClient = 1, TabularClient = 2 };

enum class MessageKind : std::uint8_t {
    BatchRequest = 0,
    EmbeddingUpload = 1,
    GradientDownload = 2,
};

const char* kind_name(MessageKind k);
const char* role_name(Role r);

// Wire element width for tensor payloads. F32 is the protocol's layout;
// F64 exists for the lossless-wire equivalence oracle only.
enum class WireFloat : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t wire_float_width(WireFloat wf) { return wf == WireFloat::F32 ? 4 : 8; }

// One protocol message. Tensor order is fixed per kind:
//   EmbeddingUpload:   [z_inv, z_spec]
//   GradientDownload:  [grad_inv, grad_spec]
//   BatchRequest:      no tensors
struct ProtocolMessage {
    std::uint32_t round = 0;
    Role sender = Role::Server;
    MessageKind kind = MessageKind::BatchRequest;
    std::vector<std::uint32_t> batch_ids;
    std::vector<Tensor> tensors;

    // Tensor data bytes only; headers and id lists are overhead, not payload.
    std::size_t payload_bytes(WireFloat wf = WireFloat::F32) const;
};

ProtocolMessage make_batch_request(std::uint32_t round, std::vector<std::uint32_t> ids);
ProtocolMessage make_embedding_upload(std::uint32_t round, const EmbeddingBundle& bundle);
ProtocolMessage make_gradient_download(std::uint32_t round, Role client, Tensor grad_inv,
                                       Tensor grad_spec, std::vector<std::uint32_t> ids);
EmbeddingBundle to_bundle(const ProtocolMessage& upload);

// Little-endian layout: header {round u32, sender u8, kind u8}, then the id
// list as {count u32, ids u32 x count}, then each tensor as
// {rank u8, dims u32 x rank, data f32 x n}. Wire floats are converted
// from/to the f64 compute representation by nearest rounding.
std::vector<std::uint8_t> serialize(const ProtocolMessage& m, WireFloat wf = WireFloat::F32);
ProtocolMessage deserialize(const std::vector<std::uint8_t>& bytes,
                            WireFloat wf = WireFloat::F32);

// Nearest f32 rounding as applied by one serialize/deserialize hop.
Tensor round_to_wire(const Tensor& t, WireFloat wf);

}  // namespace hvfl
