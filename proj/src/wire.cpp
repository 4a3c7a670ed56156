#include "hybridvfl/wire.hpp"

#include <cstring>

namespace hvfl {

const char* kind_name(MessageKind k) {
    switch (k) {
        case MessageKind::BatchRequest: return "BatchRequest";
        case MessageKind::EmbeddingUpload: return "EmbeddingUpload";
        case MessageKind::GradientDownload: return "GradientDownload";
    }
    return "?";
}

const char* role_name(Role r) {
    switch (r) {
        case Role::Server: return "Server";
        case Role::ImageClient: return "ImageClient";
        case Role::TabularClient: return "TabularClient";
    }
    return "?";
}

std::size_t ProtocolMessage::payload_bytes(WireFloat wf) const {
    std::size_t n = 0;
    for (const Tensor& t : tensors) n += t.size() * wire_float_width(wf);
    return n;
}

ProtocolMessage make_batch_request(std::uint32_t round, std::vector<std::uint32_t> ids) {
    ProtocolMessage m;
    m.round = round;
    m.sender = Role::Server;
    m.kind = MessageKind::BatchRequest;
    m.batch_ids = std::move(ids);
    return m;
}

ProtocolMessage make_embedding_upload(std::uint32_t round, const EmbeddingBundle& bundle) {
    ProtocolMessage m;
    m.round = round;
    m.sender = bundle.source == ClientSource::ImageClient ? Role::ImageClient
                                                          : Role::TabularClient;
    m.kind = MessageKind::EmbeddingUpload;
    m.batch_ids = bundle.batch_ids;
    m.tensors = {bundle.z_inv, bundle.z_spec};
    return m;
}

ProtocolMessage make_gradient_download(std::uint32_t round, Role client, Tensor grad_inv,
                                       Tensor grad_spec, std::vector<std::uint32_t> ids) {
    (void)client;  // downloads are addressed out of band; sender is the server
    ProtocolMessage m;
    m.round = round;
    m.sender = Role::Server;
    m.kind = MessageKind::GradientDownload;
    m.batch_ids = std::move(ids);
    m.tensors = {std::move(grad_inv), std::move(grad_spec)};
    return m;
}

EmbeddingBundle to_bundle(const ProtocolMessage& upload) {
    if (upload.kind != MessageKind::EmbeddingUpload || upload.tensors.size() != 2) {
        throw ProtocolError("to_bundle: message is not an embedding upload");
    }
    EmbeddingBundle b;
    b.z_inv = upload.tensors[0];
    b.z_spec = upload.tensors[1];
    b.source = upload.sender == Role::ImageClient ? ClientSource::ImageClient
                                                  : ClientSource::TabularClient;
    b.batch_ids = upload.batch_ids;
    return b;
}

namespace {

std::size_t expected_tensor_count(MessageKind k) {
    return k == MessageKind::BatchRequest ? 0 : 2;
}

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        buf_.push_back(static_cast<std::uint8_t>(v));
        buf_.push_back(static_cast<std::uint8_t>(v >> 8));
        buf_.push_back(static_cast<std::uint8_t>(v >> 16));
        buf_.push_back(static_cast<std::uint8_t>(v >> 24));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u32(static_cast<std::uint32_t>(bits));
        u32(static_cast<std::uint32_t>(bits >> 32));
    }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

    std::uint8_t u8() {
        need(1);
        return buf_[off_++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = static_cast<std::uint32_t>(buf_[off_]) |
                          static_cast<std::uint32_t>(buf_[off_ + 1]) << 8 |
                          static_cast<std::uint32_t>(buf_[off_ + 2]) << 16 |
                          static_cast<std::uint32_t>(buf_[off_ + 3]) << 24;
        off_ += 4;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        std::uint64_t lo = u32();
        std::uint64_t hi = u32();
        std::uint64_t bits = lo | (hi << 32);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::size_t offset() const { return off_; }
    std::size_t remaining() const { return buf_.size() - off_; }

private:
    void need(std::size_t n) {
        if (off_ + n > buf_.size()) {
            throw CodecError("truncated buffer: need " + std::to_string(n) + " bytes at offset " +
                             std::to_string(off_) + ", have " + std::to_string(buf_.size() - off_));
        }
    }
    const std::vector<std::uint8_t>& buf_;
    std::size_t off_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const ProtocolMessage& m, WireFloat wf) {
    if (m.tensors.size() != expected_tensor_count(m.kind)) {
        throw CodecError(std::string("serialize: ") + kind_name(m.kind) + " must carry " +
                         std::to_string(expected_tensor_count(m.kind)) + " tensors, has " +
                         std::to_string(m.tensors.size()));
    }
    Writer w;
    w.u32(m.round);
    w.u8(static_cast<std::uint8_t>(m.sender));
    w.u8(static_cast<std::uint8_t>(m.kind));
    w.u32(static_cast<std::uint32_t>(m.batch_ids.size()));
    for (std::uint32_t id : m.batch_ids) w.u32(id);
    for (const Tensor& t : m.tensors) {
        if (t.rank() > 255) throw CodecError("serialize: tensor rank exceeds u8");
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        if (wf == WireFloat::F32) {
            for (std::size_t i = 0; i < t.size(); ++i) w.f32(static_cast<float>(t[i]));
        } else {
            for (std::size_t i = 0; i < t.size(); ++i) w.f64(t[i]);
        }
    }
    return w.take();
}

ProtocolMessage deserialize(const std::vector<std::uint8_t>& bytes, WireFloat wf) {
    Reader r(bytes);
    ProtocolMessage m;
    m.round = r.u32();
    const std::uint8_t sender = r.u8();
    if (sender > 2) {
        throw CodecError("unknown sender " + std::to_string(sender) + " at offset " +
                         std::to_string(r.offset() - 1));
    }
    m.sender = static_cast<Role>(sender);
    const std::uint8_t kind = r.u8();
    if (kind > 2) {
        throw CodecError("unknown message kind " + std::to_string(kind) + " at offset " +
                         std::to_string(r.offset() - 1));
    }
    m.kind = static_cast<MessageKind>(kind);
    const std::uint32_t id_count = r.u32();
    m.batch_ids.reserve(id_count);
    for (std::uint32_t i = 0; i < id_count; ++i) m.batch_ids.push_back(r.u32());
    for (std::size_t t = 0; t < expected_tensor_count(m.kind); ++t) {
        const std::uint8_t rank = r.u8();
        Shape shape(rank);
        for (std::uint8_t d = 0; d < rank; ++d) shape[d] = r.u32();
        Tensor tensor(shape);
        if (wf == WireFloat::F32) {
            for (std::size_t i = 0; i < tensor.size(); ++i)
                tensor[i] = static_cast<double>(r.f32());
        } else {
            for (std::size_t i = 0; i < tensor.size(); ++i) tensor[i] = r.f64();
        }
        m.tensors.push_back(std::move(tensor));
    }
    if (r.remaining() != 0) {
        throw CodecError("overlong buffer: " + std::to_string(r.remaining()) +
                         " unconsumed bytes at offset " + std::to_string(r.offset()));
    }
    return m;
}

Tensor round_to_wire(const Tensor& t, WireFloat wf) {
    if (wf == WireFloat::F64) return t;
    Tensor out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i)
        out[i] = static_cast<double>(static_cast<float>(t[i]));
    out.requires_grad = t.requires_grad;
    return out;
}

}  // namespace hvfl
