#pragma once

#include <memory>
#include <optional>
#include <unordered_map>

#include "hybridvfl/data.hpp"
#include "hybridvfl/fusion.hpp"
#include "hybridvfl/wire.hpp"

namespace hvfl {

// Byte accounting for one training round. Upstream counts embedding payload
// bytes (client -> server), downstream counts gradient payload bytes.
struct RoundLog {
    std::uint32_t round = 0;
    std::uint64_t upstream_bytes = 0;
    std::uint64_t downstream_bytes = 0;
    double per_sample_upstream_bytes = 0.0;
};

// Accepts exactly BatchRequest -> (EmbeddingUpload x2, any order)
// -> (GradientDownload x2) per round; everything else is rejected.
class ProtocolValidator {
public:
    void observe(const ProtocolMessage& m);
    std::uint32_t rounds_completed() const { return rounds_completed_; }

private:
    enum class Phase { AwaitRequest, AwaitUploads, AwaitDownloads };
    Phase phase_ = Phase::AwaitRequest;
    std::uint32_t round_ = 0;
    std::uint32_t rounds_completed_ = 0;
    bool started_ = false;
    bool img_up_ = false, tab_up_ = false;
    int downloads_ = 0;
};

struct AuditReport {
    bool passed = true;
    std::vector<std::string> violations;
    std::string to_text() const;
};

// Checks that (a) only the three declared message kinds appear in a valid
// order, (b) every tensor payload has the [b, d_e] embedding/gradient shape,
// and (c) no planted canary value appears as an exact 4-byte pattern in any
// tensor payload.
AuditReport privacy_audit(const std::vector<ProtocolMessage>& transcript,
                          const std::vector<float>& canaries, std::size_t expected_dim = 400);

struct CommSummary {
    double mean_per_sample_upstream_bytes = 0.0;
    double mean_per_sample_downstream_bytes = 0.0;
    std::uint64_t raw_image_bytes_per_sample = 0;
    double reduction_ratio = 0.0;
    std::string to_text() const;
};

// Mean per-sample upstream bytes vs hypothetical raw-image transmission of
// H*W*3 float32 values per sample.
CommSummary comm_report(const std::vector<RoundLog>& logs, std::size_t image_h,
                        std::size_t image_w);

// How the server fuses the four embedding tokens.
enum class FusionKind {
    Hybrid,  // consistency loss + transformer fusion + classifier
    Concat,  // plain concatenation + linear classifier
};

struct FedConfig {
    FusionKind kind = FusionKind::Hybrid;
    double lr = 1e-2;
    WireFloat wire = WireFloat::F32;
    std::uint64_t seed = 0;
    FusionConfig fusion;
    EncoderDims dims;
};

// Client-side encoder abstraction shared by the hybrid and concat variants.
struct ClientEncoderModel {
    virtual ~ClientEncoderModel() = default;
    virtual std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x) = 0;
    virtual void collect(NamedParams& out) = 0;
};

std::unique_ptr<ClientEncoderModel> make_image_encoder(FusionKind kind, const EncoderDims& dims,
                                                       std::uint64_t seed);
std::unique_ptr<ClientEncoderModel> make_tabular_encoder(FusionKind kind, const EncoderDims& dims,
                                                         std::uint64_t seed);

// Server-side fusion abstraction. build_loss wires the full Eq-graph from
// the four embedding variables so the federated server and the monolithic
// reference execute the identical op sequence.
struct ServerFusionModel {
    virtual ~ServerFusionModel() = default;
    virtual GraphVar build_loss(Graph& g, ParamBindings& pb, GraphVar z_inv_img,
                                GraphVar z_spec_img, GraphVar z_inv_tab, GraphVar z_spec_tab,
                                GraphVar y, GraphVar* y_hat_out) = 0;
    virtual GraphVar build_predict(Graph& g, ParamBindings& pb, GraphVar z_inv_img,
                                   GraphVar z_spec_img, GraphVar z_inv_tab,
                                   GraphVar z_spec_tab) = 0;
    virtual void collect(NamedParams& out) = 0;
};

std::unique_ptr<ServerFusionModel> make_server_model(const FedConfig& cfg);

// One client process: owns its raw view and encoder, keeps the forward
// graph alive between upload and gradient download.
class ClientNode {
public:
    ClientNode(Role role, Tensor features, std::vector<std::uint32_t> ids,
               std::unique_ptr<ClientEncoderModel> model, double lr);

    ProtocolMessage handle_batch_request(const ProtocolMessage& request);
    void handle_gradient_download(const ProtocolMessage& download);
    EmbeddingBundle encode_only(const std::vector<std::uint32_t>& batch_ids);
    void collect(NamedParams& out) { model_->collect(out); }
    Role role() const { return role_; }

private:
    Tensor gather(const std::vector<std::uint32_t>& batch_ids) const;

    struct Pending {
        std::unique_ptr<Graph> graph;
        ParamBindings bindings;
        GraphVar z_inv, z_spec;
        std::vector<std::uint32_t> ids;
        std::uint32_t round = 0;
    };

    Role role_;
    Tensor features_;  // [N, ...] rows aligned with ids_
    std::vector<std::uint32_t> ids_;
    std::unordered_map<std::uint32_t, std::size_t> index_;
    std::unique_ptr<ClientEncoderModel> model_;
    double lr_;
    std::optional<Pending> pending_;
};

// The label-holding coordinator.
class ServerNode {
public:
    ServerNode(Tensor labels, std::vector<std::uint32_t> ids,
               std::unique_ptr<ServerFusionModel> model, double lr);

    ProtocolMessage make_request(std::uint32_t round, std::vector<std::uint32_t> batch_ids);

    struct StepResult {
        double loss = 0.0;
        ProtocolMessage grad_for_image;
        ProtocolMessage grad_for_tabular;
    };
    // Consumes the two uploads keyed by sender role, not arrival order.
    StepResult training_step(std::uint32_t round, const ProtocolMessage& upload_a,
                             const ProtocolMessage& upload_b);

    Tensor predict(const EmbeddingBundle& img, const EmbeddingBundle& tab);
    // Training objective on the given bundles, forward only, no update.
    double eval_loss(const EmbeddingBundle& img, const EmbeddingBundle& tab);
    void collect(NamedParams& out) { model_->collect(out); }

private:
    Tensor gather_labels(const std::vector<std::uint32_t>& batch_ids) const;

    Tensor labels_;
    std::vector<std::uint32_t> ids_;
    std::unordered_map<std::uint32_t, std::size_t> index_;
    std::unique_ptr<ServerFusionModel> model_;
    double lr_;
    // the open round's request, for upload alignment checks
    std::uint32_t open_round_ = 0;
    bool round_open_ = false;
    std::vector<std::uint32_t> requested_ids_;
};

// Three-party split training over the in-process wire. Every message is
// serialized and re-parsed, so wire rounding and byte accounting are real.
class FederatedTrainer {
public:
    FederatedTrainer(const VerticalParties& parties, const FedConfig& cfg);

    std::pair<double, RoundLog> run_round(const std::vector<std::uint32_t>& batch_ids);

    // Evaluation runs outside the audited training protocol: embeddings are
    // computed without gradient state and never cross the wire.
    std::vector<int> predict_classes(const std::vector<std::uint32_t>& ids,
                                     std::size_t eval_batch = 256);
    double dataset_loss(const std::vector<std::uint32_t>& ids, std::size_t eval_batch = 256);

    const std::vector<ProtocolMessage>& transcript() const { return transcript_; }
    const std::vector<RoundLog>& round_logs() const { return round_logs_; }
    NamedParams parameters();
    std::uint32_t next_round() const { return next_round_; }
    void dump_transcript(const std::string& path) const;

private:
    ProtocolMessage through_wire(const ProtocolMessage& m);

    FedConfig cfg_;
    ClientNode image_client_;
    ClientNode tabular_client_;
    ServerNode server_;
    ProtocolValidator validator_;
    std::vector<ProtocolMessage> transcript_;
    std::vector<RoundLog> round_logs_;
    std::uint32_t next_round_ = 0;
};

// Identical computation in one process: no messages, no wire rounding.
class MonolithicTrainer {
public:
    MonolithicTrainer(const VerticalParties& parties, const FedConfig& cfg);

    double step(const std::vector<std::uint32_t>& batch_ids);
    std::vector<int> predict_classes(const std::vector<std::uint32_t>& ids,
                                     std::size_t eval_batch = 256);
    double dataset_loss(const std::vector<std::uint32_t>& ids, std::size_t eval_batch = 256);
    NamedParams parameters();

private:
    Tensor gather(const Tensor& rows, const std::vector<std::uint32_t>& batch_ids) const;

    FedConfig cfg_;
    Tensor images_, tabular_, labels_;
    std::unordered_map<std::uint32_t, std::size_t> index_;
    std::unique_ptr<ClientEncoderModel> image_encoder_;
    std::unique_ptr<ClientEncoderModel> tabular_encoder_;
    std::unique_ptr<ServerFusionModel> server_model_;
};

// Writes "round,sender,kind,payload_bytes" records, one message per line.
void write_transcript(const std::vector<ProtocolMessage>& transcript, const std::string& path,
                      WireFloat wf = WireFloat::F32);

// Structural audit of a transcript dump file (kinds, ordering, accounting).
AuditReport audit_transcript_records(const std::string& path);

}  // namespace hvfl
