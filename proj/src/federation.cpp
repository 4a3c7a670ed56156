#include "hybridvfl/federation.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hvfl {

// ----------------------------- ProtocolValidator ----------------------------

void ProtocolValidator::observe(const ProtocolMessage& m) {
    switch (phase_) {
        case Phase::AwaitRequest: {
            if (m.kind != MessageKind::BatchRequest) {
                throw ProtocolError(std::string("expected BatchRequest, got ") +
                                    kind_name(m.kind) + " in round " + std::to_string(m.round));
            }
            if (m.sender != Role::Server) {
                throw ProtocolError("BatchRequest must come from the server");
            }
            const std::uint32_t expected = started_ ? round_ + 1 : m.round;
            if (started_ && m.round != expected) {
                throw ProtocolError("round " + std::to_string(m.round) + " out of order, expected " +
                                    std::to_string(expected));
            }
            round_ = m.round;
            started_ = true;
            img_up_ = tab_up_ = false;
            downloads_ = 0;
            phase_ = Phase::AwaitUploads;
            return;
        }
        case Phase::AwaitUploads: {
            if (m.kind != MessageKind::EmbeddingUpload) {
                throw ProtocolError(std::string("expected EmbeddingUpload, got ") +
                                    kind_name(m.kind) + " in round " + std::to_string(round_));
            }
            if (m.round != round_) {
                throw ProtocolError("upload for round " + std::to_string(m.round) +
                                    " while round " + std::to_string(round_) + " is open");
            }
            if (m.sender == Role::ImageClient) {
                if (img_up_) throw ProtocolError("duplicate image upload in round " +
                                                 std::to_string(round_));
                img_up_ = true;
            } else if (m.sender == Role::TabularClient) {
                if (tab_up_) throw ProtocolError("duplicate tabular upload in round " +
                                                 std::to_string(round_));
                tab_up_ = true;
            } else {
                throw ProtocolError("EmbeddingUpload from the server is not allowed");
            }
            if (img_up_ && tab_up_) phase_ = Phase::AwaitDownloads;
            return;
        }
        case Phase::AwaitDownloads: {
            if (m.kind != MessageKind::GradientDownload) {
                throw ProtocolError(std::string("expected GradientDownload, got ") +
                                    kind_name(m.kind) + " in round " + std::to_string(round_));
            }
            if (m.sender != Role::Server) {
                throw ProtocolError("GradientDownload must come from the server");
            }
            if (m.round != round_) {
                throw ProtocolError("download for round " + std::to_string(m.round) +
                                    " while round " + std::to_string(round_) + " is open");
            }
            if (++downloads_ == 2) {
                phase_ = Phase::AwaitRequest;
                ++rounds_completed_;
            }
            return;
        }
    }
}

// ------------------------------- privacy audit ------------------------------

std::string AuditReport::to_text() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << "\n";
    for (const auto& v : violations) os << v << "\n";
    return os.str();
}

AuditReport privacy_audit(const std::vector<ProtocolMessage>& transcript,
                          const std::vector<float>& canaries, std::size_t expected_dim) {
    AuditReport report;
    ProtocolValidator validator;
    for (std::size_t i = 0; i < transcript.size(); ++i) {
        const ProtocolMessage& m = transcript[i];
        if (static_cast<std::uint8_t>(m.kind) > 2) {
            report.violations.push_back("message " + std::to_string(i) +
                                        ": undeclared message kind " +
                                        std::to_string(static_cast<int>(m.kind)));
            continue;
        }
        try {
            validator.observe(m);
        } catch (const ProtocolError& e) {
            report.violations.push_back("message " + std::to_string(i) + ": " + e.what());
        }
        const std::size_t expected_tensors = m.kind == MessageKind::BatchRequest ? 0 : 2;
        if (m.tensors.size() != expected_tensors) {
            report.violations.push_back("message " + std::to_string(i) + ": " +
                                        kind_name(m.kind) + " carries " +
                                        std::to_string(m.tensors.size()) + " tensors, expected " +
                                        std::to_string(expected_tensors));
        }
        for (std::size_t t = 0; t < m.tensors.size(); ++t) {
            const Tensor& tensor = m.tensors[t];
            const Shape want{m.batch_ids.size(), expected_dim};
            if (tensor.shape() != want) {
                report.violations.push_back("message " + std::to_string(i) + " tensor " +
                                            std::to_string(t) + ": shape " +
                                            shape_str(tensor.shape()) +
                                            " is not the declared embedding/gradient shape " +
                                            shape_str(want));
            }
            if (canaries.empty()) continue;
            // payload bytes exactly as they travel: f32 little-endian
            std::vector<std::uint8_t> payload(tensor.size() * 4);
            for (std::size_t v = 0; v < tensor.size(); ++v) {
                const float f = static_cast<float>(tensor[v]);
                std::memcpy(payload.data() + v * 4, &f, 4);
            }
            for (float canary : canaries) {
                std::uint8_t pattern[4];
                std::memcpy(pattern, &canary, 4);
                if (payload.size() < 4) continue;
                for (std::size_t off = 0; off + 4 <= payload.size(); ++off) {
                    if (std::memcmp(payload.data() + off, pattern, 4) == 0) {
                        report.violations.push_back(
                            "message " + std::to_string(i) + " tensor " + std::to_string(t) +
                            " offset " + std::to_string(off) + ": canary raw value found in payload");
                        break;
                    }
                }
            }
        }
    }
    report.passed = report.violations.empty();
    return report;
}

// -------------------------------- comm report -------------------------------

std::string CommSummary::to_text() const {
    std::ostringstream os;
    os << "mean_per_sample_upstream_bytes=" << mean_per_sample_upstream_bytes << "\n";
    os << "mean_per_sample_downstream_bytes=" << mean_per_sample_downstream_bytes << "\n";
    os << "raw_image_bytes_per_sample=" << raw_image_bytes_per_sample << "\n";
    os << "reduction_ratio=" << reduction_ratio << "\n";
    return os.str();
}

CommSummary comm_report(const std::vector<RoundLog>& logs, std::size_t image_h,
                        std::size_t image_w) {
    if (logs.empty()) throw ContractError("comm_report: no round logs");
    CommSummary s;
    double total_up = 0.0, total_down = 0.0, total_samples = 0.0;
    for (const RoundLog& log : logs) {
        if (log.per_sample_upstream_bytes <= 0.0) continue;
        const double batch = static_cast<double>(log.upstream_bytes) /
                             log.per_sample_upstream_bytes;
        total_up += static_cast<double>(log.upstream_bytes);
        total_down += static_cast<double>(log.downstream_bytes);
        total_samples += batch;
    }
    if (total_samples > 0.0) {
        s.mean_per_sample_upstream_bytes = total_up / total_samples;
        s.mean_per_sample_downstream_bytes = total_down / total_samples;
    }
    s.raw_image_bytes_per_sample = static_cast<std::uint64_t>(image_h * image_w * 3 * 4);
    if (s.mean_per_sample_upstream_bytes > 0.0) {
        s.reduction_ratio =
            static_cast<double>(s.raw_image_bytes_per_sample) / s.mean_per_sample_upstream_bytes;
    }
    return s;
}

// ------------------------------ model adapters ------------------------------

namespace {

struct DualImageAdapter : ClientEncoderModel {
    ImageEncoder enc;
    DualImageAdapter(const EncoderDims& dims, std::uint64_t seed)
        : enc(dims, seed, "image_encoder") {}
    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x) override {
        return enc.forward(g, pb, x);
    }
    void collect(NamedParams& out) override { enc.collect(out); }
};

struct SingleImageAdapter : ClientEncoderModel {
    SingleImageEncoder enc;
    SingleImageAdapter(const EncoderDims& dims, std::uint64_t seed)
        : enc(dims, seed, "image_encoder") {}
    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x) override {
        return enc.forward(g, pb, x);
    }
    void collect(NamedParams& out) override { enc.collect(out); }
};

struct DualTabularAdapter : ClientEncoderModel {
    TabularEncoder enc;
    DualTabularAdapter(const EncoderDims& dims, std::uint64_t seed)
        : enc(dims, seed, "tabular_encoder") {}
    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x) override {
        return enc.forward(g, pb, x);
    }
    void collect(NamedParams& out) override { enc.collect(out); }
};

struct SingleTabularAdapter : ClientEncoderModel {
    SingleTabularEncoder enc;
    SingleTabularAdapter(const EncoderDims& dims, std::uint64_t seed)
        : enc(dims, seed, "tabular_encoder") {}
    std::pair<GraphVar, GraphVar> forward(Graph& g, ParamBindings& pb, GraphVar x) override {
        return enc.forward(g, pb, x);
    }
    void collect(NamedParams& out) override { enc.collect(out); }
};

struct HybridServerAdapter : ServerFusionModel {
    FusionServerModel model;
    explicit HybridServerAdapter(const FusionConfig& cfg, std::uint64_t seed)
        : model(cfg, seed, "server") {}

    GraphVar build_loss(Graph& g, ParamBindings& pb, GraphVar zi, GraphVar zs, GraphVar ti,
                        GraphVar ts, GraphVar y, GraphVar* y_hat_out) override {
        GraphVar seq = build_sequence(g, zi, zs, ti, ts);
        GraphVar cons;
        if (model.config().lambda_cons > 0.0) {
            cons = FusionServerModel::consistency_loss(g, zi, ti);
        }
        GraphVar y_hat = model.classify(g, pb, model.fuse(g, pb, seq));
        if (y_hat_out) *y_hat_out = y_hat;
        return model.total_loss(g, y_hat, y, cons);
    }

    GraphVar build_predict(Graph& g, ParamBindings& pb, GraphVar zi, GraphVar zs, GraphVar ti,
                           GraphVar ts) override {
        return model.classify(g, pb, model.fuse(g, pb, build_sequence(g, zi, zs, ti, ts)));
    }

    void collect(NamedParams& out) override { model.collect(out); }
};

struct ConcatServerAdapter : ServerFusionModel {
    Linear classifier;
    ConcatServerAdapter(const FusionConfig& cfg, std::uint64_t seed)
        : classifier("server.classifier", cfg.total_embedding_dims(), cfg.num_classes,
                     derive_seed(seed, "classifier")) {}

    GraphVar build_loss(Graph& g, ParamBindings& pb, GraphVar zi, GraphVar zs, GraphVar ti,
                        GraphVar ts, GraphVar y, GraphVar* y_hat_out) override {
        GraphVar y_hat = build_predict(g, pb, zi, zs, ti, ts);
        if (y_hat_out) *y_hat_out = y_hat;
        return g.cross_entropy(y_hat, y);
    }

    GraphVar build_predict(Graph& g, ParamBindings& pb, GraphVar zi, GraphVar zs, GraphVar ti,
                           GraphVar ts) override {
        GraphVar cat = g.concat_last({zi, zs, ti, ts});
        return g.softmax(classifier.forward(g, pb, cat), -1);
    }

    void collect(NamedParams& out) override { classifier.collect(out); }
};

}  // namespace

std::unique_ptr<ClientEncoderModel> make_image_encoder(FusionKind kind, const EncoderDims& dims,
                                                       std::uint64_t seed) {
    if (kind == FusionKind::Hybrid) return std::make_unique<DualImageAdapter>(dims, seed);
    return std::make_unique<SingleImageAdapter>(dims, seed);
}

std::unique_ptr<ClientEncoderModel> make_tabular_encoder(FusionKind kind, const EncoderDims& dims,
                                                         std::uint64_t seed) {
    if (kind == FusionKind::Hybrid) return std::make_unique<DualTabularAdapter>(dims, seed);
    return std::make_unique<SingleTabularAdapter>(dims, seed);
}

std::unique_ptr<ServerFusionModel> make_server_model(const FedConfig& cfg) {
    if (cfg.fusion.d_e != cfg.dims.d_e) {
        throw ConfigError("fed config: fusion d_e " + std::to_string(cfg.fusion.d_e) +
                          " differs from encoder d_e " + std::to_string(cfg.dims.d_e));
    }
    const std::uint64_t seed = derive_seed(cfg.seed, "server");
    if (cfg.kind == FusionKind::Hybrid) {
        return std::make_unique<HybridServerAdapter>(cfg.fusion, seed);
    }
    FusionConfig concat_cfg = cfg.fusion;
    concat_cfg.lambda_cons = 0.0;
    return std::make_unique<ConcatServerAdapter>(concat_cfg, seed);
}

// --------------------------------- ClientNode -------------------------------

ClientNode::ClientNode(Role role, Tensor features, std::vector<std::uint32_t> ids,
                       std::unique_ptr<ClientEncoderModel> model, double lr)
    : role_(role), features_(std::move(features)), ids_(std::move(ids)), model_(std::move(model)),
      lr_(lr) {
    for (std::size_t i = 0; i < ids_.size(); ++i) index_[ids_[i]] = i;
}

Tensor ClientNode::gather(const std::vector<std::uint32_t>& batch_ids) const {
    const std::size_t row = features_.size() / ids_.size();
    Shape shape = features_.shape();
    shape[0] = batch_ids.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < batch_ids.size(); ++i) {
        auto it = index_.find(batch_ids[i]);
        if (it == index_.end()) {
            throw AlignmentError("client " + std::string(role_name(role_)) +
                                 " does not hold sample id " + std::to_string(batch_ids[i]));
        }
        std::copy(features_.data() + it->second * row, features_.data() + (it->second + 1) * row,
                  out.data() + i * row);
    }
    return out;
}

ProtocolMessage ClientNode::handle_batch_request(const ProtocolMessage& request) {
    if (request.kind != MessageKind::BatchRequest) {
        throw ProtocolError(std::string(role_name(role_)) + ": expected BatchRequest, got " +
                            kind_name(request.kind));
    }
    if (pending_) {
        throw ProtocolError(std::string(role_name(role_)) +
                            ": new batch request while a round is still open");
    }
    Pending p;
    p.graph = std::make_unique<Graph>();
    p.ids = request.batch_ids;
    p.round = request.round;
    GraphVar x = p.graph->leaf(gather(request.batch_ids));
    auto [z_inv, z_spec] = model_->forward(*p.graph, p.bindings, x);
    p.z_inv = z_inv;
    p.z_spec = z_spec;

    EmbeddingBundle bundle;
    bundle.z_inv = p.graph->value(z_inv);
    bundle.z_spec = p.graph->value(z_spec);
    bundle.source =
        role_ == Role::ImageClient ? ClientSource::ImageClient : ClientSource::TabularClient;
    bundle.batch_ids = request.batch_ids;
    pending_ = std::move(p);
    return make_embedding_upload(request.round, bundle);
}

void ClientNode::handle_gradient_download(const ProtocolMessage& download) {
    if (download.kind != MessageKind::GradientDownload) {
        throw ProtocolError(std::string(role_name(role_)) + ": expected GradientDownload, got " +
                            kind_name(download.kind));
    }
    if (!pending_) {
        throw ProtocolError(std::string(role_name(role_)) +
                            ": gradient download with no round open");
    }
    if (download.round != pending_->round || download.batch_ids != pending_->ids) {
        throw AlignmentError(std::string(role_name(role_)) +
                             ": gradient download does not match the open round");
    }
    GradTable grads = pending_->graph->backward_from(
        {{pending_->z_inv, download.tensors[0]}, {pending_->z_spec, download.tensors[1]}});
    sgd_step(pending_->bindings, grads, lr_);
    pending_.reset();
}

EmbeddingBundle ClientNode::encode_only(const std::vector<std::uint32_t>& batch_ids) {
    Graph g;
    ParamBindings pb;
    auto [z_inv, z_spec] = model_->forward(g, pb, g.leaf(gather(batch_ids)));
    EmbeddingBundle b;
    b.z_inv = g.value(z_inv);
    b.z_spec = g.value(z_spec);
    b.source =
        role_ == Role::ImageClient ? ClientSource::ImageClient : ClientSource::TabularClient;
    b.batch_ids = batch_ids;
    return b;
}

// --------------------------------- ServerNode -------------------------------

ServerNode::ServerNode(Tensor labels, std::vector<std::uint32_t> ids,
                       std::unique_ptr<ServerFusionModel> model, double lr)
    : labels_(std::move(labels)), ids_(std::move(ids)), model_(std::move(model)), lr_(lr) {
    for (std::size_t i = 0; i < ids_.size(); ++i) index_[ids_[i]] = i;
}

Tensor ServerNode::gather_labels(const std::vector<std::uint32_t>& batch_ids) const {
    const std::size_t k = labels_.dim(1);
    Tensor out(Shape{batch_ids.size(), k});
    for (std::size_t i = 0; i < batch_ids.size(); ++i) {
        auto it = index_.find(batch_ids[i]);
        if (it == index_.end()) {
            throw AlignmentError("server does not hold sample id " +
                                 std::to_string(batch_ids[i]));
        }
        std::copy(labels_.data() + it->second * k, labels_.data() + (it->second + 1) * k,
                  out.data() + i * k);
    }
    return out;
}

ProtocolMessage ServerNode::make_request(std::uint32_t round,
                                         std::vector<std::uint32_t> batch_ids) {
    open_round_ = round;
    round_open_ = true;
    requested_ids_ = batch_ids;
    return make_batch_request(round, std::move(batch_ids));
}

ServerNode::StepResult ServerNode::training_step(std::uint32_t round,
                                                 const ProtocolMessage& upload_a,
                                                 const ProtocolMessage& upload_b) {
    // key by role, not arrival order
    const ProtocolMessage* img_msg = nullptr;
    const ProtocolMessage* tab_msg = nullptr;
    for (const ProtocolMessage* m : {&upload_a, &upload_b}) {
        if (m->sender == Role::ImageClient) img_msg = m;
        if (m->sender == Role::TabularClient) tab_msg = m;
    }
    if (!img_msg || !tab_msg) {
        throw ProtocolError("server needs one upload from each client role");
    }
    EmbeddingBundle img = to_bundle(*img_msg);
    EmbeddingBundle tab = to_bundle(*tab_msg);
    require_aligned(img, tab);
    if (round_open_ && round == open_round_ && img.batch_ids != requested_ids_) {
        throw AlignmentError("upload batch ids differ from the server's requested batch order");
    }
    round_open_ = false;

    Graph g;
    ParamBindings pb;
    Tensor zi = img.z_inv, zs = img.z_spec, ti = tab.z_inv, ts = tab.z_spec;
    zi.requires_grad = zs.requires_grad = ti.requires_grad = ts.requires_grad = true;
    GraphVar v_zi = g.leaf(std::move(zi));
    GraphVar v_zs = g.leaf(std::move(zs));
    GraphVar v_ti = g.leaf(std::move(ti));
    GraphVar v_ts = g.leaf(std::move(ts));
    GraphVar y = g.leaf(gather_labels(img.batch_ids));
    GraphVar loss = model_->build_loss(g, pb, v_zi, v_zs, v_ti, v_ts, y, nullptr);
    GradTable grads = g.backward(loss);

    StepResult result;
    result.loss = g.value(loss).scalar_value();
    result.grad_for_image = make_gradient_download(round, Role::ImageClient, grads.at(v_zi),
                                                   grads.at(v_zs), img.batch_ids);
    result.grad_for_tabular = make_gradient_download(round, Role::TabularClient, grads.at(v_ti),
                                                     grads.at(v_ts), tab.batch_ids);
    sgd_step(pb, grads, lr_);
    return result;
}

Tensor ServerNode::predict(const EmbeddingBundle& img, const EmbeddingBundle& tab) {
    require_aligned(img, tab);
    Graph g;
    ParamBindings pb;
    GraphVar y_hat = model_->build_predict(g, pb, g.leaf(img.z_inv), g.leaf(img.z_spec),
                                           g.leaf(tab.z_inv), g.leaf(tab.z_spec));
    return g.value(y_hat);
}

double ServerNode::eval_loss(const EmbeddingBundle& img, const EmbeddingBundle& tab) {
    require_aligned(img, tab);
    Graph g;
    ParamBindings pb;
    GraphVar y = g.leaf(gather_labels(img.batch_ids));
    GraphVar loss = model_->build_loss(g, pb, g.leaf(img.z_inv), g.leaf(img.z_spec),
                                       g.leaf(tab.z_inv), g.leaf(tab.z_spec), y, nullptr);
    return g.value(loss).scalar_value();
}

// ------------------------------ FederatedTrainer ----------------------------

FederatedTrainer::FederatedTrainer(const VerticalParties& parties, const FedConfig& cfg)
    : cfg_(cfg),
      image_client_(Role::ImageClient, parties.image.images, parties.image.ids,
                    make_image_encoder(cfg.kind, cfg.dims, derive_seed(cfg.seed, "image_encoder")),
                    cfg.lr),
      tabular_client_(Role::TabularClient, parties.tabular.tabular, parties.tabular.ids,
                      make_tabular_encoder(cfg.kind, cfg.dims,
                                           derive_seed(cfg.seed, "tabular_encoder")),
                      cfg.lr),
      server_(parties.server.labels, parties.server.ids, make_server_model(cfg), cfg.lr) {}

ProtocolMessage FederatedTrainer::through_wire(const ProtocolMessage& m) {
    std::vector<std::uint8_t> bytes = serialize(m, cfg_.wire);
    ProtocolMessage received = deserialize(bytes, cfg_.wire);
    validator_.observe(received);
    transcript_.push_back(received);
    return received;
}

std::pair<double, RoundLog> FederatedTrainer::run_round(
    const std::vector<std::uint32_t>& batch_ids) {
    const std::uint32_t round = next_round_++;
    ProtocolMessage request = through_wire(server_.make_request(round, batch_ids));
    ProtocolMessage up_img = through_wire(image_client_.handle_batch_request(request));
    ProtocolMessage up_tab = through_wire(tabular_client_.handle_batch_request(request));
    ServerNode::StepResult step = server_.training_step(round, up_img, up_tab);
    ProtocolMessage down_img = through_wire(step.grad_for_image);
    ProtocolMessage down_tab = through_wire(step.grad_for_tabular);
    image_client_.handle_gradient_download(down_img);
    tabular_client_.handle_gradient_download(down_tab);

    RoundLog log;
    log.round = round;
    log.upstream_bytes = up_img.payload_bytes(cfg_.wire) + up_tab.payload_bytes(cfg_.wire);
    log.downstream_bytes = down_img.payload_bytes(cfg_.wire) + down_tab.payload_bytes(cfg_.wire);
    log.per_sample_upstream_bytes =
        batch_ids.empty() ? 0.0
                          : static_cast<double>(log.upstream_bytes) /
                                static_cast<double>(batch_ids.size());
    round_logs_.push_back(log);
    return {step.loss, log};
}

std::vector<int> FederatedTrainer::predict_classes(const std::vector<std::uint32_t>& ids,
                                                   std::size_t eval_batch) {
    std::vector<int> out;
    out.reserve(ids.size());
    for (std::size_t start = 0; start < ids.size(); start += eval_batch) {
        const std::size_t stop = std::min(ids.size(), start + eval_batch);
        std::vector<std::uint32_t> chunk(ids.begin() + start, ids.begin() + stop);
        EmbeddingBundle img = image_client_.encode_only(chunk);
        EmbeddingBundle tab = tabular_client_.encode_only(chunk);
        Tensor probs = server_.predict(img, tab);
        const std::size_t k = probs.dim(1);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            int best = 0;
            for (std::size_t c = 1; c < k; ++c)
                if (probs.at2(i, c) > probs.at2(i, static_cast<std::size_t>(best)))
                    best = static_cast<int>(c);
            out.push_back(best);
        }
    }
    return out;
}

double FederatedTrainer::dataset_loss(const std::vector<std::uint32_t>& ids,
                                      std::size_t eval_batch) {
    double total = 0.0;
    for (std::size_t start = 0; start < ids.size(); start += eval_batch) {
        const std::size_t stop = std::min(ids.size(), start + eval_batch);
        std::vector<std::uint32_t> chunk(ids.begin() + start, ids.begin() + stop);
        EmbeddingBundle img = image_client_.encode_only(chunk);
        EmbeddingBundle tab = tabular_client_.encode_only(chunk);
        total += server_.eval_loss(img, tab) * static_cast<double>(chunk.size());
    }
    return ids.empty() ? 0.0 : total / static_cast<double>(ids.size());
}

NamedParams FederatedTrainer::parameters() {
    NamedParams out;
    image_client_.collect(out);
    tabular_client_.collect(out);
    server_.collect(out);
    return out;
}

void FederatedTrainer::dump_transcript(const std::string& path) const {
    write_transcript(transcript_, path, cfg_.wire);
}

// ------------------------------ MonolithicTrainer ---------------------------

MonolithicTrainer::MonolithicTrainer(const VerticalParties& parties, const FedConfig& cfg)
    : cfg_(cfg), images_(parties.image.images), tabular_(parties.tabular.tabular),
      labels_(parties.server.labels) {
    for (std::size_t i = 0; i < parties.image.ids.size(); ++i) {
        index_[parties.image.ids[i]] = i;
    }
    image_encoder_ = make_image_encoder(cfg.kind, cfg.dims, derive_seed(cfg.seed, "image_encoder"));
    tabular_encoder_ =
        make_tabular_encoder(cfg.kind, cfg.dims, derive_seed(cfg.seed, "tabular_encoder"));
    server_model_ = make_server_model(cfg);
}

Tensor MonolithicTrainer::gather(const Tensor& rows, const std::vector<std::uint32_t>& ids) const {
    const std::size_t n = rows.dim(0);
    const std::size_t row = rows.size() / n;
    Shape shape = rows.shape();
    shape[0] = ids.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = index_.find(ids[i]);
        if (it == index_.end()) {
            throw AlignmentError("monolithic: unknown sample id " + std::to_string(ids[i]));
        }
        std::copy(rows.data() + it->second * row, rows.data() + (it->second + 1) * row,
                  out.data() + i * row);
    }
    return out;
}

double MonolithicTrainer::step(const std::vector<std::uint32_t>& batch_ids) {
    Graph g;
    ParamBindings pb;
    auto [zi, zs] = image_encoder_->forward(g, pb, g.leaf(gather(images_, batch_ids)));
    auto [ti, ts] = tabular_encoder_->forward(g, pb, g.leaf(gather(tabular_, batch_ids)));
    GraphVar y = g.leaf(gather(labels_, batch_ids));
    GraphVar loss = server_model_->build_loss(g, pb, zi, zs, ti, ts, y, nullptr);
    GradTable grads = g.backward(loss);
    sgd_step(pb, grads, cfg_.lr);
    return g.value(loss).scalar_value();
}

std::vector<int> MonolithicTrainer::predict_classes(const std::vector<std::uint32_t>& ids,
                                                    std::size_t eval_batch) {
    std::vector<int> out;
    out.reserve(ids.size());
    for (std::size_t start = 0; start < ids.size(); start += eval_batch) {
        const std::size_t stop = std::min(ids.size(), start + eval_batch);
        std::vector<std::uint32_t> chunk(ids.begin() + start, ids.begin() + stop);
        Graph g;
        ParamBindings pb;
        auto [zi, zs] = image_encoder_->forward(g, pb, g.leaf(gather(images_, chunk)));
        auto [ti, ts] = tabular_encoder_->forward(g, pb, g.leaf(gather(tabular_, chunk)));
        GraphVar y_hat = server_model_->build_predict(g, pb, zi, zs, ti, ts);
        const Tensor& probs = g.value(y_hat);
        const std::size_t k = probs.dim(1);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            int best = 0;
            for (std::size_t c = 1; c < k; ++c)
                if (probs.at2(i, c) > probs.at2(i, static_cast<std::size_t>(best)))
                    best = static_cast<int>(c);
            out.push_back(best);
        }
    }
    return out;
}

double MonolithicTrainer::dataset_loss(const std::vector<std::uint32_t>& ids,
                                       std::size_t eval_batch) {
    double total = 0.0;
    for (std::size_t start = 0; start < ids.size(); start += eval_batch) {
        const std::size_t stop = std::min(ids.size(), start + eval_batch);
        std::vector<std::uint32_t> chunk(ids.begin() + start, ids.begin() + stop);
        Graph g;
        ParamBindings pb;
        auto [zi, zs] = image_encoder_->forward(g, pb, g.leaf(gather(images_, chunk)));
        auto [ti, ts] = tabular_encoder_->forward(g, pb, g.leaf(gather(tabular_, chunk)));
        GraphVar y = g.leaf(gather(labels_, chunk));
        GraphVar loss = server_model_->build_loss(g, pb, zi, zs, ti, ts, y, nullptr);
        total += g.value(loss).scalar_value() * static_cast<double>(chunk.size());
    }
    return ids.empty() ? 0.0 : total / static_cast<double>(ids.size());
}

NamedParams MonolithicTrainer::parameters() {
    NamedParams out;
    image_encoder_->collect(out);
    tabular_encoder_->collect(out);
    server_model_->collect(out);
    return out;
}

// ------------------------------ transcript files ----------------------------

void write_transcript(const std::vector<ProtocolMessage>& transcript, const std::string& path,
                      WireFloat wf) {
    std::ofstream out(path);
    if (!out) throw ContractError("cannot write transcript file " + path);
    for (const ProtocolMessage& m : transcript) {
        out << m.round << ',' << role_name(m.sender) << ',' << kind_name(m.kind) << ','
            << m.payload_bytes(wf) << "\n";
    }
}

AuditReport audit_transcript_records(const std::string& path) {
    AuditReport report;
    std::ifstream in(path);
    if (!in) {
        report.passed = false;
        report.violations.push_back("cannot open transcript file " + path);
        return report;
    }
    ProtocolValidator validator;
    std::string line;
    std::size_t lineno = 0;
    // per-round payload symmetry: uploads together must equal downloads
    std::uint64_t round_up = 0, round_down = 0;
    bool in_round = false;
    std::uint32_t current_round = 0;
    auto close_round = [&]() {
        if (in_round && round_up != round_down) {
            report.violations.push_back("round " + std::to_string(current_round) +
                                        ": upload payload " + std::to_string(round_up) +
                                        " != download payload " + std::to_string(round_down));
        }
        round_up = round_down = 0;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string round_s, sender_s, kind_s, bytes_s;
        if (!std::getline(ls, round_s, ',') || !std::getline(ls, sender_s, ',') ||
            !std::getline(ls, kind_s, ',') || !std::getline(ls, bytes_s)) {
            report.violations.push_back("line " + std::to_string(lineno) + ": malformed record");
            continue;
        }
        ProtocolMessage m;
        try {
            m.round = static_cast<std::uint32_t>(std::stoul(round_s));
        } catch (...) {
            report.violations.push_back("line " + std::to_string(lineno) + ": bad round");
            continue;
        }
        if (sender_s == "Server") m.sender = Role::Server;
        else if (sender_s == "ImageClient") m.sender = Role::ImageClient;
        else if (sender_s == "TabularClient") m.sender = Role::TabularClient;
        else {
            report.violations.push_back("line " + std::to_string(lineno) + ": unknown sender '" +
                                        sender_s + "'");
            continue;
        }
        if (kind_s == "BatchRequest") m.kind = MessageKind::BatchRequest;
        else if (kind_s == "EmbeddingUpload") m.kind = MessageKind::EmbeddingUpload;
        else if (kind_s == "GradientDownload") m.kind = MessageKind::GradientDownload;
        else {
            report.violations.push_back("line " + std::to_string(lineno) +
                                        ": undeclared message kind '" + kind_s + "'");
            continue;
        }
        std::uint64_t bytes = 0;
        try {
            bytes = std::stoull(bytes_s);
        } catch (...) {
            report.violations.push_back("line " + std::to_string(lineno) + ": bad payload bytes");
            continue;
        }
        try {
            validator.observe(m);
        } catch (const ProtocolError& e) {
            report.violations.push_back("line " + std::to_string(lineno) + ": " + e.what());
        }
        switch (m.kind) {
            case MessageKind::BatchRequest:
                close_round();
                in_round = true;
                current_round = m.round;
                if (bytes != 0) {
                    report.violations.push_back("line " + std::to_string(lineno) +
                                                ": BatchRequest with non-zero payload");
                }
                break;
            case MessageKind::EmbeddingUpload: round_up += bytes; break;
            case MessageKind::GradientDownload: round_down += bytes; break;
        }
    }
    close_round();
    report.passed = report.violations.empty();
    return report;
}

}  // namespace hvfl
