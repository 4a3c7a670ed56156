#include "hybridvfl/fusion.hpp"

namespace hvfl {

void FusionConfig::validate() const {
    if (lambda_cons < 0.0) {
        throw ConfigError("fusion config: lambda_cons must be non-negative, got " +
                          std::to_string(lambda_cons));
    }
    if (num_classes < 2) {
        throw ConfigError("fusion config: need K >= 2, got " + std::to_string(num_classes));
    }
    if (blocks < 1) throw ConfigError("fusion config: need blocks >= 1");
    if (heads < 1 || d_e % static_cast<std::size_t>(heads) != 0) {
        throw ConfigError("fusion config: d_e " + std::to_string(d_e) +
                          " not divisible by heads " + std::to_string(heads));
    }
}

void require_aligned(const EmbeddingBundle& img, const EmbeddingBundle& tab) {
    if (img.batch_ids != tab.batch_ids) {
        throw AlignmentError("bundles are not aligned: image batch ids differ from tabular "
                             "batch ids (protocol violation)");
    }
    if (!img.z_inv.same_shape(tab.z_inv) || !img.z_spec.same_shape(tab.z_spec)) {
        throw AlignmentError("bundles are not aligned: embedding shapes differ, " +
                             shape_str(img.z_inv.shape()) + " vs " +
                             shape_str(tab.z_inv.shape()));
    }
}

Tensor build_sequence(const EmbeddingBundle& img, const EmbeddingBundle& tab) {
    require_aligned(img, tab);
    Graph g;
    GraphVar s = build_sequence(g, g.leaf(img.z_inv), g.leaf(img.z_spec), g.leaf(tab.z_inv),
                                g.leaf(tab.z_spec));
    return g.value(s);
}

GraphVar build_sequence(Graph& g, GraphVar z_inv_img, GraphVar z_spec_img, GraphVar z_inv_tab,
                        GraphVar z_spec_tab) {
    return g.stack_tokens({z_inv_img, z_spec_img, z_inv_tab, z_spec_tab});
}

FusionServerModel::FusionServerModel(const FusionConfig& cfg, std::uint64_t seed,
                                     std::string name)
    : cfg_(cfg) {
    cfg_.validate();
    for (int i = 0; i < cfg_.blocks; ++i) {
        blocks_.emplace_back(name + ".block" + std::to_string(i), cfg_.d_e, cfg_.heads,
                             derive_seed(seed, "block" + std::to_string(i)));
    }
    classifier_ = Linear(name + ".classifier", cfg_.d_e, cfg_.num_classes,
                         derive_seed(seed, "classifier"));
}

GraphVar FusionServerModel::fuse(Graph& g, ParamBindings& pb, GraphVar seq) {
    GraphVar h = seq;
    for (auto& block : blocks_) h = block.forward(g, pb, h);
    return g.mean_pool_seq(h);
}

GraphVar FusionServerModel::classify(Graph& g, ParamBindings& pb, GraphVar fused) {
    return g.softmax(classifier_.forward(g, pb, fused), -1);
}

GraphVar FusionServerModel::consistency_loss(Graph& g, GraphVar z_inv_img, GraphVar z_inv_tab) {
    return g.cosine_consistency(z_inv_img, z_inv_tab);
}

Tensor FusionServerModel::consistency_loss(const EmbeddingBundle& img,
                                           const EmbeddingBundle& tab) {
    require_aligned(img, tab);
    Graph g;
    GraphVar l = consistency_loss(g, g.leaf(img.z_inv), g.leaf(tab.z_inv));
    return g.value(l);
}

GraphVar FusionServerModel::total_loss(Graph& g, GraphVar y_hat, GraphVar y, GraphVar l_cons) {
    cfg_.validate();
    GraphVar ce = g.cross_entropy(y_hat, y);
    if (cfg_.lambda_cons == 0.0) return ce;
    if (!l_cons.valid()) {
        throw ContractError("total_loss: lambda_cons > 0 but no consistency term supplied");
    }
    return g.add(ce, g.mul_scalar(l_cons, cfg_.lambda_cons));
}

void FusionServerModel::collect(NamedParams& out) {
    for (auto& b : blocks_) b.collect(out);
    classifier_.collect(out);
}

}  // namespace hvfl
