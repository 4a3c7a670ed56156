#pragma once

#include "hybridvfl/encoders.hpp"
#include "hybridvfl/nn.hpp"

namespace hvfl {

struct FusionConfig {
    double lambda_cons = 0.1;
    int heads = 4;
    int blocks = 1;
    int num_classes = 7;
    std::size_t d_e = 400;

    std::size_t total_embedding_dims() const { return 4 * d_e; }
    void validate() const;
};

// Batch-id alignment check shared by sequence building and consistency loss.
void require_aligned(const EmbeddingBundle& img, const EmbeddingBundle& tab);

// Token order is a frozen contract: [z_inv_img, z_spec_img, z_inv_tab, z_spec_tab].
Tensor build_sequence(const EmbeddingBundle& img, const EmbeddingBundle& tab);
GraphVar build_sequence(Graph& g, GraphVar z_inv_img, GraphVar z_spec_img, GraphVar z_inv_tab,
                        GraphVar z_spec_tab);

// Server-side model: transformer fusion over the four-token sequence plus a
// softmax classification head, trained with cross-entropy + lambda * cosine
// consistency between the two invariant embeddings.
class FusionServerModel {
public:
    FusionServerModel() = default;
    FusionServerModel(const FusionConfig& cfg, std::uint64_t seed, std::string name = "server");

    const FusionConfig& config() const { return cfg_; }

    GraphVar fuse(Graph& g, ParamBindings& pb, GraphVar seq);        // [b,4,d] -> [b,d]
    GraphVar classify(Graph& g, ParamBindings& pb, GraphVar fused);  // [b,d] -> [b,K]

    // Consistency acts on the invariant embeddings only.
    static GraphVar consistency_loss(Graph& g, GraphVar z_inv_img, GraphVar z_inv_tab);
    static Tensor consistency_loss(const EmbeddingBundle& img, const EmbeddingBundle& tab);

    // cross_entropy(y_hat, y) + lambda * l_cons; the consistency term is
    // structurally absent when lambda == 0.
    GraphVar total_loss(Graph& g, GraphVar y_hat, GraphVar y, GraphVar l_cons);

    std::vector<TransformerBlock>& blocks() { return blocks_; }
    Linear& classifier() { return classifier_; }
    void collect(NamedParams& out);

private:
    FusionConfig cfg_;
    std::vector<TransformerBlock> blocks_;
    Linear classifier_;
};

}  // namespace hvfl
