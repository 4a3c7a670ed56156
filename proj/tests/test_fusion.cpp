#include <doctest.h>

#include <cmath>

#include "hybridvfl/fusion.hpp"
#include "testutil.hpp"

using namespace hvfl;
using testutil::rand_tensor;

namespace {

EmbeddingBundle constant_bundle(ClientSource source, double inv, double spec, std::size_t b,
                                std::size_t d, std::vector<std::uint32_t> ids) {
    EmbeddingBundle out;
    out.z_inv = Tensor::full({b, d}, inv);
    out.z_spec = Tensor::full({b, d}, spec);
    out.source = source;
    out.batch_ids = std::move(ids);
    return out;
}

FusionConfig small_cfg() {
    FusionConfig cfg;
    cfg.d_e = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.num_classes = 4;
    return cfg;
}

}  // namespace

TEST_CASE("build_sequence keeps the frozen token order") {
    EmbeddingBundle img = constant_bundle(ClientSource::ImageClient, 1.0, 2.0, 1, 2, {5});
    EmbeddingBundle tab = constant_bundle(ClientSource::TabularClient, 3.0, 4.0, 1, 2, {5});
    Tensor seq = build_sequence(img, tab);
    CHECK(seq.shape() == Shape{1, 4, 2});
    CHECK(seq.at3(0, 0, 0) == 1.0);  // z_inv image
    CHECK(seq.at3(0, 1, 0) == 2.0);  // z_spec image
    CHECK(seq.at3(0, 2, 0) == 3.0);  // z_inv tabular
    CHECK(seq.at3(0, 3, 0) == 4.0);  // z_spec tabular
}

TEST_CASE("build_sequence produces [b,4,400] for aligned desk-scale bundles") {
    EmbeddingBundle img = constant_bundle(ClientSource::ImageClient, 0.1, 0.2, 3, 400, {0, 1, 2});
    EmbeddingBundle tab =
        constant_bundle(ClientSource::TabularClient, 0.3, 0.4, 3, 400, {0, 1, 2});
    CHECK(build_sequence(img, tab).shape() == Shape{3, 4, 400});
}

TEST_CASE("shuffled batch ids trigger an alignment error") {
    EmbeddingBundle img = constant_bundle(ClientSource::ImageClient, 1, 2, 3, 4, {0, 1, 2});
    EmbeddingBundle tab = constant_bundle(ClientSource::TabularClient, 3, 4, 3, 4, {2, 1, 0});
    CHECK_THROWS_AS(build_sequence(img, tab), AlignmentError);
}

TEST_CASE("consistency loss trivial anchors") {
    EmbeddingBundle img = constant_bundle(ClientSource::ImageClient, 0.7, 9.0, 2, 4, {0, 1});
    EmbeddingBundle tab = constant_bundle(ClientSource::TabularClient, 0.7, -3.0, 2, 4, {0, 1});
    CHECK(FusionServerModel::consistency_loss(img, tab).scalar_value() ==
          doctest::Approx(0.0).epsilon(1e-12));

    EmbeddingBundle anti = constant_bundle(ClientSource::TabularClient, -0.7, 0.0, 2, 4, {0, 1});
    CHECK(FusionServerModel::consistency_loss(img, anti).scalar_value() ==
          doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("consistency loss ignores the specific embeddings entirely") {
    Rng rng(9);
    EmbeddingBundle img;
    img.z_inv = rand_tensor({3, 5}, rng, 0.1, 1.0);
    img.z_spec = rand_tensor({3, 5}, rng);
    img.source = ClientSource::ImageClient;
    img.batch_ids = {0, 1, 2};
    EmbeddingBundle tab;
    tab.z_inv = rand_tensor({3, 5}, rng, 0.1, 1.0);
    tab.z_spec = rand_tensor({3, 5}, rng);
    tab.source = ClientSource::TabularClient;
    tab.batch_ids = {0, 1, 2};

    const double before = FusionServerModel::consistency_loss(img, tab).scalar_value();
    img.z_spec = rand_tensor({3, 5}, rng, -9.0, 9.0);  // perturb specifics only
    tab.z_spec = rand_tensor({3, 5}, rng, -9.0, 9.0);
    const double after = FusionServerModel::consistency_loss(img, tab).scalar_value();
    CHECK(before == after);  // bitwise unchanged
}

TEST_CASE("fuse with zero-initialized residual projections is the token mean") {
    FusionConfig cfg = small_cfg();
    FusionServerModel model(cfg, 3);
    for (auto& block : model.blocks()) {
        auto zero = [](Tensor& t) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        };
        zero(block.mhsa().wo().weight());
        zero(block.mhsa().wo().bias());
        zero(block.ffn2().weight());
        zero(block.ffn2().bias());
    }
    Rng rng(10);
    Tensor seq = rand_tensor({2, 4, 8}, rng);
    Graph g;
    ParamBindings pb;
    const Tensor& fused = g.value(model.fuse(g, pb, g.leaf(seq)));
    CHECK(fused.shape() == Shape{2, 8});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            double mean = 0.0;
            for (std::size_t t = 0; t < 4; ++t) mean += seq.at3(i, t, j);
            mean /= 4.0;
            CHECK(fused.at2(i, j) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("fuse keeps [b,d_e] output shape and passes a gradient check") {
    FusionConfig cfg = small_cfg();
    FusionServerModel model(cfg, 5);
    Rng rng(11);
    Tensor seq = rand_tensor({2, 4, 8}, rng);
    Graph g;
    ParamBindings pb;
    CHECK(g.value(model.fuse(g, pb, g.leaf(seq))).shape() == Shape{2, 8});

    CHECK(finite_diff_check(
              [&](Graph& gg, GraphVar v) {
                  ParamBindings pbb;
                  GraphVar fused = model.fuse(gg, pbb, v);
                  return gg.sum_all(gg.mul(fused, fused));
              },
              seq, 1e-5) < 1e-4);
}

TEST_CASE("classify with zero weights gives uniform rows that sum to one") {
    FusionConfig cfg;
    cfg.d_e = 8;
    cfg.heads = 2;
    cfg.num_classes = 7;
    FusionServerModel model(cfg, 6);
    for (std::size_t i = 0; i < model.classifier().weight().size(); ++i)
        model.classifier().weight()[i] = 0.0;
    Rng rng(12);
    Tensor fused = rand_tensor({3, 8}, rng);
    Graph g;
    ParamBindings pb;
    const Tensor& probs = g.value(model.classify(g, pb, g.leaf(fused)));
    for (std::size_t i = 0; i < 3; ++i) {
        double row = 0.0;
        for (std::size_t c = 0; c < 7; ++c) {
            CHECK(probs.at2(i, c) == doctest::Approx(1.0 / 7).epsilon(1e-12));
            row += probs.at2(i, c);
        }
        CHECK(std::fabs(row - 1.0) < 1e-9);
    }
}

TEST_CASE("classifier argmax is invariant to constant logit shifts") {
    FusionConfig cfg = small_cfg();
    FusionServerModel model(cfg, 8);
    Rng rng(13);
    Tensor fused = rand_tensor({4, 8}, rng);
    Graph g;
    ParamBindings pb;
    const Tensor probs = g.value(model.classify(g, pb, g.leaf(fused)));

    Tensor& bias = model.classifier().bias();
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] += 3.25;  // shift all logits
    Graph g2;
    ParamBindings pb2;
    const Tensor shifted = g2.value(model.classify(g2, pb2, g2.leaf(fused)));
    for (std::size_t i = 0; i < 4; ++i) {
        std::size_t a = 0, b = 0;
        for (std::size_t c = 1; c < static_cast<std::size_t>(cfg.num_classes); ++c) {
            if (probs.at2(i, c) > probs.at2(i, a)) a = c;
            if (shifted.at2(i, c) > shifted.at2(i, b)) b = c;
        }
        CHECK(a == b);
    }
}

TEST_CASE("total loss decouples when lambda is zero") {
    FusionConfig cfg = small_cfg();
    cfg.lambda_cons = 0.0;
    FusionServerModel model(cfg, 9);
    Graph g;
    GraphVar y_hat = g.leaf(Tensor::full({2, 4}, 0.25));
    Tensor y(Shape{2, 4});
    y.at2(0, 1) = 1.0;
    y.at2(1, 2) = 1.0;
    GraphVar yv = g.leaf(y);
    GraphVar ce = g.cross_entropy(y_hat, yv);
    GraphVar total = model.total_loss(g, y_hat, yv, GraphVar{});
    CHECK(g.value(total).scalar_value() == g.value(ce).scalar_value());
}

TEST_CASE("perfect prediction with identical invariants gives zero total loss") {
    FusionConfig cfg = small_cfg();
    cfg.lambda_cons = 0.5;
    FusionServerModel model(cfg, 10);
    Graph g;
    Tensor y(Shape{1, 4});
    y.at2(0, 2) = 1.0;
    GraphVar yv = g.leaf(y);
    GraphVar y_hat = g.leaf(y);
    GraphVar zi = g.leaf(Tensor::full({1, 8}, 0.3));
    GraphVar cons = FusionServerModel::consistency_loss(g, zi, zi);
    CHECK(g.value(model.total_loss(g, y_hat, yv, cons)).scalar_value() ==
          doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("negative lambda is rejected") {
    FusionConfig cfg = small_cfg();
    cfg.lambda_cons = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("lambda-scaled consistency path passes finite differences end to end") {
    FusionConfig cfg = small_cfg();
    cfg.lambda_cons = 0.37;
    FusionServerModel model(cfg, 11);
    Rng rng(14);
    Tensor zi = rand_tensor({2, 8}, rng, 0.2, 1.0);
    Tensor zs = rand_tensor({2, 8}, rng, 0.2, 1.0);
    Tensor ti = rand_tensor({2, 8}, rng, 0.2, 1.0);
    Tensor ts = rand_tensor({2, 8}, rng, 0.2, 1.0);
    Tensor y(Shape{2, 4});
    y.at2(0, 0) = 1.0;
    y.at2(1, 3) = 1.0;
    const double err = finite_diff_check_multi(
        [&](Graph& g, const std::vector<GraphVar>& vs) {
            ParamBindings pb;
            GraphVar seq = build_sequence(g, vs[0], vs[1], vs[2], vs[3]);
            GraphVar cons = FusionServerModel::consistency_loss(g, vs[0], vs[2]);
            GraphVar y_hat = model.classify(g, pb, model.fuse(g, pb, seq));
            return model.total_loss(g, y_hat, g.leaf(y), cons);
        },
        {zi, zs, ti, ts}, 1e-5);
    CHECK(err < 1e-4);
}
