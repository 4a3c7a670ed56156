// Python bindings for the main operations: synthetic data, encoders, fusion
// math, the wire codec, metrics, and the experiment runner.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hybridvfl/experiment.hpp"

namespace py = pybind11;
using namespace hvfl;

namespace {

using NpArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const NpArray& arr) {
    Shape shape(arr.ndim());
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = static_cast<std::size_t>(arr.shape(i));
    std::vector<double> data(arr.data(), arr.data() + arr.size());
    return Tensor(std::move(shape), std::move(data));
}

py::array to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

py::dict dataset_to_dict(const VerticalDataset& ds) {
    py::dict d;
    d["ids"] = py::cast(ds.ids);
    d["images"] = to_numpy(ds.images);
    d["tabular"] = to_numpy(ds.tabular);
    d["labels"] = to_numpy(ds.labels);
    d["train_ids"] = py::cast(ds.splits.train);
    d["val_ids"] = py::cast(ds.splits.val);
    d["test_ids"] = py::cast(ds.splits.test);
    d["num_classes"] = ds.num_classes;
    d["class_names"] = py::cast(ds.class_names);
    return d;
}

py::dict report_to_dict(const MetricsReport& r) {
    py::dict d;
    d["macro_f1"] = r.macro_f1;
    d["macro_precision"] = r.macro_precision;
    d["macro_recall"] = r.macro_recall;
    d["accuracy"] = r.accuracy;
    d["balanced_accuracy"] = r.balanced_accuracy;
    py::list per_class;
    for (const auto& pc : r.per_class) {
        py::dict c;
        c["precision"] = pc.precision;
        c["recall"] = pc.recall;
        c["f1"] = pc.f1;
        c["support"] = pc.support;
        per_class.append(c);
    }
    d["per_class"] = per_class;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Vertical federated learning simulator with transformer fusion";
    m.attr("__version__") = "0.1.0";

    // ---- data pipeline ----
    m.def(
        "generate_synthetic",
        [](std::size_t n, std::size_t k, std::size_t image_hw, std::size_t tab_p,
           double interaction, double noise, std::uint64_t seed) {
            SyntheticSpec spec{n, k, image_hw, tab_p, interaction, noise, seed};
            return dataset_to_dict(generate_synthetic(spec));
        },
        py::arg("n") = 2000, py::arg("k") = 7, py::arg("image_hw") = 28, py::arg("tab_p") = 20,
        py::arg("interaction_strength") = 0.0, py::arg("noise") = 0.35, py::arg("seed") = 0,
        "Generate a vertically-partitioned synthetic multimodal dataset");

    m.def(
        "load_ham_style",
        [](const std::string& metadata, const std::string& image_dir, std::size_t target_size,
           std::uint64_t split_seed) {
            return dataset_to_dict(
                load_ham_style(metadata, image_dir, target_size, {0.70, 0.15, 0.15}, split_seed));
        },
        py::arg("metadata"), py::arg("image_dir"), py::arg("target_size") = 28,
        py::arg("split_seed") = 0, "Load a HAM10000-style metadata csv plus image directory");

    // ---- encoders (value level) ----
    m.def(
        "encode_image",
        [](const NpArray& x, std::uint64_t seed, std::size_t d_e) {
            Tensor t = to_tensor(x);
            EncoderDims dims;
            dims.d_e = d_e;
            dims.image_hw = t.dim(2);
            ImageEncoder enc(dims, seed);
            std::vector<std::uint32_t> ids(t.dim(0));
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
            EmbeddingBundle b = enc.encode(t, ids);
            return py::make_tuple(to_numpy(b.z_inv), to_numpy(b.z_spec));
        },
        py::arg("x"), py::arg("seed") = 0, py::arg("d_e") = 400,
        "Dual-output CNN encoder: [b,3,H,W] -> (z_inv, z_spec)");

    m.def(
        "encode_tabular",
        [](const NpArray& x, std::uint64_t seed, std::size_t d_e) {
            Tensor t = to_tensor(x);
            EncoderDims dims;
            dims.d_e = d_e;
            dims.tab_in = t.dim(1);
            TabularEncoder enc(dims, seed);
            std::vector<std::uint32_t> ids(t.dim(0));
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
            EmbeddingBundle b = enc.encode(t, ids);
            return py::make_tuple(to_numpy(b.z_inv), to_numpy(b.z_spec));
        },
        py::arg("x"), py::arg("seed") = 0, py::arg("d_e") = 400,
        "Dual-output MLP encoder: [b,p] -> (z_inv, z_spec)");

    // ---- fusion math (value level) ----
    m.def(
        "softmax",
        [](const NpArray& x, int axis) {
            Graph g;
            return to_numpy(g.value(g.softmax(g.leaf(to_tensor(x)), axis)));
        },
        py::arg("x"), py::arg("axis") = -1);

    m.def(
        "attention",
        [](const NpArray& q, const NpArray& k, const NpArray& v) {
            Graph g;
            GraphVar out =
                attention(g, g.leaf(to_tensor(q)), g.leaf(to_tensor(k)), g.leaf(to_tensor(v)));
            return to_numpy(g.value(out));
        },
        py::arg("q"), py::arg("k"), py::arg("v"),
        "softmax(Q K^T / sqrt(dk)) V over [b,s,d] tensors");

    m.def(
        "cosine_consistency",
        [](const NpArray& a, const NpArray& b) {
            Graph g;
            return g.value(g.cosine_consistency(g.leaf(to_tensor(a)), g.leaf(to_tensor(b))))
                .scalar_value();
        },
        py::arg("a"), py::arg("b"),
        "Mean over the batch of 1 - cos(a_i, b_i), norms clamped at 1e-12");

    m.def(
        "cross_entropy",
        [](const NpArray& y_hat, const NpArray& y) {
            Graph g;
            return g.value(g.cross_entropy(g.leaf(to_tensor(y_hat)), g.leaf(to_tensor(y))))
                .scalar_value();
        },
        py::arg("y_hat"), py::arg("y_onehot"));

    m.def(
        "gradient_check_softmax",
        [](std::size_t rows, std::size_t cols, std::uint64_t seed) {
            Rng rng(seed);
            Tensor x(Shape{rows, cols});
            for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
            return finite_diff_check(
                [](Graph& g, GraphVar v) {
                    GraphVar p = g.softmax(v, -1);
                    return g.sum_all(g.mul(p, p));
                },
                x, 1e-5);
        },
        py::arg("rows") = 3, py::arg("cols") = 5, py::arg("seed") = 0,
        "Max relative error between analytic and central-difference gradients");

    // ---- wire protocol ----
    m.def(
        "serialize_embedding_upload",
        [](std::uint32_t round, const std::string& sender, const std::vector<std::uint32_t>& ids,
           const NpArray& z_inv, const NpArray& z_spec) {
            EmbeddingBundle b;
            b.z_inv = to_tensor(z_inv);
            b.z_spec = to_tensor(z_spec);
            b.source = sender == "image" ? ClientSource::ImageClient : ClientSource::TabularClient;
            b.batch_ids = ids;
            std::vector<std::uint8_t> bytes = serialize(make_embedding_upload(round, b));
            return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        },
        py::arg("round"), py::arg("sender"), py::arg("ids"), py::arg("z_inv"), py::arg("z_spec"));

    m.def("parse_message", [](const py::bytes& raw) {
        std::string s = raw;
        std::vector<std::uint8_t> bytes(s.begin(), s.end());
        ProtocolMessage msg = deserialize(bytes);
        py::dict d;
        d["round"] = msg.round;
        d["sender"] = role_name(msg.sender);
        d["kind"] = kind_name(msg.kind);
        d["ids"] = py::cast(msg.batch_ids);
        py::list tensors;
        for (const Tensor& t : msg.tensors) tensors.append(to_numpy(t));
        d["tensors"] = tensors;
        d["payload_bytes"] = msg.payload_bytes();
        return d;
    });

    // ---- communication accounting ----
    m.def(
        "upstream_bytes_per_sample", [](std::size_t d_e) { return 4 * d_e * 4; },
        py::arg("d_e") = 400, "Two clients x two embeddings x d_e dims x 4 bytes");
    m.def(
        "raw_image_bytes", [](std::size_t h, std::size_t w) { return h * w * 3 * 4; },
        py::arg("h") = 100, py::arg("w") = 100);
    m.def(
        "reduction_ratio",
        [](std::size_t h, std::size_t w, std::size_t d_e) {
            return static_cast<double>(h * w * 3 * 4) / static_cast<double>(4 * d_e * 4);
        },
        py::arg("h") = 100, py::arg("w") = 100, py::arg("d_e") = 400);

    // ---- metrics ----
    m.def(
        "macro_metrics",
        [](const std::vector<int>& y_true, const std::vector<int>& y_pred, int k) {
            return report_to_dict(macro_metrics(confusion(y_true, y_pred, k)));
        },
        py::arg("y_true"), py::arg("y_pred"), py::arg("k") = 7);

    m.def(
        "confusion",
        [](const std::vector<int>& y_true, const std::vector<int>& y_pred, int k) {
            ConfusionMatrix cm = confusion(y_true, y_pred, k);
            py::array_t<std::uint64_t> out({cm.k, cm.k});
            std::copy(cm.counts.begin(), cm.counts.end(), out.mutable_data());
            return out;
        },
        py::arg("y_true"), py::arg("y_pred"), py::arg("k") = 7);

    // ---- experiments ----
    m.def(
        "run_experiment",
        [](const std::string& variant, std::size_t n, std::size_t k, double interaction,
           double noise, int epochs, int batch, double lr, double lambda_cons,
           std::vector<std::uint64_t> seeds, const std::string& out_dir) {
            ExperimentConfig cfg;
            cfg.variant = parse_variant(variant);
            cfg.synthetic.n = n;
            cfg.synthetic.k = k;
            cfg.synthetic.interaction_strength = interaction;
            cfg.synthetic.noise = noise;
            cfg.epochs = epochs;
            cfg.batch = batch;
            cfg.lr = lr;
            cfg.lambda_cons = lambda_cons;
            cfg.seeds = seeds;
            py::list runs;
            for (std::uint64_t seed : seeds) {
                const std::string dir =
                    out_dir.empty() ? ""
                                    : out_dir + "/" + variant_name(cfg.variant) + "_seed" +
                                          std::to_string(seed);
                RunResult r = run_single(cfg, seed, dir);
                py::dict d = report_to_dict(r.metrics);
                d["initial_train_loss"] = r.initial_train_loss;
                d["final_train_loss"] = r.final_train_loss;
                d["seed"] = seed;
                if (r.federated && !r.round_logs.empty()) {
                    d["upstream_bytes_per_sample"] = r.round_logs[0].per_sample_upstream_bytes;
                    d["audit_passed"] = r.audit.passed;
                }
                runs.append(d);
            }
            return runs;
        },
        py::arg("variant") = "HybridVFL", py::arg("n") = 300, py::arg("k") = 7,
        py::arg("interaction_strength") = 0.8, py::arg("noise") = 0.35, py::arg("epochs") = 1,
        py::arg("batch") = 32, py::arg("lr") = 1e-2, py::arg("lambda_cons") = 0.1,
        py::arg("seeds") = std::vector<std::uint64_t>{0}, py::arg("out_dir") = "",
        "Train a variant on the synthetic task; returns one metrics dict per seed");

    m.def("summarize", &summarize, py::arg("in_dir"),
          "Aggregate run directories into summary.csv; returns the csv text");

    m.def(
        "audit_transcript",
        [](const std::string& path) {
            AuditReport r = audit_transcript_records(path);
            return py::make_tuple(r.passed, r.violations);
        },
        py::arg("path"));
}
