#include "hybridvfl/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace hvfl {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::CentralImageOnly: return "CentralImageOnly";
        case Variant::CentralMultimodal: return "CentralMultimodal";
        case Variant::ConcatVFL: return "ConcatVFL";
        case Variant::HybridVFL: return "HybridVFL";
    }
    return "?";
}

Variant parse_variant(const std::string& name) {
    std::string k;
    for (char c : name) {
        if (c == '-' || c == '_') continue;
        k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    if (k == "centralimageonly" || k == "centralimage") return Variant::CentralImageOnly;
    if (k == "centralmultimodal") return Variant::CentralMultimodal;
    if (k == "concatvfl" || k == "concat") return Variant::ConcatVFL;
    if (k == "hybridvfl" || k == "hybrid") return Variant::HybridVFL;
    throw ConfigError("unknown variant '" + name + "'");
}

bool variant_is_federated(Variant v) {
    return v == Variant::ConcatVFL || v == Variant::HybridVFL;
}

void ExperimentConfig::validate() const {
    if (epochs < 0) throw ConfigError("experiment: epochs must be >= 0");
    if (batch < 1) throw ConfigError("experiment: batch must be >= 1");
    if (lr < 0.0) throw ConfigError("experiment: lr must be >= 0");
    if (lambda_cons < 0.0) throw ConfigError("experiment: lambda_cons must be >= 0");
    if (seeds.empty()) throw ConfigError("experiment: need at least one seed");
    if (data == DataSource::Ham) {
        if (ham_metadata.empty() || ham_image_dir.empty()) {
            throw ConfigError("experiment: ham data source needs --metadata and --image-dir");
        }
        if (ham_target_size % 4 != 0 || ham_target_size == 0) {
            throw ConfigError("experiment: ham target size must be a positive multiple of 4");
        }
    }
}

// ------------------------------ batch schedule -------------------------------

std::vector<std::vector<std::uint32_t>> batch_schedule(const std::vector<std::uint32_t>& ids,
                                                       std::size_t batch, int epochs,
                                                       std::uint64_t seed) {
    std::vector<std::vector<std::uint32_t>> out;
    Rng rng(derive_seed(seed, "batches"));
    std::vector<std::uint32_t> order = ids;
    for (int e = 0; e < epochs; ++e) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.below(i)]);
        }
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t stop = std::min(order.size(), start + batch);
            out.emplace_back(order.begin() + start, order.begin() + stop);
        }
    }
    return out;
}

// ----------------------------- central image-only ----------------------------

namespace {

class CentralImageTrainer {
public:
    CentralImageTrainer(const ImagePartyData& image, const ServerPartyData& server,
                        const TrainSettings& s)
        : images_(image.images), labels_(server.labels), lr_(s.lr) {
        for (std::size_t i = 0; i < image.ids.size(); ++i) index_[image.ids[i]] = i;
        spine_ = ImageSpine("image_encoder.spine", s.dims, derive_seed(s.seed, "image_encoder"));
        classifier_ = Linear("server.classifier", s.dims.image_fc,
                             static_cast<std::size_t>(s.num_classes),
                             derive_seed(s.seed, "classifier"));
    }

    Tensor gather(const Tensor& rows, const std::vector<std::uint32_t>& ids) const {
        const std::size_t row = rows.size() / rows.dim(0);
        Shape shape = rows.shape();
        shape[0] = ids.size();
        Tensor out(shape);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::copy(rows.data() + index_.at(ids[i]) * row,
                      rows.data() + (index_.at(ids[i]) + 1) * row, out.data() + i * row);
        }
        return out;
    }

    GraphVar predict_var(Graph& g, ParamBindings& pb, GraphVar x) {
        return g.softmax(classifier_.forward(g, pb, spine_.forward(g, pb, x)), -1);
    }

    double step(const std::vector<std::uint32_t>& batch_ids) {
        Graph g;
        ParamBindings pb;
        GraphVar y_hat = predict_var(g, pb, g.leaf(gather(images_, batch_ids)));
        GraphVar loss = g.cross_entropy(y_hat, g.leaf(gather(labels_, batch_ids)));
        GradTable grads = g.backward(loss);
        sgd_step(pb, grads, lr_);
        return g.value(loss).scalar_value();
    }

    std::vector<int> predict_classes(const std::vector<std::uint32_t>& ids,
                                     std::size_t eval_batch = 256) {
        std::vector<int> out;
        for (std::size_t start = 0; start < ids.size(); start += eval_batch) {
            const std::size_t stop = std::min(ids.size(), start + eval_batch);
            std::vector<std::uint32_t> chunk(ids.begin() + start, ids.begin() + stop);
            Graph g;
            ParamBindings pb;
            const Tensor& probs = g.value(predict_var(g, pb, g.leaf(gather(images_, chunk))));
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                int best = 0;
                for (std::size_t c = 1; c < probs.dim(1); ++c)
                    if (probs.at2(i, c) > probs.at2(i, static_cast<std::size_t>(best)))
                        best = static_cast<int>(c);
                out.push_back(best);
            }
        }
        return out;
    }

    double dataset_loss(const std::vector<std::uint32_t>& ids, std::size_t eval_batch = 256) {
        double total = 0.0;
        for (std::size_t start = 0; start < ids.size(); start += eval_batch) {
            const std::size_t stop = std::min(ids.size(), start + eval_batch);
            std::vector<std::uint32_t> chunk(ids.begin() + start, ids.begin() + stop);
            Graph g;
            ParamBindings pb;
            GraphVar y_hat = predict_var(g, pb, g.leaf(gather(images_, chunk)));
            GraphVar loss = g.cross_entropy(y_hat, g.leaf(gather(labels_, chunk)));
            total += g.value(loss).scalar_value() * static_cast<double>(chunk.size());
        }
        return ids.empty() ? 0.0 : total / static_cast<double>(ids.size());
    }

    NamedParams parameters() {
        NamedParams out;
        spine_.collect(out);
        classifier_.collect(out);
        return out;
    }

private:
    Tensor images_, labels_;
    std::unordered_map<std::uint32_t, std::size_t> index_;
    ImageSpine spine_;
    Linear classifier_;
    double lr_;
};

FedConfig to_fed_config(FusionKind kind, const TrainSettings& s) {
    FedConfig cfg;
    cfg.kind = kind;
    cfg.lr = s.lr;
    cfg.wire = s.wire;
    cfg.seed = s.seed;
    cfg.dims = s.dims;
    cfg.fusion.lambda_cons = kind == FusionKind::Hybrid ? s.lambda : 0.0;
    cfg.fusion.heads = s.heads;
    cfg.fusion.blocks = s.blocks;
    cfg.fusion.num_classes = s.num_classes;
    cfg.fusion.d_e = s.dims.d_e;
    return cfg;
}

}  // namespace

// ------------------------------- VariantTrainer ------------------------------

struct VariantTrainer::Impl {
    std::unique_ptr<CentralImageTrainer> central_image;
    std::unique_ptr<MonolithicTrainer> central_multi;
    std::unique_ptr<FederatedTrainer> fed;
};

VariantTrainer::VariantTrainer(Variant v, const VerticalParties& parties, const TrainSettings& s)
    : variant_(v), impl_(std::make_unique<Impl>()) {
    switch (v) {
        case Variant::CentralImageOnly:
            impl_->central_image =
                std::make_unique<CentralImageTrainer>(parties.image, parties.server, s);
            break;
        case Variant::CentralMultimodal:
            impl_->central_multi =
                std::make_unique<MonolithicTrainer>(parties, to_fed_config(FusionKind::Concat, s));
            break;
        case Variant::ConcatVFL:
            impl_->fed =
                std::make_unique<FederatedTrainer>(parties, to_fed_config(FusionKind::Concat, s));
            break;
        case Variant::HybridVFL:
            impl_->fed =
                std::make_unique<FederatedTrainer>(parties, to_fed_config(FusionKind::Hybrid, s));
            break;
    }
}

VariantTrainer::~VariantTrainer() = default;
VariantTrainer::VariantTrainer(VariantTrainer&&) noexcept = default;
VariantTrainer& VariantTrainer::operator=(VariantTrainer&&) noexcept = default;

double VariantTrainer::step(const std::vector<std::uint32_t>& batch_ids) {
    if (impl_->central_image) return impl_->central_image->step(batch_ids);
    if (impl_->central_multi) return impl_->central_multi->step(batch_ids);
    return impl_->fed->run_round(batch_ids).first;
}

std::vector<int> VariantTrainer::predict_classes(const std::vector<std::uint32_t>& ids) {
    if (impl_->central_image) return impl_->central_image->predict_classes(ids);
    if (impl_->central_multi) return impl_->central_multi->predict_classes(ids);
    return impl_->fed->predict_classes(ids);
}

double VariantTrainer::dataset_loss(const std::vector<std::uint32_t>& ids) {
    if (impl_->central_image) return impl_->central_image->dataset_loss(ids);
    if (impl_->central_multi) return impl_->central_multi->dataset_loss(ids);
    return impl_->fed->dataset_loss(ids);
}

NamedParams VariantTrainer::parameters() {
    if (impl_->central_image) return impl_->central_image->parameters();
    if (impl_->central_multi) return impl_->central_multi->parameters();
    return impl_->fed->parameters();
}

FederatedTrainer* VariantTrainer::federated() { return impl_->fed.get(); }

// --------------------------------- run_single --------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

VerticalDataset build_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.data == DataSource::Synthetic) {
        SyntheticSpec spec = cfg.synthetic;
        spec.seed = cfg.synthetic.seed + seed;
        VerticalDataset ds = generate_synthetic(spec);
        apply_split(ds, {0.70, 0.15, 0.15}, seed);
        return ds;
    }
    return load_ham_style(cfg.ham_metadata, cfg.ham_image_dir, cfg.ham_target_size,
                          {0.70, 0.15, 0.15}, seed);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw ContractError("cannot write " + path.string());
    out << text;
}

}  // namespace

RunResult run_single(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& run_dir) {
    cfg.validate();
    VerticalDataset ds = build_dataset(cfg, seed);
    VerticalParties parties = partition(ds);

    TrainSettings s;
    s.lr = cfg.lr;
    s.lambda = cfg.effective_lambda();
    s.seed = seed;
    s.num_classes = static_cast<int>(ds.num_classes);
    s.wire = cfg.wire;
    s.dims.image_hw = ds.image_hw;
    s.dims.tab_in = ds.tab_width;

    VariantTrainer trainer(cfg.variant, parties, s);

    RunResult result;
    result.federated = variant_is_federated(cfg.variant);
    result.initial_train_loss = trainer.dataset_loss(ds.splits.train);

    auto batches =
        batch_schedule(ds.splits.train, static_cast<std::size_t>(cfg.batch), cfg.epochs, seed);
    const std::size_t per_epoch =
        cfg.epochs > 0 ? batches.size() / static_cast<std::size_t>(cfg.epochs) : 0;
    double epoch_acc = 0.0;
    std::size_t in_epoch = 0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        epoch_acc += trainer.step(batches[i]);
        if (++in_epoch == per_epoch) {
            result.epoch_losses.push_back(epoch_acc / static_cast<double>(per_epoch));
            epoch_acc = 0.0;
            in_epoch = 0;
        }
    }
    result.final_train_loss = trainer.dataset_loss(ds.splits.train);

    // evaluate on the test split
    std::vector<int> y_true;
    y_true.reserve(ds.splits.test.size());
    std::unordered_map<std::uint32_t, std::size_t> row_of;
    for (std::size_t i = 0; i < ds.ids.size(); ++i) row_of[ds.ids[i]] = i;
    for (std::uint32_t id : ds.splits.test) y_true.push_back(ds.label_of(row_of.at(id)));
    std::vector<int> y_pred = trainer.predict_classes(ds.splits.test);
    result.metrics =
        macro_metrics(confusion(y_true, y_pred, static_cast<int>(ds.num_classes)));

    if (result.federated) {
        FederatedTrainer* fed = trainer.federated();
        result.round_logs = fed->round_logs();
        result.audit = privacy_audit(fed->transcript(), {}, s.dims.d_e);
    }

    if (!run_dir.empty()) {
        fs::create_directories(run_dir);
        std::ostringstream metrics_text;
        metrics_text << result.metrics.to_kv_text();
        metrics_text << "variant=" << variant_name(cfg.variant) << "\n";
        metrics_text << "seed=" << seed << "\n";
        metrics_text << "initial_train_loss=" << fmt_double(result.initial_train_loss) << "\n";
        metrics_text << "final_train_loss=" << fmt_double(result.final_train_loss) << "\n";
        write_text(fs::path(run_dir) / "metrics.txt", metrics_text.str());

        std::ostringstream loss_csv;
        loss_csv << "epoch,train_loss\n";
        loss_csv << "0," << fmt_double(result.initial_train_loss) << "\n";
        for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
            loss_csv << e + 1 << ',' << fmt_double(result.epoch_losses[e]) << "\n";
        }
        write_text(fs::path(run_dir) / "loss.csv", loss_csv.str());

        if (result.federated) {
            FederatedTrainer* fed = trainer.federated();
            std::ostringstream rounds_csv;
            rounds_csv << "round,upstream_bytes,downstream_bytes,per_sample_upstream_bytes\n";
            for (const RoundLog& log : result.round_logs) {
                rounds_csv << log.round << ',' << log.upstream_bytes << ','
                           << log.downstream_bytes << ','
                           << fmt_double(log.per_sample_upstream_bytes) << "\n";
            }
            write_text(fs::path(run_dir) / "rounds.csv", rounds_csv.str());
            if (!result.round_logs.empty()) {
                CommSummary comm = comm_report(result.round_logs, 100, 100);
                write_text(fs::path(run_dir) / "comm.txt", comm.to_text());
            }
            fed->dump_transcript((fs::path(run_dir) / "transcript.log").string());
            write_text(fs::path(run_dir) / "audit.txt", result.audit.to_text());
        }
    }
    return result;
}

// ------------------------------------ run ------------------------------------

void run(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.out_dir.empty()) throw ConfigError("experiment: out_dir is required");
    fs::create_directories(cfg.out_dir);

    std::ostringstream config_echo;
    config_echo << "variant=" << variant_name(cfg.variant) << "\n";
    config_echo << "data=" << (cfg.data == DataSource::Synthetic ? "synthetic" : "ham") << "\n";
    config_echo << "epochs=" << cfg.epochs << "\nbatch=" << cfg.batch << "\n";
    config_echo << "lr=" << fmt_double(cfg.lr) << "\n";
    config_echo << "lambda_cons=" << fmt_double(cfg.lambda_cons) << "\n";
    config_echo << "seeds=";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        config_echo << (i ? "," : "") << cfg.seeds[i];
    config_echo << "\n";
    if (cfg.data == DataSource::Synthetic) {
        config_echo << "synthetic_n=" << cfg.synthetic.n << "\nsynthetic_k=" << cfg.synthetic.k
                    << "\nsynthetic_interaction=" << fmt_double(cfg.synthetic.interaction_strength)
                    << "\nsynthetic_noise=" << fmt_double(cfg.synthetic.noise)
                    << "\nsynthetic_seed=" << cfg.synthetic.seed << "\n";
    }
    write_text(fs::path(cfg.out_dir) / (variant_name(cfg.variant) + "_config.txt"),
               config_echo.str());

    int jobs = cfg.jobs > 0 ? cfg.jobs
                            : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    for (std::size_t wave = 0; wave < cfg.seeds.size(); wave += jobs) {
        std::vector<std::future<void>> running;
        const std::size_t stop = std::min(cfg.seeds.size(), wave + jobs);
        for (std::size_t i = wave; i < stop; ++i) {
            const std::uint64_t seed = cfg.seeds[i];
            running.push_back(std::async(std::launch::async, [&, seed] {
                const std::string dir =
                    (fs::path(cfg.out_dir) /
                     (variant_name(cfg.variant) + "_seed" + std::to_string(seed)))
                        .string();
                run_single(cfg, seed, dir);
            }));
        }
        for (auto& f : running) f.get();
    }
}

// --------------------------------- summarize ---------------------------------

std::string summarize(const std::string& in_dir) {
    struct Agg {
        std::vector<MetricsReport> reports;
        std::vector<double> upstream_per_sample;
    };
    std::map<std::string, Agg> by_variant;

    std::vector<fs::path> run_dirs;
    for (const auto& entry : fs::directory_iterator(in_dir)) {
        if (entry.is_directory() && fs::exists(entry.path() / "metrics.txt")) {
            run_dirs.push_back(entry.path());
        }
    }
    std::sort(run_dirs.begin(), run_dirs.end());
    for (const fs::path& dir : run_dirs) {
        const std::string name = dir.filename().string();
        const auto sep = name.rfind("_seed");
        if (sep == std::string::npos) continue;
        const std::string variant = name.substr(0, sep);
        std::ifstream in(dir / "metrics.txt");
        std::stringstream buf;
        buf << in.rdbuf();
        Agg& agg = by_variant[variant];
        agg.reports.push_back(MetricsReport::from_kv_text(buf.str()));
        if (fs::exists(dir / "comm.txt")) {
            std::ifstream comm(dir / "comm.txt");
            std::string line;
            while (std::getline(comm, line)) {
                const std::string key = "mean_per_sample_upstream_bytes=";
                if (line.rfind(key, 0) == 0) {
                    agg.upstream_per_sample.push_back(std::stod(line.substr(key.size())));
                }
            }
        }
    }

    auto mean_std = [](const std::vector<double>& xs) {
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        const double std_dev =
            xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
        return std::make_pair(mean, std_dev);
    };

    std::ostringstream csv;
    csv << "variant,seeds,macro_f1_mean,macro_f1_std,macro_precision_mean,macro_precision_std,"
           "macro_recall_mean,macro_recall_std,test_accuracy_mean,test_accuracy_std,"
           "balanced_accuracy_mean,balanced_accuracy_std,upstream_bytes_per_sample\n";
    const char* order[] = {"CentralImageOnly", "CentralMultimodal", "ConcatVFL", "HybridVFL"};
    for (const char* variant : order) {
        auto it = by_variant.find(variant);
        if (it == by_variant.end()) continue;
        const Agg& agg = it->second;
        auto column = [&](auto getter) {
            std::vector<double> xs;
            for (const auto& r : agg.reports) xs.push_back(getter(r));
            return mean_std(xs);
        };
        auto f1 = column([](const MetricsReport& r) { return r.macro_f1; });
        auto prec = column([](const MetricsReport& r) { return r.macro_precision; });
        auto rec = column([](const MetricsReport& r) { return r.macro_recall; });
        auto acc = column([](const MetricsReport& r) { return r.accuracy; });
        auto bal = column([](const MetricsReport& r) { return r.balanced_accuracy; });
        csv << variant << ',' << agg.reports.size();
        for (auto [m, s] : {f1, prec, rec, acc, bal}) {
            csv << ',' << fmt_double(m) << ',' << fmt_double(s);
        }
        if (!agg.upstream_per_sample.empty()) {
            csv << ',' << fmt_double(mean_std(agg.upstream_per_sample).first);
        } else {
            csv << ',';
        }
        csv << "\n";
    }
    const std::string text = csv.str();
    write_text(fs::path(in_dir) / "summary.csv", text);
    return text;
}

}  // namespace hvfl
