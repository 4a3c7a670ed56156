#pragma once

#include <memory>
#include <string>

#include "hybridvfl/federation.hpp"
#include "hybridvfl/metrics.hpp"

namespace hvfl {

enum class Variant {
    CentralImageOnly,   // image spine + classifier, no tabular path, one process
    CentralMultimodal,  // concatenated image+tabular features, one process
    ConcatVFL,          // federated, plain concatenation fusion
    HybridVFL,          // federated, consistency + transformer fusion
};

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);
bool variant_is_federated(Variant v);

enum class DataSource { Synthetic, Ham };

struct ExperimentConfig {
    Variant variant = Variant::HybridVFL;
    DataSource data = DataSource::Synthetic;
    SyntheticSpec synthetic;
    std::string ham_metadata;
    std::string ham_image_dir;
    std::size_t ham_target_size = 28;
    int epochs = 30;
    int batch = 32;
    double lr = 1e-2;
    double lambda_cons = 0.1;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::string out_dir;
    WireFloat wire = WireFloat::F32;
    int jobs = 0;  // 0 = hardware concurrency

    // lambda_cons applies to HybridVFL only; every other variant runs with 0
    double effective_lambda() const {
        return variant == Variant::HybridVFL ? lambda_cons : 0.0;
    }
    void validate() const;
};

struct TrainSettings {
    double lr = 1e-2;
    double lambda = 0.1;
    std::uint64_t seed = 0;
    EncoderDims dims;
    int num_classes = 7;
    WireFloat wire = WireFloat::F32;
    int heads = 4;
    int blocks = 1;
};

// One assembled (model, protocol) pipeline for a variant. Central variants
// run in one process; federated variants run through the wire.
class VariantTrainer {
public:
    VariantTrainer(Variant v, const VerticalParties& parties, const TrainSettings& s);
    ~VariantTrainer();
    VariantTrainer(VariantTrainer&&) noexcept;
    VariantTrainer& operator=(VariantTrainer&&) noexcept;

    double step(const std::vector<std::uint32_t>& batch_ids);
    std::vector<int> predict_classes(const std::vector<std::uint32_t>& ids);
    double dataset_loss(const std::vector<std::uint32_t>& ids);
    NamedParams parameters();
    FederatedTrainer* federated();  // nullptr for the central variants
    Variant variant() const { return variant_; }

private:
    struct Impl;
    Variant variant_;
    std::unique_ptr<Impl> impl_;
};

struct RunResult {
    MetricsReport metrics;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    std::vector<double> epoch_losses;
    std::vector<RoundLog> round_logs;
    AuditReport audit;
    bool federated = false;
};

// Train one (variant, seed) pipeline and evaluate it on the test split.
// When run_dir is non-empty the result files are written there.
RunResult run_single(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& run_dir);

// Full sweep: one run per seed (parallel up to cfg.jobs), files under
// cfg.out_dir/<variant>_seed<k>/.
void run(const ExperimentConfig& cfg);

// Aggregate metrics.txt files under in_dir into summary.csv with
// mean +/- std across seeds per variant. Reads only the result files.
std::string summarize(const std::string& in_dir);

// Deterministic per-epoch batch order shared by every trainer.
std::vector<std::vector<std::uint32_t>> batch_schedule(const std::vector<std::uint32_t>& ids,
                                                       std::size_t batch, int epochs,
                                                       std::uint64_t seed);

}  // namespace hvfl
