#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hybridvfl/tensor.hpp"

namespace hvfl {

struct SplitMasks {
    std::vector<std::uint32_t> train, val, test;
};

// Fitted tabular preprocessing statistics (train split only).
struct TabularPreprocess {
    double age_median = 0.0;
    double age_mean = 0.0;
    double age_std = 1.0;
    std::vector<std::string> sex_vocab;
    std::vector<std::string> loc_vocab;
};

// Index-aligned triple of views plus server-held labels. The parties never
// see this object whole; partition() hands each its own slice.
struct VerticalDataset {
    std::vector<std::uint32_t> ids;
    Tensor images;   // [N,3,H,W], values in [0,1]
    Tensor tabular;  // [N,p]
    Tensor labels;   // [N,K] one-hot
    SplitMasks splits;
    std::size_t num_classes = 0;
    std::size_t image_hw = 0;
    std::size_t tab_width = 0;
    std::vector<std::string> class_names;
    TabularPreprocess preprocess;

    std::size_t size() const { return ids.size(); }
    int label_of(std::size_t row) const;
};

struct ImagePartyData {
    std::vector<std::uint32_t> ids;
    Tensor images;
    std::size_t image_hw = 0;
};

struct TabularPartyData {
    std::vector<std::uint32_t> ids;
    Tensor tabular;
    std::size_t width = 0;
};

struct ServerPartyData {
    std::vector<std::uint32_t> ids;
    Tensor labels;
    std::size_t num_classes = 0;
};

struct VerticalParties {
    ImagePartyData image;
    TabularPartyData tabular;
    ServerPartyData server;
};

// Vertical partition: each party object holds only its own view.
VerticalParties partition(const VerticalDataset& ds);

struct SyntheticSpec {
    std::size_t n = 2000;
    std::size_t k = 7;
    std::size_t image_hw = 28;
    std::size_t tab_p = 20;
    double interaction_strength = 0.0;  // fraction of samples labeled by the joint rule
    double noise = 0.25;
    std::uint64_t seed = 0;
};

// Class-conditional image bands and tabular clusters. With interaction
// strength s, a fraction s of the samples carries label (band + cluster)
// mod K with uniform, label-independent marginals; the rest encode the
// label in both modalities directly. Deterministic per seed.
VerticalDataset generate_synthetic(const SyntheticSpec& spec);

// Stratified split, deterministic per seed. Classes with fewer samples than
// non-empty splits fall back to non-stratified assignment (warning).
void apply_split(VerticalDataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed,
                 std::vector<std::string>* warnings = nullptr);

// HAM10000-style ingestion: CSV metadata (image_id, dx, age, sex,
// localization) plus an image directory. Images are resized to target_size
// and scaled to [0,1]; dx maps onto the seven lesion classes; age is
// standardized with median imputation and a missing-indicator column; sex
// and localization are one-hot encoded. All statistics are fitted on the
// train split only.
VerticalDataset load_ham_style(const std::string& metadata_csv, const std::string& image_dir,
                               std::size_t target_size,
                               const std::array<double, 3>& fractions = {0.70, 0.15, 0.15},
                               std::uint64_t split_seed = 0);

// Write a dataset back out in the metadata-csv + image-dir layout.
void export_ham_layout(const VerticalDataset& ds, const std::string& dir);

const std::vector<std::string>& ham_class_names();

}  // namespace hvfl
