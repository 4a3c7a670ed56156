#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hybridvfl/errors.hpp"

namespace hvfl {

// K x K counts, rows = true class, columns = predicted class.
struct ConfusionMatrix {
    std::size_t k = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t k_) : k(k_), counts(k_ * k_, 0) {}
    std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * k + p]; }
    std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * k + p]; }
    std::uint64_t total() const;
};

ConfusionMatrix confusion(const std::vector<int>& y_true, const std::vector<int>& y_pred, int k);

struct PerClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::uint64_t support = 0;
    bool precision_defined = true;  // false when the class was never predicted
    bool recall_defined = true;     // false when the class has no true samples
};

struct MetricsReport {
    double macro_f1 = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double accuracy = 0.0;
    double balanced_accuracy = 0.0;
    std::vector<PerClassMetrics> per_class;

    std::string to_kv_text() const;
    static MetricsReport from_kv_text(const std::string& text);
};

// Per-class precision/recall/f1 with the zero-division convention: an
// undefined value counts as 0 in the macro mean and is flagged in per_class.
// Macro values are unweighted means over all K classes; accuracy is
// trace/total; balanced accuracy is the mean of per-class recall.
MetricsReport macro_metrics(const ConfusionMatrix& cm);

}  // namespace hvfl
