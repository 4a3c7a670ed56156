#include "hybridvfl/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace hvfl {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t n = 0;
    for (std::uint64_t c : counts) n += c;
    return n;
}

ConfusionMatrix confusion(const std::vector<int>& y_true, const std::vector<int>& y_pred, int k) {
    if (k < 2) throw ValidationError("confusion: need K >= 2");
    if (y_true.size() != y_pred.size()) {
        throw ValidationError("confusion: " + std::to_string(y_true.size()) + " truths vs " +
                              std::to_string(y_pred.size()) + " predictions");
    }
    ConfusionMatrix cm(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] < 0 || y_true[i] >= k || y_pred[i] < 0 || y_pred[i] >= k) {
            throw ValidationError("confusion: class index out of range at sample " +
                                  std::to_string(i));
        }
        ++cm.at(static_cast<std::size_t>(y_true[i]), static_cast<std::size_t>(y_pred[i]));
    }
    return cm;
}

MetricsReport macro_metrics(const ConfusionMatrix& cm) {
    if (cm.k < 2) throw ValidationError("macro_metrics: need K >= 2");
    const std::uint64_t total = cm.total();
    if (total == 0) throw UndefinedMetricsError("macro_metrics: empty confusion matrix");

    MetricsReport r;
    r.per_class.resize(cm.k);
    std::uint64_t trace = 0;
    for (std::size_t c = 0; c < cm.k; ++c) {
        std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
        for (std::size_t o = 0; o < cm.k; ++o) {
            if (o == c) continue;
            fp += cm.at(o, c);
            fn += cm.at(c, o);
        }
        trace += tp;
        PerClassMetrics& pc = r.per_class[c];
        pc.support = tp + fn;
        if (tp + fp == 0) {
            pc.precision_defined = false;
            pc.precision = 0.0;
        } else {
            pc.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        }
        if (tp + fn == 0) {
            pc.recall_defined = false;
            pc.recall = 0.0;
        } else {
            pc.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
        }
        pc.f1 = (pc.precision + pc.recall) > 0.0
                    ? 2.0 * pc.precision * pc.recall / (pc.precision + pc.recall)
                    : 0.0;
        r.macro_precision += pc.precision;
        r.macro_recall += pc.recall;
        r.macro_f1 += pc.f1;
    }
    const double kd = static_cast<double>(cm.k);
    r.macro_precision /= kd;
    r.macro_recall /= kd;
    r.macro_f1 /= kd;
    r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
    // balanced accuracy is the mean of per-class recall, identical by
    // definition to macro recall; computed from the same per-class values
    double bal = 0.0;
    for (const auto& pc : r.per_class) bal += pc.recall;
    r.balanced_accuracy = bal / kd;
    return r;
}

namespace {
std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

std::string MetricsReport::to_kv_text() const {
    std::ostringstream os;
    os << "macro_f1=" << fmt(macro_f1) << "\n";
    os << "macro_precision=" << fmt(macro_precision) << "\n";
    os << "macro_recall=" << fmt(macro_recall) << "\n";
    os << "accuracy=" << fmt(accuracy) << "\n";
    os << "balanced_accuracy=" << fmt(balanced_accuracy) << "\n";
    os << "num_classes=" << per_class.size() << "\n";
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        const auto& pc = per_class[c];
        os << "class_" << c << "_precision=" << fmt(pc.precision) << "\n";
        os << "class_" << c << "_recall=" << fmt(pc.recall) << "\n";
        os << "class_" << c << "_f1=" << fmt(pc.f1) << "\n";
        os << "class_" << c << "_support=" << pc.support << "\n";
        os << "class_" << c << "_precision_defined=" << (pc.precision_defined ? 1 : 0) << "\n";
        os << "class_" << c << "_recall_defined=" << (pc.recall_defined ? 1 : 0) << "\n";
    }
    return os.str();
}

MetricsReport MetricsReport::from_kv_text(const std::string& text) {
    MetricsReport r;
    std::istringstream is(text);
    std::string line;
    std::size_t k = 0;
    std::vector<std::pair<std::string, std::string>> kv;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
        if (kv.back().first == "num_classes") k = std::stoul(kv.back().second);
    }
    r.per_class.resize(k);
    for (const auto& [key, value] : kv) {
        if (key == "macro_f1") r.macro_f1 = std::stod(value);
        else if (key == "macro_precision") r.macro_precision = std::stod(value);
        else if (key == "macro_recall") r.macro_recall = std::stod(value);
        else if (key == "accuracy") r.accuracy = std::stod(value);
        else if (key == "balanced_accuracy") r.balanced_accuracy = std::stod(value);
        else if (key.rfind("class_", 0) == 0) {
            const auto second = key.find('_', 6);
            const std::size_t c = std::stoul(key.substr(6, second - 6));
            if (c >= k) continue;
            const std::string field = key.substr(second + 1);
            PerClassMetrics& pc = r.per_class[c];
            if (field == "precision") pc.precision = std::stod(value);
            else if (field == "recall") pc.recall = std::stod(value);
            else if (field == "f1") pc.f1 = std::stod(value);
            else if (field == "support") pc.support = std::stoull(value);
            else if (field == "precision_defined") pc.precision_defined = value == "1";
            else if (field == "recall_defined") pc.recall_defined = value == "1";
        }
    }
    return r;
}

}  // namespace hvfl
