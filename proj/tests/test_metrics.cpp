#include <doctest.h>

#include <cmath>

#include "hybridvfl/metrics.hpp"
#include "hybridvfl/rng.hpp"

using namespace hvfl;

namespace {

// Independent brute-force oracle: per-class metrics straight from the
// prediction lists, no confusion matrix involved.
struct BruteForce {
    double macro_f1 = 0, macro_precision = 0, macro_recall = 0, accuracy = 0, balanced = 0;
};

BruteForce brute_force(const std::vector<int>& y_true, const std::vector<int>& y_pred, int k) {
    BruteForce out;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) correct += y_true[i] == y_pred[i] ? 1 : 0;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(y_true.size());
    for (int c = 0; c < k; ++c) {
        std::size_t tp = 0, predicted = 0, actual = 0;
        for (std::size_t i = 0; i < y_true.size(); ++i) {
            if (y_pred[i] == c) ++predicted;
            if (y_true[i] == c) ++actual;
            if (y_pred[i] == c && y_true[i] == c) ++tp;
        }
        const double precision =
            predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        const double recall = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
        const double f1 =
            precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        out.macro_precision += precision / k;
        out.macro_recall += recall / k;
        out.macro_f1 += f1 / k;
        out.balanced += recall / k;
    }
    return out;
}

}  // namespace

TEST_CASE("confusion matrix basics") {
    ConfusionMatrix diag = confusion({0, 1, 2}, {0, 1, 2}, 3);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t p = 0; p < 3; ++p) CHECK(diag.at(t, p) == (t == p ? 1u : 0u));

    ConfusionMatrix single = confusion({2}, {5}, 7);
    CHECK(single.at(2, 5) == 1);
    CHECK(single.total() == 1);

    CHECK_THROWS_AS(confusion({0, 9}, {0, 1}, 7), ValidationError);
    CHECK_THROWS_AS(confusion({0, -1}, {0, 1}, 7), ValidationError);
    CHECK_THROWS_AS(confusion({0}, {0, 1}, 7), ValidationError);
}

TEST_CASE("confusion total equals the sample count on random input") {
    Rng rng(3);
    std::vector<int> t, p;
    for (int i = 0; i < 500; ++i) {
        t.push_back(static_cast<int>(rng.below(7)));
        p.push_back(static_cast<int>(rng.below(7)));
    }
    CHECK(confusion(t, p, 7).total() == 500);
}

TEST_CASE("perfect predictions give all metrics 1.0") {
    std::vector<int> y = {0, 1, 2, 3, 4, 5, 6, 0, 3};
    MetricsReport r = macro_metrics(confusion(y, y, 7));
    CHECK(r.macro_f1 == 1.0);
    CHECK(r.macro_precision == 1.0);
    CHECK(r.macro_recall == 1.0);
    CHECK(r.accuracy == 1.0);
    CHECK(r.balanced_accuracy == 1.0);
}

TEST_CASE("symmetric two-class confusion gives 0.5 everywhere") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = cm.at(0, 1) = cm.at(1, 0) = cm.at(1, 1) = 1;
    MetricsReport r = macro_metrics(cm);
    CHECK(r.per_class[0].precision == 0.5);
    CHECK(r.per_class[0].recall == 0.5);
    CHECK(r.per_class[1].f1 == 0.5);
    CHECK(r.macro_f1 == 0.5);
    CHECK(r.macro_precision == 0.5);
    CHECK(r.macro_recall == 0.5);
    CHECK(r.accuracy == 0.5);
    CHECK(r.balanced_accuracy == 0.5);
}

TEST_CASE("empty confusion matrix has no defined metrics") {
    ConfusionMatrix cm(3);
    CHECK_THROWS_AS(macro_metrics(cm), UndefinedMetricsError);
}

TEST_CASE("macro metrics match the brute-force oracle on 100 random 7-class sets") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 20 + rng.below(200);
        std::vector<int> y_true, y_pred;
        for (std::size_t i = 0; i < n; ++i) {
            y_true.push_back(static_cast<int>(rng.below(7)));
            // skew predictions so some classes are never predicted
            y_pred.push_back(static_cast<int>(rng.below(rng.below(2) ? 7 : 4)));
        }
        MetricsReport r = macro_metrics(confusion(y_true, y_pred, 7));
        BruteForce ref = brute_force(y_true, y_pred, 7);
        CHECK(std::fabs(r.macro_f1 - ref.macro_f1) < 1e-12);
        CHECK(std::fabs(r.macro_precision - ref.macro_precision) < 1e-12);
        CHECK(std::fabs(r.macro_recall - ref.macro_recall) < 1e-12);
        CHECK(std::fabs(r.accuracy - ref.accuracy) < 1e-12);
        CHECK(std::fabs(r.balanced_accuracy - ref.balanced) < 1e-12);
        // identical by definition, asserted exactly
        CHECK(r.balanced_accuracy == r.macro_recall);
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
        CHECK(r.macro_f1 >= 0.0);
        CHECK(r.macro_f1 <= 1.0);
    }
}

TEST_CASE("never-predicted classes are flagged and count as zero") {
    // class 2 never predicted, class 1 never present
    std::vector<int> y_true = {0, 0, 2, 2};
    std::vector<int> y_pred = {0, 1, 0, 1};
    MetricsReport r = macro_metrics(confusion(y_true, y_pred, 3));
    CHECK_FALSE(r.per_class[2].precision_defined);
    CHECK(r.per_class[2].precision == 0.0);
    CHECK_FALSE(r.per_class[1].recall_defined);
    CHECK(r.per_class[1].recall == 0.0);
}

TEST_CASE("metrics are invariant under consistent class relabeling") {
    Rng rng(13);
    std::vector<int> y_true, y_pred;
    for (int i = 0; i < 300; ++i) {
        y_true.push_back(static_cast<int>(rng.below(5)));
        y_pred.push_back(static_cast<int>(rng.below(5)));
    }
    const int perm[5] = {3, 0, 4, 1, 2};
    std::vector<int> t2, p2;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        t2.push_back(perm[y_true[i]]);
        p2.push_back(perm[y_pred[i]]);
    }
    MetricsReport a = macro_metrics(confusion(y_true, y_pred, 5));
    MetricsReport b = macro_metrics(confusion(t2, p2, 5));
    CHECK(a.macro_f1 == doctest::Approx(b.macro_f1).epsilon(1e-15));
    CHECK(a.macro_precision == doctest::Approx(b.macro_precision).epsilon(1e-15));
    CHECK(a.macro_recall == doctest::Approx(b.macro_recall).epsilon(1e-15));
    CHECK(a.accuracy == doctest::Approx(b.accuracy).epsilon(1e-15));
}

TEST_CASE("report round-trips through the key/value text form") {
    std::vector<int> y_true = {0, 1, 2, 1, 0, 2, 2};
    std::vector<int> y_pred = {0, 2, 2, 1, 1, 2, 0};
    MetricsReport r = macro_metrics(confusion(y_true, y_pred, 3));
    MetricsReport back = MetricsReport::from_kv_text(r.to_kv_text());
    CHECK(back.macro_f1 == r.macro_f1);
    CHECK(back.macro_precision == r.macro_precision);
    CHECK(back.macro_recall == r.macro_recall);
    CHECK(back.accuracy == r.accuracy);
    CHECK(back.balanced_accuracy == r.balanced_accuracy);
    REQUIRE(back.per_class.size() == r.per_class.size());
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        CHECK(back.per_class[c].precision == r.per_class[c].precision);
        CHECK(back.per_class[c].recall == r.per_class[c].recall);
        CHECK(back.per_class[c].support == r.per_class[c].support);
        CHECK(back.per_class[c].precision_defined == r.per_class[c].precision_defined);
    }
}
