#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "hybridvfl/data.hpp"
#include "hybridvfl/image_io.hpp"

using namespace hvfl;
namespace fs = std::filesystem;

namespace {

template <class T>
concept HoldsLabels = requires(T t) { t.labels; };
template <class T>
concept HoldsImages = requires(T t) { t.images; };
template <class T>
concept HoldsTabular = requires(T t) { t.tabular; };

// ----- probe oracle: nearest class mean, fitted and scored on train rows ----

using Rows = std::vector<std::vector<double>>;

double nearest_mean_accuracy(const Rows& features, const std::vector<int>& labels, int k) {
    const std::size_t dim = features[0].size();
    Rows means(static_cast<std::size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < features.size(); ++i) {
        ++counts[static_cast<std::size_t>(labels[i])];
        for (std::size_t j = 0; j < dim; ++j)
            means[static_cast<std::size_t>(labels[i])][j] += features[i][j];
    }
    for (int c = 0; c < k; ++c) {
        if (!counts[c]) continue;
        for (std::size_t j = 0; j < dim; ++j)
            means[static_cast<std::size_t>(c)][j] /= static_cast<double>(counts[c]);
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < k; ++c) {
            double d = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double diff = features[i][j] - means[static_cast<std::size_t>(c)][j];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (best == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(features.size());
}

std::vector<double> image_band_means(const VerticalDataset& ds, std::size_t row) {
    const std::size_t hw = ds.image_hw, k = ds.num_classes;
    std::vector<double> u(k, 0.0);
    std::vector<std::size_t> counts(k, 0);
    const double* img = ds.images.data() + row * 3 * hw * hw;
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t y = 0; y < hw; ++y) {
            const std::size_t band = y * k / hw;
            for (std::size_t x = 0; x < hw; ++x) {
                u[band] += img[(ch * hw + y) * hw + x];
                ++counts[band];
            }
        }
    for (std::size_t b = 0; b < k; ++b) u[b] /= static_cast<double>(counts[b]);
    return u;
}

Rows image_features(const VerticalDataset& ds) {
    Rows rows;
    const std::size_t stride = ds.images.size() / ds.size();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        rows.emplace_back(ds.images.data() + i * stride, ds.images.data() + (i + 1) * stride);
    }
    return rows;
}

Rows tabular_features(const VerticalDataset& ds) {
    Rows rows;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        rows.emplace_back(ds.tabular.data() + i * ds.tab_width,
                          ds.tabular.data() + (i + 1) * ds.tab_width);
    }
    return rows;
}

// Joint probe: decode the image band and the tabular cluster by argmax,
// then majority-vote a (band, cluster) -> class table. Readable only from
// the pair; either index alone is label-independent at full interaction.
double joint_table_accuracy(const VerticalDataset& ds, const std::vector<int>& labels) {
    const std::size_t k = ds.num_classes;
    auto cell_of = [&](std::size_t i) {
        std::vector<double> u = image_band_means(ds, i);
        std::size_t band = 0, cluster = 0;
        for (std::size_t a = 1; a < k; ++a)
            if (u[a] > u[band]) band = a;
        for (std::size_t c = 1; c < k; ++c)
            if (ds.tabular.at2(i, c) > ds.tabular.at2(i, cluster)) cluster = c;
        return band * k + cluster;
    };
    std::vector<std::vector<std::size_t>> votes(k * k, std::vector<std::size_t>(k, 0));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ++votes[cell_of(i)][static_cast<std::size_t>(labels[i])];
    }
    std::vector<int> table(k * k, 0);
    for (std::size_t cell = 0; cell < k * k; ++cell) {
        for (std::size_t c = 1; c < k; ++c)
            if (votes[cell][c] > votes[cell][static_cast<std::size_t>(table[cell])])
                table[cell] = static_cast<int>(c);
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (table[cell_of(i)] == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

std::vector<int> all_labels(const VerticalDataset& ds) {
    std::vector<int> ys;
    for (std::size_t i = 0; i < ds.size(); ++i) ys.push_back(ds.label_of(i));
    return ys;
}

std::string write_toy_metadata(const fs::path& dir, bool shuffled) {
    fs::create_directories(dir);
    std::ofstream csv(dir / "metadata.csv");
    csv << "image_id,dx,age,sex,localization\n";
    if (!shuffled) {
        csv << "img_a,nv,20,male,back\n";
        csv << "img_b,mel,,female,face\n";
        csv << "img_c,bkl,40,male,scalp\n";
    } else {
        csv << "img_c,bkl,40,male,scalp\n";
        csv << "img_a,nv,20,male,back\n";
        csv << "img_b,mel,,female,face\n";
    }
    return (dir / "metadata.csv").string();
}

void write_toy_images(const fs::path& dir) {
    fs::create_directories(dir);
    int tone = 0;
    for (const char* id : {"img_a", "img_b", "img_c"}) {
        Tensor img = Tensor::full({3, 8, 8}, 0.1 + 0.2 * tone++);
        encode_png((dir / (std::string(id) + ".png")).string(), img);
    }
}

}  // namespace

TEST_CASE("synthetic generation is deterministic per seed") {
    SyntheticSpec spec;
    spec.n = 40;
    spec.k = 4;
    spec.image_hw = 8;
    spec.tab_p = 6;
    spec.interaction_strength = 0.5;
    spec.seed = 123;
    VerticalDataset a = generate_synthetic(spec);
    VerticalDataset b = generate_synthetic(spec);
    CHECK(a.images.max_abs_diff(b.images) == 0.0);
    CHECK(a.tabular.max_abs_diff(b.tabular) == 0.0);
    CHECK(a.labels.max_abs_diff(b.labels) == 0.0);
    spec.seed = 124;
    VerticalDataset c = generate_synthetic(spec);
    CHECK(c.images.max_abs_diff(a.images) > 0.0);
}

TEST_CASE("synthetic spec validation") {
    SyntheticSpec spec;
    spec.n = 3;
    spec.k = 7;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec.n = 100;
    spec.interaction_strength = 1.5;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}

TEST_CASE("labels are exact one-hot rows") {
    SyntheticSpec spec;
    spec.n = 60;
    spec.k = 5;
    spec.image_hw = 8;
    spec.tab_p = 8;
    VerticalDataset ds = generate_synthetic(spec);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double row_sum = 0.0;
        std::size_t ones = 0;
        for (std::size_t c = 0; c < ds.num_classes; ++c) {
            const double v = ds.labels.at2(i, c);
            CHECK((v == 0.0 || v == 1.0));
            row_sum += v;
            ones += v == 1.0 ? 1 : 0;
        }
        CHECK(row_sum == 1.0);
        CHECK(ones == 1);
    }
}

TEST_CASE("probe oracle: independent samples are readable from either modality alone") {
    SyntheticSpec spec;  // defaults: n=2000, k=7, 28x28, p=20
    spec.interaction_strength = 0.0;
    spec.noise = 0.0;
    spec.seed = 7;
    VerticalDataset ds = generate_synthetic(spec);
    std::vector<int> ys = all_labels(ds);
    CHECK(nearest_mean_accuracy(image_features(ds), ys, 7) >= 0.99);
    CHECK(nearest_mean_accuracy(tabular_features(ds), ys, 7) >= 0.99);
}

TEST_CASE("probe oracle: joint-only labels defeat single modalities but not the pair") {
    SyntheticSpec spec;
    spec.interaction_strength = 1.0;
    spec.seed = 11;
    VerticalDataset ds = generate_synthetic(spec);
    std::vector<int> ys = all_labels(ds);
    const double chance_cap = 1.0 / 7 + 0.15;
    CHECK(nearest_mean_accuracy(image_features(ds), ys, 7) <= chance_cap);
    CHECK(nearest_mean_accuracy(tabular_features(ds), ys, 7) <= chance_cap);
    CHECK(joint_table_accuracy(ds, ys) >= 0.90);
}

TEST_CASE("split fractions (1,0,0) put everything into train") {
    SyntheticSpec spec;
    spec.n = 50;
    spec.k = 5;
    spec.image_hw = 8;
    spec.tab_p = 8;
    VerticalDataset ds = generate_synthetic(spec);
    apply_split(ds, {1.0, 0.0, 0.0}, 3);
    CHECK(ds.splits.train.size() == 50);
    CHECK(ds.splits.val.empty());
    CHECK(ds.splits.test.empty());
}

TEST_CASE("stratified split is within one sample of the ideal per class") {
    SyntheticSpec spec;
    spec.n = 203;
    spec.k = 7;
    spec.image_hw = 8;
    spec.tab_p = 8;
    spec.seed = 17;
    VerticalDataset ds = generate_synthetic(spec);
    apply_split(ds, {0.70, 0.15, 0.15}, 5);

    std::vector<std::size_t> class_total(7, 0);
    std::vector<std::vector<std::size_t>> per_split(3, std::vector<std::size_t>(7, 0));
    std::unordered_map<std::uint32_t, std::size_t> row_of;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        row_of[ds.ids[i]] = i;
        ++class_total[static_cast<std::size_t>(ds.label_of(i))];
    }
    const std::vector<std::uint32_t>* masks[3] = {&ds.splits.train, &ds.splits.val,
                                                  &ds.splits.test};
    for (int s = 0; s < 3; ++s)
        for (std::uint32_t id : *masks[s])
            ++per_split[s][static_cast<std::size_t>(ds.label_of(row_of[id]))];
    const double fractions[3] = {0.70, 0.15, 0.15};
    for (int s = 0; s < 3; ++s)
        for (std::size_t c = 0; c < 7; ++c) {
            const double ideal = fractions[s] * static_cast<double>(class_total[c]);
            CHECK(std::fabs(static_cast<double>(per_split[s][c]) - ideal) <= 1.0);
        }

    // split masks are disjoint and cover all ids
    std::vector<std::uint32_t> joined;
    for (int s = 0; s < 3; ++s)
        joined.insert(joined.end(), masks[s]->begin(), masks[s]->end());
    std::sort(joined.begin(), joined.end());
    std::vector<std::uint32_t> sorted_ids = ds.ids;
    std::sort(sorted_ids.begin(), sorted_ids.end());
    CHECK(joined == sorted_ids);
}

TEST_CASE("same seed gives identical masks; tiny classes warn and fall back") {
    SyntheticSpec spec;
    spec.n = 41;
    spec.k = 4;
    spec.image_hw = 8;
    spec.tab_p = 8;
    VerticalDataset ds = generate_synthetic(spec);
    apply_split(ds, {0.70, 0.15, 0.15}, 9);
    SplitMasks first = ds.splits;
    apply_split(ds, {0.70, 0.15, 0.15}, 9);
    CHECK(first.train == ds.splits.train);
    CHECK(first.val == ds.splits.val);
    CHECK(first.test == ds.splits.test);

    // force a class with fewer samples than splits
    VerticalDataset tiny;
    tiny.num_classes = 2;
    tiny.ids = {0, 1, 2, 3};
    tiny.labels = Tensor(Shape{4, 2});
    tiny.labels.at2(0, 0) = 1.0;
    tiny.labels.at2(1, 0) = 1.0;
    tiny.labels.at2(2, 0) = 1.0;
    tiny.labels.at2(3, 1) = 1.0;  // class 1 has a single sample
    std::vector<std::string> warnings;
    apply_split(tiny, {0.5, 0.25, 0.25}, 1, &warnings);
    CHECK(warnings.size() == 1);
    CHECK(warnings[0].find("class 1") != std::string::npos);
}

TEST_CASE("partition gives each party only its own view") {
    SyntheticSpec spec;
    spec.n = 20;
    spec.k = 4;
    spec.image_hw = 8;
    spec.tab_p = 8;
    VerticalDataset ds = generate_synthetic(spec);
    VerticalParties p = partition(ds);
    CHECK(p.image.images.size() == ds.images.size());
    CHECK(p.tabular.tabular.size() == ds.tabular.size());
    CHECK(p.server.labels.size() == ds.labels.size());
    CHECK(p.image.ids == p.tabular.ids);
    // ownership is structural: the party types carry no other modality
    static_assert(!HoldsLabels<ImagePartyData>);
    static_assert(!HoldsTabular<ImagePartyData>);
    static_assert(!HoldsImages<TabularPartyData>);
    static_assert(!HoldsLabels<TabularPartyData>);
    static_assert(!HoldsImages<ServerPartyData>);
    static_assert(!HoldsTabular<ServerPartyData>);
}

TEST_CASE("ham loader fixture: median imputation, missing flag, standardization") {
    if (!image_io_available()) return;
    const fs::path root = fs::temp_directory_path() / "hvfl_ham_fixture";
    fs::remove_all(root);
    const std::string meta = write_toy_metadata(root, false);
    write_toy_images(root / "images");

    VerticalDataset ds = load_ham_style(meta, (root / "images").string(), 8, {1.0, 0.0, 0.0}, 0);
    CHECK(ds.num_classes == 7);
    CHECK(ds.size() == 3);
    // sorted by image_id: img_a (age 20), img_b (missing), img_c (40)
    CHECK(ds.preprocess.age_median == 30.0);
    const double sigma = std::sqrt(200.0 / 3.0);
    CHECK(ds.tabular.at2(0, 0) == doctest::Approx(-10.0 / sigma).epsilon(1e-12));
    CHECK(ds.tabular.at2(1, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(ds.tabular.at2(2, 0) == doctest::Approx(10.0 / sigma).epsilon(1e-12));
    CHECK(ds.tabular.at2(0, 1) == 0.0);
    CHECK(ds.tabular.at2(1, 1) == 1.0);  // missing-age indicator
    CHECK(ds.tabular.at2(2, 1) == 0.0);
    // one-hot widths: 2 age cols + {female,male} + {back,face,scalp}
    CHECK(ds.tab_width == 2 + 2 + 3);
    fs::remove_all(root);
}

TEST_CASE("ham loader is invariant to metadata row order") {
    if (!image_io_available()) return;
    const fs::path root = fs::temp_directory_path() / "hvfl_ham_order";
    fs::remove_all(root);
    write_toy_images(root / "images");
    const std::string meta_a = write_toy_metadata(root / "a", false);
    const std::string meta_b = write_toy_metadata(root / "b", true);
    VerticalDataset a = load_ham_style(meta_a, (root / "images").string(), 8, {1, 0, 0}, 0);
    VerticalDataset b = load_ham_style(meta_b, (root / "images").string(), 8, {1, 0, 0}, 0);
    CHECK(a.ids == b.ids);
    CHECK(a.images.max_abs_diff(b.images) == 0.0);
    CHECK(a.tabular.max_abs_diff(b.tabular) == 0.0);
    CHECK(a.labels.max_abs_diff(b.labels) == 0.0);
    fs::remove_all(root);
}

TEST_CASE("ham loader rejects unknown dx values naming the row") {
    if (!image_io_available()) return;
    const fs::path root = fs::temp_directory_path() / "hvfl_ham_bad";
    fs::remove_all(root);
    write_toy_images(root / "images");
    fs::create_directories(root);
    {
        std::ofstream csv(root / "metadata.csv");
        csv << "image_id,dx,age,sex,localization\n";
        csv << "img_a,notalesion,20,male,back\n";
    }
    try {
        load_ham_style((root / "metadata.csv").string(), (root / "images").string(), 8);
        FAIL("expected IngestionError");
    } catch (const IngestionError& e) {
        CHECK(std::string(e.what()).find("notalesion") != std::string::npos);
        CHECK(std::string(e.what()).find("img_a") != std::string::npos);
    }
    fs::remove_all(root);
}

TEST_CASE("ham loader errors on a missing image file") {
    if (!image_io_available()) return;
    const fs::path root = fs::temp_directory_path() / "hvfl_ham_noimg";
    fs::remove_all(root);
    const std::string meta = write_toy_metadata(root, false);
    fs::create_directories(root / "images");  // empty
    CHECK_THROWS_AS(load_ham_style(meta, (root / "images").string(), 8), IngestionError);
    fs::remove_all(root);
}

TEST_CASE("preprocessing statistics are fitted on the train split only") {
    if (!image_io_available()) return;
    const fs::path root = fs::temp_directory_path() / "hvfl_ham_trainfit";
    fs::remove_all(root);
    fs::create_directories(root / "images");
    const char* dxs[4] = {"nv", "mel", "bkl", "df"};
    {
        std::ofstream csv(root / "metadata.csv");
        csv << "image_id,dx,age,sex,localization\n";
        for (int i = 0; i < 20; ++i) {
            char id[16];
            std::snprintf(id, sizeof(id), "img_%02d", i);
            csv << id << ',' << dxs[i % 4] << ',' << 20 + i << ",male,back\n";
            Tensor img = Tensor::full({3, 8, 8}, 0.05 * (i % 10));
            encode_png((root / "images" / (std::string(id) + ".png")).string(), img);
        }
    }
    VerticalDataset ds =
        load_ham_style((root / "metadata.csv").string(), (root / "images").string(), 8,
                       {0.5, 0.25, 0.25}, 3);
    // recompute the statistics from the train rows alone
    std::vector<double> ages;
    for (std::uint32_t id : ds.splits.train) ages.push_back(20.0 + id);  // id == sorted row index
    std::sort(ages.begin(), ages.end());
    const double median = ages.size() % 2 ? ages[ages.size() / 2]
                                          : 0.5 * (ages[ages.size() / 2 - 1] + ages[ages.size() / 2]);
    double mean = 0.0;
    for (double a : ages) mean += a;
    mean /= static_cast<double>(ages.size());
    double var = 0.0;
    for (double a : ages) var += (a - mean) * (a - mean);
    var /= static_cast<double>(ages.size());
    CHECK(ds.preprocess.age_median == doctest::Approx(median).epsilon(1e-12));
    CHECK(ds.preprocess.age_mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(ds.preprocess.age_std == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
    fs::remove_all(root);
}

TEST_CASE("synthetic datasets export to the ham layout and load back aligned") {
    if (!image_io_available()) return;
    SyntheticSpec spec;
    spec.n = 21;
    spec.k = 7;
    spec.image_hw = 8;
    spec.tab_p = 8;
    spec.seed = 5;
    VerticalDataset ds = generate_synthetic(spec);
    const fs::path root = fs::temp_directory_path() / "hvfl_export";
    fs::remove_all(root);
    export_ham_layout(ds, root.string());
    VerticalDataset back = load_ham_style((root / "metadata.csv").string(),
                                          (root / "images").string(), 8, {1, 0, 0}, 0);
    REQUIRE(back.size() == ds.size());
    CHECK(back.num_classes == 7);
    // labels survive the round trip; images survive up to 8-bit quantization
    CHECK(back.labels.max_abs_diff(ds.labels) == 0.0);
    CHECK(back.images.max_abs_diff(ds.images) <= 0.5 / 255.0 + 1e-9);
    fs::remove_all(root);
}
