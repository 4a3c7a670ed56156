#include "hybridvfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "hybridvfl/image_io.hpp"
#include "hybridvfl/rng.hpp"

namespace fs = std::filesystem;

namespace hvfl {

int VerticalDataset::label_of(std::size_t row) const {
    for (std::size_t k = 0; k < num_classes; ++k) {
        if (labels.at2(row, k) == 1.0) return static_cast<int>(k);
    }
    throw ValidationError("label_of: row " + std::to_string(row) + " is not one-hot");
}

VerticalParties partition(const VerticalDataset& ds) {
    VerticalParties p;
    p.image = {ds.ids, ds.images, ds.image_hw};
    p.tabular = {ds.ids, ds.tabular, ds.tab_width};
    p.server = {ds.ids, ds.labels, ds.num_classes};
    return p;
}

// ------------------------------- synthetic ----------------------------------

VerticalDataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n < spec.k) {
        throw ConfigError("synthetic spec: need N >= K, got N=" + std::to_string(spec.n) +
                          " K=" + std::to_string(spec.k));
    }
    if (spec.k < 2) throw ConfigError("synthetic spec: need K >= 2");
    if (spec.interaction_strength < 0.0 || spec.interaction_strength > 1.0) {
        throw ConfigError("synthetic spec: interaction_strength must be in [0,1]");
    }
    if (spec.noise < 0.0) throw ConfigError("synthetic spec: noise must be >= 0");
    if (spec.image_hw < spec.k) {
        throw ConfigError("synthetic spec: image side must be >= K for per-class bands");
    }
    if (spec.tab_p < spec.k) {
        throw ConfigError("synthetic spec: tabular width must be >= K for cluster columns");
    }

    const std::size_t n = spec.n, k = spec.k, hw = spec.image_hw, p = spec.tab_p;
    VerticalDataset ds;
    ds.num_classes = k;
    ds.image_hw = hw;
    ds.tab_width = p;
    ds.images = Tensor(Shape{n, 3, hw, hw});
    ds.tabular = Tensor(Shape{n, p});
    ds.labels = Tensor(Shape{n, k});
    ds.ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.ids[i] = static_cast<std::uint32_t>(i);
    for (std::size_t c = 0; c < k; ++c) ds.class_names.push_back("class" + std::to_string(c));

    constexpr double kBackground = 0.2;
    constexpr double kBandBoost = 0.7;  // lit band sits at 0.9 before noise

    Rng rng(spec.seed);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = rng.below(k);
        const bool joint = rng.uniform() < spec.interaction_strength;
        const std::size_t band = joint ? rng.below(k) : y;
        const std::size_t cluster = joint ? (y + k - band) % k : y;
        ds.labels.at2(i, y) = 1.0;

        // noise has a 4x4-block component so instance identity survives the
        // pooled conv spine, plus a per-pixel residue for texture
        const std::size_t grid = (hw + 3) / 4;
        std::vector<double> block_noise(grid * grid);
        for (double& v : block_noise) v = rng.normal();
        const double block_w = spec.noise * 0.836660026534075548;  // sqrt(0.7)
        const double pixel_w = spec.noise * 0.547722557505166113;  // sqrt(0.3)

        double* img = ds.images.data() + i * 3 * hw * hw;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            for (std::size_t row = 0; row < hw; ++row) {
                const bool lit = row * k / hw == band;
                const double base = kBackground + (lit ? kBandBoost : 0.0);
                for (std::size_t col = 0; col < hw; ++col) {
                    double v = base + block_w * block_noise[(row / 4) * grid + col / 4] +
                               pixel_w * rng.normal();
                    img[(ch * hw + row) * hw + col] = std::clamp(v, 0.0, 1.0);
                }
            }
        }

        // tabular noise runs at half scale: metadata columns are cleaner
        // than pixels, and the cluster block stays decodable
        double* tab = ds.tabular.data() + i * p;
        for (std::size_t j = 0; j < p; ++j) {
            const double center = (j < k && j == cluster) ? 1.0 : 0.0;
            tab[j] = center + 0.5 * spec.noise * rng.normal();
        }
    }
    apply_split(ds, {0.70, 0.15, 0.15}, spec.seed);
    return ds;
}

// --------------------------------- split ------------------------------------

void apply_split(VerticalDataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed,
                 std::vector<std::string>* warnings) {
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::fabs(sum - 1.0) > 1e-9) {
        throw ConfigError("split: fractions must sum to 1, got " + std::to_string(sum));
    }
    for (double f : fractions) {
        if (f < 0.0) throw ConfigError("split: fractions must be non-negative");
    }
    std::size_t nonzero = 0;
    for (double f : fractions) nonzero += f > 0.0 ? 1 : 0;

    const std::size_t n = ds.size();
    std::vector<std::vector<std::uint32_t>> by_class(ds.num_classes);
    for (std::size_t i = 0; i < n; ++i) {
        by_class[static_cast<std::size_t>(ds.label_of(i))].push_back(ds.ids[i]);
    }

    SplitMasks masks;
    Rng rng(derive_seed(seed, "split"));
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& members = by_class[c];
        // deterministic shuffle (Fisher-Yates)
        for (std::size_t i = members.size(); i > 1; --i) {
            std::swap(members[i - 1], members[rng.below(i)]);
        }
        std::vector<std::uint32_t>* buckets[3] = {&masks.train, &masks.val, &masks.test};
        if (members.size() < nonzero) {
            if (warnings) {
                warnings->push_back("class " + std::to_string(c) + " has " +
                                    std::to_string(members.size()) +
                                    " samples, fewer than splits; non-stratified fallback");
            }
            for (std::uint32_t id : members) {
                double u = rng.uniform();
                std::size_t b = u < fractions[0] ? 0 : (u < fractions[0] + fractions[1] ? 1 : 2);
                buckets[b]->push_back(id);
            }
            continue;
        }
        // largest-remainder allocation keeps each split within 1 of ideal
        const double nc = static_cast<double>(members.size());
        std::size_t base[3];
        double frac[3];
        std::size_t assigned = 0;
        for (int b = 0; b < 3; ++b) {
            const double ideal = nc * fractions[b];
            base[b] = static_cast<std::size_t>(ideal);
            frac[b] = ideal - static_cast<double>(base[b]);
            assigned += base[b];
        }
        std::size_t rest = members.size() - assigned;
        int order[3] = {0, 1, 2};
        std::sort(order, order + 3, [&](int a, int b) {
            if (frac[a] != frac[b]) return frac[a] > frac[b];
            return a < b;
        });
        for (std::size_t r = 0; r < rest; ++r) ++base[order[r % 3]];
        std::size_t cursor = 0;
        for (int b = 0; b < 3; ++b) {
            for (std::size_t i = 0; i < base[b]; ++i) buckets[b]->push_back(members[cursor++]);
        }
    }
    std::sort(masks.train.begin(), masks.train.end());
    std::sort(masks.val.begin(), masks.val.end());
    std::sort(masks.test.begin(), masks.test.end());
    ds.splits = std::move(masks);
}

// ------------------------------- ham loader ---------------------------------

const std::vector<std::string>& ham_class_names() {
    static const std::vector<std::string> names = {"akiec", "bcc", "bkl", "df",
                                                   "mel",   "nv",  "vasc"};
    return names;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (quoted) {
            if (ch == '"') {
                quoted = false;
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

struct HamRow {
    std::string image_id, dx, age, sex, localization;
};

bool age_missing(const std::string& s) {
    if (s.empty()) return true;
    std::string t;
    for (char c : s) {
        if (!std::isspace(static_cast<unsigned char>(c)))
            t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    if (t.empty() || t == "na" || t == "nan" || t == "null" || t == "unknown" || t == "none") {
        return true;
    }
    char* end = nullptr;
    std::strtod(t.c_str(), &end);
    return end == t.c_str();
}

double parse_age(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

std::vector<std::string> sorted_unique(std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

std::size_t vocab_index(const std::vector<std::string>& vocab, const std::string& s) {
    auto it = std::lower_bound(vocab.begin(), vocab.end(), s);
    if (it == vocab.end() || *it != s) return vocab.size();  // unseen -> all-zero row
    return static_cast<std::size_t>(it - vocab.begin());
}

}  // namespace

VerticalDataset load_ham_style(const std::string& metadata_csv, const std::string& image_dir,
                               std::size_t target_size, const std::array<double, 3>& fractions,
                               std::uint64_t split_seed) {
    std::ifstream in(metadata_csv);
    if (!in) throw IngestionError("cannot open metadata file: " + metadata_csv);
    std::string line;
    if (!std::getline(in, line)) throw IngestionError("empty metadata file: " + metadata_csv);
    auto header = split_csv_line(line);
    auto col = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw IngestionError("metadata is missing required column '" + name + "'");
    };
    const std::size_t c_id = col("image_id"), c_dx = col("dx"), c_age = col("age"),
                      c_sex = col("sex"), c_loc = col("localization");

    std::vector<HamRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() < header.size()) {
            throw IngestionError("malformed metadata row: " + line);
        }
        rows.push_back({f[c_id], f[c_dx], f[c_age], f[c_sex], f[c_loc]});
    }
    if (rows.empty()) throw IngestionError("metadata has no data rows: " + metadata_csv);

    // canonical order: sorted by image_id, so file row order cannot matter
    std::sort(rows.begin(), rows.end(),
              [](const HamRow& a, const HamRow& b) { return a.image_id < b.image_id; });

    const auto& classes = ham_class_names();
    const std::size_t k = classes.size();
    std::unordered_map<std::string, std::size_t> dx_index;
    for (std::size_t i = 0; i < k; ++i) dx_index[classes[i]] = i;

    const std::size_t n = rows.size();
    VerticalDataset ds;
    ds.num_classes = k;
    ds.class_names = classes;
    ds.image_hw = target_size;
    ds.labels = Tensor(Shape{n, k});
    ds.ids.resize(n);

    std::vector<std::size_t> dx_of(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.ids[i] = static_cast<std::uint32_t>(i);
        auto it = dx_index.find(rows[i].dx);
        if (it == dx_index.end()) {
            throw IngestionError("unknown dx value '" + rows[i].dx + "' for image_id '" +
                                 rows[i].image_id + "'");
        }
        dx_of[i] = it->second;
        ds.labels.at2(i, it->second) = 1.0;
    }

    // images
    ds.images = Tensor(Shape{n, 3, target_size, target_size});
    const char* exts[] = {".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG"};
    for (std::size_t i = 0; i < n; ++i) {
        std::string found;
        for (const char* ext : exts) {
            std::string candidate = (fs::path(image_dir) / (rows[i].image_id + ext)).string();
            if (fs::exists(candidate)) {
                found = candidate;
                break;
            }
        }
        if (found.empty()) {
            throw IngestionError("no image file for image_id '" + rows[i].image_id + "' under " +
                                 image_dir);
        }
        Tensor img = decode_image(found, target_size);
        std::copy(img.data(), img.data() + img.size(),
                  ds.images.data() + i * 3 * target_size * target_size);
    }

    // split before fitting so statistics are train-only
    apply_split(ds, fractions, split_seed);
    std::vector<char> in_train(n, 0);
    for (std::uint32_t id : ds.splits.train) in_train[id] = 1;

    std::vector<double> train_ages;
    std::vector<std::string> train_sex, train_loc;
    for (std::size_t i = 0; i < n; ++i) {
        if (!in_train[i]) continue;
        if (!age_missing(rows[i].age)) train_ages.push_back(parse_age(rows[i].age));
        train_sex.push_back(rows[i].sex);
        train_loc.push_back(rows[i].localization);
    }
    TabularPreprocess prep;
    if (!train_ages.empty()) {
        std::sort(train_ages.begin(), train_ages.end());
        const std::size_t m = train_ages.size();
        prep.age_median = m % 2 ? train_ages[m / 2]
                                : 0.5 * (train_ages[m / 2 - 1] + train_ages[m / 2]);
    }
    // mean/std of the imputed train column (population variance)
    double mean = 0.0;
    std::size_t train_n = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!in_train[i]) continue;
        mean += age_missing(rows[i].age) ? prep.age_median : parse_age(rows[i].age);
        ++train_n;
    }
    mean /= static_cast<double>(train_n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!in_train[i]) continue;
        const double a = age_missing(rows[i].age) ? prep.age_median : parse_age(rows[i].age);
        var += (a - mean) * (a - mean);
    }
    var /= static_cast<double>(train_n);
    prep.age_mean = mean;
    prep.age_std = var > 0.0 ? std::sqrt(var) : 1.0;
    prep.sex_vocab = sorted_unique(std::move(train_sex));
    prep.loc_vocab = sorted_unique(std::move(train_loc));

    const std::size_t p = 2 + prep.sex_vocab.size() + prep.loc_vocab.size();
    ds.tab_width = p;
    ds.tabular = Tensor(Shape{n, p});
    for (std::size_t i = 0; i < n; ++i) {
        double* row = ds.tabular.data() + i * p;
        const bool missing = age_missing(rows[i].age);
        const double age = missing ? prep.age_median : parse_age(rows[i].age);
        row[0] = (age - prep.age_mean) / prep.age_std;
        row[1] = missing ? 1.0 : 0.0;
        const std::size_t si = vocab_index(prep.sex_vocab, rows[i].sex);
        if (si < prep.sex_vocab.size()) row[2 + si] = 1.0;
        const std::size_t li = vocab_index(prep.loc_vocab, rows[i].localization);
        if (li < prep.loc_vocab.size()) row[2 + prep.sex_vocab.size() + li] = 1.0;
    }
    ds.preprocess = std::move(prep);
    (void)dx_of;
    return ds;
}

void export_ham_layout(const VerticalDataset& ds, const std::string& dir) {
    if (ds.num_classes != ham_class_names().size()) {
        throw ConfigError("export_ham_layout: dataset must have the 7 lesion classes");
    }
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream meta(fs::path(dir) / "metadata.csv");
    if (!meta) throw IngestionError("cannot write metadata under " + dir);
    meta << "image_id,dx,age,sex,localization\n";
    const std::size_t hw = ds.image_hw;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "syn%06u", ds.ids[i]);
        const int cls = ds.label_of(i);
        meta << idbuf << ',' << ham_class_names()[static_cast<std::size_t>(cls)] << ','
             << 20 + ds.ids[i] % 50 << ',' << (ds.ids[i] % 2 ? "male" : "female") << ",site"
             << ds.ids[i] % 5 << "\n";
        Tensor img(Shape{3, hw, hw});
        std::copy(ds.images.data() + i * 3 * hw * hw, ds.images.data() + (i + 1) * 3 * hw * hw,
                  img.data());
        encode_png((fs::path(dir) / "images" / (std::string(idbuf) + ".png")).string(), img);
    }
}

}  // namespace hvfl
