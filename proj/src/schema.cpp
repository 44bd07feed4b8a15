#include "rrtl/schema.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "json.hpp"
#include "rrtl/rng.hpp"

namespace rrtl::schema {

// ----------------------------- Schema -----------------------------

std::vector<std::string> Schema::shared() const {
    std::vector<std::string> out;
    for (size_t j = 0; j < features.size(); ++j) {
        if (in_source[j] && in_target[j]) out.push_back(features[j].name);
    }
    return out;
}

std::vector<std::string> Schema::source_only() const {
    std::vector<std::string> out;
    for (size_t j = 0; j < features.size(); ++j) {
        if (in_source[j] && !in_target[j]) out.push_back(features[j].name);
    }
    return out;
}

std::vector<std::string> Schema::target_only() const {
    std::vector<std::string> out;
    for (size_t j = 0; j < features.size(); ++j) {
        if (!in_source[j] && in_target[j]) out.push_back(features[j].name);
    }
    return out;
}

std::vector<uint8_t> Schema::presence(const std::string& domain) const {
    if (domain == "source") return in_source;
    if (domain == "target") return in_target;
    throw SchemaError("unknown domain tag '" + domain + "'");
}

std::vector<uint8_t> Schema::shared_presence() const {
    std::vector<uint8_t> out(features.size());
    for (size_t j = 0; j < features.size(); ++j) out[j] = in_source[j] && in_target[j];
    return out;
}

int Schema::index_of(const std::string& name) const {
    for (size_t j = 0; j < features.size(); ++j) {
        if (features[j].name == name) return static_cast<int>(j);
    }
    return -1;
}

std::string Schema::id() const {
    std::string s;
    for (size_t j = 0; j < features.size(); ++j) {
        s += features[j].name;
        s += features[j].kind == FeatureKind::numeric ? ":n" : ":c";
        s += in_source[j] ? "s" : "-";
        s += in_target[j] ? "t;" : "-;";
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash64(0x5c5ea4, s)));
    return buf;
}

Schema build_schema(const std::vector<FeatureDecl>& source_features,
                    const std::vector<FeatureDecl>& target_features) {
    auto check_unique = [](const std::vector<FeatureDecl>& fs, const char* which) {
        std::set<std::string> seen;
        for (const auto& f : fs) {
            if (!seen.insert(f.name).second) {
                throw SchemaError(std::string("duplicate feature '") + f.name + "' in " + which + " list");
            }
        }
    };
    check_unique(source_features, "source");
    check_unique(target_features, "target");

    Schema s;
    for (const auto& f : source_features) {
        s.features.push_back(f);
        s.in_source.push_back(1);
        s.in_target.push_back(0);
    }
    for (const auto& f : target_features) {
        bool found = false;
        for (size_t j = 0; j < s.features.size(); ++j) {
            if (s.features[j].name != f.name) continue;
            if (s.features[j].kind != f.kind) {
                throw SchemaError("feature '" + f.name + "' has conflicting kinds across domains");
            }
            s.in_target[j] = 1;
            found = true;
            break;
        }
        if (!found) {
            s.features.push_back(f);
            s.in_source.push_back(0);
            s.in_target.push_back(1);
        }
    }
    return s;
}

Schema single_domain_schema(const std::vector<FeatureDecl>& features) {
    return build_schema(features, features);
}

// ----------------------------- vocab -----------------------------

int CategoryVocab::size(const std::string& feature) const {
    const auto it = categories.find(feature);
    if (it == categories.end()) throw SchemaError("no vocab for feature '" + feature + "'");
    return static_cast<int>(it->second.size()) + 1;
}

int CategoryVocab::unk_index(const std::string& feature) const {
    return size(feature) - 1;
}

int CategoryVocab::encode(const std::string& feature, int category) const {
    const auto it = categories.find(feature);
    if (it == categories.end()) throw SchemaError("no vocab for feature '" + feature + "'");
    const auto& cats = it->second;
    const auto pos = std::lower_bound(cats.begin(), cats.end(), category);
    if (pos != cats.end() && *pos == category) {
        return static_cast<int>(pos - cats.begin());
    }
    return static_cast<int>(cats.size());  // UNK
}

CategoryVocab build_vocab(const SimDataset& source_train, const SimDataset& target_train,
                          const Schema& schema) {
    CategoryVocab vocab;
    for (size_t j = 0; j < schema.size(); ++j) {
        const auto& f = schema.features[j];
        if (f.kind != FeatureKind::categorical) continue;
        std::set<int> cats;
        auto absorb = [&cats, &f](const SimDataset& ds) {
            const int idx = ds.feature_index(f.name);
            if (idx < 0) return;
            for (int c : ds.cat_cols[static_cast<size_t>(idx)]) cats.insert(c);
        };
        absorb(source_train);
        absorb(target_train);
        vocab.categories[f.name] = std::vector<int>(cats.begin(), cats.end());
    }
    return vocab;
}

// ----------------------------- standardizer -----------------------------

double Standardizer::transform(const std::string& feature, double x) const {
    const auto it = stats.find(feature);
    if (it == stats.end()) throw SchemaError("no standardizer stats for '" + feature + "'");
    return (x - it->second.mean) / it->second.sd;
}

namespace {

Standardizer::Moments column_moments(const std::vector<double>& col) {
    Standardizer::Moments m;
    m.mean = vec_mean(col);
    const double sd = vec_sd_pop(col);
    m.sd = sd > 0.0 ? sd : 1.0;
    return m;
}

}  // namespace

Standardizer fit_standardizer(const SimDataset& source_train, const Schema& schema) {
    if (source_train.rows() == 0) throw SchemaError("fit_standardizer: empty training data");
    Standardizer st;
    for (size_t j = 0; j < schema.size(); ++j) {
        const auto& f = schema.features[j];
        if (f.kind != FeatureKind::numeric) continue;
        const int idx = source_train.feature_index(f.name);
        if (idx < 0) continue;
        st.stats[f.name] = column_moments(source_train.numeric_cols[static_cast<size_t>(idx)]);
    }
    return st;
}

Standardizer fit_standardizer(const SimDataset& source_train, const SimDataset& target_train,
                              const Schema& schema) {
    Standardizer st = fit_standardizer(source_train, schema);
    // Target-only numeric features have no source rows; their scalers come
    // from target-train, fitted once alongside the source scalers.
    for (size_t j = 0; j < schema.size(); ++j) {
        const auto& f = schema.features[j];
        if (f.kind != FeatureKind::numeric || st.stats.count(f.name)) continue;
        const int idx = target_train.feature_index(f.name);
        if (idx < 0) continue;
        st.stats[f.name] = column_moments(target_train.numeric_cols[static_cast<size_t>(idx)]);
    }
    return st;
}

// ----------------------------- encoding -----------------------------

EncodedBatch encode(const SimDataset& data, const Schema& schema, const CategoryVocab& vocab,
                    const Standardizer& standardizer, const std::vector<uint8_t>& presence) {
    if (presence.size() != schema.size()) throw SchemaError("presence mask length mismatch");
    const Eigen::Index n = static_cast<Eigen::Index>(data.rows());
    const Eigen::Index L = static_cast<Eigen::Index>(schema.size());

    EncodedBatch b;
    b.numeric = Eigen::MatrixXd::Zero(n, L);
    b.cats.setZero(n, L);
    b.mask.setZero(n, L + 1);
    b.mask.col(0).setConstant(1);  // CLS always active
    b.targets = data.recovery;

    for (Eigen::Index j = 0; j < L; ++j) {
        const auto& f = schema.features[static_cast<size_t>(j)];
        if (!presence[static_cast<size_t>(j)]) continue;
        const int src = data.feature_index(f.name);
        if (src < 0) {
            throw SchemaError("encode: feature '" + f.name + "' marked present but absent from data");
        }
        b.mask.col(j + 1).setConstant(1);
        if (f.kind == FeatureKind::numeric) {
            const auto& col = data.numeric_cols[static_cast<size_t>(src)];
            for (Eigen::Index i = 0; i < n; ++i) {
                b.numeric(i, j) = standardizer.transform(f.name, col[static_cast<size_t>(i)]);
            }
        } else {
            const auto& col = data.cat_cols[static_cast<size_t>(src)];
            for (Eigen::Index i = 0; i < n; ++i) {
                b.cats(i, j) = vocab.encode(f.name, col[static_cast<size_t>(i)]);
            }
        }
    }
    return b;
}

void random_feature_masking(EncodedBatch& batch, double rate, uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("masking rate must lie in [0,1)");
    if (rate == 0.0) return;
    Rng rng(seed);
    for (Eigen::Index i = 0; i < batch.mask.rows(); ++i) {
        for (Eigen::Index j = 1; j < batch.mask.cols(); ++j) {
            if (!batch.mask(i, j)) continue;
            if (rng.uniform01() < rate) {
                batch.mask(i, j) = 0;
                batch.numeric(i, j - 1) = 0.0;
                batch.cats(i, j - 1) = 0;
            }
        }
    }
}

// ----------------------------- stratified split -----------------------------

std::pair<SimDataset, SimDataset> split_stratified(const SimDataset& data, double val_fraction,
                                                   uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw ConfigError("val_fraction must lie in (0,1)");
    }
    const size_t n = data.rows();
    if (n < 10) throw ConfigError("split_stratified needs at least 10 rows");

    // Value-based decile edges, deduplicated; degenerate targets collapse to
    // a single stratum.
    std::vector<double> edges;
    for (int k = 1; k < 10; ++k) {
        edges.push_back(vec_quantile(data.recovery, k / 10.0));
    }
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    auto stratum_of = [&edges](double r) {
        return static_cast<size_t>(std::upper_bound(edges.begin(), edges.end(), r) - edges.begin());
    };
    std::vector<std::vector<size_t>> strata(edges.size() + 1);
    for (size_t i = 0; i < n; ++i) strata[stratum_of(data.recovery[i])].push_back(i);
    strata.erase(std::remove_if(strata.begin(), strata.end(),
                                [](const auto& s) { return s.empty(); }),
                 strata.end());

    // Strata with fewer than 2 rows merge into their left neighbor.
    for (size_t k = 1; k < strata.size();) {
        if (strata[k].size() < 2) {
            strata[k - 1].insert(strata[k - 1].end(), strata[k].begin(), strata[k].end());
            strata.erase(strata.begin() + static_cast<std::ptrdiff_t>(k));
        } else {
            ++k;
        }
    }
    if (strata.size() > 1 && strata[0].size() < 2) {
        strata[1].insert(strata[1].end(), strata[0].begin(), strata[0].end());
        strata.erase(strata.begin());
    }

    Rng rng(seed);
    std::vector<size_t> train_idx, val_idx;
    for (size_t k = 0; k < strata.size(); ++k) {
        auto rows = strata[k];
        Rng sub = rng.derive(k);
        sub.shuffle(rows);
        const size_t n_val = static_cast<size_t>(
            std::llround(val_fraction * static_cast<double>(rows.size())));
        for (size_t i = 0; i < rows.size(); ++i) {
            (i < n_val ? val_idx : train_idx).push_back(rows[i]);
        }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    return {data.take_rows(train_idx), data.take_rows(val_idx)};
}

// ----------------------------- manifest -----------------------------

std::string manifest_json(const Schema& schema, const CategoryVocab& vocab,
                          const Standardizer& standardizer) {
    nlohmann::json j;
    j["schema"]["features"] = nlohmann::json::array();
    for (size_t i = 0; i < schema.size(); ++i) {
        j["schema"]["features"].push_back({{"name", schema.features[i].name},
                                           {"kind", to_string(schema.features[i].kind)},
                                           {"in_source", bool(schema.in_source[i])},
                                           {"in_target", bool(schema.in_target[i])}});
    }
    for (const auto& [name, cats] : vocab.categories) j["vocab"][name] = cats;
    for (const auto& [name, m] : standardizer.stats) {
        j["standardizer"][name] = {{"mean", m.mean}, {"sd", m.sd}};
    }
    return j.dump(2);
}

void parse_manifest_json(const std::string& text, Schema* schema, CategoryVocab* vocab,
                         Standardizer* standardizer) {
    const auto j = nlohmann::json::parse(text);
    if (schema) {
        schema->features.clear();
        schema->in_source.clear();
        schema->in_target.clear();
        for (const auto& f : j.at("schema").at("features")) {
            FeatureDecl d;
            d.name = f.at("name").get<std::string>();
            d.kind = f.at("kind").get<std::string>() == "categorical" ? FeatureKind::categorical
                                                                      : FeatureKind::numeric;
            schema->features.push_back(d);
            schema->in_source.push_back(f.at("in_source").get<bool>() ? 1 : 0);
            schema->in_target.push_back(f.at("in_target").get<bool>() ? 1 : 0);
        }
    }
    if (vocab) {
        vocab->categories.clear();
        if (j.contains("vocab")) {
            for (const auto& [name, cats] : j.at("vocab").items()) {
                vocab->categories[name] = cats.get<std::vector<int>>();
            }
        }
    }
    if (standardizer) {
        standardizer->stats.clear();
        if (j.contains("standardizer")) {
            for (const auto& [name, m] : j.at("standardizer").items()) {
                standardizer->stats[name] = {m.at("mean").get<double>(), m.at("sd").get<double>()};
            }
        }
    }
}

}  // namespace rrtl::schema
