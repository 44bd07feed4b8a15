#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rrtl/common.hpp"

namespace rrtl {

enum class FeatureKind { numeric, categorical };

inline const char* to_string(FeatureKind k) {
    return k == FeatureKind::numeric ? "numeric" : "categorical";
}

struct FeatureDecl {
    std::string name;
    FeatureKind kind = FeatureKind::numeric;

    bool operator==(const FeatureDecl&) const = default;
};

// One simulated domain sample: feature columns plus recovery rate and the
// secured component indicator. Columns are aligned with `features`; numeric
// features fill `numeric_cols[j]`, categorical ones `cat_cols[j]` (the unused
// side stays empty).
struct SimDataset {
    std::vector<FeatureDecl> features;
    std::vector<std::vector<double>> numeric_cols;
    std::vector<std::vector<int>> cat_cols;
    std::vector<double> recovery;
    std::vector<uint8_t> secured;
    std::string schema_id;
    std::string domain;  // "source" or "target"
    uint64_t seed = 0;

    size_t rows() const { return recovery.size(); }

    int feature_index(const std::string& name) const {
        for (size_t j = 0; j < features.size(); ++j) {
            if (features[j].name == name) return static_cast<int>(j);
        }
        return -1;
    }

    const std::vector<double>& numeric_column(const std::string& name) const {
        const int j = feature_index(name);
        if (j < 0 || features[j].kind != FeatureKind::numeric) {
            throw SchemaError("no numeric column named '" + name + "'");
        }
        return numeric_cols[static_cast<size_t>(j)];
    }

    const std::vector<int>& cat_column(const std::string& name) const {
        const int j = feature_index(name);
        if (j < 0 || features[j].kind != FeatureKind::categorical) {
            throw SchemaError("no categorical column named '" + name + "'");
        }
        return cat_cols[static_cast<size_t>(j)];
    }

    // Dataset restricted to a subset of features (row content unchanged).
    SimDataset project(const std::vector<std::string>& names) const;

    // Dataset restricted to a subset of rows.
    SimDataset take_rows(const std::vector<size_t>& idx) const;
};

// CSV serialization: one column per feature, then `recovery_rate` and
// `secured`. A small JSON sidecar (<path>.meta.json) carries the generation
// seed, schema id and domain tag.
void save_dataset_csv(const SimDataset& ds, const std::string& path);
SimDataset load_dataset_csv(const std::string& path);

}  // namespace rrtl
