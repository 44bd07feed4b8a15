#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rrtl/dataset.hpp"

namespace rrtl::schema {

// Global feature universe shared by pretraining and fine-tuning: source
// features first (in source order), then target-only features (in target
// order). The ordering is fixed; domains differ only through presence masks.
struct Schema {
    std::vector<FeatureDecl> features;   // length L
    std::vector<uint8_t> in_source;      // length L
    std::vector<uint8_t> in_target;      // length L

    size_t size() const { return features.size(); }

    std::vector<std::string> shared() const;
    std::vector<std::string> source_only() const;
    std::vector<std::string> target_only() const;

    std::vector<uint8_t> presence(const std::string& domain) const;  // "source"/"target"
    std::vector<uint8_t> shared_presence() const;

    int index_of(const std::string& name) const;
    std::string id() const;
};

Schema build_schema(const std::vector<FeatureDecl>& source_features,
                    const std::vector<FeatureDecl>& target_features);

// Schema over a single feature list (both presence masks full); convenient
// for in-domain training.
Schema single_domain_schema(const std::vector<FeatureDecl>& features);

// Per-feature category list built from the union of the two training splits,
// sorted ascending, with a reserved UNK index appended last. Categories seen
// only at validation/test time encode to UNK.
struct CategoryVocab {
    std::map<std::string, std::vector<int>> categories;

    int size(const std::string& feature) const;                  // K_j incl. UNK
    int unk_index(const std::string& feature) const;
    int encode(const std::string& feature, int category) const;  // never throws for unseen
};

CategoryVocab build_vocab(const SimDataset& source_train, const SimDataset& target_train,
                          const Schema& schema);

// Per-feature standardization statistics. Shared and source-only numeric
// features use source-train moments; target-only features (absent from the
// source by construction) fall back to target-train moments. Zero-variance
// columns get sd replaced by 1.
struct Standardizer {
    struct Moments {
        double mean = 0.0;
        double sd = 1.0;
    };
    std::map<std::string, Moments> stats;

    double transform(const std::string& feature, double x) const;
};

Standardizer fit_standardizer(const SimDataset& source_train, const Schema& schema);
Standardizer fit_standardizer(const SimDataset& source_train, const SimDataset& target_train,
                              const Schema& schema);

// Model-ready batch aligned with the global universe. Masked cells carry a
// zero sentinel that the tokenizer never reads. mask has L+1 columns; column
// 0 is the always-active CLS slot.
struct EncodedBatch {
    Eigen::MatrixXd numeric;                                        // n x L
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> cats;        // n x L
    Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> mask;    // n x (L+1)
    std::vector<double> targets;

    Eigen::Index rows() const { return numeric.rows(); }
};

EncodedBatch encode(const SimDataset& data, const Schema& schema, const CategoryVocab& vocab,
                    const Standardizer& standardizer, const std::vector<uint8_t>& presence);

// Independently masks each active non-CLS position with probability `rate`
// (mask bit cleared, sentinel written). rate 0 returns the batch unchanged.
void random_feature_masking(EncodedBatch& batch, double rate, uint64_t seed);

// Stratified train/validation split. Strata are value-based deciles of R
// (duplicate quantile edges merged, strata with fewer than 2 rows collapsed
// into their left neighbor).
std::pair<SimDataset, SimDataset> split_stratified(const SimDataset& data, double val_fraction,
                                                   uint64_t seed);

// Manifest serialization so checkpoints are self-describing.
std::string manifest_json(const Schema& schema, const CategoryVocab& vocab,
                          const Standardizer& standardizer);
void parse_manifest_json(const std::string& text, Schema* schema, CategoryVocab* vocab,
                         Standardizer* standardizer);

}  // namespace rrtl::schema
