#pragma once

#include <map>
#include <string>
#include <vector>

#include "rrtl/dataset.hpp"
#include "rrtl/schema.hpp"

namespace rrtl::drift {

inline constexpr int kBins = 30;
inline constexpr double kSmoothingEps = 1e-8;

// Equal-width histograms over a shared range, epsilon-smoothed and
// renormalized so every bin carries positive mass.
struct HistogramPair {
    std::vector<double> edges;  // kBins + 1 entries
    std::vector<double> p;      // source probabilities
    std::vector<double> q;      // target probabilities
};

HistogramPair build_histogram_pair(const std::vector<double>& source,
                                   const std::vector<double>& target,
                                   double lo, double hi, int bins = kBins);

// Directed KL divergence sum(p * log(p/q)); inputs must be same-length
// strictly positive probability vectors.
double kl_divergence(const std::vector<double>& p, const std::vector<double>& q);

struct DriftReport {
    std::map<std::string, double> feature_kl;   // per shared feature
    std::map<std::string, double> weights;      // |corr_s(X_j, R)|
    double feature_shift = 0.0;
    double label_shift = 0.0;
    bool unweighted_fallback = false;           // set when sum of weights is 0
};

// Correlation-weighted mean of per-feature directed KL over shared features.
// Weights are computed on the source only. Throws DiagnosticError when the
// pair has no shared features.
DriftReport feature_shift(const SimDataset& source, const SimDataset& target,
                          const schema::Schema& schema);

// Directed KL between the recovery histograms over [0,1].
double label_shift(const std::vector<double>& source_r, const std::vector<double>& target_r);

// feature_shift + label_shift in one report.
DriftReport compute_drift(const SimDataset& source, const SimDataset& target,
                          const schema::Schema& schema);

}  // namespace rrtl::drift
