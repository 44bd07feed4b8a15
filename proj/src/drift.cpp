#include "rrtl/drift.hpp"

#include <algorithm>
#include <cmath>

namespace rrtl::drift {

namespace {

std::vector<double> smoothed_probs(const std::vector<double>& counts) {
    double total = 0.0;
    std::vector<double> out(counts.size());
    for (size_t i = 0; i < counts.size(); ++i) {
        out[i] = counts[i] + kSmoothingEps;
        total += out[i];
    }
    for (auto& v : out) v /= total;
    return out;
}

std::vector<double> bin_counts(const std::vector<double>& values, double lo, double hi, int bins) {
    std::vector<double> counts(static_cast<size_t>(bins), 0.0);
    const double width = hi - lo;
    for (double v : values) {
        int b = width > 0.0 ? static_cast<int>((v - lo) / width * bins) : 0;
        b = std::clamp(b, 0, bins - 1);
        counts[static_cast<size_t>(b)] += 1.0;
    }
    return counts;
}

}  // namespace

HistogramPair build_histogram_pair(const std::vector<double>& source,
                                   const std::vector<double>& target,
                                   double lo, double hi, int bins) {
    HistogramPair h;
    h.edges.resize(static_cast<size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i) {
        h.edges[static_cast<size_t>(i)] = lo + (hi - lo) * i / bins;
    }
    h.p = smoothed_probs(bin_counts(source, lo, hi, bins));
    h.q = smoothed_probs(bin_counts(target, lo, hi, bins));
    return h;
}

double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw DiagnosticError("kl_divergence: length mismatch");
    double kl = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (!(p[i] > 0.0) || !(q[i] > 0.0)) {
            throw DiagnosticError("kl_divergence: probabilities must be strictly positive");
        }
        kl += p[i] * std::log(p[i] / q[i]);
    }
    return std::max(kl, 0.0);
}

double label_shift(const std::vector<double>& source_r, const std::vector<double>& target_r) {
    if (source_r.empty() || target_r.empty()) throw DiagnosticError("label_shift: empty input");
    const auto h = build_histogram_pair(source_r, target_r, 0.0, 1.0);
    return kl_divergence(h.p, h.q);
}

namespace {

// Weight for a categorical feature: largest |corr| among its one-hot
// indicator columns against R, on source rows.
double categorical_weight(const std::vector<int>& col, const std::vector<double>& r) {
    std::vector<int> cats(col);
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
    double best = 0.0;
    std::vector<double> indicator(col.size());
    for (int c : cats) {
        for (size_t i = 0; i < col.size(); ++i) indicator[i] = col[i] == c ? 1.0 : 0.0;
        best = std::max(best, std::fabs(pearson_corr(indicator, r)));
    }
    return best;
}

// Category frequencies over the union of observed categories, in sorted
// category order, epsilon-smoothed.
std::pair<std::vector<double>, std::vector<double>> categorical_freqs(
    const std::vector<int>& src, const std::vector<int>& tgt) {
    std::vector<int> cats;
    cats.insert(cats.end(), src.begin(), src.end());
    cats.insert(cats.end(), tgt.begin(), tgt.end());
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());

    auto freq = [&cats](const std::vector<int>& col) {
        std::vector<double> counts(cats.size(), 0.0);
        for (int v : col) {
            const auto it = std::lower_bound(cats.begin(), cats.end(), v);
            counts[static_cast<size_t>(it - cats.begin())] += 1.0;
        }
        return smoothed_probs(counts);
    };
    return {freq(src), freq(tgt)};
}

}  // namespace

DriftReport feature_shift(const SimDataset& source, const SimDataset& target,
                          const schema::Schema& schema) {
    DriftReport report;
    const auto shared = schema.shared();
    if (shared.empty()) throw DiagnosticError("feature_shift: no shared features");

    for (const auto& name : shared) {
        const int js = source.feature_index(name);
        const int jt = target.feature_index(name);
        if (js < 0 || jt < 0) throw DiagnosticError("feature_shift: shared feature missing from data");
        const auto kind = source.features[static_cast<size_t>(js)].kind;

        double kl = 0.0;
        double weight = 0.0;
        if (kind == FeatureKind::numeric) {
            const auto& src = source.numeric_cols[static_cast<size_t>(js)];
            const auto& tgt = target.numeric_cols[static_cast<size_t>(jt)];
            double lo = src[0], hi = src[0];
            for (double v : src) { lo = std::min(lo, v); hi = std::max(hi, v); }
            for (double v : tgt) { lo = std::min(lo, v); hi = std::max(hi, v); }
            if (hi <= lo) hi = lo + 1.0;  // constant feature in both domains
            const auto h = build_histogram_pair(src, tgt, lo, hi);
            kl = kl_divergence(h.p, h.q);
            weight = std::fabs(pearson_corr(src, source.recovery));
        } else {
            const auto& src = source.cat_cols[static_cast<size_t>(js)];
            const auto& tgt = target.cat_cols[static_cast<size_t>(jt)];
            const auto [p, q] = categorical_freqs(src, tgt);
            kl = kl_divergence(p, q);
            weight = categorical_weight(src, source.recovery);
        }
        report.feature_kl[name] = kl;
        report.weights[name] = weight;
    }

    double wsum = 0.0, acc = 0.0;
    for (const auto& [name, kl] : report.feature_kl) {
        wsum += report.weights[name];
        acc += report.weights[name] * kl;
    }
    if (wsum > 0.0) {
        report.feature_shift = acc / wsum;
    } else {
        // all weights zero: fall back to the unweighted mean and record it
        double mean = 0.0;
        for (const auto& [name, kl] : report.feature_kl) mean += kl;
        report.feature_shift = mean / static_cast<double>(report.feature_kl.size());
        report.unweighted_fallback = true;
    }
    return report;
}

DriftReport compute_drift(const SimDataset& source, const SimDataset& target,
                          const schema::Schema& schema) {
    DriftReport report = feature_shift(source, target, schema);
    report.label_shift = label_shift(source.recovery, target.recovery);
    return report;
}

}  // namespace rrtl::drift
