#include "rrtl/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "rrtl/model.hpp"

namespace rrtl::metrics {

double r2(const std::vector<double>& y, const std::vector<double>& yhat) {
    if (y.size() != yhat.size() || y.size() < 2) {
        throw MetricError("r2: vectors must have equal length >= 2");
    }
    const double mean = vec_mean(y);
    double ss_tot = 0.0, ss_res = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        ss_tot += (y[i] - mean) * (y[i] - mean);
        ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    }
    if (ss_tot <= 0.0) throw MetricError("r2 undefined: target variance is zero");
    return 1.0 - ss_res / ss_tot;
}

double mae(const std::vector<double>& y, const std::vector<double>& yhat) {
    if (y.size() != yhat.size() || y.empty()) {
        throw MetricError("mae: vectors must have equal nonzero length");
    }
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += std::fabs(y[i] - yhat[i]);
    return acc / static_cast<double>(y.size());
}

std::vector<double> uniform_grid(double lo, double hi, size_t points) {
    if (points < 2) throw MetricError("grid needs at least 2 points");
    std::vector<double> g(points);
    for (size_t i = 0; i < points; ++i) {
        g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    }
    return g;
}

PortfolioDensity portfolio_density(const std::vector<model::MixtureOutput>& outputs,
                                   const std::vector<double>& grid) {
    if (grid.empty()) throw MetricError("portfolio_density: empty grid");
    if (outputs.empty()) throw MetricError("portfolio_density: no mixture outputs");
    PortfolioDensity pd;
    pd.grid = grid;
    pd.m = outputs.size();
    pd.density.assign(grid.size(), 0.0);
    const double inv_m = 1.0 / static_cast<double>(outputs.size());
    for (const auto& out : outputs) {
        for (size_t i = 0; i < grid.size(); ++i) {
            pd.density[i] += model::mixture_pdf(out, grid[i]) * inv_m;
        }
    }
    return pd;
}

int count_modes(const std::vector<double>& density, double rel_threshold) {
    if (density.size() < 3) return 0;
    double peak = 0.0;
    for (double v : density) peak = std::max(peak, v);
    const double floor = rel_threshold * peak;
    int modes = 0;
    // runs of equal values collapse to a single candidate; boundary runs are
    // excluded (a mode must exceed both outside neighbors)
    for (size_t a = 0; a < density.size();) {
        size_t b = a;
        while (b + 1 < density.size() && density[b + 1] == density[a]) ++b;
        if (a > 0 && b + 1 < density.size() && density[a] > density[a - 1] &&
            density[a] > density[b + 1] && density[a] > floor) {
            ++modes;
        }
        a = b + 1;
    }
    return modes;
}

void save_density_table(const PortfolioDensity& pd, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "r\tdensity\n";
    char buf[64];
    for (size_t i = 0; i < pd.grid.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.10g\t%.10g\n", pd.grid[i], pd.density[i]);
        out << buf;
    }
}

}  // namespace rrtl::metrics
