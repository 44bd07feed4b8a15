#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rrtl/common.hpp"

namespace rrtl::model {
struct MixtureOutput;
}

namespace rrtl::metrics {

// 1 - SS_res / SS_tot against the evaluation-set mean. Throws MetricError
// when var(y) is zero.
double r2(const std::vector<double>& y, const std::vector<double>& yhat);

double mae(const std::vector<double>& y, const std::vector<double>& yhat);

struct MetricRecord {
    double r2 = 0.0;
    double mae = 0.0;
    std::optional<double> nll;  // MDN models only
    size_t n_eval = 0;
};

struct PortfolioDensity {
    std::vector<double> grid;
    std::vector<double> density;
    size_t m = 0;  // pooled loan count
};

// Mixture-of-mixtures: pointwise average of the per-loan densities on `grid`.
PortfolioDensity portfolio_density(const std::vector<model::MixtureOutput>& outputs,
                                   const std::vector<double>& grid);

// Uniform grid with `points` entries covering [lo, hi].
std::vector<double> uniform_grid(double lo, double hi, size_t points = 512);

// Peak-count diagnostic: grid local maxima above both neighbors and above
// `rel_threshold` of the global maximum.
int count_modes(const std::vector<double>& density, double rel_threshold = 0.1);

// Two-column (r, density) text export.
void save_density_table(const PortfolioDensity& pd, const std::string& path);

}  // namespace rrtl::metrics
