#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rrtl/metrics.hpp"
#include "rrtl/model.hpp"
#include "rrtl/rng.hpp"

using namespace rrtl;
using namespace rrtl::metrics;

TEST_CASE("r2: perfect, mean, arithmetic, invariance, undefined") {
    std::vector<double> y{0.1, 0.4, 0.9, 0.3};
    CHECK(r2(y, y) == doctest::Approx(1.0));

    const double mean = vec_mean(y);
    CHECK(r2(y, std::vector<double>(4, mean)) == doctest::Approx(0.0).epsilon(1e-12));

    CHECK(r2({0.0, 1.0}, {1.0, 0.0}) == doctest::Approx(-3.0).epsilon(1e-12));

    // invariant under a shared positive affine map
    Rng rng(3);
    std::vector<double> yy(50), hh(50), y2(50), h2(50);
    for (size_t i = 0; i < 50; ++i) {
        yy[i] = rng.normal();
        hh[i] = yy[i] + 0.3 * rng.normal();
        y2[i] = 2.5 * yy[i] - 1.0;
        h2[i] = 2.5 * hh[i] - 1.0;
    }
    CHECK(r2(yy, hh) == doctest::Approx(r2(y2, h2)).epsilon(1e-10));

    CHECK_THROWS_AS(r2({1.0, 1.0}, {0.5, 0.6}), MetricError);
}

TEST_CASE("mae: trivial values and summation oracle") {
    CHECK(mae({0.3, 0.7}, {0.3, 0.7}) == doctest::Approx(0.0));
    CHECK(mae({0.0, 1.0}, {0.5, 0.5}) == doctest::Approx(0.5));

    Rng rng(5);
    std::vector<double> y(100), h(100);
    double oracle = 0.0;
    for (size_t i = 0; i < 100; ++i) {
        y[i] = rng.normal();
        h[i] = rng.normal();
        oracle += std::fabs(y[i] - h[i]);
    }
    oracle /= 100.0;
    CHECK(mae(y, h) == doctest::Approx(oracle).epsilon(1e-12));
}

namespace {

model::MixtureOutput make_out(std::vector<double> a, std::vector<double> m, std::vector<double> s) {
    model::MixtureOutput o;
    o.alpha = std::move(a);
    o.mu = std::move(m);
    o.sigma = std::move(s);
    return o;
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
    double acc = 0.0;
    for (size_t i = 1; i < x.size(); ++i) acc += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
    return acc;
}

}  // namespace

TEST_CASE("portfolio_density: single loan, idempotent averaging, normalization") {
    const auto out = make_out({0.6, 0.4}, {0.2, 0.8}, {0.05, 0.1});
    const auto grid = uniform_grid(0.0, 1.0, 512);

    const auto one = portfolio_density({out}, grid);
    for (size_t i = 0; i < grid.size(); ++i) {
        CHECK(one.density[i] == doctest::Approx(model::mixture_pdf(out, grid[i])).epsilon(1e-12));
    }

    const auto two = portfolio_density({out, out}, grid);
    for (size_t i = 0; i < grid.size(); ++i) {
        CHECK(two.density[i] == doctest::Approx(one.density[i]).epsilon(1e-12));
    }

    // wide-grid integral reaches 1 for a pool of random valid outputs
    Rng rng(11);
    std::vector<model::MixtureOutput> pool;
    for (int i = 0; i < 20; ++i) {
        const double a = rng.uniform01();
        pool.push_back(make_out({a, 1.0 - a}, {rng.uniform01(), rng.uniform01()},
                                {0.02 + rng.uniform01() * 0.2, 0.02 + rng.uniform01() * 0.2}));
    }
    const auto wide = uniform_grid(-5.0, 6.0, 100000);
    const auto pd = portfolio_density(pool, wide);
    CHECK(trapezoid(pd.grid, pd.density) == doctest::Approx(1.0).epsilon(1e-4));

    CHECK_THROWS_AS(portfolio_density(pool, {}), MetricError);
}

TEST_CASE("portfolio_density: permutation invariance and weight linearity") {
    Rng rng(13);
    std::vector<model::MixtureOutput> pool;
    for (int i = 0; i < 7; ++i) {
        const double a = rng.uniform01();
        pool.push_back(make_out({a, 1.0 - a}, {rng.uniform01(), rng.uniform01()}, {0.1, 0.15}));
    }
    const auto grid = uniform_grid(0.0, 1.0, 101);
    const auto fwd = portfolio_density(pool, grid);
    std::vector<model::MixtureOutput> rev(pool.rbegin(), pool.rend());
    const auto bwd = portfolio_density(rev, grid);
    for (size_t i = 0; i < grid.size(); ++i) {
        CHECK(fwd.density[i] == doctest::Approx(bwd.density[i]).epsilon(1e-12));
    }
}

TEST_CASE("mixture helpers: mean, pdf peak, nll values") {
    CHECK(model::mixture_mean(make_out({1.0, 0.0}, {0.3, 0.9}, {0.1, 0.1})) == doctest::Approx(0.3));
    CHECK(model::mixture_mean(make_out({0.5, 0.5}, {0.2, 0.8}, {0.1, 0.1})) == doctest::Approx(0.5));
    CHECK(model::mixture_mean(make_out({0.7, 0.3}, {0.85, 0.15}, {0.1, 0.1})) ==
          doctest::Approx(0.64));

    CHECK(model::mixture_pdf(make_out({1.0}, {0.5}, {0.1}), 0.5) ==
          doctest::Approx(3.989422804).epsilon(1e-8));

    // symmetric two-component output is symmetric about the midpoint
    const auto sym = make_out({0.5, 0.5}, {0.3, 0.7}, {0.08, 0.08});
    for (double d : {0.0, 0.05, 0.1, 0.2}) {
        CHECK(model::mixture_pdf(sym, 0.5 - d) ==
              doctest::Approx(model::mixture_pdf(sym, 0.5 + d)).epsilon(1e-10));
    }

    CHECK(model::mdn_nll(make_out({1.0}, {0.4}, {1.0}), 0.4) ==
          doctest::Approx(0.5 * std::log(2.0 * M_PI)).epsilon(1e-10));
    // equal-component mixture collapses to the single-component value
    const double collapsed = model::mdn_nll(make_out({0.5, 0.5}, {0.4, 0.4}, {0.2, 0.2}), 0.55);
    const double single = model::mdn_nll(make_out({1.0}, {0.4}, {0.2}), 0.55);
    CHECK(collapsed == doctest::Approx(single).epsilon(1e-10));
}

TEST_CASE("count_modes: bimodal pool and threshold behavior") {
    const auto grid = uniform_grid(0.0, 1.0, 512);
    const auto bimodal = portfolio_density(
        {make_out({0.6, 0.4}, {0.2, 0.85}, {0.07, 0.06})}, grid);
    CHECK(count_modes(bimodal.density) == 2);

    const auto unimodal = portfolio_density({make_out({1.0}, {0.5}, {0.1})}, grid);
    CHECK(count_modes(unimodal.density) == 1);

    // a bump below 10% of the peak does not count
    const auto faint = portfolio_density(
        {make_out({0.97, 0.03}, {0.3, 0.9}, {0.03, 0.03})}, grid);
    CHECK(count_modes(faint.density) == 1);
}

TEST_CASE("density table export writes two columns") {
    const auto grid = uniform_grid(0.0, 1.0, 16);
    const auto pd = portfolio_density({make_out({1.0}, {0.5}, {0.1})}, grid);
    const std::string path = "/tmp/rrtl_density_test.tsv";
    save_density_table(pd, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "r\tdensity");
    int lines = 0;
    std::string line;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 16);
}
