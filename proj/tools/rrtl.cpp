// Command-line entry point: dataset generation, single training runs, the
// Monte Carlo sweep, report rendering, and a quick invariant selftest.

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "rrtl/config_io.hpp"
#include "rrtl/harness.hpp"

namespace fs = std::filesystem;
using namespace rrtl;

namespace {

datagen::ShiftSpec resolve_shift(const std::string& shift_path, const std::string& shift_type,
                                 double intensity) {
    if (!shift_path.empty()) {
        std::ifstream in(shift_path);
        if (!in) throw ConfigError("cannot open shift spec '" + shift_path + "'");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return datagen::shift_spec_from_json(text);
    }
    return datagen::default_shift(datagen::shift_type_from_string(shift_type), intensity);
}

int cmd_generate(const std::string& config_path, const std::string& shift_path,
                 const std::string& shift_type, double intensity, size_t n_source,
                 size_t n_target, uint64_t seed, const std::string& out_dir) {
    const auto gen = config_path.empty() ? datagen::default_generator_config()
                                         : datagen::load_generator_config(config_path);
    const auto shift = resolve_shift(shift_path, shift_type, intensity);
    fs::create_directories(out_dir);
    const auto [source, target] = datagen::generate_domain_pair(gen, shift, n_source, n_target, seed);
    save_dataset_csv(source, out_dir + "/source.csv");
    save_dataset_csv(target, out_dir + "/target.csv");
    std::printf("wrote %zu source rows and %zu target rows to %s\n", source.rows(), target.rows(),
                out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, uint64_t seed_override,
              bool has_seed) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open run config '" + config_path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
    }

    // the run config is a one-cell grid plus a model/scenario selection
    nlohmann::json gj;
    for (const char* key : {"generator", "model_config", "train", "transfer", "subset_features"}) {
        if (j.contains(key)) gj[key] = j.at(key);
    }
    gj["base_seed"] = has_seed ? seed_override : j.value("seed", 20240501ull);
    gj["n_source"] = j.value("n_source", 5000);
    gj["target_sizes"] = {j.value("n_target", 1000)};
    gj["replications"] = 1;
    gj["models"] = {j.value("model", "ft_mdn")};
    gj["scenarios"] = {j.value("scenario", "transfer")};
    gj["relations"] = {j.value("relation", "equal")};
    nlohmann::json shift;
    shift["shift_type"] = j.value("shift_type", "none");
    shift["intensities"] = {j.value("intensity", 0.0)};
    if (j.contains("perturbations")) shift["perturbations"] = j.at("perturbations");
    gj["shifts"] = {shift};
    const auto grid = harness::grid_from_json(gj.dump());

    const auto coord = harness::enumerate_cells(grid).at(0);
    const uint64_t cell_seed = coord.dataset_seed(grid.base_seed);

    fs::create_directories(out_dir);
    const auto summary = harness::run_grid(grid, out_dir + "/store", 1, true);
    if (summary.failed > 0) return 2;

    // training artifacts beyond the record: traces, checkpoint, density table
    const std::string model_name = grid.models.at(0);
    const auto scenario = grid.scenarios.at(0);
    auto pair = datagen::generate_domain_pair(
        grid.generator,
        grid.shifts[0].perturbations.empty()
            ? datagen::default_shift(grid.shifts[0].type, coord.intensity)
            : datagen::ShiftSpec{grid.shifts[0].type, coord.intensity,
                                 grid.shifts[0].perturbations},
        grid.n_source, coord.n_target, cell_seed);
    const auto subset = grid.resolved_subset();
    if (coord.relation == harness::SchemaRelation::source_subset_target) {
        pair.first = pair.first.project(subset);
    } else if (coord.relation == harness::SchemaRelation::target_subset_source) {
        pair.second = pair.second.project(subset);
    }
    const auto data =
        train::prepare_scenario_data(pair.first, pair.second, 0.2, hash64(cell_seed, "split"));
    {
        std::ofstream pm(out_dir + "/preprocess.json");
        pm << schema::manifest_json(data.schema, data.vocab, data.standardizer) << '\n';
    }

    const uint64_t model_seed = hash64(cell_seed, model_name);
    if (model_name == "ft_mdn" || model_name == "ft_reg") {
        const auto head =
            model_name == "ft_mdn" ? model::HeadKind::mdn : model::HeadKind::regression;
        model::FtModel<Real> trained(grid.model_config, data.schema, data.vocab, head, 0);
        const auto run =
            train::run_scenario_ft<Real>(scenario, data, grid.model_config, head, grid.train_opts,
                                         grid.transfer_opts, model_seed, out_dir, &trained);
        model::save_checkpoint(trained, out_dir + "/checkpoint");
        if (!run.val_mixtures.empty()) {
            const auto grid_pts = metrics::uniform_grid(0.0, grid.model_config.mu_max, 512);
            metrics::save_density_table(metrics::portfolio_density(run.val_mixtures, grid_pts),
                                        out_dir + "/density.tsv");
        }
        std::printf("%s/%s: r2 %.4f mae %.4f\n", model_name.c_str(), train::to_string(scenario),
                    run.metrics.r2, run.metrics.mae);
    } else if (model_name == "mlp") {
        const auto run = baseline::run_scenario_mlp<Real>(scenario, data, grid.mlp_hidden,
                                                          grid.train_opts, grid.transfer_opts,
                                                          model_seed, out_dir);
        std::printf("mlp/%s: r2 %.4f mae %.4f\n", train::to_string(scenario), run.metrics.r2,
                    run.metrics.mae);
    } else {
        throw ConfigError("train supports the built-in models (ft_mdn, ft_reg, mlp)");
    }
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir, int workers,
              bool resume) {
    const auto grid = config_path.empty() ? harness::GridSpec{} : harness::load_grid(config_path);
    const auto summary = harness::run_grid(grid, out_dir, workers, resume);
    std::printf("sweep: %d computed, %d skipped, %d failed\n", summary.computed, summary.skipped,
                summary.failed);
    const auto agg = harness::aggregate_store(out_dir);
    harness::write_aggregates_csv(agg, out_dir);
    return summary.failed > 0 ? 2 : 0;
}

int cmd_report(const std::string& store_dir, const std::string& kind, const std::string& out_dir) {
    harness::report(store_dir, harness::report_kind_from_string(kind), out_dir);
    std::printf("wrote %s report to %s\n", kind.c_str(), out_dir.c_str());
    return 0;
}

// ----------------------------- selftest -----------------------------

bool check(const char* name, bool ok) {
    std::printf("%s  %s\n", ok ? "PASS" : "FAIL", name);
    return ok;
}

int cmd_selftest(bool quick) {
    bool all = true;
    const size_t n_draws = quick ? 20000 : 100000;

    {
        bool ok = true;
        Rng rng(2024);
        for (int trial = 0; trial < (quick ? 2 : 5); ++trial) {
            datagen::RRMixtureConfig c;
            c.pi = 0.05 + 0.9 * rng.uniform01();
            c.mu_secured = 0.55 + 0.4 * rng.uniform01();
            c.sigma_secured = 0.03 + 0.3 * rng.uniform01();
            c.mu_unsecured = 0.05 + 0.4 * rng.uniform01();
            c.sigma_unsecured = 0.03 + 0.3 * rng.uniform01();
            auto sample = datagen::sample_recovery_rates(c, n_draws, 7000 + trial).recovery;
            std::sort(sample.begin(), sample.end());
            const double n = static_cast<double>(sample.size());
            double d = 0.0;
            for (size_t i = 0; i < sample.size();) {
                size_t jj = i;
                while (jj < sample.size() && sample[jj] == sample[i]) ++jj;
                const double cdf_right =
                    sample[i] >= 1.0 ? 1.0 : datagen::mixture_cdf(c, sample[i]);
                const double cdf_left =
                    sample[i] <= 0.0 ? 0.0 : datagen::mixture_cdf(c, sample[i]);
                d = std::max(d, std::fabs(static_cast<double>(jj) / n - cdf_right));
                d = std::max(d, std::fabs(static_cast<double>(i) / n - cdf_left));
                i = jj;
            }
            ok = ok && d < (quick ? 0.015 : 0.01);
        }
        all &= check("sampler KS distance against analytic CDF", ok);
    }

    const auto gen = datagen::default_generator_config();
    const auto ds = datagen::generate_dataset(gen, 24, 31, "source");
    const auto sch = schema::build_schema(ds.features, ds.features);
    const auto vocab = schema::build_vocab(ds, ds, sch);
    const auto standardizer = schema::fit_standardizer(ds, sch);
    auto batch = schema::encode(ds, sch, vocab, standardizer, sch.presence("source"));

    {
        model::ModelConfig cfg;
        cfg.token_dim = 16;
        cfg.depth = 2;
        cfg.heads = 2;
        cfg.dropout = 0.0;
        model::FtModel<float> net(cfg, sch, vocab, model::HeadKind::mdn, 404);
        bool ok = true;
        Rng rng(11);
        for (int t = 0; t < 20; ++t) {
            auto a = batch;
            for (Eigen::Index i = 0; i < a.mask.rows(); ++i) {
                for (Eigen::Index jc = 1; jc < a.mask.cols(); ++jc) {
                    if (rng.uniform01() < 0.4) a.mask(i, jc) = 0;
                }
            }
            auto b = a;
            for (Eigen::Index i = 0; i < b.mask.rows(); ++i) {
                for (Eigen::Index jc = 1; jc < b.mask.cols(); ++jc) {
                    if (!b.mask(i, jc)) b.numeric(i, jc - 1) = rng.normal() * 30.0;
                }
            }
            Eigen::MatrixXf za = net.forward(a);
            const auto& zb = net.forward(b);
            ok = ok && (za - zb).cwiseAbs().maxCoeff() < 1e-6f;
        }
        all &= check("mask invariance of predictions", ok);
    }

    {
        model::ModelConfig cfg;
        cfg.token_dim = 8;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.dropout = 0.0;
        model::FtModel<double> net(cfg, sch, vocab, model::HeadKind::mdn, 405);
        net.zero_grads();
        net.loss_and_grad(batch, nullptr);
        Rng pick(5);
        bool ok = true;
        int checked = 0;
        while (checked < (quick ? 8 : 20)) {
            auto* p = net.params()[pick.uniform_int(net.params().size())];
            const Eigen::Index i = static_cast<Eigen::Index>(pick.uniform_int(p->v.rows()));
            const Eigen::Index jc = static_cast<Eigen::Index>(pick.uniform_int(p->v.cols()));
            const double analytic = p->g(i, jc);
            const double orig = p->v(i, jc);
            p->v(i, jc) = orig + 1e-5;
            const double up = net.eval_loss(batch);
            p->v(i, jc) = orig - 1e-5;
            const double dn = net.eval_loss(batch);
            p->v(i, jc) = orig;
            const double fd = (up - dn) / 2e-5;
            if (std::fabs(analytic) < 1e-10 && std::fabs(fd) < 1e-10) continue;
            ok = ok &&
                 std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), 1e-8}) <
                     1e-4;
            ++checked;
        }
        all &= check("analytic gradients match finite differences", ok);
    }

    {
        model::ModelConfig cfg;
        cfg.token_dim = 16;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.dropout = 0.0;
        model::FtModel<float> net(cfg, sch, vocab, model::HeadKind::mdn, 406);
        const auto mixtures = net.predict_mixtures(batch);
        const auto grid_pts = metrics::uniform_grid(-5.0, 6.0, 40001);
        bool ok = true;
        for (const auto& mix : mixtures) {
            double integral = 0.0;
            for (size_t i = 1; i < grid_pts.size(); ++i) {
                integral += 0.5 *
                            (model::mixture_pdf(mix, grid_pts[i]) +
                             model::mixture_pdf(mix, grid_pts[i - 1])) *
                            (grid_pts[i] - grid_pts[i - 1]);
            }
            ok = ok && std::fabs(integral - 1.0) < 1e-4;
        }
        all &= check("mixture densities integrate to one", ok);
    }

    {
        auto twin = ds;
        twin.domain = "target";
        const auto report = drift::compute_drift(ds, twin, sch);
        bool ok = report.feature_shift == 0.0 && report.label_shift == 0.0;
        auto low = gen;
        low.recovery.pi = 0.2;
        for (uint64_t s = 0; s < (quick ? 3u : 10u); ++s) {
            const auto a = datagen::sample_recovery_rates(gen.recovery, 2000, 100 + s).recovery;
            const auto b = datagen::sample_recovery_rates(gen.recovery, 2000, 200 + s).recovery;
            const auto c = datagen::sample_recovery_rates(low.recovery, 2000, 300 + s).recovery;
            ok = ok && drift::label_shift(a, b) < drift::label_shift(a, c);
        }
        all &= check("drift scores: zero at identity, ordered under label shift", ok);
    }

    std::printf(all ? "selftest: all checks passed\n" : "selftest: FAILURES\n");
    return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Recovery-rate transfer learning workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", store_dir, kind = "violin";
    std::string shift_path, shift_type = "none";
    double intensity = 0.0;
    size_t n_source = 5000, n_target = 1000;
    uint64_t seed = 20240501;
    int workers = 1;
    bool resume = true;
    bool quick = false;

    auto* generate = app.add_subcommand("generate", "Emit paired synthetic datasets");
    generate->add_option("--config", config_path, "generator config JSON");
    generate->add_option("--shift", shift_path, "shift spec JSON");
    generate->add_option("--shift-type", shift_type, "named default shift type");
    generate->add_option("--intensity", intensity, "shift intensity");
    generate->add_option("--n-source", n_source, "source rows");
    generate->add_option("--n-target", n_target, "target rows");
    generate->add_option("--seed", seed, "seed");
    generate->add_option("--out", out_dir, "output directory");

    auto* train_cmd = app.add_subcommand("train", "Run a single training scenario");
    train_cmd->add_option("--config", config_path, "run config JSON")->required();
    train_cmd->add_option("--out", out_dir, "output directory");
    bool seed_given = false;
    auto* seed_opt = train_cmd->add_option("--seed", seed, "seed override");
    train_cmd->callback([&]() { seed_given = seed_opt->count() > 0; });

    auto* sweep = app.add_subcommand("sweep", "Run the Monte Carlo grid");
    sweep->add_option("--config", config_path, "grid config JSON (defaults when omitted)");
    sweep->add_option("--out", out_dir, "result store directory");
    sweep->add_option("--workers", workers, "cells processed in parallel");
    sweep->add_flag("--resume,!--no-resume", resume, "skip completed records (default on)");

    auto* rep = app.add_subcommand("report", "Render figures and tables from a store");
    rep->add_option("--store", store_dir, "result store directory")->required();
    rep->add_option("--kind", kind, "violin | shift_curve | sample_curve | density")->required();
    rep->add_option("--out", out_dir, "output directory");

    auto* self = app.add_subcommand("selftest", "Run the built-in invariant checks");
    self->add_flag("--quick", quick, "smaller sample sizes");

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) {
            return cmd_generate(config_path, shift_path, shift_type, intensity, n_source, n_target,
                                seed, out_dir);
        }
        if (train_cmd->parsed()) return cmd_train(config_path, out_dir, seed, seed_given);
        if (sweep->parsed()) return cmd_sweep(config_path, out_dir, workers, resume);
        if (rep->parsed()) return cmd_report(store_dir, kind, out_dir);
        if (self->parsed()) return cmd_selftest(quick);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
