#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "rrtl/harness.hpp"

namespace fs = std::filesystem;
using namespace rrtl;
using namespace rrtl::harness;

namespace {

GridSpec tiny_grid() {
    GridSpec g;
    g.base_seed = 777;
    g.n_source = 120;
    g.target_sizes = {60};
    g.replications = 1;
    g.models = {"ft_mdn"};
    g.scenarios = {train::Scenario::target_baseline, train::Scenario::transfer};
    g.relations = {SchemaRelation::equal};
    g.shifts = {{datagen::ShiftType::covariate, {0.0, 1.0}, {}}};
    g.model_config.token_dim = 8;
    g.model_config.depth = 1;
    g.model_config.heads = 2;
    g.model_config.dropout = 0.0;
    g.train_opts.max_epochs = 2;
    g.train_opts.batch_size = 32;
    g.transfer_opts.warm_epochs = 1;
    g.store_density = false;
    return g;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Canonical store content: records plus index plus grid (timings are
// diagnostics and excluded by design).
std::map<std::string, std::string> store_bytes(const std::string& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir + "/records")) {
        out["records/" + e.path().filename().string()] = slurp(e.path().string());
    }
    out["index.json"] = slurp(dir + "/index.json");
    out["grid.json"] = slurp(dir + "/grid.json");
    return out;
}

void wipe(const std::string& dir) {
    fs::remove_all(dir);
}

}  // namespace

TEST_CASE("cell enumeration and record counting") {
    GridSpec g = tiny_grid();
    g.replications = 2;
    g.shifts = {{datagen::ShiftType::label, {0.5}, {}}};
    g.models = {"ft_mdn", "mlp"};
    const auto cells = enumerate_cells(g);
    CHECK(cells.size() == 2);  // 1 shift x 1 intensity x 1 relation x 1 size x 2 reps

    const std::string dir = "/tmp/rrtl_store_count";
    wipe(dir);
    const auto summary = run_grid(g, dir);
    CHECK(summary.computed == 2 * 2 * 2);  // reps x models x scenarios
    CHECK(summary.failed == 0);
    CHECK(load_records(dir).size() == 8);
}

TEST_CASE("resuming a complete store does nothing and keeps bytes identical") {
    const GridSpec g = tiny_grid();
    const std::string dir = "/tmp/rrtl_store_resume";
    wipe(dir);
    const auto first = run_grid(g, dir);
    CHECK(first.computed > 0);
    const auto before = store_bytes(dir);

    const auto second = run_grid(g, dir);
    CHECK(second.computed == 0);
    CHECK(second.skipped == first.computed + first.skipped);
    CHECK(store_bytes(dir) == before);
}

TEST_CASE("a store refuses a different grid") {
    const GridSpec g = tiny_grid();
    const std::string dir = "/tmp/rrtl_store_mismatch";
    wipe(dir);
    run_grid(g, dir);
    GridSpec other = g;
    other.base_seed = 778;
    CHECK_THROWS_AS(run_grid(other, dir), ConfigError);
}

TEST_CASE("fused cell execution equals the standalone scenario runs") {
    const GridSpec g = tiny_grid();
    const std::string dir = "/tmp/rrtl_store_fused";
    wipe(dir);
    run_grid(g, dir);

    for (const auto& rec : load_records(dir)) {
        REQUIRE(!rec.failed);
        const uint64_t cell_seed = rec.cell.dataset_seed(g.base_seed);
        auto pair = datagen::generate_domain_pair(
            g.generator, datagen::default_shift(rec.cell.shift_type, rec.cell.intensity),
            g.n_source, rec.cell.n_target, cell_seed);
        const auto data = train::prepare_scenario_data(pair.first, pair.second, 0.2,
                                                       hash64(cell_seed, "split"));
        const auto run = train::run_scenario_ft<Real>(
            train::scenario_from_string(rec.scenario), data, g.model_config, model::HeadKind::mdn,
            g.train_opts, g.transfer_opts, hash64(cell_seed, "ft_mdn"));
        CHECK(rec.metrics.r2 == run.metrics.r2);
        CHECK(rec.metrics.mae == run.metrics.mae);
    }
}

TEST_CASE("kill-and-resume reproduces the uninterrupted store byte for byte") {
    GridSpec g = tiny_grid();
    g.replications = 2;
    g.n_source = 700;
    g.train_opts.max_epochs = 8;
    g.model_config.token_dim = 16;

    const std::string grid_path = "/tmp/rrtl_kill_grid.json";
    {
        std::ofstream out(grid_path);
        out << grid_to_json(g) << '\n';
    }
    const std::string ref_dir = "/tmp/rrtl_store_ref";
    const std::string kill_dir = "/tmp/rrtl_store_kill";
    wipe(ref_dir);
    wipe(kill_dir);

    const std::string cli = RRTL_CLI_PATH;
    REQUIRE(std::system((cli + " sweep --config " + grid_path + " --out " + ref_dir +
                         " >/dev/null 2>&1").c_str()) == 0);

    // SIGKILL partway through, then resume to completion
    std::system(("timeout -s KILL 2 " + cli + " sweep --config " + grid_path + " --out " +
                 kill_dir + " >/dev/null 2>&1").c_str());
    REQUIRE(std::system((cli + " sweep --config " + grid_path + " --out " + kill_dir +
                         " >/dev/null 2>&1").c_str()) == 0);

    CHECK(store_bytes(kill_dir) == store_bytes(ref_dir));
    CHECK_NOTHROW(verify_store(kill_dir));
    CHECK_NOTHROW(verify_store(ref_dir));
}

TEST_CASE("seed hygiene holds on a 50-cell grid") {
    GridSpec g = tiny_grid();
    g.replications = 5;
    g.target_sizes = {60, 100};
    g.shifts = {{datagen::ShiftType::covariate, {0.0, 1.0, 2.0}, {}},
                {datagen::ShiftType::label, {0.5, 1.5}, {}}};
    const auto cells = enumerate_cells(g);
    CHECK(cells.size() == 50);

    std::map<uint64_t, std::string> seen;
    std::set<std::string> keys;
    for (const auto& c : cells) {
        CHECK(keys.insert(c.key()).second);
        const uint64_t seed = c.dataset_seed(g.base_seed);
        const auto [it, fresh] = seen.emplace(seed, c.key());
        CHECK(fresh);
    }
}

TEST_CASE("aggregate: hand values and an independent recomputation oracle") {
    std::vector<RunRecord> records;
    auto make = [](int rep, const std::string& scenario, double r2) {
        RunRecord r;
        r.cell = {datagen::ShiftType::covariate, 1.0, SchemaRelation::equal, 100, rep};
        r.seed = 1;
        r.model = "ft_mdn";
        r.scenario = scenario;
        r.metrics.r2 = r2;
        r.metrics.mae = 0.1;
        return r;
    };
    records.push_back(make(0, "transfer", 0.4));
    records.push_back(make(1, "transfer", 0.6));
    records.push_back(make(0, "target_baseline", 0.3));
    records.push_back(make(1, "target_baseline", 0.3));

    const auto agg = aggregate(records);
    REQUIRE(agg.rows.size() == 2);
    for (const auto& row : agg.rows) {
        if (row.key.scenario == "transfer") {
            CHECK(row.r2_mean == doctest::Approx(0.5));
            CHECK(row.r2_se == doctest::Approx(0.1));
        } else {
            CHECK(row.r2_mean == doctest::Approx(0.3));
            CHECK(row.r2_se == doctest::Approx(0.0));  // equal replications
        }
    }
    REQUIRE(agg.gains.size() == 1);
    // paired diffs: {0.1, 0.3} -> mean 0.2, se = sd/sqrt(2)
    CHECK(agg.gains[0].gain_mean == doctest::Approx(0.2));
    CHECK(agg.gains[0].gain_se ==
          doctest::Approx(vec_sd_sample({0.1, 0.3}) / std::sqrt(2.0)));

    // independent oracle over a randomized record set
    Rng rng(8);
    std::vector<RunRecord> rand_records;
    std::vector<double> r2s;
    for (int rep = 0; rep < 7; ++rep) {
        const double v = rng.uniform01();
        r2s.push_back(v);
        rand_records.push_back(make(rep, "transfer", v));
    }
    const auto agg2 = aggregate(rand_records);
    double mean = 0.0;
    for (double v : r2s) mean += v;
    mean /= 7.0;
    double sq = 0.0;
    for (double v : r2s) sq += (v - mean) * (v - mean);
    const double se = std::sqrt(sq / 6.0) / std::sqrt(7.0);
    CHECK(agg2.rows[0].r2_mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(agg2.rows[0].r2_se == doctest::Approx(se).epsilon(1e-12));
}

TEST_CASE("grid validation rejects bad rosters and subsets") {
    GridSpec g = tiny_grid();
    g.models = {"nonexistent_model"};
    CHECK_THROWS_AS(g.validate(), ConfigError);

    GridSpec g2 = tiny_grid();
    g2.relations = {SchemaRelation::source_subset_target};
    g2.subset_features = {"lin_exposure", "lin_rating"};  // no categorical
    CHECK_THROWS_AS(g2.validate(), ConfigError);

    GridSpec g3 = tiny_grid();
    g3.relations = {SchemaRelation::target_subset_source};
    g3.subset_features.clear();  // default rule adds a categorical
    CHECK_NOTHROW(g3.validate());
}

TEST_CASE("grid JSON round-trips") {
    GridSpec g = tiny_grid();
    g.relations = {SchemaRelation::equal, SchemaRelation::source_subset_target};
    g.subset_features = {"lin_exposure", "cat_segment"};
    const auto text = grid_to_json(g);
    const auto back = grid_from_json(text);
    CHECK(grid_to_json(back) == text);
    CHECK(back.fingerprint() == g.fingerprint());
}

TEST_CASE("external model plug-in point") {
    register_model("toy_constant", [](train::Scenario, const train::ScenarioData& data,
                                      const GridSpec&, uint64_t) {
        train::ScenarioRun run;
        run.metrics.n_eval = data.target_val.targets.size();
        run.metrics.r2 = 0.123;
        run.metrics.mae = 0.456;
        return run;
    });
    CHECK(is_known_model("toy_constant"));

    GridSpec g = tiny_grid();
    g.models = {"toy_constant"};
    g.scenarios = {train::Scenario::transfer};
    const std::string dir = "/tmp/rrtl_store_plugin";
    wipe(dir);
    const auto summary = run_grid(g, dir);
    CHECK(summary.computed == 2);
    for (const auto& rec : load_records(dir)) {
        CHECK(rec.model == "toy_constant");
        CHECK(rec.metrics.r2 == 0.123);
    }
}

TEST_CASE("failed cells record the error and do not block the sweep") {
    register_model("toy_failing", [](train::Scenario, const train::ScenarioData&, const GridSpec&,
                                     uint64_t) -> train::ScenarioRun {
        throw TrainingError("synthetic failure for testing");
    });
    GridSpec g = tiny_grid();
    g.models = {"toy_failing", "ft_mdn"};
    g.scenarios = {train::Scenario::target_baseline};
    const std::string dir = "/tmp/rrtl_store_failures";
    wipe(dir);
    const auto summary = run_grid(g, dir);
    CHECK(summary.failed == 2);   // 2 cells x 1 scenario for the failing model
    CHECK(summary.computed == 2);  // ft_mdn still ran
    int failed_records = 0;
    for (const auto& rec : load_records(dir)) {
        if (rec.failed) {
            ++failed_records;
            CHECK(rec.error.find("synthetic failure") != std::string::npos);
        }
    }
    CHECK(failed_records == 2);
}

TEST_CASE("reports render deterministically and reject empty selections") {
    GridSpec g = tiny_grid();
    g.replications = 3;
    g.store_density = true;
    g.scenarios = {train::Scenario::target_baseline, train::Scenario::transfer};
    const std::string dir = "/tmp/rrtl_store_report";
    wipe(dir);
    run_grid(g, dir);

    const std::string out1 = "/tmp/rrtl_report_1";
    const std::string out2 = "/tmp/rrtl_report_2";
    wipe(out1);
    wipe(out2);
    for (const char* kind : {"violin", "shift_curve", "sample_curve", "density"}) {
        report(dir, report_kind_from_string(kind), out1);
        report(dir, report_kind_from_string(kind), out2);
    }
    for (const char* name : {"violin.svg", "violin.tsv", "shift_curve.svg", "shift_curve.tsv",
                             "sample_curve.svg", "sample_curve.tsv", "density.svg",
                             "density.tsv"}) {
        CHECK(slurp(out1 + "/" + name) == slurp(out2 + "/" + name));
    }

    // a store with no transfer/baseline pairs cannot build a violin
    GridSpec zs = tiny_grid();
    zs.scenarios = {train::Scenario::zero_shot};
    zs.store_density = false;
    const std::string dir2 = "/tmp/rrtl_store_zsonly";
    wipe(dir2);
    run_grid(zs, dir2);
    CHECK_THROWS_AS(report(dir2, ReportKind::violin, "/tmp/rrtl_report_empty"),
                    DiagnosticError);
    CHECK_THROWS_AS(report(dir2, ReportKind::density, "/tmp/rrtl_report_empty"),
                    DiagnosticError);
}

TEST_CASE("aggregates CSV files are written") {
    const std::string dir = "/tmp/rrtl_store_resume";  // reuse the earlier store
    if (!fs::exists(dir + "/index.json")) run_grid(tiny_grid(), dir);
    const auto agg = aggregate_store(dir);
    CHECK(!agg.rows.empty());
    write_aggregates_csv(agg, "/tmp/rrtl_agg_out");
    CHECK(fs::exists("/tmp/rrtl_agg_out/summary.csv"));
    CHECK(fs::exists("/tmp/rrtl_agg_out/gains.csv"));
    std::ifstream in("/tmp/rrtl_agg_out/summary.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header.find("r2_mean") != std::string::npos);
}
