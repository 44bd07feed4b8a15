#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rrtl/config_io.hpp"
#include "rrtl/datagen.hpp"
#include "rrtl/drift.hpp"
#include "rrtl/mlp.hpp"
#include "rrtl/train.hpp"

namespace rrtl::harness {

inline constexpr const char* kStoreVersion = "rrtl-store-1";

// ----------------------------- grid specification -----------------------------

enum class SchemaRelation { equal, source_subset_target, target_subset_source };

const char* to_string(SchemaRelation r);
SchemaRelation relation_from_string(const std::string& s);

struct ShiftGrid {
    datagen::ShiftType type = datagen::ShiftType::none;
    std::vector<double> intensities = {0.0};
    // empty -> datagen::default_shift perturbations for the type
    std::vector<datagen::Perturbation> perturbations;
};

struct GridSpec {
    uint64_t base_seed = 20240501;
    size_t n_source = 5000;
    std::vector<size_t> target_sizes = {100, 300, 500, 1000};
    int replications = 15;
    std::vector<std::string> models = {"ft_mdn"};
    std::vector<train::Scenario> scenarios = {train::Scenario::zero_shot,
                                              train::Scenario::target_baseline,
                                              train::Scenario::transfer};
    std::vector<SchemaRelation> relations = {SchemaRelation::equal};
    std::vector<ShiftGrid> shifts = {{datagen::ShiftType::covariate, {0.0, 0.5, 1.0, 1.5, 2.0, 3.0}, {}}};
    datagen::GeneratorConfig generator = datagen::default_generator_config();
    std::vector<std::string> subset_features;  // smaller side of subset relations
    model::ModelConfig model_config;
    train::TrainOpts train_opts;
    train::TransferOpts transfer_opts;
    int mlp_hidden = 64;
    bool store_density = true;

    // Resolved subset list (default: roughly half the features, always
    // including at least one numeric and one categorical).
    std::vector<std::string> resolved_subset() const;

    void validate() const;
    std::string fingerprint() const;  // stable hash over the canonical JSON
};

std::string grid_to_json(const GridSpec& grid);
GridSpec grid_from_json(const std::string& text);
GridSpec load_grid(const std::string& path);

// ----------------------------- cells and records -----------------------------

struct CellCoord {
    datagen::ShiftType shift_type = datagen::ShiftType::none;
    double intensity = 0.0;
    SchemaRelation relation = SchemaRelation::equal;
    size_t n_target = 100;
    int replication = 0;

    std::string key() const;  // filesystem-safe unique id
    uint64_t dataset_seed(uint64_t base_seed) const;
};

std::vector<CellCoord> enumerate_cells(const GridSpec& grid);

struct RunRecord {
    CellCoord cell;
    uint64_t seed = 0;
    std::string model;
    std::string scenario;
    bool failed = false;
    std::string error;
    metrics::MetricRecord metrics;
    drift::DriftReport drift;
    std::string version;
    std::vector<double> density;          // 512-point portfolio density (MDN only)
    std::vector<double> eval_histogram;   // 30-bin histogram of target-val R
    double wall_ms = 0.0;                 // lives in the timings sidecar only

    std::string file_name() const;
};

std::string record_to_json(const RunRecord& rec);
RunRecord record_from_json(const std::string& text);

// ----------------------------- model plug-in point -----------------------------

// External baselines register a runner; the roster then accepts their name.
using ModelRunner = std::function<train::ScenarioRun(
    train::Scenario, const train::ScenarioData&, const GridSpec&, uint64_t seed)>;

void register_model(const std::string& name, ModelRunner runner);
bool is_known_model(const std::string& name);
std::vector<std::string> known_models();

// ----------------------------- execution -----------------------------

struct RunSummary {
    int computed = 0;
    int skipped = 0;
    int failed = 0;
};

// Runs every missing (cell, model, scenario) record; existing records are
// never recomputed or rewritten. Cells execute in a small worker pool; each
// record lands in its own file via an atomic rename, so an interrupted run
// resumes cleanly.
RunSummary run_grid(const GridSpec& grid, const std::string& store_dir, int workers = 1,
                    bool resume = true);

// Store-wide invariants: seeds recompute from coordinates, no seed is shared
// across distinct cells, and the index matches the record files. Throws on
// violation.
void verify_store(const std::string& store_dir);

std::vector<RunRecord> load_records(const std::string& store_dir);

// ----------------------------- aggregation -----------------------------

struct GroupKey {
    std::string shift_type;
    double intensity = 0.0;
    std::string relation;
    size_t n_target = 0;
    std::string model;
    std::string scenario;

    bool operator<(const GroupKey& o) const;
};

struct AggregateRow {
    GroupKey key;
    int n = 0;
    double r2_mean = 0.0, r2_se = 0.0;
    double mae_mean = 0.0, mae_se = 0.0;
    double nll_mean = 0.0;
    bool has_nll = false;
    double feature_shift_mean = 0.0;
    double label_shift_mean = 0.0;
};

struct GainRow {
    GroupKey key;  // scenario field empty
    int n = 0;     // paired replications
    double gain_mean = 0.0, gain_se = 0.0;
};

struct Aggregates {
    std::vector<AggregateRow> rows;
    std::vector<GainRow> gains;  // transfer minus target_baseline, paired by replication
};

Aggregates aggregate(const std::vector<RunRecord>& records);
Aggregates aggregate_store(const std::string& store_dir);
void write_aggregates_csv(const Aggregates& agg, const std::string& out_dir);

// ----------------------------- reports -----------------------------

enum class ReportKind { violin, shift_curve, sample_curve, density };

ReportKind report_kind_from_string(const std::string& s);

// Emits <kind>.svg plus a sidecar <kind>.tsv with the backing numbers.
// Throws DiagnosticError with the available coordinates when the selection
// is empty.
void report(const std::string& store_dir, ReportKind kind, const std::string& out_dir);

// Per-shift-type OLS slope of transfer R^2 against the plotted drift score
// (FeatureShift for covariate, LabelShift for label, intensity for
// conditional cells). Used by the shift_curve report.
std::map<std::string, double> shift_curve_slopes(const std::vector<RunRecord>& records,
                                                 const std::string& model);

}  // namespace rrtl::harness
