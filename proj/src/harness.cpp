#include "rrtl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rrtl::harness {

// ----------------------------- enum mappings -----------------------------

const char* to_string(SchemaRelation r) {
    switch (r) {
        case SchemaRelation::equal: return "equal";
        case SchemaRelation::source_subset_target: return "source_subset_target";
        case SchemaRelation::target_subset_source: return "target_subset_source";
    }
    return "equal";
}

SchemaRelation relation_from_string(const std::string& s) {
    if (s == "equal") return SchemaRelation::equal;
    if (s == "source_subset_target") return SchemaRelation::source_subset_target;
    if (s == "target_subset_source") return SchemaRelation::target_subset_source;
    throw ConfigError("unknown schema relation '" + s + "'");
}

ReportKind report_kind_from_string(const std::string& s) {
    if (s == "violin") return ReportKind::violin;
    if (s == "shift_curve") return ReportKind::shift_curve;
    if (s == "sample_curve") return ReportKind::sample_curve;
    if (s == "density") return ReportKind::density;
    throw ConfigError("unknown report kind '" + s + "'");
}

// ----------------------------- grid spec -----------------------------

std::vector<std::string> GridSpec::resolved_subset() const {
    if (!subset_features.empty()) return subset_features;
    std::vector<std::string> out;
    const size_t half = (generator.features.size() + 1) / 2;
    bool have_cat = false, have_num = false;
    for (size_t i = 0; i < half && i < generator.features.size(); ++i) {
        out.push_back(generator.features[i].name);
        have_cat |= generator.features[i].kind == FeatureKind::categorical;
        have_num |= generator.features[i].kind == FeatureKind::numeric;
    }
    for (const auto& f : generator.features) {
        if (!have_cat && f.kind == FeatureKind::categorical) {
            out.push_back(f.name);
            have_cat = true;
        }
        if (!have_num && f.kind == FeatureKind::numeric) {
            out.push_back(f.name);
            have_num = true;
        }
    }
    return out;
}

void GridSpec::validate() const {
    generator.validate();
    model_config.validate();
    train_opts.validate();
    transfer_opts.validate();
    if (replications < 1) throw ConfigError("replications must be >= 1");
    if (n_source < 10) throw ConfigError("n_source must be >= 10");
    if (target_sizes.empty() || shifts.empty() || relations.empty() || models.empty() ||
        scenarios.empty()) {
        throw ConfigError("grid needs at least one target size, shift, relation, model, scenario");
    }
    for (size_t n : target_sizes) {
        if (n < 10) throw ConfigError("target sizes must be >= 10 for stratified splitting");
    }
    for (const auto& m : models) {
        if (!is_known_model(m)) {
            std::string names;
            for (const auto& k : known_models()) names += k + " ";
            throw ConfigError("unknown model '" + m + "' (available: " + names + ")");
        }
    }

    const bool needs_subset =
        std::any_of(relations.begin(), relations.end(),
                    [](SchemaRelation r) { return r != SchemaRelation::equal; });
    if (needs_subset) {
        const auto subset = resolved_subset();
        if (subset.empty() || subset.size() >= generator.features.size()) {
            throw ConfigError("subset_features must be a non-empty proper subset");
        }
        bool have_num = false, have_cat = false;
        for (const auto& name : subset) {
            const auto& f = generator.feature(name);
            have_num |= f.kind == FeatureKind::numeric;
            have_cat |= f.kind == FeatureKind::categorical;
        }
        if (!have_num || !have_cat) {
            throw ConfigError("shared features must include at least one numeric and one "
                              "categorical feature when schemas differ");
        }
        // shared set == smaller schema for subset relations
        if (static_cast<double>(subset.size()) <
            0.3 * static_cast<double>(std::min(subset.size(), generator.features.size()))) {
            throw ConfigError("schema overlap below the 30% floor");
        }
    }
}

namespace {

json train_opts_json(const train::TrainOpts& o) {
    return {{"learning_rate", o.learning_rate}, {"weight_decay", o.weight_decay},
            {"batch_size", o.batch_size},       {"max_epochs", o.max_epochs},
            {"patience", o.patience},           {"cosine_lr", o.cosine_lr}};
}

train::TrainOpts train_opts_from(const json& j) {
    train::TrainOpts o;
    o.learning_rate = j.value("learning_rate", o.learning_rate);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.batch_size = j.value("batch_size", o.batch_size);
    o.max_epochs = j.value("max_epochs", o.max_epochs);
    o.patience = j.value("patience", o.patience);
    o.cosine_lr = j.value("cosine_lr", o.cosine_lr);
    return o;
}

json transfer_opts_json(const train::TransferOpts& o) {
    return {{"pretrain_features",
             o.pretrain_features == train::PretrainFeatures::shared_only ? "shared_only"
                                                                         : "full_source"},
            {"warm_epochs", o.warm_epochs},
            {"lr_divisor", o.lr_divisor}};
}

train::TransferOpts transfer_opts_from(const json& j) {
    train::TransferOpts o;
    if (j.value("pretrain_features", "full_source") == "shared_only") {
        o.pretrain_features = train::PretrainFeatures::shared_only;
    }
    o.warm_epochs = j.value("warm_epochs", o.warm_epochs);
    o.lr_divisor = j.value("lr_divisor", o.lr_divisor);
    return o;
}

json model_config_json(const model::ModelConfig& c) {
    return {{"token_dim", c.token_dim},       {"depth", c.depth},
            {"heads", c.heads},               {"ffn_expansion", c.ffn_expansion},
            {"components", c.components},     {"alpha_temperature", c.alpha_temperature},
            {"mu_max", c.mu_max},             {"sigma_floor", c.sigma_floor},
            {"dropout", c.dropout}};
}

model::ModelConfig model_config_from(const json& j) {
    model::ModelConfig c;
    c.token_dim = j.value("token_dim", c.token_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.ffn_expansion = j.value("ffn_expansion", c.ffn_expansion);
    c.components = j.value("components", c.components);
    c.alpha_temperature = j.value("alpha_temperature", c.alpha_temperature);
    c.mu_max = j.value("mu_max", c.mu_max);
    c.sigma_floor = j.value("sigma_floor", c.sigma_floor);
    c.dropout = j.value("dropout", c.dropout);
    return c;
}

std::string format_intensity(double s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", s);
    return buf;
}

}  // namespace

std::string grid_to_json(const GridSpec& grid) {
    json j;
    j["base_seed"] = grid.base_seed;
    j["n_source"] = grid.n_source;
    j["target_sizes"] = grid.target_sizes;
    j["replications"] = grid.replications;
    j["models"] = grid.models;
    j["scenarios"] = json::array();
    for (auto s : grid.scenarios) j["scenarios"].push_back(train::to_string(s));
    j["relations"] = json::array();
    for (auto r : grid.relations) j["relations"].push_back(to_string(r));
    j["shifts"] = json::array();
    for (const auto& sh : grid.shifts) {
        json e;
        e["shift_type"] = datagen::to_string(sh.type);
        e["intensities"] = sh.intensities;
        if (!sh.perturbations.empty()) {
            e["perturbations"] = json::array();
            for (const auto& p : sh.perturbations) {
                e["perturbations"].push_back(
                    {{"param", p.param},
                     {"op", p.op == datagen::PerturbOp::add ? "add" : "mul"},
                     {"step", p.step}});
            }
        }
        j["shifts"].push_back(e);
    }
    j["generator"] = json::parse(datagen::generator_config_to_json(grid.generator));
    if (!grid.subset_features.empty()) j["subset_features"] = grid.subset_features;
    j["model_config"] = model_config_json(grid.model_config);
    j["train"] = train_opts_json(grid.train_opts);
    j["transfer"] = transfer_opts_json(grid.transfer_opts);
    j["mlp_hidden"] = grid.mlp_hidden;
    j["store_density"] = grid.store_density;
    return j.dump(2);
}

GridSpec grid_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("grid config is not valid JSON: ") + e.what());
    }
    GridSpec g;
    g.base_seed = j.value("base_seed", g.base_seed);
    g.n_source = j.value("n_source", g.n_source);
    if (j.contains("target_sizes")) g.target_sizes = j.at("target_sizes").get<std::vector<size_t>>();
    g.replications = j.value("replications", g.replications);
    if (j.contains("models")) g.models = j.at("models").get<std::vector<std::string>>();
    if (j.contains("scenarios")) {
        g.scenarios.clear();
        for (const auto& s : j.at("scenarios")) {
            g.scenarios.push_back(train::scenario_from_string(s.get<std::string>()));
        }
    }
    if (j.contains("relations")) {
        g.relations.clear();
        for (const auto& r : j.at("relations")) {
            g.relations.push_back(relation_from_string(r.get<std::string>()));
        }
    }
    if (j.contains("shifts")) {
        g.shifts.clear();
        for (const auto& e : j.at("shifts")) {
            ShiftGrid sh;
            sh.type = datagen::shift_type_from_string(e.at("shift_type").get<std::string>());
            if (e.contains("intensities")) sh.intensities = e.at("intensities").get<std::vector<double>>();
            if (e.contains("perturbations")) {
                for (const auto& p : e.at("perturbations")) {
                    datagen::Perturbation pert;
                    pert.param = p.at("param").get<std::string>();
                    pert.op = p.value("op", "add") == "mul" ? datagen::PerturbOp::mul
                                                            : datagen::PerturbOp::add;
                    pert.step = p.at("step").get<double>();
                    sh.perturbations.push_back(pert);
                }
            }
            g.shifts.push_back(sh);
        }
    }
    if (j.contains("generator")) {
        g.generator = datagen::generator_config_from_json(j.at("generator").dump());
    }
    if (j.contains("subset_features")) {
        g.subset_features = j.at("subset_features").get<std::vector<std::string>>();
    }
    if (j.contains("model_config")) g.model_config = model_config_from(j.at("model_config"));
    if (j.contains("train")) g.train_opts = train_opts_from(j.at("train"));
    if (j.contains("transfer")) g.transfer_opts = transfer_opts_from(j.at("transfer"));
    g.mlp_hidden = j.value("mlp_hidden", g.mlp_hidden);
    g.store_density = j.value("store_density", g.store_density);
    g.validate();
    return g;
}

GridSpec load_grid(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open grid config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return grid_from_json(text);
}

std::string GridSpec::fingerprint() const {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash64(0x9d1f, grid_to_json(*this))));
    return buf;
}

// ----------------------------- cells -----------------------------

std::string CellCoord::key() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s_s%s_%s_nt%zu_rep%02d", datagen::to_string(shift_type),
                  format_intensity(intensity).c_str(), to_string(relation), n_target, replication);
    return buf;
}

uint64_t CellCoord::dataset_seed(uint64_t base_seed) const {
    return hash64(base_seed, key());
}

std::vector<CellCoord> enumerate_cells(const GridSpec& grid) {
    std::vector<CellCoord> cells;
    for (const auto& shift : grid.shifts) {
        for (double s : shift.intensities) {
            for (SchemaRelation rel : grid.relations) {
                for (size_t nt : grid.target_sizes) {
                    for (int rep = 0; rep < grid.replications; ++rep) {
                        cells.push_back({shift.type, s, rel, nt, rep});
                    }
                }
            }
        }
    }
    return cells;
}

// ----------------------------- records -----------------------------

std::string RunRecord::file_name() const {
    return cell.key() + "__" + model + "__" + scenario + ".json";
}

std::string record_to_json(const RunRecord& rec) {
    json j;
    j["cell"] = {{"shift_type", datagen::to_string(rec.cell.shift_type)},
                 {"intensity", rec.cell.intensity},
                 {"relation", to_string(rec.cell.relation)},
                 {"n_target", rec.cell.n_target},
                 {"replication", rec.cell.replication}};
    j["seed"] = rec.seed;
    j["model"] = rec.model;
    j["scenario"] = rec.scenario;
    j["version"] = rec.version;
    if (rec.failed) {
        j["status"] = "failed";
        j["error"] = rec.error;
        return j.dump(2);
    }
    j["status"] = "ok";
    j["metrics"] = {{"r2", rec.metrics.r2}, {"mae", rec.metrics.mae},
                    {"n_eval", rec.metrics.n_eval}};
    if (rec.metrics.nll) j["metrics"]["nll"] = *rec.metrics.nll;
    j["drift"] = {{"feature_shift", rec.drift.feature_shift},
                  {"label_shift", rec.drift.label_shift},
                  {"unweighted_fallback", rec.drift.unweighted_fallback}};
    j["drift"]["feature_kl"] = rec.drift.feature_kl;
    j["drift"]["weights"] = rec.drift.weights;
    if (!rec.density.empty()) j["density"] = rec.density;
    if (!rec.eval_histogram.empty()) j["eval_histogram"] = rec.eval_histogram;
    return j.dump(2);
}

RunRecord record_from_json(const std::string& text) {
    const json j = json::parse(text);
    RunRecord rec;
    const auto& c = j.at("cell");
    rec.cell.shift_type = datagen::shift_type_from_string(c.at("shift_type").get<std::string>());
    rec.cell.intensity = c.at("intensity").get<double>();
    rec.cell.relation = relation_from_string(c.at("relation").get<std::string>());
    rec.cell.n_target = c.at("n_target").get<size_t>();
    rec.cell.replication = c.at("replication").get<int>();
    rec.seed = j.at("seed").get<uint64_t>();
    rec.model = j.at("model").get<std::string>();
    rec.scenario = j.at("scenario").get<std::string>();
    rec.version = j.value("version", "");
    rec.failed = j.value("status", "ok") != "ok";
    rec.error = j.value("error", "");
    if (!rec.failed) {
        rec.metrics.r2 = j.at("metrics").at("r2").get<double>();
        rec.metrics.mae = j.at("metrics").at("mae").get<double>();
        rec.metrics.n_eval = j.at("metrics").at("n_eval").get<size_t>();
        if (j.at("metrics").contains("nll")) rec.metrics.nll = j.at("metrics").at("nll").get<double>();
        rec.drift.feature_shift = j.at("drift").at("feature_shift").get<double>();
        rec.drift.label_shift = j.at("drift").at("label_shift").get<double>();
        rec.drift.unweighted_fallback = j.at("drift").value("unweighted_fallback", false);
        if (j.at("drift").contains("feature_kl")) {
            for (const auto& [k, v] : j.at("drift").at("feature_kl").items()) {
                rec.drift.feature_kl[k] = v.get<double>();
            }
        }
        if (j.at("drift").contains("weights")) {
            for (const auto& [k, v] : j.at("drift").at("weights").items()) {
                rec.drift.weights[k] = v.get<double>();
            }
        }
        if (j.contains("density")) rec.density = j.at("density").get<std::vector<double>>();
        if (j.contains("eval_histogram")) {
            rec.eval_histogram = j.at("eval_histogram").get<std::vector<double>>();
        }
    }
    return rec;
}

// ----------------------------- registry -----------------------------

namespace {

std::map<std::string, ModelRunner>& registry() {
    static std::map<std::string, ModelRunner> reg;
    return reg;
}

}  // namespace

void register_model(const std::string& name, ModelRunner runner) {
    registry()[name] = std::move(runner);
}

bool is_known_model(const std::string& name) {
    return name == "ft_mdn" || name == "ft_reg" || name == "mlp" || registry().count(name) > 0;
}

std::vector<std::string> known_models() {
    std::vector<std::string> names = {"ft_mdn", "ft_reg", "mlp"};
    for (const auto& [k, v] : registry()) names.push_back(k);
    return names;
}

// ----------------------------- execution -----------------------------

namespace {

datagen::ShiftSpec shift_spec_for(const GridSpec& grid, const CellCoord& coord) {
    for (const auto& sh : grid.shifts) {
        if (sh.type != coord.shift_type) continue;
        if (std::find(sh.intensities.begin(), sh.intensities.end(), coord.intensity) ==
            sh.intensities.end()) {
            continue;
        }
        if (sh.perturbations.empty()) {
            return datagen::default_shift(sh.type, coord.intensity);
        }
        datagen::ShiftSpec spec;
        spec.shift_type = sh.type;
        spec.intensity = coord.intensity;
        spec.perturbations = sh.perturbations;
        return spec;
    }
    throw ConfigError("cell coordinates not covered by the grid shifts");
}

void write_atomically(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp + "'");
        out << content;
        if (!out.flush()) throw IoError("flush failed for '" + tmp + "'");
    }
    fs::rename(tmp, path);
}

std::vector<double> histogram30(const std::vector<double>& values) {
    std::vector<double> h(30, 0.0);
    for (double v : values) {
        int b = static_cast<int>(v * 30.0);
        b = std::clamp(b, 0, 29);
        h[static_cast<size_t>(b)] += 1.0;
    }
    return h;
}

struct CellOutput {
    std::vector<RunRecord> records;
};

// All missing records for one cell. Pretraining is shared between the
// zero-shot and transfer scenarios of one model (they are defined over the
// same seed, so the pretrained weights coincide).
CellOutput execute_cell(const GridSpec& grid, const CellCoord& coord,
                        const std::set<std::string>& missing) {
    CellOutput out;
    const uint64_t cell_seed = coord.dataset_seed(grid.base_seed);
    const auto shift = shift_spec_for(grid, coord);

    auto pair = datagen::generate_domain_pair(grid.generator, shift, grid.n_source,
                                              coord.n_target, cell_seed);
    const auto subset = grid.resolved_subset();
    if (coord.relation == SchemaRelation::source_subset_target) {
        pair.first = pair.first.project(subset);
    } else if (coord.relation == SchemaRelation::target_subset_source) {
        pair.second = pair.second.project(subset);
    }

    const auto data = train::prepare_scenario_data(pair.first, pair.second, 0.2,
                                                   hash64(cell_seed, "split"));
    const auto drift_report = drift::compute_drift(pair.first, pair.second, data.schema);

    auto make_record = [&](const std::string& model_name, train::Scenario scenario) {
        RunRecord rec;
        rec.cell = coord;
        rec.seed = cell_seed;
        rec.model = model_name;
        rec.scenario = train::to_string(scenario);
        rec.drift = drift_report;
        rec.version = std::string(kStoreVersion) + ":" + grid.fingerprint();
        return rec;
    };

    auto finish_record = [&](RunRecord& rec, const train::ScenarioRun& run) {
        rec.metrics = run.metrics;
        const auto& eval_targets = rec.scenario == "zero_shot" ? data.target_val_shared.targets
                                                               : data.target_val.targets;
        rec.eval_histogram = histogram30(eval_targets);
        if (grid.store_density && !run.val_mixtures.empty()) {
            const auto grid_pts = metrics::uniform_grid(0.0, grid.model_config.mu_max, 512);
            rec.density = metrics::portfolio_density(run.val_mixtures, grid_pts).density;
        }
    };

    for (const auto& model_name : grid.models) {
        const uint64_t model_seed = hash64(cell_seed, model_name);
        auto needs = [&](train::Scenario s) {
            return missing.count(model_name + "/" + train::to_string(s)) > 0;
        };

        try {
            if (model_name == "ft_mdn" || model_name == "ft_reg") {
                const auto head = model_name == "ft_mdn" ? model::HeadKind::mdn
                                                          : model::HeadKind::regression;
                const bool shared_pre = grid.transfer_opts.pretrain_features ==
                                        train::PretrainFeatures::shared_only;
                const auto& pre_train = shared_pre ? data.source_train_shared
                                                   : data.source_train_full;
                const auto& pre_val = shared_pre ? data.source_val_shared : data.source_val_full;
                train::TrainOpts sopts = grid.train_opts;
                sopts.seed = hash64(model_seed, "train");

                if (needs(train::Scenario::zero_shot) || needs(train::Scenario::transfer)) {
                    model::FtModel<Real> net(grid.model_config, data.schema, data.vocab, head,
                                             hash64(model_seed, "init"));
                    train::pretrain(net, pre_train, pre_val, sopts);
                    if (needs(train::Scenario::zero_shot)) {
                        RunRecord rec = make_record(model_name, train::Scenario::zero_shot);
                        train::ScenarioRun run;
                        const auto pred = net.predict(data.target_val_shared);
                        run.metrics.n_eval = pred.size();
                        run.metrics.r2 = metrics::r2(data.target_val_shared.targets, pred);
                        run.metrics.mae = metrics::mae(data.target_val_shared.targets, pred);
                        if (head == model::HeadKind::mdn) {
                            run.val_mixtures = net.predict_mixtures(data.target_val_shared);
                            double nll = 0.0;
                            for (size_t i = 0; i < run.val_mixtures.size(); ++i) {
                                nll += model::mdn_nll(run.val_mixtures[i],
                                                      data.target_val_shared.targets[i]);
                            }
                            run.metrics.nll = nll / static_cast<double>(run.val_mixtures.size());
                        }
                        finish_record(rec, run);
                        out.records.push_back(std::move(rec));
                    }
                    if (needs(train::Scenario::transfer)) {
                        RunRecord rec = make_record(model_name, train::Scenario::transfer);
                        auto tuned = model::reconfigure_for_schema(net, data.schema, data.vocab);
                        train::finetune(tuned, data.target_train, data.target_val, sopts,
                                        grid.transfer_opts);
                        train::ScenarioRun run;
                        const auto pred = tuned.predict(data.target_val);
                        run.metrics.n_eval = pred.size();
                        run.metrics.r2 = metrics::r2(data.target_val.targets, pred);
                        run.metrics.mae = metrics::mae(data.target_val.targets, pred);
                        if (head == model::HeadKind::mdn) {
                            run.val_mixtures = tuned.predict_mixtures(data.target_val);
                            double nll = 0.0;
                            for (size_t i = 0; i < run.val_mixtures.size(); ++i) {
                                nll += model::mdn_nll(run.val_mixtures[i],
                                                      data.target_val.targets[i]);
                            }
                            run.metrics.nll = nll / static_cast<double>(run.val_mixtures.size());
                        }
                        finish_record(rec, run);
                        out.records.push_back(std::move(rec));
                    }
                }
                if (needs(train::Scenario::target_baseline)) {
                    RunRecord rec = make_record(model_name, train::Scenario::target_baseline);
                    const auto run = train::run_scenario_ft<Real>(
                        train::Scenario::target_baseline, data, grid.model_config, head,
                        grid.train_opts, grid.transfer_opts, model_seed);
                    finish_record(rec, run);
                    out.records.push_back(std::move(rec));
                }
            } else if (model_name == "mlp") {
                for (auto scenario : grid.scenarios) {
                    if (!needs(scenario)) continue;
                    RunRecord rec = make_record(model_name, scenario);
                    const auto run = baseline::run_scenario_mlp<Real>(
                        scenario, data, grid.mlp_hidden, grid.train_opts, grid.transfer_opts,
                        model_seed);
                    finish_record(rec, run);
                    out.records.push_back(std::move(rec));
                }
            } else {
                const auto& runner = registry().at(model_name);
                for (auto scenario : grid.scenarios) {
                    if (!needs(scenario)) continue;
                    RunRecord rec = make_record(model_name, scenario);
                    const auto run = runner(scenario, data, grid, model_seed);
                    finish_record(rec, run);
                    out.records.push_back(std::move(rec));
                }
            }
        } catch (const std::exception& e) {
            // a failed model/cell combination writes failure records for its
            // missing scenarios and never blocks other cells
            for (auto scenario : grid.scenarios) {
                if (!needs(scenario)) continue;
                bool already = false;
                for (const auto& r : out.records) {
                    if (r.model == model_name && r.scenario == train::to_string(scenario)) {
                        already = true;
                        break;
                    }
                }
                if (already) continue;
                RunRecord rec = make_record(model_name, scenario);
                rec.failed = true;
                rec.error = e.what();
                out.records.push_back(std::move(rec));
            }
        }
    }
    return out;
}

void write_index(const GridSpec& grid, const std::string& store_dir) {
    json idx;
    idx["version"] = kStoreVersion;
    idx["grid_fingerprint"] = grid.fingerprint();
    idx["records"] = json::array();
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(store_dir + "/records")) {
        if (entry.path().extension() == ".json") files.push_back(entry.path().filename());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::ifstream in(store_dir + "/records/" + f);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const auto rec = record_from_json(text);
        idx["records"].push_back({{"file", f},
                                  {"cell", rec.cell.key()},
                                  {"model", rec.model},
                                  {"scenario", rec.scenario},
                                  {"status", rec.failed ? "failed" : "ok"}});
    }
    write_atomically(store_dir + "/index.json", idx.dump(2) + "\n");
}

}  // namespace

RunSummary run_grid(const GridSpec& grid, const std::string& store_dir, int workers, bool resume) {
    grid.validate();
    fs::create_directories(store_dir + "/records");

    const std::string grid_path = store_dir + "/grid.json";
    if (fs::exists(grid_path)) {
        const auto existing = load_grid(grid_path);
        if (existing.fingerprint() != grid.fingerprint()) {
            throw ConfigError("store '" + store_dir + "' was created with a different grid");
        }
    } else {
        write_atomically(grid_path, grid_to_json(grid) + "\n");
    }

    const auto cells = enumerate_cells(grid);
    struct Task {
        CellCoord coord;
        std::set<std::string> missing;
    };
    std::vector<Task> tasks;
    RunSummary summary;
    for (const auto& coord : cells) {
        Task t{coord, {}};
        for (const auto& m : grid.models) {
            for (auto s : grid.scenarios) {
                RunRecord probe;
                probe.cell = coord;
                probe.model = m;
                probe.scenario = train::to_string(s);
                if (resume && fs::exists(store_dir + "/records/" + probe.file_name())) {
                    ++summary.skipped;
                } else {
                    t.missing.insert(m + "/" + probe.scenario);
                }
            }
        }
        if (!t.missing.empty()) tasks.push_back(std::move(t));
    }

    std::mutex mtx;
    std::ofstream timings(store_dir + "/timings.jsonl", std::ios::app);
    std::atomic<size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= tasks.size()) break;
            const auto t0 = std::chrono::steady_clock::now();
            const auto out = execute_cell(grid, tasks[i].coord, tasks[i].missing);
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
            std::lock_guard<std::mutex> lock(mtx);
            for (const auto& rec : out.records) {
                write_atomically(store_dir + "/records/" + rec.file_name(),
                                 record_to_json(rec) + "\n");
                json t;
                t["file"] = rec.file_name();
                t["cell_wall_ms"] = ms;
                timings << t.dump() << '\n';
                if (rec.failed) {
                    ++summary.failed;
                } else {
                    ++summary.computed;
                }
            }
        }
    };

    const int n_workers = std::max(1, workers);
    std::vector<std::thread> pool;
    for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    write_index(grid, store_dir);
    return summary;
}

std::vector<RunRecord> load_records(const std::string& store_dir) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(store_dir + "/records")) {
        if (entry.path().extension() == ".json") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    std::vector<RunRecord> records;
    for (const auto& f : files) {
        std::ifstream in(f);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        records.push_back(record_from_json(text));
    }
    return records;
}

void verify_store(const std::string& store_dir) {
    const auto grid = load_grid(store_dir + "/grid.json");
    const auto records = load_records(store_dir);

    std::set<std::string> ids;
    std::map<uint64_t, std::string> seed_owner;
    for (const auto& rec : records) {
        const std::string id = rec.cell.key() + "__" + rec.model + "__" + rec.scenario;
        if (!ids.insert(id).second) {
            throw DiagnosticError("duplicate record coordinates: " + id);
        }
        if (rec.cell.dataset_seed(grid.base_seed) != rec.seed) {
            throw DiagnosticError("record seed does not recompute from coordinates: " + id);
        }
        const auto [it, fresh] = seed_owner.emplace(rec.seed, rec.cell.key());
        if (!fresh && it->second != rec.cell.key()) {
            throw DiagnosticError("dataset seed shared across distinct cells: " + rec.cell.key() +
                                  " vs " + it->second);
        }
    }

    std::ifstream in(store_dir + "/index.json");
    if (!in) throw DiagnosticError("store index missing");
    json idx;
    in >> idx;
    if (idx.at("records").size() != records.size()) {
        throw DiagnosticError("store index does not match the record files");
    }
}

// ----------------------------- aggregation -----------------------------

bool GroupKey::operator<(const GroupKey& o) const {
    return std::tie(shift_type, intensity, relation, n_target, model, scenario) <
           std::tie(o.shift_type, o.intensity, o.relation, o.n_target, o.model, o.scenario);
}

Aggregates aggregate(const std::vector<RunRecord>& records) {
    struct Bucket {
        std::vector<double> r2, mae, nll, fshift, lshift;
    };
    std::map<GroupKey, Bucket> buckets;
    std::map<GroupKey, std::map<int, std::pair<std::optional<double>, std::optional<double>>>>
        paired;

    for (const auto& rec : records) {
        if (rec.failed) continue;
        GroupKey key{datagen::to_string(rec.cell.shift_type), rec.cell.intensity,
                     to_string(rec.cell.relation), rec.cell.n_target, rec.model, rec.scenario};
        auto& b = buckets[key];
        b.r2.push_back(rec.metrics.r2);
        b.mae.push_back(rec.metrics.mae);
        if (rec.metrics.nll) b.nll.push_back(*rec.metrics.nll);
        b.fshift.push_back(rec.drift.feature_shift);
        b.lshift.push_back(rec.drift.label_shift);

        GroupKey cell_key = key;
        cell_key.scenario.clear();
        if (rec.scenario == "transfer") {
            paired[cell_key][rec.cell.replication].first = rec.metrics.r2;
        } else if (rec.scenario == "target_baseline") {
            paired[cell_key][rec.cell.replication].second = rec.metrics.r2;
        }
    }

    Aggregates agg;
    for (const auto& [key, b] : buckets) {
        AggregateRow row;
        row.key = key;
        row.n = static_cast<int>(b.r2.size());
        row.r2_mean = vec_mean(b.r2);
        row.r2_se = vec_sd_sample(b.r2) / std::sqrt(static_cast<double>(b.r2.size()));
        row.mae_mean = vec_mean(b.mae);
        row.mae_se = vec_sd_sample(b.mae) / std::sqrt(static_cast<double>(b.mae.size()));
        if (!b.nll.empty()) {
            row.has_nll = true;
            row.nll_mean = vec_mean(b.nll);
        }
        row.feature_shift_mean = vec_mean(b.fshift);
        row.label_shift_mean = vec_mean(b.lshift);
        agg.rows.push_back(row);
    }
    for (const auto& [key, reps] : paired) {
        std::vector<double> diffs;
        for (const auto& [rep, pr] : reps) {
            if (pr.first && pr.second) diffs.push_back(*pr.first - *pr.second);
        }
        if (diffs.empty()) continue;
        GainRow row;
        row.key = key;
        row.n = static_cast<int>(diffs.size());
        row.gain_mean = vec_mean(diffs);
        row.gain_se = vec_sd_sample(diffs) / std::sqrt(static_cast<double>(diffs.size()));
        agg.gains.push_back(row);
    }
    return agg;
}

Aggregates aggregate_store(const std::string& store_dir) {
    return aggregate(load_records(store_dir));
}

void write_aggregates_csv(const Aggregates& agg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    char buf[64];
    auto fmt = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    {
        std::ofstream out(out_dir + "/summary.csv");
        out << "shift_type,intensity,relation,n_target,model,scenario,n,r2_mean,r2_se,"
               "mae_mean,mae_se,nll_mean,feature_shift,label_shift\n";
        for (const auto& r : agg.rows) {
            out << r.key.shift_type << ',' << fmt(r.key.intensity) << ',' << r.key.relation << ','
                << r.key.n_target << ',' << r.key.model << ',' << r.key.scenario << ',' << r.n
                << ',' << fmt(r.r2_mean) << ',' << fmt(r.r2_se) << ',' << fmt(r.mae_mean) << ','
                << fmt(r.mae_se) << ',' << (r.has_nll ? fmt(r.nll_mean) : "") << ','
                << fmt(r.feature_shift_mean) << ',' << fmt(r.label_shift_mean) << '\n';
        }
    }
    {
        std::ofstream out(out_dir + "/gains.csv");
        out << "shift_type,intensity,relation,n_target,model,n,gain_mean,gain_se\n";
        for (const auto& g : agg.gains) {
            out << g.key.shift_type << ',' << fmt(g.key.intensity) << ',' << g.key.relation << ','
                << g.key.n_target << ',' << g.key.model << ',' << g.n << ',' << fmt(g.gain_mean)
                << ',' << fmt(g.gain_se) << '\n';
        }
    }
}

std::map<std::string, double> shift_curve_slopes(const std::vector<RunRecord>& records,
                                                 const std::string& model) {
    struct XY {
        std::vector<double> x, y;
    };
    std::map<std::string, XY> groups;
    for (const auto& rec : records) {
        if (rec.failed || rec.model != model || rec.scenario != "transfer") continue;
        const std::string type = datagen::to_string(rec.cell.shift_type);
        double x = rec.cell.intensity;
        if (rec.cell.shift_type == datagen::ShiftType::covariate) x = rec.drift.feature_shift;
        if (rec.cell.shift_type == datagen::ShiftType::label) x = rec.drift.label_shift;
        groups[type].x.push_back(x);
        groups[type].y.push_back(rec.metrics.r2);
    }
    std::map<std::string, double> slopes;
    for (const auto& [type, xy] : groups) {
        const double mx = vec_mean(xy.x);
        const double my = vec_mean(xy.y);
        double sxx = 0.0, sxy = 0.0;
        for (size_t i = 0; i < xy.x.size(); ++i) {
            sxx += (xy.x[i] - mx) * (xy.x[i] - mx);
            sxy += (xy.x[i] - mx) * (xy.y[i] - my);
        }
        slopes[type] = sxx > 0.0 ? sxy / sxx : 0.0;
    }
    return slopes;
}

}  // namespace rrtl::harness
