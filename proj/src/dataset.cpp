#include "rrtl/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace rrtl {

SimDataset SimDataset::project(const std::vector<std::string>& names) const {
    SimDataset out;
    out.recovery = recovery;
    out.secured = secured;
    out.domain = domain;
    out.seed = seed;
    for (const auto& name : names) {
        const int j = feature_index(name);
        if (j < 0) throw SchemaError("project: unknown feature '" + name + "'");
        out.features.push_back(features[static_cast<size_t>(j)]);
        out.numeric_cols.push_back(numeric_cols[static_cast<size_t>(j)]);
        out.cat_cols.push_back(cat_cols[static_cast<size_t>(j)]);
    }
    std::string id;
    for (const auto& f : out.features) {
        id += f.name;
        id += f.kind == FeatureKind::numeric ? ":n;" : ":c;";
    }
    out.schema_id = id;
    return out;
}

SimDataset SimDataset::take_rows(const std::vector<size_t>& idx) const {
    SimDataset out;
    out.features = features;
    out.schema_id = schema_id;
    out.domain = domain;
    out.seed = seed;
    out.numeric_cols.resize(numeric_cols.size());
    out.cat_cols.resize(cat_cols.size());
    out.recovery.reserve(idx.size());
    out.secured.reserve(idx.size());
    for (size_t j = 0; j < features.size(); ++j) {
        if (!numeric_cols[j].empty()) out.numeric_cols[j].reserve(idx.size());
        if (!cat_cols[j].empty()) out.cat_cols[j].reserve(idx.size());
    }
    for (size_t i : idx) {
        out.recovery.push_back(recovery.at(i));
        out.secured.push_back(secured.at(i));
        for (size_t j = 0; j < features.size(); ++j) {
            if (!numeric_cols[j].empty()) out.numeric_cols[j].push_back(numeric_cols[j][i]);
            if (!cat_cols[j].empty()) out.cat_cols[j].push_back(cat_cols[j][i]);
        }
    }
    return out;
}

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_dataset_csv(const SimDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");

    for (const auto& f : ds.features) out << f.name << ',';
    out << "recovery_rate,secured\n";

    for (size_t i = 0; i < ds.rows(); ++i) {
        for (size_t j = 0; j < ds.features.size(); ++j) {
            if (ds.features[j].kind == FeatureKind::numeric) {
                out << format_double(ds.numeric_cols[j][i]);
            } else {
                out << ds.cat_cols[j][i];
            }
            out << ',';
        }
        out << format_double(ds.recovery[i]) << ',' << int(ds.secured[i]) << '\n';
    }
    if (!out) throw IoError("write failed for '" + path + "'");

    nlohmann::json meta;
    meta["seed"] = ds.seed;
    meta["schema_id"] = ds.schema_id;
    meta["domain"] = ds.domain;
    meta["kinds"] = nlohmann::json::object();
    for (const auto& f : ds.features) meta["kinds"][f.name] = to_string(f.kind);
    std::ofstream mout(path + ".meta.json");
    if (!mout) throw IoError("cannot open sidecar for '" + path + "'");
    mout << meta.dump(2) << '\n';
}

SimDataset load_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");

    nlohmann::json meta;
    {
        std::ifstream min(path + ".meta.json");
        if (!min) throw IoError("missing sidecar '" + path + ".meta.json'");
        min >> meta;
    }

    SimDataset ds;
    ds.seed = meta.value("seed", 0ull);
    ds.schema_id = meta.value("schema_id", "");
    ds.domain = meta.value("domain", "");

    std::string header;
    if (!std::getline(in, header)) throw IoError("empty dataset file '" + path + "'");
    std::vector<std::string> cols;
    {
        std::stringstream ss(header);
        std::string tok;
        while (std::getline(ss, tok, ',')) cols.push_back(tok);
    }
    if (cols.size() < 2 || cols[cols.size() - 2] != "recovery_rate" || cols.back() != "secured") {
        throw IoError("dataset '" + path + "' lacks recovery_rate/secured columns");
    }
    const size_t n_feat = cols.size() - 2;
    for (size_t j = 0; j < n_feat; ++j) {
        FeatureDecl d;
        d.name = cols[j];
        const std::string kind = meta["kinds"].value(d.name, "numeric");
        d.kind = kind == "categorical" ? FeatureKind::categorical : FeatureKind::numeric;
        ds.features.push_back(d);
    }
    ds.numeric_cols.resize(n_feat);
    ds.cat_cols.resize(n_feat);

    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        for (size_t j = 0; j < n_feat; ++j) {
            std::getline(ss, tok, ',');
            if (ds.features[j].kind == FeatureKind::numeric) {
                ds.numeric_cols[j].push_back(std::stod(tok));
            } else {
                ds.cat_cols[j].push_back(std::stoi(tok));
            }
        }
        std::getline(ss, tok, ',');
        ds.recovery.push_back(std::stod(tok));
        std::getline(ss, tok, ',');
        ds.secured.push_back(static_cast<uint8_t>(std::stoi(tok)));
    }
    return ds;
}

}  // namespace rrtl
