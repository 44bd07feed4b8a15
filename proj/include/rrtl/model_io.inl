#pragma once

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace rrtl::model {

inline double mdn_nll(const MixtureOutput& out, double r) {
    double max_l = -1e300;
    std::vector<double> lk(out.components());
    for (size_t k = 0; k < out.components(); ++k) {
        lk[k] = (out.alpha[k] > 0.0 ? std::log(out.alpha[k]) : -1e300) +
                normal_log_pdf(r, out.mu[k], out.sigma[k]);
        max_l = std::max(max_l, lk[k]);
    }
    double s = 0.0;
    for (double l : lk) s += std::exp(l - max_l);
    return -(max_l + std::log(s));
}

inline double mixture_mean(const MixtureOutput& out) {
    double m = 0.0;
    for (size_t k = 0; k < out.components(); ++k) m += out.alpha[k] * out.mu[k];
    return m;
}

inline double mixture_pdf(const MixtureOutput& out, double r) {
    double p = 0.0;
    for (size_t k = 0; k < out.components(); ++k) {
        p += out.alpha[k] * normal_pdf(r, out.mu[k], out.sigma[k]);
    }
    return p;
}

namespace detail {

inline nlohmann::json model_config_json(const ModelConfig& c) {
    return {{"token_dim", c.token_dim},
            {"depth", c.depth},
            {"heads", c.heads},
            {"ffn_expansion", c.ffn_expansion},
            {"components", c.components},
            {"alpha_temperature", c.alpha_temperature},
            {"mu_max", c.mu_max},
            {"sigma_floor", c.sigma_floor},
            {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
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

}  // namespace detail

template <typename R>
void save_checkpoint(const FtModel<R>& m, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["head"] = m.head_kind() == HeadKind::mdn ? "mdn" : "regression";
    manifest["init_seed"] = m.init_seed();
    manifest["model_config"] = detail::model_config_json(m.config());
    manifest["schema_vocab"] =
        nlohmann::json::parse(schema::manifest_json(m.universe(), m.vocab(), {}));
    manifest["params"] = nlohmann::json::array();
    for (const auto* p : m.params()) {
        manifest["params"].push_back(
            {{"name", p->name}, {"rows", p->v.rows()}, {"cols", p->v.cols()}});
    }
    {
        std::ofstream out(dir + "/manifest.json");
        if (!out) throw IoError("cannot write checkpoint manifest in '" + dir + "'");
        out << manifest.dump(2) << '\n';
    }
    std::ofstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write checkpoint params in '" + dir + "'");
    for (const auto* p : m.params()) {
        for (Eigen::Index i = 0; i < p->v.rows(); ++i) {
            for (Eigen::Index j = 0; j < p->v.cols(); ++j) {
                const double v = static_cast<double>(p->v(i, j));
                bin.write(reinterpret_cast<const char*>(&v), sizeof(double));
            }
        }
    }
}

template <typename R>
FtModel<R> load_checkpoint(const std::string& dir) {
    nlohmann::json manifest;
    {
        std::ifstream in(dir + "/manifest.json");
        if (!in) throw IoError("missing checkpoint manifest in '" + dir + "'");
        in >> manifest;
    }
    if (manifest.value("version", "") != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version in '" + dir + "'");
    }
    schema::Schema sch;
    schema::CategoryVocab vocab;
    schema::parse_manifest_json(manifest.at("schema_vocab").dump(), &sch, &vocab, nullptr);
    const ModelConfig cfg = detail::model_config_from_json(manifest.at("model_config"));
    const HeadKind head =
        manifest.value("head", "mdn") == "mdn" ? HeadKind::mdn : HeadKind::regression;
    FtModel<R> m(cfg, sch, vocab, head, manifest.value("init_seed", 0ull));

    const auto& table = manifest.at("params");
    if (table.size() != m.params().size()) {
        throw IoError("checkpoint parameter table does not match the rebuilt model");
    }
    std::ifstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) throw IoError("missing checkpoint params in '" + dir + "'");
    size_t idx = 0;
    for (auto* p : m.params()) {
        const auto& row = table[idx++];
        if (row.at("name").get<std::string>() != p->name ||
            row.at("rows").get<Eigen::Index>() != p->v.rows() ||
            row.at("cols").get<Eigen::Index>() != p->v.cols()) {
            throw IoError("checkpoint parameter '" + p->name + "' mismatches the manifest");
        }
        for (Eigen::Index i = 0; i < p->v.rows(); ++i) {
            for (Eigen::Index j = 0; j < p->v.cols(); ++j) {
                double v = 0.0;
                bin.read(reinterpret_cast<char*>(&v), sizeof(double));
                p->v(i, j) = static_cast<R>(v);
            }
        }
    }
    if (!bin) throw IoError("checkpoint params truncated in '" + dir + "'");
    return m;
}

}  // namespace rrtl::model
