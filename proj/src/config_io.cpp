#include "rrtl/config_io.hpp"

#include <fstream>

#include "json.hpp"

namespace rrtl::datagen {

namespace {

using nlohmann::json;

const char* form_name(FeatureForm f) {
    switch (f) {
        case FeatureForm::linear: return "linear";
        case FeatureForm::nonlinear: return "nonlinear";
        case FeatureForm::custom: return "custom";
        case FeatureForm::interaction: return "interaction";
    }
    return "linear";
}

FeatureForm form_from(const std::string& s) {
    if (s == "linear") return FeatureForm::linear;
    if (s == "nonlinear") return FeatureForm::nonlinear;
    if (s == "custom") return FeatureForm::custom;
    if (s == "interaction") return FeatureForm::interaction;
    throw ConfigError("unknown feature form '" + s + "'");
}

const char* base_fn_name(BaseFn f) {
    switch (f) {
        case BaseFn::polynomial: return "polynomial";
        case BaseFn::sine: return "sine";
        case BaseFn::exponential: return "exponential";
        case BaseFn::sigmoid: return "sigmoid";
    }
    return "polynomial";
}

BaseFn base_fn_from(const std::string& s) {
    if (s == "polynomial") return BaseFn::polynomial;
    if (s == "sine") return BaseFn::sine;
    if (s == "exponential") return BaseFn::exponential;
    if (s == "sigmoid") return BaseFn::sigmoid;
    throw ConfigError("unknown base_fn '" + s + "'");
}

json feature_to_json(const FeatureSpec& f) {
    json j;
    j["name"] = f.name;
    j["kind"] = to_string(f.kind);
    if (f.kind == FeatureKind::categorical) {
        j["tau_cat"] = f.tau_cat;
        j["weights"] = json::array();
        for (const auto& row : f.weights) j["weights"].push_back({row[0], row[1], row[2], row[3]});
        return j;
    }
    j["form"] = form_name(f.form);
    switch (f.form) {
        case FeatureForm::linear:
            j["beta"] = f.beta;
            j["intercept"] = f.intercept;
            j["noise_sd"] = f.noise_sd;
            j["skew"] = f.skew;
            break;
        case FeatureForm::nonlinear:
            j["beta"] = f.beta;
            j["base_fn"] = base_fn_name(f.base_fn);
            j["degree"] = f.degree;
            j["scale"] = f.scale;
            j["offset"] = f.offset;
            j["noise_sd"] = f.noise_sd;
            break;
        case FeatureForm::custom:
            j["fn"] = f.custom_fn;
            j["noise_sd"] = f.noise_sd;
            break;
        case FeatureForm::interaction:
            j["parent_a"] = f.parent_a;
            j["parent_b"] = f.parent_b;
            j["combine"] = f.combine == Combine::multiply ? "multiply" : "add";
            break;
    }
    return j;
}

FeatureSpec feature_from_json(const json& j) {
    FeatureSpec f;
    f.name = j.at("name").get<std::string>();
    f.kind = j.value("kind", "numeric") == "categorical" ? FeatureKind::categorical
                                                         : FeatureKind::numeric;
    if (f.kind == FeatureKind::categorical) {
        f.tau_cat = j.value("tau_cat", 0.0);
        for (const auto& row : j.at("weights")) {
            if (row.size() != 4) throw ConfigError("categorical weight rows need 4 entries");
            f.weights.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>(),
                                 row[3].get<double>()});
        }
        return f;
    }
    f.form = form_from(j.value("form", "linear"));
    f.beta = j.value("beta", 1.0);
    f.intercept = j.value("intercept", 0.0);
    f.noise_sd = j.value("noise_sd", 0.0);
    f.skew = j.value("skew", 0.0);
    if (j.contains("base_fn")) f.base_fn = base_fn_from(j.at("base_fn").get<std::string>());
    f.degree = j.value("degree", 2.0);
    f.scale = j.value("scale", 1.0);
    f.offset = j.value("offset", 0.0);
    f.custom_fn = j.value("fn", "");
    f.parent_a = j.value("parent_a", "");
    f.parent_b = j.value("parent_b", "");
    if (j.value("combine", "multiply") == "add") f.combine = Combine::add;
    return f;
}

}  // namespace

std::string generator_config_to_json(const GeneratorConfig& cfg) {
    json j;
    j["recovery"] = {{"pi", cfg.recovery.pi},
                     {"mu_secured", cfg.recovery.mu_secured},
                     {"sigma_secured", cfg.recovery.sigma_secured},
                     {"mu_unsecured", cfg.recovery.mu_unsecured},
                     {"sigma_unsecured", cfg.recovery.sigma_unsecured}};
    j["features"] = json::array();
    for (const auto& f : cfg.features) j["features"].push_back(feature_to_json(f));
    return j.dump(2);
}

GeneratorConfig generator_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("generator config is not valid JSON: ") + e.what());
    }
    GeneratorConfig cfg;
    const auto& r = j.at("recovery");
    cfg.recovery.pi = r.at("pi").get<double>();
    cfg.recovery.mu_secured = r.at("mu_secured").get<double>();
    cfg.recovery.sigma_secured = r.at("sigma_secured").get<double>();
    cfg.recovery.mu_unsecured = r.at("mu_unsecured").get<double>();
    cfg.recovery.sigma_unsecured = r.at("sigma_unsecured").get<double>();
    cfg.features.clear();
    for (const auto& f : j.at("features")) cfg.features.push_back(feature_from_json(f));
    cfg.validate();
    return cfg;
}

GeneratorConfig load_generator_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open generator config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return generator_config_from_json(text);
}

void save_generator_config(const GeneratorConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write generator config '" + path + "'");
    out << generator_config_to_json(cfg) << '\n';
}

std::string shift_spec_to_json(const ShiftSpec& spec) {
    json j;
    j["shift_type"] = to_string(spec.shift_type);
    j["intensity"] = spec.intensity;
    j["perturbations"] = json::array();
    for (const auto& p : spec.perturbations) {
        j["perturbations"].push_back({{"param", p.param},
                                      {"op", p.op == PerturbOp::add ? "add" : "mul"},
                                      {"step", p.step}});
    }
    return j.dump(2);
}

ShiftSpec shift_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("shift spec is not valid JSON: ") + e.what());
    }
    ShiftSpec spec;
    spec.shift_type = shift_type_from_string(j.at("shift_type").get<std::string>());
    spec.intensity = j.value("intensity", 0.0);
    if (j.contains("perturbations")) {
        for (const auto& p : j.at("perturbations")) {
            Perturbation pert;
            pert.param = p.at("param").get<std::string>();
            pert.op = p.value("op", "add") == "mul" ? PerturbOp::mul : PerturbOp::add;
            pert.step = p.at("step").get<double>();
            spec.perturbations.push_back(pert);
        }
    }
    spec.validate();
    return spec;
}

}  // namespace rrtl::datagen
