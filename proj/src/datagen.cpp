#include "rrtl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

namespace rrtl::datagen {

// ----------------------------- validation -----------------------------

void RRMixtureConfig::validate() const {
    if (!(pi >= 0.0 && pi <= 1.0)) throw ConfigError("recovery.pi must lie in [0,1]");
    if (!(sigma_secured > 0.0) || !(sigma_unsecured > 0.0)) {
        throw ConfigError("recovery sigmas must be strictly positive");
    }
    if (mu_secured < 0.0 || mu_secured > 1.0 || mu_unsecured < 0.0 || mu_unsecured > 1.0) {
        throw ConfigError("recovery component means must lie in [0,1]");
    }
}

namespace {

using CustomFn = double (*)(double);

const std::map<std::string, CustomFn>& custom_registry() {
    static const std::map<std::string, CustomFn> reg = {
        {"square", [](double r) { return r * r; }},
        {"sqrt_abs", [](double r) { return std::sqrt(std::fabs(r)); }},
        {"log1p", [](double r) { return std::log1p(std::max(r, -0.999999)); }},
        {"cos", [](double r) { return std::cos(r); }},
    };
    return reg;
}

}  // namespace

std::vector<std::string> custom_fn_names() {
    std::vector<std::string> names;
    for (const auto& [k, v] : custom_registry()) names.push_back(k);
    return names;
}

void GeneratorConfig::validate() const {
    recovery.validate();
    std::set<std::string> seen;
    std::set<std::string> numeric_seen;
    for (const auto& f : features) {
        if (f.name.empty()) throw ConfigError("feature with empty name");
        if (!seen.insert(f.name).second) throw ConfigError("duplicate feature name '" + f.name + "'");
        if (f.kind == FeatureKind::categorical) {
            if (f.n_classes() < 2) throw ConfigError("categorical '" + f.name + "' needs >= 2 classes");
            if (f.tau_cat < 0.0) throw ConfigError("categorical '" + f.name + "' needs tau_cat >= 0");
            continue;
        }
        if (f.form == FeatureForm::interaction) {
            // parents must be previously defined numeric features; this also rules out cycles
            if (!numeric_seen.count(f.parent_a) || !numeric_seen.count(f.parent_b)) {
                throw ConfigError("interaction '" + f.name + "' references parents not defined before it");
            }
        } else {
            if (f.noise_sd < 0.0) throw ConfigError("feature '" + f.name + "' needs noise_sd >= 0");
            if (f.form == FeatureForm::custom && !custom_registry().count(f.custom_fn)) {
                throw ConfigError("feature '" + f.name + "': unknown custom fn '" + f.custom_fn + "'");
            }
        }
        numeric_seen.insert(f.name);
    }
}

const FeatureSpec& GeneratorConfig::feature(const std::string& name) const {
    for (const auto& f : features) {
        if (f.name == name) return f;
    }
    throw ConfigError("no feature named '" + name + "'");
}

std::vector<FeatureDecl> GeneratorConfig::feature_decls() const {
    std::vector<FeatureDecl> out;
    out.reserve(features.size());
    for (const auto& f : features) out.push_back({f.name, f.kind});
    return out;
}

std::string GeneratorConfig::schema_fingerprint() const {
    std::string id;
    for (const auto& f : features) {
        id += f.name;
        id += f.kind == FeatureKind::numeric ? ":n;" : ":c;";
    }
    return id;
}

// ----------------------------- recovery sampling -----------------------------

double mixture_cdf(const RRMixtureConfig& cfg, double r) {
    return cfg.pi * normal_cdf(r, cfg.mu_secured, cfg.sigma_secured) +
           (1.0 - cfg.pi) * normal_cdf(r, cfg.mu_unsecured, cfg.sigma_unsecured);
}

double mixture_density(const RRMixtureConfig& cfg, double r) {
    return cfg.pi * normal_pdf(r, cfg.mu_secured, cfg.sigma_secured) +
           (1.0 - cfg.pi) * normal_pdf(r, cfg.mu_unsecured, cfg.sigma_unsecured);
}

namespace {

// Bracketed bisection for F_R(r) = u. The CDF is monotone, so this converges
// unconditionally; 200 iterations cap is far above what tolerance 1e-8 needs.
double invert_mixture_cdf(const RRMixtureConfig& cfg, double u) {
    const double max_sigma = std::max(cfg.sigma_secured, cfg.sigma_unsecured);
    double lo = std::min(cfg.mu_secured, cfg.mu_unsecured) - 5.0 * max_sigma;
    double hi = std::max(cfg.mu_secured, cfg.mu_unsecured) + 5.0 * max_sigma;
    if (u <= mixture_cdf(cfg, lo)) return lo;
    if (u >= mixture_cdf(cfg, hi)) return hi;
    for (int it = 0; it < 200 && hi - lo > 1e-8; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mixture_cdf(cfg, mid) < u) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

bool secured_by_posterior(const RRMixtureConfig& cfg, double r) {
    if (cfg.pi >= 1.0) return true;
    if (cfg.pi <= 0.0) return false;
    const double ls = std::log(cfg.pi) + normal_log_pdf(r, cfg.mu_secured, cfg.sigma_secured);
    const double lu = std::log(1.0 - cfg.pi) + normal_log_pdf(r, cfg.mu_unsecured, cfg.sigma_unsecured);
    return ls > lu;
}

}  // namespace

RecoverySample sample_recovery_rates(const RRMixtureConfig& cfg, size_t n, uint64_t seed) {
    cfg.validate();
    RecoverySample out;
    out.recovery.resize(n);
    out.secured.resize(n);
    Rng rng(seed);
    for (size_t i = 0; i < n; ++i) {
        const double u = rng.uniform01();
        const double r = invert_mixture_cdf(cfg, u);
        out.secured[i] = secured_by_posterior(cfg, r) ? 1 : 0;
        out.recovery[i] = std::clamp(r, 0.0, 1.0);
    }
    return out;
}

// ----------------------------- feature generation -----------------------------

namespace {

double nonlinear_base(const FeatureSpec& spec, double r) {
    switch (spec.base_fn) {
        case BaseFn::polynomial: return std::pow(r, spec.degree);
        case BaseFn::sine: return std::sin(spec.scale * r + spec.offset);
        case BaseFn::exponential: return std::exp(spec.scale * r);
        case BaseFn::sigmoid: return sigmoid(spec.scale * (r - spec.offset));
    }
    return 0.0;
}

// Skew-normal noise draw; shape 0 reduces to N(0, sd^2). Two normals are
// consumed per draw regardless of shape, keeping draw counts stable when only
// parameters change.
double skew_normal_noise(Rng& rng, double sd, double shape) {
    const double u0 = rng.normal();
    const double u1 = rng.normal();
    const double delta = shape / std::sqrt(1.0 + shape * shape);
    return sd * (delta * std::fabs(u0) + std::sqrt(1.0 - delta * delta) * u1);
}

}  // namespace

std::vector<double> gen_numeric_feature(const FeatureSpec& spec,
                                        const std::vector<double>& recovery,
                                        const std::map<std::string, std::vector<double>>& parents,
                                        uint64_t seed) {
    if (spec.kind != FeatureKind::numeric) throw ConfigError("gen_numeric_feature on categorical spec");
    const size_t n = recovery.size();
    std::vector<double> x(n);
    Rng rng(seed);

    switch (spec.form) {
        case FeatureForm::linear:
            for (size_t i = 0; i < n; ++i) {
                x[i] = spec.beta * recovery[i] + spec.intercept +
                       skew_normal_noise(rng, spec.noise_sd, spec.skew);
            }
            break;
        case FeatureForm::nonlinear:
            for (size_t i = 0; i < n; ++i) {
                x[i] = spec.beta * nonlinear_base(spec, recovery[i]) + spec.noise_sd * rng.normal();
            }
            break;
        case FeatureForm::custom: {
            const auto fn = custom_registry().at(spec.custom_fn);
            for (size_t i = 0; i < n; ++i) {
                x[i] = fn(recovery[i]) + spec.noise_sd * rng.normal();
            }
            break;
        }
        case FeatureForm::interaction: {
            const auto a = parents.find(spec.parent_a);
            const auto b = parents.find(spec.parent_b);
            if (a == parents.end() || b == parents.end()) {
                throw SchemaError("interaction '" + spec.name + "': missing parent feature");
            }
            for (size_t i = 0; i < n; ++i) {
                x[i] = spec.combine == Combine::multiply ? a->second[i] * b->second[i]
                                                         : a->second[i] + b->second[i];
            }
            break;
        }
    }
    return x;
}

std::vector<int> gen_categorical_feature(const FeatureSpec& spec,
                                         const std::vector<double>& recovery,
                                         const std::vector<uint8_t>& secured,
                                         uint64_t seed) {
    if (spec.kind != FeatureKind::categorical) throw ConfigError("gen_categorical_feature on numeric spec");
    const int c_count = spec.n_classes();
    const size_t n = recovery.size();
    std::vector<int> x(n);
    std::vector<double> logits(static_cast<size_t>(c_count));
    Rng rng(seed);

    for (size_t i = 0; i < n; ++i) {
        const double r = recovery[i];
        const double sec = secured[i] ? 1.0 : 0.0;
        double max_logit = -1e300;
        for (int c = 0; c < c_count; ++c) {
            const auto& w = spec.weights[static_cast<size_t>(c)];
            logits[c] = w[0] + w[1] * r + w[2] * r * r + w[3] * sec + spec.tau_cat * rng.normal();
            max_logit = std::max(max_logit, logits[c]);
        }
        double total = 0.0;
        for (int c = 0; c < c_count; ++c) {
            logits[c] = std::exp(logits[c] - max_logit);
            total += logits[c];
        }
        const double u = rng.uniform01() * total;
        double acc = 0.0;
        int pick = c_count - 1;
        for (int c = 0; c < c_count; ++c) {
            acc += logits[c];
            if (u < acc) {
                pick = c;
                break;
            }
        }
        x[i] = pick;
    }
    return x;
}

SimDataset generate_dataset(const GeneratorConfig& cfg, size_t n, uint64_t seed,
                            const std::string& domain) {
    cfg.validate();
    if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");

    Rng root(seed);
    auto rr = sample_recovery_rates(cfg.recovery, n, root.derive("recovery").seed());

    SimDataset ds;
    ds.recovery = std::move(rr.recovery);
    ds.secured = std::move(rr.secured);
    ds.schema_id = cfg.schema_fingerprint();
    ds.domain = domain;
    ds.seed = seed;

    std::map<std::string, std::vector<double>> numeric_done;
    for (const auto& spec : cfg.features) {
        ds.features.push_back({spec.name, spec.kind});
        const uint64_t sub = root.derive("feature:" + spec.name).seed();
        if (spec.kind == FeatureKind::numeric) {
            auto col = gen_numeric_feature(spec, ds.recovery, numeric_done, sub);
            numeric_done[spec.name] = col;
            ds.numeric_cols.push_back(std::move(col));
            ds.cat_cols.emplace_back();
        } else {
            ds.numeric_cols.emplace_back();
            ds.cat_cols.push_back(gen_categorical_feature(spec, ds.recovery, ds.secured, sub));
        }
    }
    return ds;
}

std::pair<SimDataset, SimDataset> generate_domain_pair(const GeneratorConfig& base,
                                                       const ShiftSpec& shift,
                                                       size_t n_source, size_t n_target,
                                                       uint64_t seed) {
    if (n_source < 1 || n_target < 1) throw ConfigError("generate_domain_pair: counts must be >= 1");
    const GeneratorConfig shifted = apply_shift(base, shift);
    Rng root(seed);
    auto source = generate_dataset(base, n_source, root.derive("source").seed(), "source");
    auto target = generate_dataset(shifted, n_target, root.derive("target").seed(), "target");
    return {std::move(source), std::move(target)};
}

// ----------------------------- shifts -----------------------------

const char* to_string(ShiftType t) {
    switch (t) {
        case ShiftType::none: return "none";
        case ShiftType::covariate: return "covariate";
        case ShiftType::conditional: return "conditional";
        case ShiftType::label: return "label";
        case ShiftType::combined: return "combined";
    }
    return "none";
}

ShiftType shift_type_from_string(const std::string& s) {
    if (s == "none") return ShiftType::none;
    if (s == "covariate") return ShiftType::covariate;
    if (s == "conditional") return ShiftType::conditional;
    if (s == "label") return ShiftType::label;
    if (s == "combined") return ShiftType::combined;
    throw ConfigError("unknown shift type '" + s + "'");
}

namespace {

enum class ParamClass { marginal, conditional_link, label };

// Classifies a perturbation target. Marginal feature parameters (intercepts,
// noise scales) belong to covariate shift; R->X link parameters (betas,
// nonlinear shapes, categorical w1/w2) to conditional shift; the recovery
// mixture to label shift.
ParamClass classify_param(const std::string& param, std::string* feature_out, std::string* field_out) {
    const auto dot1 = param.find('.');
    if (dot1 == std::string::npos) throw ConfigError("malformed perturbation target '" + param + "'");
    const std::string head = param.substr(0, dot1);
    if (head == "recovery") {
        const std::string field = param.substr(dot1 + 1);
        if (field != "pi" && field != "mu_secured" && field != "mu_unsecured") {
            throw ConfigError("recovery parameter '" + field + "' is not perturbable");
        }
        *field_out = field;
        return ParamClass::label;
    }
    if (head != "feature") throw ConfigError("malformed perturbation target '" + param + "'");
    const auto dot2 = param.rfind('.');
    if (dot2 == dot1) throw ConfigError("malformed perturbation target '" + param + "'");
    *feature_out = param.substr(dot1 + 1, dot2 - dot1 - 1);
    const std::string field = param.substr(dot2 + 1);
    *field_out = field;
    if (field == "intercept" || field == "noise_sd") return ParamClass::marginal;
    if (field == "beta" || field == "scale" || field == "degree" || field == "w1" || field == "w2") {
        return ParamClass::conditional_link;
    }
    throw ConfigError("feature parameter '" + field + "' is not perturbable");
}

bool class_allowed(ShiftType type, ParamClass cls) {
    switch (type) {
        case ShiftType::none: return false;
        case ShiftType::covariate: return cls == ParamClass::marginal;
        case ShiftType::conditional: return cls == ParamClass::conditional_link;
        case ShiftType::label: return cls == ParamClass::label;
        case ShiftType::combined: return true;
    }
    return false;
}

double perturbed_value(double v, PerturbOp op, double step, double s) {
    if (op == PerturbOp::add) return v + s * step;
    if (step <= 0.0) throw ConfigError("multiplicative perturbation step must be positive");
    return v * std::pow(step, s);
}

}  // namespace

void ShiftSpec::validate() const {
    if (intensity < 0.0) throw ConfigError("shift intensity must be non-negative");
    std::string feat, field;
    for (const auto& p : perturbations) {
        const ParamClass cls = classify_param(p.param, &feat, &field);
        if (!class_allowed(shift_type, cls)) {
            throw ConfigError(std::string("perturbation of '") + p.param +
                              "' is not allowed under shift type '" + to_string(shift_type) + "'");
        }
    }
}

GeneratorConfig apply_shift(const GeneratorConfig& base, const ShiftSpec& shift) {
    base.validate();
    shift.validate();
    GeneratorConfig out = base;
    if (shift.shift_type == ShiftType::none || shift.intensity == 0.0) return out;

    const double s = shift.intensity;
    for (const auto& p : shift.perturbations) {
        std::string feat, field;
        classify_param(p.param, &feat, &field);
        if (feat.empty()) {
            RRMixtureConfig& rr = out.recovery;
            double* v = field == "pi" ? &rr.pi : field == "mu_secured" ? &rr.mu_secured : &rr.mu_unsecured;
            *v = perturbed_value(*v, p.op, p.step, s);
            if (field == "pi") rr.pi = std::clamp(rr.pi, 0.0, 1.0);
        } else {
            bool found = false;
            for (auto& f : out.features) {
                if (f.name != feat) continue;
                found = true;
                if (field == "intercept") {
                    f.intercept = perturbed_value(f.intercept, p.op, p.step, s);
                } else if (field == "noise_sd") {
                    f.noise_sd = perturbed_value(f.noise_sd, p.op, p.step, s);
                } else if (field == "beta") {
                    f.beta = perturbed_value(f.beta, p.op, p.step, s);
                } else if (field == "scale") {
                    f.scale = perturbed_value(f.scale, p.op, p.step, s);
                } else if (field == "degree") {
                    f.degree = perturbed_value(f.degree, p.op, p.step, s);
                } else if (field == "w1" || field == "w2") {
                    if (f.kind != FeatureKind::categorical) {
                        throw ConfigError("'" + p.param + "' targets a non-categorical feature");
                    }
                    const size_t wi = field == "w1" ? 1 : 2;
                    for (auto& row : f.weights) row[wi] = perturbed_value(row[wi], p.op, p.step, s);
                }
            }
            if (!found) throw ConfigError("perturbation targets unknown feature '" + feat + "'");
        }
    }
    out.validate();
    return out;
}

// ----------------------------- defaults -----------------------------

GeneratorConfig default_generator_config() {
    GeneratorConfig cfg;
    // Calibrated so that clipped R has mean ~ 0.72, sd ~ 0.36, skew ~ -0.85.
    cfg.recovery.pi = 0.669;
    cfg.recovery.mu_secured = 0.971;
    cfg.recovery.sigma_secured = 0.038;
    cfg.recovery.mu_unsecured = 0.217;
    cfg.recovery.sigma_unsecured = 0.147;

    auto linear = [](std::string name, double beta, double intercept, double sd, double skew) {
        FeatureSpec f;
        f.name = std::move(name);
        f.kind = FeatureKind::numeric;
        f.form = FeatureForm::linear;
        f.beta = beta;
        f.intercept = intercept;
        f.noise_sd = sd;
        f.skew = skew;
        return f;
    };

    // Noise levels keep the best attainable validation R^2 well below 1, so
    // small target samples genuinely limit from-scratch training.
    cfg.features.push_back(linear("lin_exposure", 1.5, 0.5, 1.0, 0.0));
    cfg.features.push_back(linear("lin_collateral", 2.0, -0.3, 1.55, 2.0));
    cfg.features.push_back(linear("lin_rating", -1.0, 2.0, 1.2, 0.0));
    cfg.features.push_back(linear("lin_macro", 0.5, 0.0, 2.0, 0.0));

    {
        FeatureSpec f;
        f.name = "nl_quadratic";
        f.kind = FeatureKind::numeric;
        f.form = FeatureForm::nonlinear;
        f.base_fn = BaseFn::polynomial;
        f.degree = 2.0;
        f.beta = 1.8;
        f.noise_sd = 0.9;
        cfg.features.push_back(f);
    }
    {
        FeatureSpec f;
        f.name = "nl_sigmoid";
        f.kind = FeatureKind::numeric;
        f.form = FeatureForm::nonlinear;
        f.base_fn = BaseFn::sigmoid;
        f.scale = 8.0;
        f.offset = 0.5;
        f.beta = 1.2;
        f.noise_sd = 0.8;
        cfg.features.push_back(f);
    }
    {
        FeatureSpec f;
        f.name = "inter_product";
        f.kind = FeatureKind::numeric;
        f.form = FeatureForm::interaction;
        f.parent_a = "lin_exposure";
        f.parent_b = "lin_rating";
        f.combine = Combine::multiply;
        cfg.features.push_back(f);
    }
    {
        FeatureSpec f;
        f.name = "cat_segment";
        f.kind = FeatureKind::categorical;
        f.tau_cat = 1.0;
        f.weights = {
            {0.0, -4.0, 0.0, 0.0},
            {0.5, -1.0, 1.0, 0.0},
            {0.5, 1.0, 1.0, 1.5},
            {0.0, 4.0, 0.0, 1.0},
        };
        cfg.features.push_back(f);
    }
    return cfg;
}

ShiftSpec default_shift(ShiftType type, double intensity) {
    ShiftSpec spec;
    spec.shift_type = type;
    spec.intensity = intensity;
    const std::vector<Perturbation> covariate = {
        {"feature.lin_exposure.intercept", PerturbOp::add, 0.8},
        {"feature.lin_macro.intercept", PerturbOp::add, -0.6},
        {"feature.lin_collateral.noise_sd", PerturbOp::mul, 1.25},
    };
    const std::vector<Perturbation> conditional = {
        {"feature.lin_exposure.beta", PerturbOp::mul, 0.7},
        {"feature.lin_rating.beta", PerturbOp::mul, 0.65},
        {"feature.nl_sigmoid.scale", PerturbOp::add, -2.0},
        {"feature.cat_segment.w1", PerturbOp::mul, 0.7},
    };
    const std::vector<Perturbation> label = {
        {"recovery.pi", PerturbOp::add, -0.15},
    };
    switch (type) {
        case ShiftType::none:
            break;
        case ShiftType::covariate:
            spec.perturbations = covariate;
            break;
        case ShiftType::conditional:
            spec.perturbations = conditional;
            break;
        case ShiftType::label:
            spec.perturbations = label;
            break;
        case ShiftType::combined:
            spec.perturbations = covariate;
            spec.perturbations.insert(spec.perturbations.end(), conditional.begin(), conditional.end());
            spec.perturbations.insert(spec.perturbations.end(), label.begin(), label.end());
            break;
    }
    return spec;
}

}  // namespace rrtl::datagen
