#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rrtl/dataset.hpp"
#include "rrtl/rng.hpp"

namespace rrtl::datagen {

// ----------------------------- recovery mixture -----------------------------

// Two-component Gaussian mixture over recovery rates: a high-recovery
// (secured) and a low-recovery (unsecured) regime.
struct RRMixtureConfig {
    double pi = 0.669;            // probability of the secured component
    double mu_secured = 0.971;
    double sigma_secured = 0.038;
    double mu_unsecured = 0.217;
    double sigma_unsecured = 0.147;

    void validate() const;
};

// F_R(r) = pi * Phi_secured(r) + (1 - pi) * Phi_unsecured(r)
double mixture_cdf(const RRMixtureConfig& cfg, double r);

// Mixture density (before clipping).
double mixture_density(const RRMixtureConfig& cfg, double r);

// Draws n recovery rates by numerically inverting mixture_cdf (bisection to
// 1e-8), clips to [0,1], and assigns each draw to the component with the
// higher posterior responsibility at the drawn value.
struct RecoverySample {
    std::vector<double> recovery;
    std::vector<uint8_t> secured;
};
RecoverySample sample_recovery_rates(const RRMixtureConfig& cfg, size_t n, uint64_t seed);

// ----------------------------- feature specs -----------------------------

enum class FeatureForm { linear, nonlinear, custom, interaction };
enum class BaseFn { polynomial, sine, exponential, sigmoid };
enum class Combine { multiply, add };

// Conditional generation rule for one feature. Numeric forms:
//   linear:      X = beta * R + intercept + eps,   eps ~ skew-normal(noise_sd, skew)
//   nonlinear:   X = beta * f(R) + eps             f in {polynomial, sine, exponential, sigmoid}
//   custom:      X = g(R) + eps                    g picked from a named registry
//   interaction: X = f(X_a, X_b)                   no fresh noise
// Categorical: per class c, logit_c = w0c + w1c*R + w2c*R^2 + w3c*secured + eps_c
// with eps_c ~ N(0, tau_cat^2), softmax, then a single class draw.
struct FeatureSpec {
    std::string name;
    FeatureKind kind = FeatureKind::numeric;
    FeatureForm form = FeatureForm::linear;

    // linear / nonlinear / custom
    double beta = 1.0;
    double intercept = 0.0;
    double noise_sd = 0.0;
    double skew = 0.0;            // linear only; 0 = symmetric noise
    BaseFn base_fn = BaseFn::polynomial;
    double degree = 2.0;          // polynomial exponent
    double scale = 1.0;           // sine/exponential/sigmoid slope
    double offset = 0.0;          // sine phase / sigmoid midpoint
    std::string custom_fn;        // registry key for form == custom

    // interaction
    std::string parent_a;
    std::string parent_b;
    Combine combine = Combine::multiply;

    // categorical: weights[c] = {w0c, w1c, w2c, w3c}
    std::vector<std::array<double, 4>> weights;
    double tau_cat = 0.0;

    int n_classes() const { return static_cast<int>(weights.size()); }
};

// Names of the registered custom R -> X functions.
std::vector<std::string> custom_fn_names();

struct GeneratorConfig {
    RRMixtureConfig recovery;
    std::vector<FeatureSpec> features;

    void validate() const;
    const FeatureSpec& feature(const std::string& name) const;
    std::vector<FeatureDecl> feature_decls() const;
    std::string schema_fingerprint() const;
};

// ----------------------------- shifts -----------------------------

enum class ShiftType { none, covariate, conditional, label, combined };

const char* to_string(ShiftType t);
ShiftType shift_type_from_string(const std::string& s);

enum class PerturbOp { add, mul };

// One parameter edit. `param` addresses either the recovery mixture
// ("recovery.pi", "recovery.mu_secured", "recovery.mu_unsecured") or a
// feature field ("feature.<name>.<field>" with field in {intercept, noise_sd,
// beta, scale, degree, w1, w2}). Applied value: add -> v + s*step,
// mul -> v * step^s, so intensity s is a single monotone dial and s = 0 is
// the identity.
struct Perturbation {
    std::string param;
    PerturbOp op = PerturbOp::add;
    double step = 0.0;
};

struct ShiftSpec {
    ShiftType shift_type = ShiftType::none;
    double intensity = 0.0;
    std::vector<Perturbation> perturbations;

    void validate() const;  // checks each param against the type's allowed set
};

// Returns a new config with the shift applied; `base` is untouched.
GeneratorConfig apply_shift(const GeneratorConfig& base, const ShiftSpec& shift);

// ----------------------------- generation -----------------------------

// One numeric feature conditional on R (and previously generated parents).
std::vector<double> gen_numeric_feature(const FeatureSpec& spec,
                                        const std::vector<double>& recovery,
                                        const std::map<std::string, std::vector<double>>& parents,
                                        uint64_t seed);

// One categorical feature via softmax sampling of the class logits.
std::vector<int> gen_categorical_feature(const FeatureSpec& spec,
                                         const std::vector<double>& recovery,
                                         const std::vector<uint8_t>& secured,
                                         uint64_t seed);

// Full dataset draw: recovery rates first, then every feature in config
// order. Sub-streams are derived per feature name, so regenerating a parent
// regenerates its interactions exactly.
SimDataset generate_dataset(const GeneratorConfig& cfg, size_t n, uint64_t seed,
                            const std::string& domain);

// Source from `base`, target from apply_shift(base, shift); the two draws use
// independent sub-seeds derived from `seed`.
std::pair<SimDataset, SimDataset> generate_domain_pair(const GeneratorConfig& base,
                                                       const ShiftSpec& shift,
                                                       size_t n_source, size_t n_target,
                                                       uint64_t seed);

// Default eight-feature archetype (4 linear, 2 nonlinear, 1 interaction,
// 1 categorical with C=4) with the recovery mixture calibrated to
// mean ~ 0.72, sd ~ 0.36, skew ~ -0.85 after clipping.
GeneratorConfig default_generator_config();

// Standard perturbation map for a shift type at the given intensity, used by
// the experiment grids.
ShiftSpec default_shift(ShiftType type, double intensity);

}  // namespace rrtl::datagen
