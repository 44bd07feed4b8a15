#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rrtl/datagen.hpp"
#include "rrtl/model.hpp"
#include "rrtl/train.hpp"

using namespace rrtl;
using namespace rrtl::model;

namespace {

struct Fixture {
    datagen::GeneratorConfig gen = datagen::default_generator_config();
    SimDataset ds;
    schema::Schema sch;
    schema::CategoryVocab vocab;
    schema::Standardizer standardizer;
    schema::EncodedBatch batch;

    explicit Fixture(size_t n = 16, uint64_t seed = 7) {
        ds = datagen::generate_dataset(gen, n, seed, "source");
        sch = schema::build_schema(ds.features, ds.features);
        vocab = schema::build_vocab(ds, ds, sch);
        standardizer = schema::fit_standardizer(ds, sch);
        batch = schema::encode(ds, sch, vocab, standardizer, sch.presence("source"));
    }
};

ModelConfig small_config(int d = 16, int depth = 2, int heads = 2) {
    ModelConfig cfg;
    cfg.token_dim = d;
    cfg.depth = depth;
    cfg.heads = heads;
    cfg.dropout = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("model config invariants") {
    ModelConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.token_dim = 63;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.components = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.mu_max = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("tokenize: fully masked rows give [CLS; PAD; ...; PAD]") {
    Fixture f(4);
    auto masked = f.batch;
    for (Eigen::Index i = 0; i < masked.mask.rows(); ++i) {
        for (Eigen::Index j = 1; j < masked.mask.cols(); ++j) masked.mask(i, j) = 0;
    }
    FtModel<double> m(small_config(), f.sch, f.vocab, HeadKind::mdn, 1);
    const auto tokens = m.tokenize(masked);
    const auto* cls = m.find_param("cls");
    const auto* pad = m.find_param("pad");
    const Eigen::Index t_len = static_cast<Eigen::Index>(f.sch.size()) + 1;
    for (Eigen::Index i = 0; i < 4; ++i) {
        CHECK((tokens.row(i * t_len) - cls->v.row(0)).cwiseAbs().maxCoeff() == 0.0);
        for (Eigen::Index t = 1; t < t_len; ++t) {
            CHECK((tokens.row(i * t_len + t) - pad->v.row(0)).cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("tokenize: identical rows produce identical token matrices") {
    Fixture f(8);
    // duplicate row 0 into row 1
    f.batch.numeric.row(1) = f.batch.numeric.row(0);
    f.batch.cats.row(1) = f.batch.cats.row(0);
    f.batch.mask.row(1) = f.batch.mask.row(0);
    FtModel<double> m(small_config(), f.sch, f.vocab, HeadKind::mdn, 3);
    const auto tokens = m.tokenize(f.batch);
    const Eigen::Index t_len = static_cast<Eigen::Index>(f.sch.size()) + 1;
    CHECK((tokens.middleRows(0, t_len) - tokens.middleRows(t_len, t_len)).cwiseAbs().maxCoeff() ==
          0.0);
}

TEST_CASE("tokenize: out-of-vocabulary categorical index is rejected") {
    Fixture f(4);
    const int cat_col = f.sch.index_of("cat_segment");
    f.batch.cats(0, cat_col) = f.vocab.size("cat_segment");  // beyond UNK
    FtModel<double> m(small_config(), f.sch, f.vocab, HeadKind::mdn, 1);
    CHECK_THROWS_AS(m.tokenize(f.batch), EncodingError);
}

TEST_CASE("mask invariance: masked feature values never reach the outputs") {
    Fixture f(12);
    Rng rng(912);
    FtModel<float> m(small_config(32, 3, 4), f.sch, f.vocab, HeadKind::mdn, 5);

    for (int trial = 0; trial < 100; ++trial) {
        auto a = f.batch;
        // random mask pattern over non-CLS positions
        for (Eigen::Index i = 0; i < a.mask.rows(); ++i) {
            for (Eigen::Index j = 1; j < a.mask.cols(); ++j) {
                if (rng.uniform01() < 0.4) a.mask(i, j) = 0;
            }
        }
        auto b = a;
        for (Eigen::Index i = 0; i < b.mask.rows(); ++i) {
            for (Eigen::Index j = 1; j < b.mask.cols(); ++j) {
                if (!b.mask(i, j)) {
                    b.numeric(i, j - 1) = rng.normal() * 50.0;
                    const auto& feat = f.sch.features[static_cast<size_t>(j - 1)];
                    if (feat.kind == FeatureKind::categorical) {
                        b.cats(i, j - 1) =
                            static_cast<int>(rng.uniform_int(f.vocab.size(feat.name)));
                    }
                }
            }
        }
        const auto za = m.forward(a);
        Eigen::MatrixXf za_copy = za;
        const auto zb = m.forward(b);
        CHECK((za_copy - zb).cwiseAbs().maxCoeff() < 1e-6f);
    }
}

TEST_CASE("encoder with depth 0 pools the raw CLS token") {
    Fixture f(6);
    FtModel<double> m(small_config(16, 0, 2), f.sch, f.vocab, HeadKind::mdn, 9);
    m.forward(f.batch);
    const auto* cls = m.find_param("cls");
    for (Eigen::Index i = 0; i < m.pooled().rows(); ++i) {
        CHECK((m.pooled().row(i) - cls->v.row(0)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("permuting the contents of two masked positions leaves h unchanged") {
    Fixture f(6);
    auto a = f.batch;
    const int j1 = f.sch.index_of("lin_macro");
    const int j2 = f.sch.index_of("nl_quadratic");
    for (Eigen::Index i = 0; i < a.mask.rows(); ++i) {
        a.mask(i, j1 + 1) = 0;
        a.mask(i, j2 + 1) = 0;
    }
    auto b = a;
    b.numeric.col(j1).swap(b.numeric.col(j2));

    FtModel<double> m(small_config(), f.sch, f.vocab, HeadKind::mdn, 21);
    const auto za = m.forward(a);
    Eigen::MatrixXd za_copy = za;
    const auto zb = m.forward(b);
    CHECK((za_copy - zb).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mdn head: softmax symmetry, sigmoid midpoint, softplus floor") {
    Fixture f(2);
    ModelConfig cfg = small_config();
    cfg.components = 2;
    cfg.sigma_floor = 1e-3;
    FtModel<double> m(cfg, f.sch, f.vocab, HeadKind::mdn, 2);

    MatR<double> z(1, 6);
    z << 3.7, 3.7, 0.0, 0.0, 0.0, 0.0;
    const auto out = m.decode_row(z, 0);
    CHECK(out.alpha[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.alpha[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.mu[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.sigma[0] == doctest::Approx(std::log(2.0) + 1e-3).epsilon(1e-10));
}

TEST_CASE("MDN outputs always satisfy the mixture invariants") {
    Fixture f(32, 11);
    ModelConfig cfg = small_config(16, 2, 2);
    cfg.components = 3;
    FtModel<float> m(cfg, f.sch, f.vocab, HeadKind::mdn, 77);
    const auto mixtures = m.predict_mixtures(f.batch);
    for (const auto& out : mixtures) {
        double total = 0.0;
        for (size_t k = 0; k < out.components(); ++k) {
            total += out.alpha[k];
            CHECK(out.alpha[k] >= 0.0);
            CHECK(out.mu[k] > 0.0);
            CHECK(out.mu[k] < cfg.mu_max);
            CHECK(out.sigma[k] >= cfg.sigma_floor);
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("regression head: zero weights and pure bias") {
    Fixture f(3);
    FtModel<double> m(small_config(), f.sch, f.vocab, HeadKind::regression, 4);
    auto* w = m.find_param("head.w");
    auto* b = m.find_param("head.b");
    w->v.setZero();
    b->v.setZero();
    auto pred = m.predict(f.batch);
    for (double p : pred) CHECK(p == 0.0);
    b->v(0, 0) = 0.37;
    pred = m.predict(f.batch);
    for (double p : pred) CHECK(p == doctest::Approx(0.37));
}

namespace {

// Central finite differences on the mean loss, against the analytic gradient.
template <typename Net>
void gradient_check(Net& net, const schema::EncodedBatch& batch, int n_points, Rng& pick,
                    double tol) {
    net.zero_grads();
    net.loss_and_grad(batch, nullptr);
    auto& params = net.params();

    int checked = 0;
    int guard = 0;
    while (checked < n_points && guard < n_points * 50) {
        ++guard;
        auto* p = params[pick.uniform_int(params.size())];
        const Eigen::Index i = static_cast<Eigen::Index>(pick.uniform_int(p->v.rows()));
        const Eigen::Index j = static_cast<Eigen::Index>(pick.uniform_int(p->v.cols()));
        const double analytic = static_cast<double>(p->g(i, j));

        const double eps = 1e-5;
        const double orig = static_cast<double>(p->v(i, j));
        p->v(i, j) = orig + eps;
        const double up = net.eval_loss(batch);
        p->v(i, j) = orig - eps;
        const double dn = net.eval_loss(batch);
        p->v(i, j) = orig;
        const double fd = (up - dn) / (2.0 * eps);

        if (std::fabs(analytic) < 1e-10 && std::fabs(fd) < 1e-10) continue;  // dead coordinate
        const double rel = std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), 1e-8});
        CHECK(rel < tol);
        ++checked;
    }
    CHECK(checked == n_points);
}

}  // namespace

TEST_CASE("gradients match finite differences (MDN head, float64 mode)") {
    Fixture f(6, 19);
    ModelConfig cfg = small_config(8, 2, 2);
    FtModel<double> m(cfg, f.sch, f.vocab, HeadKind::mdn, 101);
    Rng pick(555);
    gradient_check(m, f.batch, 60, pick, 1e-4);
}

TEST_CASE("gradients match finite differences (regression head, float64 mode)") {
    Fixture f(6, 23);
    ModelConfig cfg = small_config(8, 2, 2);
    FtModel<double> m(cfg, f.sch, f.vocab, HeadKind::regression, 103);
    Rng pick(556);
    gradient_check(m, f.batch, 40, pick, 1e-4);
}

TEST_CASE("gradients flow under partial masks too") {
    Fixture f(6, 29);
    auto b = f.batch;
    Rng rng(31);
    for (Eigen::Index i = 0; i < b.mask.rows(); ++i) {
        for (Eigen::Index j = 1; j < b.mask.cols(); ++j) {
            if (rng.uniform01() < 0.35) b.mask(i, j) = 0;
        }
    }
    ModelConfig cfg = small_config(8, 1, 2);
    FtModel<double> m(cfg, f.sch, f.vocab, HeadKind::mdn, 107);
    Rng pick(557);
    gradient_check(m, b, 40, pick, 1e-4);
}

TEST_CASE("reconfigure: identity keeps every parameter bit-identical") {
    Fixture f(6);
    FtModel<double> m(small_config(), f.sch, f.vocab, HeadKind::mdn, 11);
    const auto m2 = reconfigure_for_schema(m, f.sch, f.vocab);
    REQUIRE(m.params().size() == m2.params().size());
    for (size_t i = 0; i < m.params().size(); ++i) {
        CHECK(m.params()[i]->name == m2.params()[i]->name);
        CHECK((m.params()[i]->v - m2.params()[i]->v).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("reconfigure: dropping features equals masking them (target subset source)") {
    datagen::GeneratorConfig gen = datagen::default_generator_config();
    SimDataset ds = datagen::generate_dataset(gen, 10, 41, "source");
    const std::vector<std::string> sub_names{"lin_exposure", "lin_rating", "nl_quadratic",
                                             "cat_segment"};
    SimDataset sub = ds.project(sub_names);

    const auto sch_full = schema::build_schema(ds.features, sub.features);
    const auto vocab_full = schema::build_vocab(ds, sub, sch_full);
    const auto std_full = schema::fit_standardizer(ds, sch_full);

    FtModel<double> big(small_config(16, 2, 2), sch_full, vocab_full, HeadKind::mdn, 13);
    const auto batch_masked =
        schema::encode(ds, sch_full, vocab_full, std_full, sch_full.presence("target"));
    Eigen::MatrixXd z_masked = big.forward(batch_masked);

    const auto sch_sub = schema::build_schema(sub.features, sub.features);
    const auto small = reconfigure_for_schema(big, sch_sub, vocab_full);
    auto small_mut = small;
    const auto batch_sub =
        schema::encode(ds, sch_sub, vocab_full, std_full, sch_sub.presence("target"));
    const auto z_sub = small_mut.forward(batch_sub);

    CHECK((z_masked - z_sub).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("reconfigure: fresh features masked at inference change nothing (source subset target)") {
    datagen::GeneratorConfig gen = datagen::default_generator_config();
    SimDataset ds = datagen::generate_dataset(gen, 10, 43, "source");
    const std::vector<std::string> sub_names{"lin_exposure", "lin_collateral", "cat_segment"};
    SimDataset sub = ds.project(sub_names);

    const auto sch_sub = schema::build_schema(sub.features, sub.features);
    const auto vocab_sub = schema::build_vocab(sub, sub, sch_sub);
    const auto std_sub = schema::fit_standardizer(sub, sch_sub);

    FtModel<double> small(small_config(16, 2, 2), sch_sub, vocab_sub, HeadKind::mdn, 17);
    const auto batch_sub =
        schema::encode(sub, sch_sub, vocab_sub, std_sub, sch_sub.presence("source"));
    Eigen::MatrixXd z_small = small.forward(batch_sub);

    const auto sch_exp = schema::build_schema(sub.features, ds.features);
    const auto vocab_exp = schema::build_vocab(sub, ds, sch_exp);
    auto big = reconfigure_for_schema(small, sch_exp, vocab_exp);
    const auto std_exp = schema::fit_standardizer(sub, ds, sch_exp);
    const auto batch_masked =
        schema::encode(ds, sch_exp, vocab_exp, std_exp, sch_exp.presence("source"));
    const auto z_big = big.forward(batch_masked);

    CHECK((z_small - z_big).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("reconfigure: kind conflicts are rejected") {
    Fixture f(4);
    FtModel<double> m(small_config(), f.sch, f.vocab, HeadKind::mdn, 19);
    auto bad = f.sch;
    for (auto& feat : bad.features) {
        if (feat.name == "lin_exposure") feat.kind = FeatureKind::categorical;
    }
    schema::CategoryVocab bad_vocab = f.vocab;
    bad_vocab.categories["lin_exposure"] = {0, 1};
    CHECK_THROWS_AS(reconfigure_for_schema(m, bad, bad_vocab), SchemaError);
}

TEST_CASE("random feature masking equals schema-level absence") {
    Fixture f(20, 53);
    auto masked = f.batch;
    schema::random_feature_masking(masked, 0.45, 97);

    FtModel<float> m(small_config(16, 2, 2), f.sch, f.vocab, HeadKind::mdn, 23);
    Eigen::MatrixXf z_masked = m.forward(masked);

    // same mask expressed directly through the batch mask with junk values
    auto absent = masked;
    for (Eigen::Index i = 0; i < absent.mask.rows(); ++i) {
        for (Eigen::Index j = 1; j < absent.mask.cols(); ++j) {
            if (!absent.mask(i, j)) absent.numeric(i, j - 1) = 1234.5;
        }
    }
    const auto z_absent = m.forward(absent);
    CHECK((z_masked - z_absent).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("checkpoints round-trip through disk") {
    Fixture f(8, 61);
    FtModel<float> m(small_config(16, 2, 2), f.sch, f.vocab, HeadKind::mdn, 29);
    Eigen::MatrixXf z1 = m.forward(f.batch);
    save_checkpoint(m, "/tmp/rrtl_ckpt_test");
    auto loaded = load_checkpoint<float>("/tmp/rrtl_ckpt_test");
    const auto z2 = loaded.forward(f.batch);
    CHECK((z1 - z2).cwiseAbs().maxCoeff() == 0.0f);
}
