#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "rrtl/datagen.hpp"
#include "rrtl/schema.hpp"

using namespace rrtl;
using namespace rrtl::schema;

namespace {

std::vector<FeatureDecl> decls(std::initializer_list<const char*> names,
                               FeatureKind kind = FeatureKind::numeric) {
    std::vector<FeatureDecl> out;
    for (const char* n : names) out.push_back({n, kind});
    return out;
}

SimDataset tiny_dataset(const std::vector<double>& col, const std::vector<int>& cats = {}) {
    SimDataset ds;
    ds.features.push_back({"x", FeatureKind::numeric});
    ds.numeric_cols.push_back(col);
    ds.cat_cols.emplace_back();
    if (!cats.empty()) {
        ds.features.push_back({"c", FeatureKind::categorical});
        ds.numeric_cols.emplace_back();
        ds.cat_cols.push_back(cats);
    }
    ds.recovery.assign(col.size(), 0.5);
    ds.secured.assign(col.size(), 1);
    ds.domain = "source";
    return ds;
}

}  // namespace

TEST_CASE("build_schema: ordering, derived sets, conflicts") {
    SUBCASE("identical lists") {
        const auto s = build_schema(decls({"a", "b"}), decls({"a", "b"}));
        CHECK(s.size() == 2);
        CHECK(s.shared() == std::vector<std::string>{"a", "b"});
        CHECK(s.source_only().empty());
        CHECK(s.target_only().empty());
    }
    SUBCASE("partial overlap keeps source order then target-only order") {
        const auto s = build_schema(decls({"a", "b", "c"}), decls({"b", "c", "d"}));
        CHECK(s.size() == 4);
        CHECK(s.features[0].name == "a");
        CHECK(s.features[1].name == "b");
        CHECK(s.features[2].name == "c");
        CHECK(s.features[3].name == "d");
        CHECK(s.shared() == std::vector<std::string>{"b", "c"});
        CHECK(s.source_only() == std::vector<std::string>{"a"});
        CHECK(s.target_only() == std::vector<std::string>{"d"});
    }
    SUBCASE("GCD/UP5-shaped cardinalities") {
        std::vector<FeatureDecl> src, tgt;
        for (int i = 0; i < 36; ++i) src.push_back({"s" + std::to_string(i), FeatureKind::numeric});
        for (int i = 0; i < 37; ++i) {
            src.push_back({"shared" + std::to_string(i), FeatureKind::numeric});
            tgt.push_back({"shared" + std::to_string(i), FeatureKind::numeric});
        }
        for (int i = 0; i < 127; ++i) tgt.push_back({"t" + std::to_string(i), FeatureKind::numeric});
        const auto s = build_schema(src, tgt);
        CHECK(s.size() == 200);
        CHECK(s.shared().size() == 37);
        CHECK(s.source_only().size() == 36);
        CHECK(s.target_only().size() == 127);
    }
    SUBCASE("conflicting kinds are rejected") {
        auto src = decls({"a"});
        auto tgt = decls({"a"}, FeatureKind::categorical);
        CHECK_THROWS_AS(build_schema(src, tgt), SchemaError);
    }
    SUBCASE("ordering is invariant across invocations") {
        const auto s1 = build_schema(decls({"a", "b", "c"}), decls({"c", "d"}));
        const auto s2 = build_schema(decls({"a", "b", "c"}), decls({"c", "d"}));
        CHECK(s1.id() == s2.id());
    }
}

TEST_CASE("build_vocab: union of training splits plus reserved UNK") {
    Schema s;
    s.features = {{"c", FeatureKind::categorical}};
    s.in_source = {1};
    s.in_target = {1};

    SimDataset src = tiny_dataset({1, 2, 3}, {0, 1, 1});
    SimDataset tgt = tiny_dataset({1, 2, 3}, {1, 2, 2});

    const auto vocab = build_vocab(src, tgt, s);
    CHECK(vocab.categories.at("c") == std::vector<int>{0, 1, 2});
    CHECK(vocab.size("c") == 4);
    CHECK(vocab.unk_index("c") == 3);
    CHECK(vocab.encode("c", 0) == 0);
    CHECK(vocab.encode("c", 2) == 2);
    // validation-only category goes to UNK
    CHECK(vocab.encode("c", 7) == 3);

    // feature absent from target: union with empty set
    SimDataset tgt_empty = tiny_dataset({1.0, 2.0});
    const auto vocab2 = build_vocab(src, tgt_empty, s);
    CHECK(vocab2.categories.at("c") == std::vector<int>{0, 1});
}

TEST_CASE("standardizer: source-train statistics, degenerate guard") {
    Schema s;
    s.features = {{"x", FeatureKind::numeric}};
    s.in_source = {1};
    s.in_target = {1};

    SimDataset src = tiny_dataset({1.0, 2.0, 3.0});
    const auto st = fit_standardizer(src, s);
    CHECK(st.transform("x", 1.0) == doctest::Approx(-1.224744871).epsilon(1e-9));
    CHECK(st.transform("x", 2.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(st.transform("x", 3.0) == doctest::Approx(1.224744871).epsilon(1e-9));

    SimDataset constant = tiny_dataset({5.0, 5.0, 5.0});
    const auto st2 = fit_standardizer(constant, s);
    CHECK(st2.transform("x", 5.0) == doctest::Approx(0.0));
    CHECK(st2.stats.at("x").sd == 1.0);
}

TEST_CASE("target columns standardized with source stats keep their shift") {
    const auto base = datagen::default_generator_config();
    auto shift = datagen::default_shift(datagen::ShiftType::covariate, 2.0);
    const auto [src, tgt] = datagen::generate_domain_pair(base, shift, 5000, 5000, 3);
    const auto sch = build_schema(src.features, tgt.features);
    const auto vocab = build_vocab(src, tgt, sch);
    const auto st = fit_standardizer(src, sch);

    const auto src_b = encode(src, sch, vocab, st, sch.presence("source"));
    const auto tgt_b = encode(tgt, sch, vocab, st, sch.presence("target"));
    const int j = sch.index_of("lin_exposure");
    CHECK(std::fabs(src_b.numeric.col(j).mean()) < 0.05);
    // intercept moved by 1.6 raw units; the shared scaler keeps that visible
    CHECK(tgt_b.numeric.col(j).mean() > 0.5);
}

TEST_CASE("encode: masks, sentinels, and UNK behavior") {
    const auto base = datagen::default_generator_config();
    const auto ds = datagen::generate_dataset(base, 50, 21, "source");
    auto feats = base.feature_decls();
    std::vector<FeatureDecl> target_feats(feats.begin(), feats.begin() + 4);
    const auto sch = build_schema(feats, target_feats);
    const auto vocab = build_vocab(ds, ds.project({target_feats[0].name}), sch);
    const auto st = fit_standardizer(ds, sch);

    const auto b = encode(ds, sch, vocab, st, sch.presence("target"));
    CHECK(b.mask.rows() == 50);
    CHECK(b.mask.cols() == static_cast<int>(sch.size()) + 1);
    for (Eigen::Index i = 0; i < b.mask.rows(); ++i) {
        CHECK(b.mask(i, 0) == 1);  // CLS
        for (size_t j = 0; j < sch.size(); ++j) {
            CHECK(b.mask(i, static_cast<Eigen::Index>(j) + 1) == sch.in_target[j]);
            if (!sch.in_target[j]) {
                CHECK(b.numeric(i, static_cast<Eigen::Index>(j)) == 0.0);  // sentinel
            }
        }
    }
}

TEST_CASE("random_feature_masking: rate zero is identity, fractions match") {
    const auto base = datagen::default_generator_config();
    const auto ds = datagen::generate_dataset(base, 1500, 33, "source");
    const auto sch = build_schema(ds.features, ds.features);
    const auto vocab = build_vocab(ds, ds, sch);
    const auto st = fit_standardizer(ds, sch);
    auto b = encode(ds, sch, vocab, st, sch.presence("source"));

    auto untouched = b;
    random_feature_masking(untouched, 0.0, 5);
    CHECK(untouched.mask == b.mask);

    auto masked = b;
    random_feature_masking(masked, 0.5, 5);
    const double total = static_cast<double>(b.mask.rows()) * static_cast<double>(b.mask.cols() - 1);
    double flipped = 0.0;
    for (Eigen::Index i = 0; i < b.mask.rows(); ++i) {
        CHECK(masked.mask(i, 0) == 1);
        for (Eigen::Index j = 1; j < b.mask.cols(); ++j) flipped += masked.mask(i, j) ? 0.0 : 1.0;
    }
    CHECK(flipped / total == doctest::Approx(0.5).epsilon(0.04));

    CHECK_THROWS_AS(random_feature_masking(masked, 1.0, 5), ConfigError);
}

TEST_CASE("split_stratified: shares, strata edge cases, determinism") {
    const auto base = datagen::default_generator_config();
    const auto ds = datagen::generate_dataset(base, 100, 13, "source");

    SUBCASE("80/20 disjoint cover") {
        const auto [train, val] = split_stratified(ds, 0.2, 10);
        CHECK(train.rows() + val.rows() == 100);
        CHECK(val.rows() >= 18);
        CHECK(val.rows() <= 22);
        std::set<double> seen;
        for (size_t i = 0; i < train.rows(); ++i) {
            seen.insert(train.numeric_cols[0][i] * 1e6 + train.recovery[i]);
        }
        for (size_t i = 0; i < val.rows(); ++i) {
            CHECK(!seen.count(val.numeric_cols[0][i] * 1e6 + val.recovery[i]));
        }
    }

    SUBCASE("identical targets collapse to one stratum") {
        SimDataset flat = tiny_dataset(std::vector<double>(50, 1.0));
        flat.recovery.assign(50, 0.7);
        const auto [train, val] = split_stratified(flat, 0.2, 4);
        CHECK(train.rows() == 40);
        CHECK(val.rows() == 10);
    }

    SUBCASE("bimodal target keeps per-mode shares") {
        SimDataset bi = tiny_dataset(std::vector<double>(200, 1.0));
        for (int i = 0; i < 200; ++i) bi.recovery[static_cast<size_t>(i)] = i < 100 ? 0.05 : 0.95;
        const auto [train, val] = split_stratified(bi, 0.2, 8);
        int high_val = 0;
        for (double r : val.recovery) high_val += r > 0.5 ? 1 : 0;
        CHECK(std::abs(high_val - 20) <= 2);
    }

    SUBCASE("deterministic given seed") {
        const auto [t1, v1] = split_stratified(ds, 0.2, 5);
        const auto [t2, v2] = split_stratified(ds, 0.2, 5);
        CHECK(t1.recovery == t2.recovery);
        CHECK(v1.recovery == v2.recovery);
    }

    CHECK_THROWS_AS(split_stratified(ds, 1.5, 1), ConfigError);
    SimDataset small = tiny_dataset({1, 2, 3});
    CHECK_THROWS_AS(split_stratified(small, 0.2, 1), ConfigError);
}

TEST_CASE("no-leakage: vocab and scaler depend only on training splits") {
    const auto base = datagen::default_generator_config();
    const auto pair = datagen::generate_domain_pair(base, {}, 400, 300, 17);
    const auto& src = pair.first;
    const auto& tgt = pair.second;
    const auto [src_train, src_val] = split_stratified(src, 0.2, 1);
    const auto [tgt_train, tgt_val] = split_stratified(tgt, 0.2, 2);
    const auto sch = build_schema(src.features, tgt.features);

    const auto vocab_a = build_vocab(src_train, tgt_train, sch);
    const auto st_a = fit_standardizer(src_train, tgt_train, sch);
    // re-running with validation rows absent from the universe changes nothing
    const auto vocab_b = build_vocab(src_train, tgt_train, sch);
    const auto st_b = fit_standardizer(src_train, tgt_train, sch);
    CHECK(vocab_a.categories == vocab_b.categories);
    for (const auto& [name, m] : st_a.stats) {
        CHECK(st_b.stats.at(name).mean == m.mean);
        CHECK(st_b.stats.at(name).sd == m.sd);
    }
}

TEST_CASE("manifest JSON round-trips schema, vocab, and scaler") {
    const auto base = datagen::default_generator_config();
    const auto ds = datagen::generate_dataset(base, 60, 2, "source");
    const auto sch = build_schema(ds.features, ds.features);
    const auto vocab = build_vocab(ds, ds, sch);
    const auto st = fit_standardizer(ds, sch);

    const auto text = manifest_json(sch, vocab, st);
    Schema sch2;
    CategoryVocab vocab2;
    Standardizer st2;
    parse_manifest_json(text, &sch2, &vocab2, &st2);
    CHECK(sch2.id() == sch.id());
    CHECK(vocab2.categories == vocab.categories);
    CHECK(st2.stats.size() == st.stats.size());
    CHECK(manifest_json(sch2, vocab2, st2) == text);
}
