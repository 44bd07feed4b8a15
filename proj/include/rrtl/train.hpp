#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "rrtl/metrics.hpp"
#include "rrtl/model.hpp"

namespace rrtl::train {

// ----------------------------- options -----------------------------

struct TrainOpts {
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    int batch_size = 128;
    int max_epochs = 100;
    int patience = 10;
    bool cosine_lr = false;
    uint64_t seed = 0;

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (batch_size < 1 || max_epochs < 1) throw ConfigError("batch_size/max_epochs must be >= 1");
    }
};

enum class PretrainFeatures { shared_only, full_source };

struct TransferOpts {
    PretrainFeatures pretrain_features = PretrainFeatures::full_source;
    int warm_epochs = 10;     // e_warm
    double lr_divisor = 10.0;

    void validate() const {
        if (warm_epochs < 0) throw ConfigError("warm_epochs must be >= 0");
        if (!(lr_divisor > 0.0)) throw ConfigError("lr_divisor must be > 0");
    }
};

enum class Scenario { zero_shot, target_baseline, transfer };

inline const char* to_string(Scenario s) {
    switch (s) {
        case Scenario::zero_shot: return "zero_shot";
        case Scenario::target_baseline: return "target_baseline";
        case Scenario::transfer: return "transfer";
    }
    return "zero_shot";
}

inline Scenario scenario_from_string(const std::string& s) {
    if (s == "zero_shot") return Scenario::zero_shot;
    if (s == "target_baseline") return Scenario::target_baseline;
    if (s == "transfer") return Scenario::transfer;
    throw ConfigError("unknown scenario '" + s + "'");
}

// ----------------------------- traces -----------------------------

struct EpochRecord {
    int epoch = 0;
    std::string split;  // "train" or "val"
    double loss = 0.0;
    double r2 = 0.0;
    double mae = 0.0;
    double lr = 0.0;
    std::vector<std::string> frozen;
};

struct TrainTrace {
    std::vector<EpochRecord> records;
    int best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();

    double val_r2_at(int epoch) const {
        for (const auto& r : records) {
            if (r.epoch == epoch && r.split == "val") return r.r2;
        }
        throw TrainingError("no validation record for epoch " + std::to_string(epoch));
    }
};

// One JSONL line per epoch record.
void append_trace_jsonl(const EpochRecord& rec, std::ofstream& out);

// ----------------------------- optimizer -----------------------------

// AdamW: adaptive moments plus decoupled weight decay. Frozen parameters are
// skipped entirely (values, moments and step counts untouched).
template <typename R>
class AdamW {
public:
    explicit AdamW(const std::vector<model::Param<R>*>& params, double beta1 = 0.9,
                   double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        t_.assign(params.size(), 0);
        for (const auto* p : params) {
            m_.push_back(model::MatR<R>::Zero(p->v.rows(), p->v.cols()));
            v_.push_back(model::MatR<R>::Zero(p->v.rows(), p->v.cols()));
        }
    }

    void step(const std::vector<model::Param<R>*>& params, double lr, double weight_decay,
              const std::set<std::string>& frozen_groups) {
        for (size_t i = 0; i < params.size(); ++i) {
            model::Param<R>& p = *params[i];
            if (frozen_groups.count(p.group)) continue;
            ++t_[i];
            const R b1 = static_cast<R>(beta1_);
            const R b2 = static_cast<R>(beta2_);
            m_[i] = b1 * m_[i] + (R(1) - b1) * p.g;
            v_[i] = b2 * v_[i] + (R(1) - b2) * p.g.cwiseProduct(p.g);
            const R bc1 = R(1) - static_cast<R>(std::pow(beta1_, t_[i]));
            const R bc2 = R(1) - static_cast<R>(std::pow(beta2_, t_[i]));
            const R lr_r = static_cast<R>(lr);
            const R wd = static_cast<R>(weight_decay);
            p.v.array() -= lr_r * ((m_[i].array() / bc1) /
                                       ((v_[i].array() / bc2).sqrt() + static_cast<R>(eps_)) +
                                   wd * p.v.array());
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::vector<model::MatR<R>> m_, v_;
    std::vector<long> t_;
};

// ----------------------------- batching -----------------------------

inline schema::EncodedBatch slice_batch(const schema::EncodedBatch& b,
                                        const std::vector<int>& rows) {
    schema::EncodedBatch out;
    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    out.numeric.resize(n, b.numeric.cols());
    out.cats.resize(n, b.cats.cols());
    out.mask.resize(n, b.mask.cols());
    out.targets.resize(rows.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index src = rows[static_cast<size_t>(i)];
        out.numeric.row(i) = b.numeric.row(src);
        out.cats.row(i) = b.cats.row(src);
        out.mask.row(i) = b.mask.row(src);
        out.targets[static_cast<size_t>(i)] = b.targets[static_cast<size_t>(src)];
    }
    return out;
}

// ----------------------------- fit loop -----------------------------

struct FreezePlan {
    int warm_epochs = 0;
    std::set<std::string> warm_frozen;      // frozen during epochs 1..warm_epochs
    std::set<std::string> always_excluded;  // never optimized (masked source-only features)
};

struct Evaluation {
    double loss = 0.0;
    double r2 = 0.0;
    double mae = 0.0;
};

template <typename Net>
Evaluation evaluate(Net& net, const schema::EncodedBatch& batch) {
    Evaluation e;
    e.loss = net.eval_loss(batch);
    const auto pred = net.predict(batch);
    try {
        e.r2 = metrics::r2(batch.targets, pred);
    } catch (const MetricError&) {
        e.r2 = std::numeric_limits<double>::quiet_NaN();
    }
    e.mae = metrics::mae(batch.targets, pred);
    return e;
}

// Mini-batch AdamW loop with early stopping on validation loss. Returns the
// trace; the network is left at the best-validation checkpoint.
template <typename Net>
TrainTrace fit(Net& net, const schema::EncodedBatch& train_batch,
               const schema::EncodedBatch& val_batch, const TrainOpts& opts,
               const FreezePlan& freeze, double lr_scale, const std::string& trace_path = "") {
    opts.validate();
    const int n = static_cast<int>(train_batch.rows());
    if (n < 1 || val_batch.rows() < 1) throw TrainingError("fit: empty train or val split");

    AdamW<typename Net::Scalar> adam(net.params());

    std::ofstream trace_out;
    if (!trace_path.empty()) {
        trace_out.open(trace_path);
        if (!trace_out) throw IoError("cannot open trace file '" + trace_path + "'");
    }

    TrainTrace trace;
    auto best = net.snapshot();
    int stale = 0;

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    // train metrics are computed on a capped prefix to bound epoch cost
    std::vector<int> train_eval_rows;
    for (int i = 0; i < std::min(n, 2048); ++i) train_eval_rows.push_back(i);
    const schema::EncodedBatch train_eval = slice_batch(train_batch, train_eval_rows);

    for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
        double lr = opts.learning_rate * lr_scale;
        if (opts.cosine_lr && opts.max_epochs > 1) {
            lr *= 0.5 * (1.0 + std::cos(3.14159265358979323846 * (epoch - 1) /
                                        (opts.max_epochs - 1)));
        }
        const bool warm = epoch <= freeze.warm_epochs;
        std::set<std::string> frozen = freeze.always_excluded;
        if (warm) frozen.insert(freeze.warm_frozen.begin(), freeze.warm_frozen.end());

        Rng shuffle_rng(hash64(opts.seed, "epoch:" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);
        Rng dropout_rng(hash64(opts.seed, "dropout:" + std::to_string(epoch)));

        double loss_sum = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += opts.batch_size) {
            const int stop = std::min(n, start + opts.batch_size);
            std::vector<int> rows(order.begin() + start, order.begin() + stop);
            const schema::EncodedBatch mb = slice_batch(train_batch, rows);
            net.zero_grads();
            const double loss = net.loss_and_grad(mb, &dropout_rng);
            if (!std::isfinite(loss)) {
                throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(batches) + " (shuffle seed " +
                                    std::to_string(hash64(opts.seed, "epoch:" + std::to_string(epoch))) +
                                    ")");
            }
            loss_sum += loss;
            ++batches;
            adam.step(net.params(), lr, opts.weight_decay, frozen);
        }

        std::vector<std::string> frozen_list(frozen.begin(), frozen.end());
        const Evaluation tr = evaluate(net, train_eval);
        EpochRecord train_rec{epoch, "train", loss_sum / std::max(batches, 1), tr.r2, tr.mae, lr,
                              frozen_list};
        const Evaluation va = evaluate(net, val_batch);
        EpochRecord val_rec{epoch, "val", va.loss, va.r2, va.mae, lr, frozen_list};
        trace.records.push_back(train_rec);
        trace.records.push_back(val_rec);
        if (trace_out.is_open()) {
            append_trace_jsonl(train_rec, trace_out);
            append_trace_jsonl(val_rec, trace_out);
        }

        if (va.loss < trace.best_val_loss) {
            trace.best_val_loss = va.loss;
            trace.best_epoch = epoch;
            best = net.snapshot();
            stale = 0;
        } else {
            ++stale;
            if (stale >= opts.patience) break;
        }
    }

    net.restore(best);
    return trace;
}

// ----------------------------- transfer schedules -----------------------------

// Source pretraining: plain fit, no freezing.
template <typename Net>
TrainTrace pretrain(Net& net, const schema::EncodedBatch& source_train,
                    const schema::EncodedBatch& source_val, const TrainOpts& opts,
                    const std::string& trace_path = "") {
    return fit(net, source_train, source_val, opts, FreezePlan{}, 1.0, trace_path);
}

// Warm-freeze fine-tuning at a reduced learning rate. During the first
// e_warm epochs the carried-over representations (CLS, PAD, shared feature
// tokenizers/embeddings and the first encoder block) stay frozen while
// target-only tokenizers, later blocks and the head adapt; afterwards
// everything trains jointly. Tokenizers of source-only features are masked
// in the target domain and stay out of the optimizer entirely.
template <typename R>
TrainTrace finetune(model::FtModel<R>& net, const schema::EncodedBatch& target_train,
                    const schema::EncodedBatch& target_val, const TrainOpts& opts,
                    const TransferOpts& topts, const std::string& trace_path = "") {
    topts.validate();
    FreezePlan plan;
    plan.warm_epochs = topts.warm_epochs;
    plan.warm_frozen = {"cls", "pad"};
    if (net.config().depth > 0) plan.warm_frozen.insert("block:0");
    const auto& sch = net.universe();
    for (size_t j = 0; j < sch.size(); ++j) {
        const std::string tag =
            (sch.features[j].kind == FeatureKind::numeric ? "tokenizer:" : "embedding:") +
            sch.features[j].name;
        if (sch.in_source[j] && !sch.in_target[j]) {
            plan.always_excluded.insert(tag);
        } else if (sch.in_source[j] && sch.in_target[j]) {
            plan.warm_frozen.insert(tag);
        }
    }
    return fit(net, target_train, target_val, opts, plan, 1.0 / topts.lr_divisor, trace_path);
}

// ----------------------------- scenario bundle -----------------------------

// Everything the three scenarios consume for one Monte Carlo cell. All
// scenarios read the same encoded splits, which pins down split alignment.
struct ScenarioData {
    schema::Schema schema;
    schema::CategoryVocab vocab;
    schema::Standardizer standardizer;
    schema::EncodedBatch source_train_full, source_val_full;
    schema::EncodedBatch source_train_shared, source_val_shared;
    schema::EncodedBatch target_train, target_val;
    schema::EncodedBatch target_val_shared;
};

ScenarioData prepare_scenario_data(const SimDataset& source, const SimDataset& target,
                                   double val_fraction, uint64_t split_seed);

struct ScenarioRun {
    metrics::MetricRecord metrics;
    TrainTrace pretrain_trace;
    TrainTrace finetune_trace;
    std::vector<model::MixtureOutput> val_mixtures;  // MDN heads only
};

// Runs one evaluation regime for the FT models. `seed` drives model
// initialization and training randomness; identical inputs produce identical
// records. `trained_out`, when given, receives the final model.
template <typename R>
ScenarioRun run_scenario_ft(Scenario scenario, const ScenarioData& data,
                            const model::ModelConfig& cfg, model::HeadKind head,
                            const TrainOpts& opts, const TransferOpts& topts, uint64_t seed,
                            const std::string& trace_dir = "",
                            model::FtModel<R>* trained_out = nullptr);

}  // namespace rrtl::train

#include "rrtl/train_scenarios.inl"
