#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rrtl/model.hpp"
#include "rrtl/train.hpp"

namespace rrtl::baseline {

// Two-hidden-layer GELU regressor over the standardized + one-hot
// representation. Schema changes are handled by input-layer surgery: input
// weight blocks are owned per feature, so shared blocks copy across schemas
// while new features start fresh and dropped ones are discarded.
template <typename R>
class MlpModel {
public:
    using Scalar = R;
    using Param_t = model::Param<R>;

    MlpModel(const schema::Schema& sch, const schema::CategoryVocab& vocab,
             const std::vector<uint8_t>& presence, int hidden, uint64_t init_seed)
        : schema_(sch), vocab_(vocab), presence_(presence), hidden_(hidden),
          init_seed_(init_seed) {
        if (presence_.size() != schema_.size()) throw SchemaError("mlp: presence length mismatch");
        build_params();
    }

    MlpModel(const MlpModel& other)
        : MlpModel(other.schema_, other.vocab_, other.presence_, other.hidden_,
                   other.init_seed_) {
        for (size_t i = 0; i < registry_.size(); ++i) {
            registry_[i]->v = other.registry_[i]->v;
            registry_[i]->g = other.registry_[i]->g;
        }
    }
    MlpModel& operator=(const MlpModel& other) {
        if (this != &other) {
            MlpModel tmp(other);
            *this = std::move(tmp);
        }
        return *this;
    }
    MlpModel(MlpModel&&) noexcept = default;
    MlpModel& operator=(MlpModel&&) noexcept = default;

    const schema::Schema& universe() const { return schema_; }
    const schema::CategoryVocab& vocab() const { return vocab_; }
    const std::vector<uint8_t>& presence() const { return presence_; }
    int hidden() const { return hidden_; }
    uint64_t init_seed() const { return init_seed_; }

    std::vector<model::Param<R>*>& params() { return registry_; }
    const std::vector<model::Param<R>*>& params() const { return registry_; }

    Param_t* find_param(const std::string& name) {
        for (auto* p : registry_) {
            if (p->name == name) return p;
        }
        return nullptr;
    }

    void zero_grads() {
        for (auto* p : registry_) p->g.setZero();
    }

    std::vector<model::MatR<R>> snapshot() const {
        std::vector<model::MatR<R>> s;
        for (const auto* p : registry_) s.push_back(p->v);
        return s;
    }

    void restore(const std::vector<model::MatR<R>>& s) {
        for (size_t i = 0; i < registry_.size(); ++i) registry_[i]->v = s[i];
    }

    // Dense input row built from the encoded batch for the model's own
    // presence set (the batch must carry values for those features).
    model::MatR<R> densify(const schema::EncodedBatch& batch) const {
        const Eigen::Index n = batch.rows();
        model::MatR<R> x = model::MatR<R>::Zero(n, input_dim_);
        for (const auto& blk : blocks_) {
            const Eigen::Index col = static_cast<Eigen::Index>(blk.feature_index);
            if (schema_.features[blk.feature_index].kind == FeatureKind::numeric) {
                for (Eigen::Index i = 0; i < n; ++i) {
                    x(i, blk.offset) = static_cast<R>(batch.numeric(i, col));
                }
            } else {
                for (Eigen::Index i = 0; i < n; ++i) {
                    const int idx = batch.cats(i, col);
                    if (idx < 0 || idx >= blk.width) {
                        throw EncodingError("mlp: categorical index out of vocabulary");
                    }
                    x(i, blk.offset + idx) = R(1);
                }
            }
        }
        return x;
    }

    const model::MatR<R>& forward(const schema::EncodedBatch& batch) {
        x_ = densify(batch);
        const Eigen::Index n = x_.rows();
        u1_.resize(n, hidden_);
        u1_.noalias() = x_ * w1_->v;
        u1_.rowwise() += b1_->v.row(0);
        h1_ = u1_.unaryExpr([](R v) { return model::gelu(v); });
        u2_.resize(n, hidden_);
        u2_.noalias() = h1_ * w2_->v;
        u2_.rowwise() += b2_->v.row(0);
        h2_ = u2_.unaryExpr([](R v) { return model::gelu(v); });
        z_.resize(n, 1);
        z_.noalias() = h2_ * w3_->v;
        z_.array() += b3_->v(0, 0);
        return z_;
    }

    double loss_and_grad(const schema::EncodedBatch& batch, Rng* /*dropout_rng*/) {
        forward(batch);
        const Eigen::Index n = z_.rows();
        const double inv_n = 1.0 / static_cast<double>(n);
        model::MatR<R> dz(n, 1);
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double err = static_cast<double>(z_(i, 0)) - batch.targets[static_cast<size_t>(i)];
            total += err * err;
            dz(i, 0) = static_cast<R>(2.0 * err * inv_n);
        }
        w3_->g.noalias() += h2_.transpose() * dz;
        b3_->g(0, 0) += dz.sum();
        model::MatR<R> dh2 = dz * w3_->v.transpose();
        model::MatR<R> du2 =
            dh2.cwiseProduct(u2_.unaryExpr([](R v) { return model::gelu_grad(v); }));
        w2_->g.noalias() += h1_.transpose() * du2;
        b2_->g.row(0) += du2.colwise().sum();
        model::MatR<R> dh1 = du2 * w2_->v.transpose();
        model::MatR<R> du1 =
            dh1.cwiseProduct(u1_.unaryExpr([](R v) { return model::gelu_grad(v); }));
        w1_->g.noalias() += x_.transpose() * du1;
        b1_->g.row(0) += du1.colwise().sum();
        return total * inv_n;
    }

    double eval_loss(const schema::EncodedBatch& batch) {
        forward(batch);
        double total = 0.0;
        for (Eigen::Index i = 0; i < z_.rows(); ++i) {
            const double err = static_cast<double>(z_(i, 0)) - batch.targets[static_cast<size_t>(i)];
            total += err * err;
        }
        return total / static_cast<double>(z_.rows());
    }

    std::vector<double> predict(const schema::EncodedBatch& batch) {
        forward(batch);
        std::vector<double> out(static_cast<size_t>(z_.rows()));
        for (Eigen::Index i = 0; i < z_.rows(); ++i) {
            out[static_cast<size_t>(i)] = static_cast<double>(z_(i, 0));
        }
        return out;
    }

    struct InputBlock {
        size_t feature_index = 0;
        Eigen::Index offset = 0;
        int width = 0;
    };
    const std::vector<InputBlock>& input_blocks() const { return blocks_; }
    model::Param<R>* input_weights() { return w1_; }

private:
    Param_t* add_param(const std::string& name, const std::string& group, Eigen::Index rows,
                       Eigen::Index cols, bool glorot) {
        auto p = std::make_unique<Param_t>();
        p->name = name;
        p->group = group;
        p->v.resize(rows, cols);
        p->g = model::MatR<R>::Zero(rows, cols);
        if (glorot) {
            Rng rng(hash64(init_seed_, name));
            const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
            for (Eigen::Index i = 0; i < rows; ++i) {
                for (Eigen::Index j = 0; j < cols; ++j) {
                    p->v(i, j) = static_cast<R>((rng.uniform01() * 2.0 - 1.0) * limit);
                }
            }
        } else {
            p->v.setZero();
        }
        Param_t* raw = p.get();
        storage_.push_back(std::move(p));
        registry_.push_back(raw);
        return raw;
    }

    void build_params() {
        input_dim_ = 0;
        blocks_.clear();
        for (size_t j = 0; j < schema_.size(); ++j) {
            if (!presence_[j]) continue;
            InputBlock blk;
            blk.feature_index = j;
            blk.offset = input_dim_;
            blk.width = schema_.features[j].kind == FeatureKind::numeric
                            ? 1
                            : vocab_.size(schema_.features[j].name);
            input_dim_ += blk.width;
            blocks_.push_back(blk);
        }
        if (input_dim_ == 0) throw SchemaError("mlp: no active input features");

        // One weight matrix covering all input columns; per-feature rows are
        // initialized from per-feature streams so surgery can rebuild any
        // subset reproducibly.
        w1_ = add_param("mlp.w1", "input", input_dim_, hidden_, false);
        for (const auto& blk : blocks_) {
            Rng rng(hash64(init_seed_, "mlp.w1." + schema_.features[blk.feature_index].name));
            const double limit =
                std::sqrt(6.0 / static_cast<double>(blk.width + hidden_));
            for (int r = 0; r < blk.width; ++r) {
                for (int c = 0; c < hidden_; ++c) {
                    w1_->v(blk.offset + r, c) = static_cast<R>((rng.uniform01() * 2.0 - 1.0) * limit);
                }
            }
        }
        b1_ = add_param("mlp.b1", "hidden", 1, hidden_, false);
        w2_ = add_param("mlp.w2", "hidden", hidden_, hidden_, true);
        b2_ = add_param("mlp.b2", "hidden", 1, hidden_, false);
        w3_ = add_param("mlp.w3", "head", hidden_, 1, true);
        b3_ = add_param("mlp.b3", "head", 1, 1, false);
    }

    schema::Schema schema_;
    schema::CategoryVocab vocab_;
    std::vector<uint8_t> presence_;
    int hidden_;
    uint64_t init_seed_;
    Eigen::Index input_dim_ = 0;

    std::vector<std::unique_ptr<Param_t>> storage_;
    std::vector<Param_t*> registry_;
    std::vector<InputBlock> blocks_;
    Param_t*w1_ = nullptr, *b1_ = nullptr, *w2_ = nullptr, *b2_ = nullptr, *w3_ = nullptr,
        *b3_ = nullptr;

    model::MatR<R> x_, u1_, h1_, u2_, h2_, z_;
};

// Input-layer surgery for a new presence set: shared-feature weight rows are
// copied, new-feature rows keep their fresh initialization, dropped rows are
// discarded; hidden and output layers carry over whole.
template <typename R>
MlpModel<R> mlp_reconfigure(MlpModel<R>& m, const std::vector<uint8_t>& new_presence) {
    MlpModel<R> out(m.universe(), m.vocab(), new_presence, m.hidden(), m.init_seed());
    for (const char* name : {"mlp.b1", "mlp.w2", "mlp.b2", "mlp.w3", "mlp.b3"}) {
        out.find_param(name)->v = m.find_param(name)->v;
    }
    model::Param<R>* old_w1 = m.input_weights();
    model::Param<R>* new_w1 = out.input_weights();
    for (const auto& nb : out.input_blocks()) {
        for (const auto& ob : m.input_blocks()) {
            if (ob.feature_index != nb.feature_index) continue;
            new_w1->v.block(nb.offset, 0, nb.width, new_w1->v.cols()) =
                old_w1->v.block(ob.offset, 0, ob.width, old_w1->v.cols());
            break;
        }
    }
    return out;
}

// MLP transfer protocol: pretrain on the shared source features, fine-tune on
// the full target schema at the reduced learning rate with the same budget
// and early stopping as the FT variants.
template <typename R>
train::ScenarioRun run_scenario_mlp(train::Scenario scenario, const train::ScenarioData& data,
                                    int hidden, const train::TrainOpts& opts,
                                    const train::TransferOpts& topts, uint64_t seed,
                                    const std::string& trace_dir = "") {
    train::ScenarioRun run;
    train::TrainOpts sopts = opts;
    sopts.seed = hash64(seed, "train");
    auto trace_file = [&trace_dir](const char* stage) {
        return trace_dir.empty() ? std::string() : trace_dir + "/" + stage + ".trace.jsonl";
    };

    const auto shared = data.schema.shared_presence();
    const auto tgt = data.schema.presence("target");
    const schema::EncodedBatch* eval_batch = &data.target_val;

    MlpModel<R> net(data.schema, data.vocab, tgt, hidden, hash64(seed, "init"));
    switch (scenario) {
        case train::Scenario::zero_shot: {
            net = MlpModel<R>(data.schema, data.vocab, shared, hidden, hash64(seed, "init"));
            run.pretrain_trace = train::pretrain(net, data.source_train_shared,
                                                 data.source_val_shared, sopts,
                                                 trace_file("pretrain"));
            eval_batch = &data.target_val_shared;
            break;
        }
        case train::Scenario::target_baseline: {
            run.finetune_trace = train::fit(net, data.target_train, data.target_val, sopts,
                                            train::FreezePlan{}, 1.0, trace_file("train"));
            break;
        }
        case train::Scenario::transfer: {
            MlpModel<R> pre(data.schema, data.vocab, shared, hidden, hash64(seed, "init"));
            run.pretrain_trace = train::pretrain(pre, data.source_train_shared,
                                                 data.source_val_shared, sopts,
                                                 trace_file("pretrain"));
            net = mlp_reconfigure(pre, tgt);
            run.finetune_trace = train::fit(net, data.target_train, data.target_val, sopts,
                                            train::FreezePlan{}, 1.0 / topts.lr_divisor,
                                            trace_file("finetune"));
            break;
        }
    }

    const auto pred = net.predict(*eval_batch);
    run.metrics.n_eval = pred.size();
    run.metrics.r2 = metrics::r2(eval_batch->targets, pred);
    run.metrics.mae = metrics::mae(eval_batch->targets, pred);
    return run;
}

}  // namespace rrtl::baseline
