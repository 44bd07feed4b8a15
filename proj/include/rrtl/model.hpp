#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rrtl/rng.hpp"
#include "rrtl/schema.hpp"

namespace rrtl::model {

// ----------------------------- configuration -----------------------------

struct ModelConfig {
    int token_dim = 64;            // d
    int depth = 3;                 // B encoder blocks
    int heads = 4;                 // H
    double ffn_expansion = 4.0 / 3.0;
    int components = 2;            // K mixture components
    double alpha_temperature = 1.0;
    double mu_max = 1.0;
    double sigma_floor = 1e-3;
    double dropout = 0.1;

    int ffn_width() const {
        return std::max(1, static_cast<int>(std::lround(token_dim * ffn_expansion)));
    }

    void validate() const {
        if (token_dim <= 0 || heads <= 0 || token_dim % heads != 0) {
            throw ConfigError("token_dim must be positive and divisible by heads");
        }
        if (depth < 0) throw ConfigError("depth must be >= 0");
        if (components < 1) throw ConfigError("components must be >= 1");
        if (!(alpha_temperature > 0.0)) throw ConfigError("alpha_temperature must be > 0");
        if (!(mu_max > 0.0 && mu_max <= 1.2)) throw ConfigError("mu_max must lie in (0, 1.2]");
        if (!(sigma_floor > 0.0)) throw ConfigError("sigma_floor must be > 0");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
    }
};

enum class HeadKind { mdn, regression };

// ----------------------------- mixture outputs -----------------------------

// Per-observation predictive mixture: weights, means, standard deviations.
struct MixtureOutput {
    std::vector<double> alpha;
    std::vector<double> mu;
    std::vector<double> sigma;

    size_t components() const { return alpha.size(); }
};

// -log sum_k alpha_k Normal(r | mu_k, sigma_k^2), via log-sum-exp.
double mdn_nll(const MixtureOutput& out, double r);

// sum_k alpha_k mu_k
double mixture_mean(const MixtureOutput& out);

// Mixture density at r.
double mixture_pdf(const MixtureOutput& out, double r);

// ----------------------------- parameters -----------------------------

template <typename R>
using MatR = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename R>
struct Param {
    std::string name;   // unique, e.g. "block1.attn.wq"
    std::string group;  // freeze group, e.g. "block:1", "tokenizer:lin_macro"
    MatR<R> v;          // value
    MatR<R> g;          // gradient, same shape
};

// ----------------------------- scalar pieces -----------------------------

template <typename R>
inline R gelu(R x) {
    return R(0.5) * x * (R(1) + std::erf(x * R(0.7071067811865475)));
}

template <typename R>
inline R gelu_grad(R x) {
    const R cdf = R(0.5) * (R(1) + std::erf(x * R(0.7071067811865475)));
    const R pdf = R(0.3989422804014327) * std::exp(R(-0.5) * x * x);
    return cdf + x * pdf;
}

template <typename R>
inline R softplus(R x) {
    if (x > R(20)) return x;
    if (x < R(-20)) return std::exp(x);
    return std::log1p(std::exp(x));
}

// ----------------------------- model -----------------------------

// FT-MDN-Transformer: per-feature tokenizers feed a masked pre-norm encoder
// whose pooled CLS row parameterizes either a Gaussian-mixture head or a
// linear regression head. The parameter set is defined over a global feature
// universe; which features are active for a given batch is decided purely by
// the batch mask, so the same weights serve source and target domains.
template <typename R>
class FtModel {
public:
    using Scalar = R;

    FtModel(ModelConfig cfg, const schema::Schema& universe, const schema::CategoryVocab& vocab,
            HeadKind head, uint64_t init_seed)
        : cfg_(cfg), universe_(universe), vocab_(vocab), head_(head), init_seed_(init_seed) {
        cfg_.validate();
        build_params();
    }

    // Parameters live behind unique_ptrs, so copying rebuilds the layout and
    // then clones the values; moves keep the heap params and stay cheap.
    FtModel(const FtModel& other)
        : FtModel(other.cfg_, other.universe_, other.vocab_, other.head_, other.init_seed_) {
        for (size_t i = 0; i < registry_.size(); ++i) {
            registry_[i]->v = other.registry_[i]->v;
            registry_[i]->g = other.registry_[i]->g;
        }
    }
    FtModel& operator=(const FtModel& other) {
        if (this != &other) {
            FtModel tmp(other);
            *this = std::move(tmp);
        }
        return *this;
    }
    FtModel(FtModel&&) noexcept = default;
    FtModel& operator=(FtModel&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    const schema::Schema& universe() const { return universe_; }
    const schema::CategoryVocab& vocab() const { return vocab_; }
    HeadKind head_kind() const { return head_; }
    uint64_t init_seed() const { return init_seed_; }
    int output_dim() const { return head_ == HeadKind::mdn ? 3 * cfg_.components : 1; }

    std::vector<Param<R>*>& params() { return registry_; }
    const std::vector<Param<R>*>& params() const { return registry_; }

    Param<R>* find_param(const std::string& name) {
        for (auto* p : registry_) {
            if (p->name == name) return p;
        }
        return nullptr;
    }

    void zero_grads() {
        for (auto* p : registry_) p->g.setZero();
    }

    std::vector<MatR<R>> snapshot() const {
        std::vector<MatR<R>> s;
        s.reserve(registry_.size());
        for (const auto* p : registry_) s.push_back(p->v);
        return s;
    }

    void restore(const std::vector<MatR<R>>& s) {
        for (size_t i = 0; i < registry_.size(); ++i) registry_[i]->v = s[i];
    }

    // Token matrix for a batch: rows grouped per observation as
    // [CLS, feature 1, ..., feature L]; masked rows carry the PAD vector.
    MatR<R> tokenize(const schema::EncodedBatch& batch) const {
        check_batch(batch);
        MatR<R> tokens(batch.rows() * seq_len(), cfg_.token_dim);
        tokenize_into(batch, tokens, nullptr, nullptr, nullptr);
        return tokens;
    }

    // Forward pass; keeps activations cached for a subsequent backward().
    // Returns head outputs z (n x output_dim). `dropout_rng` enables dropout
    // (training mode); pass nullptr for deterministic inference.
    const MatR<R>& forward(const schema::EncodedBatch& batch, Rng* dropout_rng = nullptr) {
        check_batch(batch);
        const Eigen::Index n = batch.rows();
        const Eigen::Index t_len = seq_len();
        const Eigen::Index d = cfg_.token_dim;
        ws_.n = n;
        ws_.mask = batch.mask;
        ws_.cats = batch.cats;

        ws_.tokens.resize(n * t_len, d);
        ws_.tok_u.resize(numeric_slots_.size());
        ws_.tok_h.resize(numeric_slots_.size());
        ws_.tok_x.resize(numeric_slots_.size());
        tokenize_into(batch, ws_.tokens, &ws_.tok_u, &ws_.tok_h, &ws_.tok_x);

        ws_.blocks.resize(static_cast<size_t>(cfg_.depth));
        MatR<R>* x = &ws_.tokens;
        for (int b = 0; b < cfg_.depth; ++b) {
            block_forward(b, *x, ws_.blocks[static_cast<size_t>(b)], dropout_rng);
            x = &ws_.blocks[static_cast<size_t>(b)].x_out;
        }

        ws_.h.resize(n, d);
        for (Eigen::Index i = 0; i < n; ++i) ws_.h.row(i) = x->row(i * t_len);

        ws_.z.resize(n, output_dim());
        ws_.z.noalias() = ws_.h * head_w_->v;
        ws_.z.rowwise() += head_b_->v.row(0);
        return ws_.z;
    }

    // Pooled CLS representation from the most recent forward().
    const MatR<R>& pooled() const { return ws_.h; }

    // Backpropagates dL/dz into parameter gradients (accumulating).
    void backward(const MatR<R>& dz) {
        const Eigen::Index n = ws_.n;
        const Eigen::Index t_len = seq_len();
        const Eigen::Index d = cfg_.token_dim;

        head_w_->g.noalias() += ws_.h.transpose() * dz;
        head_b_->g.row(0) += dz.colwise().sum();

        MatR<R> dx = MatR<R>::Zero(n * t_len, d);
        MatR<R> dh(n, d);
        dh.noalias() = dz * head_w_->v.transpose();
        for (Eigen::Index i = 0; i < n; ++i) dx.row(i * t_len) = dh.row(i);

        for (int b = cfg_.depth - 1; b >= 0; --b) {
            const MatR<R>& x_in = b == 0 ? ws_.tokens : ws_.blocks[static_cast<size_t>(b - 1)].x_out;
            block_backward(b, x_in, ws_.blocks[static_cast<size_t>(b)], dx);
        }
        tokenize_backward(dx);
    }

    // Point predictions: mixture mean for the MDN head, raw output otherwise.
    std::vector<double> predict(const schema::EncodedBatch& batch) {
        const MatR<R>& z = forward(batch);
        std::vector<double> out(static_cast<size_t>(z.rows()));
        if (head_ == HeadKind::mdn) {
            for (Eigen::Index i = 0; i < z.rows(); ++i) {
                out[static_cast<size_t>(i)] = mixture_mean(decode_row(z, i));
            }
        } else {
            for (Eigen::Index i = 0; i < z.rows(); ++i) {
                out[static_cast<size_t>(i)] = static_cast<double>(z(i, 0));
            }
        }
        return out;
    }

    std::vector<MixtureOutput> predict_mixtures(const schema::EncodedBatch& batch) {
        if (head_ != HeadKind::mdn) throw TrainingError("predict_mixtures requires the MDN head");
        const MatR<R>& z = forward(batch);
        std::vector<MixtureOutput> out;
        out.reserve(static_cast<size_t>(z.rows()));
        for (Eigen::Index i = 0; i < z.rows(); ++i) out.push_back(decode_row(z, i));
        return out;
    }

    // Mean training loss over the batch; fills parameter gradients.
    double loss_and_grad(const schema::EncodedBatch& batch, Rng* dropout_rng) {
        const MatR<R>& z = forward(batch, dropout_rng);
        MatR<R> dz(z.rows(), z.cols());
        const double loss = head_ == HeadKind::mdn ? mdn_loss(z, batch.targets, &dz)
                                                   : mse_loss(z, batch.targets, &dz);
        backward(dz);
        return loss;
    }

    // Mean loss without gradient bookkeeping (validation objective).
    double eval_loss(const schema::EncodedBatch& batch) {
        const MatR<R>& z = forward(batch);
        return head_ == HeadKind::mdn ? mdn_loss(z, batch.targets, nullptr)
                                      : mse_loss(z, batch.targets, nullptr);
    }

    MixtureOutput decode_row(const MatR<R>& z, Eigen::Index i) const {
        const int k_comp = cfg_.components;
        MixtureOutput out;
        out.alpha.resize(static_cast<size_t>(k_comp));
        out.mu.resize(static_cast<size_t>(k_comp));
        out.sigma.resize(static_cast<size_t>(k_comp));
        const double tau = cfg_.alpha_temperature;
        double max_l = -1e300;
        for (int k = 0; k < k_comp; ++k) {
            max_l = std::max(max_l, static_cast<double>(z(i, k)) / tau);
        }
        double total = 0.0;
        for (int k = 0; k < k_comp; ++k) {
            out.alpha[static_cast<size_t>(k)] = std::exp(static_cast<double>(z(i, k)) / tau - max_l);
            total += out.alpha[static_cast<size_t>(k)];
        }
        for (int k = 0; k < k_comp; ++k) {
            out.alpha[static_cast<size_t>(k)] /= total;
            out.mu[static_cast<size_t>(k)] =
                sigmoid(static_cast<double>(z(i, k_comp + k))) * cfg_.mu_max;
            out.sigma[static_cast<size_t>(k)] =
                softplus(static_cast<double>(z(i, 2 * k_comp + k))) + cfg_.sigma_floor;
        }
        return out;
    }

private:
    struct NumericTokenizer {
        Param<R>*w1, *b1, *w2, *b2;
    };
    struct Embedding {
        Param<R>* table;
    };
    struct Block {
        Param<R>*ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
        Param<R>*ln2_g, *ln2_b, *w_in, *b_in, *w_out, *b_out;
    };

    struct LnCache {
        MatR<R> xhat;
        Eigen::Matrix<R, Eigen::Dynamic, 1> istd;
        MatR<R> out;
    };

    struct BlockCache {
        LnCache ln1, ln2;
        MatR<R> q, k, v;       // NT x d
        MatR<R> probs;         // (N*H*T) x T
        MatR<R> ctx;           // NT x d
        MatR<R> attn_drop;     // NT x d dropout multipliers (empty when off)
        MatR<R> x_mid;         // NT x d after attention residual
        MatR<R> u;             // NT x 2f pre-activation
        MatR<R> hmat;          // NT x f gated hidden (pre dropout)
        MatR<R> ffn_drop;      // NT x f
        MatR<R> x_out;         // NT x d
    };

    struct Workspace {
        Eigen::Index n = 0;
        Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> mask;
        Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> cats;
        MatR<R> tokens;
        std::vector<MatR<R>> tok_u, tok_h;                  // per numeric slot
        std::vector<Eigen::Matrix<R, Eigen::Dynamic, 1>> tok_x;
        std::vector<BlockCache> blocks;
        MatR<R> h, z;
    };

    Eigen::Index seq_len() const { return static_cast<Eigen::Index>(universe_.size()) + 1; }

    void check_batch(const schema::EncodedBatch& batch) const {
        if (batch.numeric.cols() != static_cast<Eigen::Index>(universe_.size()) ||
            batch.mask.cols() != seq_len()) {
            throw EncodingError("batch width does not match the model's feature universe");
        }
    }

    Param<R>* add_param(const std::string& name, const std::string& group, Eigen::Index rows,
                        Eigen::Index cols, const char* init) {
        auto p = std::make_unique<Param<R>>();
        p->name = name;
        p->group = group;
        p->v.resize(rows, cols);
        p->g = MatR<R>::Zero(rows, cols);
        Rng rng(hash64(init_seed_, name));
        if (std::string(init) == "glorot") {
            const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
            for (Eigen::Index i = 0; i < rows; ++i) {
                for (Eigen::Index j = 0; j < cols; ++j) {
                    p->v(i, j) = static_cast<R>((rng.uniform01() * 2.0 - 1.0) * limit);
                }
            }
        } else if (std::string(init) == "embed") {
            for (Eigen::Index i = 0; i < rows; ++i) {
                for (Eigen::Index j = 0; j < cols; ++j) {
                    p->v(i, j) = static_cast<R>(rng.normal() * 0.02);
                }
            }
        } else if (std::string(init) == "ones") {
            p->v.setOnes();
        } else {
            p->v.setZero();
        }
        Param<R>* raw = p.get();
        storage_.push_back(std::move(p));
        registry_.push_back(raw);
        return raw;
    }

    void build_params() {
        const Eigen::Index d = cfg_.token_dim;
        const Eigen::Index f = cfg_.ffn_width();

        cls_ = add_param("cls", "cls", 1, d, "embed");
        pad_ = add_param("pad", "pad", 1, d, "embed");

        numeric_slots_.clear();
        slot_of_feature_.assign(universe_.size(), -1);
        tokenizers_.clear();
        embeddings_.clear();
        for (size_t j = 0; j < universe_.size(); ++j) {
            const auto& feat = universe_.features[j];
            if (feat.kind == FeatureKind::numeric) {
                const std::string base = "tokenizer." + feat.name;
                const std::string group = "tokenizer:" + feat.name;
                NumericTokenizer t;
                t.w1 = add_param(base + ".w1", group, 1, d, "glorot");
                t.b1 = add_param(base + ".b1", group, 1, d, "zero");
                t.w2 = add_param(base + ".w2", group, d, d, "glorot");
                t.b2 = add_param(base + ".b2", group, 1, d, "zero");
                slot_of_feature_[j] = static_cast<int>(tokenizers_.size());
                numeric_slots_.push_back(j);
                tokenizers_.push_back(t);
            } else {
                Embedding e;
                e.table = add_param("embedding." + feat.name, "embedding:" + feat.name,
                                    vocab_.size(feat.name), d, "embed");
                slot_of_feature_[j] = static_cast<int>(embeddings_.size());
                embeddings_.push_back(e);
            }
        }

        blocks_.clear();
        for (int b = 0; b < cfg_.depth; ++b) {
            const std::string base = "block" + std::to_string(b);
            const std::string group = "block:" + std::to_string(b);
            Block blk;
            blk.ln1_g = add_param(base + ".ln1.gamma", group, 1, d, "ones");
            blk.ln1_b = add_param(base + ".ln1.beta", group, 1, d, "zero");
            blk.wq = add_param(base + ".attn.wq", group, d, d, "glorot");
            blk.bq = add_param(base + ".attn.bq", group, 1, d, "zero");
            blk.wk = add_param(base + ".attn.wk", group, d, d, "glorot");
            blk.bk = add_param(base + ".attn.bk", group, 1, d, "zero");
            blk.wv = add_param(base + ".attn.wv", group, d, d, "glorot");
            blk.bv = add_param(base + ".attn.bv", group, 1, d, "zero");
            blk.wo = add_param(base + ".attn.wo", group, d, d, "glorot");
            blk.bo = add_param(base + ".attn.bo", group, 1, d, "zero");
            blk.ln2_g = add_param(base + ".ln2.gamma", group, 1, d, "ones");
            blk.ln2_b = add_param(base + ".ln2.beta", group, 1, d, "zero");
            blk.w_in = add_param(base + ".ffn.w_in", group, d, 2 * f, "glorot");
            blk.b_in = add_param(base + ".ffn.b_in", group, 1, 2 * f, "zero");
            blk.w_out = add_param(base + ".ffn.w_out", group, f, d, "glorot");
            blk.b_out = add_param(base + ".ffn.b_out", group, 1, d, "zero");
            blocks_.push_back(blk);
        }

        head_w_ = add_param("head.w", "head", d, output_dim(), "glorot");
        head_b_ = add_param("head.b", "head", 1, output_dim(), "zero");
    }

    // Writes token rows; optionally caches numeric tokenizer intermediates.
    void tokenize_into(const schema::EncodedBatch& batch, MatR<R>& tokens,
                       std::vector<MatR<R>>* tok_u, std::vector<MatR<R>>* tok_h,
                       std::vector<Eigen::Matrix<R, Eigen::Dynamic, 1>>* tok_x = nullptr) const {
        const Eigen::Index n = batch.rows();
        const Eigen::Index t_len = seq_len();
        const Eigen::Index d = cfg_.token_dim;

        for (Eigen::Index i = 0; i < n; ++i) tokens.row(i * t_len) = cls_->v.row(0);

        Eigen::Matrix<R, Eigen::Dynamic, 1> xcol(n);
        MatR<R> u(n, d), h(n, d), tok(n, d);
        for (size_t j = 0; j < universe_.size(); ++j) {
            const auto& feat = universe_.features[j];
            const Eigen::Index col = static_cast<Eigen::Index>(j);
            if (feat.kind == FeatureKind::numeric) {
                const int slot = slot_of_feature_[j];
                const NumericTokenizer& t = tokenizers_[static_cast<size_t>(slot)];
                for (Eigen::Index i = 0; i < n; ++i) xcol(i) = static_cast<R>(batch.numeric(i, col));
                u.noalias() = xcol * t.w1->v;
                u.rowwise() += t.b1->v.row(0);
                h = u.unaryExpr([](R x) { return gelu(x); });
                tok.noalias() = h * t.w2->v;
                tok.rowwise() += t.b2->v.row(0);
                for (Eigen::Index i = 0; i < n; ++i) {
                    tokens.row(i * t_len + col + 1) =
                        batch.mask(i, col + 1) ? tok.row(i) : pad_->v.row(0);
                }
                if (tok_u && tok_h && tok_x) {
                    (*tok_u)[static_cast<size_t>(slot)] = u;
                    (*tok_h)[static_cast<size_t>(slot)] = h;
                    (*tok_x)[static_cast<size_t>(slot)] = xcol;
                }
            } else {
                const Embedding& e = embeddings_[static_cast<size_t>(slot_of_feature_[j])];
                const int k_rows = static_cast<int>(e.table->v.rows());
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (!batch.mask(i, col + 1)) {
                        tokens.row(i * t_len + col + 1) = pad_->v.row(0);
                        continue;
                    }
                    const int idx = batch.cats(i, col);
                    if (idx < 0 || idx >= k_rows) {
                        throw EncodingError("categorical index out of vocabulary for '" +
                                            feat.name + "' (UNK must be used upstream)");
                    }
                    tokens.row(i * t_len + col + 1) = e.table->v.row(idx);
                }
            }
        }
    }

    void tokenize_backward(MatR<R>& dx) {
        const Eigen::Index n = ws_.n;
        const Eigen::Index t_len = seq_len();

        // CLS and PAD rows first; PAD rows are zeroed afterwards so feature
        // tokenizers only see gradients from active rows.
        for (Eigen::Index i = 0; i < n; ++i) {
            cls_->g.row(0) += dx.row(i * t_len);
            for (Eigen::Index tpos = 1; tpos < t_len; ++tpos) {
                if (!ws_.mask(i, tpos)) {
                    pad_->g.row(0) += dx.row(i * t_len + tpos);
                    dx.row(i * t_len + tpos).setZero();
                }
            }
        }

        MatR<R> dtok(n, cfg_.token_dim), dh(n, cfg_.token_dim), du(n, cfg_.token_dim);
        for (size_t j = 0; j < universe_.size(); ++j) {
            const auto& feat = universe_.features[j];
            const Eigen::Index col = static_cast<Eigen::Index>(j);
            if (feat.kind == FeatureKind::numeric) {
                const int slot = slot_of_feature_[j];
                const NumericTokenizer& t = tokenizers_[static_cast<size_t>(slot)];
                for (Eigen::Index i = 0; i < n; ++i) dtok.row(i) = dx.row(i * t_len + col + 1);
                const MatR<R>& u = ws_.tok_u[static_cast<size_t>(slot)];
                const MatR<R>& h = ws_.tok_h[static_cast<size_t>(slot)];
                const auto& xcol = ws_.tok_x[static_cast<size_t>(slot)];
                t.w2->g.noalias() += h.transpose() * dtok;
                t.b2->g.row(0) += dtok.colwise().sum();
                dh.noalias() = dtok * t.w2->v.transpose();
                du = dh.cwiseProduct(u.unaryExpr([](R x) { return gelu_grad(x); }));
                t.w1->g.row(0) += xcol.transpose() * du;
                t.b1->g.row(0) += du.colwise().sum();
            } else {
                const Embedding& e = embeddings_[static_cast<size_t>(slot_of_feature_[j])];
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (!ws_.mask(i, col + 1)) continue;
                    // indices were bounds-checked in forward
                    e.table->g.row(ws_.cats(i, col)) += dx.row(i * t_len + col + 1);
                }
            }
        }
    }

    void layer_norm_forward(const MatR<R>& x, const Param<R>& gamma, const Param<R>& beta,
                            LnCache& c) const {
        const Eigen::Index rows = x.rows();
        const Eigen::Index d = x.cols();
        c.xhat.resize(rows, d);
        c.istd.resize(rows);
        c.out.resize(rows, d);
        for (Eigen::Index i = 0; i < rows; ++i) {
            const R mean = x.row(i).mean();
            R var = 0;
            for (Eigen::Index j = 0; j < d; ++j) {
                const R dxi = x(i, j) - mean;
                var += dxi * dxi;
            }
            var /= static_cast<R>(d);
            const R istd = R(1) / std::sqrt(var + R(1e-5));
            c.istd(i) = istd;
            c.xhat.row(i) = (x.row(i).array() - mean).matrix() * istd;
            c.out.row(i) = c.xhat.row(i).cwiseProduct(gamma.v.row(0)) + beta.v.row(0);
        }
    }

    void layer_norm_backward(const MatR<R>& dout, Param<R>& gamma, Param<R>& beta,
                             const LnCache& c, MatR<R>& dx_accum) const {
        const Eigen::Index rows = dout.rows();
        const Eigen::Index d = dout.cols();
        for (Eigen::Index i = 0; i < rows; ++i) {
            gamma.g.row(0) += dout.row(i).cwiseProduct(c.xhat.row(i));
            beta.g.row(0) += dout.row(i);
            // dxhat = dout .* gamma; dx = istd * (dxhat - mean(dxhat) - xhat*mean(dxhat.*xhat))
            Eigen::Matrix<R, 1, Eigen::Dynamic> dxhat =
                dout.row(i).cwiseProduct(gamma.v.row(0));
            const R m1 = dxhat.mean();
            const R m2 = dxhat.cwiseProduct(c.xhat.row(i)).mean();
            dx_accum.row(i) +=
                ((dxhat.array() - m1) - c.xhat.row(i).array() * m2).matrix() * c.istd(i);
        }
    }

    void apply_dropout(MatR<R>& x, MatR<R>& mask_out, Rng* rng) const {
        if (!rng || cfg_.dropout <= 0.0) {
            mask_out.resize(0, 0);
            return;
        }
        const R keep_scale = static_cast<R>(1.0 / (1.0 - cfg_.dropout));
        mask_out.resize(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                mask_out(i, j) = rng->uniform01() < cfg_.dropout ? R(0) : keep_scale;
            }
        }
        x = x.cwiseProduct(mask_out);
    }

    void block_forward(int b, const MatR<R>& x_in, BlockCache& c, Rng* dropout_rng) {
        const Block& blk = blocks_[static_cast<size_t>(b)];
        const Eigen::Index n = ws_.n;
        const Eigen::Index t_len = seq_len();
        const Eigen::Index d = cfg_.token_dim;
        const int heads = cfg_.heads;
        const Eigen::Index dh = d / heads;
        const R inv_sqrt_dh = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));

        layer_norm_forward(x_in, *blk.ln1_g, *blk.ln1_b, c.ln1);

        c.q.resize(n * t_len, d);
        c.k.resize(n * t_len, d);
        c.v.resize(n * t_len, d);
        c.q.noalias() = c.ln1.out * blk.wq->v;
        c.q.rowwise() += blk.bq->v.row(0);
        c.k.noalias() = c.ln1.out * blk.wk->v;
        c.k.rowwise() += blk.bk->v.row(0);
        c.v.noalias() = c.ln1.out * blk.wv->v;
        c.v.rowwise() += blk.bv->v.row(0);

        // Masked multi-head attention: masked positions are excluded as keys
        // (zero probability) and as queries (zeroed output rows).
        c.probs.setZero(n * heads * t_len, t_len);
        c.ctx.setZero(n * t_len, d);
        Eigen::Matrix<R, Eigen::Dynamic, 1> scores(t_len);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int hidx = 0; hidx < heads; ++hidx) {
                const auto qb = c.q.block(i * t_len, hidx * dh, t_len, dh);
                const auto kb = c.k.block(i * t_len, hidx * dh, t_len, dh);
                const auto vb = c.v.block(i * t_len, hidx * dh, t_len, dh);
                auto pb = c.probs.block((i * heads + hidx) * t_len, 0, t_len, t_len);
                for (Eigen::Index qi = 0; qi < t_len; ++qi) {
                    if (!ws_.mask(i, qi)) continue;
                    R max_s = std::numeric_limits<R>::lowest();
                    for (Eigen::Index ki = 0; ki < t_len; ++ki) {
                        if (!ws_.mask(i, ki)) continue;
                        scores(ki) = qb.row(qi).dot(kb.row(ki)) * inv_sqrt_dh;
                        max_s = std::max(max_s, scores(ki));
                    }
                    R total = 0;
                    for (Eigen::Index ki = 0; ki < t_len; ++ki) {
                        if (!ws_.mask(i, ki)) continue;
                        const R e = std::exp(scores(ki) - max_s);
                        pb(qi, ki) = e;
                        total += e;
                    }
                    pb.row(qi) /= total;
                    c.ctx.block(i * t_len + qi, hidx * dh, 1, dh).noalias() = pb.row(qi) * vb;
                }
            }
        }

        MatR<R> proj(n * t_len, d);
        proj.noalias() = c.ctx * blk.wo->v;
        proj.rowwise() += blk.bo->v.row(0);
        apply_dropout(proj, c.attn_drop, dropout_rng);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index tpos = 0; tpos < t_len; ++tpos) {
                if (!ws_.mask(i, tpos)) proj.row(i * t_len + tpos).setZero();
            }
        }
        c.x_mid = x_in + proj;

        layer_norm_forward(c.x_mid, *blk.ln2_g, *blk.ln2_b, c.ln2);

        const Eigen::Index f = cfg_.ffn_width();
        c.u.resize(n * t_len, 2 * f);
        c.u.noalias() = c.ln2.out * blk.w_in->v;
        c.u.rowwise() += blk.b_in->v.row(0);
        c.hmat.resize(n * t_len, f);
        c.hmat = c.u.leftCols(f).cwiseProduct(
            c.u.rightCols(f).unaryExpr([](R x) { return gelu(x); }));
        MatR<R> hdrop = c.hmat;
        apply_dropout(hdrop, c.ffn_drop, dropout_rng);
        c.x_out.resize(n * t_len, d);
        c.x_out.noalias() = hdrop * blk.w_out->v;
        c.x_out.rowwise() += blk.b_out->v.row(0);
        c.x_out += c.x_mid;
    }

    void block_backward(int b, const MatR<R>& x_in, BlockCache& c, MatR<R>& dx) {
        Block& blk = blocks_[static_cast<size_t>(b)];
        const Eigen::Index n = ws_.n;
        const Eigen::Index t_len = seq_len();
        const Eigen::Index d = cfg_.token_dim;
        const Eigen::Index f = cfg_.ffn_width();
        const int heads = cfg_.heads;
        const Eigen::Index dh = d / heads;
        const R inv_sqrt_dh = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));

        // FFN residual: dx feeds both the residual path and the FFN path.
        MatR<R> dhdrop(n * t_len, f);
        dhdrop.noalias() = dx * blk.w_out->v.transpose();
        {
            MatR<R> hdrop = c.hmat;
            if (c.ffn_drop.size() > 0) hdrop = hdrop.cwiseProduct(c.ffn_drop);
            blk.w_out->g.noalias() += hdrop.transpose() * dx;
        }
        blk.b_out->g.row(0) += dx.colwise().sum();
        if (c.ffn_drop.size() > 0) dhdrop = dhdrop.cwiseProduct(c.ffn_drop);

        MatR<R> du(n * t_len, 2 * f);
        du.leftCols(f) =
            dhdrop.cwiseProduct(c.u.rightCols(f).unaryExpr([](R x) { return gelu(x); }));
        du.rightCols(f) = dhdrop.cwiseProduct(c.u.leftCols(f))
                              .cwiseProduct(c.u.rightCols(f).unaryExpr(
                                  [](R x) { return gelu_grad(x); }));
        blk.w_in->g.noalias() += c.ln2.out.transpose() * du;
        blk.b_in->g.row(0) += du.colwise().sum();

        MatR<R> dln2(n * t_len, d);
        dln2.noalias() = du * blk.w_in->v.transpose();
        // dx currently equals d(x_out); x_out = x_mid + ffn(ln2(x_mid)),
        // so d(x_mid) = dx + ln2-backprop contribution.
        layer_norm_backward(dln2, *blk.ln2_g, *blk.ln2_b, c.ln2, dx);

        // Attention residual: the projection was zeroed at masked rows.
        MatR<R> dproj = dx;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index tpos = 0; tpos < t_len; ++tpos) {
                if (!ws_.mask(i, tpos)) dproj.row(i * t_len + tpos).setZero();
            }
        }
        if (c.attn_drop.size() > 0) dproj = dproj.cwiseProduct(c.attn_drop);

        MatR<R> dctx(n * t_len, d);
        dctx.noalias() = dproj * blk.wo->v.transpose();
        blk.wo->g.noalias() += c.ctx.transpose() * dproj;
        blk.bo->g.row(0) += dproj.colwise().sum();

        MatR<R> dq = MatR<R>::Zero(n * t_len, d);
        MatR<R> dk = MatR<R>::Zero(n * t_len, d);
        MatR<R> dv = MatR<R>::Zero(n * t_len, d);
        Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dp(t_len, t_len);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int hidx = 0; hidx < heads; ++hidx) {
                const auto qb = c.q.block(i * t_len, hidx * dh, t_len, dh);
                const auto kb = c.k.block(i * t_len, hidx * dh, t_len, dh);
                const auto vb = c.v.block(i * t_len, hidx * dh, t_len, dh);
                const auto pb = c.probs.block((i * heads + hidx) * t_len, 0, t_len, t_len);
                const auto dctxb = dctx.block(i * t_len, hidx * dh, t_len, dh);
                auto dqb = dq.block(i * t_len, hidx * dh, t_len, dh);
                auto dkb = dk.block(i * t_len, hidx * dh, t_len, dh);
                auto dvb = dv.block(i * t_len, hidx * dh, t_len, dh);

                dvb.noalias() += pb.transpose() * dctxb;
                dp.noalias() = dctxb * vb.transpose();
                // softmax backward per active query row
                for (Eigen::Index qi = 0; qi < t_len; ++qi) {
                    if (!ws_.mask(i, qi)) {
                        dp.row(qi).setZero();
                        continue;
                    }
                    const R dot = dp.row(qi).cwiseProduct(pb.row(qi)).sum();
                    dp.row(qi) = pb.row(qi).cwiseProduct(
                        (dp.row(qi).array() - dot).matrix()) * inv_sqrt_dh;
                }
                dqb.noalias() += dp * kb;
                dkb.noalias() += dp.transpose() * qb;
            }
        }

        MatR<R> dln1(n * t_len, d);
        dln1.noalias() = dq * blk.wq->v.transpose();
        dln1.noalias() += dk * blk.wk->v.transpose();
        dln1.noalias() += dv * blk.wv->v.transpose();
        blk.wq->g.noalias() += c.ln1.out.transpose() * dq;
        blk.bq->g.row(0) += dq.colwise().sum();
        blk.wk->g.noalias() += c.ln1.out.transpose() * dk;
        blk.bk->g.row(0) += dk.colwise().sum();
        blk.wv->g.noalias() += c.ln1.out.transpose() * dv;
        blk.bv->g.row(0) += dv.colwise().sum();

        layer_norm_backward(dln1, *blk.ln1_g, *blk.ln1_b, c.ln1, dx);
    }

    double mdn_loss(const MatR<R>& z, const std::vector<double>& targets, MatR<R>* dz) const {
        const Eigen::Index n = z.rows();
        const int k_comp = cfg_.components;
        const double tau = cfg_.alpha_temperature;
        const double inv_n = 1.0 / static_cast<double>(n);
        double total = 0.0;
        std::vector<double> la(static_cast<size_t>(k_comp)), lk(static_cast<size_t>(k_comp));
        std::vector<double> alpha(static_cast<size_t>(k_comp)), mu(static_cast<size_t>(k_comp)),
            sig(static_cast<size_t>(k_comp)), sm(static_cast<size_t>(k_comp));
        for (Eigen::Index i = 0; i < n; ++i) {
            const double r = targets[static_cast<size_t>(i)];
            double max_a = -1e300;
            for (int k = 0; k < k_comp; ++k) {
                la[k] = static_cast<double>(z(i, k)) / tau;
                max_a = std::max(max_a, la[k]);
            }
            double zsum = 0.0;
            for (int k = 0; k < k_comp; ++k) zsum += std::exp(la[k] - max_a);
            const double log_norm = max_a + std::log(zsum);
            double max_l = -1e300;
            for (int k = 0; k < k_comp; ++k) {
                la[k] -= log_norm;
                alpha[k] = std::exp(la[k]);
                sm[k] = sigmoid(static_cast<double>(z(i, k_comp + k)));
                mu[k] = sm[k] * cfg_.mu_max;
                sig[k] = softplus(static_cast<double>(z(i, 2 * k_comp + k))) + cfg_.sigma_floor;
                lk[k] = la[k] + normal_log_pdf(r, mu[k], sig[k]);
                max_l = std::max(max_l, lk[k]);
            }
            double lsum = 0.0;
            for (int k = 0; k < k_comp; ++k) lsum += std::exp(lk[k] - max_l);
            const double lse = max_l + std::log(lsum);
            total -= lse;
            if (!dz) continue;
            for (int k = 0; k < k_comp; ++k) {
                const double gamma = std::exp(lk[k] - lse);
                (*dz)(i, k) = static_cast<R>((alpha[k] - gamma) / tau * inv_n);
                const double dmu = gamma * (mu[k] - r) / (sig[k] * sig[k]);
                (*dz)(i, k_comp + k) =
                    static_cast<R>(dmu * sm[k] * (1.0 - sm[k]) * cfg_.mu_max * inv_n);
                const double dsig =
                    gamma * (1.0 / sig[k] - (r - mu[k]) * (r - mu[k]) / (sig[k] * sig[k] * sig[k]));
                (*dz)(i, 2 * k_comp + k) = static_cast<R>(
                    dsig * sigmoid(static_cast<double>(z(i, 2 * k_comp + k))) * inv_n);
            }
        }
        return total * inv_n;
    }

    double mse_loss(const MatR<R>& z, const std::vector<double>& targets, MatR<R>* dz) const {
        const Eigen::Index n = z.rows();
        const double inv_n = 1.0 / static_cast<double>(n);
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double err = static_cast<double>(z(i, 0)) - targets[static_cast<size_t>(i)];
            total += err * err;
            if (dz) (*dz)(i, 0) = static_cast<R>(2.0 * err * inv_n);
        }
        return total * inv_n;
    }

    ModelConfig cfg_;
    schema::Schema universe_;
    schema::CategoryVocab vocab_;
    HeadKind head_;
    uint64_t init_seed_;

    std::vector<std::unique_ptr<Param<R>>> storage_;
    std::vector<Param<R>*> registry_;
    Param<R>*cls_ = nullptr, *pad_ = nullptr;
    std::vector<NumericTokenizer> tokenizers_;
    std::vector<Embedding> embeddings_;
    std::vector<int> slot_of_feature_;
    std::vector<size_t> numeric_slots_;
    std::vector<Block> blocks_;
    Param<R>*head_w_ = nullptr, *head_b_ = nullptr;

    Workspace ws_;
};

// Rebuild a model for a new schema: shared-feature tokenizers/embeddings and
// all backbone/head parameters carry over exactly; features new to the
// universe get freshly initialized tokenizers; dropped features disappear.
// Shared features must keep their kind.
template <typename R>
FtModel<R> reconfigure_for_schema(const FtModel<R>& m, const schema::Schema& new_universe,
                                  const schema::CategoryVocab& new_vocab) {
    for (size_t j = 0; j < new_universe.size(); ++j) {
        const auto& feat = new_universe.features[j];
        const int old_idx = m.universe().index_of(feat.name);
        if (old_idx >= 0 &&
            m.universe().features[static_cast<size_t>(old_idx)].kind != feat.kind) {
            throw SchemaError("reconfigure: feature '" + feat.name +
                              "' changes kind between schemas");
        }
    }
    FtModel<R> out(m.config(), new_universe, new_vocab, m.head_kind(), m.init_seed());
    auto& target_params = out.params();
    for (auto* p : target_params) {
        // carried-over parameters are matched by name
        const Param<R>* src = const_cast<FtModel<R>&>(m).find_param(p->name);
        if (!src) continue;
        if (p->name.rfind("embedding.", 0) == 0) {
            const std::string feat = p->name.substr(10);
            const auto& old_cats = m.vocab().categories.at(feat);
            const auto& new_cats = new_vocab.categories.at(feat);
            if (old_cats == new_cats) {
                p->v = src->v;
            } else {
                // vocabularies differ: copy rows for categories present in
                // both, keep fresh init elsewhere; UNK row carries over
                for (size_t ci = 0; ci < new_cats.size(); ++ci) {
                    const auto it =
                        std::lower_bound(old_cats.begin(), old_cats.end(), new_cats[ci]);
                    if (it != old_cats.end() && *it == new_cats[ci]) {
                        p->v.row(static_cast<Eigen::Index>(ci)) =
                            src->v.row(it - old_cats.begin());
                    }
                }
                p->v.row(p->v.rows() - 1) = src->v.row(src->v.rows() - 1);
            }
        } else {
            if (p->v.rows() != src->v.rows() || p->v.cols() != src->v.cols()) {
                throw SchemaError("reconfigure: shape mismatch for parameter '" + p->name + "'");
            }
            p->v = src->v;
        }
    }
    return out;
}

// ----------------------------- checkpoints -----------------------------
// A checkpoint is a directory with manifest.json (model config, schema,
// vocab, parameter table) and params.bin (float64 little-endian values in
// table order). Loading validates the manifest against the rebuilt model
// before restoring values.

inline constexpr const char* kCheckpointVersion = "rrtl-checkpoint-1";

template <typename R>
void save_checkpoint(const FtModel<R>& m, const std::string& dir);

template <typename R>
FtModel<R> load_checkpoint(const std::string& dir);

}  // namespace rrtl::model

#include "rrtl/model_io.inl"
