#pragma once

#include "amst/cnn_classifier.hpp"
#include "amst/mask_model.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace amst {

struct SentiMLMConfig {
    int layers{2};
    int dim{128};
    int heads{4};
    int ff_dim{256};
    int max_len{64};
};

struct TransferResult {
    std::vector<std::string> tokens;  // output sentence, length N
    std::vector<int> token_ids;
    Label target{Label::positive};
    std::vector<std::size_t> masked_positions;
    std::vector<VecD> masked_distributions;  // one vocab-sized distribution per masked position
};

// Transformer encoder whose segment embeddings are replaced by a
// sentence-level sentiment-label embedding added at every position. Final
// hidden states feed both a token-vocabulary head and a 3-class word
// polarity head.
class SentiMLMModel {
public:
    SentiMLMModel(int vocab_size, std::uint64_t vocab_hash, const SentiMLMConfig& cfg,
                  std::uint64_t seed)
        : cfg_(cfg), vocab_size_(vocab_size), vocab_hash_(vocab_hash) {
        Rng rng(seed);
        tok_ = Embedding(reg_, "tok_emb", vocab_size, cfg.dim, rng, 0.05);
        pos_ = Embedding(reg_, "pos_emb", cfg.max_len, cfg.dim, rng, 0.05);
        lab_ = Embedding(reg_, "label_emb", 2, cfg.dim, rng, 0.05);
        layers_.resize(static_cast<std::size_t>(cfg.layers));
        for (int l = 0; l < cfg.layers; ++l) {
            auto& L = layers_[static_cast<std::size_t>(l)];
            const std::string p = "layer" + std::to_string(l) + ".";
            L.ln1_g = reg_.add(p + "ln1.g", Mat::Ones(1, cfg.dim));
            L.ln1_b = reg_.add(p + "ln1.b", Mat::Zero(1, cfg.dim));
            L.q = Linear(reg_, p + "q", cfg.dim, cfg.dim, rng);
            L.k = Linear(reg_, p + "k", cfg.dim, cfg.dim, rng);
            L.v = Linear(reg_, p + "v", cfg.dim, cfg.dim, rng);
            L.o = Linear(reg_, p + "o", cfg.dim, cfg.dim, rng);
            L.ln2_g = reg_.add(p + "ln2.g", Mat::Ones(1, cfg.dim));
            L.ln2_b = reg_.add(p + "ln2.b", Mat::Zero(1, cfg.dim));
            L.ff1 = Linear(reg_, p + "ff1", cfg.dim, cfg.ff_dim, rng);
            L.ff2 = Linear(reg_, p + "ff2", cfg.ff_dim, cfg.dim, rng);
        }
        lnf_g_ = reg_.add("lnf.g", Mat::Ones(1, cfg.dim));
        lnf_b_ = reg_.add("lnf.b", Mat::Zero(1, cfg.dim));
        token_head_ = Linear(reg_, "token_head", cfg.dim, vocab_size, rng);
        polarity_head_ = Linear(reg_, "polarity_head", cfg.dim, 3, rng);
    }

    // Per-position sum of token, position, and label embeddings for one
    // sentence (the label embedding broadcasts to every position).
    Var embed_inputs(const std::vector<int>& ids, Label label) const {
        check_ids(ids);
        std::vector<int> pos_ids(ids.size());
        std::vector<int> lab_ids(ids.size(), index_of(label));
        for (std::size_t i = 0; i < ids.size(); ++i) pos_ids[i] = static_cast<int>(i);
        return add(add(tok_.rows(ids), pos_.rows(pos_ids)), lab_.rows(lab_ids));
    }

    struct Forward {
        Var hidden;           // R x dim
        Var token_logits;     // R x vocab
        Var polarity_logits;  // R x 3
        Eigen::Index seq_len{0};
        std::size_t batch{0};
    };

    // Batched forward over same-length id sequences (one per sentence).
    Forward forward_batch(const std::vector<const std::vector<int>*>& ids_batch,
                          const std::vector<Label>& labels) const {
        if (ids_batch.empty() || ids_batch.size() != labels.size()) {
            fail("mlm", "bad forward batch");
        }
        const std::size_t n = ids_batch.front()->size();
        std::vector<int> flat;
        std::vector<int> pos_ids;
        std::vector<int> lab_ids;
        flat.reserve(ids_batch.size() * n);
        pos_ids.reserve(flat.capacity());
        lab_ids.reserve(flat.capacity());
        for (std::size_t b = 0; b < ids_batch.size(); ++b) {
            check_ids(*ids_batch[b]);
            if (ids_batch[b]->size() != n) fail("mlm", "batch sequences must share one length");
            for (std::size_t t = 0; t < n; ++t) {
                flat.push_back((*ids_batch[b])[t]);
                pos_ids.push_back(static_cast<int>(t));
                lab_ids.push_back(index_of(labels[b]));
            }
        }
        Var x = add(add(tok_.rows(flat), pos_.rows(pos_ids)), lab_.rows(lab_ids));

        std::vector<Eigen::Index> offsets(ids_batch.size());
        std::vector<Eigen::Index> lens(ids_batch.size(), static_cast<Eigen::Index>(n));
        for (std::size_t b = 0; b < ids_batch.size(); ++b) {
            offsets[b] = static_cast<Eigen::Index>(b * n);
        }
        for (const auto& L : layers_) {
            Var x1 = layer_norm_rows(x, L.ln1_g, L.ln1_b);
            Var att = multihead_attention(L.q(x1), L.k(x1), L.v(x1), cfg_.heads, offsets, lens);
            x = add(x, L.o(att));
            Var x2 = layer_norm_rows(x, L.ln2_g, L.ln2_b);
            x = add(x, L.ff2(relu_(L.ff1(x2))));
        }
        Forward f;
        f.hidden = layer_norm_rows(x, lnf_g_, lnf_b_);
        f.token_logits = token_head_(f.hidden);
        f.polarity_logits = polarity_head_(f.hidden);
        f.seq_len = static_cast<Eigen::Index>(n);
        f.batch = ids_batch.size();
        return f;
    }

    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    const SentiMLMConfig& config() const { return cfg_; }
    int vocab_size() const { return vocab_size_; }
    std::uint64_t vocab_hash() const { return vocab_hash_; }

private:
    void check_ids(const std::vector<int>& ids) const {
        if (ids.empty()) fail("mlm", "empty id sequence");
        if (static_cast<int>(ids.size()) > cfg_.max_len) {
            fail("mlm", "sequence longer than max position count (" +
                            std::to_string(cfg_.max_len) + ")");
        }
        for (const int id : ids) {
            if (id < 0 || id >= vocab_size_) fail("mlm", "token id out of vocabulary");
        }
    }

    struct Layer {
        Var ln1_g, ln1_b;
        Linear q, k, v, o;
        Var ln2_g, ln2_b;
        Linear ff1, ff2;
    };

    SentiMLMConfig cfg_;
    int vocab_size_;
    std::uint64_t vocab_hash_;
    ParamRegistry reg_;
    Embedding tok_;
    Embedding pos_;
    Embedding lab_;
    std::vector<Layer> layers_;
    Var lnf_g_, lnf_b_;
    Linear token_head_;
    Linear polarity_head_;
};

struct FillResult {
    std::vector<VecD> token_distributions;     // N rows over vocab
    std::vector<VecD> polarity_distributions;  // N rows over 3 classes
};

// Token and polarity distributions at every position; requires at least one
// [mask] in the input (there is nothing to fill otherwise).
inline FillResult forward_fill(const SentiMLMModel& model, const std::vector<int>& masked_ids,
                               Label label) {
    if (std::find(masked_ids.begin(), masked_ids.end(), Vocabulary::kMaskId) == masked_ids.end()) {
        fail("mlm", "no [mask] position present: nothing to fill");
    }
    auto f = model.forward_batch({&masked_ids}, {label});
    Mat tok = softmax_rows_value(f.token_logits->val);
    Mat pol = softmax_rows_value(f.polarity_logits->val);
    FillResult r;
    for (Eigen::Index i = 0; i < tok.rows(); ++i) {
        r.token_distributions.emplace_back(tok.row(i).begin(), tok.row(i).end());
        r.polarity_distributions.emplace_back(pol.row(i).begin(), pol.row(i).end());
    }
    return r;
}

// ---------------------------------------------------------------------------
// losses (graph builders + scalar wrappers)

// L_rec: negative log-likelihood of the original tokens at masked positions
// given the original label and C, summed per sentence and averaged over the
// batch. (The printed form of the paper's reconstruction loss sums raw
// probabilities; see loss_rec_sum_probs below, kept for inspection only.)
inline Var loss_rec_graph(const SentiMLMModel& model,
                          const std::vector<const LabeledSentence*>& batch,
                          const std::vector<const DisentangledPair*>& pairs,
                          const Vocabulary& v) {
    if (batch.empty() || batch.size() != pairs.size()) fail("mlm", "bad loss_rec batch");
    std::vector<std::vector<int>> masked(batch.size());
    std::vector<const std::vector<int>*> masked_ptr(batch.size());
    std::vector<Label> labels(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        masked[b] = render_masked(*batch[b], *pairs[b], v);
        masked_ptr[b] = &masked[b];
        labels[b] = batch[b]->label;
    }
    auto f = model.forward_batch(masked_ptr, labels);
    std::vector<int> rows;
    std::vector<int> targets;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (const auto p : pairs[b]->S) {
            rows.push_back(static_cast<int>(b * static_cast<std::size_t>(f.seq_len) + p));
            targets.push_back(batch[b]->token_ids[p]);
        }
    }
    Var picked = gather_rows(f.token_logits, rows);
    Var total = cross_entropy_rows(picked, targets, Reduction::sum);
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

inline double loss_rec(const SentiMLMModel& model, const LabeledSentence& x,
                       const DisentangledPair& pair, const Vocabulary& v) {
    return loss_rec_graph(model, {&x}, {&pair}, v)->scalar();
}

// The reconstruction objective exactly as printed (positive sum of raw
// probabilities); diagnostic only, never trained on.
inline double loss_rec_sum_probs(const SentiMLMModel& model, const LabeledSentence& x,
                                 const DisentangledPair& pair, const Vocabulary& v) {
    auto fill = forward_fill(model, render_masked(x, pair, v), x.label);
    double s = 0.0;
    for (const auto p : pair.S) {
        s += fill.token_distributions[p][static_cast<std::size_t>(x.token_ids[p])];
    }
    return s;
}

// L_senti: mean 3-class cross-entropy of the polarity head against gold
// word-level polarities over all positions.
inline Var loss_senti_graph(const SentiMLMModel& model,
                            const std::vector<const LabeledSentence*>& batch,
                            const std::vector<const DisentangledPair*>& pairs,
                            const std::vector<const std::vector<Polarity>*>& gold,
                            const Vocabulary& v) {
    if (batch.empty() || batch.size() != pairs.size() || batch.size() != gold.size()) {
        fail("mlm", "bad loss_senti batch");
    }
    std::vector<std::vector<int>> masked(batch.size());
    std::vector<const std::vector<int>*> masked_ptr(batch.size());
    std::vector<Label> labels(batch.size());
    std::vector<int> targets;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (gold[b]->size() != batch[b]->size()) fail("mlm", "gold polarity sequence length mismatch");
        masked[b] = render_masked(*batch[b], *pairs[b], v);
        masked_ptr[b] = &masked[b];
        labels[b] = batch[b]->label;
        for (const auto p : *gold[b]) targets.push_back(index_of(p));
    }
    auto f = model.forward_batch(masked_ptr, labels);
    return cross_entropy_rows(f.polarity_logits, targets, Reduction::mean);
}

inline double loss_senti(const SentiMLMModel& model, const LabeledSentence& x,
                         const DisentangledPair& pair, const std::vector<Polarity>& gold,
                         const Vocabulary& v) {
    return loss_senti_graph(model, {&x}, {&pair}, {&gold}, v)->scalar();
}

// L_1 = theta1 * L_rec + theta2 * L_senti
inline double combine_stage1(const LossWeights& w, double l_rec, double l_senti) {
    w.validate();
    return w.theta1 * l_rec + w.theta2 * l_senti;
}

inline Var combine_stage1_graph(const LossWeights& w, const Var& l_rec, const Var& l_senti,
                                bool skip_zero_terms = true) {
    w.validate();
    Var total = scalar_const(0.0);
    if (!skip_zero_terms || w.theta1 != 0.0) total = add(total, scale(l_rec, w.theta1));
    if (!skip_zero_terms || w.theta2 != 0.0) total = add(total, scale(l_senti, w.theta2));
    return total;
}

// L_2 = theta3 * L_rec + theta4 * L_acc
inline double combine_stage3(const LossWeights& w, double l_rec, double l_acc) {
    w.validate();
    return w.theta3 * l_rec + w.theta4 * l_acc;
}

inline Var combine_stage3_graph(const LossWeights& w, const Var& l_rec, const Var& l_acc,
                                bool skip_zero_terms = true) {
    w.validate();
    Var total = scalar_const(0.0);
    if (!skip_zero_terms || w.theta3 != 0.0) total = add(total, scale(l_rec, w.theta3));
    if (!skip_zero_terms || w.theta4 != 0.0) total = add(total, scale(l_acc, w.theta4));
    return total;
}

// ---------------------------------------------------------------------------
// transfer

struct DecodeOptions {
    bool sample{false};
    double temperature{1.0};
};

// X~ = SentiMLM(C, target): masked positions are filled from the token
// distributions (greedy argmax unless sampling), content positions are
// copied verbatim. Special ids are excluded from decoding so the output is
// always a real sentence.
inline TransferResult transfer(const SentiMLMModel& model, const LabeledSentence& x,
                               const DisentangledPair& pair, Label target, const Vocabulary& v,
                               const DecodeOptions& opts = {}, Rng* rng = nullptr) {
    auto masked = render_masked(x, pair, v);
    auto fill = forward_fill(model, masked, target);
    TransferResult r;
    r.target = target;
    r.token_ids = x.token_ids;
    r.tokens = x.tokens;
    for (const auto p : pair.S) {
        const VecD& dist = fill.token_distributions[p];
        int chosen = Vocabulary::kNumSpecial;
        if (opts.sample) {
            if (rng == nullptr) fail("mlm", "sampling decode requires an rng");
            VecD weights(dist.size(), 0.0);
            double total = 0.0;
            for (std::size_t i = Vocabulary::kNumSpecial; i < dist.size(); ++i) {
                weights[i] = std::pow(std::max(dist[i], 0.0), 1.0 / opts.temperature);
                total += weights[i];
            }
            double u = rng->uniform01() * total;
            for (std::size_t i = Vocabulary::kNumSpecial; i < dist.size(); ++i) {
                u -= weights[i];
                if (u <= 0.0) {
                    chosen = static_cast<int>(i);
                    break;
                }
            }
        } else {
            double best = -1.0;
            for (std::size_t i = Vocabulary::kNumSpecial; i < dist.size(); ++i) {
                if (dist[i] > best) {
                    best = dist[i];
                    chosen = static_cast<int>(i);
                }
            }
        }
        r.token_ids[p] = chosen;
        r.tokens[p] = v.token_of(chosen);
        r.masked_positions.push_back(p);
        r.masked_distributions.push_back(dist);
    }
    return r;
}

// ---------------------------------------------------------------------------
// L_acc (Eq. 13): -log p(target | X~) under the CNN discriminator, computed
// on soft expected embeddings at the masked positions so gradients reach the
// generator.

inline Var loss_acc_graph(const SentiMLMModel& model, const LabeledSentence& x,
                          const DisentangledPair& pair, Label target,
                          const CnnSentimentDiscriminator& disc, const Vocabulary& v) {
    if (!disc.trained()) fail("mlm", "untrained discriminator");
    auto masked = render_masked(x, pair, v);
    auto f = model.forward_batch({&masked}, {target});
    std::vector<Var> rows;
    rows.reserve(x.size());
    std::size_t si = 0;
    for (std::size_t t = 0; t < x.size(); ++t) {
        if (si < pair.S.size() && pair.S[si] == t) {
            Var probs = softmax_rows(slice_rows(f.token_logits, static_cast<Eigen::Index>(t), 1));
            rows.push_back(matmul(probs, disc.embedding().table));
            ++si;
        } else {
            rows.push_back(disc.embedding().rows({x.token_ids[t]}));
        }
    }
    Var logits = disc.logits_from_rows(concat_rows(rows));
    return cross_entropy_rows(logits, {index_of(target)}, Reduction::mean);
}

// Scalar form over an already-decoded TransferResult: same number as the
// graph form for the same inputs, evaluated from the stored distributions.
inline double loss_acc(const TransferResult& result, const CnnSentimentDiscriminator& disc) {
    if (!disc.trained()) fail("mlm", "untrained discriminator");
    if (result.token_ids.empty()) fail("mlm", "empty transfer result");
    const Mat& table = disc.embedding().table->val;
    Mat rows(static_cast<Eigen::Index>(result.token_ids.size()), table.cols());
    std::size_t si = 0;
    for (std::size_t t = 0; t < result.token_ids.size(); ++t) {
        if (si < result.masked_positions.size() && result.masked_positions[si] == t) {
            Eigen::RowVectorXd soft = Eigen::RowVectorXd::Zero(table.cols());
            const VecD& dist = result.masked_distributions[si];
            for (std::size_t w = 0; w < dist.size(); ++w) {
                if (dist[w] != 0.0) soft += dist[w] * table.row(static_cast<Eigen::Index>(w));
            }
            rows.row(static_cast<Eigen::Index>(t)) = soft;
            ++si;
        } else {
            rows.row(static_cast<Eigen::Index>(t)) = table.row(result.token_ids[t]);
        }
    }
    Var logits = disc.logits_from_rows(constant(std::move(rows)));
    Mat p = softmax_rows_value(logits->val);
    return -safe_log(p(0, index_of(result.target)));
}

// Rule for corpora without oracle annotations: masked positions inherit the
// sentence label, others are neutral.
inline std::vector<Polarity> polarity_targets_from_pair(const LabeledSentence& x,
                                                        const DisentangledPair& pair) {
    std::vector<Polarity> out(x.size(), Polarity::neutral);
    for (const auto p : pair.S) out[p] = polarity_of(x.label);
    return out;
}

// ---------------------------------------------------------------------------
// batched stage losses for the training driver (one encoder pass feeds both
// heads; the per-op functions above stay as the reference surface)

struct StageLosses {
    Var rec;    // always set
    Var senti;  // set when gold polarities were supplied
};

inline StageLosses stage_batch_losses(const SentiMLMModel& model,
                                      const std::vector<const LabeledSentence*>& batch,
                                      const std::vector<const DisentangledPair*>& pairs,
                                      const std::vector<const std::vector<Polarity>*>* gold,
                                      const Vocabulary& v) {
    if (batch.empty() || batch.size() != pairs.size()) fail("mlm", "bad stage batch");
    std::vector<std::vector<int>> masked(batch.size());
    std::vector<const std::vector<int>*> masked_ptr(batch.size());
    std::vector<Label> labels(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        masked[b] = render_masked(*batch[b], *pairs[b], v);
        masked_ptr[b] = &masked[b];
        labels[b] = batch[b]->label;
    }
    auto f = model.forward_batch(masked_ptr, labels);

    StageLosses out;
    std::vector<int> rows;
    std::vector<int> targets;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (const auto p : pairs[b]->S) {
            rows.push_back(static_cast<int>(b * static_cast<std::size_t>(f.seq_len) + p));
            targets.push_back(batch[b]->token_ids[p]);
        }
    }
    out.rec = scale(cross_entropy_rows(gather_rows(f.token_logits, rows), targets, Reduction::sum),
                    1.0 / static_cast<double>(batch.size()));
    if (gold != nullptr) {
        std::vector<int> pol_targets;
        pol_targets.reserve(batch.size() * static_cast<std::size_t>(f.seq_len));
        for (std::size_t b = 0; b < batch.size(); ++b) {
            if ((*gold)[b]->size() != batch[b]->size()) {
                fail("mlm", "gold polarity sequence length mismatch");
            }
            for (const auto p : *(*gold)[b]) pol_targets.push_back(index_of(p));
        }
        out.senti = cross_entropy_rows(f.polarity_logits, pol_targets, Reduction::mean);
    }
    return out;
}

// Batched L_acc: one transfer-direction encoder pass for the whole batch,
// then a per-sentence discriminator graph over gold/soft embedding rows.
inline Var loss_acc_batch(const SentiMLMModel& model,
                          const std::vector<const LabeledSentence*>& batch,
                          const std::vector<const DisentangledPair*>& pairs,
                          const std::vector<Label>& targets,
                          const CnnSentimentDiscriminator& disc, const Vocabulary& v) {
    if (!disc.trained()) fail("mlm", "untrained discriminator");
    if (batch.empty() || batch.size() != pairs.size() || batch.size() != targets.size()) {
        fail("mlm", "bad loss_acc batch");
    }
    std::vector<std::vector<int>> masked(batch.size());
    std::vector<const std::vector<int>*> masked_ptr(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        masked[b] = render_masked(*batch[b], *pairs[b], v);
        masked_ptr[b] = &masked[b];
    }
    auto f = model.forward_batch(masked_ptr, targets);
    Var total = scalar_const(0.0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::vector<Var> rows;
        rows.reserve(batch[b]->size());
        std::size_t si = 0;
        const auto& S = pairs[b]->S;
        for (std::size_t t = 0; t < batch[b]->size(); ++t) {
            const auto global = static_cast<Eigen::Index>(b * static_cast<std::size_t>(f.seq_len) + t);
            if (si < S.size() && S[si] == t) {
                Var probs = softmax_rows(slice_rows(f.token_logits, global, 1));
                rows.push_back(matmul(probs, disc.embedding().table));
                ++si;
            } else {
                rows.push_back(disc.embedding().rows({batch[b]->token_ids[t]}));
            }
        }
        Var logits = disc.logits_from_rows(concat_rows(rows));
        total = add(total, cross_entropy_rows(logits, {index_of(targets[b])}, Reduction::sum));
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace amst
