#pragma once

#include "amst/corpus.hpp"
#include "amst/nn.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace amst {

struct MaskModelConfig {
    int embed_dim{64};
    int hidden{128};  // per direction
    int att_dim{64};
    int head_hidden{64};
    double tau{0.5};
};

// Per-token probabilities that a token is sentiment-bearing and should be
// masked.
struct MaskOutput {
    VecD probs;

    std::size_t size() const { return probs.size(); }
};

enum class SplitMode { hard, soft };

// Sentiment set S and content set C. The soft gates always carry the raw
// probabilities; hard thresholding is an inference-time view.
struct DisentangledPair {
    std::vector<std::size_t> S;
    std::vector<std::size_t> C;
    VecD soft_gates;
    SplitMode mode{SplitMode::hard};

    std::size_t size() const { return soft_gates.size(); }
};

// Attention-based mask classifier: token embeddings feed a BiLSTM; an
// additive attention head pools the hidden states into a sentence vector
// used both by the sentence-sentiment head (pretraining) and, concatenated
// with each position's hidden state, by the per-token 2-way mask head.
class MaskClassifier {
public:
    MaskClassifier(int vocab_size, std::uint64_t vocab_hash, const MaskModelConfig& cfg,
                   std::uint64_t seed)
        : cfg_(cfg), vocab_size_(vocab_size), vocab_hash_(vocab_hash) {
        Rng rng(seed);
        emb_ = Embedding(reg_, "emb", vocab_size, cfg.embed_dim, rng);
        fwd_ = LstmCell(reg_, "lstm_fwd", cfg.embed_dim, cfg.hidden, rng);
        bwd_ = LstmCell(reg_, "lstm_bwd", cfg.embed_dim, cfg.hidden, rng);
        att_w_ = reg_.add("att.w", xavier_init(2 * cfg.hidden, cfg.att_dim, rng));
        att_b_ = reg_.add("att.b", Mat::Zero(1, cfg.att_dim));
        att_v_ = reg_.add("att.v", xavier_init(cfg.att_dim, 1, rng));
        sent_head_ = Linear(reg_, "sent_head", 2 * cfg.hidden, 2, rng);
        // The mask head reads the raw token embedding alongside the
        // recurrent state and attention context (bidirectional states
        // delocalize token identity), and needs one hidden layer:
        // "sentiment-bearing regardless of polarity" is an absolute-value
        // shape in embedding space, out of reach of a linear map.
        mask_head_in_ = Linear(reg_, "mask_head.in", cfg.embed_dim + 4 * cfg.hidden,
                               cfg.head_hidden, rng);
        mask_head_out_ = Linear(reg_, "mask_head.out", cfg.head_hidden, 2, rng);
        // start near "mask nothing": adaptive training raises gates only
        // where the losses demand sentiment, and the argmax fallback keeps
        // |S| >= 1 at inference
        mask_head_out_.b->val(0, 0) = 1.0;
        mask_head_out_.b->val(0, 1) = -1.0;
    }

    struct Forward {
        std::vector<Var> token_embs;  // per position, B x d_e
        Var alpha;                    // B x N attention weights
        Var sent_logits;              // B x 2
        Var mask_probs;               // B x N
        std::vector<Var> mask_head_logits;  // per position, B x 2
        std::vector<Var> mask_head_dists;   // per position, B x 2 softmax
    };

    // All sentences in the batch must share the same length and have token
    // ids assigned.
    Forward forward_batch(const std::vector<const LabeledSentence*>& batch) const {
        if (batch.empty()) fail("mask", "empty batch");
        const std::size_t n = batch.front()->size();
        if (n == 0) fail("mask", "empty sentence");
        for (const auto* s : batch) {
            if (s->size() != n) fail("mask", "batch sentences must share one length");
            if (s->token_ids.size() != n) fail("mask", "token ids not assigned");
        }
        const auto b = static_cast<Eigen::Index>(batch.size());

        Forward f;
        f.token_embs.reserve(n);
        for (std::size_t t = 0; t < n; ++t) {
            std::vector<int> ids(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const int id = batch[i]->token_ids[t];
                if (id < 0 || id >= vocab_size_) fail("mask", "token id out of vocabulary");
                ids[i] = id;
            }
            f.token_embs.push_back(emb_.rows(ids));
        }

        std::vector<Var> h_fwd(n);
        auto state = fwd_.initial(b);
        for (std::size_t t = 0; t < n; ++t) {
            state = fwd_.step(f.token_embs[t], state);
            h_fwd[t] = state.h;
        }
        std::vector<Var> h_bwd(n);
        state = bwd_.initial(b);
        for (std::size_t t = n; t-- > 0;) {
            state = bwd_.step(f.token_embs[t], state);
            h_bwd[t] = state.h;
        }
        std::vector<Var> hidden(n);
        std::vector<Var> scores(n);
        for (std::size_t t = 0; t < n; ++t) {
            hidden[t] = concat_cols({h_fwd[t], h_bwd[t]});
            scores[t] = matmul(tanh_(add_rowvec(matmul(hidden[t], att_w_), att_b_)), att_v_);
        }
        f.alpha = softmax_rows(concat_cols(scores));

        Var context;
        for (std::size_t t = 0; t < n; ++t) {
            Var part = mul_colvec(hidden[t], slice_cols(f.alpha, static_cast<Eigen::Index>(t), 1));
            context = t == 0 ? part : add(context, part);
        }
        f.sent_logits = sent_head_(context);

        f.mask_head_logits.reserve(n);
        f.mask_head_dists.reserve(n);
        std::vector<Var> prob_cols(n);
        for (std::size_t t = 0; t < n; ++t) {
            Var features = concat_cols({f.token_embs[t], hidden[t], context});
            Var logits = mask_head_out_(tanh_(mask_head_in_(features)));
            Var dist = softmax_rows(logits);
            f.mask_head_logits.push_back(logits);
            f.mask_head_dists.push_back(dist);
            prob_cols[t] = slice_cols(dist, 1, 1);
        }
        f.mask_probs = concat_cols(prob_cols);
        return f;
    }

    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    const MaskModelConfig& config() const { return cfg_; }
    const Embedding& embedding() const { return emb_; }
    int vocab_size() const { return vocab_size_; }
    std::uint64_t vocab_hash() const { return vocab_hash_; }
    double tau() const { return cfg_.tau; }
    void set_tau(double t) { cfg_.tau = t; }

private:
    MaskModelConfig cfg_;
    int vocab_size_;
    std::uint64_t vocab_hash_;
    ParamRegistry reg_;
    Embedding emb_;
    LstmCell fwd_;
    LstmCell bwd_;
    Var att_w_;
    Var att_b_;
    Var att_v_;
    Linear sent_head_;
    Linear mask_head_in_;
    Linear mask_head_out_;
};

// Mask probability for every token of one sentence.
inline MaskOutput forward_mask_probs(const MaskClassifier& model, const LabeledSentence& x) {
    if (x.size() == 0) fail("mask", "empty sentence");
    auto f = model.forward_batch({&x});
    MaskOutput out;
    out.probs.resize(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        out.probs[t] = f.mask_probs->val(0, static_cast<Eigen::Index>(t));
    }
    return out;
}

// S = {i : probs[i] > tau}; if that set is empty the argmax position is
// masked so |S| >= 1 always holds.
inline DisentangledPair threshold_split(const MaskOutput& probs, SplitMode mode, double tau) {
    if (probs.size() == 0) fail("mask", "empty mask output");
    DisentangledPair pair;
    pair.mode = mode;
    pair.soft_gates = probs.probs;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs.probs[i] > tau) pair.S.push_back(i);
    }
    if (pair.S.empty()) {
        const auto arg = static_cast<std::size_t>(
            std::max_element(probs.probs.begin(), probs.probs.end()) - probs.probs.begin());
        pair.S.push_back(arg);
    }
    std::size_t si = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (si < pair.S.size() && pair.S[si] == i) {
            ++si;
        } else {
            pair.C.push_back(i);
        }
    }
    return pair;
}

// Token ids with every S position replaced by [mask].
inline std::vector<int> render_masked(const LabeledSentence& x, const DisentangledPair& pair,
                                      const Vocabulary& v) {
    if (x.token_ids.size() != x.size()) fail("mask", "token ids not assigned");
    std::vector<int> out = x.token_ids;
    for (const auto p : pair.S) {
        if (p >= out.size()) fail("mask", "mask position out of range");
        out[p] = Vocabulary::kMaskId;
    }
    (void)v;
    return out;
}

// ---------------------------------------------------------------------------
// batching helpers shared by the training drivers

// Groups indices into equal-length batches; order is deterministic for a
// given rng state.
inline std::vector<std::vector<std::size_t>> length_batches(
    const std::vector<const LabeledSentence*>& data, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (const auto i : idx) by_len[data[i]->size()].push_back(i);
    std::vector<std::vector<std::size_t>> batches;
    for (auto& [len, list] : by_len) {
        for (std::size_t start = 0; start < list.size(); start += batch_size) {
            const std::size_t end = std::min(list.size(), start + batch_size);
            batches.emplace_back(list.begin() + static_cast<long>(start),
                                 list.begin() + static_cast<long>(end));
        }
    }
    rng.shuffle(batches);
    return batches;
}

// Hard S/C pairs for a whole corpus, batched by length for throughput;
// results are returned in input order.
inline std::vector<DisentangledPair> split_all(const MaskClassifier& model,
                                               const std::vector<const LabeledSentence*>& data,
                                               std::size_t batch_size = 64) {
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (std::size_t i = 0; i < data.size(); ++i) by_len[data[i]->size()].push_back(i);
    std::vector<DisentangledPair> out(data.size());
    for (const auto& [len, idx] : by_len) {
        for (std::size_t start = 0; start < idx.size(); start += batch_size) {
            const std::size_t end = std::min(idx.size(), start + batch_size);
            std::vector<const LabeledSentence*> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) batch.push_back(data[idx[i]]);
            auto f = model.forward_batch(batch);
            for (std::size_t i = start; i < end; ++i) {
                MaskOutput probs;
                probs.probs.resize(len);
                for (std::size_t t = 0; t < len; ++t) {
                    probs.probs[t] =
                        f.mask_probs->val(static_cast<Eigen::Index>(i - start),
                                          static_cast<Eigen::Index>(t));
                }
                out[idx[i]] = threshold_split(probs, SplitMode::hard, model.tau());
            }
        }
    }
    return out;
}

struct PretrainOptions {
    int batch_size{32};
    double lr{1e-3};
    std::uint64_t seed{1};
    double holdout_fraction{0.1};
    // optional attention-to-mask-head distillation (positions with
    // above-uniform attention become positive targets); off by default since
    // the bidirectional encoder delocalizes label evidence, making raw
    // attention weights an unreliable attribution signal at small scale
    double attribution_weight{0.0};
};

// Pretrains the sentence-sentiment attention head with cross-entropy on the
// sentence labels. Attention weights learned as a byproduct initialize the
// token attribution: the per-token mask head is distilled toward the
// attended positions, so adaptive training starts from attention-quality
// masks rather than noise. Returns held-out sentence accuracy.
inline double pretrain_sentiment_attention(MaskClassifier& model,
                                           const std::vector<LabeledSentence>& data, int epochs,
                                           const PretrainOptions& opts = {}) {
    if (data.empty()) fail("mask", "pretraining data is empty");
    bool has_pos = false;
    bool has_neg = false;
    for (const auto& s : data) {
        (s.label == Label::positive ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) fail("mask", "single-class data: both labels are required");

    // Deterministic stride-based holdout.
    const std::size_t stride =
        std::max<std::size_t>(2, static_cast<std::size_t>(1.0 / std::max(opts.holdout_fraction, 1e-9)));
    std::vector<const LabeledSentence*> train;
    std::vector<const LabeledSentence*> held;
    for (std::size_t i = 0; i < data.size(); ++i) {
        (i % stride == 0 ? held : train).push_back(&data[i]);
    }
    if (train.empty()) train = held;

    Rng rng(opts.seed);
    AdamOptimizer opt(model.params().vars(), opts.lr);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto batches = length_batches(train, static_cast<std::size_t>(opts.batch_size), rng);
        for (const auto& batch_idx : batches) {
            std::vector<const LabeledSentence*> batch;
            std::vector<int> labels;
            for (const auto i : batch_idx) {
                batch.push_back(train[i]);
                labels.push_back(index_of(train[i]->label));
            }
            auto f = model.forward_batch(batch);
            Var loss = cross_entropy_rows(f.sent_logits, labels, Reduction::mean);
            if (opts.attribution_weight > 0.0) {
                // position-major to match concat_rows over per-position blocks
                const auto n = static_cast<std::size_t>(f.alpha->cols());
                std::vector<int> targets;
                targets.reserve(batch.size() * n);
                for (std::size_t t = 0; t < n; ++t) {
                    for (Eigen::Index b = 0; b < f.alpha->rows(); ++b) {
                        targets.push_back(f.alpha->val(b, static_cast<Eigen::Index>(t)) >
                                                  1.0 / static_cast<double>(n)
                                              ? 1
                                              : 0);
                    }
                }
                Var head_loss = cross_entropy_rows(concat_rows(f.mask_head_logits),
                                                   std::move(targets), Reduction::mean);
                loss = add(loss, scale(head_loss, opts.attribution_weight));
            }
            if (!std::isfinite(loss->scalar())) fail("nonfinite-loss", "pretrain cross-entropy");
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
    }

    std::size_t correct = 0;
    for (const auto* s : held) {
        auto f = model.forward_batch({s});
        const int pred = f.sent_logits->val(0, 0) >= f.sent_logits->val(0, 1) ? 0 : 1;
        if (pred == index_of(s->label)) ++correct;
    }
    return held.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(held.size());
}

}  // namespace amst
