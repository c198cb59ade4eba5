#pragma once

#include "amst/mask_model.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace amst {

// Weights of the masking objective (lambda) and the infilling objectives
// (theta).
struct LossWeights {
    double lambda1{0.2};
    double lambda2{0.1};
    double lambda3{0.4};
    double lambda4{0.3};
    double theta1{0.4};
    double theta2{0.2};
    double theta3{0.1};
    double theta4{0.3};

    void validate() const {
        for (double v : {lambda1, lambda2, lambda3, lambda4, theta1, theta2, theta3, theta4}) {
            if (v < 0.0 || !std::isfinite(v)) fail("config", "loss weights must be nonnegative");
        }
    }
};

// L_total = l1*L_clf(S) - l2*L_adv(S) + l3*L_clf(C) - l4*L_adv(C)
inline double total_objective(const LossWeights& w, double l_clf_s, double l_adv_s,
                              double l_clf_c, double l_adv_c) {
    w.validate();
    return w.lambda1 * l_clf_s - w.lambda2 * l_adv_s + w.lambda3 * l_clf_c - w.lambda4 * l_adv_c;
}

// Graph form; terms with zero weight can be elided (linearity makes the two
// builds equivalent, which the tests pin down).
inline Var total_objective_graph(const LossWeights& w, const Var& l_clf_s, const Var& l_adv_s,
                                 const Var& l_clf_c, const Var& l_adv_c,
                                 bool skip_zero_terms = true) {
    w.validate();
    Var total = scalar_const(0.0);
    auto maybe_add = [&](double weight, const Var& term) {
        if (skip_zero_terms && weight == 0.0) return;
        total = add(total, scale(term, weight));
    };
    maybe_add(w.lambda1, l_clf_s);
    maybe_add(-w.lambda2, l_adv_s);
    maybe_add(w.lambda3, l_clf_c);
    maybe_add(-w.lambda4, l_adv_c);
    return total;
}

// ---------------------------------------------------------------------------
// the four auxiliary softmax classifiers
//
// All four read a mean gated-token-embedding summary: S summaries use gates
// g, C summaries use 1-g. BoW-space classifiers predict over the non-special
// vocabulary.

struct FrozenSentimentClassifier {
    ParamRegistry reg;
    Linear lin;
    bool pretrained{false};

    FrozenSentimentClassifier(int embed_dim, std::uint64_t seed) {
        Rng rng(seed);
        lin = Linear(reg, "clf_s", embed_dim, 2, rng);
    }

    std::uint64_t digest() const { return reg.digest(); }
};

struct ContentBowClassifier {
    ParamRegistry reg;
    Linear lin;

    ContentBowClassifier(int embed_dim, int content_vocab, std::uint64_t seed) {
        Rng rng(seed);
        lin = Linear(reg, "clf_c", embed_dim, content_vocab, rng);
    }
};

// Softmax sentiment discriminator over the C side. Per-token features are
// max-pooled rather than mean-pooled: its job is to detect ANY leftover
// sentiment token, and a mean dilutes single-token evidence by 1/N, which is
// too weak to beat the content losses at desk scale (measured: the masker
// then settles on masking exactly one sentiment token per sentence).
struct SentimentDiscriminator {
    ParamRegistry reg;
    Linear feat;  // embed_dim -> channels, shared across positions
    Linear out;   // channels -> 2
    int channels{16};

    SentimentDiscriminator(int embed_dim, std::uint64_t seed, int ch = 16) : channels(ch) {
        Rng rng(seed);
        feat = Linear(reg, "dis_s.feat", embed_dim, ch, rng);
        out = Linear(reg, "dis_s.out", ch, 2, rng);
    }

    // token_embs: per position B x d; gates: B x N. Masked mass is removed
    // from the tokens before feature extraction, so fully masked positions
    // contribute only the shared bias floor.
    Var logits(const std::vector<Var>& token_embs, const Var& gates, bool invert) const {
        if (token_embs.empty()) fail("disentangle", "no token embeddings");
        Var g = invert ? one_minus(gates) : gates;
        std::vector<Var> features;
        features.reserve(token_embs.size());
        for (std::size_t t = 0; t < token_embs.size(); ++t) {
            Var gated = mul_colvec(token_embs[t], slice_cols(g, static_cast<Eigen::Index>(t), 1));
            features.push_back(relu_(feat(gated)));
        }
        return out(max_elemwise(features));
    }
};

struct ContentDiscriminator {
    ParamRegistry reg;
    Linear lin;

    ContentDiscriminator(int embed_dim, int content_vocab, std::uint64_t seed) {
        Rng rng(seed);
        lin = Linear(reg, "dis_c", embed_dim, content_vocab, rng);
    }
};

struct DisentangleModels {
    FrozenSentimentClassifier clf_s;
    ContentBowClassifier clf_c;
    SentimentDiscriminator dis_s;
    ContentDiscriminator dis_c;

    DisentangleModels(int embed_dim, int content_vocab, std::uint64_t seed)
        : clf_s(embed_dim, seed ^ 0xa1ull),
          clf_c(embed_dim, content_vocab, seed ^ 0xa2ull),
          dis_s(embed_dim, seed ^ 0xa3ull),
          dis_c(embed_dim, content_vocab, seed ^ 0xa4ull) {}
};

// ---------------------------------------------------------------------------
// summaries

// Mean gated token-embedding summary: (1/N) sum_t g_t E_t, with invert
// swapping g for 1-g (the C-side summary). The fixed 1/N scale ties summary
// magnitude to the amount of gated mass, which anchors the content side:
// masking mass always costs clf(C) confidence, so gates rise only where the
// sentiment terms genuinely pay for it.
inline Var gated_summary(const std::vector<Var>& token_embs, const Var& gates, bool invert) {
    if (token_embs.empty()) fail("disentangle", "no token embeddings");
    const auto n = static_cast<Eigen::Index>(token_embs.size());
    Var g = invert ? one_minus(gates) : gates;
    Var acc;
    for (Eigen::Index t = 0; t < n; ++t) {
        Var part = mul_colvec(token_embs[static_cast<std::size_t>(t)], slice_cols(g, t, 1));
        acc = t == 0 ? part : add(acc, part);
    }
    return scale(acc, 1.0 / static_cast<double>(n));
}

// BoW targets over the non-special vocabulary, one row per sentence.
inline Mat bow_target_rows(const std::vector<const LabeledSentence*>& batch, const Vocabulary& v) {
    Mat t(static_cast<Eigen::Index>(batch.size()), v.content_size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto d = bow_distribution(*batch[i], v);
        for (int c = 0; c < v.content_size(); ++c) {
            t(static_cast<Eigen::Index>(i), c) = d.probs[static_cast<std::size_t>(c + Vocabulary::kNumSpecial)];
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// the losses of Eqs. 2-7, graph form (batch means)

inline Var loss_clf_S_graph(const FrozenSentimentClassifier& clf, const Var& s_summary,
                            const std::vector<int>& labels) {
    if (!clf.pretrained) fail("disentangle", "clf(S) must be pretrained before use");
    return cross_entropy_rows(clf.lin(s_summary), labels, Reduction::mean);
}

inline Var loss_clf_C_graph(const ContentBowClassifier& clf, const Var& c_summary,
                            Mat bow_targets) {
    return cross_entropy_soft_rows(clf.lin(c_summary), std::move(bow_targets), Reduction::mean);
}

inline Var loss_dis_S_graph(const SentimentDiscriminator& dis, const std::vector<Var>& token_embs,
                            const Var& gates, const std::vector<int>& labels) {
    return cross_entropy_rows(dis.logits(token_embs, gates, true), labels, Reduction::mean);
}

inline Var loss_adv_S_graph(const SentimentDiscriminator& dis, const std::vector<Var>& token_embs,
                            const Var& gates) {
    return entropy_of_softmax_rows(dis.logits(token_embs, gates, true), Reduction::mean);
}

inline Var loss_dis_C_graph(const ContentDiscriminator& dis, const Var& s_summary,
                            Mat bow_targets) {
    return cross_entropy_soft_rows(dis.lin(s_summary), std::move(bow_targets), Reduction::mean);
}

inline Var loss_adv_C_graph(const ContentDiscriminator& dis, const Var& s_summary) {
    return entropy_of_softmax_rows(dis.lin(s_summary), Reduction::mean);
}

// ---------------------------------------------------------------------------
// single-sentence convenience forms (scalar values)

namespace detail {

inline Var gates_row(const DisentangledPair& pair) {
    Mat gates(1, static_cast<Eigen::Index>(pair.soft_gates.size()));
    for (std::size_t i = 0; i < pair.soft_gates.size(); ++i) {
        gates(0, static_cast<Eigen::Index>(i)) = pair.soft_gates[i];
    }
    return constant(std::move(gates));
}

struct SentenceSummaries {
    Var s;
    Var c;
};

inline SentenceSummaries summaries_for(const MaskClassifier& masker, const DisentangledPair& pair,
                                       const LabeledSentence& x) {
    if (pair.size() != x.size()) fail("disentangle", "pair does not match sentence");
    auto f = masker.forward_batch({&x});
    Var g = gates_row(pair);
    return {gated_summary(f.token_embs, g, false), gated_summary(f.token_embs, g, true)};
}

}  // namespace detail

inline double loss_clf_S(const FrozenSentimentClassifier& clf, const MaskClassifier& masker,
                         const DisentangledPair& pair, const LabeledSentence& x) {
    auto s = detail::summaries_for(masker, pair, x);
    return loss_clf_S_graph(clf, s.s, {index_of(x.label)})->scalar();
}

inline double loss_clf_C(const ContentBowClassifier& clf, const MaskClassifier& masker,
                         const DisentangledPair& pair, const LabeledSentence& x,
                         const Vocabulary& v) {
    auto s = detail::summaries_for(masker, pair, x);
    return loss_clf_C_graph(clf, s.c, bow_target_rows({&x}, v))->scalar();
}

inline double loss_dis_S(const SentimentDiscriminator& dis, const MaskClassifier& masker,
                         const DisentangledPair& pair, const LabeledSentence& x) {
    auto f = masker.forward_batch({&x});
    Var g = detail::gates_row(pair);
    return loss_dis_S_graph(dis, f.token_embs, g, {index_of(x.label)})->scalar();
}

inline double loss_adv_S(const SentimentDiscriminator& dis, const MaskClassifier& masker,
                         const DisentangledPair& pair, const LabeledSentence& x) {
    auto f = masker.forward_batch({&x});
    Var g = detail::gates_row(pair);
    return loss_adv_S_graph(dis, f.token_embs, g)->scalar();
}

inline double loss_dis_C(const ContentDiscriminator& dis, const MaskClassifier& masker,
                         const DisentangledPair& pair, const LabeledSentence& x,
                         const Vocabulary& v) {
    auto s = detail::summaries_for(masker, pair, x);
    return loss_dis_C_graph(dis, s.s, bow_target_rows({&x}, v))->scalar();
}

inline double loss_adv_C(const ContentDiscriminator& dis, const MaskClassifier& masker,
                         const DisentangledPair& pair, const LabeledSentence& x) {
    auto s = detail::summaries_for(masker, pair, x);
    return loss_adv_C_graph(dis, s.s)->scalar();
}

// ---------------------------------------------------------------------------
// two-step adversarial training

struct AdvStepRecord {
    double clf_S{0};
    double adv_S{0};
    double clf_C{0};
    double adv_C{0};
    double dis_S{0};
    double dis_C{0};
};

struct AdvTrainOptions {
    double masker_lr{1e-3};
    double disc_lr{1e-3};
    bool skip_zero_terms{true};
    bool plain_sgd{false};  // exact-gradient updates for direction tests
    // initial steps where discriminators and clf(C) fit to the pretrained
    // masks before the masker itself starts moving
    int warmup_steps{0};
};

// Owns the optimizer state for the two-step paradigm: step 1 fits both
// discriminators on detached summaries, step 2 updates the masker (and
// clf(C)) against Eq. 8 with the discriminators held fixed. clf(S) is never
// updated here.
class AdversarialTrainer {
public:
    AdversarialTrainer(MaskClassifier& masker, DisentangleModels& models, const Vocabulary& vocab,
                       const LossWeights& w, const AdvTrainOptions& opts = {})
        : masker_(masker), models_(models), vocab_(vocab), w_(w), opts_(opts) {
        w_.validate();
        auto disc_params = models_.dis_s.reg.vars();
        for (const auto& p : models_.dis_c.reg.vars()) disc_params.push_back(p);
        if (opts.plain_sgd) {
            masker_sgd_.emplace(masker_.params().vars(), opts.masker_lr);
            clfc_sgd_.emplace(models_.clf_c.reg.vars(), opts.masker_lr);
            disc_sgd_.emplace(disc_params, opts.disc_lr);
        } else {
            masker_adam_.emplace(masker_.params().vars(), opts.masker_lr);
            clfc_adam_.emplace(models_.clf_c.reg.vars(), opts.masker_lr);
            disc_adam_.emplace(disc_params, opts.disc_lr);
        }
    }

    AdvStepRecord step(const std::vector<const LabeledSentence*>& batch) {
        if (!models_.clf_s.pretrained) fail("disentangle", "clf(S) must be pretrained before use");
        AdvStepRecord rec;
        std::vector<int> labels(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = index_of(batch[i]->label);
        Mat bow = bow_target_rows(batch, vocab_);

        // Step 1: discriminators on detached summaries.
        {
            auto f = masker_.forward_batch(batch);
            Var gates = constant(f.mask_probs->val);
            std::vector<Var> embs;
            embs.reserve(f.token_embs.size());
            for (const auto& e : f.token_embs) embs.push_back(constant(e->val));
            Var s_sum = gated_summary(embs, gates, false);
            Var l_dis_s = loss_dis_S_graph(models_.dis_s, embs, gates, labels);
            Var l_dis_c = loss_dis_C_graph(models_.dis_c, s_sum, bow);
            rec.dis_S = check_finite(l_dis_s, "L_dis(S)");
            rec.dis_C = check_finite(l_dis_c, "L_dis(C)");
            Var disc_loss = add(l_dis_s, l_dis_c);
            zero_disc_grads();
            backward(disc_loss);
            if (disc_sgd_) disc_sgd_->step();
            else disc_adam_->step();
        }

        // Step 2: masker and clf(C) against the total objective.
        {
            auto f = masker_.forward_batch(batch);
            Var s_sum = gated_summary(f.token_embs, f.mask_probs, false);
            Var c_sum = gated_summary(f.token_embs, f.mask_probs, true);
            Var l_clf_s = loss_clf_S_graph(models_.clf_s, s_sum, labels);
            Var l_adv_s = loss_adv_S_graph(models_.dis_s, f.token_embs, f.mask_probs);
            Var l_clf_c = loss_clf_C_graph(models_.clf_c, c_sum, bow);
            Var l_adv_c = loss_adv_C_graph(models_.dis_c, s_sum);
            rec.clf_S = check_finite(l_clf_s, "L_clf(S)");
            rec.adv_S = check_finite(l_adv_s, "L_adv(S)");
            rec.clf_C = check_finite(l_clf_c, "L_clf(C)");
            rec.adv_C = check_finite(l_adv_c, "L_adv(C)");
            Var total =
                total_objective_graph(w_, l_clf_s, l_adv_s, l_clf_c, l_adv_c, opts_.skip_zero_terms);
            check_finite(total, "L_total");
            zero_gen_grads();
            backward(total);
            const bool warming = step_count_ < opts_.warmup_steps;
            if (!warming) {
                if (masker_sgd_) masker_sgd_->step();
                else masker_adam_->step();
            }
            if (clfc_sgd_) clfc_sgd_->step();
            else clfc_adam_->step();
        }
        ++step_count_;
        return rec;
    }

private:
    static double check_finite(const Var& v, const char* name) {
        const double x = v->scalar();
        if (!std::isfinite(x)) fail("nonfinite-loss", std::string(name) + " is not finite");
        return x;
    }

    void zero_disc_grads() {
        models_.dis_s.reg.zero_grad();
        models_.dis_c.reg.zero_grad();
    }

    void zero_gen_grads() {
        masker_.params().zero_grad();
        models_.clf_c.reg.zero_grad();
        models_.clf_s.reg.zero_grad();
        models_.dis_s.reg.zero_grad();
        models_.dis_c.reg.zero_grad();
    }

    MaskClassifier& masker_;
    DisentangleModels& models_;
    const Vocabulary& vocab_;
    LossWeights w_;
    AdvTrainOptions opts_;
    long step_count_{0};
    std::optional<AdamOptimizer> masker_adam_;
    std::optional<AdamOptimizer> clfc_adam_;
    std::optional<AdamOptimizer> disc_adam_;
    std::optional<SgdOptimizer> masker_sgd_;
    std::optional<SgdOptimizer> clfc_sgd_;
    std::optional<SgdOptimizer> disc_sgd_;
};

// Fits clf(C) on full ungated mean-embedding summaries against the BoW
// targets, so joint training starts from a real content predictor instead of
// a bias that tracks the corpus marginal (a degenerate solution that inverts
// the content anchor). Returns the final mean cross-entropy.
inline double pretrain_content_classifier(ContentBowClassifier& clf, const MaskClassifier& masker,
                                          const std::vector<LabeledSentence>& data,
                                          const Vocabulary& vocab, int epochs, double lr = 1e-2,
                                          int batch_size = 64, std::uint64_t seed = 12) {
    if (data.empty()) fail("disentangle", "clf(C) pretraining data is empty");
    const Mat& table = masker.embedding().table->val;
    Mat summaries(static_cast<Eigen::Index>(data.size()), table.cols());
    std::vector<const LabeledSentence*> ptrs(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        Mat acc = Mat::Zero(1, table.cols());
        for (const int id : data[i].token_ids) acc += table.row(id);
        summaries.row(static_cast<Eigen::Index>(i)) = acc / static_cast<double>(data[i].size());
        ptrs[i] = &data[i];
    }
    Mat targets = bow_target_rows(ptrs, vocab);

    Rng rng(seed);
    AdamOptimizer opt(clf.reg.vars(), lr);
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    double last = 0.0;
    for (int e = 0; e < epochs; ++e) {
        rng.shuffle(idx);
        double total = 0.0;
        long batches = 0;
        for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
            const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
            Mat rows(static_cast<Eigen::Index>(end - start), table.cols());
            Mat t(static_cast<Eigen::Index>(end - start), targets.cols());
            for (std::size_t i = start; i < end; ++i) {
                rows.row(static_cast<Eigen::Index>(i - start)) = summaries.row(static_cast<Eigen::Index>(idx[i]));
                t.row(static_cast<Eigen::Index>(i - start)) = targets.row(static_cast<Eigen::Index>(idx[i]));
            }
            Var loss = cross_entropy_soft_rows(clf.lin(constant(std::move(rows))), std::move(t),
                                               Reduction::mean);
            total += loss->scalar();
            ++batches;
            clf.reg.zero_grad();
            backward(loss);
            opt.step();
        }
        if (batches > 0) last = total / static_cast<double>(batches);
    }
    return last;
}

// Fits clf(S) on full ungated mean-embedding summaries of gold sentences;
// the classifier is frozen from then on.
inline double pretrain_frozen_classifier(FrozenSentimentClassifier& clf,
                                         const MaskClassifier& masker,
                                         const std::vector<LabeledSentence>& data, int epochs,
                                         double lr = 1e-2, int batch_size = 64,
                                         std::uint64_t seed = 11) {
    if (data.empty()) fail("disentangle", "clf(S) pretraining data is empty");
    bool has_pos = false;
    bool has_neg = false;
    for (const auto& s : data) (s.label == Label::positive ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) fail("disentangle", "single-class data: both labels are required");

    const Mat& table = masker.embedding().table->val;
    Mat summaries(static_cast<Eigen::Index>(data.size()), table.cols());
    std::vector<int> labels(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        Mat acc = Mat::Zero(1, table.cols());
        for (const int id : data[i].token_ids) acc += table.row(id);
        summaries.row(static_cast<Eigen::Index>(i)) = acc / static_cast<double>(data[i].size());
        labels[i] = index_of(data[i].label);
    }

    Rng rng(seed);
    AdamOptimizer opt(clf.reg.vars(), lr);
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (int e = 0; e < epochs; ++e) {
        rng.shuffle(idx);
        for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
            const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
            Mat rows(static_cast<Eigen::Index>(end - start), table.cols());
            std::vector<int> batch_labels(end - start);
            for (std::size_t i = start; i < end; ++i) {
                rows.row(static_cast<Eigen::Index>(i - start)) = summaries.row(static_cast<Eigen::Index>(idx[i]));
                batch_labels[i - start] = labels[idx[i]];
            }
            Var loss = cross_entropy_rows(clf.lin(constant(std::move(rows))), batch_labels,
                                          Reduction::mean);
            clf.reg.zero_grad();
            backward(loss);
            opt.step();
        }
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Eigen::RowVectorXd logits =
            summaries.row(static_cast<Eigen::Index>(i)) * clf.lin.w->val + clf.lin.b->val;
        if ((logits(1) > logits(0) ? 1 : 0) == labels[i]) ++correct;
    }
    clf.pretrained = true;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace amst
