#include "testutil.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace amst;
using namespace amst::testutil;

namespace {

struct Fixture {
    SyntheticGrammar grammar = tiny_grammar(777);
    std::vector<AnnotatedSentence> corpus = generate_synthetic_corpus(grammar, 200);
    std::vector<LabeledSentence> plain;
    Vocabulary vocab;

    Fixture() {
        for (const auto& a : corpus) plain.push_back(a.sentence);
        vocab = build_vocabulary(plain, 1);
        assign_token_ids(plain, vocab);
    }

    MaskModelConfig mask_cfg() const {
        MaskModelConfig cfg;
        cfg.embed_dim = 4;
        cfg.hidden = 5;
        cfg.att_dim = 4;
        return cfg;
    }
};

}  // namespace

TEST_CASE("analytic loss values match the definitions") {
    // cross-entropy with one-hot target
    CHECK(cross_entropy_onehot({0.8, 0.2}, 0) == Catch::Approx(0.22314355131).epsilon(1e-9));
    CHECK(cross_entropy_onehot({0.0, 1.0}, 1) == 0.0);

    // entropy form of the adversarial losses
    CHECK(entropy({0.5, 0.5}) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(entropy({1.0, 0.0}) == 0.0);
    CHECK(entropy({0.9, 0.1}) == Catch::Approx(0.325082973).epsilon(1e-8));
    VecD uniform10(10, 0.1);
    CHECK(entropy(uniform10) == Catch::Approx(std::log(10.0)).epsilon(1e-12));
    CHECK(entropy({0.7, 0.2, 0.1}) == Catch::Approx(0.801819).epsilon(1e-5));

    // BoW cross-entropy identities
    VecD t{1.0, 0.0, 0.0};
    CHECK(cross_entropy(t, {0.5, 0.25, 0.25}) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(cross_entropy(t, {0.25, 0.5, 0.25}) == Catch::Approx(std::log(4.0)).epsilon(1e-12));
    VecD tc{0.5, 0.25, 0.25};
    CHECK(cross_entropy(tc, tc) == Catch::Approx(entropy(tc)).epsilon(1e-12));
}

TEST_CASE("total objective matches Eq. 8 arithmetic exactly") {
    LossWeights w;  // paper values 0.2 / 0.1 / 0.4 / 0.3
    CHECK(std::abs(total_objective(w, 1.0, 0.5, 2.0, 1.0) - 0.65) < 1e-12);
    CHECK(total_objective(w, 0.0, 0.0, 0.0, 0.0) == 0.0);
    CHECK(std::abs(total_objective(w, 2.0, 1.0, 4.0, 2.0) - 1.3) < 1e-12);

    // homogeneous of degree 1 in the weight vector
    LossWeights w2 = w;
    w2.lambda1 *= 3.0;
    w2.lambda2 *= 3.0;
    w2.lambda3 *= 3.0;
    w2.lambda4 *= 3.0;
    CHECK(std::abs(total_objective(w2, 1.0, 0.5, 2.0, 1.0) - 3.0 * 0.65) < 1e-12);

    LossWeights bad;
    bad.lambda2 = -0.1;
    CHECK_THROWS_AS(total_objective(bad, 1, 1, 1, 1), Error);
}

TEST_CASE("batch losses equal the mean of per-item losses") {
    Fixture fx;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 3);
    DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 4);
    models.clf_s.pretrained = true;

    std::vector<const LabeledSentence*> batch;
    const std::size_t len = fx.plain[0].size();
    for (const auto& s : fx.plain) {
        if (s.size() == len && batch.size() < 3) batch.push_back(&s);
    }
    REQUIRE(batch.size() == 3);

    auto f = masker.forward_batch(batch);
    Var s_sum = gated_summary(f.token_embs, f.mask_probs, false);
    std::vector<int> labels;
    for (const auto* s : batch) labels.push_back(index_of(s->label));
    const double batch_loss = loss_clf_S_graph(models.clf_s, s_sum, labels)->scalar();

    double sum = 0.0;
    for (const auto* s : batch) {
        auto pair = threshold_split(forward_mask_probs(masker, *s), SplitMode::soft, masker.tau());
        sum += loss_clf_S(models.clf_s, masker, pair, *s);
    }
    CHECK(batch_loss == Catch::Approx(sum / 3.0).epsilon(1e-9));
}

TEST_CASE("single-sentence loss values follow the formulas") {
    Fixture fx;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 5);
    DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 6);

    const auto& x = fx.plain[0];
    auto pair = threshold_split(forward_mask_probs(masker, x), SplitMode::soft, masker.tau());

    // clf(S) must be pretrained before use
    CHECK_THROWS_AS(loss_clf_S(models.clf_s, masker, pair, x), Error);
    models.clf_s.pretrained = true;

    // recompute loss_clf_S by hand from the summary and classifier weights
    auto f = masker.forward_batch({&x});
    Eigen::RowVectorXd summary = Eigen::RowVectorXd::Zero(fx.mask_cfg().embed_dim);
    for (std::size_t t = 0; t < x.size(); ++t) {
        summary += pair.soft_gates[t] * f.token_embs[t]->val.row(0);
    }
    summary /= static_cast<double>(x.size());
    Eigen::RowVectorXd logits = summary * models.clf_s.lin.w->val + models.clf_s.lin.b->val;
    Mat p = softmax_rows_value(logits);
    const double expected = -std::log(p(0, index_of(x.label)));
    CHECK(loss_clf_S(models.clf_s, masker, pair, x) == Catch::Approx(expected).epsilon(1e-9));

    // adversarial losses are entropies of the discriminator predictions
    const double h = loss_adv_S(models.dis_s, masker, pair, x);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(2.0) + 1e-12);
    const double hc = loss_adv_C(models.dis_c, masker, pair, x);
    CHECK(hc >= 0.0);
    CHECK(hc <= std::log(static_cast<double>(fx.vocab.content_size())) + 1e-12);

    // BoW losses against a brute-force summation
    auto bow = bow_distribution(x, fx.vocab);
    Eigen::RowVectorXd csummary = Eigen::RowVectorXd::Zero(fx.mask_cfg().embed_dim);
    for (std::size_t t = 0; t < x.size(); ++t) {
        csummary += (1.0 - pair.soft_gates[t]) * f.token_embs[t]->val.row(0);
    }
    csummary /= static_cast<double>(x.size());
    Eigen::RowVectorXd clogits = csummary * models.clf_c.lin.w->val + models.clf_c.lin.b->val;
    Mat cp = softmax_rows_value(clogits);
    double brute = 0.0;
    for (int wid = 0; wid < fx.vocab.content_size(); ++wid) {
        const double tw = bow.probs[static_cast<std::size_t>(wid + Vocabulary::kNumSpecial)];
        if (tw > 0.0) brute -= tw * std::log(cp(0, wid));
    }
    CHECK(loss_clf_C(models.clf_c, masker, pair, x, fx.vocab) ==
          Catch::Approx(brute).epsilon(1e-9));
}

TEST_CASE("entropy bounds hold over random discriminator inputs") {
    Fixture fx;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 7);
    DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 8);
    Rng rng(1234);
    for (int trial = 0; trial < 50; ++trial) {
        const auto& x = fx.plain[rng.below(fx.plain.size())];
        auto pair = threshold_split(forward_mask_probs(masker, x), SplitMode::soft, masker.tau());
        const double hs = loss_adv_S(models.dis_s, masker, pair, x);
        const double hcx = loss_adv_C(models.dis_c, masker, pair, x);
        CHECK(hs >= 0.0);
        CHECK(hs <= std::log(2.0) + 1e-12);
        CHECK(hcx >= 0.0);
        CHECK(hcx <= std::log(static_cast<double>(fx.vocab.content_size())) + 1e-12);
        CHECK(loss_dis_S(models.dis_s, masker, pair, x) >= 0.0);
        CHECK(loss_dis_C(models.dis_c, masker, pair, x, fx.vocab) >= 0.0);
    }
}

TEST_CASE("every disentanglement loss passes finite-difference checks") {
    Fixture fx;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 9);
    DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 10);
    models.clf_s.pretrained = true;

    std::vector<const LabeledSentence*> batch;
    for (const auto& s : fx.plain) {
        if (s.size() <= 8 && batch.size() < 2) batch.push_back(&s);
    }
    std::vector<int> labels;
    for (const auto* s : batch) labels.push_back(index_of(s->label));
    Mat bow = bow_target_rows(batch, fx.vocab);

    auto all_params = masker.params().all();
    auto add_params = [&all_params](const ParamRegistry& reg) {
        for (const auto& p : reg.all()) all_params.push_back(p);
    };
    add_params(models.clf_s.reg);
    add_params(models.clf_c.reg);
    add_params(models.dis_s.reg);
    add_params(models.dis_c.reg);

    auto summaries = [&](bool invert) {
        auto f = masker.forward_batch(batch);
        return gated_summary(f.token_embs, f.mask_probs, invert);
    };

    struct Case {
        const char* name;
        std::function<Var()> f;
    };
    const std::vector<Case> cases = {
        {"L_clf(S)", [&] { return loss_clf_S_graph(models.clf_s, summaries(false), labels); }},
        {"L_clf(C)", [&] { return loss_clf_C_graph(models.clf_c, summaries(true), bow); }},
        {"L_dis(S)", [&] {
             auto f = masker.forward_batch(batch);
             return loss_dis_S_graph(models.dis_s, f.token_embs, f.mask_probs, labels);
         }},
        {"L_adv(S)", [&] {
             auto f = masker.forward_batch(batch);
             return loss_adv_S_graph(models.dis_s, f.token_embs, f.mask_probs);
         }},
        {"L_dis(C)", [&] { return loss_dis_C_graph(models.dis_c, summaries(false), bow); }},
        {"L_adv(C)", [&] { return loss_adv_C_graph(models.dis_c, summaries(false)); }},
        {"L_total", [&] {
             LossWeights w;
             auto f = masker.forward_batch(batch);
             Var s_sum = gated_summary(f.token_embs, f.mask_probs, false);
             Var c_sum = gated_summary(f.token_embs, f.mask_probs, true);
             return total_objective_graph(w, loss_clf_S_graph(models.clf_s, s_sum, labels),
                                          loss_adv_S_graph(models.dis_s, f.token_embs, f.mask_probs),
                                          loss_clf_C_graph(models.clf_c, c_sum, bow),
                                          loss_adv_C_graph(models.dis_c, s_sum));
         }},
    };
    for (const auto& c : cases) {
        auto r = finite_diff_check(all_params, c.f);
        INFO(c.name << " worst: " << r.worst);
        CHECK(r.ok(1e-4));
    }
}

TEST_CASE("gradient direction is invariant to scaling the weight vector") {
    Fixture fx;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 11);
    DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 12);
    models.clf_s.pretrained = true;

    std::vector<const LabeledSentence*> batch;
    const std::size_t len = fx.plain[1].size();
    for (const auto& s : fx.plain) {
        if (s.size() == len && batch.size() < 4) batch.push_back(&s);
    }
    std::vector<int> labels;
    for (const auto* s : batch) labels.push_back(index_of(s->label));
    Mat bow = bow_target_rows(batch, fx.vocab);

    auto masker_grad = [&](double scale_w) {
        LossWeights w;
        w.lambda1 *= scale_w;
        w.lambda2 *= scale_w;
        w.lambda3 *= scale_w;
        w.lambda4 *= scale_w;
        masker.params().zero_grad();
        auto f = masker.forward_batch(batch);
        Var s_sum = gated_summary(f.token_embs, f.mask_probs, false);
        Var c_sum = gated_summary(f.token_embs, f.mask_probs, true);
        Var total = total_objective_graph(w, loss_clf_S_graph(models.clf_s, s_sum, labels),
                                          loss_adv_S_graph(models.dis_s, f.token_embs, f.mask_probs),
                                          loss_clf_C_graph(models.clf_c, c_sum, bow),
                                          loss_adv_C_graph(models.dis_c, s_sum));
        backward(total);
        return flatten_grads(masker.params());
    };

    auto g1 = masker_grad(1.0);
    auto g2 = masker_grad(2.0);
    CHECK(cosine(g1, g2) == Catch::Approx(1.0).margin(1e-12));
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(g2[i] == Catch::Approx(2.0 * g1[i]).margin(1e-9));
    }
}

TEST_CASE("adversarial step: discriminator descends, clf(S) stays frozen") {
    Fixture fx;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 13);
    DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 14);
    pretrain_frozen_classifier(models.clf_s, masker, fx.plain, 2, 1e-2, 32, 15);

    AdvTrainOptions opts;
    opts.plain_sgd = true;
    opts.masker_lr = 1e-4;
    opts.disc_lr = 1e-3;
    AdversarialTrainer trainer(masker, models, fx.vocab, LossWeights{}, opts);

    std::vector<const LabeledSentence*> batch;
    const std::size_t len = fx.plain[0].size();
    for (const auto& s : fx.plain) {
        if (s.size() == len && batch.size() < 8) batch.push_back(&s);
    }
    std::vector<int> labels;
    for (const auto* s : batch) labels.push_back(index_of(s->label));

    // Freeze the step-1 inputs: detached embeddings and gates.
    auto f = masker.forward_batch(batch);
    Var gates = constant(f.mask_probs->val);
    std::vector<Var> embs;
    for (const auto& e : f.token_embs) embs.push_back(constant(e->val));
    const double before = loss_dis_S_graph(models.dis_s, embs, gates, labels)->scalar();

    const auto frozen_before = models.clf_s.digest();
    auto rec = trainer.step(batch);
    CHECK(models.clf_s.digest() == frozen_before);

    const double after = loss_dis_S_graph(models.dis_s, embs, gates, labels)->scalar();
    CHECK(after <= before + 1e-12);

    // the record carries exactly the six named losses, all finite
    for (const double v : {rec.clf_S, rec.adv_S, rec.clf_C, rec.adv_C, rec.dis_S, rec.dis_C}) {
        CHECK(std::isfinite(v));
    }
}

TEST_CASE("zero weight is identical to removing the term") {
    Fixture fx;
    LossWeights w;
    w.lambda2 = 0.0;

    auto run = [&](bool skip_zero) {
        MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 16);
        DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 17);
        pretrain_frozen_classifier(models.clf_s, masker, fx.plain, 1, 1e-2, 32, 18);
        AdvTrainOptions opts;
        opts.skip_zero_terms = skip_zero;
        AdversarialTrainer trainer(masker, models, fx.vocab, w, opts);
        std::vector<AdvStepRecord> records;
        for (int step = 0; step < 3; ++step) {
            std::vector<const LabeledSentence*> batch;
            const std::size_t len = fx.plain[0].size();
            for (const auto& s : fx.plain) {
                if (s.size() == len && batch.size() < 6) batch.push_back(&s);
            }
            records.push_back(trainer.step(batch));
        }
        return std::make_pair(masker.params().digest(), records);
    };

    auto [digest_skip, rec_skip] = run(true);
    auto [digest_keep, rec_keep] = run(false);
    CHECK(digest_skip == digest_keep);
    for (std::size_t i = 0; i < rec_skip.size(); ++i) {
        CHECK(rec_skip[i].clf_S == rec_keep[i].clf_S);
        CHECK(rec_skip[i].adv_S == rec_keep[i].adv_S);
        CHECK(rec_skip[i].clf_C == rec_keep[i].clf_C);
        CHECK(rec_skip[i].adv_C == rec_keep[i].adv_C);
        CHECK(rec_skip[i].dis_S == rec_keep[i].dis_S);
        CHECK(rec_skip[i].dis_C == rec_keep[i].dis_C);
    }
}

TEST_CASE("non-finite losses abort with the offending loss named") {
    Fixture fx;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), fx.mask_cfg(), 19);
    DisentangleModels models(fx.mask_cfg().embed_dim, fx.vocab.content_size(), 20);
    models.clf_s.pretrained = true;
    models.dis_s.feat.w->val(0, 0) = std::numeric_limits<double>::quiet_NaN();

    AdversarialTrainer trainer(masker, models, fx.vocab, LossWeights{});
    std::vector<const LabeledSentence*> batch{&fx.plain[0]};
    try {
        trainer.step(batch);
        FAIL("expected a nonfinite-loss error");
    } catch (const Error& e) {
        CHECK(e.category() == "nonfinite-loss");
        CHECK(std::string(e.what()).find("L_dis(S)") != std::string::npos);
    }
}

TEST_CASE("frozen classifier pretraining fits the oracle task") {
    Fixture fx;
    MaskModelConfig cfg;
    cfg.embed_dim = 16;
    cfg.hidden = 8;
    cfg.att_dim = 8;
    MaskClassifier masker(fx.vocab.size(), fx.vocab.hash(), cfg, 23);
    DisentangleModels models(cfg.embed_dim, fx.vocab.content_size(), 24);
    const double acc = pretrain_frozen_classifier(models.clf_s, masker, fx.plain, 8, 5e-2, 32, 25);
    CHECK(models.clf_s.pretrained);
    CHECK(acc >= 0.9);

    std::vector<LabeledSentence> single;
    for (const auto& s : fx.plain) {
        if (s.label == Label::negative) single.push_back(s);
    }
    DisentangleModels fresh(cfg.embed_dim, fx.vocab.content_size(), 26);
    CHECK_THROWS_AS(pretrain_frozen_classifier(fresh.clf_s, masker, single, 1), Error);
}
