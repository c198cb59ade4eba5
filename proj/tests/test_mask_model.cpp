#include "testutil.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace amst;
using namespace amst::testutil;

namespace {

struct Fixture {
    SyntheticGrammar grammar = tiny_grammar(404);
    std::vector<AnnotatedSentence> corpus = generate_synthetic_corpus(grammar, 1000);
    std::vector<LabeledSentence> plain;
    Vocabulary vocab;

    Fixture() {
        for (const auto& a : corpus) plain.push_back(a.sentence);
        vocab = build_vocabulary(plain, 1);
        assign_token_ids(plain, vocab);
    }
};

MaskModelConfig tiny_mask_cfg() {
    MaskModelConfig cfg;
    cfg.embed_dim = 4;
    cfg.hidden = 6;
    cfg.att_dim = 5;
    return cfg;
}

}  // namespace

TEST_CASE("mask probabilities have the right shape and range") {
    Fixture fx;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), MaskModelConfig{}, 9);
    for (std::size_t i = 0; i < 20; ++i) {
        auto out = forward_mask_probs(model, fx.plain[i]);
        REQUIRE(out.size() == fx.plain[i].size());
        for (const double p : out.probs) {
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
    }
    LabeledSentence empty;
    CHECK_THROWS_AS(forward_mask_probs(model, empty), Error);
}

TEST_CASE("per-position mask head and attention are proper distributions") {
    Fixture fx;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), MaskModelConfig{}, 10);
    std::vector<const LabeledSentence*> batch;
    const std::size_t len = fx.plain[0].size();
    for (const auto& s : fx.plain) {
        if (s.size() == len && batch.size() < 8) batch.push_back(&s);
    }
    auto f = model.forward_batch(batch);
    for (Eigen::Index b = 0; b < f.alpha->rows(); ++b) {
        CHECK(std::abs(f.alpha->val.row(b).sum() - 1.0) < 1e-6);
        CHECK(f.alpha->val.row(b).minCoeff() >= 0.0);
    }
    for (const auto& dist : f.mask_head_dists) {
        for (Eigen::Index b = 0; b < dist->rows(); ++b) {
            CHECK(std::abs(dist->val.row(b).sum() - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("mask probability gradients match finite differences on a 5-token input") {
    Fixture fx;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), tiny_mask_cfg(), 11);
    const LabeledSentence* five = nullptr;
    for (const auto& s : fx.plain) {
        if (s.size() == 5) {
            five = &s;
            break;
        }
    }
    REQUIRE(five != nullptr);
    auto r = finite_diff_check(model.params().all(),
                               [&] { return mean_all(model.forward_batch({five}).mask_probs); });
    INFO("worst: " << r.worst);
    CHECK(r.ok(1e-4));
}

TEST_CASE("sentence head gradients match finite differences") {
    Fixture fx;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), tiny_mask_cfg(), 12);
    const auto* s = &fx.plain[3];
    auto r = finite_diff_check(model.params().all(), [&] {
        return cross_entropy_rows(model.forward_batch({s}).sent_logits, {index_of(s->label)},
                                  Reduction::mean);
    });
    INFO("worst: " << r.worst);
    CHECK(r.ok(1e-4));
}

TEST_CASE("threshold split follows the rule with argmax fallback") {
    MaskOutput probs;
    probs.probs = {0.9, 0.1, 0.2, 0.8, 0.3};
    auto pair = threshold_split(probs, SplitMode::hard, 0.5);
    CHECK(pair.S == std::vector<std::size_t>{0, 3});
    CHECK(pair.C == std::vector<std::size_t>{1, 2, 4});
    CHECK(pair.soft_gates == probs.probs);

    MaskOutput low;
    low.probs = {0.1, 0.4, 0.2};
    auto fb = threshold_split(low, SplitMode::hard, 0.5);
    CHECK(fb.S == std::vector<std::size_t>{1});
    CHECK(fb.C == std::vector<std::size_t>{0, 2});
}

TEST_CASE("fallback equals a brute-force argmax oracle") {
    Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        MaskOutput probs;
        const int n = 1 + rng.below_int(12);
        for (int i = 0; i < n; ++i) probs.probs.push_back(rng.uniform01() * 0.5);
        auto pair = threshold_split(probs, SplitMode::hard, 0.5);
        std::size_t best = 0;
        for (std::size_t i = 1; i < probs.probs.size(); ++i) {
            if (probs.probs[i] > probs.probs[best]) best = i;
        }
        REQUIRE(pair.S.size() == 1);
        CHECK(pair.S[0] == best);
    }
}

TEST_CASE("S and C always partition positions with |S| >= 1") {
    Rng rng(56);
    for (int trial = 0; trial < 2000; ++trial) {
        MaskOutput probs;
        const int n = 1 + rng.below_int(16);
        for (int i = 0; i < n; ++i) probs.probs.push_back(rng.uniform01());
        const double tau = rng.uniform01() * 0.98 + 0.01;
        auto pair = threshold_split(probs, SplitMode::hard, tau);
        REQUIRE(!pair.S.empty());
        std::vector<bool> seen(probs.size(), false);
        for (const auto p : pair.S) {
            REQUIRE(!seen[p]);
            seen[p] = true;
        }
        for (const auto p : pair.C) {
            REQUIRE(!seen[p]);
            seen[p] = true;
        }
        for (const bool b : seen) CHECK(b);

        // hard/soft consistency whenever the thresholded set is non-empty
        std::vector<std::size_t> above;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (pair.soft_gates[i] > tau) above.push_back(i);
        }
        if (!above.empty()) CHECK(pair.S == above);
    }
}

TEST_CASE("render_masked replaces exactly S and round-trips") {
    Fixture fx;
    const auto& x = fx.plain[0];
    MaskOutput probs;
    probs.probs.assign(x.size(), 0.0);
    probs.probs[0] = 0.9;
    if (x.size() > 3) probs.probs[3] = 0.9;
    auto pair = threshold_split(probs, SplitMode::hard, 0.5);
    auto ids = render_masked(x, pair, fx.vocab);
    REQUIRE(ids.size() == x.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const bool in_s = std::find(pair.S.begin(), pair.S.end(), i) != pair.S.end();
        if (in_s) {
            CHECK(ids[i] == Vocabulary::kMaskId);
        } else {
            CHECK(ids[i] == x.token_ids[i]);
        }
    }
    // substitute originals back at S -> recovers x exactly
    for (const auto p : pair.S) ids[p] = x.token_ids[p];
    CHECK(ids == x.token_ids);

    // all-mask boundary
    MaskOutput all;
    all.probs.assign(x.size(), 1.0);
    auto all_pair = threshold_split(all, SplitMode::hard, 0.5);
    auto all_ids = render_masked(x, all_pair, fx.vocab);
    for (const int id : all_ids) CHECK(id == Vocabulary::kMaskId);

    DisentangledPair bad;
    bad.S = {x.size() + 3};
    bad.soft_gates.assign(x.size(), 0.0);
    CHECK_THROWS_AS(render_masked(x, bad, fx.vocab), Error);
}

TEST_CASE("pretraining reaches high held-out accuracy on the oracle corpus") {
    Fixture fx;
    MaskModelConfig cfg;
    cfg.embed_dim = 16;
    cfg.hidden = 24;
    cfg.att_dim = 16;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), cfg, 21);
    PretrainOptions opts;
    opts.seed = 31;
    const double acc = pretrain_sentiment_attention(model, fx.plain, 5, opts);
    CHECK(acc >= 0.95);
}

TEST_CASE("pretraining is deterministic and rejects single-class data") {
    Fixture fx;
    std::vector<LabeledSentence> small(fx.plain.begin(), fx.plain.begin() + 80);
    auto run = [&] {
        MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), tiny_mask_cfg(), 33);
        PretrainOptions opts;
        opts.seed = 7;
        pretrain_sentiment_attention(model, small, 2, opts);
        return model.params().digest();
    };
    CHECK(run() == run());

    std::vector<LabeledSentence> single;
    for (const auto& s : fx.plain) {
        if (s.label == Label::positive) single.push_back(s);
    }
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), tiny_mask_cfg(), 34);
    CHECK_THROWS_AS(pretrain_sentiment_attention(model, single, 1), Error);
    CHECK_THROWS_AS(pretrain_sentiment_attention(model, {}, 1), Error);
}

TEST_CASE("perfectly predicted batch has zero cross-entropy") {
    CHECK(cross_entropy_onehot({1.0, 0.0}, 0) == 0.0);
    CHECK(cross_entropy({0.0, 1.0}, {0.0, 1.0}) == 0.0);
}

TEST_CASE("split_all matches per-sentence forwards") {
    Fixture fx;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), tiny_mask_cfg(), 35);
    std::vector<const LabeledSentence*> data;
    for (std::size_t i = 0; i < 50; ++i) data.push_back(&fx.plain[i]);
    auto pairs = split_all(model, data, 16);
    REQUIRE(pairs.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto single = threshold_split(forward_mask_probs(model, *data[i]), SplitMode::hard,
                                      model.tau());
        CHECK(pairs[i].S == single.S);
        for (std::size_t t = 0; t < pairs[i].soft_gates.size(); ++t) {
            CHECK(pairs[i].soft_gates[t] == Catch::Approx(single.soft_gates[t]).margin(1e-9));
        }
    }
}
