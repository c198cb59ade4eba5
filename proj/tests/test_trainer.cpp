#include "testutil.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace amst;
using namespace amst::testutil;

namespace {

namespace fs = std::filesystem;

TrainConfig small_config(const std::string& name, std::uint64_t seed = 7) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.out_dir = (fs::temp_directory_path() / name).string();
    cfg.mode = "synthetic";
    cfg.synthetic_train = 150;
    cfg.synthetic_valid = 20;
    cfg.synthetic_test = 30;
    cfg.mask_embed_dim = 8;
    cfg.mask_hidden = 8;
    cfg.mask_att_dim = 8;
    cfg.mask_pretrain_epochs = 1;
    cfg.clf_pretrain_epochs = 1;
    cfg.adv_epochs = 1;
    cfg.mlm_dim = 16;
    cfg.mlm_layers = 1;
    cfg.mlm_heads = 2;
    cfg.mlm_ff = 24;
    cfg.stage1_epochs = 1;
    cfg.stage2_epochs = 1;
    cfg.stage3_epochs = 1;
    cfg.cnn_embed_dim = 8;
    cfg.cnn_channels = 6;
    cfg.disc_epochs = 2;
    const auto grammar_path = (fs::temp_directory_path() / (name + ".grammar")).string();
    save_grammar(tiny_grammar(33), grammar_path);
    cfg.grammar_file = grammar_path;
    return cfg;
}

struct DiscFixture {
    SyntheticGrammar grammar = tiny_grammar(606);
    std::vector<AnnotatedSentence> corpus = generate_synthetic_corpus(grammar, 3000);
    std::vector<LabeledSentence> plain;
    Vocabulary vocab;

    DiscFixture() {
        for (const auto& a : corpus) plain.push_back(a.sentence);
        vocab = build_vocabulary(plain, 1);
        assign_token_ids(plain, vocab);
    }
};

}  // namespace

TEST_CASE("cnn discriminator separates the oracle corpus") {
    DiscFixture fx;
    CnnConfig cfg{16, 12, {1, 2, 3}};
    CnnSentimentDiscriminator disc(fx.vocab.size(), fx.vocab.hash(), cfg, 61);
    std::vector<LabeledSentence> small(fx.plain.begin(), fx.plain.begin() + 600);
    DiscTrainOptions opts;
    opts.seed = 62;
    const double acc = train_discriminator(disc, small, 5, 1e-3, opts);
    CHECK(acc >= 0.95);
    CHECK(disc.trained());
}

TEST_CASE("cnn discriminator scores chance on a null-signal corpus") {
    DiscFixture fx;
    // random labels decoupled from content
    std::vector<LabeledSentence> null_corpus = fx.plain;
    Rng rng(63);
    long pos = 0;
    for (auto& s : null_corpus) {
        s.label = rng.coin() ? Label::positive : Label::negative;
        if (s.label == Label::positive) ++pos;
    }
    REQUIRE(std::abs(static_cast<double>(pos) / null_corpus.size() - 0.5) < 0.05);
    CnnConfig cfg{8, 6, {1, 2, 3}};
    CnnSentimentDiscriminator disc(fx.vocab.size(), fx.vocab.hash(), cfg, 64);
    DiscTrainOptions opts;
    opts.seed = 65;
    const double acc = train_discriminator(disc, null_corpus, 1, 1e-3, opts);
    CHECK(acc >= 0.45);
    CHECK(acc <= 0.55);
}

TEST_CASE("cnn discriminator rejects single-class data and handles short inputs") {
    DiscFixture fx;
    std::vector<LabeledSentence> single;
    for (const auto& s : fx.plain) {
        if (s.label == Label::positive) single.push_back(s);
    }
    CnnConfig cfg{8, 6, {1, 2, 3}};
    CnnSentimentDiscriminator disc(fx.vocab.size(), fx.vocab.hash(), cfg, 66);
    CHECK_THROWS_AS(train_discriminator(disc, single, 1, 1e-3), Error);
    CHECK_THROWS_AS(train_discriminator(disc, {}, 1, 1e-3), Error);

    // width-3 filters on a 1-token sentence still produce logits
    Var logits = disc.logits_from_ids({Vocabulary::kNumSpecial});
    CHECK(logits->cols() == 2);
    CHECK(std::isfinite(logits->val(0, 0)));
}

TEST_CASE("checkpoints round-trip bit-exactly and preserve forwards") {
    DiscFixture fx;
    MaskModelConfig mcfg;
    mcfg.embed_dim = 6;
    mcfg.hidden = 6;
    mcfg.att_dim = 6;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), mcfg, 71);
    const auto path = (fs::temp_directory_path() / "amst_mask_rt.ckpt").string();
    save_checkpoint(path, "amst.test_mask.v1", fx.vocab.hash(), {{"tau", "0.5"}},
                    model.params());

    MaskClassifier restored(fx.vocab.size(), fx.vocab.hash(), mcfg, 72);
    REQUIRE(restored.params().digest() != model.params().digest());
    auto c = read_checkpoint(path);
    CHECK(c.meta_at("tau") == "0.5");
    load_into(c, "amst.test_mask.v1", fx.vocab.hash(), restored.params());
    CHECK(restored.params().digest() == model.params().digest());

    // forward equality on 8 probe sentences
    for (int i = 0; i < 8; ++i) {
        auto a = forward_mask_probs(model, fx.plain[static_cast<std::size_t>(i)]);
        auto b = forward_mask_probs(restored, fx.plain[static_cast<std::size_t>(i)]);
        REQUIRE(a.probs == b.probs);
    }
}

TEST_CASE("checkpoint loader refuses mismatches and corruption") {
    DiscFixture fx;
    MaskModelConfig mcfg;
    mcfg.embed_dim = 6;
    mcfg.hidden = 6;
    mcfg.att_dim = 6;
    MaskClassifier model(fx.vocab.size(), fx.vocab.hash(), mcfg, 73);
    const auto path = (fs::temp_directory_path() / "amst_mask_bad.ckpt").string();
    save_checkpoint(path, "amst.mask.v1", fx.vocab.hash(), {}, model.params());

    auto c = read_checkpoint(path);
    MaskClassifier target(fx.vocab.size(), fx.vocab.hash(), mcfg, 74);

    // cross-module load: schema refusal
    try {
        load_into(c, "amst.senti_mlm.v1", fx.vocab.hash(), target.params());
        FAIL("expected schema refusal");
    } catch (const Error& e) {
        CHECK(e.category() == "checkpoint-schema");
    }

    // vocabulary hash refusal
    try {
        load_into(c, "amst.mask.v1", fx.vocab.hash() ^ 1ull, target.params());
        FAIL("expected vocab refusal");
    } catch (const Error& e) {
        CHECK(e.category() == "checkpoint-vocab");
    }

    // corrupted file: structured error, not a crash
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        bytes.resize(bytes.size() / 2);
        const auto trunc = (fs::temp_directory_path() / "amst_mask_trunc.ckpt").string();
        std::ofstream out(trunc, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();
        CHECK_THROWS_AS(read_checkpoint(trunc), Error);
    }
    {
        const auto garbage = (fs::temp_directory_path() / "amst_garbage.ckpt").string();
        std::ofstream out(garbage, std::ios::binary);
        out << "this is not a checkpoint at all";
        out.close();
        CHECK_THROWS_AS(read_checkpoint(garbage), Error);
    }
}

TEST_CASE("zero-epoch pipeline emits pass-through checkpoints without error") {
    auto cfg = small_config("amst_zero_epochs");
    cfg.mask_pretrain_epochs = 0;
    cfg.clf_pretrain_epochs = 0;
    cfg.adv_epochs = 0;
    cfg.stage1_epochs = 0;
    cfg.stage2_epochs = 0;
    cfg.stage3_epochs = 0;
    auto data = prepare_data(cfg);
    auto result = run_pipeline(cfg, data);
    REQUIRE(result.stages.size() == 5);
    for (const auto& s : result.stages) {
        CHECK(fs::exists(s.checkpoint_path));
        CHECK(fs::exists(s.trace_path));
        CHECK(s.epoch_mean_loss.empty());  // empty training report
    }
    // pass-through: parameters identical to a freshly seeded model
    MaskModelConfig mcfg{cfg.mask_embed_dim, cfg.mask_hidden, cfg.mask_att_dim, cfg.tau};
    MaskClassifier fresh(data.vocab.size(), data.vocab.hash(), mcfg, cfg.seed ^ 0x51ull);
    CHECK(result.masker->params().digest() == fresh.params().digest());
}

TEST_CASE("pipeline is deterministic and keeps clf(S) frozen") {
    auto cfg = small_config("amst_det_a", 1234);
    auto data = prepare_data(cfg);
    auto r1 = run_pipeline(cfg, data);

    auto cfg2 = small_config("amst_det_b", 1234);
    auto data2 = prepare_data(cfg2);
    auto r2 = run_pipeline(cfg2, data2);

    REQUIRE(r1.stages.size() == r2.stages.size());
    for (std::size_t i = 0; i < r1.stages.size(); ++i) {
        CHECK(r1.stages[i].checkpoint_digest == r2.stages[i].checkpoint_digest);
    }
    CHECK(r1.clf_s_digest_after_pretrain == r1.clf_s_digest_final);

    // different seed, different checkpoints
    auto cfg3 = small_config("amst_det_c", 4321);
    auto data3 = prepare_data(cfg3);
    auto r3 = run_pipeline(cfg3, data3);
    CHECK(r3.stages.back().checkpoint_digest != r1.stages.back().checkpoint_digest);
}

TEST_CASE("pipeline resumes from stage checkpoints") {
    auto cfg = small_config("amst_resume");
    auto data = prepare_data(cfg);
    auto full = run_pipeline(cfg, data);

    // resume from the saved mask checkpoint: stage-1 runs fresh over the
    // same inputs, so the stage-1 checkpoint digest must reproduce
    auto resumed = run_pipeline(cfg, data, PipelineStage::mlm_stage1);
    const auto find_stage = [](const PipelineResult& r, const std::string& name) {
        for (const auto& s : r.stages) {
            if (s.name == name) return s.checkpoint_digest;
        }
        return std::uint64_t{0};
    };
    CHECK(find_stage(full, "stage1") == find_stage(resumed, "stage1"));
    CHECK(find_stage(full, "stage3") == find_stage(resumed, "stage3"));

    // missing prerequisite: dependency error naming the prior command
    auto cfg_missing = small_config("amst_missing");
    auto data_missing = prepare_data(cfg_missing);
    try {
        run_pipeline(cfg_missing, data_missing, PipelineStage::adversarial);
        FAIL("expected dependency error");
    } catch (const Error& e) {
        CHECK(e.category() == "dependency");
        CHECK(std::string(e.what()).find("pretrain") != std::string::npos);
    }
}

TEST_CASE("load_pipeline restores what run_pipeline saved") {
    auto cfg = small_config("amst_load");
    auto data = prepare_data(cfg);
    auto trained = run_pipeline(cfg, data);
    auto loaded = load_pipeline(cfg, data);
    CHECK(loaded.masker->params().digest() == trained.masker->params().digest());
    CHECK(loaded.mlm->params().digest() == trained.mlm->params().digest());
    CHECK(loaded.disc->params().digest() == trained.disc->params().digest());
    CHECK(loaded.disc->trained());

    TrainConfig cfg_missing = cfg;
    cfg_missing.out_dir = (fs::temp_directory_path() / "amst_load_missing").string();
    fs::create_directories(cfg_missing.out_dir);
    CHECK_THROWS_AS(load_pipeline(cfg_missing, data), Error);
}

TEST_CASE("config files, overrides, and digests") {
    TrainConfig cfg;
    const auto path = (fs::temp_directory_path() / "amst_config.txt").string();
    {
        std::ofstream out(path);
        out << "# sample config\n"
            << "seed = 99\n"
            << "lambda1 = 0.25\n"
            << "stage1_epochs = 3\n"
            << "out_dir = /tmp/amst_cfg_out\n";
    }
    load_config_file(cfg, path);
    CHECK(cfg.seed == 99);
    CHECK(cfg.weights.lambda1 == 0.25);
    CHECK(cfg.stage1_epochs == 3);

    apply_overrides(cfg, {"stage1_epochs=5", "theta2=0.7"});
    CHECK(cfg.stage1_epochs == 5);
    CHECK(cfg.weights.theta2 == 0.7);

    CHECK_THROWS_AS(apply_overrides(cfg, {"bogus_key=1"}), Error);
    CHECK_THROWS_AS(apply_overrides(cfg, {"stage1_epochs=abc"}), Error);

    const auto d1 = config_digest(cfg);
    apply_overrides(cfg, {"stage1_epochs=6"});
    CHECK(config_digest(cfg) != d1);

    // canonical text round-trips through the parser
    const auto canon = (fs::temp_directory_path() / "amst_config_canon.txt").string();
    save_config(cfg, canon);
    TrainConfig reparsed;
    load_config_file(reparsed, canon);
    CHECK(config_digest(reparsed) == config_digest(cfg));
}

TEST_CASE("trace files hold one json record per step") {
    auto cfg = small_config("amst_trace");
    auto data = prepare_data(cfg);
    run_pipeline(cfg, data, PipelineStage::pretrain, PipelineStage::adversarial);
    std::ifstream in(fs::path(cfg.out_dir) / "trace_mask.jsonl");
    REQUIRE(in.good());
    std::string line;
    std::size_t records = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("clf_S"));
        CHECK(j.contains("adv_S"));
        CHECK(j.contains("clf_C"));
        CHECK(j.contains("adv_C"));
        CHECK(j.contains("dis_S"));
        CHECK(j.contains("dis_C"));
        CHECK(j["stage"] == "adversarial");
        ++records;
    }
    CHECK(records > 0);
}
