#pragma once

#include "amst/checkpoint.hpp"
#include "amst/disentangle.hpp"
#include "amst/grammar.hpp"
#include "amst/senti_mlm.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace amst {

struct TrainConfig {
    std::uint64_t seed{7};
    std::string out_dir{"out"};

    // data
    std::string mode{"synthetic"};  // synthetic | real
    std::string grammar_file;
    long synthetic_train{20000};
    long synthetic_valid{1000};
    long synthetic_test{1000};
    std::string train_file;
    std::string valid_file;
    std::string test_file;
    std::string data_format{"tsv"};
    int min_count{1};  // use 2 for real corpora

    // adaptive masking stage
    int mask_embed_dim{64};
    int mask_hidden{128};
    int mask_att_dim{64};
    double tau{0.5};
    int mask_pretrain_epochs{5};
    int clf_pretrain_epochs{5};
    int clf_c_pretrain_epochs{0};
    int adv_epochs{10};
    int adv_warmup_steps{0};
    double mask_lr{1e-3};
    double disc_lr{1e-3};
    int mask_batch{32};

    // senti-mlm stages (paper schedule: 10 / 6 / 10)
    int mlm_dim{128};
    int mlm_layers{2};
    int mlm_heads{4};
    int mlm_ff{256};
    int max_len{64};
    int stage1_epochs{10};
    int stage2_epochs{6};
    int stage3_epochs{10};
    double mlm_lr{3e-4};
    int mlm_batch{32};

    // CNN sentiment discriminator
    int cnn_embed_dim{64};
    int cnn_channels{32};
    double cnn_lr{1e-3};
    int disc_epochs{5};

    LossWeights weights;

    void validate() const {
        weights.validate();
        if (seed == 0) fail("config", "seed must be nonzero");
        for (int e : {mask_pretrain_epochs, clf_pretrain_epochs, clf_c_pretrain_epochs,
                      adv_epochs, stage1_epochs,
                      stage2_epochs, stage3_epochs, disc_epochs}) {
            if (e < 0) fail("config", "epoch counts must be >= 0");
        }
        for (int b : {mask_batch, mlm_batch}) {
            if (b < 1) fail("config", "batch size must be >= 1");
        }
        if (tau <= 0.0 || tau >= 1.0) fail("config", "tau must lie in (0,1)");
        if (mode != "synthetic" && mode != "real") fail("config", "mode must be synthetic or real");
    }
};

// All loaded data the pipeline touches, with token ids assigned.
struct DataBundle {
    std::vector<AnnotatedSentence> train;
    std::vector<AnnotatedSentence> valid;
    std::vector<AnnotatedSentence> test;
    Vocabulary vocab;
    std::optional<SyntheticGrammar> grammar;

    std::vector<LabeledSentence> train_sentences() const {
        std::vector<LabeledSentence> out;
        out.reserve(train.size());
        for (const auto& a : train) out.push_back(a.sentence);
        return out;
    }
};

inline std::vector<AnnotatedSentence> wrap_plain(std::vector<LabeledSentence> sentences) {
    std::vector<AnnotatedSentence> out;
    out.reserve(sentences.size());
    for (auto& s : sentences) {
        AnnotatedSentence a;
        a.sentence = std::move(s);
        out.push_back(std::move(a));
    }
    return out;
}

// Builds the working dataset: synthetic mode generates train/valid/test from
// one deterministic grammar stream; real mode loads the three files.
inline DataBundle prepare_data(const TrainConfig& cfg) {
    cfg.validate();
    DataBundle b;
    if (cfg.mode == "synthetic") {
        if (cfg.grammar_file.empty()) fail("config", "synthetic mode requires grammar_file");
        SyntheticGrammar g = load_grammar(cfg.grammar_file);
        g.seed = g.seed ^ cfg.seed;
        const auto total = static_cast<std::size_t>(cfg.synthetic_train + cfg.synthetic_valid +
                                                    cfg.synthetic_test);
        auto corpus = generate_synthetic_corpus(g, total);
        auto it = corpus.begin();
        b.train.assign(it, it + cfg.synthetic_train);
        it += cfg.synthetic_train;
        b.valid.assign(it, it + cfg.synthetic_valid);
        it += cfg.synthetic_valid;
        b.test.assign(it, it + cfg.synthetic_test);
        b.grammar = std::move(g);
    } else {
        if (cfg.train_file.empty() || cfg.test_file.empty()) {
            fail("config", "real mode requires train_file and test_file");
        }
        const auto format = parse_format(cfg.data_format);
        auto check = [](LoadResult r, const std::string& which) {
            if (!r.errors.empty()) {
                fail("data", which + ": line " + std::to_string(r.errors.front().line) + ": " +
                                 r.errors.front().message);
            }
            if (r.sentences.empty()) fail("data", which + ": no usable records");
            return std::move(r.sentences);
        };
        b.train = wrap_plain(check(load_dataset(cfg.train_file, format), cfg.train_file));
        if (!cfg.valid_file.empty()) {
            b.valid = wrap_plain(check(load_dataset(cfg.valid_file, format), cfg.valid_file));
        }
        b.test = wrap_plain(check(load_dataset(cfg.test_file, format), cfg.test_file));
    }
    std::vector<LabeledSentence> train_plain;
    train_plain.reserve(b.train.size());
    for (const auto& a : b.train) train_plain.push_back(a.sentence);
    b.vocab = build_vocabulary(train_plain, cfg.min_count);
    for (auto* split : {&b.train, &b.valid, &b.test}) {
        for (auto& a : *split) assign_token_ids(a.sentence, b.vocab);
    }
    return b;
}

// ---------------------------------------------------------------------------
// loss traces: line-delimited JSON records

class TraceWriter {
public:
    TraceWriter() = default;
    TraceWriter(const std::string& path, std::uint64_t seed) : seed_(seed) {
        out_.open(path);
        if (!out_) fail("io", "cannot write trace file: " + path);
    }

    void record(const std::string& stage, int epoch, long step,
                const std::vector<std::pair<std::string, double>>& losses) {
        if (!out_.is_open()) return;
        nlohmann::json j{{"stage", stage}, {"epoch", epoch}, {"step", step}, {"seed", seed_}};
        for (const auto& [k, v] : losses) j[k] = v;
        out_ << j.dump() << '\n';
    }

private:
    std::ofstream out_;
    std::uint64_t seed_{0};
};

// ---------------------------------------------------------------------------
// CNN discriminator training

struct DiscTrainOptions {
    int batch_size{32};
    std::uint64_t seed{21};
    double holdout_fraction{0.1};
};

// Cross-entropy training on sentence labels; returns held-out accuracy and
// marks the discriminator usable for L_acc.
inline double train_discriminator(CnnSentimentDiscriminator& disc,
                                  const std::vector<LabeledSentence>& data, int epochs,
                                  double lr, const DiscTrainOptions& opts = {},
                                  TraceWriter* trace = nullptr) {
    if (data.empty()) fail("trainer", "discriminator data is empty");
    bool has_pos = false;
    bool has_neg = false;
    for (const auto& s : data) (s.label == Label::positive ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) fail("trainer", "single-class data: both labels are required");

    const std::size_t stride =
        std::max<std::size_t>(2, static_cast<std::size_t>(1.0 / std::max(opts.holdout_fraction, 1e-9)));
    std::vector<const LabeledSentence*> train;
    std::vector<const LabeledSentence*> held;
    for (std::size_t i = 0; i < data.size(); ++i) {
        (i % stride == 0 ? held : train).push_back(&data[i]);
    }
    if (train.empty()) train = held;

    Rng rng(opts.seed);
    AdamOptimizer opt(disc.params().vars(), lr);
    long step = 0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> idx(train.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        rng.shuffle(idx);
        double epoch_loss = 0.0;
        long batches = 0;
        for (std::size_t start = 0; start < idx.size();
             start += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t end =
                std::min(idx.size(), start + static_cast<std::size_t>(opts.batch_size));
            Var total = scalar_const(0.0);
            for (std::size_t i = start; i < end; ++i) {
                const auto* s = train[idx[i]];
                Var logits = disc.logits_from_ids(s->token_ids);
                total = add(total, cross_entropy_rows(logits, {index_of(s->label)}, Reduction::sum));
            }
            Var loss = scale(total, 1.0 / static_cast<double>(end - start));
            const double lv = loss->scalar();
            if (!std::isfinite(lv)) fail("nonfinite-loss", "discriminator cross-entropy");
            disc.params().zero_grad();
            backward(loss);
            opt.step();
            epoch_loss += lv;
            ++batches;
            ++step;
        }
        if (trace != nullptr && batches > 0) {
            trace->record("discriminator", epoch, step,
                          {{"loss", epoch_loss / static_cast<double>(batches)}});
        }
    }

    std::size_t correct = 0;
    for (const auto* s : held) {
        if (disc.classify(s->token_ids) == s->label) ++correct;
    }
    disc.mark_trained();
    return held.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(held.size());
}

// ---------------------------------------------------------------------------
// the pipeline

enum class PipelineStage : int {
    pretrain = 0,   // (a) attention mask classifier + clf(S)
    adversarial,    // (b) two-step masking training
    mlm_stage1,     // (c) L_rec only
    mlm_stage2,     // (d) theta1*L_rec + theta2*L_senti
    mlm_stage3,     // (e) theta3*L_rec + theta4*L_acc, co-training the CNN
};

struct StageArtifact {
    std::string name;
    std::string checkpoint_path;
    std::uint64_t checkpoint_digest{0};
    std::string trace_path;
    std::vector<double> epoch_mean_loss;
};

struct PipelineResult {
    std::unique_ptr<MaskClassifier> masker;
    std::unique_ptr<DisentangleModels> aux;
    std::unique_ptr<SentiMLMModel> mlm;
    std::unique_ptr<CnnSentimentDiscriminator> disc;

    double mask_pretrain_accuracy{0.0};
    double clf_s_accuracy{0.0};
    double disc_accuracy{0.0};
    std::uint64_t clf_s_digest_after_pretrain{0};
    std::uint64_t clf_s_digest_final{0};
    std::vector<StageArtifact> stages;

    nlohmann::json report(std::uint64_t seed, const std::string& config_digest) const {
        nlohmann::json stages_json = nlohmann::json::array();
        for (const auto& s : stages) {
            stages_json.push_back({{"name", s.name},
                                   {"checkpoint", s.checkpoint_path},
                                   {"checkpoint_digest", hex64(s.checkpoint_digest)},
                                   {"trace", s.trace_path},
                                   {"epoch_mean_loss", s.epoch_mean_loss}});
        }
        return nlohmann::json{{"schema_version", 1},
                              {"seed", seed},
                              {"config_digest", config_digest},
                              {"mask_pretrain_accuracy", mask_pretrain_accuracy},
                              {"clf_s_accuracy", clf_s_accuracy},
                              {"disc_accuracy", disc_accuracy},
                              {"clf_s_digest_after_pretrain", hex64(clf_s_digest_after_pretrain)},
                              {"clf_s_digest_final", hex64(clf_s_digest_final)},
                              {"stages", stages_json}};
    }
};

namespace detail {

inline const std::string kPretrainSchema = "amst.pretrain.v1";
inline const std::string kMaskSchema = "amst.mask.v1";
inline const std::string kMlmSchema = "amst.senti_mlm.v1";

inline std::map<std::string, std::string> base_meta(const TrainConfig& cfg) {
    return {{"tau", std::to_string(cfg.tau)},
            {"mask_embed_dim", std::to_string(cfg.mask_embed_dim)},
            {"mask_hidden", std::to_string(cfg.mask_hidden)},
            {"mlm_dim", std::to_string(cfg.mlm_dim)},
            {"mlm_layers", std::to_string(cfg.mlm_layers)},
            {"mlm_heads", std::to_string(cfg.mlm_heads)},
            {"label_embeddings", "2"}};
}

}  // namespace detail

// Runs stages (a)-(e) in order over [from, to]. Earlier stages must have
// left their checkpoints in cfg.out_dir when skipped; later stages are not
// touched.
inline PipelineResult run_pipeline(const TrainConfig& cfg, const DataBundle& data,
                                   PipelineStage from = PipelineStage::pretrain,
                                   PipelineStage to = PipelineStage::mlm_stage3) {
    if (from > to) fail("trainer", "pipeline stage range is empty");
    cfg.validate();
    if (data.train.empty()) fail("trainer", "empty training split");
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    const auto path = [&cfg](const std::string& f) {
        return (fs::path(cfg.out_dir) / f).string();
    };

    PipelineResult r;
    Rng master(cfg.seed);
    Rng pretrain_rng = master.fork(0x11);
    Rng adv_rng = master.fork(0x22);
    Rng mlm_rng = master.fork(0x33);

    MaskModelConfig mask_cfg;
    mask_cfg.embed_dim = cfg.mask_embed_dim;
    mask_cfg.hidden = cfg.mask_hidden;
    mask_cfg.att_dim = cfg.mask_att_dim;
    mask_cfg.tau = cfg.tau;
    r.masker = std::make_unique<MaskClassifier>(data.vocab.size(), data.vocab.hash(), mask_cfg,
                                                cfg.seed ^ 0x51ull);
    r.aux = std::make_unique<DisentangleModels>(cfg.mask_embed_dim, data.vocab.content_size(),
                                                cfg.seed ^ 0x52ull);
    SentiMLMConfig mlm_cfg{cfg.mlm_layers, cfg.mlm_dim, cfg.mlm_heads, cfg.mlm_ff, cfg.max_len};
    r.mlm = std::make_unique<SentiMLMModel>(data.vocab.size(), data.vocab.hash(), mlm_cfg,
                                            cfg.seed ^ 0x53ull);
    CnnConfig cnn_cfg{cfg.cnn_embed_dim, cfg.cnn_channels, {1, 2, 3}};
    r.disc = std::make_unique<CnnSentimentDiscriminator>(data.vocab.size(), data.vocab.hash(),
                                                         cnn_cfg, cfg.seed ^ 0x54ull);

    const auto train_plain = data.train_sentences();
    std::vector<const LabeledSentence*> train_ptrs;
    train_ptrs.reserve(data.train.size());
    for (const auto& a : data.train) train_ptrs.push_back(&a.sentence);

    // (a) pretraining
    if (from <= PipelineStage::pretrain) {
        TraceWriter trace(path("trace_pretrain.jsonl"), cfg.seed);
        PretrainOptions po;
        po.batch_size = cfg.mask_batch;
        po.lr = cfg.mask_lr;
        po.seed = pretrain_rng.next_u64();
        r.mask_pretrain_accuracy =
            pretrain_sentiment_attention(*r.masker, train_plain, cfg.mask_pretrain_epochs, po);
        r.clf_s_accuracy = pretrain_frozen_classifier(r.aux->clf_s, *r.masker, train_plain,
                                                      cfg.clf_pretrain_epochs, 1e-2, 64,
                                                      pretrain_rng.next_u64());
        const double clf_c_ce =
            cfg.clf_c_pretrain_epochs > 0
                ? pretrain_content_classifier(r.aux->clf_c, *r.masker, train_plain, data.vocab,
                                              cfg.clf_c_pretrain_epochs, 1e-2, 64,
                                              pretrain_rng.next_u64())
                : (static_cast<void>(pretrain_rng.next_u64()), 0.0);
        trace.record("pretrain", cfg.mask_pretrain_epochs, 0,
                     {{"mask_accuracy", r.mask_pretrain_accuracy},
                      {"clf_s_accuracy", r.clf_s_accuracy},
                      {"clf_c_ce", clf_c_ce}});
        auto meta = detail::base_meta(cfg);
        save_checkpoint_multi(path("pretrain.ckpt"), detail::kPretrainSchema, data.vocab.hash(),
                              meta,
                              {{"mask.", &r.masker->params()},
                               {"clf_s.", &r.aux->clf_s.reg},
                               {"clf_c.", &r.aux->clf_c.reg}});
        r.stages.push_back({"pretrain", path("pretrain.ckpt"),
                            digest_file(path("pretrain.ckpt")), path("trace_pretrain.jsonl"), {}});
    } else {
        if (!std::filesystem::exists(path("pretrain.ckpt"))) {
            fail("dependency", "missing " + path("pretrain.ckpt") + "; run `amst pretrain` first");
        }
        auto c = read_checkpoint(path("pretrain.ckpt"));
        load_into_multi(c, detail::kPretrainSchema, data.vocab.hash(),
                        {{"mask.", &r.masker->params()},
                         {"clf_s.", &r.aux->clf_s.reg},
                         {"clf_c.", &r.aux->clf_c.reg}});
        r.aux->clf_s.pretrained = true;
    }
    r.clf_s_digest_after_pretrain = r.aux->clf_s.digest();
    if (to < PipelineStage::adversarial) {
        r.clf_s_digest_final = r.aux->clf_s.digest();
        return r;
    }

    // (b) adversarial masking training
    if (from <= PipelineStage::adversarial) {
        TraceWriter trace(path("trace_mask.jsonl"), cfg.seed);
        AdvTrainOptions ao;
        ao.masker_lr = cfg.mask_lr;
        ao.disc_lr = cfg.disc_lr;
        ao.warmup_steps = cfg.adv_warmup_steps;
        AdversarialTrainer adv(*r.masker, *r.aux, data.vocab, cfg.weights, ao);
        StageArtifact art{"adversarial", path("mask.ckpt"), 0, path("trace_mask.jsonl"), {}};
        long step = 0;
        for (int epoch = 0; epoch < cfg.adv_epochs; ++epoch) {
            auto batches = length_batches(train_ptrs, static_cast<std::size_t>(cfg.mask_batch),
                                          adv_rng);
            double total = 0.0;
            for (const auto& batch_idx : batches) {
                std::vector<const LabeledSentence*> batch;
                batch.reserve(batch_idx.size());
                for (const auto i : batch_idx) batch.push_back(train_ptrs[i]);
                AdvStepRecord rec;
                try {
                    rec = adv.step(batch);
                } catch (const Error& e) {
                    fail(e.category(), "adversarial stage, epoch " + std::to_string(epoch) +
                                           ", step " + std::to_string(step) + ": " + e.what());
                }
                trace.record("adversarial", epoch, step,
                             {{"clf_S", rec.clf_S},
                              {"adv_S", rec.adv_S},
                              {"clf_C", rec.clf_C},
                              {"adv_C", rec.adv_C},
                              {"dis_S", rec.dis_S},
                              {"dis_C", rec.dis_C}});
                total += total_objective(cfg.weights, rec.clf_S, rec.adv_S, rec.clf_C, rec.adv_C);
                ++step;
            }
            if (!batches.empty()) art.epoch_mean_loss.push_back(total / static_cast<double>(batches.size()));
        }
        auto meta = detail::base_meta(cfg);
        save_checkpoint_multi(path("mask.ckpt"), detail::kMaskSchema, data.vocab.hash(), meta,
                              {{"mask.", &r.masker->params()},
                               {"clf_s.", &r.aux->clf_s.reg},
                               {"clf_c.", &r.aux->clf_c.reg},
                               {"dis_s.", &r.aux->dis_s.reg},
                               {"dis_c.", &r.aux->dis_c.reg}});
        art.checkpoint_digest = digest_file(path("mask.ckpt"));
        r.stages.push_back(std::move(art));
    } else {
        if (!std::filesystem::exists(path("mask.ckpt"))) {
            fail("dependency", "missing " + path("mask.ckpt") + "; run `amst train-mask` first");
        }
        auto c = read_checkpoint(path("mask.ckpt"));
        load_into_multi(c, detail::kMaskSchema, data.vocab.hash(),
                        {{"mask.", &r.masker->params()},
                         {"clf_s.", &r.aux->clf_s.reg},
                         {"clf_c.", &r.aux->clf_c.reg},
                         {"dis_s.", &r.aux->dis_s.reg},
                         {"dis_c.", &r.aux->dis_c.reg}});
        r.aux->clf_s.pretrained = true;
    }
    if (to < PipelineStage::mlm_stage1) {
        r.clf_s_digest_final = r.aux->clf_s.digest();
        return r;
    }

    // Masked pairs for the infilling stages come from the trained masker.
    std::vector<DisentangledPair> pairs = split_all(*r.masker, train_ptrs);

    // Gold polarity targets: grammar annotations when present, otherwise the
    // masked-positions-inherit-label rule.
    std::vector<std::vector<Polarity>> gold;
    gold.reserve(data.train.size());
    for (std::size_t i = 0; i < data.train.size(); ++i) {
        if (data.train[i].has_oracle()) {
            gold.push_back(gold_polarities(data.train[i]));
        } else {
            gold.push_back(polarity_targets_from_pair(data.train[i].sentence, pairs[i]));
        }
    }

    auto run_mlm_stage = [&](const std::string& name, int epochs, bool use_senti, bool use_acc,
                             const std::string& ckpt, Rng& rng) {
        TraceWriter trace(path("trace_" + name + ".jsonl"), cfg.seed);
        StageArtifact art{name, path(ckpt), 0, path("trace_" + name + ".jsonl"), {}};
        AdamOptimizer opt(r.mlm->params().vars(), cfg.mlm_lr);
        long step = 0;
        for (int epoch = 0; epoch < epochs; ++epoch) {
            if (use_acc) {
                DiscTrainOptions dopts;
                dopts.batch_size = cfg.mlm_batch;
                dopts.seed = rng.next_u64();
                r.disc_accuracy =
                    train_discriminator(*r.disc, train_plain, 1, cfg.cnn_lr, dopts, &trace);
            }
            auto batches = length_batches(train_ptrs, static_cast<std::size_t>(cfg.mlm_batch), rng);
            double total = 0.0;
            for (const auto& batch_idx : batches) {
                std::vector<const LabeledSentence*> batch;
                std::vector<const DisentangledPair*> bpairs;
                std::vector<const std::vector<Polarity>*> bgold;
                std::vector<Label> flipped;
                for (const auto i : batch_idx) {
                    batch.push_back(train_ptrs[i]);
                    bpairs.push_back(&pairs[i]);
                    bgold.push_back(&gold[i]);
                    flipped.push_back(flip(train_ptrs[i]->label));
                }
                Var loss;
                std::vector<std::pair<std::string, double>> losses;
                auto stage_losses = stage_batch_losses(*r.mlm, batch, bpairs,
                                                       use_senti ? &bgold : nullptr, data.vocab);
                losses.emplace_back("rec", stage_losses.rec->scalar());
                if (use_senti) {
                    losses.emplace_back("senti", stage_losses.senti->scalar());
                    loss = combine_stage1_graph(cfg.weights, stage_losses.rec, stage_losses.senti);
                } else if (use_acc) {
                    Var acc =
                        loss_acc_batch(*r.mlm, batch, bpairs, flipped, *r.disc, data.vocab);
                    losses.emplace_back("acc", acc->scalar());
                    loss = combine_stage3_graph(cfg.weights, stage_losses.rec, acc);
                } else {
                    loss = stage_losses.rec;
                }
                const double lv = loss->scalar();
                if (!std::isfinite(lv)) {
                    fail("nonfinite-loss", name + " epoch " + std::to_string(epoch) + " step " +
                                               std::to_string(step) + ": total loss not finite");
                }
                losses.emplace_back("total", lv);
                trace.record(name, epoch, step, losses);
                r.mlm->params().zero_grad();
                r.disc->params().zero_grad();
                backward(loss);
                opt.step();
                total += lv;
                ++step;
            }
            if (!batches.empty()) {
                art.epoch_mean_loss.push_back(total / static_cast<double>(batches.size()));
            }
        }
        auto meta = detail::base_meta(cfg);
        meta["stage"] = name;
        meta["disc_trained"] = r.disc->trained() ? "1" : "0";
        std::vector<CheckpointPart> parts{{"mlm.", &r.mlm->params()}};
        if (use_acc) parts.push_back({"disc.", &r.disc->params()});
        save_checkpoint_multi(path(ckpt), detail::kMlmSchema, data.vocab.hash(), meta, parts);
        art.checkpoint_digest = digest_file(path(ckpt));
        r.stages.push_back(std::move(art));
    };

    auto load_mlm = [&](const std::string& ckpt, bool with_disc, const char* prior_command) {
        if (!std::filesystem::exists(path(ckpt))) {
            fail("dependency",
                 "missing " + path(ckpt) + "; run `amst " + prior_command + "` first");
        }
        auto c = read_checkpoint(path(ckpt));
        std::vector<MutableCheckpointPart> parts{{"mlm.", &r.mlm->params()}};
        if (with_disc) parts.push_back({"disc.", &r.disc->params()});
        load_into_multi(c, detail::kMlmSchema, data.vocab.hash(), parts);
        if (with_disc && c.meta.count("disc_trained") && c.meta_at("disc_trained") == "1") {
            r.disc->mark_trained();
        }
    };

    if (from <= PipelineStage::mlm_stage1) {
        run_mlm_stage("stage1", cfg.stage1_epochs, false, false, "mlm_stage1.ckpt", mlm_rng);
    } else {
        load_mlm("mlm_stage1.ckpt", false, "train-mlm");
    }
    if (to >= PipelineStage::mlm_stage2) {
        if (from <= PipelineStage::mlm_stage2) {
            run_mlm_stage("stage2", cfg.stage2_epochs, true, false, "mlm_stage2.ckpt", mlm_rng);
        } else {
            load_mlm("mlm_stage2.ckpt", false, "train-mlm");
        }
    }
    if (to >= PipelineStage::mlm_stage3) {
        run_mlm_stage("stage3", cfg.stage3_epochs, false, true, "mlm_stage3.ckpt", mlm_rng);
    }

    r.clf_s_digest_final = r.aux->clf_s.digest();
    return r;
}

// Restores a full pipeline state from the stage checkpoints in out_dir.
inline PipelineResult load_pipeline(const TrainConfig& cfg, const DataBundle& data,
                                    bool require_mlm = true) {
    cfg.validate();
    namespace fs = std::filesystem;
    const auto path = [&cfg](const std::string& f) {
        return (fs::path(cfg.out_dir) / f).string();
    };
    PipelineResult r;
    MaskModelConfig mask_cfg;
    mask_cfg.embed_dim = cfg.mask_embed_dim;
    mask_cfg.hidden = cfg.mask_hidden;
    mask_cfg.att_dim = cfg.mask_att_dim;
    mask_cfg.tau = cfg.tau;
    r.masker = std::make_unique<MaskClassifier>(data.vocab.size(), data.vocab.hash(), mask_cfg,
                                                cfg.seed ^ 0x51ull);
    r.aux = std::make_unique<DisentangleModels>(cfg.mask_embed_dim, data.vocab.content_size(),
                                                cfg.seed ^ 0x52ull);
    SentiMLMConfig mlm_cfg{cfg.mlm_layers, cfg.mlm_dim, cfg.mlm_heads, cfg.mlm_ff, cfg.max_len};
    r.mlm = std::make_unique<SentiMLMModel>(data.vocab.size(), data.vocab.hash(), mlm_cfg,
                                            cfg.seed ^ 0x53ull);
    CnnConfig cnn_cfg{cfg.cnn_embed_dim, cfg.cnn_channels, {1, 2, 3}};
    r.disc = std::make_unique<CnnSentimentDiscriminator>(data.vocab.size(), data.vocab.hash(),
                                                         cnn_cfg, cfg.seed ^ 0x54ull);
    if (!fs::exists(path("mask.ckpt"))) {
        fail("dependency", "missing " + path("mask.ckpt") + "; run `amst train-mask` first");
    }
    auto cm = read_checkpoint(path("mask.ckpt"));
    load_into_multi(cm, detail::kMaskSchema, data.vocab.hash(),
                    {{"mask.", &r.masker->params()},
                     {"clf_s.", &r.aux->clf_s.reg},
                     {"clf_c.", &r.aux->clf_c.reg},
                     {"dis_s.", &r.aux->dis_s.reg},
                     {"dis_c.", &r.aux->dis_c.reg}});
    r.aux->clf_s.pretrained = true;
    if (require_mlm) {
        if (!fs::exists(path("mlm_stage3.ckpt"))) {
            fail("dependency", "missing " + path("mlm_stage3.ckpt") + "; run `amst train-mlm` first");
        }
        auto c3 = read_checkpoint(path("mlm_stage3.ckpt"));
        load_into_multi(c3, detail::kMlmSchema, data.vocab.hash(),
                        {{"mlm.", &r.mlm->params()}, {"disc.", &r.disc->params()}});
        if (c3.meta.count("disc_trained") == 0 || c3.meta_at("disc_trained") == "1") {
            r.disc->mark_trained();
        }
    }
    return r;
}

}  // namespace amst
