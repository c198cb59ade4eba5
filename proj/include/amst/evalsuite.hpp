#pragma once

#include "amst/config.hpp"

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace amst {

// ---------------------------------------------------------------------------
// BLEU: corpus-level, n <= 4, modified (clipped) precisions, brevity
// penalty, add-one smoothing on the higher-order precisions. Identity scores
// exactly 100; zero unigram overlap scores exactly 0.

namespace detail {

inline void count_ngrams(const std::vector<std::string>& tokens, int n,
                         std::unordered_map<std::string, long>& counts) {
    if (static_cast<int>(tokens.size()) < n) return;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
        std::string key;
        for (int j = 0; j < n; ++j) {
            key += tokens[i + static_cast<std::size_t>(j)];
            key += '\x1f';
        }
        ++counts[key];
    }
}

}  // namespace detail

inline double bleu(const std::vector<std::vector<std::string>>& outputs,
                   const std::vector<std::vector<std::string>>& references, int max_n = 4) {
    if (outputs.size() != references.size()) {
        fail("eval", "bleu: output and reference counts differ");
    }
    if (outputs.empty()) fail("eval", "bleu: empty corpus");
    std::vector<long> matches(static_cast<std::size_t>(max_n), 0);
    std::vector<long> totals(static_cast<std::size_t>(max_n), 0);
    long cand_len = 0;
    long ref_len = 0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        cand_len += static_cast<long>(outputs[i].size());
        ref_len += static_cast<long>(references[i].size());
        for (int n = 1; n <= max_n; ++n) {
            std::unordered_map<std::string, long> cand;
            std::unordered_map<std::string, long> ref;
            detail::count_ngrams(outputs[i], n, cand);
            detail::count_ngrams(references[i], n, ref);
            for (const auto& [key, c] : cand) {
                totals[static_cast<std::size_t>(n - 1)] += c;
                const auto it = ref.find(key);
                if (it != ref.end()) {
                    matches[static_cast<std::size_t>(n - 1)] += std::min(c, it->second);
                }
            }
        }
    }
    if (totals[0] == 0 || matches[0] == 0) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        double p;
        if (n == 1) {
            p = static_cast<double>(matches[0]) / static_cast<double>(totals[0]);
        } else {
            p = (static_cast<double>(matches[static_cast<std::size_t>(n - 1)]) + 1.0) /
                (static_cast<double>(totals[static_cast<std::size_t>(n - 1)]) + 1.0);
        }
        log_sum += std::log(p);
    }
    const double geo = std::exp(log_sum / static_cast<double>(max_n));
    const double bp = cand_len >= ref_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return 100.0 * bp * geo;
}

// ---------------------------------------------------------------------------
// transfer accuracy and masking quality

using SentimentJudge = std::function<std::optional<Label>(const std::vector<std::string>&)>;

// Fraction of outputs the judge labels as the target sentiment, in percent.
inline double transfer_accuracy(const std::vector<TransferResult>& outputs,
                                const SentimentJudge& judge) {
    if (outputs.empty()) fail("eval", "transfer_accuracy: empty output list");
    std::size_t hit = 0;
    for (const auto& r : outputs) {
        const auto judged = judge(r.tokens);
        if (judged && *judged == r.target) ++hit;
    }
    return 100.0 * static_cast<double>(hit) / static_cast<double>(outputs.size());
}

struct MaskingQuality {
    double precision{0.0};
    double recall{0.0};
};

// Micro-averaged precision/recall of the masked sets against the planted
// sentiment positions.
inline MaskingQuality masking_quality(const std::vector<DisentangledPair>& pairs,
                                      const std::vector<std::vector<std::size_t>>& oracle) {
    if (pairs.empty() || pairs.size() != oracle.size()) {
        fail("eval", "masking_quality: oracle annotations missing or mismatched");
    }
    long tp = 0;
    long fp = 0;
    long fn = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::vector<bool> planted(pairs[i].size(), false);
        for (const auto p : oracle[i]) {
            if (p >= pairs[i].size()) fail("eval", "masking_quality: oracle position out of range");
            planted[p] = true;
        }
        std::vector<bool> masked(pairs[i].size(), false);
        for (const auto p : pairs[i].S) masked[p] = true;
        for (std::size_t t = 0; t < planted.size(); ++t) {
            if (masked[t] && planted[t]) ++tp;
            else if (masked[t] && !planted[t]) ++fp;
            else if (!masked[t] && planted[t]) ++fn;
        }
    }
    MaskingQuality q;
    q.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    q.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    return q;
}

// ---------------------------------------------------------------------------
// reports

struct AblationRow {
    std::string name;
    double acc{0.0};
    double bleu{0.0};
    std::uint64_t seed{0};
};

struct SweepRow {
    std::string param;
    double value{0.0};
    double acc{0.0};
    double bleu{0.0};
    std::uint64_t seed{0};
};

struct EvalReport {
    std::uint64_t seed{0};
    std::string config_digest;
    long test_count{0};
    double transfer_acc{0.0};
    double bleu_score{0.0};
    double mask_precision{0.0};
    double mask_recall{0.0};
    double reconstruction_rate{0.0};
    double label_flip_sensitivity{0.0};
    std::vector<AblationRow> ablation;
    std::vector<SweepRow> sweep;

    nlohmann::json to_json() const {
        nlohmann::json ab = nlohmann::json::array();
        for (const auto& row : ablation) {
            ab.push_back({{"name", row.name}, {"acc", row.acc}, {"bleu", row.bleu}, {"seed", row.seed}});
        }
        nlohmann::json sw = nlohmann::json::array();
        for (const auto& row : sweep) {
            sw.push_back({{"param", row.param},
                          {"value", row.value},
                          {"acc", row.acc},
                          {"bleu", row.bleu},
                          {"seed", row.seed}});
        }
        return nlohmann::json{{"schema_version", 1},
                              {"seed", seed},
                              {"config_digest", config_digest},
                              {"test_count", test_count},
                              {"transfer_acc", transfer_acc},
                              {"bleu", bleu_score},
                              {"mask_precision", mask_precision},
                              {"mask_recall", mask_recall},
                              {"reconstruction_rate", reconstruction_rate},
                              {"label_flip_sensitivity", label_flip_sensitivity},
                              {"ablation", ab},
                              {"sweep", sw}};
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) fail("io", "cannot write report: " + path);
        out << to_json().dump(2) << '\n';
    }
};

inline void write_table_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("io", "cannot write csv: " + path);
    out << "param,value,acc,bleu,seed\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g,%llu\n", r.param.c_str(), r.value,
                      r.acc, r.bleu, static_cast<unsigned long long>(r.seed));
        out << buf;
    }
}

inline std::vector<SweepRow> ablation_as_table(const std::vector<AblationRow>& rows) {
    std::vector<SweepRow> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back({r.name, 0.0, r.acc, r.bleu, r.seed});
    return out;
}

// ---------------------------------------------------------------------------
// system evaluation on a test split

struct SystemEvaluation {
    EvalReport report;
    std::vector<TransferResult> transfers;
    std::vector<DisentangledPair> pairs;
};

// Judge used on real corpora: an independently trained CNN (never the one
// that served L_acc). On synthetic corpora the grammar oracle judges.
inline SentimentJudge make_cnn_judge(const DataBundle& data, const TrainConfig& cfg) {
    auto judge_model = std::make_shared<CnnSentimentDiscriminator>(
        data.vocab.size(), data.vocab.hash(),
        CnnConfig{cfg.cnn_embed_dim, cfg.cnn_channels, {1, 2, 3}}, cfg.seed ^ 0x99ull);
    DiscTrainOptions opts;
    opts.seed = cfg.seed ^ 0x9aull;
    train_discriminator(*judge_model, data.train_sentences(), cfg.disc_epochs, cfg.cnn_lr, opts);
    const auto* vocab = &data.vocab;
    return [judge_model, vocab](const std::vector<std::string>& tokens) -> std::optional<Label> {
        std::vector<int> ids(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) ids[i] = vocab->id_or_unk(tokens[i]);
        return judge_model->classify(ids);
    };
}

inline SentimentJudge make_judge(const DataBundle& data, const TrainConfig& cfg) {
    if (data.grammar) {
        GrammarOracle oracle(*data.grammar);
        return [oracle](const std::vector<std::string>& tokens) { return oracle.judge(tokens); };
    }
    return make_cnn_judge(data, cfg);
}

// Transfers the test split to the flipped label and scores ACC, BLEU,
// masking quality, reconstruction recovery, and label-flip sensitivity.
inline SystemEvaluation evaluate_system(const TrainConfig& cfg, const DataBundle& data,
                                        const PipelineResult& pipeline) {
    if (data.test.empty()) fail("eval", "empty test split");
    SystemEvaluation ev;
    ev.report.seed = cfg.seed;
    ev.report.config_digest = config_digest(cfg);
    ev.report.test_count = static_cast<long>(data.test.size());

    std::vector<const LabeledSentence*> test_ptrs;
    test_ptrs.reserve(data.test.size());
    for (const auto& a : data.test) test_ptrs.push_back(&a.sentence);
    ev.pairs = split_all(*pipeline.masker, test_ptrs);

    long recovered = 0;
    long masked_total = 0;
    long flip_changed = 0;
    ev.transfers.reserve(data.test.size());
    for (std::size_t i = 0; i < data.test.size(); ++i) {
        const auto& x = data.test[i].sentence;
        const Label target = flip(x.label);
        auto flipped = transfer(*pipeline.mlm, x, ev.pairs[i], target, data.vocab);
        auto same = transfer(*pipeline.mlm, x, ev.pairs[i], x.label, data.vocab);
        for (std::size_t s = 0; s < ev.pairs[i].S.size(); ++s) {
            const auto p = ev.pairs[i].S[s];
            ++masked_total;
            if (same.token_ids[p] == x.token_ids[p]) ++recovered;
        }
        bool changed = false;
        for (const auto p : ev.pairs[i].S) {
            if (same.token_ids[p] != flipped.token_ids[p]) changed = true;
        }
        if (changed) ++flip_changed;
        ev.transfers.push_back(std::move(flipped));
    }
    ev.report.reconstruction_rate =
        masked_total == 0 ? 0.0 : static_cast<double>(recovered) / static_cast<double>(masked_total);
    ev.report.label_flip_sensitivity =
        static_cast<double>(flip_changed) / static_cast<double>(data.test.size());

    const auto judge = make_judge(data, cfg);
    ev.report.transfer_acc = transfer_accuracy(ev.transfers, judge);

    std::vector<std::vector<std::string>> outputs;
    std::vector<std::vector<std::string>> refs;
    outputs.reserve(ev.transfers.size());
    refs.reserve(ev.transfers.size());
    const bool oracle_refs = data.grammar.has_value() && !data.test.empty() &&
                             data.test.front().has_oracle();
    std::optional<GrammarOracle> oracle;
    if (data.grammar) oracle.emplace(*data.grammar);
    for (std::size_t i = 0; i < ev.transfers.size(); ++i) {
        outputs.push_back(ev.transfers[i].tokens);
        if (oracle_refs) {
            refs.push_back(oracle->reference(data.test[i], ev.transfers[i].target));
        } else {
            refs.push_back(data.test[i].sentence.tokens);  // source-BLEU fallback
        }
    }
    ev.report.bleu_score = bleu(outputs, refs);

    if (!data.test.empty() && data.test.front().has_oracle()) {
        std::vector<std::vector<std::size_t>> planted;
        planted.reserve(data.test.size());
        for (const auto& a : data.test) planted.push_back(a.planted);
        const auto q = masking_quality(ev.pairs, planted);
        ev.report.mask_precision = q.precision;
        ev.report.mask_recall = q.recall;
    }
    return ev;
}

// ---------------------------------------------------------------------------
// ablation protocol: the full model plus five single-loss removals

struct AblationSpec {
    std::string display;
    std::string dir_key;
    std::function<void(TrainConfig&)> apply;
};

inline const std::vector<AblationSpec>& ablation_rows() {
    static const std::vector<AblationSpec> rows = {
        {"-L_clf(S)", "no_clf_s", [](TrainConfig& c) { c.weights.lambda1 = 0.0; }},
        {"-L_clf(C)", "no_clf_c", [](TrainConfig& c) { c.weights.lambda3 = 0.0; }},
        {"-L_adv(S)", "no_adv_s", [](TrainConfig& c) { c.weights.lambda2 = 0.0; }},
        {"-L_adv(C)", "no_adv_c", [](TrainConfig& c) { c.weights.lambda4 = 0.0; }},
        {"-L_senti", "no_senti", [](TrainConfig& c) { c.weights.theta2 = 0.0; }},
    };
    return rows;
}

// Runs the pipeline once per row (full model first) and reports ACC/BLEU for
// each on the shared test split.
inline std::vector<AblationRow> ablation_suite(const TrainConfig& base, const DataBundle& data) {
    std::vector<AblationRow> out;
    auto run_one = [&](const std::string& name, const TrainConfig& cfg) {
        auto pipeline = run_pipeline(cfg, data);
        auto ev = evaluate_system(cfg, data, pipeline);
        out.push_back({name, ev.report.transfer_acc, ev.report.bleu_score, cfg.seed});
    };
    TrainConfig full = base;
    full.out_dir = base.out_dir + "/ablation/full";
    run_one("full", full);
    for (const auto& row : ablation_rows()) {
        TrainConfig cfg = base;
        cfg.out_dir = base.out_dir + "/ablation/" + row.dir_key;
        row.apply(cfg);
        run_one(row.display, cfg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fig. 4 protocol: ACC while one weight scans {0, 0.1, ..., 0.5}

inline const std::vector<std::string>& sweepable_params() {
    static const std::vector<std::string> p = {"lambda1", "lambda2", "lambda3", "lambda4",
                                               "theta1", "theta2", "theta3", "theta4"};
    return p;
}

inline std::vector<double> sweep_grid() { return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}; }

inline std::vector<SweepRow> sensitivity_sweep(const TrainConfig& base, const DataBundle& data,
                                               const std::string& param) {
    bool known = false;
    for (const auto& p : sweepable_params()) known = known || p == param;
    if (!known) fail("config", "unknown sweep parameter '" + param + "'");
    std::vector<SweepRow> rows;
    for (const double value : sweep_grid()) {
        TrainConfig cfg = base;
        set_config_key(cfg, param, detail::format_double(value));
        cfg.out_dir = base.out_dir + "/sweep/" + param + "_" + std::to_string(rows.size());
        auto pipeline = run_pipeline(cfg, data);
        auto ev = evaluate_system(cfg, data, pipeline);
        rows.push_back({param, value, ev.report.transfer_acc, ev.report.bleu_score, cfg.seed});
    }
    return rows;
}

}  // namespace amst
