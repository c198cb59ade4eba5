// amst: command-line driver for the adaptive-masking sentiment-transfer
// toolkit. One subcommand per invocation; config file + --set overrides;
// artifacts land under the output directory.

#include "amst/amst.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace amst;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

void add_common(CLI::App* cmd, GlobalArgs& g) {
    cmd->add_option("-c,--config", g.config_path, "flat key = value config file");
    cmd->add_option("-s,--set", g.overrides, "override a config key (key=value), repeatable");
    cmd->add_option("-o,--out", g.out_dir, "output directory for artifacts");
}

TrainConfig make_config(const GlobalArgs& g) {
    TrainConfig cfg;
    if (const char* env = std::getenv("AMST_OUTPUT_DIR"); env != nullptr && *env != '\0') {
        cfg.out_dir = env;
    }
    if (!g.config_path.empty()) load_config_file(cfg, g.config_path);
    apply_overrides(cfg, g.overrides);
    if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
    cfg.validate();
    std::cout << "seed: " << cfg.seed << "\n";
    fs::create_directories(cfg.out_dir);
    save_config(cfg, (fs::path(cfg.out_dir) / "config.effective.txt").string());
    return cfg;
}

std::string normalize_param(std::string p) {
    auto replace_prefix = [&p](const char* from, const char* to) {
        const std::size_t n = std::string(from).size();
        if (p.rfind(from, 0) == 0) p = to + p.substr(n);
    };
    replace_prefix("\xce\xbb", "lambda");  // λ1 -> lambda1
    replace_prefix("\xce\xb8", "theta");   // θ1 -> theta1
    replace_prefix("\xcf\x91", "theta");   // ϑ1 -> theta1
    return p;
}

int cmd_prepare_data(const TrainConfig& cfg) {
    if (cfg.mode != "synthetic") {
        fail("config", "prepare-data generates synthetic corpora; real datasets are used in place");
    }
    DataBundle data = prepare_data(cfg);
    const fs::path out(cfg.out_dir);
    save_grammar(*data.grammar, (out / "grammar.txt").string());
    auto dump_split = [&](const std::vector<AnnotatedSentence>& split, const std::string& name) {
        std::vector<LabeledSentence> plain;
        plain.reserve(split.size());
        for (const auto& a : split) plain.push_back(a.sentence);
        save_tsv(plain, (out / (name + ".tsv")).string());
        save_annotations(split, (out / (name + ".annotations.jsonl")).string());
    };
    dump_split(data.train, "train");
    dump_split(data.valid, "valid");
    dump_split(data.test, "test");
    std::ofstream vf(out / "vocab.txt");
    for (const auto& t : data.vocab.id_to_token()) vf << t << '\n';
    std::cout << "train: " << data.train.size() << "  valid: " << data.valid.size()
              << "  test: " << data.test.size() << "  vocab: " << data.vocab.size() << "\n";
    return 0;
}

int cmd_stage(const TrainConfig& cfg, PipelineStage from, PipelineStage to) {
    DataBundle data = prepare_data(cfg);
    auto result = run_pipeline(cfg, data, from, to);
    std::ofstream rep(fs::path(cfg.out_dir) / "pipeline_report.json");
    rep << result.report(cfg.seed, config_digest(cfg)).dump(2) << '\n';
    for (const auto& s : result.stages) {
        std::cout << s.name << ": checkpoint " << s.checkpoint_path << " digest "
                  << hex64(s.checkpoint_digest) << "\n";
    }
    if (from == PipelineStage::pretrain) {
        std::cout << "mask pretrain accuracy: " << result.mask_pretrain_accuracy << "\n"
                  << "clf(S) accuracy: " << result.clf_s_accuracy << "\n";
    }
    return 0;
}

int cmd_transfer(const TrainConfig& cfg, const std::string& input,
                 const std::string& input_format, const std::string& target_spec,
                 const std::string& output, bool sample, double temperature) {
    DataBundle data = prepare_data(cfg);
    auto pipeline = load_pipeline(cfg, data);

    std::vector<LabeledSentence> inputs;
    if (input.empty()) {
        for (const auto& a : data.test) inputs.push_back(a.sentence);
    } else {
        auto r = load_dataset(input, parse_format(input_format));
        if (!r.errors.empty()) {
            fail("data", input + ": line " + std::to_string(r.errors.front().line) + ": " +
                             r.errors.front().message);
        }
        if (r.sentences.empty()) fail("data", "no usable records in " + input);
        inputs = std::move(r.sentences);
        assign_token_ids(inputs, data.vocab);
    }

    const std::string out_path =
        output.empty() ? (fs::path(cfg.out_dir) / "transfers.jsonl").string() : output;
    std::ofstream out(out_path);
    if (!out) fail("io", "cannot write " + out_path);
    Rng rng(cfg.seed ^ 0x7full);
    DecodeOptions decode;
    decode.sample = sample;
    decode.temperature = temperature;
    for (const auto& x : inputs) {
        Label target;
        if (target_spec == "flip") target = flip(x.label);
        else if (target_spec == "positive") target = Label::positive;
        else if (target_spec == "negative") target = Label::negative;
        else fail("config", "target must be positive, negative, or flip");
        auto pair = threshold_split(forward_mask_probs(*pipeline.masker, x), SplitMode::hard,
                                    pipeline.masker->tau());
        auto masked_ids = render_masked(x, pair, data.vocab);
        std::vector<std::string> masked_tokens;
        masked_tokens.reserve(masked_ids.size());
        for (const int id : masked_ids) masked_tokens.push_back(data.vocab.token_of(id));
        auto result = transfer(*pipeline.mlm, x, pair, target, data.vocab, decode, &rng);
        nlohmann::json j{{"source", join_tokens(x.tokens)},
                         {"masked", join_tokens(masked_tokens)},
                         {"target_label", index_of(target)},
                         {"output", join_tokens(result.tokens)}};
        out << j.dump() << '\n';
    }
    std::cout << "wrote " << inputs.size() << " transfers to " << out_path << "\n";
    return 0;
}

int cmd_evaluate(const TrainConfig& cfg, const std::string& report_path) {
    DataBundle data = prepare_data(cfg);
    auto pipeline = load_pipeline(cfg, data);
    auto ev = evaluate_system(cfg, data, pipeline);
    const std::string out_path =
        report_path.empty() ? (fs::path(cfg.out_dir) / "eval_report.json").string() : report_path;
    ev.report.save(out_path);
    std::cout << "ACC: " << ev.report.transfer_acc << "\nBLEU: " << ev.report.bleu_score
              << "\nmask P/R: " << ev.report.mask_precision << "/" << ev.report.mask_recall
              << "\nreconstruction: " << ev.report.reconstruction_rate << "\nreport: " << out_path
              << "\n";
    return 0;
}

int cmd_ablate(const TrainConfig& cfg) {
    DataBundle data = prepare_data(cfg);
    auto rows = ablation_suite(cfg, data);
    const auto csv = (fs::path(cfg.out_dir) / "ablation.csv").string();
    write_table_csv(ablation_as_table(rows), csv);
    EvalReport report;
    report.seed = cfg.seed;
    report.config_digest = config_digest(cfg);
    report.ablation = rows;
    report.save((fs::path(cfg.out_dir) / "ablation_report.json").string());
    for (const auto& r : rows) {
        std::cout << r.name << ": ACC " << r.acc << " BLEU " << r.bleu << "\n";
    }
    std::cout << "table: " << csv << "\n";
    return 0;
}

int cmd_sweep(const TrainConfig& cfg, const std::string& raw_param) {
    const std::string param = normalize_param(raw_param);
    DataBundle data = prepare_data(cfg);
    auto rows = sensitivity_sweep(cfg, data, param);
    const auto csv = (fs::path(cfg.out_dir) / ("sweep_" + param + ".csv")).string();
    write_table_csv(rows, csv);
    for (const auto& r : rows) {
        std::cout << r.param << " = " << r.value << ": ACC " << r.acc << "\n";
    }
    std::cout << "table: " << csv << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive-masking sentiment transfer toolkit"};
    app.require_subcommand(1);

    GlobalArgs g;
    std::string input;
    std::string input_format = "tsv";
    std::string target = "flip";
    std::string output;
    std::string report_path;
    std::string sweep_param;
    bool sample = false;
    double temperature = 1.0;
    int from_stage = 1;

    auto* prepare = app.add_subcommand("prepare-data", "generate the synthetic oracle corpus");
    add_common(prepare, g);
    auto* pretrain =
        app.add_subcommand("pretrain", "pretrain the attention mask classifier and clf(S)");
    add_common(pretrain, g);
    auto* train_mask = app.add_subcommand("train-mask", "adversarial masking training");
    add_common(train_mask, g);
    auto* train_mlm = app.add_subcommand("train-mlm", "Senti-MLM stages 1-3");
    add_common(train_mlm, g);
    train_mlm->add_option("--from-stage", from_stage, "resume from stage 1, 2, or 3")
        ->check(CLI::Range(1, 3));
    auto* transfer_cmd = app.add_subcommand("transfer", "rewrite sentences to a target sentiment");
    add_common(transfer_cmd, g);
    transfer_cmd->add_option("--input", input, "input dataset (defaults to the test split)");
    transfer_cmd->add_option("--input-format", input_format, "tsv or jsonl");
    transfer_cmd->add_option("--target", target, "positive, negative, or flip");
    transfer_cmd->add_option("--output", output, "output JSONL path");
    transfer_cmd->add_flag("--sample", sample, "temperature sampling instead of greedy decode");
    transfer_cmd->add_option("--temperature", temperature, "sampling temperature");
    auto* evaluate = app.add_subcommand("evaluate", "metrics on the test split");
    add_common(evaluate, g);
    evaluate->add_option("--report", report_path, "report JSON path");
    auto* ablate = app.add_subcommand("ablate", "full model vs the five loss ablations");
    add_common(ablate, g);
    auto* sweep = app.add_subcommand("sweep", "sensitivity grid for one loss weight");
    add_common(sweep, g);
    sweep->add_option("--param", sweep_param, "lambda1..lambda4 or theta1..theta4")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const TrainConfig cfg = make_config(g);
        if (prepare->parsed()) return cmd_prepare_data(cfg);
        if (pretrain->parsed()) {
            return cmd_stage(cfg, PipelineStage::pretrain, PipelineStage::pretrain);
        }
        if (train_mask->parsed()) {
            return cmd_stage(cfg, PipelineStage::adversarial, PipelineStage::adversarial);
        }
        if (train_mlm->parsed()) {
            const auto from = from_stage == 1   ? PipelineStage::mlm_stage1
                              : from_stage == 2 ? PipelineStage::mlm_stage2
                                                : PipelineStage::mlm_stage3;
            return cmd_stage(cfg, from, PipelineStage::mlm_stage3);
        }
        if (transfer_cmd->parsed()) {
            return cmd_transfer(cfg, input, input_format, target, output, sample, temperature);
        }
        if (evaluate->parsed()) return cmd_evaluate(cfg, report_path);
        if (ablate->parsed()) return cmd_ablate(cfg);
        if (sweep->parsed()) return cmd_sweep(cfg, sweep_param);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
