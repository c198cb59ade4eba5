#pragma once

#include "amst/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace amst {

// A tokenized sentence with a sentence-level sentiment label. token_ids are
// filled once a vocabulary exists (assign_token_ids).
struct LabeledSentence {
    std::vector<std::string> tokens;
    std::vector<int> token_ids;
    Label label{Label::negative};

    std::size_t size() const { return tokens.size(); }
};

// Lowercase + whitespace tokenization. Token positions are byte-exact slot
// positions for masking, so no further normalization happens here.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

class Vocabulary {
public:
    static constexpr int kPadId = 0;
    static constexpr int kUnkId = 1;
    static constexpr int kMaskId = 2;
    static constexpr int kNumSpecial = 3;

    Vocabulary() {
        for (const char* s : {"[pad]", "[unk]", "[mask]"}) push(s);
    }

    int add(const std::string& token) {
        auto it = token_to_id_.find(token);
        if (it != token_to_id_.end()) return it->second;
        return push(token);
    }

    std::optional<int> id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        if (it == token_to_id_.end()) return std::nullopt;
        return it->second;
    }

    int id_or_unk(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

    const std::string& token_of(int id) const {
        if (id < 0 || id >= static_cast<int>(id_to_token_.size())) {
            fail("vocab", "token id out of range: " + std::to_string(id));
        }
        return id_to_token_[static_cast<std::size_t>(id)];
    }

    int size() const { return static_cast<int>(id_to_token_.size()); }
    int content_size() const { return size() - kNumSpecial; }
    static bool is_special(int id) { return id < kNumSpecial; }

    const std::vector<std::string>& id_to_token() const { return id_to_token_; }

    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : id_to_token_) {
            h = fnv1a(t, h);
            h = fnv1a("\n", h);
        }
        return h;
    }

private:
    int push(const std::string& token) {
        const int id = static_cast<int>(id_to_token_.size());
        id_to_token_.push_back(token);
        token_to_id_.emplace(token, id);
        return id;
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

inline void assign_token_ids(LabeledSentence& s, const Vocabulary& v) {
    s.token_ids.resize(s.tokens.size());
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        s.token_ids[i] = v.id_or_unk(s.tokens[i]);
    }
}

inline void assign_token_ids(std::vector<LabeledSentence>& sentences, const Vocabulary& v) {
    for (auto& s : sentences) assign_token_ids(s, v);
}

// Tokens with corpus frequency >= min_count, ordered by frequency descending
// then lexicographic, after the three reserved specials.
inline Vocabulary build_vocabulary(const std::vector<LabeledSentence>& sentences, int min_count) {
    if (sentences.empty()) fail("vocab", "cannot build vocabulary from an empty corpus");
    if (min_count < 1) fail("vocab", "min_count must be >= 1");
    std::map<std::string, long> counts;
    for (const auto& s : sentences) {
        for (const auto& t : s.tokens) ++counts[t];
    }
    std::vector<std::pair<std::string, long>> entries(counts.begin(), counts.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [token, count] : entries) {
        if (count >= min_count) v.add(token);
    }
    return v;
}

// Normalized word-frequency vector of a sentence over the vocabulary.
// Entries for special tokens are zero; unknown tokens are excluded and the
// remaining mass renormalized.
struct BowDistribution {
    VecD probs;

    double sum() const {
        double s = 0.0;
        for (double p : probs) s += p;
        return s;
    }
};

inline BowDistribution bow_distribution(const LabeledSentence& x, const Vocabulary& v) {
    if (x.tokens.empty()) fail("bow", "empty sentence has no bag-of-words distribution");
    BowDistribution d;
    d.probs.assign(static_cast<std::size_t>(v.size()), 0.0);
    long in_vocab = 0;
    for (const auto& t : x.tokens) {
        const int id = v.id_or_unk(t);
        if (Vocabulary::is_special(id)) continue;
        d.probs[static_cast<std::size_t>(id)] += 1.0;
        ++in_vocab;
    }
    if (in_vocab == 0) fail("bow", "sentence has no in-vocabulary tokens");
    for (double& p : d.probs) p /= static_cast<double>(in_vocab);
    return d;
}

// ---------------------------------------------------------------------------
// dataset loading

enum class DataFormat { tsv, jsonl };

inline DataFormat parse_format(const std::string& s) {
    if (s == "tsv") return DataFormat::tsv;
    if (s == "jsonl") return DataFormat::jsonl;
    fail("config", "unknown dataset format: " + s);
}

struct RecordError {
    std::size_t line;
    std::string message;
};

struct LoadResult {
    std::vector<LabeledSentence> sentences;  // file order
    std::size_t empty_rejected{0};
    std::vector<RecordError> errors;
};

namespace detail {

inline std::optional<Label> parse_label_token(const std::string& raw) {
    if (raw == "0" || raw == "negative") return Label::negative;
    if (raw == "1" || raw == "positive") return Label::positive;
    return std::nullopt;
}

}  // namespace detail

// TSV: one record per line, `text<TAB>label`, label in {0,1} (1 = positive).
// JSONL: one object per line with string "text" and integer "label".
// Garbled labels produce record-level errors with line numbers; empty texts
// are rejected and counted.
inline LoadResult load_dataset(const std::string& path, DataFormat format) {
    std::ifstream in(path);
    if (!in) fail("io", "cannot open dataset file: " + path);
    LoadResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string text;
        std::optional<Label> label;
        if (format == DataFormat::tsv) {
            const auto tab = line.find_last_of('\t');
            if (tab == std::string::npos) {
                if (tokenize(line).empty()) {
                    ++result.empty_rejected;
                } else {
                    result.errors.push_back({line_no, "missing label column"});
                }
                continue;
            }
            text = line.substr(0, tab);
            label = detail::parse_label_token(line.substr(tab + 1));
            if (!label) {
                result.errors.push_back({line_no, "garbled label: '" + line.substr(tab + 1) + "'"});
                continue;
            }
        } else {
            if (tokenize(line).empty()) {
                ++result.empty_rejected;
                continue;
            }
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object()) {
                result.errors.push_back({line_no, "malformed JSON record"});
                continue;
            }
            if (!j.contains("text") || !j["text"].is_string()) {
                result.errors.push_back({line_no, "missing string field 'text'"});
                continue;
            }
            text = j["text"].get<std::string>();
            if (!j.contains("label")) {
                result.errors.push_back({line_no, "missing field 'label'"});
                continue;
            }
            const auto& jl = j["label"];
            if (jl.is_number_integer()) {
                const long v = jl.get<long>();
                if (v == 0) label = Label::negative;
                else if (v == 1) label = Label::positive;
            } else if (jl.is_string()) {
                label = detail::parse_label_token(jl.get<std::string>());
            }
            if (!label) {
                result.errors.push_back({line_no, "garbled label value"});
                continue;
            }
        }
        LabeledSentence s;
        s.tokens = tokenize(text);
        if (s.tokens.empty()) {
            ++result.empty_rejected;
            continue;
        }
        s.label = *label;
        result.sentences.push_back(std::move(s));
    }
    return result;
}

inline void save_tsv(const std::vector<LabeledSentence>& sentences, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("io", "cannot write dataset file: " + path);
    for (const auto& s : sentences) {
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            if (i) out << ' ';
            out << s.tokens[i];
        }
        out << '\t' << index_of(s.label) << '\n';
    }
}

inline void save_jsonl(const std::vector<LabeledSentence>& sentences, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("io", "cannot write dataset file: " + path);
    for (const auto& s : sentences) {
        std::string text;
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            if (i) text += ' ';
            text += s.tokens[i];
        }
        nlohmann::json j{{"text", text}, {"label", index_of(s.label)}};
        out << j.dump() << '\n';
    }
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

}  // namespace amst
