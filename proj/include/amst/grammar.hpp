#pragma once

#include "amst/corpus.hpp"
#include "amst/rng.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace amst {

// Template grammar that plants sentiment tokens at known positions. The
// positive and negative lexicons are index-paired antonyms (positive[k] is
// the flip of negative[k]), and the planted word index is a deterministic
// function of the template, the slot ordinal, and the anchoring filler word.
// That keeps masked originals inferable from the visible content, which is
// what makes exact reconstruction and transfer references possible.

struct SyntheticGrammar {
    enum class SlotKind { literal, filler, sentiment };

    struct Piece {
        SlotKind kind;
        std::string word;  // literal text when kind == literal
    };

    struct Template {
        std::vector<Piece> pieces;
    };

    std::vector<Template> templates;
    std::vector<std::string> positive;
    std::vector<std::string> negative;
    std::vector<std::string> filler;
    std::uint64_t seed{0};

    std::size_t lexicon_pairs() const { return positive.size(); }
};

// One generated sentence plus its oracle annotations.
struct AnnotatedSentence {
    LabeledSentence sentence;
    std::vector<std::size_t> planted;        // positions of planted sentiment tokens
    std::vector<Polarity> planted_polarity;  // parallel to planted; equals sentence label

    bool has_oracle() const { return !planted.empty(); }
};

namespace detail {

inline SyntheticGrammar::Template parse_template_line(const std::string& text) {
    SyntheticGrammar::Template t;
    for (const auto& tok : tokenize(text)) {
        if (tok == "{sent}") {
            t.pieces.push_back({SyntheticGrammar::SlotKind::sentiment, ""});
        } else if (tok == "{fill}") {
            t.pieces.push_back({SyntheticGrammar::SlotKind::filler, ""});
        } else {
            t.pieces.push_back({SyntheticGrammar::SlotKind::literal, tok});
        }
    }
    return t;
}

}  // namespace detail

inline void validate_grammar(const SyntheticGrammar& g) {
    if (g.templates.empty()) fail("grammar", "no templates");
    if (g.positive.empty() || g.negative.empty()) fail("grammar", "empty sentiment lexicon");
    if (g.filler.empty()) fail("grammar", "empty filler lexicon");
    if (g.positive.size() != g.negative.size()) {
        fail("grammar", "positive and negative lexicons must pair up one-to-one");
    }
    std::set<std::string> pos(g.positive.begin(), g.positive.end());
    std::set<std::string> neg(g.negative.begin(), g.negative.end());
    std::set<std::string> fil(g.filler.begin(), g.filler.end());
    if (pos.size() != g.positive.size() || neg.size() != g.negative.size()) {
        fail("grammar", "duplicate words inside a sentiment lexicon");
    }
    for (const auto& w : g.positive) {
        if (neg.count(w)) fail("grammar", "lexicons overlap on '" + w + "'");
        if (fil.count(w)) fail("grammar", "filler lexicon overlaps sentiment word '" + w + "'");
    }
    for (const auto& w : g.negative) {
        if (fil.count(w)) fail("grammar", "filler lexicon overlaps sentiment word '" + w + "'");
    }
    for (const auto& t : g.templates) {
        bool has_sent = false;
        for (const auto& p : t.pieces) {
            if (p.kind == SyntheticGrammar::SlotKind::sentiment) has_sent = true;
            if (p.kind == SyntheticGrammar::SlotKind::literal && (pos.count(p.word) || neg.count(p.word))) {
                fail("grammar", "template literal '" + p.word + "' collides with a sentiment lexicon");
            }
        }
        if (!has_sent) fail("grammar", "every template needs at least one {SENT} slot");
    }
}

// Grammar spec file: flat key-value lines. Repeated `template =` lines add
// templates; lexicons are whitespace-separated word lists.
//
//   seed = 42
//   template = the {FILL} was {SENT}
//   positive = tasty friendly ...
//   negative = stale rude ...
//   filler = food service ...
inline SyntheticGrammar load_grammar(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("io", "cannot open grammar file: " + path);
    SyntheticGrammar g;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        if (tokenize(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail("grammar", "line " + std::to_string(line_no) + ": expected key = value");
        }
        auto keys = tokenize(line.substr(0, eq));
        if (keys.size() != 1) {
            fail("grammar", "line " + std::to_string(line_no) + ": malformed key");
        }
        const std::string key = keys[0];
        const std::string value = line.substr(eq + 1);
        if (key == "seed") {
            g.seed = std::stoull(tokenize(value).at(0));
        } else if (key == "template") {
            g.templates.push_back(detail::parse_template_line(value));
        } else if (key == "positive") {
            for (const auto& w : tokenize(value)) g.positive.push_back(w);
        } else if (key == "negative") {
            for (const auto& w : tokenize(value)) g.negative.push_back(w);
        } else if (key == "filler") {
            for (const auto& w : tokenize(value)) g.filler.push_back(w);
        } else {
            fail("grammar", "line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    validate_grammar(g);
    return g;
}

inline void save_grammar(const SyntheticGrammar& g, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("io", "cannot write grammar file: " + path);
    out << "seed = " << g.seed << '\n';
    for (const auto& t : g.templates) {
        out << "template =";
        for (const auto& p : t.pieces) {
            out << ' ';
            switch (p.kind) {
                case SyntheticGrammar::SlotKind::literal: out << p.word; break;
                case SyntheticGrammar::SlotKind::filler: out << "{FILL}"; break;
                case SyntheticGrammar::SlotKind::sentiment: out << "{SENT}"; break;
            }
        }
        out << '\n';
    }
    auto dump = [&out](const char* key, const std::vector<std::string>& words) {
        out << key << " =";
        for (const auto& w : words) out << ' ' << w;
        out << '\n';
    };
    dump("positive", g.positive);
    dump("negative", g.negative);
    dump("filler", g.filler);
}

namespace detail {

// Index of the filler slot anchoring a {SENT} slot: nearest preceding
// {FILL}, else nearest following, else none.
inline std::optional<std::size_t> anchor_filler(const SyntheticGrammar::Template& t,
                                                std::size_t sent_piece) {
    std::optional<std::size_t> before;
    for (std::size_t i = 0; i < t.pieces.size(); ++i) {
        if (t.pieces[i].kind != SyntheticGrammar::SlotKind::filler) continue;
        if (i < sent_piece) before = i;
        else if (!before) return i;
    }
    if (before) return before;
    return std::nullopt;
}

}  // namespace detail

// Deterministic given g.seed. Labels are balanced in blocks of two, so the
// corpus is within one sentence of an exact 50/50 split.
inline std::vector<AnnotatedSentence> generate_synthetic_corpus(const SyntheticGrammar& g,
                                                                std::size_t count) {
    validate_grammar(g);
    if (count < 1) fail("grammar", "count must be >= 1");
    Rng rng(g.seed);
    const std::size_t K = g.lexicon_pairs();

    std::vector<AnnotatedSentence> out;
    out.reserve(count);
    Label block[2] = {Label::negative, Label::positive};
    for (std::size_t i = 0; i < count; ++i) {
        if (i % 2 == 0) {
            const bool swap = rng.coin();
            block[0] = swap ? Label::positive : Label::negative;
            block[1] = swap ? Label::negative : Label::positive;
        }
        const Label label = block[i % 2];
        const std::size_t ti = rng.below(g.templates.size());
        const auto& t = g.templates[ti];

        // Draw all filler choices up front so anchors are resolvable.
        std::unordered_map<std::size_t, std::size_t> filler_choice;  // piece index -> lexicon index
        for (std::size_t p = 0; p < t.pieces.size(); ++p) {
            if (t.pieces[p].kind == SyntheticGrammar::SlotKind::filler) {
                filler_choice[p] = rng.below(g.filler.size());
            }
        }

        AnnotatedSentence a;
        a.sentence.label = label;
        std::size_t sent_ordinal = 0;
        for (std::size_t p = 0; p < t.pieces.size(); ++p) {
            const auto& piece = t.pieces[p];
            switch (piece.kind) {
                case SyntheticGrammar::SlotKind::literal:
                    a.sentence.tokens.push_back(piece.word);
                    break;
                case SyntheticGrammar::SlotKind::filler:
                    a.sentence.tokens.push_back(g.filler[filler_choice[p]]);
                    break;
                case SyntheticGrammar::SlotKind::sentiment: {
                    std::size_t anchor_choice = 0;
                    if (auto ap = detail::anchor_filler(t, p)) anchor_choice = filler_choice[*ap];
                    const std::size_t k = (ti * 7 + sent_ordinal * 11 + anchor_choice) % K;
                    const auto& word = label == Label::positive ? g.positive[k] : g.negative[k];
                    a.planted.push_back(a.sentence.tokens.size());
                    a.planted_polarity.push_back(polarity_of(label));
                    a.sentence.tokens.push_back(word);
                    ++sent_ordinal;
                    break;
                }
            }
        }
        out.push_back(std::move(a));
    }
    return out;
}

// ---------------------------------------------------------------------------
// oracle utilities

// Word-level sentiment lookup derived from the grammar lexicons.
class GrammarOracle {
public:
    explicit GrammarOracle(const SyntheticGrammar& g) {
        for (std::size_t k = 0; k < g.positive.size(); ++k) {
            entries_[g.positive[k]] = {Label::positive, k};
            entries_[g.negative[k]] = {Label::negative, k};
        }
        positive_ = g.positive;
        negative_ = g.negative;
    }

    std::optional<Label> word_polarity(const std::string& w) const {
        auto it = entries_.find(w);
        if (it == entries_.end()) return std::nullopt;
        return it->second.first;
    }

    // Sentence label by lexicon majority; nullopt when no sentiment word or a tie.
    std::optional<Label> judge(const std::vector<std::string>& tokens) const {
        int pos = 0;
        int neg = 0;
        for (const auto& t : tokens) {
            if (auto l = word_polarity(t)) {
                (*l == Label::positive ? pos : neg) += 1;
            }
        }
        if (pos > neg) return Label::positive;
        if (neg > pos) return Label::negative;
        return std::nullopt;
    }

    // The paired antonym with the requested polarity.
    const std::string& flip_to(const std::string& word, Label target) const {
        auto it = entries_.find(word);
        if (it == entries_.end()) fail("oracle", "word '" + word + "' is not in the lexicons");
        const std::size_t k = it->second.second;
        return target == Label::positive ? positive_[k] : negative_[k];
    }

    // Reference transfer output: planted tokens swapped to the target lexicon.
    std::vector<std::string> reference(const AnnotatedSentence& a, Label target) const {
        std::vector<std::string> out = a.sentence.tokens;
        for (const std::size_t p : a.planted) {
            out[p] = flip_to(out[p], target);
        }
        return out;
    }

private:
    std::unordered_map<std::string, std::pair<Label, std::size_t>> entries_;
    std::vector<std::string> positive_;
    std::vector<std::string> negative_;
};

// Per-token polarity targets: planted positions carry the sentence polarity,
// all other positions are neutral.
inline std::vector<Polarity> gold_polarities(const AnnotatedSentence& a) {
    std::vector<Polarity> out(a.sentence.size(), Polarity::neutral);
    for (std::size_t i = 0; i < a.planted.size(); ++i) {
        out[a.planted[i]] = a.planted_polarity[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// annotation round-trip (JSONL, one record per sentence)

inline void save_annotations(const std::vector<AnnotatedSentence>& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("io", "cannot write annotations file: " + path);
    for (const auto& a : corpus) {
        nlohmann::json planted = nlohmann::json::array();
        for (std::size_t i = 0; i < a.planted.size(); ++i) {
            planted.push_back({{"pos", a.planted[i]}, {"polarity", to_string(a.planted_polarity[i])}});
        }
        nlohmann::json j{{"text", join_tokens(a.sentence.tokens)},
                         {"label", index_of(a.sentence.label)},
                         {"planted", planted}};
        out << j.dump() << '\n';
    }
}

inline std::vector<AnnotatedSentence> load_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("io", "cannot open annotations file: " + path);
    std::vector<AnnotatedSentence> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (tokenize(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) fail("io", "annotations line " + std::to_string(line_no) + ": bad JSON");
        AnnotatedSentence a;
        a.sentence.tokens = tokenize(j.at("text").get<std::string>());
        a.sentence.label = j.at("label").get<int>() == 1 ? Label::positive : Label::negative;
        for (const auto& p : j.at("planted")) {
            a.planted.push_back(p.at("pos").get<std::size_t>());
            const std::string pol = p.at("polarity").get<std::string>();
            a.planted_polarity.push_back(pol == "positive" ? Polarity::positive
                                         : pol == "neutral" ? Polarity::neutral
                                                            : Polarity::negative);
        }
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace amst
