#pragma once

#include "amst/corpus.hpp"
#include "amst/nn.hpp"

#include <vector>

namespace amst {

struct CnnConfig {
    int embed_dim{64};
    int channels{32};
    std::vector<int> widths{1, 2, 3};
};

// Convolutional text classifier over token embeddings: one linear filter
// bank per window width, ReLU, max-over-time pooling, concat, 2-way softmax
// head. Filter widths longer than the input contribute zero features.
class CnnSentimentDiscriminator {
public:
    CnnSentimentDiscriminator(int vocab_size, std::uint64_t vocab_hash, const CnnConfig& cfg,
                              std::uint64_t seed)
        : cfg_(cfg), vocab_size_(vocab_size), vocab_hash_(vocab_hash) {
        Rng rng(seed);
        emb_ = Embedding(reg_, "emb", vocab_size, cfg.embed_dim, rng);
        for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
            filters_.emplace_back(reg_, "conv" + std::to_string(cfg.widths[i]),
                                  cfg.widths[i] * cfg.embed_dim, cfg.channels, rng);
        }
        out_ = Linear(reg_, "out", cfg.channels * static_cast<int>(cfg.widths.size()), 2, rng);
    }

    // rows: N x embed_dim token representations (gold embeddings or soft
    // expected embeddings); returns 1 x 2 logits.
    Var logits_from_rows(const Var& rows) const {
        const auto n = rows->rows();
        if (n < 1) fail("cnn", "empty input");
        std::vector<Var> pooled;
        for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
            const auto w = static_cast<Eigen::Index>(cfg_.widths[i]);
            if (n < w) {
                pooled.push_back(constant(Mat::Zero(1, cfg_.channels)));
                continue;
            }
            std::vector<Var> shifted;
            shifted.reserve(static_cast<std::size_t>(w));
            for (Eigen::Index j = 0; j < w; ++j) {
                shifted.push_back(slice_rows(rows, j, n - w + 1));
            }
            Var windows = w == 1 ? shifted[0] : concat_cols(shifted);
            pooled.push_back(maxpool_cols(relu_(filters_[i](windows))));
        }
        return out_(concat_cols(pooled));
    }

    Var logits_from_ids(const std::vector<int>& ids) const {
        if (ids.empty()) fail("cnn", "empty input");
        return logits_from_rows(emb_.rows(ids));
    }

    Label classify(const std::vector<int>& ids) const {
        Var logits = logits_from_ids(ids);
        return logits->val(0, 1) > logits->val(0, 0) ? Label::positive : Label::negative;
    }

    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    const Embedding& embedding() const { return emb_; }
    const CnnConfig& config() const { return cfg_; }
    int vocab_size() const { return vocab_size_; }
    std::uint64_t vocab_hash() const { return vocab_hash_; }

    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

private:
    CnnConfig cfg_;
    int vocab_size_;
    std::uint64_t vocab_hash_;
    ParamRegistry reg_;
    Embedding emb_;
    std::vector<Linear> filters_;
    Linear out_;
    bool trained_{false};
};

}  // namespace amst
