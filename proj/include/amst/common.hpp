#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace amst {

using Mat = Eigen::MatrixXd;
using VecD = std::vector<double>;

// Binary sentence-level sentiment label.
enum class Label : int { negative = 0, positive = 1 };

// Token-level polarity; masked sentiment tokens carry the sentence label,
// everything else is neutral.
enum class Polarity : int { negative = 0, neutral = 1, positive = 2 };

inline Label flip(Label l) {
    return l == Label::positive ? Label::negative : Label::positive;
}

inline int index_of(Label l) { return static_cast<int>(l); }
inline int index_of(Polarity p) { return static_cast<int>(p); }

inline Polarity polarity_of(Label l) {
    return l == Label::positive ? Polarity::positive : Polarity::negative;
}

inline std::string to_string(Label l) {
    return l == Label::positive ? "positive" : "negative";
}

inline std::string to_string(Polarity p) {
    switch (p) {
        case Polarity::negative: return "negative";
        case Polarity::neutral: return "neutral";
        default: return "positive";
    }
}

// Errors carry a short machine-parseable category plus a human message.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(category + ": " + message), category_(std::move(category)) {}

    const std::string& category() const { return category_; }

private:
    std::string category_;
};

[[noreturn]] inline void fail(const std::string& category, const std::string& message) {
    throw Error(category, message);
}

// FNV-1a, used for vocabulary hashes and checkpoint/report digests.
inline std::uint64_t fnv1a_bytes(const void* data, std::size_t n,
                                 std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a_bytes(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Probabilities are clamped inside logs; 0*log 0 := 0 throughout.
inline constexpr double kProbFloor = 1e-12;

inline double safe_log(double p) {
    if (p < kProbFloor) p = kProbFloor;
    if (p > 1.0) p = 1.0;
    return std::log(p);
}

// Entropy of a discrete distribution with the 0*log 0 = 0 convention.
inline double entropy(const VecD& probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

// Cross-entropy -sum_k t_k log y_k with clamped logs.
inline double cross_entropy(const VecD& target, const VecD& pred) {
    if (target.size() != pred.size()) fail("shape", "cross_entropy size mismatch");
    double ce = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i] > 0.0) ce -= target[i] * safe_log(pred[i]);
    }
    return ce;
}

inline double cross_entropy_onehot(const VecD& pred, std::size_t true_index) {
    if (true_index >= pred.size()) fail("shape", "cross_entropy_onehot index out of range");
    return -safe_log(pred[true_index]);
}

}  // namespace amst
