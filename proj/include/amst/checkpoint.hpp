#pragma once

#include "amst/nn.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace amst {

// Versioned binary checkpoint container: magic, schema tag, vocabulary hash,
// string metadata, then named parameter tensors in registry order. Loaders
// refuse schema or vocabulary mismatches instead of silently misreading.

inline constexpr char kCheckpointMagic[8] = {'A', 'M', 'S', 'T', 'C', 'K', 'P', '1'};

struct Checkpoint {
    std::string schema;
    std::uint64_t vocab_hash{0};
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Mat>> tensors;

    const Mat* find(const std::string& name) const {
        for (const auto& [n, m] : tensors) {
            if (n == name) return &m;
        }
        return nullptr;
    }

    std::string meta_at(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) fail("checkpoint", "missing metadata key: " + key);
        return it->second;
    }
};

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_str(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) fail("checkpoint", "truncated file");
    return v;
}

inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) fail("checkpoint", "truncated file");
    return v;
}

inline std::string read_str(std::istream& in) {
    const auto n = read_u32(in);
    if (n > (1u << 20)) fail("checkpoint", "corrupt string length");
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n)) fail("checkpoint", "truncated file");
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::string& schema,
                            std::uint64_t vocab_hash,
                            const std::map<std::string, std::string>& meta,
                            const ParamRegistry& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("io", "cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_str(out, schema);
    detail::write_u64(out, vocab_hash);
    detail::write_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        detail::write_str(out, k);
        detail::write_str(out, v);
    }
    detail::write_u32(out, static_cast<std::uint32_t>(params.all().size()));
    for (const auto& p : params.all()) {
        detail::write_str(out, p.name);
        detail::write_u64(out, static_cast<std::uint64_t>(p.var->rows()));
        detail::write_u64(out, static_cast<std::uint64_t>(p.var->cols()));
        out.write(reinterpret_cast<const char*>(p.var->val.data()),
                  static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.var->val.size())));
    }
    if (!out) fail("io", "failed writing checkpoint: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("io", "cannot open checkpoint: " + path);
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        fail("checkpoint", "not a checkpoint file (bad magic): " + path);
    }
    Checkpoint c;
    c.schema = detail::read_str(in);
    c.vocab_hash = detail::read_u64(in);
    const auto meta_count = detail::read_u32(in);
    for (std::uint32_t i = 0; i < meta_count; ++i) {
        auto k = detail::read_str(in);
        auto v = detail::read_str(in);
        c.meta.emplace(std::move(k), std::move(v));
    }
    const auto tensor_count = detail::read_u32(in);
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        auto name = detail::read_str(in);
        const auto rows = static_cast<Eigen::Index>(detail::read_u64(in));
        const auto cols = static_cast<Eigen::Index>(detail::read_u64(in));
        if (rows < 0 || cols < 0 || rows * cols > (1ll << 28)) {
            fail("checkpoint", "corrupt tensor header in " + path);
        }
        Mat m(rows, cols);
        if (!in.read(reinterpret_cast<char*>(m.data()),
                     static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())))) {
            fail("checkpoint", "truncated tensor data in " + path);
        }
        c.tensors.emplace_back(std::move(name), std::move(m));
    }
    return c;
}

// Restores parameters by name; refuses schema/vocabulary mismatches and any
// missing or misshapen tensor.
inline void load_into(const Checkpoint& c, const std::string& expected_schema,
                      std::uint64_t expected_vocab_hash, ParamRegistry& params) {
    if (c.schema != expected_schema) {
        fail("checkpoint-schema",
             "checkpoint carries schema '" + c.schema + "', expected '" + expected_schema + "'");
    }
    if (c.vocab_hash != expected_vocab_hash) {
        fail("checkpoint-vocab", "checkpoint was built against a different vocabulary");
    }
    for (const auto& p : params.all()) {
        const Mat* m = c.find(p.name);
        if (m == nullptr) fail("checkpoint", "missing tensor: " + p.name);
        if (m->rows() != p.var->rows() || m->cols() != p.var->cols()) {
            fail("checkpoint", "tensor shape mismatch for " + p.name);
        }
        p.var->val = *m;
    }
}

// Several registries in one file, tensor names prefixed per part; a stage
// checkpoint is one file regardless of how many sub-models it holds.
struct CheckpointPart {
    std::string prefix;
    const ParamRegistry* params;
};

inline void save_checkpoint_multi(const std::string& path, const std::string& schema,
                                  std::uint64_t vocab_hash,
                                  const std::map<std::string, std::string>& meta,
                                  const std::vector<CheckpointPart>& parts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("io", "cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_str(out, schema);
    detail::write_u64(out, vocab_hash);
    detail::write_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        detail::write_str(out, k);
        detail::write_str(out, v);
    }
    std::uint32_t total = 0;
    for (const auto& part : parts) total += static_cast<std::uint32_t>(part.params->all().size());
    detail::write_u32(out, total);
    for (const auto& part : parts) {
        for (const auto& p : part.params->all()) {
            detail::write_str(out, part.prefix + p.name);
            detail::write_u64(out, static_cast<std::uint64_t>(p.var->rows()));
            detail::write_u64(out, static_cast<std::uint64_t>(p.var->cols()));
            out.write(reinterpret_cast<const char*>(p.var->val.data()),
                      static_cast<std::streamsize>(sizeof(double) *
                                                   static_cast<std::size_t>(p.var->val.size())));
        }
    }
    if (!out) fail("io", "failed writing checkpoint: " + path);
}

struct MutableCheckpointPart {
    std::string prefix;
    ParamRegistry* params;
};

inline void load_into_multi(const Checkpoint& c, const std::string& expected_schema,
                            std::uint64_t expected_vocab_hash,
                            const std::vector<MutableCheckpointPart>& parts) {
    if (c.schema != expected_schema) {
        fail("checkpoint-schema",
             "checkpoint carries schema '" + c.schema + "', expected '" + expected_schema + "'");
    }
    if (c.vocab_hash != expected_vocab_hash) {
        fail("checkpoint-vocab", "checkpoint was built against a different vocabulary");
    }
    for (const auto& part : parts) {
        for (const auto& p : part.params->all()) {
            const Mat* m = c.find(part.prefix + p.name);
            if (m == nullptr) fail("checkpoint", "missing tensor: " + part.prefix + p.name);
            if (m->rows() != p.var->rows() || m->cols() != p.var->cols()) {
                fail("checkpoint", "tensor shape mismatch for " + part.prefix + p.name);
            }
            p.var->val = *m;
        }
    }
}

inline std::uint64_t digest_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("io", "cannot open file for digest: " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        h = fnv1a_bytes(buf, static_cast<std::size_t>(in.gcount()), h);
        if (!in) break;
    }
    return h;
}

}  // namespace amst
