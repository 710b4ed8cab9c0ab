#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"

namespace ragdial {

struct DenseVector {
    std::vector<double> values;

    DenseVector() = default;
    explicit DenseVector(std::size_t dim) : values(dim, 0.0) {}
    explicit DenseVector(std::vector<double> v) : values(std::move(v)) {}

    std::size_t dim() const { return values.size(); }
    std::span<const double> span() const { return values; }
    double norm() const { return std::sqrt(detail::dot(values, values)); }
    bool operator==(const DenseVector&) const = default;
};

inline double dot(const DenseVector& a, const DenseVector& b) {
    if (a.dim() != b.dim()) throw InvalidArgument("dot: dimension mismatch");
    return detail::dot(a.span(), b.span());
}

/// One row per token, row-major.
class TokenMatrix {
public:
    TokenMatrix() = default;
    explicit TokenMatrix(std::size_t dim) : dim_(dim) {}

    std::size_t dim() const { return dim_; }
    std::size_t rows() const { return dim_ == 0 ? 0 : data_.size() / dim_; }
    bool empty() const { return data_.empty(); }

    std::span<const double> row(std::size_t i) const {
        return std::span<const double>(data_).subspan(i * dim_, dim_);
    }

    void push_back(std::span<const double> r) {
        if (r.size() != dim_) throw InvalidArgument("token matrix row has wrong dimension");
        data_.insert(data_.end(), r.begin(), r.end());
    }

    const std::vector<double>& data() const { return data_; }

private:
    std::size_t dim_ = 0;
    std::vector<double> data_;
};

/// Inverse document frequency ln(1 + N / df) over unigram and adjacent-bigram
/// features. Features absent from the corpus weigh 0: they cannot match any
/// passage and would only add collision noise.
class IdfTable {
public:
    IdfTable() = default;

    explicit IdfTable(const Corpus& corpus) : n_docs_(corpus.size()) {
        for (const auto& p : corpus.passages()) {
            auto toks = p.retrieval_tokens();
            std::vector<std::string> feats(toks.begin(), toks.end());
            for (std::size_t i = 0; i + 1 < toks.size(); ++i) feats.push_back(bigram_feature(toks[i], toks[i + 1]));
            std::sort(feats.begin(), feats.end());
            feats.erase(std::unique(feats.begin(), feats.end()), feats.end());
            for (auto& f : feats) ++df_[f];
        }
    }

    static std::string bigram_feature(const std::string& a, const std::string& b) { return a + '\x1f' + b; }

    double weight(const std::string& feature) const {
        if (n_docs_ == 0) return 1.0;
        auto it = df_.find(feature);
        if (it == df_.end()) return 0.0;
        return std::log(1.0 + static_cast<double>(n_docs_) / static_cast<double>(it->second));
    }

private:
    std::size_t n_docs_ = 0;
    std::unordered_map<std::string, std::size_t> df_;
};

struct EncoderConfig {
    std::size_t dim = 128;
    std::uint64_t seed = 0;
    bool bigrams = true;
    // Signed hash probes per feature; more probes lower the variance of
    // collisions between unrelated tokens.
    std::size_t probes = 3;
    std::shared_ptr<const IdfTable> idf;  // null: every feature weighs 1.0
};

namespace detail {

inline void add_feature(std::vector<double>& v, const std::string& feature, double weight,
                        const EncoderConfig& cfg) {
    const double scale = weight / std::sqrt(static_cast<double>(cfg.probes));
    for (std::size_t p = 0; p < cfg.probes; ++p) {
        std::uint64_t h = fnv1a(feature, cfg.seed * 0x9e3779b1ULL + p);
        std::size_t bucket = static_cast<std::size_t>(h % cfg.dim);
        double sign = (h >> 63) ? -1.0 : 1.0;
        v[bucket] += sign * scale;
    }
}

inline void normalize(std::vector<double>& v) {
    double n = std::sqrt(dot(v, v));
    if (n > 0.0)
        for (double& x : v) x /= n;
}

inline double gaussian(std::uint64_t seed, std::uint64_t counter) {
    double u1 = (uniform_pm1(seed, 2 * counter) + 1.0) / 2.0;
    double u2 = (uniform_pm1(seed, 2 * counter + 1) + 1.0) / 2.0;
    u1 = std::max(u1, 1e-300);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

} // namespace detail

/// Signed feature hashing of unigrams (and bigrams when enabled), IDF-weighted
/// when the config carries a table, L2-normalized. Empty input gives the zero vector.
inline DenseVector embed_hashed(const Tokens& tokens, const EncoderConfig& cfg) {
    if (cfg.dim < 8) throw InvalidArgument("encoder dimension must be at least 8");
    std::vector<double> v(cfg.dim, 0.0);
    auto idf = [&](const std::string& f) { return cfg.idf ? cfg.idf->weight(f) : 1.0; };
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        detail::add_feature(v, tokens[i], idf(tokens[i]), cfg);
        if (cfg.bigrams && i + 1 < tokens.size()) {
            auto f = IdfTable::bigram_feature(tokens[i], tokens[i + 1]);
            detail::add_feature(v, f, idf(f), cfg);
        }
    }
    detail::normalize(v);
    return DenseVector(std::move(v));
}

inline DenseVector embed_hashed(const Tokens& tokens, std::size_t dim, std::uint64_t seed) {
    EncoderConfig cfg;
    cfg.dim = dim;
    cfg.seed = seed;
    return embed_hashed(tokens, cfg);
}

/// Row i is the unigram embedding of token i alone.
inline TokenMatrix embed_tokens(const Tokens& tokens, const EncoderConfig& cfg) {
    if (cfg.dim < 8) throw InvalidArgument("encoder dimension must be at least 8");
    EncoderConfig single = cfg;
    single.bigrams = false;
    single.idf = nullptr;  // a lone token normalizes to the same row whatever its weight
    TokenMatrix m(cfg.dim);
    for (const auto& t : tokens) m.push_back(embed_hashed(Tokens{t}, single).span());
    return m;
}

inline TokenMatrix embed_tokens(const Tokens& tokens, std::size_t dim, std::uint64_t seed) {
    EncoderConfig cfg;
    cfg.dim = dim;
    cfg.seed = seed;
    return embed_tokens(tokens, cfg);
}

/// The trainable context-side projection W (row-major d x d). Document
/// vectors are never projected.
struct ContextProjection {
    std::size_t dim = 0;
    std::vector<double> weights;
    std::uint64_t seed = 0;

    static ContextProjection identity(std::size_t dim) {
        ContextProjection p;
        p.dim = dim;
        p.weights.assign(dim * dim, 0.0);
        for (std::size_t i = 0; i < dim; ++i) p.weights[i * dim + i] = 1.0;
        return p;
    }

    /// Identity plus uniform noise in [-0.01, 0.01).
    static ContextProjection initial(std::size_t dim, std::uint64_t seed) {
        ContextProjection p = identity(dim);
        p.seed = seed;
        for (std::size_t i = 0; i < dim * dim; ++i) p.weights[i] += 0.01 * detail::uniform_pm1(seed, i);
        return p;
    }

    double& at(std::size_t r, std::size_t c) { return weights[r * dim + c]; }
    double at(std::size_t r, std::size_t c) const { return weights[r * dim + c]; }
};

inline DenseVector project_context(const DenseVector& v, const ContextProjection& proj) {
    if (v.dim() != proj.dim) throw InvalidArgument("project_context: dimension mismatch");
    DenseVector out(proj.dim);
    for (std::size_t r = 0; r < proj.dim; ++r)
        out.values[r] =
            detail::dot(std::span<const double>(proj.weights).subspan(r * proj.dim, proj.dim), v.span());
    return out;
}

struct PolyCodes {
    std::vector<DenseVector> codes;

    std::size_t size() const { return codes.size(); }
    std::size_t dim() const { return codes.empty() ? 0 : codes.front().dim(); }

    /// m seeded random unit vectors; fixed, never trained.
    static PolyCodes random(std::size_t m, std::size_t dim, std::uint64_t seed) {
        if (m == 0) throw InvalidArgument("poly-encoder needs at least one code");
        PolyCodes pc;
        for (std::size_t i = 0; i < m; ++i) {
            std::vector<double> v(dim);
            for (std::size_t j = 0; j < dim; ++j) v[j] = detail::gaussian(seed ^ 0x5eedc0deULL, i * dim + j);
            detail::normalize(v);
            pc.codes.emplace_back(std::move(v));
        }
        return pc;
    }
};

/// Each code attends over the context token rows; returns the m attended
/// context vectors.
inline std::vector<DenseVector> attend_codes(const PolyCodes& codes, const TokenMatrix& context) {
    if (context.rows() == 0) throw InvalidArgument("poly-encoder: empty context");
    if (codes.size() == 0) throw InvalidArgument("poly-encoder: no codes");
    if (codes.dim() != context.dim()) throw InvalidArgument("poly-encoder: dimension mismatch");
    std::vector<DenseVector> out;
    out.reserve(codes.size());
    std::vector<double> logits(context.rows());
    for (const auto& code : codes.codes) {
        for (std::size_t t = 0; t < context.rows(); ++t) logits[t] = detail::dot(code.span(), context.row(t));
        auto w = detail::softmax(logits);
        DenseVector c(context.dim());
        for (std::size_t t = 0; t < context.rows(); ++t) {
            auto row = context.row(t);
            for (std::size_t j = 0; j < c.dim(); ++j) c.values[j] += w[t] * row[j];
        }
        out.push_back(std::move(c));
    }
    return out;
}

inline double poly_score(const PolyCodes& codes, const TokenMatrix& context, const DenseVector& candidate) {
    auto attended = attend_codes(codes, context);
    if (candidate.dim() != context.dim()) throw InvalidArgument("poly_score: dimension mismatch");
    std::vector<double> logits(attended.size());
    for (std::size_t i = 0; i < attended.size(); ++i) logits[i] = dot(candidate, attended[i]);
    auto w = detail::softmax(logits);
    // r . cand == sum_i w_i (c_i . cand)
    double score = 0.0;
    for (std::size_t i = 0; i < attended.size(); ++i) score += w[i] * logits[i];
    return score;
}

/// Candidate-independent reduction used as the first-stage MIPS query: the
/// mean of the attended code outputs.
inline DenseVector reduce_poly_query(const PolyCodes& codes, const TokenMatrix& context) {
    auto attended = attend_codes(codes, context);
    DenseVector out(context.dim());
    for (const auto& c : attended)
        for (std::size_t j = 0; j < out.dim(); ++j) out.values[j] += c.values[j];
    for (double& x : out.values) x /= static_cast<double>(attended.size());
    return out;
}

} // namespace ragdial
