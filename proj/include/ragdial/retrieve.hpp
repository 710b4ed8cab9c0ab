#pragma once

#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "encode.hpp"
#include "index.hpp"

namespace ragdial {

struct RetrievedDoc {
    Passage passage;
    std::size_t row = 0;     // passage ordinal in the corpus
    double raw_score = 0.0;  // inner-product or re-ranker units
    double prior = 0.0;      // p(z | x) over the retrieved set
};

/// Softmax over a retrieved set's scores, temperature 1.
inline std::vector<double> make_prior(std::span<const double> scores) {
    if (scores.empty()) throw InvalidArgument("make_prior: empty score list");
    for (double s : scores)
        if (!std::isfinite(s)) throw InvalidArgument("make_prior: non-finite retrieval score");
    return detail::softmax(scores);
}

enum class RetrieverKind { None, Tfidf, Dense, DprPoly, PolyFaiss, Colbert, Shared };

inline std::string to_string(RetrieverKind k) {
    switch (k) {
    case RetrieverKind::None: return "none";
    case RetrieverKind::Tfidf: return "tfidf";
    case RetrieverKind::Dense: return "dense";
    case RetrieverKind::DprPoly: return "dpr-poly";
    case RetrieverKind::PolyFaiss: return "polyfaiss";
    case RetrieverKind::Colbert: return "colbert";
    case RetrieverKind::Shared: return "shared";
    }
    return "?";
}

inline RetrieverKind parse_retriever_kind(const std::string& s) {
    for (auto k : {RetrieverKind::None, RetrieverKind::Tfidf, RetrieverKind::Dense, RetrieverKind::DprPoly,
                   RetrieverKind::PolyFaiss, RetrieverKind::Colbert, RetrieverKind::Shared})
        if (to_string(k) == s) return k;
    throw InvalidArgument("unknown retriever: " + s);
}

struct RetrieverConfig {
    RetrieverKind kind = RetrieverKind::Dense;
    std::size_t k = 5;
    std::size_t n_rerank = 25;
    double lambda = 0.5;

    bool reranks() const {
        return kind == RetrieverKind::DprPoly || kind == RetrieverKind::PolyFaiss ||
               kind == RetrieverKind::Colbert || kind == RetrieverKind::Shared;
    }

    void validate() const {
        if (k == 0) throw InvalidArgument("retriever k must be at least 1");
        if (reranks() && k > n_rerank) throw InvalidArgument("n_rerank must be at least k for re-ranking retrievers");
        if (lambda < 0.0 || lambda > 1.0) throw InvalidArgument("lambda must lie in [0, 1]");
    }
};

namespace detail {

inline std::vector<RetrievedDoc> to_docs(const Corpus& corpus, const std::vector<Hit>& hits) {
    std::vector<RetrievedDoc> docs;
    if (hits.empty()) return docs;
    std::vector<double> scores;
    for (const auto& h : hits) scores.push_back(h.score);
    auto priors = make_prior(scores);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        std::size_t row = corpus.index_of(hits[i].id);
        docs.push_back(RetrievedDoc{corpus[row], row, hits[i].score, priors[i]});
    }
    return docs;
}

inline void check_row_ids(const Corpus& corpus, const std::vector<std::string>& ids) {
    if (ids.size() != corpus.size()) throw InvalidArgument("index does not match corpus size");
}

} // namespace detail

inline std::vector<RetrievedDoc> retrieve_tfidf(const Tokens& context, const InvertedIndex& index,
                                                const Corpus& corpus, std::size_t k) {
    return detail::to_docs(corpus, tfidf_search(index, context, k).hits);
}

/// DPR-style: query = W * embed(context); exact MIPS over fixed document vectors.
inline std::vector<RetrievedDoc> retrieve_dense(const Tokens& context, const EncoderConfig& cfg,
                                                const ContextProjection& proj, const FlatIndex& index,
                                                const Corpus& corpus, std::size_t k) {
    auto query = project_context(embed_hashed(context, cfg), proj);
    return detail::to_docs(corpus, mips_search(index, query, k).hits);
}

/// lambda * log_softmax(poly) + (1 - lambda) * log_softmax(dense), per candidate.
inline std::vector<double> combine_dpr_poly(std::span<const double> dense_scores,
                                            std::span<const double> poly_scores, double lambda) {
    if (dense_scores.size() != poly_scores.size()) throw InvalidArgument("combine_dpr_poly: length mismatch");
    auto lp = detail::log_softmax(poly_scores);
    auto ld = detail::log_softmax(dense_scores);
    std::vector<double> out(lp.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        // Exact degenerate mixes keep the other scorer's infinities out.
        if (lambda == 0.0) out[i] = ld[i];
        else if (lambda == 1.0) out[i] = lp[i];
        else out[i] = lambda * lp[i] + (1.0 - lambda) * ld[i];
    }
    return out;
}

namespace detail {

// Stable re-sort by combined score, then keep k and renormalize priors.
inline std::vector<RetrievedDoc> resort(std::vector<RetrievedDoc> docs, const std::vector<double>& scores,
                                        std::size_t k) {
    std::vector<std::size_t> order(docs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(std::min(k, order.size()));
    std::vector<double> kept;
    std::vector<RetrievedDoc> out;
    for (auto i : order) {
        kept.push_back(scores[i]);
        out.push_back(std::move(docs[i]));
        out.back().raw_score = scores[i];
    }
    auto priors = make_prior(kept);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].prior = priors[i];
    return out;
}

} // namespace detail

/// Code re-ranking of a dense first stage. Candidate vectors come from the
/// flat index the candidates were retrieved from.
inline std::vector<RetrievedDoc> rerank_dpr_poly(std::vector<RetrievedDoc> candidates, const Tokens& context,
                                                 const PolyCodes& codes, const EncoderConfig& cfg,
                                                 const FlatIndex& index, double lambda, std::size_t k) {
    if (candidates.empty()) throw InvalidArgument("rerank_dpr_poly: empty candidate set");
    if (lambda < 0.0 || lambda > 1.0) throw InvalidArgument("rerank_dpr_poly: lambda must lie in [0, 1]");
    auto ctx = embed_tokens(context, cfg);
    std::vector<double> dense, poly;
    for (const auto& c : candidates) {
        dense.push_back(c.raw_score);
        poly.push_back(poly_score(codes, ctx, index.vector(c.row)));
    }
    auto combined = combine_dpr_poly(dense, poly, lambda);
    return detail::resort(std::move(candidates), combined, k);
}

/// First stage: MIPS with the reduced poly query over n_rerank; second stage:
/// full poly-encoder scores, top k.
inline std::vector<RetrievedDoc> retrieve_polyfaiss(const Tokens& context, const PolyCodes& codes,
                                                    const EncoderConfig& cfg, const FlatIndex& index,
                                                    const Corpus& corpus, std::size_t k, std::size_t n_rerank) {
    if (k > n_rerank) throw InvalidArgument("retrieve_polyfaiss: k exceeds n_rerank");
    auto ctx = embed_tokens(context, cfg);
    auto pool = detail::to_docs(corpus, mips_search(index, reduce_poly_query(codes, ctx), n_rerank).hits);
    std::vector<double> scores;
    for (const auto& d : pool) scores.push_back(poly_score(codes, ctx, index.vector(d.row)));
    return detail::resort(std::move(pool), scores, k);
}

/// Sum over query rows of the best inner product against any document row.
inline double maxsim(const TokenMatrix& query, const TokenMatrix& doc) {
    if (query.rows() == 0 || doc.rows() == 0) throw InvalidArgument("maxsim: empty token matrix");
    if (query.dim() != doc.dim()) throw InvalidArgument("maxsim: dimension mismatch");
    double total = 0.0;
    for (std::size_t q = 0; q < query.rows(); ++q) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t d = 0; d < doc.rows(); ++d) best = std::max(best, detail::dot(query.row(q), doc.row(d)));
        total += best;
    }
    return total;
}

namespace detail {

inline std::vector<RetrievedDoc> late_interaction(const TokenMatrix& query, const TokenIndex& index,
                                                  const Corpus& corpus, std::size_t k, std::size_t n_rerank) {
    if (k > n_rerank) throw InvalidArgument("late-interaction retrieval: k exceeds n_rerank");
    check_row_ids(corpus, index.ids());
    auto candidates = token_search(index, query, n_rerank);
    std::vector<Hit> rescored;
    for (const auto& c : candidates) rescored.push_back(Hit{c.id, c.row, maxsim(query, index.passage_matrix(c.row))});
    return to_docs(corpus, top_k(std::move(rescored), k));
}

} // namespace detail

/// ColBERT-style: token-level first stage, maxsim re-ranking.
inline std::vector<RetrievedDoc> retrieve_colbert(const Tokens& context, const EncoderConfig& cfg,
                                                  const TokenIndex& index, const Corpus& corpus, std::size_t k,
                                                  std::size_t n_rerank) {
    if (context.empty()) throw InvalidArgument("retrieve_colbert: empty context");
    return detail::late_interaction(embed_tokens(context, cfg), index, corpus, k, n_rerank);
}

/// One encoder serving both retrieval and generation (BREAD-style). There is
/// no separate retrieval encoder: the token index must be built from this
/// instance, and the generator reads its encoded inputs from the same object.
class SharedEncoder {
public:
    explicit SharedEncoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.idf = nullptr;
    }

    const EncoderConfig& config() const { return cfg_; }
    void reseed(std::uint64_t seed) { cfg_.seed = seed; }

    TokenMatrix encode(const Tokens& tokens) const { return embed_tokens(tokens, cfg_); }

    TokenIndex build_index(const Corpus& corpus) const {
        auto index = build_token_index(corpus, cfg_);
        index_seed_ = cfg_.seed;
        return index;
    }

    /// Encoder states of the concatenated [document; context] input, the
    /// representation a fusion decoder would attend over.
    TokenMatrix generation_features(const Tokens& context, const Tokens& doc) const {
        return encode(detail::concat(doc, context));
    }

    std::optional<std::uint64_t> index_seed() const { return index_seed_; }

private:
    EncoderConfig cfg_;
    mutable std::optional<std::uint64_t> index_seed_;
};

inline std::vector<RetrievedDoc> retrieve_shared(const Tokens& context, const SharedEncoder& encoder,
                                                 const TokenIndex& index, const Corpus& corpus, std::size_t k,
                                                 std::size_t n_rerank) {
    if (context.empty()) throw InvalidArgument("retrieve_shared: empty context");
    if (encoder.index_seed() && *encoder.index_seed() != encoder.config().seed)
        throw InvalidArgument("retrieve_shared: token index was built with a different encoder state");
    return detail::late_interaction(encoder.encode(context), index, corpus, k, n_rerank);
}

/// True iff the gold passage id is among the first k results.
inline bool recall_at_k(const std::vector<RetrievedDoc>& results, const std::string& gold_id, std::size_t k) {
    for (std::size_t i = 0; i < std::min(k, results.size()); ++i)
        if (results[i].passage.id == gold_id) return true;
    return false;
}

namespace detail {

inline bool contains_run(const Tokens& hay, const Tokens& needle) {
    if (needle.empty()) return false;
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

} // namespace detail

/// Sentence mode: true iff the gold sentence's tokens appear contiguously in
/// one of the first k passages.
inline bool recall_at_k_sentence(const std::vector<RetrievedDoc>& results, const std::string& gold_sentence,
                                 std::size_t k) {
    auto needle = tokenize(gold_sentence);
    for (std::size_t i = 0; i < std::min(k, results.size()); ++i)
        if (detail::contains_run(results[i].passage.tokens, needle)) return true;
    return false;
}

/// Owns every index a configured retriever needs and dispatches on kind.
/// Immutable after construction apart from the context projection, which the
/// in-loop trainer updates between queries.
class Retriever {
public:
    Retriever(std::shared_ptr<const Corpus> corpus, RetrieverConfig cfg, EncoderConfig enc,
              std::uint64_t seed, std::size_t n_codes = 4)
        : corpus_(std::move(corpus)), cfg_(cfg), enc_(std::move(enc)), shared_(enc_) {
        cfg_.validate();
        if (!enc_.idf) enc_.idf = std::make_shared<IdfTable>(*corpus_);
        projection_ = ContextProjection::initial(enc_.dim, seed);
        codes_ = PolyCodes::random(n_codes, enc_.dim, seed);
        switch (cfg_.kind) {
        case RetrieverKind::None: break;
        case RetrieverKind::Tfidf: inverted_ = InvertedIndex(*corpus_); break;
        case RetrieverKind::Dense:
        case RetrieverKind::DprPoly:
        case RetrieverKind::PolyFaiss: flat_ = build_flat_index(*corpus_, enc_); break;
        case RetrieverKind::Colbert: tokens_ = build_token_index(*corpus_, enc_); break;
        case RetrieverKind::Shared: tokens_ = shared_.build_index(*corpus_); break;
        }
    }

    const RetrieverConfig& config() const { return cfg_; }
    const EncoderConfig& encoder() const { return enc_; }
    const Corpus& corpus() const { return *corpus_; }
    const FlatIndex& flat_index() const { return flat_; }
    const TokenIndex& token_index() const { return tokens_; }
    const InvertedIndex& inverted_index() const { return inverted_; }
    const PolyCodes& codes() const { return codes_; }
    const SharedEncoder& shared_encoder() const { return shared_; }
    ContextProjection& projection() { return projection_; }
    const ContextProjection& projection() const { return projection_; }

    /// Swaps in a pre-built flat index (e.g. loaded from disk).
    void set_flat_index(FlatIndex index) {
        detail::check_row_ids(*corpus_, index.ids());
        if (index.dim() != enc_.dim) throw InvalidArgument("flat index dimension does not match encoder");
        flat_ = std::move(index);
    }

    void set_token_index(TokenIndex index) {
        detail::check_row_ids(*corpus_, index.ids());
        if (index.dim() != enc_.dim) throw InvalidArgument("token index dimension does not match encoder");
        tokens_ = std::move(index);
    }

    void set_inverted_index(InvertedIndex index) {
        detail::check_row_ids(*corpus_, index.ids());
        inverted_ = std::move(index);
    }

    /// Context representation before projection (the dense query input).
    DenseVector embed_context(const Tokens& context) const { return embed_hashed(context, enc_); }

    std::vector<RetrievedDoc> retrieve(const Tokens& context) const { return retrieve(context, cfg_.k); }

    std::vector<RetrievedDoc> retrieve(const Tokens& context, std::size_t k) const {
        switch (cfg_.kind) {
        case RetrieverKind::None: return {};
        case RetrieverKind::Tfidf: return retrieve_tfidf(context, inverted_, *corpus_, k);
        case RetrieverKind::Dense: return retrieve_dense(context, enc_, projection_, flat_, *corpus_, k);
        case RetrieverKind::DprPoly: {
            auto pool = retrieve_dense(context, enc_, projection_, flat_, *corpus_, std::max(k, cfg_.n_rerank));
            if (pool.empty() || context.empty()) return pool;
            return rerank_dpr_poly(std::move(pool), context, codes_, enc_, flat_, cfg_.lambda, k);
        }
        case RetrieverKind::PolyFaiss:
            if (context.empty()) return {};
            return retrieve_polyfaiss(context, codes_, enc_, flat_, *corpus_, k, std::max(k, cfg_.n_rerank));
        case RetrieverKind::Colbert:
            if (context.empty()) return {};
            return retrieve_colbert(context, enc_, tokens_, *corpus_, k, std::max(k, cfg_.n_rerank));
        case RetrieverKind::Shared:
            if (context.empty()) return {};
            return retrieve_shared(context, shared_, tokens_, *corpus_, k, std::max(k, cfg_.n_rerank));
        }
        return {};
    }

    /// Score of one already-retrieved passage against another query, in the
    /// same units the retriever ranks with. TF-IDF keeps the raw score.
    double score(const Tokens& context, const RetrievedDoc& doc) const {
        switch (cfg_.kind) {
        case RetrieverKind::Dense:
        case RetrieverKind::DprPoly:
        case RetrieverKind::PolyFaiss: {
            auto q = project_context(embed_hashed(context, enc_), projection_);
            return dot(q, flat_.vector(doc.row));
        }
        case RetrieverKind::Colbert:
            if (context.empty()) return 0.0;
            return maxsim(embed_tokens(context, enc_), tokens_.passage_matrix(doc.row));
        case RetrieverKind::Shared:
            if (context.empty()) return 0.0;
            return maxsim(shared_.encode(context), tokens_.passage_matrix(doc.row));
        default:
            return doc.raw_score;
        }
    }

    /// Ranking from the first stage alone, without re-scoring.
    std::vector<RetrievedDoc> first_stage(const Tokens& context, std::size_t k) const {
        switch (cfg_.kind) {
        case RetrieverKind::DprPoly:
            return retrieve_dense(context, enc_, projection_, flat_, *corpus_, k);
        case RetrieverKind::PolyFaiss: {
            auto q = reduce_poly_query(codes_, embed_tokens(context, enc_));
            return detail::to_docs(*corpus_, mips_search(flat_, q, k).hits);
        }
        case RetrieverKind::Colbert:
            return detail::to_docs(*corpus_, token_search(tokens_, embed_tokens(context, enc_), k));
        case RetrieverKind::Shared:
            return detail::to_docs(*corpus_, token_search(tokens_, shared_.encode(context), k));
        default:
            return retrieve(context, k);
        }
    }

private:
    std::shared_ptr<const Corpus> corpus_;
    RetrieverConfig cfg_;
    EncoderConfig enc_;
    SharedEncoder shared_;
    ContextProjection projection_;
    PolyCodes codes_;
    FlatIndex flat_;
    InvertedIndex inverted_;
    TokenIndex tokens_;
};

} // namespace ragdial
