#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "encode.hpp"
#include "generate.hpp"
#include "retrieve.hpp"

namespace ragdial {

enum class Scheme { Token, Sequence, TurnDtt, TurnDo, TurnToken, TurnSeq, Fid };

inline std::string to_string(Scheme s) {
    switch (s) {
    case Scheme::Token: return "token";
    case Scheme::Sequence: return "sequence";
    case Scheme::TurnDtt: return "turn-dtt";
    case Scheme::TurnDo: return "turn-do";
    case Scheme::TurnToken: return "turn-token";
    case Scheme::TurnSeq: return "turn-seq";
    case Scheme::Fid: return "fid";
    }
    return "?";
}

inline Scheme parse_scheme(const std::string& s) {
    for (auto v : {Scheme::Token, Scheme::Sequence, Scheme::TurnDtt, Scheme::TurnDo, Scheme::TurnToken,
                   Scheme::TurnSeq, Scheme::Fid})
        if (to_string(v) == s) return v;
    throw InvalidArgument("unknown scheme: " + s);
}

inline bool is_turn_scheme(Scheme s) {
    return s == Scheme::TurnDtt || s == Scheme::TurnDo || s == Scheme::TurnToken || s == Scheme::TurnSeq;
}

struct MarginalConfig {
    Scheme scheme = Scheme::Token;
    std::size_t n_docs = 5;
    std::optional<std::size_t> tstar;  // turn schemes only; unset means 1

    std::size_t window() const { return tstar.value_or(1); }

    void validate() const {
        if (n_docs == 0) throw InvalidArgument("n_docs must be at least 1");
        if (tstar && !is_turn_scheme(scheme)) throw InvalidArgument("--tstar applies to turn schemes only");
        if (tstar && *tstar == 0) throw InvalidArgument("tstar must be at least 1");
    }
};

// ---------------------------------------------------------------------------
// Turn windowing

struct TurnSplit {
    std::vector<Tokens> groups;
    std::size_t tstar = 1;
};

/// The most recent tstar turns stay separate; everything earlier is merged
/// into one leading group.
inline TurnSplit split_turns(const std::vector<Tokens>& turns, std::size_t tstar) {
    if (turns.empty()) throw InvalidArgument("split_turns: empty context");
    if (tstar == 0) throw InvalidArgument("split_turns: tstar must be at least 1");
    TurnSplit split;
    split.tstar = tstar;
    if (turns.size() <= tstar) {
        split.groups = turns;
        return split;
    }
    std::size_t lead = turns.size() - tstar;
    Tokens merged;
    for (std::size_t i = 0; i < lead; ++i) merged.insert(merged.end(), turns[i].begin(), turns[i].end());
    split.groups.push_back(std::move(merged));
    for (std::size_t i = lead; i < turns.size(); ++i) split.groups.push_back(turns[i]);
    return split;
}

// ---------------------------------------------------------------------------
// Distribution-level marginals

namespace detail {

inline TokenDist normalized(std::vector<double> probs) {
    double s = 0.0;
    for (double p : probs) s += p;
    for (double& p : probs) p /= s;
    return TokenDist{std::move(probs)};
}

} // namespace detail

/// sum_j prior_j * dist_j.
inline TokenDist rag_token_dist(std::span<const double> priors, const std::vector<TokenDist>& dists) {
    if (priors.size() != dists.size()) throw InvalidArgument("rag_token_dist: prior/distribution count mismatch");
    if (dists.empty()) throw InvalidArgument("rag_token_dist: no documents");
    std::vector<double> out(dists.front().size(), 0.0);
    for (std::size_t j = 0; j < dists.size(); ++j) {
        if (dists[j].size() != out.size()) throw InvalidArgument("rag_token_dist: vocabulary size mismatch");
        for (std::size_t v = 0; v < out.size(); ++v) out[v] += priors[j] * dists[j][v];
    }
    return detail::normalized(std::move(out));
}

/// log sum_j prior_j * exp(seq_logprob_j), stabilized.
inline double rag_sequence_logprob(std::span<const double> priors, std::span<const double> seq_logprobs) {
    if (priors.size() != seq_logprobs.size()) throw InvalidArgument("rag_sequence_logprob: length mismatch");
    if (priors.empty()) throw InvalidArgument("rag_sequence_logprob: no documents");
    std::vector<double> terms(priors.size());
    for (std::size_t j = 0; j < priors.size(); ++j)
        terms[j] = priors[j] > 0.0 ? std::log(priors[j]) + seq_logprobs[j] : -std::numeric_limits<double>::infinity();
    return detail::log_sum_exp(terms);
}

/// Marginalize over documents within each turn, then uniformly across turns.
inline TokenDist rag_turn_dtt_dist(const std::vector<std::vector<double>>& turn_priors,
                                   const std::vector<std::vector<TokenDist>>& turn_dists) {
    if (turn_priors.empty()) throw InvalidArgument("rag_turn_dtt_dist: no turns");
    if (turn_priors.size() != turn_dists.size()) throw InvalidArgument("rag_turn_dtt_dist: turn count mismatch");
    std::vector<double> out;
    const double w = 1.0 / static_cast<double>(turn_priors.size());
    for (std::size_t t = 0; t < turn_priors.size(); ++t) {
        auto within = rag_token_dist(turn_priors[t], turn_dists[t]);
        if (out.empty()) out.assign(within.size(), 0.0);
        if (within.size() != out.size()) throw InvalidArgument("rag_turn_dtt_dist: vocabulary size mismatch");
        for (std::size_t v = 0; v < out.size(); ++v) out[v] += w * within[v];
    }
    return detail::normalized(std::move(out));
}

/// Union of per-turn retrievals, deduplicated by passage id (keeping the
/// highest raw score). Priors are renormalized over the union using
/// `rescore` (the score of a passage against the concatenated context) when
/// given, otherwise the kept raw scores. Order: descending score, first seen.
inline std::vector<RetrievedDoc> rag_turn_union(const std::vector<std::vector<RetrievedDoc>>& per_turn,
                                                const std::function<double(const RetrievedDoc&)>& rescore = {}) {
    std::vector<RetrievedDoc> merged;
    std::map<std::string, std::size_t> seen;
    for (const auto& turn : per_turn)
        for (const auto& d : turn) {
            auto [it, inserted] = seen.emplace(d.passage.id, merged.size());
            if (inserted) merged.push_back(d);
            else if (d.raw_score > merged[it->second].raw_score) merged[it->second] = d;
        }
    if (merged.empty()) throw InvalidArgument("rag_turn_union: empty union");
    std::vector<double> scores;
    for (auto& d : merged) {
        if (rescore) d.raw_score = rescore(d);
        scores.push_back(d.raw_score);
    }
    std::vector<std::size_t> order(merged.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::vector<RetrievedDoc> out;
    std::vector<double> sorted_scores;
    for (auto i : order) {
        out.push_back(merged[i]);
        sorted_scores.push_back(scores[i]);
    }
    auto priors = make_prior(sorted_scores);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].prior = priors[i];
    return out;
}

// ---------------------------------------------------------------------------
// Generator-level engines

/// A retrieved document as the generator sees it.
struct DocInput {
    std::vector<TokenId> tokens;
    double prior = 1.0;
};

using DocSet = std::vector<DocInput>;

/// Converts retrieval output to generator input. An empty retrieval becomes a
/// single empty document, i.e. a closed-book step.
inline DocSet to_doc_set(const Vocab& vocab, const std::vector<RetrievedDoc>& docs) {
    DocSet out;
    for (const auto& d : docs) out.push_back(DocInput{vocab.encode(d.passage.retrieval_tokens()), d.prior});
    if (out.empty()) out.push_back(DocInput{{}, 1.0});
    return out;
}

namespace detail {

inline std::vector<double> priors_of(const DocSet& docs) {
    std::vector<double> p;
    for (const auto& d : docs) p.push_back(d.prior);
    return p;
}

inline std::vector<std::vector<TokenId>> tokens_of(const DocSet& docs) {
    std::vector<std::vector<TokenId>> t;
    for (const auto& d : docs) t.push_back(d.tokens);
    return t;
}

inline std::vector<TokenId> with_eos(const std::vector<TokenId>& label) {
    auto out = label;
    out.push_back(Vocab::kEos);
    return out;
}

// Sum over the label (plus EOS) of log step(prefix)[y].
inline double sequence_logprob(const StepFn& step, const std::vector<TokenId>& label) {
    std::vector<TokenId> prefix{Vocab::kBos};
    double lp = 0.0;
    for (auto y : with_eos(label)) {
        lp += std::log(step(prefix)[y]);
        prefix.push_back(y);
    }
    return lp;
}

} // namespace detail

inline StepFn token_step(const Generator& gen, const std::vector<TokenId>& context, const DocSet& docs) {
    return [&gen, &context, &docs](const std::vector<TokenId>& prefix) {
        std::vector<TokenDist> dists;
        for (const auto& d : docs) dists.push_back(gen.next(context, d.tokens, prefix));
        return rag_token_dist(detail::priors_of(docs), dists);
    };
}

inline StepFn single_doc_step(const Generator& gen, const std::vector<TokenId>& context, const DocInput& doc) {
    return [&gen, &context, &doc](const std::vector<TokenId>& prefix) { return gen.next(context, doc.tokens, prefix); };
}

inline StepFn fid_step(const Generator& gen, const std::vector<TokenId>& context, const DocSet& docs) {
    auto tokens = std::make_shared<std::vector<std::vector<TokenId>>>(detail::tokens_of(docs));
    return [&gen, &context, tokens](const std::vector<TokenId>& prefix) {
        return gen.next_fused(context, *tokens, prefix);
    };
}

inline StepFn dtt_step(const Generator& gen, const std::vector<std::vector<TokenId>>& turn_contexts,
                       const std::vector<DocSet>& turn_docs) {
    if (turn_contexts.size() != turn_docs.size()) throw InvalidArgument("turn-dtt: turn count mismatch");
    return [&gen, &turn_contexts, &turn_docs](const std::vector<TokenId>& prefix) {
        std::vector<std::vector<double>> priors;
        std::vector<std::vector<TokenDist>> dists;
        for (std::size_t t = 0; t < turn_docs.size(); ++t) {
            priors.push_back(detail::priors_of(turn_docs[t]));
            dists.emplace_back();
            for (const auto& d : turn_docs[t]) dists.back().push_back(gen.next(turn_contexts[t], d.tokens, prefix));
        }
        return rag_turn_dtt_dist(priors, dists);
    };
}

/// Per-document sequence log probabilities of `label` (with EOS).
inline std::vector<double> per_doc_sequence_logprobs(const Generator& gen, const std::vector<TokenId>& context,
                                                     const DocSet& docs, const std::vector<TokenId>& label) {
    std::vector<double> out;
    for (const auto& d : docs) out.push_back(detail::sequence_logprob(single_doc_step(gen, context, d), label));
    return out;
}

/// Thorough decoding: one candidate per document, each rescored under every
/// document, argmax of the sequence marginal. Ties keep the earlier candidate.
inline Hypothesis rag_sequence_decode(const Generator& gen, const std::vector<TokenId>& context, const DocSet& docs,
                                      const DecodeConfig& cfg) {
    if (docs.empty()) throw InvalidArgument("rag_sequence_decode: no documents");
    std::vector<Hypothesis> candidates;
    for (std::size_t j = 0; j < docs.size(); ++j) {
        DecodeConfig c = cfg;
        c.seed = detail::splitmix64(cfg.seed + j);
        auto h = decode(single_doc_step(gen, context, docs[j]), c, &context);
        bool dup = false;
        for (const auto& prev : candidates) dup = dup || prev.tokens == h.tokens;
        if (!dup) candidates.push_back(std::move(h));
    }
    auto priors = detail::priors_of(docs);
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        double score = rag_sequence_logprob(priors, per_doc_sequence_logprobs(gen, context, docs, candidates[i].tokens));
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    auto out = candidates[best];
    out.logprob = best_score;
    return out;
}

inline Hypothesis rag_token_decode(const Generator& gen, const std::vector<TokenId>& context, const DocSet& docs,
                                   const DecodeConfig& cfg) {
    return decode(token_step(gen, context, docs), cfg, &context);
}

/// Fusion decoding; document priors are ignored.
inline Hypothesis fid_decode(const Generator& gen, const std::vector<TokenId>& context, const DocSet& docs,
                             const DecodeConfig& cfg) {
    if (docs.empty()) throw InvalidArgument("fid_decode: no documents");
    return decode(fid_step(gen, context, docs), cfg, &context);
}

inline Hypothesis rag_turn_dtt_decode(const Generator& gen, const std::vector<std::vector<TokenId>>& turn_contexts,
                                      const std::vector<DocSet>& turn_docs, const std::vector<TokenId>& full_context,
                                      const DecodeConfig& cfg) {
    return decode(dtt_step(gen, turn_contexts, turn_docs), cfg, &full_context);
}

/// Doc-Only training losses: each turn is its own context with a RAG-Token
/// loss against the shared label. The training objective is their sum.
inline std::vector<double> rag_turn_do_losses(const Generator& gen,
                                              const std::vector<std::vector<TokenId>>& turn_contexts,
                                              const std::vector<DocSet>& turn_docs,
                                              const std::vector<TokenId>& label) {
    if (turn_contexts.empty()) throw InvalidArgument("turn-do: no turns");
    if (turn_contexts.size() != turn_docs.size()) throw InvalidArgument("turn-do: turn count mismatch");
    std::vector<double> losses;
    for (std::size_t t = 0; t < turn_contexts.size(); ++t)
        losses.push_back(-detail::sequence_logprob(token_step(gen, turn_contexts[t], turn_docs[t]), label));
    return losses;
}

/// Doc-Only decoding: one RAG-Token candidate per turn, then a rescoring pass
/// that sums each candidate's log probability under every turn's marginal.
inline Hypothesis rag_turn_do_decode(const Generator& gen, const std::vector<std::vector<TokenId>>& turn_contexts,
                                     const std::vector<DocSet>& turn_docs, const std::vector<TokenId>& full_context,
                                     const DecodeConfig& cfg) {
    if (turn_contexts.empty()) throw InvalidArgument("turn-do: no turns");
    if (turn_contexts.size() != turn_docs.size()) throw InvalidArgument("turn-do: turn count mismatch");
    std::vector<Hypothesis> candidates;
    for (std::size_t t = 0; t < turn_contexts.size(); ++t) {
        DecodeConfig c = cfg;
        c.seed = detail::splitmix64(cfg.seed + t);
        auto h = decode(token_step(gen, turn_contexts[t], turn_docs[t]), c, &full_context);
        bool dup = false;
        for (const auto& prev : candidates) dup = dup || prev.tokens == h.tokens;
        if (!dup) candidates.push_back(std::move(h));
    }
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        double score = 0.0;
        for (std::size_t t = 0; t < turn_contexts.size(); ++t)
            score += detail::sequence_logprob(token_step(gen, turn_contexts[t], turn_docs[t]), candidates[i].tokens);
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    auto out = candidates[best];
    out.logprob = best_score;
    return out;
}

/// Everything one example contributes to a marginal computation.
/// Whole-context schemes read `docs`; turn-dtt/turn-do read the per-group
/// fields; turn-token/turn-seq read `docs` holding the deduplicated union.
struct Conditioning {
    std::vector<TokenId> context;  // all turns concatenated
    DocSet docs;
    std::vector<std::vector<TokenId>> turn_contexts;
    std::vector<DocSet> turn_docs;
};

struct NllResult {
    double nll = 0.0;
    std::size_t tokens = 0;  // label length plus EOS

    double ppl() const { return std::exp(nll / static_cast<double>(tokens)); }
};

/// Teacher-forced negative log likelihood of the gold label under a scheme.
/// Sequence schemes use the exact sequence marginal. Turn-do reports the mean
/// of its per-turn losses so its perplexity stays on a per-token scale.
inline NllResult marginal_nll(Scheme scheme, const Conditioning& cond, const std::vector<TokenId>& label,
                              const Generator& gen) {
    if (label.empty()) throw InvalidArgument("marginal_nll: empty label");
    NllResult r;
    r.tokens = label.size() + 1;
    switch (scheme) {
    case Scheme::Token:
    case Scheme::TurnToken:
        r.nll = -detail::sequence_logprob(token_step(gen, cond.context, cond.docs), label);
        break;
    case Scheme::Sequence:
    case Scheme::TurnSeq:
        r.nll = -rag_sequence_logprob(detail::priors_of(cond.docs),
                                      per_doc_sequence_logprobs(gen, cond.context, cond.docs, label));
        break;
    case Scheme::Fid:
        r.nll = -detail::sequence_logprob(fid_step(gen, cond.context, cond.docs), label);
        break;
    case Scheme::TurnDtt:
        r.nll = -detail::sequence_logprob(dtt_step(gen, cond.turn_contexts, cond.turn_docs), label);
        break;
    case Scheme::TurnDo: {
        auto losses = rag_turn_do_losses(gen, cond.turn_contexts, cond.turn_docs, label);
        double s = 0.0;
        for (double l : losses) s += l;
        r.nll = s / static_cast<double>(losses.size());
        break;
    }
    }
    return r;
}

/// Generates a response under any scheme.
inline Hypothesis decode_scheme(Scheme scheme, const Conditioning& cond, const Generator& gen,
                                const DecodeConfig& cfg) {
    switch (scheme) {
    case Scheme::Token:
    case Scheme::TurnToken: return rag_token_decode(gen, cond.context, cond.docs, cfg);
    case Scheme::Sequence:
    case Scheme::TurnSeq: return rag_sequence_decode(gen, cond.context, cond.docs, cfg);
    case Scheme::Fid: return fid_decode(gen, cond.context, cond.docs, cfg);
    case Scheme::TurnDtt: return rag_turn_dtt_decode(gen, cond.turn_contexts, cond.turn_docs, cond.context, cfg);
    case Scheme::TurnDo: return rag_turn_do_decode(gen, cond.turn_contexts, cond.turn_docs, cond.context, cfg);
    }
    throw InvalidArgument("unknown scheme");
}

// ---------------------------------------------------------------------------
// ReGReT

using RetrieveFn = std::function<std::vector<RetrievedDoc>(const Tokens& query)>;

struct RegretResult {
    std::vector<TokenId> first_round;
    std::vector<RetrievedDoc> first_docs;
    std::vector<RetrievedDoc> second_docs;
    Hypothesis output;
};

/// Two rounds of retrieval and generation: the second retrieval is queried
/// with the context followed by the first round's output. Pass the same
/// generator twice for the shared-model variant.
inline RegretResult regret_generate(const Tokens& context, const RetrieveFn& retrieve, const Generator& first,
                                    const Generator& second, Scheme scheme, const DecodeConfig& cfg) {
    if (is_turn_scheme(scheme)) throw InvalidArgument("ReGReT runs with whole-context schemes only");
    RegretResult res;
    Conditioning cond;
    cond.context = first.vocab().encode(context);
    res.first_docs = retrieve(context);
    cond.docs = to_doc_set(first.vocab(), res.first_docs);
    res.first_round = decode_scheme(scheme, cond, first, cfg).tokens;

    auto query = detail::concat(context, first.vocab().decode(res.first_round));
    res.second_docs = retrieve(query);
    cond.context = second.vocab().encode(context);
    cond.docs = to_doc_set(second.vocab(), res.second_docs);
    res.output = decode_scheme(scheme, cond, second, cfg);
    return res;
}

// ---------------------------------------------------------------------------
// In-loop retriever training

struct InloopGradient {
    double nll = 0.0;
    std::vector<double> scores;       // s_j = (W q) . d_j
    std::vector<double> grad_scores;  // dNLL / ds_j
    std::vector<double> grad_w;       // dNLL / dW, row-major d x d
};

/// gold_probs[j][l] = p_j(y_l): the generator's probability of gold step l
/// given document j. Priors are softmax(s) with s_j = (W q) . d_j. Only the
/// context side moves; document vectors and generator are held fixed.
inline InloopGradient retriever_inloop_grad(Scheme scheme, const DenseVector& query,
                                            const std::vector<DenseVector>& doc_vectors,
                                            const std::vector<std::vector<double>>& gold_probs,
                                            const ContextProjection& proj) {
    if (scheme != Scheme::Token) throw InvalidArgument("in-loop retriever gradient is defined for RAG-Token only");
    if (doc_vectors.empty() || doc_vectors.size() != gold_probs.size())
        throw InvalidArgument("retriever_inloop_grad: document count mismatch");
    const std::size_t k = doc_vectors.size();
    const std::size_t d = proj.dim;
    auto projected = project_context(query, proj);
    InloopGradient g;
    for (const auto& dv : doc_vectors) g.scores.push_back(dot(projected, dv));
    auto prior = detail::softmax(g.scores);
    g.grad_scores.assign(k, 0.0);
    const std::size_t steps = gold_probs.front().size();
    for (std::size_t l = 0; l < steps; ++l) {
        double mix = 0.0;
        for (std::size_t j = 0; j < k; ++j) mix += prior[j] * gold_probs[j].at(l);
        g.nll -= std::log(mix);
        for (std::size_t j = 0; j < k; ++j) g.grad_scores[j] += prior[j] - prior[j] * gold_probs[j][l] / mix;
    }
    // dNLL/dW = (sum_j g_j d_j) q^T
    std::vector<double> u(d, 0.0);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < d; ++i) u[i] += g.grad_scores[j] * doc_vectors[j].values[i];
    g.grad_w.assign(d * d, 0.0);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) g.grad_w[r * d + c] = u[r] * query.values[c];
    return g;
}

/// p_j(y_l) for every retrieved document and gold step (with EOS).
inline std::vector<std::vector<double>> gold_step_probs(const Generator& gen, const std::vector<TokenId>& context,
                                                        const DocSet& docs, const std::vector<TokenId>& label) {
    std::vector<std::vector<double>> out;
    auto target = detail::with_eos(label);
    for (const auto& doc : docs) {
        out.emplace_back();
        std::vector<TokenId> prefix{Vocab::kBos};
        for (auto y : target) {
            out.back().push_back(gen.next(context, doc.tokens, prefix)[y]);
            prefix.push_back(y);
        }
    }
    return out;
}

inline void apply_gradient(ContextProjection& proj, const std::vector<double>& grad_w, double step) {
    if (grad_w.size() != proj.weights.size()) throw InvalidArgument("gradient shape does not match projection");
    for (std::size_t i = 0; i < grad_w.size(); ++i) proj.weights[i] -= step * grad_w[i];
}

} // namespace ragdial
