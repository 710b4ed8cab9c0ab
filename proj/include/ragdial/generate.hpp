#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"

namespace ragdial {

using TokenId = std::uint32_t;

class Vocab {
public:
    static constexpr TokenId kBos = 0;
    static constexpr TokenId kEos = 1;
    static constexpr TokenId kUnk = 2;

    Vocab() : Vocab(std::vector<std::string>{}) {}

    /// Specials first, then the given tokens in sorted order, deduplicated.
    explicit Vocab(std::vector<std::string> tokens) {
        tokens_ = {"<bos>", "<eos>", "<unk>"};
        std::sort(tokens.begin(), tokens.end());
        tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
        for (auto& t : tokens)
            if (t != "<bos>" && t != "<eos>" && t != "<unk>") tokens_.push_back(std::move(t));
        for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
    }

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const { return tokens_.at(id); }

    TokenId id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    std::vector<TokenId> encode(const Tokens& tokens) const {
        std::vector<TokenId> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(id(t));
        return out;
    }

    Tokens decode(const std::vector<TokenId>& ids) const {
        Tokens out;
        for (auto i : ids)
            if (i != kBos && i != kEos) out.push_back(token(i));
        return out;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

struct TokenDist {
    std::vector<double> probs;

    std::size_t size() const { return probs.size(); }
    double operator[](std::size_t i) const { return probs[i]; }
};

enum Component : std::size_t { kCopyDoc = 0, kCopyContext = 1, kBigram = 2, kUnigram = 3 };

/// Parameters of the copy/bigram/unigram mixture generator.
struct GeneratorParams {
    std::array<double, 4> alpha{0.0, 0.0, 0.0, 0.0};  // mixture logits; -inf switches a component off
    std::vector<double> unigram;                       // counts, indexed by token id
    std::unordered_map<TokenId, std::map<TokenId, double>> bigram;
    double epsilon = 1e-10;

    std::array<double, 4> weights() const {
        auto w = detail::softmax(alpha);
        return {w[0], w[1], w[2], w[3]};
    }
};

namespace detail {

struct SparseCounts {
    std::vector<std::pair<TokenId, double>> entries;
    double total = 0.0;
};

inline SparseCounts count_ids(std::span<const std::vector<TokenId>* const> sources) {
    std::map<TokenId, double> m;
    double total = 0.0;
    for (const auto* s : sources)
        for (auto t : *s) {
            m[t] += 1.0;
            total += 1.0;
        }
    return SparseCounts{{m.begin(), m.end()}, total};
}

// Adds weight * copy(S) into probs; an empty S copies uniformly.
inline void add_copy(std::vector<double>& probs, const SparseCounts& c, double weight) {
    if (weight == 0.0) return;
    if (c.total == 0.0) {
        double u = weight / static_cast<double>(probs.size());
        for (double& p : probs) p += u;
        return;
    }
    for (auto [t, n] : c.entries) probs[t] += weight * n / c.total;
}

inline double unigram_total(const GeneratorParams& params) {
    double s = 0.0;
    for (double c : params.unigram) s += c;
    return s;
}

inline void add_unigram(std::vector<double>& probs, const GeneratorParams& params, double total, double weight) {
    if (weight == 0.0) return;
    if (total <= 0.0 || params.unigram.size() != probs.size()) {
        double u = weight / static_cast<double>(probs.size());
        for (double& p : probs) p += u;
        return;
    }
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] += weight * params.unigram[i] / total;
}

// Bigram given the previous token, backing off to the unigram when the
// previous token was never seen as a predecessor.
inline void add_bigram(std::vector<double>& probs, const GeneratorParams& params, double uni_total, TokenId prev,
                       double weight) {
    if (weight == 0.0) return;
    auto it = params.bigram.find(prev);
    double total = 0.0;
    if (it != params.bigram.end())
        for (auto& [t, n] : it->second) total += n;
    if (total <= 0.0) {
        add_unigram(probs, params, uni_total, weight);
        return;
    }
    for (auto& [t, n] : it->second)
        if (t < probs.size()) probs[t] += weight * n / total;
}

inline TokenDist floor_and_normalize(std::vector<double> probs, double epsilon) {
    double s = 0.0;
    for (double& p : probs) {
        p = std::max(p, epsilon);
        s += p;
    }
    for (double& p : probs) p /= s;
    return TokenDist{std::move(probs)};
}

inline TokenDist mixture(const GeneratorParams& params, std::size_t vocab_size, const SparseCounts& doc,
                         const SparseCounts& ctx, TokenId prev) {
    auto w = params.weights();
    std::vector<double> probs(vocab_size, 0.0);
    double uni_total = unigram_total(params);
    add_copy(probs, doc, w[kCopyDoc]);
    add_copy(probs, ctx, w[kCopyContext]);
    add_bigram(probs, params, uni_total, prev, w[kBigram]);
    add_unigram(probs, params, uni_total, w[kUnigram]);
    return floor_and_normalize(std::move(probs), params.epsilon);
}

inline void check_prefix(const std::vector<TokenId>& prefix) {
    if (prefix.empty() || prefix.front() != Vocab::kBos) throw InvalidArgument("generator prefix must begin with BOS");
}

} // namespace detail

/// p(y | context, doc, prefix) =
///   w0 copy(doc) + w1 copy(context) + w2 bigram(. | last) + w3 unigram,
/// floored at epsilon and renormalized.
inline TokenDist next_token_dist(const GeneratorParams& params, std::size_t vocab_size,
                                 const std::vector<TokenId>& context, const std::vector<TokenId>& doc,
                                 const std::vector<TokenId>& prefix) {
    detail::check_prefix(prefix);
    const std::vector<TokenId>* d[] = {&doc};
    const std::vector<TokenId>* c[] = {&context};
    return detail::mixture(params, vocab_size, detail::count_ids(d), detail::count_ids(c), prefix.back());
}

/// Fusion variant: the document copy component pools token counts over every
/// document; retrieval priors play no part, so document order is irrelevant.
inline TokenDist next_token_dist_fid(const GeneratorParams& params, std::size_t vocab_size,
                                     const std::vector<TokenId>& context,
                                     const std::vector<std::vector<TokenId>>& docs,
                                     const std::vector<TokenId>& prefix) {
    if (docs.empty()) throw InvalidArgument("next_token_dist_fid: no documents");
    detail::check_prefix(prefix);
    std::vector<const std::vector<TokenId>*> ds;
    for (const auto& doc : docs) ds.push_back(&doc);
    const std::vector<TokenId>* c[] = {&context};
    return detail::mixture(params, vocab_size, detail::count_ids(ds), detail::count_ids(c), prefix.back());
}

/// The generator interface the marginalization engines consume. Anything that
/// yields per-step distributions over a shared vocabulary can plug in here.
class Generator {
public:
    virtual ~Generator() = default;
    virtual const Vocab& vocab() const = 0;
    virtual TokenDist next(const std::vector<TokenId>& context, const std::vector<TokenId>& doc,
                           const std::vector<TokenId>& prefix) const = 0;
    virtual TokenDist next_fused(const std::vector<TokenId>& context, const std::vector<std::vector<TokenId>>& docs,
                                 const std::vector<TokenId>& prefix) const = 0;
};

class MixtureGenerator final : public Generator {
public:
    MixtureGenerator(std::shared_ptr<const Vocab> vocab, GeneratorParams params)
        : vocab_(std::move(vocab)), params_(std::move(params)) {
        if (params_.unigram.empty()) params_.unigram.assign(vocab_->size(), 0.0);
        if (params_.unigram.size() != vocab_->size()) throw InvalidArgument("unigram table does not match vocabulary");
    }

    const Vocab& vocab() const override { return *vocab_; }
    std::shared_ptr<const Vocab> vocab_ptr() const { return vocab_; }
    const GeneratorParams& params() const { return params_; }

    TokenDist next(const std::vector<TokenId>& context, const std::vector<TokenId>& doc,
                   const std::vector<TokenId>& prefix) const override {
        return next_token_dist(params_, vocab_->size(), context, doc, prefix);
    }

    TokenDist next_fused(const std::vector<TokenId>& context, const std::vector<std::vector<TokenId>>& docs,
                         const std::vector<TokenId>& prefix) const override {
        return next_token_dist_fid(params_, vocab_->size(), context, docs, prefix);
    }

private:
    std::shared_ptr<const Vocab> vocab_;
    GeneratorParams params_;
};

struct TrainingPair {
    std::vector<TokenId> context;
    std::vector<TokenId> doc;
    std::vector<TokenId> label;  // without BOS/EOS
};

struct FitOptions {
    std::size_t steps = 200;
    double step_size = 0.1;
    // Component probabilities for a training label exclude that label's own
    // counts, so the count models cannot explain their own training data.
    bool leave_one_out = true;
};

struct FitResult {
    GeneratorParams params;
    std::vector<double> nll_history;  // mean token NLL before each step and after the last
};

namespace detail {

struct LabelCounts {
    std::map<TokenId, double> unigram;
    std::map<std::pair<TokenId, TokenId>, double> bigram;
};

inline LabelCounts label_counts(const std::vector<TokenId>& label) {
    LabelCounts c;
    TokenId prev = Vocab::kBos;
    auto add = [&](TokenId y) {
        c.unigram[y] += 1.0;
        c.bigram[{prev, y}] += 1.0;
        prev = y;
    };
    for (auto y : label) add(y);
    add(Vocab::kEos);
    return c;
}

inline double mixture_nll(const std::vector<std::array<double, 4>>& comps, const std::array<double, 4>& alpha,
                          double eps, std::array<double, 4>* grad) {
    auto wv = softmax(alpha);
    double nll = 0.0;
    std::array<double, 4> g{0, 0, 0, 0};
    for (const auto& p : comps) {
        double mix = 0.0;
        for (int c = 0; c < 4; ++c) mix += wv[c] * p[c];
        double m = mix + eps;
        nll -= std::log(m);
        for (int c = 0; c < 4; ++c) g[c] -= wv[c] * (p[c] - mix) / m;
    }
    double n = static_cast<double>(comps.size());
    if (grad)
        for (int c = 0; c < 4; ++c) (*grad)[c] = g[c] / n;
    return nll / n;
}

} // namespace detail

/// Accumulates unigram/bigram counts from the labels (with EOS) and fits the
/// mixture logits by gradient descent on mean token NLL. A step that would
/// raise the objective is halved until it does not.
inline FitResult fit_generator(const GeneratorParams& init, std::size_t vocab_size,
                               const std::vector<TrainingPair>& pairs, const FitOptions& opts = {}) {
    if (pairs.empty()) throw InvalidArgument("fit_generator: empty training set");
    GeneratorParams params = init;
    params.unigram.assign(vocab_size, 0.0);
    params.bigram.clear();
    std::vector<detail::LabelCounts> own;
    own.reserve(pairs.size());
    for (const auto& pr : pairs) {
        own.push_back(detail::label_counts(pr.label));
        for (auto& [t, n] : own.back().unigram) params.unigram.at(t) += n;
        for (auto& [bg, n] : own.back().bigram) params.bigram[bg.first][bg.second] += n;
    }
    double uni_total = detail::unigram_total(params);
    std::unordered_map<TokenId, double> bi_totals;
    for (auto& [prev, row] : params.bigram)
        for (auto& [t, n] : row) bi_totals[prev] += n;

    const double uniform = 1.0 / static_cast<double>(vocab_size);
    std::vector<std::array<double, 4>> comps;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& pr = pairs[i];
        const auto& mine = own[i];
        const std::vector<TokenId>* d[] = {&pr.doc};
        const std::vector<TokenId>* c[] = {&pr.context};
        auto doc = detail::count_ids(d);
        auto ctx = detail::count_ids(c);
        auto copy_prob = [&](const detail::SparseCounts& s, TokenId y) {
            if (s.total == 0.0) return uniform;
            for (auto [t, n] : s.entries)
                if (t == y) return n / s.total;
            return 0.0;
        };
        double own_total = 0.0;
        for (auto& [t, n] : mine.unigram) own_total += n;
        auto unigram_prob = [&](TokenId y) {
            double num = params.unigram[y], den = uni_total;
            if (opts.leave_one_out) {
                auto it = mine.unigram.find(y);
                num -= it == mine.unigram.end() ? 0.0 : it->second;
                den -= own_total;
            }
            return den > 0.0 ? num / den : uniform;
        };
        auto bigram_prob = [&](TokenId prev, TokenId y) {
            double num = 0.0, den = bi_totals.count(prev) ? bi_totals[prev] : 0.0;
            auto row = params.bigram.find(prev);
            if (row != params.bigram.end()) {
                auto it = row->second.find(y);
                if (it != row->second.end()) num = it->second;
            }
            if (opts.leave_one_out) {
                auto it = mine.bigram.find({prev, y});
                num -= it == mine.bigram.end() ? 0.0 : it->second;
                for (auto& [bg, n] : mine.bigram)
                    if (bg.first == prev) den -= n;
            }
            return den > 0.0 ? num / den : unigram_prob(y);
        };
        TokenId prev = Vocab::kBos;
        auto push = [&](TokenId y) {
            comps.push_back({copy_prob(doc, y), copy_prob(ctx, y), bigram_prob(prev, y), unigram_prob(y)});
            prev = y;
        };
        for (auto y : pr.label) push(y);
        push(Vocab::kEos);
    }

    FitResult result;
    std::array<double, 4> grad{};
    double loss = detail::mixture_nll(comps, params.alpha, params.epsilon, &grad);
    result.nll_history.push_back(loss);
    for (std::size_t step = 0; step < opts.steps; ++step) {
        double lr = opts.step_size;
        bool moved = false;
        for (int tries = 0; tries < 40; ++tries, lr /= 2.0) {
            auto trial = params.alpha;
            for (int c = 0; c < 4; ++c)
                if (std::isfinite(trial[c])) trial[c] -= lr * grad[c];
            std::array<double, 4> trial_grad{};
            double trial_loss = detail::mixture_nll(comps, trial, params.epsilon, &trial_grad);
            if (trial_loss <= loss) {
                params.alpha = trial;
                loss = trial_loss;
                grad = trial_grad;
                moved = true;
                break;
            }
        }
        result.nll_history.push_back(loss);
        if (!moved) break;
    }
    result.params = std::move(params);
    return result;
}

// ---------------------------------------------------------------------------
// Decoding

struct Hypothesis {
    std::vector<TokenId> tokens;  // generated tokens, without BOS/EOS
    double logprob = 0.0;
    bool finished = false;
};

class DecodingExhausted : public Error {
public:
    using Error::Error;
};

enum class DecodeStrategy { Beam, Nucleus, TopK };

inline std::string to_string(DecodeStrategy s) {
    switch (s) {
    case DecodeStrategy::Beam: return "beam";
    case DecodeStrategy::Nucleus: return "nucleus";
    case DecodeStrategy::TopK: return "topk";
    }
    return "?";
}

inline DecodeStrategy parse_decode_strategy(const std::string& s) {
    for (auto v : {DecodeStrategy::Beam, DecodeStrategy::Nucleus, DecodeStrategy::TopK})
        if (to_string(v) == s) return v;
    throw InvalidArgument("unknown decoding strategy: " + s);
}

struct DecodeConfig {
    DecodeStrategy strategy = DecodeStrategy::Beam;
    std::size_t beam_size = 4;
    std::size_t max_len = 40;
    std::size_t min_len = 20;
    std::size_t block_ngram = 3;  // 0 disables
    bool context_block = false;
    double p = 0.9;
    std::size_t k = 10;
    std::uint64_t seed = 0;
};

using StepFn = std::function<TokenDist(const std::vector<TokenId>& prefix)>;

/// Tracks which next tokens would complete an n-gram that is already in the
/// hypothesis or, with context blocking, in the dialogue context. N-grams of
/// retrieved documents are never registered here.
class NgramBlocker {
public:
    NgramBlocker(std::size_t n, const std::vector<TokenId>* context) : n_(n) {
        if (n_ == 0 || !context) return;
        for (std::size_t i = 0; i + n_ <= context->size(); ++i) {
            std::vector<TokenId> head(context->begin() + static_cast<std::ptrdiff_t>(i),
                                      context->begin() + static_cast<std::ptrdiff_t>(i + n_ - 1));
            context_[head].insert((*context)[i + n_ - 1]);
        }
    }

    std::unordered_set<TokenId> blocked(const std::vector<TokenId>& hyp) const {
        std::unordered_set<TokenId> out;
        if (n_ == 0 || hyp.size() + 1 < n_) return out;
        auto tail_begin = hyp.end() - static_cast<std::ptrdiff_t>(n_ - 1);
        for (std::size_t i = 0; i + n_ <= hyp.size(); ++i)
            if (std::equal(tail_begin, hyp.end(), hyp.begin() + static_cast<std::ptrdiff_t>(i)))
                out.insert(hyp[i + n_ - 1]);
        if (!context_.empty()) {
            auto it = context_.find(std::vector<TokenId>(tail_begin, hyp.end()));
            if (it != context_.end()) out.insert(it->second.begin(), it->second.end());
        }
        return out;
    }

private:
    struct Hash {
        std::size_t operator()(const std::vector<TokenId>& v) const {
            std::uint64_t h = 0x84222325ULL;
            for (auto t : v) h = detail::splitmix64(h ^ t);
            return static_cast<std::size_t>(h);
        }
    };

    std::size_t n_;
    std::unordered_map<std::vector<TokenId>, std::set<TokenId>, Hash> context_;
};

/// Beam search over step_fn. EOS is disallowed before min_len generated
/// tokens; hypotheses reaching max_len finish without EOS. Ties break by beam
/// position, then by token index.
inline Hypothesis beam_search(const StepFn& step, const DecodeConfig& cfg,
                              const std::vector<TokenId>* block_context = nullptr) {
    if (cfg.beam_size == 0) throw InvalidArgument("beam_search: beam size must be at least 1");
    if (cfg.min_len >= cfg.max_len) throw InvalidArgument("beam_search: min_len must be below max_len");
    NgramBlocker blocker(cfg.block_ngram, cfg.context_block ? block_context : nullptr);
    std::vector<Hypothesis> alive{Hypothesis{}};
    std::vector<Hypothesis> finished;
    struct Cand {
        double lp;
        std::size_t beam;
        TokenId tok;
    };
    std::vector<Cand> cands;
    std::vector<TokenId> prefix;
    for (std::size_t len = 0; len < cfg.max_len && !alive.empty(); ++len) {
        cands.clear();
        for (std::size_t b = 0; b < alive.size(); ++b) {
            const auto& h = alive[b];
            prefix.assign(1, Vocab::kBos);
            prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
            auto dist = step(prefix);
            auto blocked = blocker.blocked(h.tokens);
            for (TokenId v = 0; v < dist.size(); ++v) {
                if (v == Vocab::kBos) continue;
                if (v == Vocab::kEos && h.tokens.size() < cfg.min_len) continue;
                if (v != Vocab::kEos && blocked.count(v)) continue;
                double p = dist[v];
                if (!(p > 0.0)) continue;
                cands.push_back(Cand{h.logprob + std::log(p), b, v});
            }
        }
        if (cands.empty()) break;
        std::size_t keep = std::min(cfg.beam_size, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Cand& a, const Cand& b) {
                              if (a.lp != b.lp) return a.lp > b.lp;
                              if (a.beam != b.beam) return a.beam < b.beam;
                              return a.tok < b.tok;
                          });
        std::vector<Hypothesis> next;
        for (std::size_t i = 0; i < keep; ++i) {
            Hypothesis h;
            h.tokens = alive[cands[i].beam].tokens;
            h.logprob = cands[i].lp;
            if (cands[i].tok == Vocab::kEos) {
                h.finished = true;
                finished.push_back(std::move(h));
            } else {
                h.tokens.push_back(cands[i].tok);
                if (h.tokens.size() >= cfg.max_len) {
                    h.finished = true;
                    finished.push_back(std::move(h));
                } else {
                    next.push_back(std::move(h));
                }
            }
        }
        alive = std::move(next);
        if (!finished.empty() && !alive.empty()) {
            double best_finished = -std::numeric_limits<double>::infinity();
            for (auto& f : finished) best_finished = std::max(best_finished, f.logprob);
            double best_alive = -std::numeric_limits<double>::infinity();
            for (auto& a : alive) best_alive = std::max(best_alive, a.logprob);
            // Extending can only lower a log probability.
            if (best_finished >= best_alive) break;
        }
    }
    if (finished.empty()) throw DecodingExhausted("beam search exhausted: every hypothesis was pruned");
    std::size_t best = 0;
    for (std::size_t i = 1; i < finished.size(); ++i)
        if (finished[i].logprob > finished[best].logprob) best = i;
    return finished[best];
}

namespace detail {

inline void check_dist(const TokenDist& dist) {
    double s = 0.0;
    for (double p : dist.probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidArgument("sampling: invalid probability");
        s += p;
    }
    if (dist.probs.empty() || !(s > 0.0)) throw InvalidArgument("sampling: degenerate distribution");
}

inline std::vector<TokenId> by_probability(const TokenDist& dist) {
    std::vector<TokenId> order(dist.size());
    std::iota(order.begin(), order.end(), TokenId{0});
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return dist[a] > dist[b]; });
    return order;
}

inline TokenId draw(const std::vector<std::pair<TokenId, double>>& support, std::uint64_t seed) {
    double u = (uniform_pm1(seed, 0x5a17) + 1.0) / 2.0;
    double acc = 0.0;
    for (const auto& [t, p] : support) {
        acc += p;
        if (u < acc) return t;
    }
    return support.back().first;
}

} // namespace detail

/// Smallest probability-descending prefix whose mass reaches p, renormalized.
inline std::vector<std::pair<TokenId, double>> nucleus_support(const TokenDist& dist, double p) {
    if (!(p > 0.0 && p <= 1.0)) throw InvalidArgument("nucleus: p must lie in (0, 1]");
    detail::check_dist(dist);
    double total = 0.0;
    for (double x : dist.probs) total += x;
    std::vector<std::pair<TokenId, double>> support;
    double mass = 0.0;
    for (auto t : detail::by_probability(dist)) {
        if (dist[t] <= 0.0) break;
        support.emplace_back(t, dist[t]);
        mass += dist[t];
        if (mass >= p * total) break;
    }
    for (auto& [t, q] : support) q /= mass;
    return support;
}

/// The k most probable tokens, renormalized.
inline std::vector<std::pair<TokenId, double>> topk_support(const TokenDist& dist, std::size_t k) {
    if (k == 0) throw InvalidArgument("top-k: k must be at least 1");
    detail::check_dist(dist);
    std::vector<std::pair<TokenId, double>> support;
    double mass = 0.0;
    for (auto t : detail::by_probability(dist)) {
        if (support.size() == k || dist[t] <= 0.0) break;
        support.emplace_back(t, dist[t]);
        mass += dist[t];
    }
    for (auto& [t, q] : support) q /= mass;
    return support;
}

inline TokenId sample_nucleus(const TokenDist& dist, double p, std::uint64_t seed) {
    return detail::draw(nucleus_support(dist, p), seed);
}

inline TokenId sample_topk(const TokenDist& dist, std::size_t k, std::uint64_t seed) {
    return detail::draw(topk_support(dist, k), seed);
}

/// Ancestral sampling with nucleus or top-k restriction. EOS masking before
/// min_len and n-gram blocking apply exactly as in beam search.
inline Hypothesis sample_sequence(const StepFn& step, const DecodeConfig& cfg,
                                  const std::vector<TokenId>* block_context = nullptr) {
    if (cfg.min_len >= cfg.max_len) throw InvalidArgument("sampling: min_len must be below max_len");
    NgramBlocker blocker(cfg.block_ngram, cfg.context_block ? block_context : nullptr);
    Hypothesis h;
    std::vector<TokenId> prefix{Vocab::kBos};
    for (std::size_t len = 0; len < cfg.max_len; ++len) {
        auto dist = step(prefix);
        auto blocked = blocker.blocked(h.tokens);
        TokenDist masked = dist;
        masked.probs[Vocab::kBos] = 0.0;
        if (h.tokens.size() < cfg.min_len) masked.probs[Vocab::kEos] = 0.0;
        for (auto v : blocked)
            if (v != Vocab::kEos) masked.probs[v] = 0.0;
        double s = 0.0;
        for (double p : masked.probs) s += p;
        if (!(s > 0.0)) throw DecodingExhausted("sampling exhausted: every token was pruned");
        for (double& p : masked.probs) p /= s;
        std::uint64_t step_seed = detail::splitmix64(cfg.seed ^ detail::splitmix64(len + 1));
        TokenId tok = cfg.strategy == DecodeStrategy::TopK ? sample_topk(masked, cfg.k, step_seed)
                                                           : sample_nucleus(masked, cfg.p, step_seed);
        h.logprob += std::log(dist[tok]);
        if (tok == Vocab::kEos) {
            h.finished = true;
            return h;
        }
        h.tokens.push_back(tok);
        prefix.push_back(tok);
    }
    h.finished = true;
    return h;
}

/// Dispatches on cfg.strategy.
inline Hypothesis decode(const StepFn& step, const DecodeConfig& cfg,
                         const std::vector<TokenId>* block_context = nullptr) {
    if (cfg.strategy == DecodeStrategy::Beam) return beam_search(step, cfg, block_context);
    return sample_sequence(step, cfg, block_context);
}

} // namespace ragdial
