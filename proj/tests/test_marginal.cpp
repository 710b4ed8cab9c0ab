#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <ragdial/marginal.hpp>

using namespace ragdial;

namespace {

// A generator whose per-step distributions are arbitrary but fixed functions
// of (context, doc, prefix), so every marginal can be checked by summation.
class HashGenerator final : public Generator {
public:
    HashGenerator(std::size_t n_tokens, std::uint64_t seed) : vocab_(make_tokens(n_tokens)), seed_(seed) {}

    const Vocab& vocab() const override { return vocab_; }

    TokenDist next(const std::vector<TokenId>& context, const std::vector<TokenId>& doc,
                   const std::vector<TokenId>& prefix) const override {
        std::uint64_t h = seed_;
        for (auto t : context) h = detail::splitmix64(h ^ (t + 1));
        h = detail::splitmix64(h ^ 0xd0c);
        for (auto t : doc) h = detail::splitmix64(h ^ (t + 7));
        h = detail::splitmix64(h ^ 0x9e);
        for (auto t : prefix) h = detail::splitmix64(h ^ (t + 13));
        std::vector<double> p(vocab_.size());
        for (std::size_t v = 0; v < p.size(); ++v) p[v] = 0.05 + (detail::uniform_pm1(h, v) + 1.0) / 2.0;
        p[Vocab::kBos] = 0.0;
        double s = 0;
        for (double x : p) s += x;
        for (double& x : p) x /= s;
        return TokenDist{p};
    }

    TokenDist next_fused(const std::vector<TokenId>& context, const std::vector<std::vector<TokenId>>& docs,
                         const std::vector<TokenId>& prefix) const override {
        // Order-free fusion: the sorted concatenation of all documents.
        std::vector<TokenId> all;
        for (const auto& d : docs) all.insert(all.end(), d.begin(), d.end());
        std::sort(all.begin(), all.end());
        return next(context, all, prefix);
    }

private:
    static std::vector<std::string> make_tokens(std::size_t n) {
        std::vector<std::string> t;
        for (std::size_t i = 0; i < n; ++i) t.push_back("t" + std::to_string(i));
        return t;
    }

    Vocab vocab_;
    std::uint64_t seed_;
};

DocSet make_docs(std::mt19937_64& rng, std::size_t k, std::size_t vocab) {
    std::uniform_int_distribution<TokenId> tok(3, static_cast<TokenId>(vocab - 1));
    std::uniform_real_distribution<double> u(-2, 2);
    std::vector<double> scores(k);
    for (auto& s : scores) s = u(rng);
    auto priors = make_prior(scores);
    DocSet docs;
    for (std::size_t j = 0; j < k; ++j) docs.push_back(DocInput{{tok(rng), tok(rng)}, priors[j]});
    return docs;
}

RetrievedDoc rdoc(const std::string& id, double score) {
    RetrievedDoc d;
    d.passage.id = id;
    d.passage.tokens = {id};
    d.raw_score = score;
    d.prior = 1.0;
    return d;
}

DecodeConfig short_beam() {
    DecodeConfig c;
    c.beam_size = 3;
    c.min_len = 1;
    c.max_len = 4;
    c.block_ngram = 0;
    return c;
}

} // namespace

TEST(SplitTurns, Windowing) {
    std::vector<Tokens> turns{{"a"}, {"b"}, {"c"}};
    auto s = split_turns(turns, 1);
    ASSERT_EQ(s.groups.size(), 2u);
    EXPECT_EQ(s.groups[0], (Tokens{"a", "b"}));
    EXPECT_EQ(s.groups[1], Tokens{"c"});
    EXPECT_EQ(split_turns({{"x"}}, 3).groups.size(), 1u);
    std::vector<Tokens> four{{"1"}, {"2"}, {"3"}, {"4"}};
    auto f = split_turns(four, 3);
    ASSERT_EQ(f.groups.size(), 4u);
    EXPECT_EQ(f.groups[0], Tokens{"1"});
    EXPECT_THROW(split_turns({}, 1), InvalidArgument);
    EXPECT_THROW(split_turns(turns, 0), InvalidArgument);
}

TEST(RagToken, HandValuesAndIdentities) {
    std::vector<double> pri{0.5, 0.5};
    auto d = rag_token_dist(pri, {TokenDist{{0.8, 0.2}}, TokenDist{{0.4, 0.6}}});
    EXPECT_NEAR(d[0], 0.6, 1e-12);
    EXPECT_NEAR(d[1], 0.4, 1e-12);
    TokenDist one{{0.1, 0.7, 0.2}};
    auto single = rag_token_dist(std::vector<double>{1.0}, {one});
    for (std::size_t v = 0; v < 3; ++v) EXPECT_NEAR(single[v], one[v], 1e-15);
    auto same = rag_token_dist(std::vector<double>{0.3, 0.7}, {one, one});
    for (std::size_t v = 0; v < 3; ++v) EXPECT_NEAR(same[v], one[v], 1e-15);
}

TEST(RagSequence, HandValuesAndBounds) {
    EXPECT_NEAR(rag_sequence_logprob(std::vector<double>{0.5, 0.5},
                                     std::vector<double>{std::log(0.02), std::log(0.04)}),
                -3.506557897319982, 1e-12);
    EXPECT_DOUBLE_EQ(rag_sequence_logprob(std::vector<double>{1.0}, std::vector<double>{-2.5}), -2.5);
    EXPECT_NEAR(rag_sequence_logprob(std::vector<double>{0.2, 0.8}, std::vector<double>{-3.0, -3.0}), -3.0, 1e-12);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-40, 0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> lp{u(rng), u(rng), u(rng)};
        auto pri = make_prior(std::vector<double>{u(rng) / 10, u(rng) / 10, u(rng) / 10});
        double m = rag_sequence_logprob(pri, lp);
        EXPECT_GE(m, *std::min_element(lp.begin(), lp.end()) - 1e-12);
        EXPECT_LE(m, *std::max_element(lp.begin(), lp.end()) + 1e-12);
    }
}

TEST(RagTurnDtt, HandFixtureAndReductions) {
    auto d = rag_turn_dtt_dist({{0.7, 0.3}, {0.4, 0.6}},
                               {{TokenDist{{0.9, 0.1}}, TokenDist{{0.2, 0.8}}},
                                {TokenDist{{0.5, 0.5}}, TokenDist{{0.1, 0.9}}}});
    EXPECT_NEAR(d[0], 0.475, 1e-12);
    EXPECT_NEAR(d[1], 0.525, 1e-12);
    std::vector<double> pri{0.25, 0.75};
    std::vector<TokenDist> ds{TokenDist{{0.3, 0.7}}, TokenDist{{0.6, 0.4}}};
    auto single = rag_turn_dtt_dist({pri}, {ds});
    auto tok = rag_token_dist(pri, ds);
    auto twice = rag_turn_dtt_dist({pri, pri}, {ds, ds});
    for (std::size_t v = 0; v < 2; ++v) {
        EXPECT_NEAR(single[v], tok[v], 1e-15);
        EXPECT_NEAR(twice[v], tok[v], 1e-15);
    }
}

TEST(RagTurnUnion, DedupAndSizes) {
    std::vector<std::vector<RetrievedDoc>> same{{rdoc("a", 2), rdoc("b", 1)}, {rdoc("a", 2), rdoc("b", 1)}};
    auto u = rag_turn_union(same);
    ASSERT_EQ(u.size(), 2u);
    auto plain = make_prior(std::vector<double>{2, 1});
    EXPECT_NEAR(u[0].prior, plain[0], 1e-15);

    auto disjoint = rag_turn_union({{rdoc("a", 1), rdoc("b", 0)}, {rdoc("c", 3), rdoc("d", 2)}});
    EXPECT_EQ(disjoint.size(), 4u);

    auto overlap = rag_turn_union({{rdoc("a", 1.0), rdoc("b", 0.5)}, {rdoc("b", 2.0), rdoc("c", 0.1)}});
    ASSERT_EQ(overlap.size(), 3u);
    EXPECT_EQ(overlap[0].passage.id, "b");
    EXPECT_DOUBLE_EQ(overlap[0].raw_score, 2.0);
    EXPECT_EQ(overlap[1].passage.id, "a");
    EXPECT_EQ(overlap[2].passage.id, "c");
    auto pri = make_prior(std::vector<double>{2.0, 1.0, 0.1});
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(overlap[i].prior, pri[i], 1e-15);

    auto rescored = rag_turn_union({{rdoc("a", 1.0)}, {rdoc("b", 5.0)}},
                                   [](const RetrievedDoc& d) { return d.passage.id == "a" ? 3.0 : 0.0; });
    EXPECT_EQ(rescored[0].passage.id, "a");
    EXPECT_THROW(rag_turn_union({{}, {}}), InvalidArgument);
}

TEST(DocSet, EmptyRetrievalIsClosedBook) {
    Vocab v({"x"});
    auto ds = to_doc_set(v, {});
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_TRUE(ds[0].tokens.empty());
    EXPECT_EQ(ds[0].prior, 1.0);
}

TEST(MarginalNll, RagTokenMatchesDirectSum) {
    HashGenerator gen(6, 1);
    std::mt19937_64 rng(2);
    auto docs = make_docs(rng, 2, 6);
    std::vector<TokenId> ctx{3, 4}, label{5, 3, 4};
    Conditioning cond{ctx, docs, {}, {}};
    auto r = marginal_nll(Scheme::Token, cond, label, gen);
    double expect = 0;
    std::vector<TokenId> prefix{Vocab::kBos};
    for (auto y : detail::with_eos(label)) {
        double mix = 0;
        for (const auto& d : docs) mix += d.prior * gen.next(ctx, d.tokens, prefix)[y];
        expect -= std::log(mix);
        prefix.push_back(y);
    }
    EXPECT_NEAR(r.nll, expect, 1e-12);
    EXPECT_EQ(r.tokens, 4u);
}

TEST(MarginalNll, UniformGivesVocabPerplexity) {
    class Uniform final : public Generator {
    public:
        Uniform() : v_({"a", "b", "c", "d", "e", "f", "g"}) {}
        const Vocab& vocab() const override { return v_; }
        TokenDist next(const std::vector<TokenId>&, const std::vector<TokenId>&,
                       const std::vector<TokenId>&) const override {
            return TokenDist{std::vector<double>(10, 0.1)};
        }
        TokenDist next_fused(const std::vector<TokenId>& c, const std::vector<std::vector<TokenId>>&,
                             const std::vector<TokenId>& p) const override {
            return next(c, {}, p);
        }

    private:
        Vocab v_;
    } gen;
    Conditioning cond{{3}, {DocInput{{4}, 1.0}}, {}, {}};
    std::vector<TokenId> label{3, 4, 5, 6};  // plus EOS: 5 scored tokens
    for (auto s : {Scheme::Token, Scheme::Sequence, Scheme::Fid}) {
        auto r = marginal_nll(s, cond, label, gen);
        EXPECT_NEAR(r.ppl(), 10.0, 1e-9);
    }
    EXPECT_THROW(marginal_nll(Scheme::Token, cond, {}, gen), InvalidArgument);
}

TEST(MarginalNll, SequenceMatchesBruteForce) {
    HashGenerator gen(5, 9);
    std::mt19937_64 rng(4);
    auto docs = make_docs(rng, 3, 5);
    std::vector<TokenId> ctx{3}, label{4, 3};
    Conditioning cond{ctx, docs, {}, {}};
    double total = 0;
    for (const auto& d : docs) {
        double p = 1;
        std::vector<TokenId> prefix{Vocab::kBos};
        for (auto y : detail::with_eos(label)) {
            p *= gen.next(ctx, d.tokens, prefix)[y];
            prefix.push_back(y);
        }
        total += d.prior * p;
    }
    EXPECT_NEAR(marginal_nll(Scheme::Sequence, cond, label, gen).nll, -std::log(total), 1e-12);
}

TEST(Reductions, SingleDocAndSingleTurnCollapse) {
    HashGenerator gen(7, 5);
    std::vector<TokenId> ctx{3, 5}, label{4, 6, 3};
    DocSet one{DocInput{{4, 4, 5}, 1.0}};
    Conditioning cond{ctx, one, {ctx}, {one}};
    double tok = marginal_nll(Scheme::Token, cond, label, gen).nll;
    for (auto s : {Scheme::Sequence, Scheme::Fid, Scheme::TurnDtt, Scheme::TurnDo, Scheme::TurnToken, Scheme::TurnSeq})
        EXPECT_NEAR(marginal_nll(s, cond, label, gen).nll, tok, 1e-12) << to_string(s);
}

TEST(SequenceDecode, SingleDocIsPlainBeam) {
    HashGenerator gen(6, 3);
    std::vector<TokenId> ctx{3};
    DocSet one{DocInput{{4}, 1.0}};
    auto cfg = short_beam();
    auto plain = beam_search(single_doc_step(gen, ctx, one[0]), cfg, &ctx);
    EXPECT_EQ(rag_sequence_decode(gen, ctx, one, cfg).tokens, plain.tokens);
    EXPECT_EQ(rag_token_decode(gen, ctx, one, cfg).tokens, plain.tokens);
    EXPECT_EQ(fid_decode(gen, ctx, one, cfg).tokens, plain.tokens);
}

TEST(SequenceDecode, PicksMarginalArgmaxOverCandidates) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        HashGenerator gen(6, seed);
        std::mt19937_64 rng(seed);
        auto docs = make_docs(rng, 3, 6);
        std::vector<TokenId> ctx{3, 4};
        auto cfg = short_beam();
        auto out = rag_sequence_decode(gen, ctx, docs, cfg);
        auto pri = detail::priors_of(docs);
        double got = rag_sequence_logprob(pri, per_doc_sequence_logprobs(gen, ctx, docs, out.tokens));
        EXPECT_NEAR(out.logprob, got, 1e-12);
        for (const auto& d : docs) {
            auto cand = beam_search(single_doc_step(gen, ctx, d), cfg, &ctx);
            EXPECT_GE(got + 1e-12, rag_sequence_logprob(pri, per_doc_sequence_logprobs(gen, ctx, docs, cand.tokens)));
        }
    }
}

TEST(TurnDo, SingleTurnMatchesToken) {
    HashGenerator gen(6, 12);
    std::mt19937_64 rng(12);
    auto docs = make_docs(rng, 2, 6);
    std::vector<TokenId> ctx{3, 5};
    auto cfg = short_beam();
    auto tok = rag_token_decode(gen, ctx, docs, cfg);
    auto td = rag_turn_do_decode(gen, {ctx}, {docs}, ctx, cfg);
    EXPECT_EQ(td.tokens, tok.tokens);
    auto losses = rag_turn_do_losses(gen, {ctx}, {docs}, {4, 3});
    ASSERT_EQ(losses.size(), 1u);
    Conditioning cond{ctx, docs, {}, {}};
    EXPECT_NEAR(losses[0], marginal_nll(Scheme::Token, cond, {4, 3}, gen).nll, 1e-12);
}

TEST(TurnDo, RescoringPicksBestSummedCandidate) {
    HashGenerator gen(6, 21);
    std::mt19937_64 rng(21);
    std::vector<std::vector<TokenId>> turns{{3}, {4, 5}};
    std::vector<DocSet> tdocs{make_docs(rng, 2, 6), make_docs(rng, 2, 6)};
    auto cfg = short_beam();
    auto out = rag_turn_do_decode(gen, turns, tdocs, {3, 4, 5}, cfg);
    auto summed = [&](const std::vector<TokenId>& y) {
        double s = 0;
        for (std::size_t t = 0; t < 2; ++t) s -= rag_turn_do_losses(gen, {turns[t]}, {tdocs[t]}, y)[0];
        return s;
    };
    for (std::size_t t = 0; t < 2; ++t) {
        auto cand = beam_search(token_step(gen, turns[t], tdocs[t]), cfg, nullptr);
        EXPECT_GE(summed(out.tokens) + 1e-12, summed(cand.tokens));
    }
    EXPECT_NEAR(out.logprob, summed(out.tokens), 1e-12);
}

TEST(Fid, PermutationInvariant) {
    HashGenerator gen(6, 8);
    std::mt19937_64 rng(8);
    auto docs = make_docs(rng, 3, 6);
    std::vector<TokenId> ctx{3};
    auto cfg = short_beam();
    auto base = fid_decode(gen, ctx, docs, cfg).tokens;
    std::vector<std::size_t> perm{0, 1, 2};
    while (std::next_permutation(perm.begin(), perm.end())) {
        DocSet p;
        for (auto i : perm) p.push_back(docs[i]);
        p[0].prior = 0.9;  // priors must not matter
        EXPECT_EQ(fid_decode(gen, ctx, p, cfg).tokens, base);
    }
}

TEST(Regret, EmptyFirstRoundMatchesSingleRound) {
    // Generator that ends immediately when nothing forces a length.
    class EosFirst final : public Generator {
    public:
        EosFirst() : v_({"alpha", "beta"}) {}
        const Vocab& vocab() const override { return v_; }
        TokenDist next(const std::vector<TokenId>&, const std::vector<TokenId>& doc,
                       const std::vector<TokenId>&) const override {
            std::vector<double> p{0.0, 0.7, 0.1, 0.1, 0.1};
            if (!doc.empty()) p[doc[0]] += 0.05;
            double s = 0;
            for (double x : p) s += x;
            for (double& x : p) x /= s;
            return TokenDist{p};
        }
        TokenDist next_fused(const std::vector<TokenId>& c, const std::vector<std::vector<TokenId>>& d,
                             const std::vector<TokenId>& p) const override {
            return next(c, d.front(), p);
        }

    private:
        Vocab v_;
    } gen;
    std::vector<Tokens> queries;
    RetrieveFn retrieve = [&](const Tokens& q) {
        queries.push_back(q);
        return std::vector<RetrievedDoc>{rdoc("alpha", 1.0)};
    };
    DecodeConfig cfg = short_beam();
    cfg.min_len = 0;
    auto rr = regret_generate({"beta"}, retrieve, gen, gen, Scheme::Token, cfg);
    ASSERT_EQ(queries.size(), 2u);
    EXPECT_TRUE(rr.first_round.empty());
    EXPECT_EQ(queries[1], queries[0]);
    EXPECT_EQ(rr.output.tokens, rr.first_round);
    EXPECT_THROW(regret_generate({"beta"}, retrieve, gen, gen, Scheme::TurnDtt, cfg), InvalidArgument);
}

TEST(InloopGrad, HandValues) {
    DenseVector q(std::vector<double>{1.0, 0.0});
    std::vector<DenseVector> docs{DenseVector(std::vector<double>{0.0, 1.0}), DenseVector(std::vector<double>{0.0, -1.0})};
    auto proj = ContextProjection::identity(2);  // scores 0, 0 -> priors 0.5, 0.5
    auto g = retriever_inloop_grad(Scheme::Token, q, docs, {{0.8}, {0.4}}, proj);
    EXPECT_NEAR(g.grad_scores[0], -1.0 / 6.0, 1e-15);
    EXPECT_NEAR(g.grad_scores[1], 1.0 / 6.0, 1e-15);
    EXPECT_NEAR(g.nll, -std::log(0.6), 1e-15);
    auto flat = retriever_inloop_grad(Scheme::Token, q, docs, {{0.3, 0.5}, {0.3, 0.5}}, proj);
    for (double x : flat.grad_scores) EXPECT_NEAR(x, 0.0, 1e-15);
    EXPECT_THROW(retriever_inloop_grad(Scheme::Sequence, q, docs, {{0.8}, {0.4}}, proj), InvalidArgument);
}

TEST(InloopGrad, FiniteDifferencesAndDescent) {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.05, 1.0);
    const std::size_t d = 8, k = 3, steps = 4;
    for (int trial = 0; trial < 10; ++trial) {
        DenseVector q(d);
        for (auto& x : q.values) x = g(rng);
        std::vector<DenseVector> docs(k, DenseVector(d));
        for (auto& v : docs)
            for (auto& x : v.values) x = g(rng) * 0.5;
        std::vector<std::vector<double>> probs(k, std::vector<double>(steps));
        for (auto& row : probs)
            for (auto& x : row) x = u(rng);
        auto proj = ContextProjection::initial(d, trial);
        auto grad = retriever_inloop_grad(Scheme::Token, q, docs, probs, proj);
        double s = 0;
        for (double x : grad.grad_scores) s += x;
        EXPECT_NEAR(s, 0.0, 1e-12);
        for (std::size_t i = 0; i < d * d; i += 7) {
            auto plus = proj, minus = proj;
            plus.weights[i] += 1e-5;
            minus.weights[i] -= 1e-5;
            double fd = (retriever_inloop_grad(Scheme::Token, q, docs, probs, plus).nll -
                         retriever_inloop_grad(Scheme::Token, q, docs, probs, minus).nll) /
                        2e-5;
            EXPECT_NEAR(grad.grad_w[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
        }
        auto stepped = proj;
        apply_gradient(stepped, grad.grad_w, 1e-3);
        EXPECT_LT(retriever_inloop_grad(Scheme::Token, q, docs, probs, stepped).nll, grad.nll);
    }
}

TEST(Schemes, ParseRoundTrip) {
    for (auto s : {Scheme::Token, Scheme::Sequence, Scheme::TurnDtt, Scheme::TurnDo, Scheme::TurnToken,
                   Scheme::TurnSeq, Scheme::Fid})
        EXPECT_EQ(parse_scheme(to_string(s)), s);
    EXPECT_THROW(parse_scheme("rag"), InvalidArgument);
    MarginalConfig mc;
    mc.tstar = 2;
    EXPECT_THROW(mc.validate(), InvalidArgument);
    mc.scheme = Scheme::TurnDtt;
    EXPECT_NO_THROW(mc.validate());
}
