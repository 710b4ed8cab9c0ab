#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <ragdial/retrieve.hpp>

using namespace ragdial;

namespace {

Passage passage(const std::string& id, const std::string& text) {
    return Passage{id, "", text, tokenize(text), {}};
}

std::shared_ptr<const Corpus> small_corpus() {
    return std::make_shared<const Corpus>(Corpus({
        passage("p0", "the zorvak harbor was founded by merchants long ago"),
        passage("p1", "a quiet monastery in the hills of plinth"),
        passage("p2", "the observatory of kaltan studies distant stars"),
        passage("p3", "merchants trade salt and copper in the harbor"),
    }));
}

EncoderConfig enc(std::size_t dim = 64) {
    EncoderConfig c;
    c.dim = dim;
    return c;
}

} // namespace

TEST(Prior, Softmax) {
    auto p = make_prior(std::vector<double>{1, 1, 1});
    for (double x : p) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
    EXPECT_EQ(make_prior(std::vector<double>{4.2}), std::vector<double>{1.0});
    auto q = make_prior(std::vector<double>{std::log(2.0), 0.0});
    EXPECT_NEAR(q[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(q[1], 1.0 / 3.0, 1e-15);
    EXPECT_THROW(make_prior(std::vector<double>{}), InvalidArgument);
    EXPECT_THROW(make_prior(std::vector<double>{NAN}), InvalidArgument);
}

TEST(Prior, ShiftInvariantAndOrderPreserving) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0, 3);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> s(5), shifted(5);
        for (int i = 0; i < 5; ++i) shifted[i] = (s[i] = g(rng)) + 17.0;
        auto a = make_prior(s), b = make_prior(shifted);
        double sum = 0;
        for (int i = 0; i < 5; ++i) {
            EXPECT_NEAR(a[i], b[i], 1e-12);
            sum += a[i];
            for (int j = 0; j < 5; ++j) {
                if (s[i] > s[j]) {
                    EXPECT_GE(a[i], a[j]);
                }
            }
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Dense, PassageTextRanksFirst) {
    auto c = small_corpus();
    auto cfg = enc();
    auto idx = build_flat_index(*c, cfg);
    auto id = ContextProjection::identity(cfg.dim);
    for (std::size_t i = 0; i < c->size(); ++i) {
        auto res = retrieve_dense((*c)[i].tokens, cfg, id, idx, *c, 2);
        EXPECT_EQ(res.front().passage.id, (*c)[i].id);
    }
    auto one = retrieve_dense((*c)[0].tokens, cfg, id, idx, *c, 1);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].prior, 1.0);
}

TEST(Dense, HandFixture) {
    Corpus c({passage("a", "x"), passage("b", "y"), passage("c", "z")});
    FlatIndex idx(8, {"a", "b", "c"},
                  {1, 0, 0, 0, 0, 0, 0, 0,
                   0.6f, 0.8f, 0, 0, 0, 0, 0, 0,
                   0, 0, 1, 0, 0, 0, 0, 0});
    // A projection that maps everything onto the first axis.
    ContextProjection proj;
    proj.dim = 8;
    proj.weights.assign(64, 0.0);
    for (std::size_t cidx = 0; cidx < 8; ++cidx) proj.at(0, cidx) = 1.0;
    proj.at(1, 0) = 1.0;
    EncoderConfig cfg = enc(8);
    auto q = project_context(embed_hashed(Tokens{"anything"}, cfg), proj);
    auto res = retrieve_dense(Tokens{"anything"}, cfg, proj, idx, c, 3);
    std::vector<std::pair<double, std::string>> expect = {
        {q.values[0], "a"}, {0.6 * q.values[0] + 0.8 * q.values[1], "b"}, {0.0, "c"}};
    std::sort(expect.begin(), expect.end(), [](auto& l, auto& r) { return l.first != r.first ? l.first > r.first : l.second < r.second; });
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(res[i].passage.id, expect[i].second);
        EXPECT_NEAR(res[i].raw_score, expect[i].first, 1e-6);
    }
}

TEST(DprPoly, CombineHandValues) {
    auto s = combine_dpr_poly(std::vector<double>{2.0, 1.0}, std::vector<double>{0.2, 0.9}, 0.5);
    EXPECT_NEAR(s[0], -0.7082238682018402, 1e-12);
    EXPECT_NEAR(s[1], -0.8582238682018402, 1e-12);
    auto p = make_prior(s);
    EXPECT_NEAR(p[0], 0.5374298453437496, 1e-12);
    EXPECT_NEAR(p[1], 0.4625701546562505, 1e-12);
}

TEST(DprPoly, DegenerateLambdas) {
    auto c = small_corpus();
    auto cfg = enc();
    auto idx = build_flat_index(*c, cfg);
    auto id = ContextProjection::identity(cfg.dim);
    auto codes = PolyCodes::random(3, cfg.dim, 4);
    Tokens ctx = tokenize("merchants in the harbor");
    auto pool = retrieve_dense(ctx, cfg, id, idx, *c, 4);

    auto dense_only = rerank_dpr_poly(pool, ctx, codes, cfg, idx, 0.0, 4);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(dense_only[i].passage.id, pool[i].passage.id);

    auto poly_only = rerank_dpr_poly(pool, ctx, codes, cfg, idx, 1.0, 4);
    auto ctx_m = embed_tokens(ctx, cfg);
    for (std::size_t i = 0; i + 1 < 4; ++i)
        EXPECT_GE(poly_score(codes, ctx_m, idx.vector(poly_only[i].row)),
                  poly_score(codes, ctx_m, idx.vector(poly_only[i + 1].row)));
    EXPECT_THROW(rerank_dpr_poly(pool, ctx, codes, cfg, idx, 1.5, 4), InvalidArgument);
}

TEST(PolyFaiss, SinglePassageAndPoolIdentity) {
    auto one = std::make_shared<const Corpus>(Corpus({passage("only", "a lone passage")}));
    auto cfg = enc();
    auto idx = build_flat_index(*one, cfg);
    auto codes = PolyCodes::random(2, cfg.dim, 0);
    auto res = retrieve_polyfaiss(Tokens{"lone"}, codes, cfg, idx, *one, 1, 1);
    ASSERT_EQ(res.size(), 1u);
    EXPECT_EQ(res[0].prior, 1.0);

    auto c = small_corpus();
    auto fidx = build_flat_index(*c, cfg);
    Tokens ctx = tokenize("distant stars");
    auto ctx_m = embed_tokens(ctx, cfg);
    auto first = mips_search(fidx, reduce_poly_query(codes, ctx_m), 2).hits;
    auto full = retrieve_polyfaiss(ctx, codes, cfg, fidx, *c, 2, 2);
    std::set<std::string> a, b;
    for (auto& h : first) a.insert(h.id);
    for (auto& d : full) b.insert(d.passage.id);
    EXPECT_EQ(a, b);
    EXPECT_THROW(retrieve_polyfaiss(ctx, codes, cfg, fidx, *c, 3, 2), InvalidArgument);
}

TEST(PolyFaiss, RescoringOverturnsReduction) {
    // Pick two candidate vectors for which the reduced query and the full poly
    // score disagree, then check the second stage follows the full score.
    auto cfg = enc(16);
    Tokens ctx{"alpha", "beta", "gamma"};
    auto ctx_m = embed_tokens(ctx, cfg);
    auto codes = PolyCodes::random(3, 16, 11);
    auto red = reduce_poly_query(codes, ctx_m);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    auto rnd = [&] {
        DenseVector v(16);
        for (auto& x : v.values) x = g(rng);
        return v;
    };
    DenseVector a, b;
    bool found = false;
    for (int t = 0; t < 20000 && !found; ++t) {
        a = rnd();
        b = rnd();
        found = dot(red, a) > dot(red, b) + 1e-3 && poly_score(codes, ctx_m, b) > poly_score(codes, ctx_m, a) + 1e-3;
    }
    ASSERT_TRUE(found);
    std::vector<float> data;
    for (auto* v : {&a, &b})
        for (double x : v->values) data.push_back(static_cast<float>(x));
    // Rebuild from the stored floats so both stages see the same numbers.
    FlatIndex idx(16, {"A", "B"}, data);
    Corpus c({passage("A", "x"), passage("B", "y")});
    EXPECT_EQ(mips_search(idx, red, 1).hits[0].id, "A");
    ASSERT_GT(poly_score(codes, ctx_m, idx.vector(1)), poly_score(codes, ctx_m, idx.vector(0)));
    auto res = retrieve_polyfaiss(ctx, codes, cfg, idx, c, 1, 2);
    EXPECT_EQ(res[0].passage.id, "B");
}

TEST(Maxsim, HandValues) {
    TokenMatrix q(2), d(2);
    q.push_back(std::vector<double>{1, 0});
    q.push_back(std::vector<double>{0, 1});
    d.push_back(std::vector<double>{1, 0});
    d.push_back(std::vector<double>{0.5, 0.5});
    EXPECT_DOUBLE_EQ(maxsim(q, d), 1.5);
    EXPECT_DOUBLE_EQ(maxsim(q, q), 2.0);
    TokenMatrix o(4), p(4);
    o.push_back(std::vector<double>{1, 0, 0, 0});
    p.push_back(std::vector<double>{0, 0, 1, 0});
    EXPECT_DOUBLE_EQ(maxsim(o, p), 0.0);
    EXPECT_THROW(maxsim(TokenMatrix(2), d), InvalidArgument);
}

TEST(Colbert, SharedTokensRankFirst) {
    auto c = small_corpus();
    auto cfg = enc(128);
    auto tidx = build_token_index(*c, cfg);
    for (std::size_t i = 0; i < c->size(); ++i) {
        auto res = retrieve_colbert((*c)[i].tokens, cfg, tidx, *c, 2, 4);
        EXPECT_EQ(res[0].passage.id, (*c)[i].id);
    }
    auto one = retrieve_colbert(tokenize("kaltan"), cfg, tidx, *c, 1, 4);
    EXPECT_EQ(one[0].prior, 1.0);
}

TEST(Colbert, HandRankingMatchesDirectMaxsim) {
    auto c = small_corpus();
    auto cfg = enc(128);
    auto tidx = build_token_index(*c, cfg);
    Tokens ctx = tokenize("harbor merchants stars");
    auto res = retrieve_colbert(ctx, cfg, tidx, *c, 4, 4);
    auto q = embed_tokens(ctx, cfg);
    for (std::size_t i = 0; i < res.size(); ++i) {
        auto direct = maxsim(q, embed_tokens(res[i].passage.retrieval_tokens(), cfg));
        EXPECT_NEAR(res[i].raw_score, direct, 1e-5);
        if (i + 1 < res.size()) {
            EXPECT_GE(res[i].raw_score, res[i + 1].raw_score);
        }
    }
}

TEST(Shared, RequiresMatchingIndex) {
    auto c = small_corpus();
    SharedEncoder encoder(enc(64));
    auto tidx = encoder.build_index(*c);
    auto res = retrieve_shared((*c)[2].tokens, encoder, tidx, *c, 1, 4);
    EXPECT_EQ(res[0].passage.id, "p2");
    encoder.reseed(99);
    EXPECT_THROW(retrieve_shared((*c)[2].tokens, encoder, tidx, *c, 1, 4), InvalidArgument);
    auto feats = encoder.generation_features(Tokens{"a"}, Tokens{"b", "c"});
    EXPECT_EQ(feats.rows(), 3u);
}

TEST(Recall, PassageAndSentenceModes) {
    auto c = small_corpus();
    std::vector<RetrievedDoc> res{{(*c)[1], 1, 0.0, 0.5}, {(*c)[0], 0, 0.0, 0.5}};
    EXPECT_TRUE(recall_at_k(res, "p1", 1));
    EXPECT_FALSE(recall_at_k(res, "p0", 1));
    EXPECT_TRUE(recall_at_k(res, "p0", 2));
    EXPECT_FALSE(recall_at_k(res, "p3", 2));
    EXPECT_TRUE(recall_at_k_sentence(res, "Founded by merchants", 2));
    // Sentence straddling two passages.
    EXPECT_FALSE(recall_at_k_sentence(res, "long ago a quiet monastery", 2));
}

TEST(RetrieverFacade, KindsAndValidation) {
    auto c = small_corpus();
    for (auto kind : {RetrieverKind::Tfidf, RetrieverKind::Dense, RetrieverKind::DprPoly, RetrieverKind::PolyFaiss,
                      RetrieverKind::Colbert, RetrieverKind::Shared}) {
        RetrieverConfig rc;
        rc.kind = kind;
        rc.k = 2;
        rc.n_rerank = 4;
        Retriever r(c, rc, enc(128), 0);
        auto res = r.retrieve((*c)[2].tokens);
        ASSERT_EQ(res.size(), 2u) << to_string(kind);
        EXPECT_EQ(res[0].passage.id, "p2") << to_string(kind);
        double sum = 0;
        for (auto& d : res) sum += d.prior;
        EXPECT_NEAR(sum, 1.0, 1e-12);
        EXPECT_EQ(parse_retriever_kind(to_string(kind)), kind);
    }
    RetrieverConfig none;
    none.kind = RetrieverKind::None;
    EXPECT_TRUE(Retriever(c, none, enc(), 0).retrieve(Tokens{"x"}).empty());
    RetrieverConfig bad;
    bad.kind = RetrieverKind::Colbert;
    bad.k = 10;
    bad.n_rerank = 5;
    EXPECT_THROW(bad.validate(), InvalidArgument);
    EXPECT_THROW(parse_retriever_kind("bm99"), InvalidArgument);
}
