#include <cmath>

#include <gtest/gtest.h>

#include <ragdial/encode.hpp>

using namespace ragdial;

namespace {

DenseVector basis(std::size_t dim, std::size_t i) {
    DenseVector v(dim);
    v.values[i] = 1.0;
    return v;
}

TokenMatrix rows(std::size_t dim, const std::vector<DenseVector>& vs) {
    TokenMatrix m(dim);
    for (const auto& v : vs) m.push_back(v.span());
    return m;
}

} // namespace

TEST(EmbedHashed, DeterministicAndNormalized) {
    Tokens t{"the", "quick", "fox"};
    auto a = embed_hashed(t, 64, 7);
    auto b = embed_hashed(t, 64, 7);
    EXPECT_EQ(a, b);
    EXPECT_NEAR(a.norm(), 1.0, 1e-12);
    EXPECT_NE(embed_hashed(t, 64, 8), a);
}

TEST(EmbedHashed, EmptyIsZero) {
    auto v = embed_hashed(Tokens{}, 32, 0);
    EXPECT_EQ(v.dim(), 32u);
    for (double x : v.values) EXPECT_EQ(x, 0.0);
}

TEST(EmbedHashed, RejectsTinyDimension) {
    EXPECT_THROW(embed_hashed(Tokens{"a"}, 4, 0), InvalidArgument);
}

TEST(EmbedHashed, SharedTokensScoreHigher) {
    auto q = embed_hashed(Tokens{"zorvak", "harbor"}, 128, 0);
    auto near = embed_hashed(Tokens{"zorvak", "harbor", "founded"}, 128, 0);
    auto far = embed_hashed(Tokens{"plinth", "monastery", "built"}, 128, 0);
    EXPECT_GT(dot(q, near), dot(q, far));
}

TEST(EmbedTokens, OneRowPerToken) {
    auto m = embed_tokens(Tokens{"a", "b", "a"}, 16, 3);
    ASSERT_EQ(m.rows(), 3u);
    auto r0 = m.row(0), r2 = m.row(2);
    EXPECT_TRUE(std::equal(r0.begin(), r0.end(), r2.begin()));
    EXPECT_EQ(m.row(1).size(), 16u);
}

TEST(Projection, IdentityZeroAndScaling) {
    auto v = embed_hashed(Tokens{"x", "y"}, 16, 1);
    auto id = ContextProjection::identity(16);
    EXPECT_EQ(project_context(v, id), v);
    EXPECT_EQ(project_context(DenseVector(16), id), DenseVector(16));
    auto twice = id;
    for (double& w : twice.weights) w *= 2.0;
    auto out = project_context(v, twice);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(out.values[i], 2.0 * v.values[i]);
    EXPECT_THROW(project_context(DenseVector(8), id), InvalidArgument);
}

TEST(Projection, InitialIsNearIdentity) {
    auto p = ContextProjection::initial(8, 5);
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(p.at(r, c), r == c ? 1.0 : 0.0, 0.01);
}

TEST(PolyScore, SingleCodeSingleTokenIsDot) {
    PolyCodes codes{{basis(4, 2)}};
    DenseVector t(std::vector<double>{0.3, -0.2, 0.5, 0.1});
    DenseVector cand(std::vector<double>{1.0, 2.0, -1.0, 0.5});
    EXPECT_NEAR(poly_score(codes, rows(4, {t}), cand), dot(t, cand), 1e-15);
}

TEST(PolyScore, OrthogonalCandidateScoresZero) {
    PolyCodes codes{{basis(4, 0), basis(4, 1)}};
    EXPECT_EQ(poly_score(codes, rows(4, {basis(4, 0), basis(4, 1)}), basis(4, 3)), 0.0);
}

TEST(PolyScore, TwoCodeBasisFixture) {
    PolyCodes codes{{basis(2, 0), basis(2, 1)}};
    auto ctx = rows(2, {basis(2, 0), basis(2, 1)});
    EXPECT_NEAR(poly_score(codes, ctx, basis(2, 0)), 0.5524578318729171, 1e-12);
}

TEST(PolyReduce, MeanOfAttended) {
    PolyCodes codes{{basis(2, 0), basis(2, 1)}};
    auto q = reduce_poly_query(codes, rows(2, {basis(2, 0), basis(2, 1)}));
    EXPECT_NEAR(q.values[0], 0.5, 1e-12);
    EXPECT_NEAR(q.values[1], 0.5, 1e-12);

    PolyCodes same{{basis(2, 0), basis(2, 0)}};
    PolyCodes one{{basis(2, 0)}};
    auto ctx = rows(2, {basis(2, 0), DenseVector(std::vector<double>{0.2, 0.7})});
    auto a = reduce_poly_query(same, ctx);
    auto b = reduce_poly_query(one, ctx);
    EXPECT_NEAR(a.values[0], b.values[0], 1e-15);
    EXPECT_NEAR(a.values[1], b.values[1], 1e-15);
}

TEST(PolyCodes, RandomCodesAreUnitAndSeeded) {
    auto a = PolyCodes::random(3, 16, 9);
    auto b = PolyCodes::random(3, 16, 9);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(a.codes[i].norm(), 1.0, 1e-12);
        EXPECT_EQ(a.codes[i], b.codes[i]);
    }
    EXPECT_THROW(PolyCodes::random(0, 16, 0), InvalidArgument);
}

TEST(PolyScore, EmptyContextRejected) {
    PolyCodes codes{{basis(2, 0)}};
    EXPECT_THROW(poly_score(codes, TokenMatrix(2), basis(2, 0)), InvalidArgument);
}
