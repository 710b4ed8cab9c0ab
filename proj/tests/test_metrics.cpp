#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <ragdial/metrics.hpp>

using namespace ragdial;

namespace {

std::size_t brute_lcs(const Tokens& a, const Tokens& b) {
    std::size_t best = 0;
    for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
        Tokens sub;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (mask & (1u << i)) sub.push_back(a[i]);
        std::size_t j = 0;
        for (std::size_t i = 0; i < b.size() && j < sub.size(); ++i)
            if (b[i] == sub[j]) ++j;
        if (j == sub.size()) best = std::max(best, sub.size());
    }
    return best;
}

Tokens random_tokens(std::mt19937_64& rng, std::size_t n) {
    std::uniform_int_distribution<int> pick(0, 3);
    Tokens t;
    for (std::size_t i = 0; i < n; ++i) t.push_back(std::string(1, static_cast<char>('a' + pick(rng))));
    return t;
}

std::string join(const Tokens& t) {
    std::string s;
    for (const auto& x : t) s += (s.empty() ? "" : " ") + x;
    return s;
}

} // namespace

TEST(F1, Examples) {
    EXPECT_NEAR(f1("the cat sat", "the cat ran"), 2.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(f1("the cat", "the cat"), 1.0);
    EXPECT_EQ(f1("", "the cat"), 0.0);
    EXPECT_EQ(f1("dog", "cat"), 0.0);
    EXPECT_NEAR(f1("a a b", "a b b"), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(f1("The, CAT!", "the cat"), 1.0, 1e-15);
}

TEST(F1, Symmetric) {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 100; ++i) {
        auto a = join(random_tokens(rng, 1 + i % 6));
        auto b = join(random_tokens(rng, 1 + i % 5));
        EXPECT_DOUBLE_EQ(f1(a, b), f1(b, a));
    }
}

TEST(RareF1, FrequencySplit) {
    auto freq = build_frequency_table({"a a a b b c"});
    EXPECT_TRUE(freq.is_frequent("a"));
    EXPECT_FALSE(freq.is_frequent("b"));
    EXPECT_NEAR(rare_f1("a b c", "a b", freq), 2.0 / 3.0, 1e-15);
    EXPECT_EQ(rare_f1("a", "a", freq), 0.0);
    EXPECT_DOUBLE_EQ(rare_f1("zebra", "zebra a", freq), 1.0);
}

TEST(Bleu4, HandValues) {
    EXPECT_NEAR(bleu4("a b c d e", "a b c d f"), 0.668740304976422, 1e-12);
    EXPECT_NEAR(bleu4("a b c d", "a b c d"), 1.0, 1e-12);
    EXPECT_EQ(bleu4("", "a b"), 0.0);
    EXPECT_LT(bleu4("x y z w", "a b c d"), 1e-8);
    EXPECT_LT(bleu4("a b c d", "a b c d e f g h"), bleu4("a b c d", "a b c d"));
}

TEST(RougeL, HandValues) {
    EXPECT_NEAR(rouge_l("a b c d", "a c d"), 6.0 / 7.0, 1e-12);
    EXPECT_DOUBLE_EQ(rouge_l("a b", "a b"), 1.0);
    EXPECT_EQ(rouge_l("a", ""), 0.0);
    EXPECT_EQ(rouge_l("x", "y"), 0.0);
}

TEST(RougeL, LcsMatchesBruteForce) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 200; ++i) {
        auto a = random_tokens(rng, i % 9);
        auto b = random_tokens(rng, (i * 7) % 10);
        EXPECT_EQ(detail::lcs_length(a, b), brute_lcs(a, b));
    }
}

TEST(Aggregate, CorpusPerplexityAndMeans) {
    MetricRow a, b;
    a.nll = 3 * std::log(2.0);
    a.tokens = 3;
    a.f1 = 1.0;
    a.kf1 = 0.5;
    a.recall = {{1, true}, {5, true}};
    b.nll = std::log(2.0);
    b.tokens = 1;
    b.f1 = 0.0;
    b.recall = {{1, false}, {5, true}};
    auto r = aggregate({a, b});
    EXPECT_NEAR(r.ppl, 2.0, 1e-12);
    EXPECT_DOUBLE_EQ(r.f1, 0.5);
    ASSERT_TRUE(r.kf1.has_value());
    EXPECT_DOUBLE_EQ(*r.kf1, 0.5);
    EXPECT_DOUBLE_EQ(r.recall_at.at(1), 0.5);
    EXPECT_DOUBLE_EQ(r.recall_at.at(5), 1.0);
    EXPECT_EQ(r.n_examples, 2u);
    EXPECT_THROW(aggregate({}), InvalidArgument);
}

TEST(Aggregate, NoKnowledgeMeansNoKf1) {
    MetricRow a;
    a.nll = 1.0;
    a.tokens = 1;
    EXPECT_FALSE(aggregate({a}).kf1.has_value());
}
