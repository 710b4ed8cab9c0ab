#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"

namespace ragdial {

namespace detail {

inline double bag_f1(const Tokens& pred, const Tokens& ref) {
    if (pred.empty() || ref.empty()) return 0.0;
    std::map<std::string, long> counts;
    for (const auto& t : ref) ++counts[t];
    long overlap = 0;
    for (const auto& t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
    double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

} // namespace detail

/// Unigram F1 with multiset overlap; 0 when either side is empty.
inline double f1(const std::string& prediction, const std::string& reference) {
    return detail::bag_f1(tokenize(prediction), tokenize(reference));
}

inline double knowledge_f1(const std::string& prediction, const std::string& gold_knowledge) {
    return f1(prediction, gold_knowledge);
}

/// F1 over infrequent tokens only. Tokens missing from the table count as rare.
inline double rare_f1(const std::string& prediction, const std::string& reference, const FreqTable& freq) {
    auto keep_rare = [&](const Tokens& toks) {
        Tokens out;
        for (const auto& t : toks)
            if (!freq.is_frequent(t)) out.push_back(t);
        return out;
    };
    return detail::bag_f1(keep_rare(tokenize(prediction)), keep_rare(tokenize(reference)));
}

inline constexpr double kBleuSmoothing = 1e-9;

/// Sentence BLEU-4 against one reference. A zero n-gram match count is
/// replaced by 1e-9 precision.
inline double bleu4(const std::string& prediction, const std::string& reference) {
    auto pred = tokenize(prediction);
    auto ref = tokenize(reference);
    if (pred.empty()) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        std::map<Tokens, long> ref_counts;
        for (std::size_t i = 0; i + n <= ref.size(); ++i)
            ++ref_counts[Tokens(ref.begin() + static_cast<std::ptrdiff_t>(i), ref.begin() + static_cast<std::ptrdiff_t>(i + n))];
        long matches = 0, total = 0;
        for (std::size_t i = 0; i + n <= pred.size(); ++i) {
            ++total;
            auto it = ref_counts.find(
                Tokens(pred.begin() + static_cast<std::ptrdiff_t>(i), pred.begin() + static_cast<std::ptrdiff_t>(i + n)));
            if (it != ref_counts.end() && it->second > 0) {
                --it->second;
                ++matches;
            }
        }
        double precision = matches > 0 ? static_cast<double>(matches) / static_cast<double>(total) : kBleuSmoothing;
        log_sum += std::log(precision);
    }
    double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(ref.size()) / static_cast<double>(pred.size())));
    return bp * std::exp(log_sum / 4.0);
}

/// ROUGE-L F-measure with beta = 1.
inline double rouge_l(const std::string& prediction, const std::string& reference) {
    auto pred = tokenize(prediction);
    auto ref = tokenize(reference);
    if (pred.empty() || ref.empty()) return 0.0;
    double lcs = static_cast<double>(detail::lcs_length(pred, ref));
    if (lcs == 0.0) return 0.0;
    double p = lcs / static_cast<double>(pred.size());
    double r = lcs / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

/// One example's scores.
struct MetricRow {
    double nll = 0.0;
    std::size_t tokens = 0;
    double f1 = 0.0;
    std::optional<double> kf1;  // absent when the example has no gold knowledge
    double rf1 = 0.0;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    std::map<std::size_t, bool> recall;  // k -> hit
};

struct EvalReport {
    double ppl = 1.0;
    double f1 = 0.0;
    std::optional<double> kf1;
    double rf1 = 0.0;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    std::map<std::size_t, double> recall_at;
    std::size_t n_examples = 0;
};

/// Means of the per-example metrics; corpus-level perplexity
/// exp(sum NLL / sum tokens). KF1 averages only rows that carry knowledge.
inline EvalReport aggregate(const std::vector<MetricRow>& rows) {
    if (rows.empty()) throw InvalidArgument("aggregate: no rows");
    EvalReport r;
    r.n_examples = rows.size();
    double nll = 0.0, kf1 = 0.0;
    std::size_t tokens = 0, n_kf1 = 0;
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> hits;
    for (const auto& row : rows) {
        nll += row.nll;
        tokens += row.tokens;
        r.f1 += row.f1;
        r.rf1 += row.rf1;
        r.bleu4 += row.bleu4;
        r.rouge_l += row.rouge_l;
        if (row.kf1) {
            kf1 += *row.kf1;
            ++n_kf1;
        }
        for (auto [k, hit] : row.recall) {
            hits[k].first += hit ? 1 : 0;
            hits[k].second += 1;
        }
    }
    double n = static_cast<double>(rows.size());
    r.f1 /= n;
    r.rf1 /= n;
    r.bleu4 /= n;
    r.rouge_l /= n;
    r.ppl = tokens > 0 ? std::exp(nll / static_cast<double>(tokens)) : 1.0;
    if (n_kf1) r.kf1 = kf1 / static_cast<double>(n_kf1);
    for (auto& [k, h] : hits) r.recall_at[k] = static_cast<double>(h.first) / static_cast<double>(h.second);
    return r;
}

} // namespace ragdial
