#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "encode.hpp"

namespace ragdial {

struct Hit {
    std::string id;
    std::size_t row = 0;  // passage ordinal inside the index
    double score = 0.0;
    bool operator==(const Hit&) const = default;
};

struct SearchResult {
    std::vector<Hit> hits;
    bool truncated = false;  // k exceeded the number of entries
};

namespace detail {

// Descending score, ascending id.
inline bool hit_before(const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
}

inline std::vector<Hit> top_k(std::vector<Hit> all, std::size_t k) {
    k = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), hit_before);
    all.resize(k);
    return all;
}

} // namespace detail

/// Exact maximum-inner-product index. Document vectors are fixed once built.
class FlatIndex {
public:
    FlatIndex() = default;
    FlatIndex(std::uint32_t dim, std::vector<std::string> ids, std::vector<float> data)
        : dim_(dim), ids_(std::move(ids)), data_(std::move(data)) {
        if (dim_ == 0 || data_.size() != ids_.size() * dim_)
            throw InvalidArgument("flat index: vector data does not match id count");
    }

    std::uint32_t dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& ids() const { return ids_; }
    const std::vector<float>& data() const { return data_; }

    std::span<const float> row(std::size_t i) const {
        return std::span<const float>(data_).subspan(i * dim_, dim_);
    }

    DenseVector vector(std::size_t i) const {
        auto r = row(i);
        return DenseVector(std::vector<double>(r.begin(), r.end()));
    }

private:
    std::uint32_t dim_ = 0;
    std::vector<std::string> ids_;
    std::vector<float> data_;
};

inline FlatIndex build_flat_index(const Corpus& corpus, const EncoderConfig& cfg) {
    if (corpus.empty()) throw InvalidArgument("cannot index an empty corpus");
    std::vector<float> data(corpus.size() * cfg.dim);
    parallel_for(corpus.size(), [&](std::size_t i) {
        auto v = embed_hashed(corpus[i].retrieval_tokens(), cfg);
        for (std::size_t j = 0; j < cfg.dim; ++j) data[i * cfg.dim + j] = static_cast<float>(v.values[j]);
    });
    std::vector<std::string> ids;
    ids.reserve(corpus.size());
    for (const auto& p : corpus.passages()) ids.push_back(p.id);
    return FlatIndex(static_cast<std::uint32_t>(cfg.dim), std::move(ids), std::move(data));
}

/// Exact top-k by inner product; ties go to the smaller id.
inline SearchResult mips_search(const FlatIndex& index, const DenseVector& query, std::size_t k) {
    if (k == 0) throw InvalidArgument("mips_search: k must be at least 1");
    if (query.dim() != index.dim()) throw InvalidArgument("mips_search: query dimension mismatch");
    std::vector<Hit> all(index.size());
    for (std::size_t i = 0; i < index.size(); ++i)
        all[i] = Hit{index.ids()[i], i, detail::dot(index.row(i), query.span())};
    SearchResult res;
    res.truncated = k > index.size();
    res.hits = detail::top_k(std::move(all), k);
    return res;
}

struct Posting {
    std::uint32_t doc = 0;
    std::uint32_t tf = 0;
    bool operator==(const Posting&) const = default;
};

/// TF-IDF inverted index scored with fixed BM25-like saturation.
class InvertedIndex {
public:
    static constexpr double kSaturation = 0.5;
    static constexpr double kLengthNorm = 1.5;

    InvertedIndex() = default;

    explicit InvertedIndex(const Corpus& corpus) {
        if (corpus.empty()) throw InvalidArgument("cannot index an empty corpus");
        for (std::size_t d = 0; d < corpus.size(); ++d) {
            ids_.push_back(corpus[d].id);
            auto toks = corpus[d].retrieval_tokens();
            doc_lengths_.push_back(static_cast<std::uint32_t>(toks.size()));
            std::map<std::string, std::uint32_t> tf;
            for (auto& t : toks) ++tf[t];
            for (auto& [t, c] : tf) postings_[t].push_back(Posting{static_cast<std::uint32_t>(d), c});
        }
        finalize();
    }

    InvertedIndex(std::vector<std::string> ids, std::vector<std::uint32_t> doc_lengths,
                  std::map<std::string, std::vector<Posting>> postings)
        : ids_(std::move(ids)), doc_lengths_(std::move(doc_lengths)), postings_(std::move(postings)) {
        if (ids_.size() != doc_lengths_.size()) throw InvalidArgument("inverted index: length table mismatch");
        for (auto& [t, list] : postings_)
            for (auto& p : list)
                if (p.doc >= ids_.size()) throw FormatError("inverted index: posting out of range");
        finalize();
    }

    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& ids() const { return ids_; }
    const std::vector<std::uint32_t>& doc_lengths() const { return doc_lengths_; }
    const std::map<std::string, std::vector<Posting>>& postings() const { return postings_; }
    double avg_length() const { return avg_len_; }

    double idf(const std::string& token) const {
        auto it = postings_.find(token);
        if (it == postings_.end()) return 0.0;
        return std::log(1.0 + static_cast<double>(ids_.size()) / static_cast<double>(it->second.size()));
    }

private:
    void finalize() {
        for (auto& [t, list] : postings_)
            std::sort(list.begin(), list.end(), [](auto& a, auto& b) { return a.doc < b.doc; });
        double total = std::accumulate(doc_lengths_.begin(), doc_lengths_.end(), 0.0);
        avg_len_ = ids_.empty() ? 0.0 : total / static_cast<double>(ids_.size());
    }

    std::vector<std::string> ids_;
    std::vector<std::uint32_t> doc_lengths_;
    std::map<std::string, std::vector<Posting>> postings_;
    double avg_len_ = 0.0;
};

/// score(d) = sum over query tokens of idf(t) * tf / (tf + 0.5 + 1.5 * len(d) / avg_len).
/// Repeated query tokens count once per occurrence.
inline SearchResult tfidf_search(const InvertedIndex& index, const Tokens& query, std::size_t k) {
    if (k == 0) throw InvalidArgument("tfidf_search: k must be at least 1");
    std::map<std::uint32_t, double> scores;
    for (const auto& t : query) {
        auto it = index.postings().find(t);
        if (it == index.postings().end()) continue;
        double idf = index.idf(t);
        for (const auto& p : it->second) {
            double tf = p.tf;
            double len = index.doc_lengths()[p.doc];
            scores[p.doc] += idf * tf /
                             (tf + InvertedIndex::kSaturation + InvertedIndex::kLengthNorm * len / index.avg_length());
        }
    }
    std::vector<Hit> all;
    all.reserve(scores.size());
    for (auto& [doc, s] : scores) all.push_back(Hit{index.ids()[doc], doc, s});
    SearchResult res;
    res.truncated = k > all.size();
    res.hits = detail::top_k(std::move(all), k);
    return res;
}

/// Every passage token vector, with the passage that owns it.
class TokenIndex {
public:
    TokenIndex() = default;
    TokenIndex(std::uint32_t dim, std::vector<std::string> ids, std::vector<std::uint32_t> owner,
               std::vector<float> data)
        : dim_(dim), ids_(std::move(ids)), owner_(std::move(owner)), data_(std::move(data)) {
        if (dim_ == 0 || data_.size() != owner_.size() * dim_)
            throw InvalidArgument("token index: vector data does not match owner table");
        for (auto o : owner_)
            if (o >= ids_.size()) throw FormatError("token index: owner out of range");
        first_row_.assign(ids_.size() + 1, 0);
        for (auto o : owner_) ++first_row_[o + 1];
        std::partial_sum(first_row_.begin(), first_row_.end(), first_row_.begin());
        for (std::size_t r = 1; r < owner_.size(); ++r)
            if (owner_[r] < owner_[r - 1]) throw FormatError("token index: rows not grouped by passage");
    }

    std::uint32_t dim() const { return dim_; }
    std::size_t rows() const { return owner_.size(); }
    std::size_t passages() const { return ids_.size(); }
    const std::vector<std::string>& ids() const { return ids_; }
    const std::vector<std::uint32_t>& owner() const { return owner_; }
    const std::vector<float>& data() const { return data_; }

    std::span<const float> row(std::size_t i) const {
        return std::span<const float>(data_).subspan(i * dim_, dim_);
    }

    /// The token matrix stored for passage p.
    TokenMatrix passage_matrix(std::size_t p) const {
        TokenMatrix m(dim_);
        std::vector<double> buf(dim_);
        for (std::size_t r = first_row_[p]; r < first_row_[p + 1]; ++r) {
            auto src = row(r);
            std::copy(src.begin(), src.end(), buf.begin());
            m.push_back(buf);
        }
        return m;
    }

private:
    std::uint32_t dim_ = 0;
    std::vector<std::string> ids_;
    std::vector<std::uint32_t> owner_;
    std::vector<float> data_;
    std::vector<std::size_t> first_row_;
};

inline TokenIndex build_token_index(const Corpus& corpus, const EncoderConfig& cfg) {
    if (corpus.empty()) throw InvalidArgument("cannot index an empty corpus");
    std::vector<TokenMatrix> mats(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) { mats[i] = embed_tokens(corpus[i].retrieval_tokens(), cfg); });
    std::vector<std::string> ids;
    std::vector<std::uint32_t> owner;
    std::vector<float> data;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        ids.push_back(corpus[i].id);
        for (std::size_t r = 0; r < mats[i].rows(); ++r) {
            owner.push_back(static_cast<std::uint32_t>(i));
            for (double x : mats[i].row(r)) data.push_back(static_cast<float>(x));
        }
    }
    return TokenIndex(static_cast<std::uint32_t>(cfg.dim), std::move(ids), std::move(owner), std::move(data));
}

/// First-stage late-interaction search. Each query token keeps its best
/// `per_token` positive-scoring token rows (0 keeps all of them); passages owning
/// any kept row become candidates, ranked by their best single token score and
/// capped at n_candidates. Ties on that score go to the passage whose kept rows
/// cover the query best (sum over query tokens of the per-token best), then to
/// the smaller id.
inline std::vector<Hit> token_search(const TokenIndex& index, const TokenMatrix& query,
                                     std::size_t n_candidates, std::size_t per_token = 0) {
    if (query.rows() == 0) throw InvalidArgument("token_search: empty query");
    if (n_candidates == 0) throw InvalidArgument("token_search: n_candidates must be at least 1");
    if (query.dim() != index.dim()) throw InvalidArgument("token_search: dimension mismatch");
    const auto neg_inf = -std::numeric_limits<double>::infinity();
    std::vector<double> best(index.passages(), neg_inf);
    std::vector<double> coverage(index.passages(), 0.0);
    std::vector<double> this_token(index.passages(), neg_inf);
    std::vector<std::size_t> touched;
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t q = 0; q < query.rows(); ++q) {
        scored.clear();
        for (std::size_t r = 0; r < index.rows(); ++r) {
            double s = detail::dot(index.row(r), query.row(q));
            if (s > 0.0) scored.emplace_back(s, r);
        }
        std::size_t keep = per_token == 0 ? scored.size() : std::min(per_token, scored.size());
        std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                          [](auto& a, auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        touched.clear();
        for (std::size_t i = 0; i < keep; ++i) {
            auto owner = index.owner()[scored[i].second];
            if (this_token[owner] == neg_inf) touched.push_back(owner);
            this_token[owner] = std::max(this_token[owner], scored[i].first);
        }
        for (auto p : touched) {
            best[p] = std::max(best[p], this_token[p]);
            coverage[p] += this_token[p];
            this_token[p] = neg_inf;
        }
    }
    std::vector<std::size_t> order;
    for (std::size_t p = 0; p < best.size(); ++p)
        if (std::isfinite(best[p])) order.push_back(p);
    std::size_t n = std::min(n_candidates, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (best[a] != best[b]) return best[a] > best[b];
                          if (coverage[a] != coverage[b]) return coverage[a] > coverage[b];
                          return index.ids()[a] < index.ids()[b];
                      });
    std::vector<Hit> hits;
    for (std::size_t i = 0; i < n; ++i) hits.push_back(Hit{index.ids()[order[i]], order[i], best[order[i]]});
    return hits;
}

// ---------------------------------------------------------------------------
// Binary persistence. All integers and floats are little-endian.

inline constexpr std::array<char, 8> kFlatMagic = {'R', 'A', 'G', 'I', 'D', 'X', '0', '1'};
inline constexpr std::array<char, 8> kTfidfMagic = {'R', 'A', 'G', 'T', 'F', 'I', '0', '1'};
inline constexpr std::array<char, 8> kTokenMagic = {'R', 'A', 'G', 'T', 'O', 'K', '0', '1'};

namespace detail {

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
        if (!out_) throw IoError("cannot open for writing: " + path);
    }

    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    template <typename T>
    void scalar(T v) {
        static_assert(std::is_arithmetic_v<T>);
        unsigned char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
        bytes(buf, sizeof(T));
    }

    void string(const std::string& s) {
        scalar<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void finish() {
        out_.flush();
        if (!out_) throw IoError("write failed: " + path_);
    }

private:
    std::ofstream out_;
    std::string path_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open for reading: " + path);
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw FormatError("truncated index file: " + path_);
    }

    void magic(const std::array<char, 8>& expected) {
        need(8);
        if (std::memcmp(buf_.data(), expected.data(), 8) != 0)
            throw FormatError("bad magic or unsupported version in " + path_);
        pos_ += 8;
    }

    template <typename T>
    T scalar() {
        need(sizeof(T));
        unsigned char b[sizeof(T)];
        std::memcpy(b, buf_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
        pos_ += sizeof(T);
        T v;
        std::memcpy(&v, b, sizeof(T));
        return v;
    }

    std::string string() {
        auto n = scalar<std::uint32_t>();
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    std::vector<float> floats(std::uint64_t n) {
        if (n > (buf_.size() - pos_) / sizeof(float)) throw FormatError("truncated index file: " + path_);
        std::vector<float> v(n);
        for (auto& x : v) x = scalar<float>();
        return v;
    }

    void expect_end() const {
        if (pos_ != buf_.size()) throw FormatError("trailing bytes in index file: " + path_);
    }

    // Guards counts read from the file before allocating.
    void check_count(std::uint64_t n, std::size_t min_bytes_each) const {
        if (min_bytes_each && n > (buf_.size() - pos_) / min_bytes_each)
            throw FormatError("truncated index file: " + path_);
    }

private:
    std::string path_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline void save_index(const FlatIndex& index, const std::string& path) {
    detail::BinaryWriter w(path);
    w.bytes(kFlatMagic.data(), 8);
    w.scalar<std::uint32_t>(index.dim());
    w.scalar<std::uint64_t>(index.size());
    for (float x : index.data()) w.scalar<float>(x);
    for (const auto& id : index.ids()) w.string(id);
    w.finish();
}

inline FlatIndex load_flat_index(const std::string& path) {
    detail::BinaryReader r(path);
    r.magic(kFlatMagic);
    auto dim = r.scalar<std::uint32_t>();
    auto rows = r.scalar<std::uint64_t>();
    if (dim == 0) throw FormatError("flat index with zero dimension: " + path);
    r.check_count(rows, std::size_t(dim) * sizeof(float));
    auto data = r.floats(rows * dim);
    std::vector<std::string> ids;
    ids.reserve(rows);
    for (std::uint64_t i = 0; i < rows; ++i) ids.push_back(r.string());
    r.expect_end();
    return FlatIndex(dim, std::move(ids), std::move(data));
}

inline void save_index(const InvertedIndex& index, const std::string& path) {
    detail::BinaryWriter w(path);
    w.bytes(kTfidfMagic.data(), 8);
    w.scalar<std::uint64_t>(index.size());
    for (const auto& id : index.ids()) w.string(id);
    for (auto len : index.doc_lengths()) w.scalar<std::uint32_t>(len);
    w.scalar<std::uint64_t>(index.postings().size());
    for (const auto& [term, list] : index.postings()) {
        w.string(term);
        w.scalar<double>(index.idf(term));
        w.scalar<std::uint64_t>(list.size());
        for (const auto& p : list) {
            w.scalar<std::uint32_t>(p.doc);
            w.scalar<std::uint32_t>(p.tf);
        }
    }
    w.finish();
}

inline InvertedIndex load_inverted_index(const std::string& path) {
    detail::BinaryReader r(path);
    r.magic(kTfidfMagic);
    auto n = r.scalar<std::uint64_t>();
    r.check_count(n, 4);
    std::vector<std::string> ids;
    for (std::uint64_t i = 0; i < n; ++i) ids.push_back(r.string());
    std::vector<std::uint32_t> lengths(n);
    for (auto& l : lengths) l = r.scalar<std::uint32_t>();
    auto n_terms = r.scalar<std::uint64_t>();
    r.check_count(n_terms, 20);
    std::map<std::string, std::vector<Posting>> postings;
    for (std::uint64_t t = 0; t < n_terms; ++t) {
        auto term = r.string();
        (void)r.scalar<double>();  // idf is recomputed from document frequencies
        auto count = r.scalar<std::uint64_t>();
        r.check_count(count, 8);
        auto& list = postings[term];
        for (std::uint64_t i = 0; i < count; ++i) {
            Posting p;
            p.doc = r.scalar<std::uint32_t>();
            p.tf = r.scalar<std::uint32_t>();
            list.push_back(p);
        }
    }
    r.expect_end();
    return InvertedIndex(std::move(ids), std::move(lengths), std::move(postings));
}

inline void save_index(const TokenIndex& index, const std::string& path) {
    detail::BinaryWriter w(path);
    w.bytes(kTokenMagic.data(), 8);
    w.scalar<std::uint32_t>(index.dim());
    w.scalar<std::uint64_t>(index.rows());
    for (float x : index.data()) w.scalar<float>(x);
    for (auto o : index.owner()) w.scalar<std::uint32_t>(o);
    w.scalar<std::uint64_t>(index.passages());
    for (const auto& id : index.ids()) w.string(id);
    w.finish();
}

inline TokenIndex load_token_index(const std::string& path) {
    detail::BinaryReader r(path);
    r.magic(kTokenMagic);
    auto dim = r.scalar<std::uint32_t>();
    auto rows = r.scalar<std::uint64_t>();
    if (dim == 0) throw FormatError("token index with zero dimension: " + path);
    r.check_count(rows, std::size_t(dim) * sizeof(float) + 4);
    auto data = r.floats(rows * dim);
    std::vector<std::uint32_t> owner(rows);
    for (auto& o : owner) o = r.scalar<std::uint32_t>();
    auto n = r.scalar<std::uint64_t>();
    r.check_count(n, 4);
    std::vector<std::string> ids;
    for (std::uint64_t i = 0; i < n; ++i) ids.push_back(r.string());
    r.expect_end();
    return TokenIndex(dim, std::move(ids), std::move(owner), std::move(data));
}

struct IndexInfo {
    std::string magic;
    std::uint32_t dim = 0;  // 0 for inverted indexes
    std::uint64_t rows = 0;
    std::uint64_t passages = 0;
    std::uint64_t terms = 0;
};

/// Reads and validates any of the three index formats.
inline IndexInfo inspect_index(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::array<char, 8> magic{};
    in.read(magic.data(), 8);
    if (in.gcount() != 8) throw FormatError("truncated index file: " + path);
    IndexInfo info;
    info.magic.assign(magic.begin(), magic.end());
    if (magic == kFlatMagic) {
        auto idx = load_flat_index(path);
        info.dim = idx.dim();
        info.rows = info.passages = idx.size();
    } else if (magic == kTfidfMagic) {
        auto idx = load_inverted_index(path);
        info.rows = info.passages = idx.size();
        info.terms = idx.postings().size();
    } else if (magic == kTokenMagic) {
        auto idx = load_token_index(path);
        info.dim = idx.dim();
        info.rows = idx.rows();
        info.passages = idx.passages();
    } else {
        throw FormatError("bad magic or unsupported version in " + path);
    }
    return info;
}

} // namespace ragdial
