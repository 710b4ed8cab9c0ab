#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"

namespace ragdial {

namespace detail {

// Decodes one UTF-8 code point starting at s[i]; advances i. Invalid bytes
// decode to themselves so tokenization never fails.
inline char32_t next_code_point(std::string_view s, std::size_t& i) {
    auto b0 = static_cast<unsigned char>(s[i]);
    auto cont = [&](std::size_t k) -> int {
        if (i + k >= s.size()) return -1;
        auto b = static_cast<unsigned char>(s[i + k]);
        return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
    };
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    if ((b0 & 0xE0) == 0xC0) {
        int c1 = cont(1);
        if (c1 >= 0) {
            i += 2;
            return (char32_t(b0 & 0x1F) << 6) | char32_t(c1);
        }
    } else if ((b0 & 0xF0) == 0xE0) {
        int c1 = cont(1), c2 = cont(2);
        if (c1 >= 0 && c2 >= 0) {
            i += 3;
            return (char32_t(b0 & 0x0F) << 12) | (char32_t(c1) << 6) | char32_t(c2);
        }
    } else if ((b0 & 0xF8) == 0xF0) {
        int c1 = cont(1), c2 = cont(2), c3 = cont(3);
        if (c1 >= 0 && c2 >= 0 && c3 >= 0) {
            i += 4;
            return (char32_t(b0 & 0x07) << 18) | (char32_t(c1) << 12) | (char32_t(c2) << 6) |
                   char32_t(c3);
        }
    }
    ++i;
    return b0;
}

inline void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
}

inline bool is_space(char32_t c) {
    return c == U' ' || (c >= U'\t' && c <= U'\r') || c == 0x00A0 || c == 0x1680 ||
           (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
           c == 0x205F || c == 0x3000;
}

// ASCII punctuation plus the punctuation blocks that show up in encyclopedic text.
inline bool is_punct(char32_t c) {
    if (c < 0x80) {
        return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
               (c >= 0x7B && c <= 0x7E);
    }
    switch (c) {
    case 0x00A1: case 0x00A7: case 0x00AB: case 0x00B6: case 0x00B7: case 0x00BB: case 0x00BF:
    case 0x037E: case 0x0387: case 0x055C: case 0x055D: case 0x0589: case 0x05BE: case 0x060C:
    case 0x061B: case 0x061F: case 0x06D4:
        return true;
    default:
        break;
    }
    return (c >= 0x2010 && c <= 0x2027) || (c >= 0x2030 && c <= 0x205E) ||
           (c >= 0x2E00 && c <= 0x2E4F) || (c >= 0x3001 && c <= 0x3003) ||
           (c >= 0x3008 && c <= 0x3011) || (c >= 0x3014 && c <= 0x301F) ||
           (c >= 0xFE10 && c <= 0xFE19) || (c >= 0xFE30 && c <= 0xFE4F) ||
           (c >= 0xFF01 && c <= 0xFF0F) || (c >= 0xFF1A && c <= 0xFF20) ||
           (c >= 0xFF3B && c <= 0xFF3F) || (c >= 0xFF5B && c <= 0xFF65);
}

inline char32_t to_lower(char32_t c) {
    if (c >= U'A' && c <= U'Z') return c + 32;
    // Latin-1 supplement and Greek/Cyrillic capitals with a fixed offset.
    if (c >= 0x00C0 && c <= 0x00DE && c != 0x00D7) return c + 32;
    if (c >= 0x0391 && c <= 0x03AB && c != 0x03A2) return c + 32;
    if (c >= 0x0410 && c <= 0x042F) return c + 32;
    if (c >= 0x0400 && c <= 0x040F) return c + 80;
    if (c == 0x0178) return 0x00FF;
    if (c >= 0x0100 && c <= 0x017F && c != 0x0130 && c != 0x0131 && c != 0x0138 && c != 0x0149 &&
        c != 0x0178 && c != 0x017F) {
        bool even_upper = (c < 0x0139) || (c > 0x0148 && c < 0x0179);
        if (even_upper ? (c % 2 == 0) : (c % 2 == 1)) return c + 1;
    }
    return c;
}

// Splits raw text on whitespace, keeping the raw words.
inline std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    std::size_t i = 0;
    while (i < text.size()) {
        std::size_t start = i;
        char32_t cp = next_code_point(text, i);
        if (is_space(cp)) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.append(text.substr(start, i - start));
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

} // namespace detail

/// Lowercases, strips punctuation, and splits on whitespace. Empty tokens are
/// dropped, so "Henry's" becomes the single token "henrys".
inline Tokens tokenize(std::string_view text) {
    Tokens tokens;
    std::string cur;
    std::size_t i = 0;
    while (i < text.size()) {
        char32_t cp = detail::next_code_point(text, i);
        if (detail::is_space(cp)) {
            if (!cur.empty()) tokens.push_back(std::move(cur));
            cur.clear();
        } else if (!detail::is_punct(cp)) {
            detail::append_utf8(cur, detail::to_lower(cp));
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

struct Passage {
    std::string id;
    std::string title;
    std::string text;
    Tokens tokens;     // tokenize(text)
    Tokens title_tokens;

    /// Title followed by text; what every retriever scores and what the
    /// generator sees as the document.
    Tokens retrieval_tokens() const { return detail::concat(title_tokens, tokens); }
};

struct ChunkMode {
    enum class Kind { FixedWords, FirstParagraphs, Sentences };

    Kind kind = Kind::FixedWords;
    std::size_t words = 100;
    std::size_t paragraphs = 2;

    static ChunkMode fixed_words(std::size_t n) { return {Kind::FixedWords, n, 0}; }
    static ChunkMode first_paragraphs(std::size_t p, std::size_t n = 100) {
        return {Kind::FirstParagraphs, n, p};
    }
    static ChunkMode sentences() { return {Kind::Sentences, 0, 0}; }
};

namespace detail {

inline Passage make_passage(const std::string& title, std::size_t ordinal, std::string text) {
    Passage p;
    p.id = title + "#" + std::to_string(ordinal);
    p.title = title;
    p.tokens = tokenize(text);
    p.text = std::move(text);
    p.title_tokens = tokenize(title);
    return p;
}

inline std::vector<std::string> split_paragraphs(std::string_view text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        if (!tokenize(line).empty()) out.emplace_back(line);
        start = end + 1;
    }
    return out;
}

inline std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!tokenize(cur).empty()) {
            auto words = split_whitespace(cur);
            out.push_back(join(words));
        }
        cur.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        cur += c;
        bool terminator = c == '.' || c == '!' || c == '?';
        bool boundary = i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
        if ((terminator && boundary) || c == '\n') flush();
    }
    flush();
    return out;
}

inline std::vector<Passage> chunk_words(const std::string& title, std::string_view text,
                                        std::size_t window, std::size_t& ordinal) {
    if (window == 0) throw InvalidArgument("chunk size must be positive");
    std::vector<std::string> words;
    for (auto& w : split_whitespace(text))
        if (!tokenize(w).empty()) words.push_back(std::move(w));
    std::vector<Passage> out;
    for (std::size_t start = 0; start < words.size(); start += window) {
        std::size_t end = std::min(words.size(), start + window);
        std::vector<std::string> slice(words.begin() + static_cast<std::ptrdiff_t>(start),
                                       words.begin() + static_cast<std::ptrdiff_t>(end));
        out.push_back(make_passage(title, ordinal++, join(slice)));
    }
    return out;
}

} // namespace detail

/// Splits one document into retrieval passages with ids "{title}#{ordinal}".
inline std::vector<Passage> chunk_document(const std::string& title, std::string_view text,
                                           const ChunkMode& mode) {
    std::size_t ordinal = 0;
    switch (mode.kind) {
    case ChunkMode::Kind::FixedWords:
        return detail::chunk_words(title, text, mode.words, ordinal);
    case ChunkMode::Kind::FirstParagraphs: {
        if (mode.paragraphs == 0) throw InvalidArgument("paragraph count must be positive");
        auto paras = detail::split_paragraphs(text);
        if (paras.size() > mode.paragraphs) paras.resize(mode.paragraphs);
        std::string kept;
        for (const auto& p : paras) kept += p + "\n";
        return detail::chunk_words(title, kept, mode.words, ordinal);
    }
    case ChunkMode::Kind::Sentences: {
        std::vector<Passage> out;
        for (auto& s : detail::split_sentences(text))
            out.push_back(detail::make_passage(title, ordinal++, std::move(s)));
        return out;
    }
    }
    return {};
}

/// Immutable after construction; safe to share between threads.
class Corpus {
public:
    Corpus() = default;

    explicit Corpus(std::vector<Passage> passages) : passages_(std::move(passages)) {
        for (std::size_t i = 0; i < passages_.size(); ++i) {
            auto [it, inserted] = by_id_.emplace(passages_[i].id, i);
            if (!inserted) throw InvalidArgument("duplicate passage id: " + passages_[i].id);
        }
    }

    std::size_t size() const { return passages_.size(); }
    bool empty() const { return passages_.empty(); }
    const Passage& operator[](std::size_t i) const { return passages_[i]; }
    const std::vector<Passage>& passages() const { return passages_; }

    const Passage* find(const std::string& id) const {
        auto it = by_id_.find(id);
        return it == by_id_.end() ? nullptr : &passages_[it->second];
    }

    std::size_t index_of(const std::string& id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) throw InvalidArgument("unknown passage id: " + id);
        return it->second;
    }

private:
    std::vector<Passage> passages_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

/// Reads a JSONL corpus of {"id","title","text"} objects and chunks each document.
inline Corpus ingest_corpus(const std::string& path, const ChunkMode& mode) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read corpus file: " + path);
    std::vector<Passage> passages;
    std::set<std::string> doc_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        for (const char* field : {"id", "title", "text"}) {
            if (!obj.is_object() || !obj.contains(field) || !obj[field].is_string())
                throw FormatError(path + ":" + std::to_string(line_no) + ": missing string field \"" +
                                  field + "\"");
        }
        auto id = obj["id"].get<std::string>();
        if (!doc_ids.insert(id).second)
            throw FormatError(path + ":" + std::to_string(line_no) + ": duplicate id \"" + id + "\"");
        auto chunks = chunk_document(obj["title"].get<std::string>(), obj["text"].get<std::string>(), mode);
        for (auto& p : chunks) passages.push_back(std::move(p));
    }
    if (passages.empty()) throw FormatError("empty corpus: " + path);
    return Corpus(std::move(passages));
}

struct FreqTable {
    std::map<std::string, std::uint64_t> counts;
    std::uint64_t total = 0;
    std::set<std::string> frequent_set;

    bool is_frequent(const std::string& token) const { return frequent_set.count(token) > 0; }
};

/// Counts tokens and marks as frequent the longest prefix of the
/// count-descending (then lexicographic) order whose cumulative mass stays
/// within half of the total. Everything else, including unseen tokens, is rare.
inline FreqTable build_frequency_table(const std::vector<std::string>& reference_texts) {
    if (reference_texts.empty()) throw InvalidArgument("frequency table needs at least one text");
    FreqTable table;
    for (const auto& text : reference_texts)
        for (auto& tok : tokenize(text)) {
            ++table.counts[tok];
            ++table.total;
        }
    std::vector<std::pair<std::string, std::uint64_t>> order(table.counts.begin(), table.counts.end());
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::uint64_t cumulative = 0;
    for (const auto& [tok, count] : order) {
        if (2 * (cumulative + count) > table.total) break;
        cumulative += count;
        table.frequent_set.insert(tok);
    }
    return table;
}

} // namespace ragdial
