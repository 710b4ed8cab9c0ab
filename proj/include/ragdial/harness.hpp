#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "corpus.hpp"
#include "encode.hpp"
#include "generate.hpp"
#include "index.hpp"
#include "marginal.hpp"
#include "metrics.hpp"
#include "retrieve.hpp"

namespace ragdial {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Datasets

struct DialogueExample {
    std::string id;
    std::string topic;
    std::vector<std::string> context;  // turns, oldest first
    std::string label;
    std::optional<std::string> knowledge;

    std::vector<Tokens> turn_tokens() const {
        std::vector<Tokens> out;
        for (const auto& t : context) out.push_back(tokenize(t));
        return out;
    }

    Tokens context_tokens() const {
        Tokens out;
        for (const auto& t : context) {
            auto toks = tokenize(t);
            out.insert(out.end(), toks.begin(), toks.end());
        }
        return out;
    }
};

inline json to_json(const DialogueExample& ex) {
    json j;
    j["id"] = ex.id;
    j["topic"] = ex.topic;
    j["context"] = ex.context;
    j["label"] = ex.label;
    j["knowledge"] = ex.knowledge ? json(*ex.knowledge) : json(nullptr);
    return j;
}

namespace detail {

inline std::string where(const std::string& path, std::size_t line) {
    return path + ":" + std::to_string(line) + ": ";
}

inline DialogueExample parse_example(const json& obj, const std::string& path, std::size_t line) {
    if (!obj.is_object()) throw FormatError(where(path, line) + "expected a JSON object");
    auto need = [&](const char* field) -> const json& {
        if (!obj.contains(field) || obj[field].is_null())
            throw FormatError(where(path, line) + "missing field \"" + field + "\"");
        return obj[field];
    };
    DialogueExample ex;
    const auto& id = need("id");
    if (!id.is_string()) throw FormatError(where(path, line) + "field \"id\" must be a string");
    ex.id = id.get<std::string>();
    const auto& ctx = need("context");
    if (!ctx.is_array() || ctx.empty())
        throw FormatError(where(path, line) + "field \"context\" must be a non-empty list of strings");
    for (const auto& turn : ctx) {
        if (!turn.is_string())
            throw FormatError(where(path, line) + "field \"context\" must be a non-empty list of strings");
        ex.context.push_back(turn.get<std::string>());
    }
    const auto& label = need("label");
    if (!label.is_string()) throw FormatError(where(path, line) + "field \"label\" must be a string");
    ex.label = label.get<std::string>();
    if (tokenize(ex.label).empty()) throw FormatError(where(path, line) + "field \"label\" has no tokens");
    if (obj.contains("topic") && !obj["topic"].is_null()) {
        if (!obj["topic"].is_string()) throw FormatError(where(path, line) + "field \"topic\" must be a string");
        ex.topic = obj["topic"].get<std::string>();
    }
    if (obj.contains("knowledge") && !obj["knowledge"].is_null()) {
        if (!obj["knowledge"].is_string())
            throw FormatError(where(path, line) + "field \"knowledge\" must be a string or null");
        ex.knowledge = obj["knowledge"].get<std::string>();
    }
    return ex;
}

inline void write_lines(const std::string& path, const std::vector<json>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& r : rows) out << r.dump() << '\n';
    if (!out) throw IoError("write failed: " + path);
}

} // namespace detail

/// One example per line: {"id","topic","context":[...],"label","knowledge"}.
inline std::vector<DialogueExample> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read dataset file: " + path);
    std::vector<DialogueExample> out;
    std::set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(detail::where(path, line_no) + "malformed JSON: " + e.what());
        }
        auto ex = detail::parse_example(obj, path, line_no);
        if (!ids.insert(ex.id).second)
            throw FormatError(detail::where(path, line_no) + "duplicate id \"" + ex.id + "\"");
        out.push_back(std::move(ex));
    }
    if (out.empty()) throw FormatError("empty dataset: " + path);
    return out;
}

inline void save_dataset(const std::vector<DialogueExample>& data, const std::string& path) {
    std::vector<json> rows;
    for (const auto& ex : data) rows.push_back(to_json(ex));
    detail::write_lines(path, rows);
}

// ---------------------------------------------------------------------------
// Configuration

enum class RegretMode { Off, Same, Sep };

inline std::string to_string(RegretMode m) {
    switch (m) {
    case RegretMode::Off: return "off";
    case RegretMode::Same: return "same";
    case RegretMode::Sep: return "sep";
    }
    return "?";
}

inline RegretMode parse_regret_mode(const std::string& s) {
    for (auto v : {RegretMode::Off, RegretMode::Same, RegretMode::Sep})
        if (to_string(v) == s) return v;
    throw InvalidArgument("unknown regret mode: " + s);
}

struct ExperimentPaths {
    std::string corpus = "corpus.jsonl";
    std::string train = "train.jsonl";  // used when no model file is given
    std::string data = "valid.jsonl";   // the evaluation split
    std::string index;                  // empty: build in memory
    std::string report;                 // empty: no files written
    std::string model;                  // empty: fit on the train split
};

struct ExperimentConfig {
    RetrieverConfig retriever;
    MarginalConfig marginal;
    DecodeConfig decode;
    std::size_t dim = 128;
    ChunkMode chunk;
    ExperimentPaths paths;
    std::uint64_t seed = 0;
    RegretMode regret = RegretMode::Off;
    FitOptions fit;

    // In-loop retriever training before the generator is fitted (FiD-RAG when
    // combined with the fid scheme).
    bool inloop = false;
    std::size_t inloop_docs = 20;
    std::size_t inloop_epochs = 1;
    double inloop_rate = 1e-3;

    /// Fixes derived fields (retriever k follows n_docs) and checks
    /// cross-field consistency.
    void validate() {
        marginal.validate();
        retriever.k = marginal.n_docs;
        retriever.validate();
        if (dim < 8) throw InvalidArgument("encoder dimension must be at least 8");
        if (regret != RegretMode::Off && is_turn_scheme(marginal.scheme))
            throw InvalidArgument("--regret needs a whole-context scheme");
        if (regret != RegretMode::Off && retriever.kind == RetrieverKind::None)
            throw InvalidArgument("--regret needs a retriever");
        if (inloop && retriever.kind != RetrieverKind::Dense && retriever.kind != RetrieverKind::DprPoly)
            throw InvalidArgument("in-loop training needs a dense or dpr-poly retriever");
        if (inloop && inloop_docs == 0) throw InvalidArgument("in-loop training needs at least one document");
        if (decode.beam_size == 0) throw InvalidArgument("beam size must be at least 1");
        if (decode.min_len > decode.max_len) throw InvalidArgument("min_len exceeds max_len");
        if (decode.p <= 0.0 || decode.p > 1.0) throw InvalidArgument("nucleus p must lie in (0, 1]");
        if (decode.k == 0) throw InvalidArgument("top-k needs k of at least 1");
    }

    std::size_t train_docs() const {
        if (inloop) return inloop_docs;
        return marginal.n_docs;
    }

    json to_json() const {
        json j;
        j["retriever"] = to_string(retriever.kind);
        j["n_docs"] = marginal.n_docs;
        j["n_rerank"] = retriever.n_rerank;
        j["lambda"] = retriever.lambda;
        j["scheme"] = to_string(marginal.scheme);
        j["tstar"] = marginal.tstar ? json(*marginal.tstar) : json(nullptr);
        j["regret"] = to_string(regret);
        j["decode"] = {{"strategy", to_string(decode.strategy)}, {"beam_size", decode.beam_size},
                       {"max_len", decode.max_len},          {"min_len", decode.min_len},
                       {"block_ngram", decode.block_ngram},  {"context_block", decode.context_block},
                       {"p", decode.p},                      {"k", decode.k}};
        j["dim"] = dim;
        j["seed"] = seed;
        j["inloop"] = inloop;
        if (inloop) j["inloop_docs"] = inloop_docs;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Trained models

struct TrainedModel {
    std::shared_ptr<const Vocab> vocab;
    std::vector<GeneratorParams> generators;  // two for ReGReT Sep
    std::optional<ContextProjection> projection;
    std::vector<double> inloop_history;
};

namespace detail {

inline json params_to_json(const GeneratorParams& p) {
    json j;
    j["alpha"] = p.alpha;
    j["epsilon"] = p.epsilon;
    j["unigram"] = p.unigram;
    std::map<TokenId, std::map<TokenId, double>> sorted(p.bigram.begin(), p.bigram.end());
    json bi = json::array();
    for (const auto& [prev, row] : sorted)
        for (const auto& [next, n] : row) bi.push_back({prev, next, n});
    j["bigram"] = std::move(bi);
    return j;
}

inline GeneratorParams params_from_json(const json& j) {
    GeneratorParams p;
    p.alpha = j.at("alpha").get<std::array<double, 4>>();
    p.epsilon = j.at("epsilon").get<double>();
    p.unigram = j.at("unigram").get<std::vector<double>>();
    for (const auto& e : j.at("bigram")) p.bigram[e.at(0).get<TokenId>()][e.at(1).get<TokenId>()] = e.at(2).get<double>();
    return p;
}

} // namespace detail

inline void save_model(const TrainedModel& m, const std::string& path) {
    json j;
    json vocab = json::array();
    for (std::size_t i = 3; i < m.vocab->size(); ++i) vocab.push_back(m.vocab->token(static_cast<TokenId>(i)));
    j["vocab"] = std::move(vocab);
    j["generators"] = json::array();
    for (const auto& g : m.generators) j["generators"].push_back(detail::params_to_json(g));
    if (m.projection)
        j["projection"] = {{"dim", m.projection->dim}, {"seed", m.projection->seed}, {"weights", m.projection->weights}};
    else
        j["projection"] = nullptr;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write model file: " + path);
    out << j.dump() << '\n';
    if (!out) throw IoError("write failed: " + path);
}

inline TrainedModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read model file: " + path);
    TrainedModel m;
    try {
        json j = json::parse(in);
        m.vocab = std::make_shared<Vocab>(j.at("vocab").get<std::vector<std::string>>());
        for (const auto& g : j.at("generators")) m.generators.push_back(detail::params_from_json(g));
        if (!j.at("projection").is_null()) {
            ContextProjection p;
            p.dim = j["projection"].at("dim").get<std::size_t>();
            p.seed = j["projection"].at("seed").get<std::uint64_t>();
            p.weights = j["projection"].at("weights").get<std::vector<double>>();
            if (p.weights.size() != p.dim * p.dim) throw FormatError("projection shape mismatch");
            m.projection = std::move(p);
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed model file " + path + ": " + e.what());
    }
    if (m.generators.empty()) throw FormatError("model file has no generator: " + path);
    for (const auto& g : m.generators)
        if (g.unigram.size() != m.vocab->size()) throw FormatError("model vocabulary does not match its tables");
    return m;
}

// ---------------------------------------------------------------------------
// Synthetic fixture

struct FixtureFiles {
    std::string corpus;
    std::string train;
    std::string valid;
};

namespace detail {

class FixtureRng {
public:
    explicit FixtureRng(std::uint64_t seed) : state_(seed ^ 0xf17e5eedULL) {}
    std::uint64_t next() { return splitmix64(state_ += 0x9e3779b97f4a7c15ULL); }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(next() % n); }
    template <typename T>
    const T& pick(const std::vector<T>& v) { return v[below(v.size())]; }

private:
    std::uint64_t state_;
};

inline std::string fresh_name(FixtureRng& rng, std::set<std::string>& used, std::size_t syllables) {
    static const std::vector<std::string> parts = {"ka", "zor", "vel", "mir", "tan", "quo", "rix", "bel",
                                                   "dun", "sha", "lop", "gre", "fen", "yul", "wic", "pra",
                                                   "thu", "nob", "jex", "cal", "osk", "ium", "dra", "vey"};
    for (;;) {
        std::string s;
        for (std::size_t i = 0; i < syllables; ++i) s += rng.pick(parts);
        if (used.insert(s).second) return s;
    }
}

inline std::string capitalize(std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
}

// Replaces each {KEY} in `tpl` with slots.at(KEY).
inline std::string fill_template(const std::string& tpl, const std::map<std::string, std::string>& slots) {
    std::string out;
    for (std::size_t i = 0; i < tpl.size(); ++i) {
        auto close = tpl[i] == '{' ? tpl.find('}', i) : std::string::npos;
        if (close == std::string::npos) {
            out += tpl[i];
            continue;
        }
        out += slots.at(tpl.substr(i + 1, close - i - 1));
        i = close;
    }
    return out;
}

struct FixtureFact {
    std::string name;
    std::vector<std::string> sentences;
};

} // namespace detail

/// Writes corpus.jsonl, train.jsonl and valid.jsonl into `dir`. Each passage
/// holds templated facts about one invented entity; each dialogue asks about
/// one entity and its label copies one sentence of that entity's passage,
/// which is recorded as the gold knowledge. Train and valid dialogues use
/// disjoint gold passages whenever the corpus is large enough.
inline FixtureFiles make_synthetic_fixture(std::uint64_t seed, std::size_t n_passages, std::size_t n_dialogues,
                                           const std::string& dir) {
    if (n_passages == 0 || n_dialogues == 0) throw InvalidArgument("fixture sizes must be at least 1");
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    detail::FixtureRng rng(seed);
    std::set<std::string> used;

    static const std::vector<std::string> kinds = {"village", "monastery", "harbor", "observatory", "fortress",
                                                   "library", "orchard", "canal", "bridge", "theater"};
    static const std::vector<std::string> roles = {"merchant", "sculptor", "astronomer", "general", "poet",
                                                   "engineer", "botanist", "cartographer"};
    static const std::vector<std::string> landmarks = {"tower", "garden", "market", "fountain", "gate", "chapel"};
    static const std::vector<std::string> where = {
        "{N} is a {K} near {P}, west of {Q}.",
        "the {K} of {N} stands beside {P}, just east of {Q}.",
        "you will find {N}, an old {K}, outside {P} and north of {Q}.",
        "{N} lies close to {P}; this {K} borders {Q}.",
        "situated by {P}, the {K} called {N} faces {Q}.",
        "{N}, a quiet {K}, sits between {P} and {Q}.",
        "travellers reach {N} via {P}; that {K} overlooks {Q}.",
        "locals know {N} as their {K} at {P}, south of {Q}."};
    static const std::vector<std::string> founded = {
        "{N} was founded in {Y} by {F}, a {R} from {P}.",
        "{F}, who worked as a {R}, built {N} during {Y}.",
        "in {Y} the {R} {F} established {N}.",
        "construction of {N} began {Y} under {F}, a {R}.",
        "{N} dates back to {Y}, when {F} the {R} opened it.",
        "records credit {F}, a local {R}, with creating {N} around {Y}.",
        "the {R} {F} started {N} in the year {Y}.",
        "{N} owes its origin to {F}, {R}, circa {Y}."};
    static const std::vector<std::string> famous = {
        "{N} is famous for {M1} {L1} and {M2} {L2}.",
        "visitors admire {M1} {L1} plus {M2} {L2} at {N}.",
        "{N} boasts {M1} {L1} alongside {M2} {L2}.",
        "the highlights of {N} include {M1} {L1} together with {M2} {L2}.",
        "people praise {N} mostly for {M1} {L1}, also {M2} {L2}.",
        "{N} draws crowds thanks to {M1} {L1} and its {M2} {L2}.",
        "best known at {N} are {M1} {L1} with {M2} {L2}.",
        "{N} celebrates {M1} {L1} beside {M2} {L2}."};

    std::vector<detail::FixtureFact> facts;
    std::vector<json> corpus_rows;
    for (std::size_t i = 0; i < n_passages; ++i) {
        detail::FixtureFact f;
        f.name = detail::fresh_name(rng, used, 3);
        auto place = detail::fresh_name(rng, used, 3);
        auto founder = detail::fresh_name(rng, used, 3);
        auto mark1 = detail::fresh_name(rng, used, 3);
        auto mark2 = detail::fresh_name(rng, used, 3);
        auto year = std::to_string(1000 + rng.below(1000));
        auto neighbor = detail::fresh_name(rng, used, 3);
        std::map<std::string, std::string> slots = {
            {"N", f.name}, {"K", rng.pick(kinds)}, {"P", place}, {"Q", neighbor}, {"Y", year}, {"F", founder},
            {"R", rng.pick(roles)}, {"M1", mark1}, {"L1", rng.pick(landmarks)}, {"M2", mark2},
            {"L2", rng.pick(landmarks)}};
        for (const auto* pool : {&where, &founded, &famous})
            f.sentences.push_back(detail::fill_template(rng.pick(*pool), slots));
        std::string text = f.sentences[0] + " " + f.sentences[1] + " " + f.sentences[2];
        corpus_rows.push_back({{"id", "doc" + std::to_string(i)}, {"title", detail::capitalize(f.name)}, {"text", text}});
        facts.push_back(std::move(f));
    }

    static const std::vector<std::string> openers = {"have you ever heard of", "i was reading about",
                                                     "my friend told me about", "do you know anything about"};
    static const std::vector<std::string> replies = {"yes, that is a topic i really enjoy talking about.",
                                                     "sure, it is a fascinating subject with a long history.",
                                                     "oh yes, i have read quite a lot about it."};
    // One question per sentence of a passage.
    static const std::vector<std::string> questions = {"where exactly is it?", "who founded it and when?",
                                                       "what is it famous for?"};
    static const std::vector<std::string> leads = {"well,", "i read that", "apparently,", "oh yes,"};
    static const std::vector<std::string> tails = {"neat!", "i would love to visit.", "lovely place."};

    // A shuffled order of gold passages: train takes the front, valid the back.
    std::vector<std::size_t> order(n_passages);
    for (std::size_t i = 0; i < n_passages; ++i) order[i] = i;
    for (std::size_t i = n_passages; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    auto make_split = [&](const std::string& prefix, std::size_t offset) {
        std::vector<DialogueExample> data;
        for (std::size_t d = 0; d < n_dialogues; ++d) {
            const auto& f = facts[order[(offset + d) % n_passages]];
            DialogueExample ex;
            ex.id = prefix + std::to_string(d);
            ex.topic = detail::capitalize(f.name);
            std::size_t which = rng.below(f.sentences.size() - 1);
            ex.context = {rng.pick(openers) + " " + f.name + "?", rng.pick(replies), questions[which]};
            auto span = f.sentences[which] + " " + f.sentences[which + 1];
            ex.knowledge = span;
            ex.label = rng.pick(leads) + " " + span + " " + rng.pick(tails);
            data.push_back(std::move(ex));
        }
        return data;
    };
    auto train = make_split("train-", 0);
    auto valid = make_split("valid-", n_dialogues);

    FixtureFiles files{(fs::path(dir) / "corpus.jsonl").string(), (fs::path(dir) / "train.jsonl").string(),
                       (fs::path(dir) / "valid.jsonl").string()};
    detail::write_lines(files.corpus, corpus_rows);
    save_dataset(train, files.train);
    save_dataset(valid, files.valid);
    return files;
}

// ---------------------------------------------------------------------------
// Experiment assembly

/// Builds the configured retriever, swapping in a stored index when the
/// config names one.
inline std::unique_ptr<Retriever> make_retriever(const ExperimentConfig& cfg, std::shared_ptr<const Corpus> corpus) {
    EncoderConfig enc;
    enc.dim = cfg.dim;
    enc.seed = cfg.seed;
    auto r = std::make_unique<Retriever>(std::move(corpus), cfg.retriever, enc, cfg.seed);
    if (!cfg.paths.index.empty()) {
        if (!std::filesystem::exists(cfg.paths.index)) throw IoError("missing index: " + cfg.paths.index);
        switch (cfg.retriever.kind) {
        case RetrieverKind::None: break;
        case RetrieverKind::Tfidf: r->set_inverted_index(load_inverted_index(cfg.paths.index)); break;
        case RetrieverKind::Dense:
        case RetrieverKind::DprPoly:
        case RetrieverKind::PolyFaiss: r->set_flat_index(load_flat_index(cfg.paths.index)); break;
        case RetrieverKind::Colbert:
        case RetrieverKind::Shared: r->set_token_index(load_token_index(cfg.paths.index)); break;
        }
    }
    return r;
}

/// Corpus passages plus every dataset's context and label tokens.
inline std::shared_ptr<const Vocab> build_vocab(const Corpus& corpus,
                                                const std::vector<const std::vector<DialogueExample>*>& sets) {
    std::set<std::string> toks;
    for (const auto& p : corpus.passages())
        for (auto& t : p.retrieval_tokens()) toks.insert(t);
    for (const auto* set : sets)
        for (const auto& ex : *set) {
            for (auto& t : ex.context_tokens()) toks.insert(t);
            for (auto& t : tokenize(ex.label)) toks.insert(t);
        }
    return std::make_shared<Vocab>(std::vector<std::string>(toks.begin(), toks.end()));
}

namespace detail {

inline std::vector<TokenId> training_doc(const Vocab& vocab, const std::vector<RetrievedDoc>& docs,
                                         std::size_t n) {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < std::min(n, docs.size()); ++i) {
        auto ids = vocab.encode(docs[i].passage.retrieval_tokens());
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

inline GeneratorParams initial_params(const ExperimentConfig& cfg) {
    GeneratorParams init;
    // Without retrieval there is no document to copy from.
    if (cfg.retriever.kind == RetrieverKind::None) init.alpha[kCopyDoc] = -std::numeric_limits<double>::infinity();
    return init;
}

inline std::uint64_t example_seed(std::uint64_t seed, const std::string& id) {
    return splitmix64(seed ^ fnv1a(id, 0x6a09e667f3bcc909ULL));
}

} // namespace detail

/// Fits the generator against training pairs built from the retriever: the
/// top document for RAG schemes, the concatenated top documents for FiD.
inline GeneratorParams fit_on(const ExperimentConfig& cfg, const Retriever& retriever, const Vocab& vocab,
                              const std::vector<DialogueExample>& train,
                              const std::function<Tokens(const DialogueExample&)>& query_of = {}) {
    const bool fused = cfg.marginal.scheme == Scheme::Fid;
    const std::size_t n = fused ? cfg.train_docs() : 1;
    std::vector<TrainingPair> pairs(train.size());
    parallel_for(train.size(), [&](std::size_t i) {
        const auto& ex = train[i];
        auto ctx = ex.context_tokens();
        auto docs = retriever.retrieve(query_of ? query_of(ex) : ctx, std::max<std::size_t>(n, 1));
        pairs[i] = TrainingPair{vocab.encode(ctx), detail::training_doc(vocab, docs, n),
                                vocab.encode(tokenize(ex.label))};
    });
    return fit_generator(detail::initial_params(cfg), vocab.size(), pairs, cfg.fit).params;
}

/// One pass per epoch of RAG-Token in-loop updates to the context projection.
/// Returns the mean NLL of each epoch as measured before each example's step.
inline std::vector<double> train_retriever_inloop(Retriever& retriever, const Generator& gen,
                                                  const std::vector<DialogueExample>& train, std::size_t n_docs,
                                                  std::size_t epochs, double rate) {
    if (train.empty()) throw InvalidArgument("in-loop training needs examples");
    const auto& vocab = gen.vocab();
    std::vector<double> history;
    for (std::size_t e = 0; e < epochs; ++e) {
        double total = 0.0;
        for (const auto& ex : train) {
            auto ctx = ex.context_tokens();
            auto docs = retrieve_dense(ctx, retriever.encoder(), retriever.projection(), retriever.flat_index(),
                                       retriever.corpus(), n_docs);
            auto doc_set = to_doc_set(vocab, docs);
            std::vector<DenseVector> vectors;
            for (const auto& d : docs) vectors.push_back(retriever.flat_index().vector(d.row));
            auto probs = gold_step_probs(gen, vocab.encode(ctx), doc_set, vocab.encode(tokenize(ex.label)));
            auto g = retriever_inloop_grad(Scheme::Token, retriever.embed_context(ctx), vectors, probs,
                                           retriever.projection());
            total += g.nll;
            apply_gradient(retriever.projection(), g.grad_w, rate);
        }
        history.push_back(total / static_cast<double>(train.size()));
    }
    return history;
}

/// Fits everything a configuration needs from the train split. The
/// retriever's projection is updated in place when in-loop training is on.
inline TrainedModel train_model(const ExperimentConfig& cfg, Retriever& retriever,
                                std::shared_ptr<const Vocab> vocab, const std::vector<DialogueExample>& train) {
    TrainedModel m;
    m.vocab = vocab;
    if (cfg.inloop) {
        ExperimentConfig rag = cfg;
        rag.marginal.scheme = Scheme::Token;
        MixtureGenerator warm(vocab, fit_on(rag, retriever, *vocab, train));
        m.inloop_history = train_retriever_inloop(retriever, warm, train, cfg.inloop_docs, cfg.inloop_epochs,
                                                  cfg.inloop_rate);
        m.projection = retriever.projection();
    }
    m.generators.push_back(fit_on(cfg, retriever, *vocab, train));
    if (cfg.regret == RegretMode::Sep) {
        // The second-round generator sees documents retrieved with the first
        // round's output appended to the context.
        MixtureGenerator first(vocab, m.generators.front());
        auto query_of = [&](const DialogueExample& ex) {
            auto ctx = ex.context_tokens();
            Conditioning cond;
            cond.context = vocab->encode(ctx);
            cond.docs = to_doc_set(*vocab, retriever.retrieve(ctx, cfg.marginal.n_docs));
            DecodeConfig dc = cfg.decode;
            dc.seed = detail::example_seed(cfg.decode.seed, ex.id);
            Tokens out;
            try {
                out = vocab->decode(decode_scheme(cfg.marginal.scheme, cond, first, dc).tokens);
            } catch (const DecodingExhausted&) {
            }
            return detail::concat(ctx, out);
        };
        m.generators.push_back(fit_on(cfg, retriever, *vocab, train, query_of));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct RunResult {
    EvalReport report;
    json report_json;
    std::vector<json> rows;
    std::size_t retrievals = 0;
    std::vector<double> generator_weights;
};

inline std::vector<std::size_t> recall_ks(std::size_t n_docs) {
    std::vector<std::size_t> out;
    for (std::size_t k : {1, 5, 10, 20, 25})
        if (k <= n_docs) out.push_back(k);
    if (out.empty() || out.back() != n_docs) out.push_back(n_docs);
    return out;
}

inline json report_to_json(const EvalReport& r, bool with_recall) {
    json m;
    m["ppl"] = r.ppl;
    m["f1"] = r.f1;
    m["kf1"] = r.kf1 ? json(*r.kf1) : json(nullptr);
    m["rf1"] = r.rf1;
    m["bleu4"] = r.bleu4;
    m["rougeL"] = r.rouge_l;
    if (with_recall) {
        json rec = json::object();
        for (auto [k, v] : r.recall_at) rec[std::to_string(k)] = v;
        m["recall"] = rec;
    }
    return m;
}

inline std::string examples_path(const std::string& report_path) {
    std::string base = report_path;
    if (base.size() > 5 && base.compare(base.size() - 5, 5, ".json") == 0) base.resize(base.size() - 5);
    return base + ".examples.jsonl";
}

/// Evaluates a fitted model on `data`. Examples run concurrently; every
/// output slot is indexed by example so the result does not depend on
/// scheduling.
inline RunResult evaluate(const ExperimentConfig& cfg, const Retriever& retriever, const TrainedModel& model,
                          const std::vector<DialogueExample>& data) {
    const auto& vocab = *model.vocab;
    MixtureGenerator gen(model.vocab, model.generators.front());
    MixtureGenerator gen2(model.vocab, model.generators.size() > 1 ? model.generators[1] : model.generators.front());
    const Generator& second = cfg.regret == RegretMode::Sep ? static_cast<const Generator&>(gen2) : gen;
    const bool has_retriever = cfg.retriever.kind != RetrieverKind::None;
    const Scheme scheme = cfg.marginal.scheme;
    const std::size_t n_docs = cfg.marginal.n_docs;
    const auto ks = recall_ks(n_docs);

    std::vector<std::string> reference_texts;
    for (const auto& ex : data) {
        for (const auto& t : ex.context) reference_texts.push_back(t);
        reference_texts.push_back(ex.label);
    }
    const auto freq = build_frequency_table(reference_texts);

    std::vector<MetricRow> rows(data.size());
    std::vector<json> row_json(data.size());
    std::vector<std::size_t> counts(data.size(), 0);

    parallel_for(data.size(), [&](std::size_t i) {
        const auto& ex = data[i];
        std::size_t retrievals = 0;
        auto retrieve = [&](const Tokens& q) {
            ++retrievals;
            return retriever.retrieve(q, n_docs);
        };
        auto turns = ex.turn_tokens();
        auto ctx = ex.context_tokens();
        auto label = vocab.encode(tokenize(ex.label));
        DecodeConfig dc = cfg.decode;
        dc.seed = detail::example_seed(cfg.decode.seed, ex.id);

        Conditioning cond;
        cond.context = vocab.encode(ctx);
        std::vector<RetrievedDoc> shown;
        std::optional<Hypothesis> hyp;
        const Generator* scorer = &gen;

        if (cfg.regret != RegretMode::Off) {
            auto rr = regret_generate(ctx, retrieve, gen, second, scheme, dc);
            shown = rr.second_docs;
            cond.docs = to_doc_set(vocab, shown);
            hyp = rr.output;
            scorer = &second;
        } else if (is_turn_scheme(scheme)) {
            auto split = split_turns(turns, cfg.marginal.window());
            std::vector<std::vector<RetrievedDoc>> per_turn;
            for (const auto& g : split.groups) per_turn.push_back(retrieve(g));
            if (has_retriever)
                shown = rag_turn_union(per_turn, [&](const RetrievedDoc& d) { return retriever.score(ctx, d); });
            if (scheme == Scheme::TurnToken || scheme == Scheme::TurnSeq) {
                cond.docs = to_doc_set(vocab, shown);
            } else {
                for (std::size_t t = 0; t < split.groups.size(); ++t) {
                    cond.turn_contexts.push_back(vocab.encode(split.groups[t]));
                    cond.turn_docs.push_back(to_doc_set(vocab, per_turn[t]));
                }
            }
        } else {
            shown = retrieve(ctx);
            cond.docs = to_doc_set(vocab, shown);
        }

        auto nll = marginal_nll(scheme, cond, label, *scorer);
        if (!hyp) {
            try {
                hyp = decode_scheme(scheme, cond, *scorer, dc);
            } catch (const DecodingExhausted&) {
                hyp = Hypothesis{};
            }
        }
        std::string prediction = detail::join(vocab.decode(hyp->tokens));

        MetricRow& m = rows[i];
        m.nll = nll.nll;
        m.tokens = nll.tokens;
        m.f1 = f1(prediction, ex.label);
        if (ex.knowledge) m.kf1 = knowledge_f1(prediction, *ex.knowledge);
        m.rf1 = rare_f1(prediction, ex.label, freq);
        m.bleu4 = bleu4(prediction, ex.label);
        m.rouge_l = rouge_l(prediction, ex.label);
        if (has_retriever && ex.knowledge)
            for (auto k : ks) m.recall[k] = recall_at_k_sentence(shown, *ex.knowledge, k);
        counts[i] = retrievals;

        json r;
        r["id"] = ex.id;
        r["prediction"] = prediction;
        json ids = json::array();
        for (const auto& d : shown) ids.push_back(d.passage.id);
        r["retrieved"] = std::move(ids);
        r["nll"] = m.nll;
        r["tokens"] = m.tokens;
        r["f1"] = m.f1;
        r["kf1"] = m.kf1 ? json(*m.kf1) : json(nullptr);
        r["rf1"] = m.rf1;
        r["bleu4"] = m.bleu4;
        r["rougeL"] = m.rouge_l;
        if (!m.recall.empty()) {
            json rec = json::object();
            for (auto [k, hit] : m.recall) rec[std::to_string(k)] = hit;
            r["recall"] = rec;
        }
        r["retrievals"] = retrievals;
        row_json[i] = std::move(r);
    });

    RunResult out;
    out.report = aggregate(rows);
    for (auto c : counts) out.retrievals += c;
    out.rows = std::move(row_json);
    auto w = gen.params().weights();
    out.generator_weights.assign(w.begin(), w.end());
    out.report_json["config"] = cfg.to_json();
    out.report_json["metrics"] = report_to_json(out.report, has_retriever && !out.report.recall_at.empty());
    out.report_json["n_examples"] = out.report.n_examples;
    out.report_json["retrievals"] = out.retrievals;
    out.report_json["generator"] = {{"copy_doc", w[kCopyDoc]},
                                    {"copy_context", w[kCopyContext]},
                                    {"bigram", w[kBigram]},
                                    {"unigram", w[kUnigram]}};
    if (!model.inloop_history.empty()) out.report_json["inloop_nll"] = model.inloop_history;
    return out;
}

inline void write_report(const RunResult& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report: " + path);
    out << r.report_json.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path);
    detail::write_lines(examples_path(path), r.rows);
}

/// The whole pipeline: load corpus and data, build or load the index, fit or
/// load the model, evaluate, and write the report when a path is configured.
inline RunResult run_eval(ExperimentConfig cfg) {
    cfg.validate();
    auto corpus = std::make_shared<const Corpus>(ingest_corpus(cfg.paths.corpus, cfg.chunk));
    auto retriever = make_retriever(cfg, corpus);
    auto data = load_dataset(cfg.paths.data);
    TrainedModel model;
    if (!cfg.paths.model.empty()) {
        model = load_model(cfg.paths.model);
        if (model.projection) {
            if (model.projection->dim != cfg.dim) throw InvalidArgument("model projection does not match --dim");
            retriever->projection() = *model.projection;
        }
        if (cfg.regret == RegretMode::Sep && model.generators.size() < 2)
            throw InvalidArgument("model file has no second-round generator for --regret sep");
    } else {
        auto train = load_dataset(cfg.paths.train);
        auto vocab = build_vocab(*corpus, {&train, &data});
        model = train_model(cfg, *retriever, vocab, train);
    }
    auto result = evaluate(cfg, *retriever, model, data);
    if (!cfg.paths.report.empty()) write_report(result, cfg.paths.report);
    return result;
}

} // namespace ragdial
