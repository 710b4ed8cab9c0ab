#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <ragdial/ragdial.hpp>

using namespace ragdial;

namespace {

struct Options {
    ExperimentConfig cfg;
    std::string retriever = "dense";
    std::string scheme = "token";
    std::string regret = "off";
    std::string decode = "beam";
    std::string chunk = "words:100";
    std::size_t tstar = 0;
    CLI::Option* tstar_opt = nullptr;
};

ChunkMode parse_chunk(const std::string& s) {
    auto colon = s.find(':');
    std::string kind = s.substr(0, colon);
    std::size_t n = 0;
    if (colon != std::string::npos) {
        try {
            n = std::stoul(s.substr(colon + 1));
        } catch (const std::exception&) {
            throw InvalidArgument("bad --chunk value: " + s);
        }
    }
    if (kind == "words") return ChunkMode::fixed_words(n ? n : 100);
    if (kind == "paragraphs") return ChunkMode::first_paragraphs(n ? n : 2);
    if (kind == "sentences") return ChunkMode::sentences();
    throw InvalidArgument("bad --chunk value: " + s);
}

void add_retrieval_options(CLI::App* app, Options& o) {
    auto& c = o.cfg;
    app->add_option("--retriever", o.retriever, "none|tfidf|dense|dpr-poly|polyfaiss|colbert|shared");
    app->add_option("--corpus", c.paths.corpus, "corpus JSONL");
    app->add_option("--index", c.paths.index, "stored index file");
    app->add_option("--n-docs", c.marginal.n_docs, "documents retrieved per query");
    app->add_option("--n-rerank", c.retriever.n_rerank, "first-stage candidates for re-rankers");
    app->add_option("--lambda", c.retriever.lambda, "DPR-Poly interpolation weight");
    app->add_option("--dim", c.dim, "encoder dimension");
    app->add_option("--chunk", o.chunk, "words[:N]|paragraphs[:P]|sentences");
    app->add_option("--seed", c.seed, "global seed");
}

void add_experiment_options(CLI::App* app, Options& o) {
    auto& c = o.cfg;
    add_retrieval_options(app, o);
    app->add_option("--scheme", o.scheme, "token|sequence|turn-dtt|turn-do|turn-token|turn-seq|fid");
    o.tstar_opt = app->add_option("--tstar", o.tstar, "turns kept separate by turn schemes");
    app->add_option("--regret", o.regret, "off|same|sep");
    app->add_option("--decode", o.decode, "beam|nucleus|topk");
    app->add_option("--beam", c.decode.beam_size, "beam size");
    app->add_option("--p", c.decode.p, "nucleus mass");
    app->add_option("--k", c.decode.k, "top-k size");
    app->add_option("--min-len", c.decode.min_len, "minimum generated length");
    app->add_option("--max-len", c.decode.max_len, "maximum generated length");
    app->add_option("--block-ngram", c.decode.block_ngram, "n-gram blocking order, 0 disables");
    app->add_flag("--context-block", c.decode.context_block, "also block n-grams of the context");
    app->add_option("--train", c.paths.train, "training split JSONL");
    app->add_option("--data", c.paths.data, "evaluation split JSONL");
    app->add_option("--model", c.paths.model, "model file");
    app->add_flag("--inloop", c.inloop, "train the retriever in the loop first");
    app->add_option("--inloop-docs", c.inloop_docs, "documents per in-loop step");
    app->add_option("--inloop-epochs", c.inloop_epochs, "in-loop epochs");
    app->add_option("--inloop-rate", c.inloop_rate, "in-loop learning rate");
}

// Converts the string-valued flags and validates the whole configuration.
ExperimentConfig resolve(Options& o) {
    auto c = o.cfg;
    c.retriever.kind = parse_retriever_kind(o.retriever);
    c.marginal.scheme = parse_scheme(o.scheme);
    if (o.tstar_opt && o.tstar_opt->count() > 0) c.marginal.tstar = o.tstar;
    c.regret = parse_regret_mode(o.regret);
    c.decode.strategy = parse_decode_strategy(o.decode);
    c.decode.seed = c.seed;
    c.chunk = parse_chunk(o.chunk);
    c.validate();
    return c;
}

void index_build(Options& o, const std::string& out) {
    auto cfg = resolve(o);
    auto corpus = std::make_shared<const Corpus>(ingest_corpus(cfg.paths.corpus, cfg.chunk));
    cfg.paths.index.clear();
    auto r = make_retriever(cfg, corpus);
    switch (cfg.retriever.kind) {
    case RetrieverKind::None: throw InvalidArgument("retriever none has no index");
    case RetrieverKind::Tfidf: save_index(r->inverted_index(), out); break;
    case RetrieverKind::Dense:
    case RetrieverKind::DprPoly:
    case RetrieverKind::PolyFaiss: save_index(r->flat_index(), out); break;
    case RetrieverKind::Colbert:
    case RetrieverKind::Shared: save_index(r->token_index(), out); break;
    }
    std::cout << "wrote " << out << " (" << corpus->size() << " passages)\n";
}

void index_inspect(const std::string& path) {
    auto info = inspect_index(path);
    nlohmann::json j{{"magic", info.magic}, {"dim", info.dim}, {"rows", info.rows},
                     {"passages", info.passages}, {"terms", info.terms}};
    std::cout << j.dump(2) << '\n';
}

void retrieve_cmd(Options& o, const std::string& query) {
    auto cfg = resolve(o);
    auto corpus = std::make_shared<const Corpus>(ingest_corpus(cfg.paths.corpus, cfg.chunk));
    auto r = make_retriever(cfg, corpus);
    auto docs = r->retrieve(tokenize(query), cfg.marginal.n_docs);
    std::size_t rank = 1;
    for (const auto& d : docs) {
        std::printf("%zu\t%s\t%.6f\t%.6f\n", rank++, d.passage.id.c_str(), d.raw_score, d.prior);
    }
}

void fit_cmd(Options& o, const std::string& out) {
    auto cfg = resolve(o);
    auto corpus = std::make_shared<const Corpus>(ingest_corpus(cfg.paths.corpus, cfg.chunk));
    auto r = make_retriever(cfg, corpus);
    auto train = load_dataset(cfg.paths.train);
    std::vector<DialogueExample> data;
    if (std::filesystem::exists(cfg.paths.data)) data = load_dataset(cfg.paths.data);
    auto vocab = build_vocab(*corpus, {&train, &data});
    auto model = train_model(cfg, *r, vocab, train);
    save_model(model, out);
    auto w = model.generators.front().weights();
    std::printf("wrote %s (copy_doc %.4f, copy_context %.4f, bigram %.4f, unigram %.4f)\n", out.c_str(),
                w[kCopyDoc], w[kCopyContext], w[kBigram], w[kUnigram]);
}

void eval_cmd(Options& o) {
    auto cfg = resolve(o);
    auto result = run_eval(cfg);
    std::cout << result.report_json.dump(2) << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retrieval-augmented dialogue toolkit"};
    app.require_subcommand(1);

    Options opts;

    auto* index = app.add_subcommand("index", "build or inspect an index");
    index->require_subcommand(1);
    std::string index_out = "index.bin";
    auto* build = index->add_subcommand("build", "build an index for a retriever");
    add_retrieval_options(build, opts);
    build->add_option("-o,--out", index_out, "output path");
    std::string inspect_path;
    auto* inspect = index->add_subcommand("inspect", "print an index header");
    inspect->add_option("path", inspect_path, "index file")->required();

    std::string query;
    auto* retrieve = app.add_subcommand("retrieve", "run an ad-hoc query");
    add_retrieval_options(retrieve, opts);
    retrieve->add_option("-q,--query", query, "query text")->required();

    std::string model_out = "model.json";
    auto* fit = app.add_subcommand("fit", "fit the generator and optionally the retriever");
    add_experiment_options(fit, opts);
    fit->add_option("-o,--out", model_out, "output model path");

    auto* eval = app.add_subcommand("eval", "evaluate a configuration");
    add_experiment_options(eval, opts);
    eval->add_option("--report", opts.cfg.paths.report, "report JSON path");

    std::string fixture_dir = ".";
    std::uint64_t fixture_seed = 0;
    std::size_t n_passages = 1000, n_dialogues = 200;
    auto* fixture = app.add_subcommand("fixture", "write a synthetic corpus and dialogue splits");
    fixture->add_option("-o,--out", fixture_dir, "output directory");
    fixture->add_option("--seed", fixture_seed, "fixture seed");
    fixture->add_option("--passages", n_passages, "number of passages");
    fixture->add_option("--dialogues", n_dialogues, "dialogues per split");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "ragdial: usage error: " << e.what() << '\n';
        return e.get_exit_code() ? e.get_exit_code() : 2;
    }

    try {
        if (*build) index_build(opts, index_out);
        else if (*inspect) index_inspect(inspect_path);
        else if (*retrieve) retrieve_cmd(opts, query);
        else if (*fit) fit_cmd(opts, model_out);
        else if (*eval) eval_cmd(opts);
        else if (*fixture) {
            std::filesystem::create_directories(fixture_dir);
            auto files = make_synthetic_fixture(fixture_seed, n_passages, n_dialogues, fixture_dir);
            std::cout << files.corpus << '\n' << files.train << '\n' << files.valid << '\n';
        }
    } catch (const InvalidArgument& e) {
        std::cerr << "ragdial: usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "ragdial: error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
