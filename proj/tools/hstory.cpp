// hstory: hierarchical visual-story decoder workflow.
// Subcommands: gen-toy | train | generate | evaluate | gradcheck | nn.
// Config precedence: defaults < --paper-scale preset < --config JSON < flags.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hstory/dataio.hpp"
#include "hstory/decoder.hpp"
#include "hstory/gradcheck.hpp"
#include "hstory/inference.hpp"
#include "hstory/logging.hpp"
#include "hstory/metrics.hpp"
#include "hstory/threading.hpp"
#include "hstory/training.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct Options {
    std::string config_path;
    bool paper_scale = false;
    bool dump_config = false;
    bool freeze_embeddings = false;
    std::string corpus, features_dir, word_emb, sent_emb, ckpt, out, query;
    double lr = 1e-3, dropout = 0.4, grad_clip = 5.0;
    std::uint64_t seed = 7;
    std::size_t epochs = 10, batch = 16, beam = 1, jobs = 1;
    std::size_t hidden = 64, locations = 9, raw_dim = 32, max_words = 15, images = 5;
    std::size_t vocab = 60, topics = 8, stories = 20, k = 5;
};

void apply_paper_scale(Options& o) {
    o.hidden = 768;
    o.locations = 196;
    o.raw_dim = 512;
    o.max_words = 15;
    o.images = 5;
    o.batch = 16;
    o.dropout = 0.4;
    o.lr = 1e-3;
    o.vocab = 18000;
}

void apply_config_file(Options& o, const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(hstory::serial::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ": bad config file: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(path + ": config file must hold a JSON object");
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    get("corpus", o.corpus);
    get("features_dir", o.features_dir);
    get("word_emb", o.word_emb);
    get("sent_emb", o.sent_emb);
    get("ckpt", o.ckpt);
    get("out", o.out);
    get("query", o.query);
    get("lr", o.lr);
    get("dropout", o.dropout);
    get("grad_clip", o.grad_clip);
    get("seed", o.seed);
    get("epochs", o.epochs);
    get("batch", o.batch);
    get("beam", o.beam);
    get("jobs", o.jobs);
    get("hidden", o.hidden);
    get("locations", o.locations);
    get("raw_dim", o.raw_dim);
    get("max_words", o.max_words);
    get("images", o.images);
    get("vocab", o.vocab);
    get("topics", o.topics);
    get("stories", o.stories);
    get("k", o.k);
    get("freeze_embeddings", o.freeze_embeddings);
}

std::size_t attention_dim(std::size_t hidden) { return hidden >= 2 ? hidden / 2 : 1; }

ordered_json resolved_json(const Options& o, const std::string& subcommand) {
    ordered_json j;
    j["subcommand"] = subcommand;
    j["paper_scale"] = o.paper_scale;
    j["hidden_dim"] = o.hidden;
    j["attention_dim"] = attention_dim(o.hidden);
    j["locations"] = o.locations;
    j["raw_feature_dim"] = o.raw_dim;
    j["max_sentence_len"] = o.max_words;
    j["images_per_story"] = o.images;
    j["vocab_size"] = o.vocab;
    j["topics"] = o.topics;
    j["stories"] = o.stories;
    j["batch_size"] = o.batch;
    j["dropout"] = o.dropout;
    j["learning_rate"] = o.lr;
    j["epochs"] = o.epochs;
    j["grad_clip_norm"] = o.grad_clip;
    j["seed"] = o.seed;
    j["beam"] = o.beam;
    j["jobs"] = o.jobs;
    j["k"] = o.k;
    j["freeze_embeddings"] = o.freeze_embeddings;
    ordered_json paths;
    paths["corpus"] = o.corpus;
    paths["features_dir"] = o.features_dir;
    paths["word_emb"] = o.word_emb;
    paths["sent_emb"] = o.sent_emb;
    paths["ckpt"] = o.ckpt;
    paths["out"] = o.out;
    j["paths"] = std::move(paths);
    return j;
}

[[noreturn]] void usage_error(const std::string& msg) {
    std::cerr << "usage error: " << msg << "\n";
    std::exit(2);
}

void require_path(const std::string& value, const char* flag) {
    if (value.empty()) usage_error(std::string("missing required ") + flag);
}

void emit(const std::string& out_path, const std::string& text) {
    if (out_path.empty())
        std::cout << text;
    else
        hstory::serial::write_file(out_path, text);
}

// ---------------------------------------------------------------------------

int run_gen_toy(const Options& o) {
    require_path(o.out, "--out");
    hstory::GenToyConfig cfg;
    cfg.seed = o.seed;
    cfg.stories = o.stories;
    cfg.vocab_size = o.vocab;
    cfg.topics = o.topics;
    cfg.images = o.images;
    cfg.max_words = o.max_words;
    cfg.locations = o.locations;
    cfg.raw_dim = o.raw_dim;
    cfg.embed_dim = o.hidden;
    cfg.out_dir = o.out;
    hstory::ToyPaths paths = hstory::gen_toy_corpus(cfg);
    std::cout << "corpus       " << paths.corpus << "\n"
              << "features     " << paths.features_dir << "\n"
              << "word-emb     " << paths.word_emb << "\n"
              << "sentence-emb " << paths.sentence_emb << "\n";
    return 0;
}

int run_train(const Options& o) {
    require_path(o.corpus, "--corpus");
    require_path(o.features_dir, "--features-dir");
    require_path(o.word_emb, "--word-emb");
    require_path(o.sent_emb, "--sent-emb");
    require_path(o.out, "--out");
    hstory::EmbeddingTable words = hstory::load_embeddings(o.word_emb);
    hstory::require_word_table(words);
    hstory::EmbeddingTable sents = hstory::load_embeddings(o.sent_emb);
    if (sents.size() == 0) throw std::runtime_error(o.sent_emb + ": sentence table is empty");
    if (sents.dim != words.dim)
        throw std::runtime_error("embedding dimension mismatch: words " + std::to_string(words.dim) +
                                 " vs sentences " + std::to_string(sents.dim));
    auto records = hstory::load_corpus(o.corpus, o.max_words, o.images, &words);
    auto prepared = hstory::prepare_stories(records, o.features_dir, words, &sents);
    if (prepared.empty()) throw std::runtime_error(o.corpus + ": empty corpus");

    hstory::ModelDims dims;
    dims.raw_dim = prepared.front().grids.front().cols();
    dims.hidden = words.dim;
    dims.attn = attention_dim(words.dim);
    dims.vocab = words.size();
    dims.sentence_vocab = sents.size();
    hstory::SplitMix64 init_rng = hstory::SplitMix64(o.seed).fork(3ULL << 32);
    hstory::ModelParameters params =
        hstory::ModelParameters::init(dims, init_rng, words.vectors, sents.vectors, o.freeze_embeddings);

    hstory::TrainConfig cfg;
    cfg.batch_size = o.batch;
    cfg.dropout = o.dropout;
    cfg.learning_rate = o.lr;
    cfg.epochs = o.epochs;
    cfg.seed = o.seed;
    cfg.grad_clip_norm = o.grad_clip;
    cfg.max_words = o.max_words;
    cfg.images = o.images;
    cfg.hidden = words.dim;
    cfg.locations = o.locations;
    cfg.raw_dim = dims.raw_dim;
    cfg.vocab_size = words.size();
    cfg.freeze_embeddings = o.freeze_embeddings;
    cfg.jobs = o.jobs;
    hstory::TrainResult result = hstory::train(prepared, params, cfg, o.out);
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        hstory::log_info("final epoch " + std::to_string(last.epoch) + ": mean_loss " +
                         hstory::format_g17(last.mean_loss) + ", token_accuracy " +
                         hstory::format_g17(last.token_accuracy));
    }
    std::cout << "checkpoint " << result.checkpoint_path << "\n"
              << "loss-log   " << result.loss_csv_path << "\n";
    return 0;
}

struct LoadedModel {
    hstory::EmbeddingTable words;
    hstory::ModelParameters params;
    std::vector<hstory::StoryRecord> records;
    int null_id = 0;
};

LoadedModel load_for_inference(const Options& o) {
    require_path(o.corpus, "--corpus");
    require_path(o.features_dir, "--features-dir");
    require_path(o.word_emb, "--word-emb");
    require_path(o.ckpt, "--ckpt");
    LoadedModel m{hstory::load_embeddings(o.word_emb), hstory::ModelParameters::load(o.ckpt), {}, 0};
    hstory::require_word_table(m.words);
    if (m.params.dims.vocab != m.words.size() || m.params.dims.hidden != m.words.dim)
        throw std::runtime_error("checkpoint/vocabulary mismatch: checkpoint " +
                                 std::to_string(m.params.dims.vocab) + "x" + std::to_string(m.params.dims.hidden) +
                                 ", table " + std::to_string(m.words.size()) + "x" + std::to_string(m.words.dim));
    m.records = hstory::load_corpus(o.corpus, o.max_words, o.images, &m.words);
    m.null_id = static_cast<int>(m.words.id_of(hstory::kNullToken));
    return m;
}

std::vector<hstory::RealArray> story_grids(const Options& o, const hstory::StoryRecord& rec) {
    auto grids = hstory::load_feature_file((fs::path(o.features_dir) / rec.feature_file).string());
    std::vector<hstory::RealArray> values;
    values.reserve(grids.size());
    for (auto& g : grids) values.push_back(std::move(g.values));
    return values;
}

int run_generate(const Options& o) {
    LoadedModel m = load_for_inference(o);
    std::vector<std::string> lines(m.records.size());
    hstory::parallel_for(m.records.size(), o.jobs, [&](std::size_t i) {
        const auto gen = hstory::generate_story(story_grids(o, m.records[i]), m.params, o.beam, o.max_words, m.null_id);
        ordered_json j;
        j["story_id"] = m.records[i].story_id;
        auto sentences = ordered_json::array();
        for (const auto& sent : gen.sentences) {
            auto s = ordered_json::array();
            for (int id : sent) s.push_back(m.words.tokens[static_cast<std::size_t>(id)]);
            sentences.push_back(std::move(s));
        }
        j["sentences"] = std::move(sentences);
        j["word_probs"] = gen.word_probs;
        j["logprob"] = gen.logprob;
        lines[i] = j.dump();
    });
    std::string out;
    for (const std::string& line : lines) {
        out += line;
        out += "\n";
    }
    emit(o.out, out);
    return 0;
}

int run_evaluate(const Options& o) {
    LoadedModel m = load_for_inference(o);
    std::vector<std::vector<hstory::TokenSeq>> cand_per_story(m.records.size());
    hstory::parallel_for(m.records.size(), o.jobs, [&](std::size_t i) {
        const auto gen = hstory::generate_story(story_grids(o, m.records[i]), m.params, o.beam, o.max_words, m.null_id);
        for (const auto& sent : gen.sentences) {
            hstory::TokenSeq toks;
            for (int id : sent) toks.push_back(m.words.tokens[static_cast<std::size_t>(id)]);
            cand_per_story[i].push_back(std::move(toks));
        }
    });
    std::vector<hstory::TokenSeq> candidates, references;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& rec = m.records[i];
        for (std::size_t t = 0; t < rec.sentences.size(); ++t) {
            hstory::TokenSeq ref;
            for (std::size_t k = 0; k < rec.sentences[t].size(); ++k)
                if (rec.masks[t][k]) ref.push_back(rec.sentences[t][k]);
            if (ref.empty()) continue;  // unscorable reference
            references.push_back(std::move(ref));
            candidates.push_back(cand_per_story[i][t]);
        }
    }
    if (candidates.empty()) throw std::runtime_error("evaluate: no scorable sentences in corpus");
    std::vector<std::vector<hstory::TokenSeq>> refs_per_item;
    refs_per_item.reserve(references.size());
    for (const auto& r : references) refs_per_item.push_back({r});
    ordered_json j;
    j["bleu"] = hstory::bleu(candidates, references);
    j["cider"] = hstory::cider(candidates, refs_per_item).score;
    j["items"] = candidates.size();
    emit(o.out, j.dump() + "\n");
    return 0;
}

int run_gradcheck(const Options& o) {
    const auto rep = hstory::gradcheck_story_loss(o.seed);
    std::printf("max relative error: %.6e over %zu sampled parameters (threshold 1.0e-04)\n", rep.max_rel_err,
                rep.samples);
    return rep.max_rel_err <= 1e-4 ? 0 : 1;
}

int run_nn(const Options& o) {
    if (o.word_emb.empty() == o.sent_emb.empty())
        usage_error("nn needs exactly one of --word-emb or --sent-emb");
    require_path(o.query, "--query");
    const bool use_words = !o.word_emb.empty();
    hstory::EmbeddingTable table = hstory::load_embeddings(use_words ? o.word_emb : o.sent_emb);
    if (!o.ckpt.empty()) {
        hstory::ModelParameters params = hstory::ModelParameters::load(o.ckpt);
        const hstory::NodePtr& trained = use_words ? params.word_table : params.sentence_table;
        if (trained->value.rows() != table.size() || trained->value.cols() != table.dim)
            throw std::runtime_error("checkpoint table shape does not match the embedding file");
        table.vectors = trained->value;
    }
    const auto neighbors = hstory::nearest_neighbors(o.query, table, std::min(o.k, table.size()));
    for (const auto& [token, cosine] : neighbors) std::printf("%-24s %.6f\n", token.c_str(), cosine);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical visual-story decoder"};
    Options cli;
    app.add_option("--config", cli.config_path, "JSON config file (defaults < config < flags)");
    app.add_flag("--paper-scale", cli.paper_scale, "use the full-scale configuration preset");
    app.add_flag("--dump-config", cli.dump_config, "print the resolved configuration and exit");
    app.add_flag("--freeze-embeddings", cli.freeze_embeddings, "do not fine-tune embedding tables");
    app.add_option("--corpus", cli.corpus, "corpus JSONL path");
    app.add_option("--features-dir", cli.features_dir, "directory with FEAT1 files");
    app.add_option("--word-emb", cli.word_emb, "word embedding EMB1 path");
    app.add_option("--sent-emb", cli.sent_emb, "sentence embedding EMB1 path");
    app.add_option("--ckpt", cli.ckpt, "checkpoint CKPT1 path");
    app.add_option("--out", cli.out, "output file or directory");
    app.add_option("--epochs", cli.epochs, "training epochs");
    app.add_option("--batch", cli.batch, "batch size in stories");
    app.add_option("--lr", cli.lr, "Adam learning rate");
    app.add_option("--dropout", cli.dropout, "dropout probability");
    app.add_option("--beam", cli.beam, "beam width (>= 1)");
    app.add_option("--seed", cli.seed, "PRNG seed");
    app.add_option("--jobs", cli.jobs, "worker threads for generation/evaluation");
    app.add_option("--grad-clip", cli.grad_clip, "global gradient-norm clip (0 disables)");
    app.add_option("--hidden", cli.hidden, "hidden/embedding dimension");
    app.add_option("--locations", cli.locations, "spatial locations per image");
    app.add_option("--raw-dim", cli.raw_dim, "raw feature dimension");
    app.add_option("--max-words", cli.max_words, "sentence length limit");
    app.add_option("--images", cli.images, "images per story");
    app.add_option("--vocab", cli.vocab, "toy vocabulary size");
    app.add_option("--topics", cli.topics, "toy topic count");
    app.add_option("--stories", cli.stories, "toy story count");
    app.add_option("--k", cli.k, "neighbor count for nn");
    app.add_option("--query", cli.query, "query token for nn");

    CLI::App* sub_gen_toy = app.add_subcommand("gen-toy", "write a deterministic toy corpus");
    CLI::App* sub_train = app.add_subcommand("train", "train from corpus + features + embeddings");
    CLI::App* sub_generate = app.add_subcommand("generate", "decode stories from a checkpoint");
    CLI::App* sub_evaluate = app.add_subcommand("evaluate", "generate and score BLEU/CIDEr");
    CLI::App* sub_gradcheck = app.add_subcommand("gradcheck", "verify gradients against finite differences");
    CLI::App* sub_nn = app.add_subcommand("nn", "cosine nearest neighbors of a token");
    for (CLI::App* sub : {sub_gen_toy, sub_train, sub_generate, sub_evaluate, sub_gradcheck, sub_nn})
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        Options resolved;  // defaults
        if (cli.paper_scale) {
            resolved.paper_scale = true;
            apply_paper_scale(resolved);
        }
        if (!cli.config_path.empty()) apply_config_file(resolved, cli.config_path);
        auto overlay = [&](const char* flag, auto member) {
            if (app.count(flag) > 0) resolved.*member = cli.*member;
        };
        overlay("--freeze-embeddings", &Options::freeze_embeddings);
        overlay("--corpus", &Options::corpus);
        overlay("--features-dir", &Options::features_dir);
        overlay("--word-emb", &Options::word_emb);
        overlay("--sent-emb", &Options::sent_emb);
        overlay("--ckpt", &Options::ckpt);
        overlay("--out", &Options::out);
        overlay("--epochs", &Options::epochs);
        overlay("--batch", &Options::batch);
        overlay("--lr", &Options::lr);
        overlay("--dropout", &Options::dropout);
        overlay("--beam", &Options::beam);
        overlay("--seed", &Options::seed);
        overlay("--jobs", &Options::jobs);
        overlay("--grad-clip", &Options::grad_clip);
        overlay("--hidden", &Options::hidden);
        overlay("--locations", &Options::locations);
        overlay("--raw-dim", &Options::raw_dim);
        overlay("--max-words", &Options::max_words);
        overlay("--images", &Options::images);
        overlay("--vocab", &Options::vocab);
        overlay("--topics", &Options::topics);
        overlay("--stories", &Options::stories);
        overlay("--k", &Options::k);
        overlay("--query", &Options::query);

        std::string subcommand;
        for (const CLI::App* sub : app.get_subcommands()) subcommand = sub->get_name();

        if (cli.dump_config) {
            std::cout << resolved_json(resolved, subcommand).dump(2) << "\n";
            return 0;
        }
        if (subcommand.empty()) usage_error("a subcommand is required (see --help)");
        if (resolved.beam < 1) usage_error("--beam must be >= 1");
        if (resolved.jobs < 1) usage_error("--jobs must be >= 1");
        if (resolved.dropout < 0.0 || resolved.dropout >= 1.0) usage_error("--dropout must be in [0, 1)");

        if (subcommand == "gen-toy") return run_gen_toy(resolved);
        if (subcommand == "train") return run_train(resolved);
        if (subcommand == "generate") return run_generate(resolved);
        if (subcommand == "evaluate") return run_evaluate(resolved);
        if (subcommand == "gradcheck") return run_gradcheck(resolved);
        if (subcommand == "nn") return run_nn(resolved);
        usage_error("unknown subcommand '" + subcommand + "'");
    } catch (const std::exception& e) {
        hstory::log_error(e.what());
        return 1;
    }
}
