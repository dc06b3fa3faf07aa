// CLIM command-line driver: train / eval / predict.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.
// Errors print a single machine-parsable line: "CLIM_ERROR <category>: <msg>".

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "clim/config.hpp"
#include "clim/params.hpp"

namespace fs = std::filesystem;

namespace {

std::string resolve_output_dir(const std::string& dir) {
    fs::path p(dir);
    if (p.is_absolute()) return p.string();
    if (const char* root = std::getenv("CLIM_OUTPUT_ROOT"))
        return (fs::path(root) / p).string();
    return p.string();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw clim::DataError("cannot write " + path);
    os << content;
}

struct LoadedModel {
    clim::RunConfig cfg;
    clim::Vocabs vocabs;
    clim::ModelParams params;
};

LoadedModel load_model(const std::string& checkpoint_path) {
    auto ck = clim::load_checkpoint(checkpoint_path);
    LoadedModel m;
    m.cfg = clim::parse_config_text(ck.config_text);
    if (!ck.vocabs.count("word") || !ck.vocabs.count("slot") || !ck.vocabs.count("intent"))
        throw clim::DataError("checkpoint missing vocabularies: " + checkpoint_path);
    m.vocabs.word = clim::Vocab::from_tokens(clim::VocabKind::Word, ck.vocabs.at("word"));
    m.vocabs.slot = clim::Vocab::from_tokens(clim::VocabKind::Slot, ck.vocabs.at("slot"));
    m.vocabs.intent = clim::Vocab::from_tokens(clim::VocabKind::Intent, ck.vocabs.at("intent"));
    m.cfg.model.vocab_size = m.vocabs.word.size();
    m.cfg.model.slot_label_count = m.vocabs.slot.size();
    m.cfg.model.intent_count = m.vocabs.intent.size();
    // sanity: parameter shapes must match the embedded config
    const auto& emb = ck.params.at("embedding.table");
    if (emb.dim(0) != m.cfg.model.vocab_size || emb.dim(1) != m.cfg.model.embed_dim)
        throw clim::DataError("checkpoint/config mismatch: embedding table is " +
                              clim::shape_str(emb.shape()));
    m.params = std::move(ck.params);
    return m;
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides) {
    clim::RunConfig cfg = clim::load_config(config_path);
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw clim::ConfigError("--set expects key=value, got '" + ov + "'");
        clim::apply_config_key(cfg, ov.substr(0, eq), ov.substr(eq + 1));
    }
    if (cfg.data_dir.empty()) throw clim::ConfigError("data_dir is not set");
    if (!fs::exists(cfg.data_dir))
        throw clim::ConfigError("data_dir does not exist: " + cfg.data_dir);

    auto train_ex = clim::load_split(cfg.data_dir, cfg.train_split);
    auto valid_ex = clim::load_split(cfg.data_dir, cfg.valid_split);
    auto vocabs = clim::build_vocabs(train_ex);
    cfg.model.vocab_size = vocabs.word.size();
    cfg.model.slot_label_count = vocabs.slot.size();
    cfg.model.intent_count = vocabs.intent.size();
    cfg.model.validate();

    const std::string out_dir = resolve_output_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    write_file(out_dir + "/config.txt", clim::serialize_config(cfg));

    clim::Rng init_rng(cfg.seed);
    clim::ModelParams params = clim::init_model(cfg.model, init_rng);
    auto plan = clim::build_phase_plan(cfg.train);
    std::cout << "training " << clim::to_string(cfg.model.encoder_variant) << " on "
              << cfg.data_dir << " (" << train_ex.size() << " train / "
              << valid_ex.size() << " valid)\n";
    clim::TrainResult result = clim::train_run(cfg.model, cfg.train,
                                               std::move(params), train_ex,
                                               valid_ex, vocabs, plan);
    clim::write_trace(out_dir + "/trace.csv", result.trace);

    clim::Checkpoint ck;
    ck.config_text = clim::serialize_config(cfg);
    ck.vocabs["word"] = vocabs.word.tokens();
    ck.vocabs["slot"] = vocabs.slot.tokens();
    ck.vocabs["intent"] = vocabs.intent.tokens();
    ck.params = result.params.clone();
    clim::save_checkpoint(out_dir + "/checkpoint.clim", ck);

    clim::EvalResult ev = clim::evaluate_model(cfg.model, result.params, valid_ex,
                                               vocabs, cfg.train.batch_size);
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "best_epoch=%ld\nslot_f1=%.6f\nintent_acc=%.6f\n"
                  "intent_error_rate=%.6f\nslot_loss=%.6f\nintent_loss=%.6f\n",
                  result.best_epoch, ev.slot.f1, ev.intent.accuracy,
                  ev.intent.error_rate, ev.slot_loss, ev.intent_loss);
    write_file(out_dir + "/summary.txt", buf);
    std::cout << buf;
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& split, const std::string& dump_path) {
    LoadedModel m = load_model(checkpoint_path);
    auto examples = clim::load_split(data_dir, split);
    clim::EvalResult ev = clim::evaluate_model(m.cfg.model, m.params, examples,
                                               m.vocabs, m.cfg.train.batch_size);
    std::vector<std::vector<std::string>> tokens, gold_tags;
    std::vector<std::string> gold_intents;
    for (const auto& ex : examples) {
        tokens.push_back(ex.tokens);
        gold_tags.push_back(ex.slot_labels);
        gold_intents.push_back(ex.intent);
    }
    if (!dump_path.empty()) {
        std::ofstream os(dump_path, std::ios::trunc);
        if (!os) throw clim::DataError("cannot write " + dump_path);
        clim::write_predictions(os, tokens, gold_tags, ev.predictions.slot_tags,
                                gold_intents, ev.predictions.intents);
    }
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "slot_f1=%.6f\nintent_acc=%.6f\nintent_error_rate=%.6f\n",
                  ev.slot.f1, ev.intent.accuracy, ev.intent.error_rate);
    std::cout << buf;
    return 0;
}

int cmd_predict(const std::string& checkpoint_path,
                const std::vector<std::string>& tokens) {
    if (tokens.empty()) {
        std::cerr << "CLIM_ERROR usage: predict requires at least one token\n";
        return 1;
    }
    LoadedModel m = load_model(checkpoint_path);
    clim::Example ex;
    ex.tokens = tokens;
    ex.slot_labels.assign(tokens.size(), "O");  // placeholders, unused
    ex.intent = m.vocabs.intent.token(0);
    clim::Predictions pred = clim::predict(m.cfg.model, m.params, {ex}, m.vocabs,
                                           m.cfg.train.batch_size);
    for (std::size_t i = 0; i < tokens.size(); ++i)
        std::cout << tokens[i] << '\t' << pred.slot_tags[0][i] << '\n';
    std::cout << "intent\t" << pred.intents[0] << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CLIM joint slot-filling / intent-detection trainer"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "run config file")->required();
    train->add_option("--set", overrides, "override a config key (key=value)");

    std::string checkpoint_path, data_dir, split = "test", dump_path;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory")->required();
    eval->add_option("--split", split, "split name (default test)");
    eval->add_option("--dump", dump_path, "prediction dump output path");

    std::string pred_checkpoint;
    std::vector<std::string> tokens;
    auto* predict = app.add_subcommand("predict", "tag a pre-tokenized utterance");
    predict->add_option("--checkpoint", pred_checkpoint, "checkpoint file")->required();
    predict->add_option("tokens", tokens, "whitespace-pre-tokenized words");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, overrides);
        if (eval->parsed()) return cmd_eval(checkpoint_path, data_dir, split, dump_path);
        if (predict->parsed()) return cmd_predict(pred_checkpoint, tokens);
    } catch (const clim::ConfigError& e) {
        std::cerr << "CLIM_ERROR config: " << e.what() << "\n";
        return 1;
    } catch (const clim::DataError& e) {
        std::cerr << "CLIM_ERROR data: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "CLIM_ERROR runtime: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
