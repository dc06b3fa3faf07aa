#pragma once

// ATIS/Snips-style data loading: three parallel line-aligned files per split
// (seq.in / seq.out / label), vocabulary construction from the training split,
// and padded mini-batching.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "clim/common.hpp"

namespace clim {

struct Example {
    std::vector<std::string> tokens;
    std::vector<std::string> slot_labels;
    std::string intent;
};

enum class VocabKind { Word, Slot, Intent };

// Dense bidirectional token<->id map. Word vocabs reserve id 0 for padding
// and id 1 for unknown; slot vocabs reserve id 0 for padding.
class Vocab {
  public:
    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kUnk = "<unk>";

    explicit Vocab(VocabKind kind) : kind_(kind) {
        if (kind == VocabKind::Word) {
            add(kPad);
            add(kUnk);
        } else if (kind == VocabKind::Slot) {
            add(kPad);
        }
    }

    VocabKind kind() const { return kind_; }

    int add(const std::string& token) {
        auto it = ids_.find(token);
        if (it != ids_.end()) return it->second;
        const int id = int(tokens_.size());
        ids_[token] = id;
        tokens_.push_back(token);
        return id;
    }

    bool contains(const std::string& token) const { return ids_.count(token) > 0; }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it != ids_.end()) return it->second;
        if (kind_ == VocabKind::Word) return ids_.at(kUnk);
        throw DataError("token '" + token + "' not in vocabulary");
    }

    const std::string& token(int id) const {
        if (id < 0 || std::size_t(id) >= tokens_.size())
            throw DataError("vocabulary id " + std::to_string(id) + " out of range");
        return tokens_[std::size_t(id)];
    }

    int size() const { return int(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    static Vocab from_tokens(VocabKind kind, const std::vector<std::string>& tokens) {
        Vocab v(kind);
        v.tokens_.clear();
        v.ids_.clear();
        for (const auto& t : tokens) v.add(t);
        return v;
    }

  private:
    VocabKind kind_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

struct Vocabs {
    Vocab word{VocabKind::Word};
    Vocab slot{VocabKind::Slot};
    Vocab intent{VocabKind::Intent};
};

struct Batch {
    long batch_size = 0;
    long max_len = 0;
    std::vector<int> token_ids;   // [B*T]
    std::vector<int> slot_ids;    // [B*T]
    std::vector<int> intent_ids;  // [B]
    std::vector<double> mask;     // [B*T], 1.0 on real tokens
    std::vector<long> lengths;    // [B]
};

namespace data_detail {

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open data file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

inline std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> out;
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace data_detail

inline std::vector<Example> load_split(const std::string& data_dir,
                                       const std::string& split_name) {
    namespace fs = std::filesystem;
    const std::string base = (fs::path(data_dir) / split_name).string();
    const std::string in_path = base + "/seq.in";
    const std::string out_path = base + "/seq.out";
    const std::string label_path = base + "/label";
    auto tokens = data_detail::read_lines(in_path);
    auto tags = data_detail::read_lines(out_path);
    auto labels = data_detail::read_lines(label_path);
    if (tokens.size() != tags.size() || tokens.size() != labels.size())
        throw DataError("line count mismatch in " + base + ": seq.in=" +
                        std::to_string(tokens.size()) + " seq.out=" +
                        std::to_string(tags.size()) + " label=" +
                        std::to_string(labels.size()));
    std::vector<Example> examples;
    examples.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        Example ex;
        ex.tokens = data_detail::split_ws(tokens[i]);
        ex.slot_labels = data_detail::split_ws(tags[i]);
        ex.intent = labels[i];
        if (ex.tokens.empty())
            throw DataError(in_path + ":" + std::to_string(i + 1) + ": empty utterance");
        if (ex.tokens.size() != ex.slot_labels.size())
            throw DataError(out_path + ":" + std::to_string(i + 1) + ": " +
                            std::to_string(ex.tokens.size()) + " tokens but " +
                            std::to_string(ex.slot_labels.size()) + " tags");
        if (ex.intent.empty())
            throw DataError(label_path + ":" + std::to_string(i + 1) + ": empty intent");
        examples.push_back(std::move(ex));
    }
    return examples;
}

// Converts a CoNLL-style two-column file (token TAB/space tag, blank line
// between utterances, each utterance preceded by a "# intent=<label>" line)
// into the three-parallel-file layout under out_dir/split_name.
inline void convert_conll(const std::string& conll_path, const std::string& out_dir,
                          const std::string& split_name) {
    namespace fs = std::filesystem;
    auto lines = data_detail::read_lines(conll_path);
    fs::create_directories(fs::path(out_dir) / split_name);
    const std::string base = (fs::path(out_dir) / split_name).string();
    std::ofstream seq_in(base + "/seq.in");
    std::ofstream seq_out(base + "/seq.out");
    std::ofstream label(base + "/label");
    std::vector<std::string> toks, tags;
    std::string intent;
    auto flush = [&] {
        if (toks.empty()) return;
        if (intent.empty())
            throw DataError(conll_path + ": utterance without '# intent=' line");
        for (std::size_t i = 0; i < toks.size(); ++i) {
            seq_in << (i ? " " : "") << toks[i];
            seq_out << (i ? " " : "") << tags[i];
        }
        seq_in << "\n";
        seq_out << "\n";
        label << intent << "\n";
        toks.clear();
        tags.clear();
        intent.clear();
    };
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto& line = lines[i];
        if (line.empty()) {
            flush();
            continue;
        }
        if (line.rfind("# intent=", 0) == 0) {
            intent = line.substr(9);
            continue;
        }
        auto cols = data_detail::split_ws(line);
        if (cols.size() != 2)
            throw DataError(conll_path + ":" + std::to_string(i + 1) +
                            ": expected 'token tag', got '" + line + "'");
        toks.push_back(cols[0]);
        tags.push_back(cols[1]);
    }
    flush();
}

// First-occurrence ordering over the training split only.
inline Vocabs build_vocabs(const std::vector<Example>& train_examples) {
    if (train_examples.empty())
        throw ContractError("build_vocabs: empty training set");
    Vocabs v;
    for (const auto& ex : train_examples) {
        for (const auto& t : ex.tokens) v.word.add(t);
        for (const auto& t : ex.slot_labels) v.slot.add(t);
        v.intent.add(ex.intent);
    }
    return v;
}

// Slot tags or intents unseen in training are flagged, never dropped
// silently; unknown slot tags fall back to "O" for encoding.
struct EncodeWarnings {
    std::vector<std::string> unseen_slot_tags;
    std::vector<std::string> unseen_intents;
};

inline std::vector<Batch> make_batches(const std::vector<Example>& examples,
                                       const Vocabs& vocabs, long batch_size,
                                       std::uint64_t shuffle_seed, bool shuffle,
                                       EncodeWarnings* warnings = nullptr) {
    if (examples.empty()) throw ContractError("make_batches: no examples");
    if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle) {
        Rng rng(shuffle_seed);
        rng.shuffle(order);
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(batch_size)) {
        const std::size_t end = std::min(order.size(), start + std::size_t(batch_size));
        Batch b;
        b.batch_size = long(end - start);
        long max_len = 0;
        for (std::size_t i = start; i < end; ++i)
            max_len = std::max(max_len, long(examples[order[i]].tokens.size()));
        b.max_len = max_len;
        b.token_ids.assign(std::size_t(b.batch_size * max_len), 0);
        b.slot_ids.assign(std::size_t(b.batch_size * max_len), 0);
        b.mask.assign(std::size_t(b.batch_size * max_len), 0.0);
        for (std::size_t i = start; i < end; ++i) {
            const auto& ex = examples[order[i]];
            const long row = long(i - start);
            b.lengths.push_back(long(ex.tokens.size()));
            for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
                const auto idx = std::size_t(row * max_len) + t;
                b.token_ids[idx] = vocabs.word.id(ex.tokens[t]);
                const auto& tag = ex.slot_labels[t];
                if (vocabs.slot.contains(tag)) {
                    b.slot_ids[idx] = vocabs.slot.id(tag);
                } else {
                    if (warnings) warnings->unseen_slot_tags.push_back(tag);
                    b.slot_ids[idx] = vocabs.slot.contains("O") ? vocabs.slot.id("O") : 0;
                }
                b.mask[idx] = 1.0;
            }
            if (vocabs.intent.contains(ex.intent)) {
                b.intent_ids.push_back(vocabs.intent.id(ex.intent));
            } else {
                if (warnings) warnings->unseen_intents.push_back(ex.intent);
                b.intent_ids.push_back(0);
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

// ids -> strings; used by the round-trip tests and prediction dumps.
inline std::vector<Example> decode_batch(const Batch& b, const Vocabs& vocabs) {
    std::vector<Example> out;
    for (long r = 0; r < b.batch_size; ++r) {
        Example ex;
        for (long t = 0; t < b.lengths[std::size_t(r)]; ++t) {
            const auto idx = std::size_t(r * b.max_len + t);
            ex.tokens.push_back(vocabs.word.token(b.token_ids[idx]));
            ex.slot_labels.push_back(vocabs.slot.token(b.slot_ids[idx]));
        }
        ex.intent = vocabs.intent.token(b.intent_ids[std::size_t(r)]);
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace clim
