#pragma once

// Chunk-based slot F1 (conlleval-compatible lenient BIO reading), intent
// accuracy / error rate, and seesaw diagnostics over metric traces.

#include <fstream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "clim/common.hpp"

namespace clim {

struct Chunk {
    std::string label;  // without the B-/I- prefix
    long start = 0;     // inclusive
    long end = 0;       // exclusive

    auto operator<=>(const Chunk&) const = default;
};

namespace eval_detail {

struct TagView {
    char kind;          // 'O', 'B' or 'I'
    std::string label;  // empty for O
};

inline TagView parse_tag(const std::string& tag) {
    if (tag == "O") return {'O', ""};
    if (tag.size() >= 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-')
        return {tag[0], tag.substr(2)};
    throw DataError("malformed BIO tag '" + tag + "'");
}

}  // namespace eval_detail

// Maximal chunks under lenient repair: an I-X continuing nothing (after O,
// sequence start, or a different label) opens a new chunk; B- always opens.
inline std::set<Chunk> extract_chunks(const std::vector<std::string>& tags) {
    std::set<Chunk> chunks;
    std::string open_label;
    long open_start = -1;
    auto close = [&](long end) {
        if (open_start >= 0) chunks.insert({open_label, open_start, end});
        open_start = -1;
        open_label.clear();
    };
    for (long i = 0; i < long(tags.size()); ++i) {
        const auto tv = eval_detail::parse_tag(tags[std::size_t(i)]);
        if (tv.kind == 'O') {
            close(i);
        } else if (tv.kind == 'B') {
            close(i);
            open_label = tv.label;
            open_start = i;
        } else {  // I
            if (open_start < 0 || open_label != tv.label) {
                close(i);
                open_label = tv.label;
                open_start = i;
            }
        }
    }
    close(long(tags.size()));
    return chunks;
}

struct SlotScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long gold_chunks = 0;
    long pred_chunks = 0;
    long correct_chunks = 0;
};

// Micro-averaged exact-match chunk F1 over the corpus.
inline SlotScore slot_f1(const std::vector<std::vector<std::string>>& gold,
                         const std::vector<std::vector<std::string>>& pred) {
    if (gold.size() != pred.size())
        throw ContractError("slot_f1: " + std::to_string(gold.size()) +
                            " gold vs " + std::to_string(pred.size()) +
                            " predicted sequences");
    SlotScore s;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i].size() != pred[i].size())
            throw ContractError("slot_f1: length mismatch at sequence " +
                                std::to_string(i));
        auto g = extract_chunks(gold[i]);
        auto p = extract_chunks(pred[i]);
        s.gold_chunks += long(g.size());
        s.pred_chunks += long(p.size());
        for (const auto& c : p) s.correct_chunks += g.count(c) ? 1 : 0;
    }
    s.precision = s.pred_chunks ? double(s.correct_chunks) / double(s.pred_chunks) : 0.0;
    s.recall = s.gold_chunks ? double(s.correct_chunks) / double(s.gold_chunks) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
    return s;
}

struct IntentScore {
    double accuracy = 0.0;
    double error_rate = 0.0;
};

inline IntentScore intent_accuracy(const std::vector<int>& gold,
                                   const std::vector<int>& pred) {
    if (gold.empty()) throw ContractError("intent_accuracy: empty input");
    if (gold.size() != pred.size())
        throw ContractError("intent_accuracy: " + std::to_string(gold.size()) +
                            " gold vs " + std::to_string(pred.size()) + " predicted");
    long correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) correct += gold[i] == pred[i];
    IntentScore s;
    s.accuracy = double(correct) / double(gold.size());
    s.error_rate = 1.0 - s.accuracy;
    return s;
}

// ---------------------------------------------------------------------------
// metric traces and seesaw diagnostics

struct TraceRecord {
    long epoch = 0;
    std::string phase;
    double slot_f1 = 0.0;
    double intent_acc = 0.0;
    double slot_loss = 0.0;
    double intent_loss = 0.0;
};

using MetricTrace = std::vector<TraceRecord>;

struct SeesawReport {
    // per consecutive-epoch pair: (slot delta, intent delta)
    std::vector<std::pair<double, double>> deltas;
    // fraction of pairs where one metric rises while the other falls
    double seesaw_index = 0.0;
};

inline SeesawReport seesaw_report(const MetricTrace& trace) {
    if (trace.size() < 2)
        throw ContractError("seesaw_report: need at least 2 epochs, got " +
                            std::to_string(trace.size()));
    SeesawReport rep;
    long opposing = 0;
    for (std::size_t i = 1; i < trace.size(); ++i) {
        const double ds = trace[i].slot_f1 - trace[i - 1].slot_f1;
        const double di = trace[i].intent_acc - trace[i - 1].intent_acc;
        rep.deltas.emplace_back(ds, di);
        if ((ds > 0.0 && di < 0.0) || (ds < 0.0 && di > 0.0)) ++opposing;
    }
    rep.seesaw_index = double(opposing) / double(rep.deltas.size());
    return rep;
}

inline void write_trace(const std::string& path, const MetricTrace& trace) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open trace file for writing: " + path);
    os << "epoch,phase,slot_f1,intent_acc,slot_loss,intent_loss\n";
    char buf[256];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof buf, "%ld,%s,%.6f,%.6f,%.6f,%.6f\n", r.epoch,
                      r.phase.c_str(), r.slot_f1, r.intent_acc, r.slot_loss,
                      r.intent_loss);
        os << buf;
    }
}

// Prediction dump: token<TAB>gold<TAB>pred lines, blank line between
// utterances, one trailing "# intent gold=<g> pred=<p>" line each.
inline void write_predictions(std::ostream& os,
                              const std::vector<std::vector<std::string>>& tokens,
                              const std::vector<std::vector<std::string>>& gold_tags,
                              const std::vector<std::vector<std::string>>& pred_tags,
                              const std::vector<std::string>& gold_intents,
                              const std::vector<std::string>& pred_intents) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        for (std::size_t t = 0; t < tokens[i].size(); ++t)
            os << tokens[i][t] << '\t' << gold_tags[i][t] << '\t' << pred_tags[i][t]
               << '\n';
        os << "# intent gold=" << gold_intents[i] << " pred=" << pred_intents[i]
           << "\n\n";
    }
}

}  // namespace clim
