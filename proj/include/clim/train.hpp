#pragma once

// Joint-loss optimization, the modified continual-learning schedule
// (joint warmup, then task-focused phases with a positive floor on the
// off-task loss weight), embedding freezing, and checkpoint selection.

#include <cmath>
#include <string>
#include <vector>

#include "clim/adam.hpp"
#include "clim/eval.hpp"
#include "clim/model.hpp"

namespace clim {

struct LossParts {
    Tensor total;
    Tensor slot;
    Tensor intent;
};

// lambda_slot * mean-over-unmasked-token CE(slot) +
// lambda_intent * mean-over-batch CE(intent)
inline LossParts joint_loss(const Tensor& intent_lg, const Tensor& slot_lg,
                            const Batch& batch, double lambda_slot,
                            double lambda_intent) {
    if (lambda_slot < 0.0 || lambda_intent < 0.0 ||
        (lambda_slot == 0.0 && lambda_intent == 0.0))
        throw ConfigError("loss weights must be non-negative and not both zero");
    LossParts out;
    out.slot = cross_entropy(slot_lg, batch.slot_ids, batch.mask);
    out.intent = cross_entropy(intent_lg, batch.intent_ids,
                               std::vector<double>(std::size_t(batch.batch_size), 1.0));
    out.total = add(scale(out.slot, lambda_slot), scale(out.intent, lambda_intent));
    return out;
}

// ---------------------------------------------------------------------------
// prediction and evaluation

struct Predictions {
    std::vector<std::vector<std::string>> slot_tags;  // per utterance
    std::vector<std::string> intents;
};

inline Predictions predict(const ClimConfig& cfg, const ModelParams& params,
                           const std::vector<Example>& examples, const Vocabs& vocabs,
                           long batch_size) {
    NoGradGuard ng;
    Rng dummy(0);  // eval mode consumes no randomness
    Predictions out;
    auto batches = make_batches(examples, vocabs, batch_size, 0, /*shuffle=*/false);
    for (const auto& b : batches) {
        ForwardResult fr = forward(cfg, params, b, /*training=*/false, dummy);
        const long I = fr.intent_logits.dim(1);
        const long S = fr.slot_logits.dim(1);
        for (long r = 0; r < b.batch_size; ++r) {
            const double* irow = fr.intent_logits.values().data() + r * I;
            long ibest = 0;
            for (long c = 1; c < I; ++c)
                if (irow[c] > irow[ibest]) ibest = c;
            out.intents.push_back(vocabs.intent.token(int(ibest)));
            std::vector<std::string> tags;
            for (long t = 0; t < b.lengths[std::size_t(r)]; ++t) {
                const double* srow =
                    fr.slot_logits.values().data() + (r * b.max_len + t) * S;
                long sbest = 1;  // class 0 is the padding tag, never predicted
                for (long c = 2; c < S; ++c)
                    if (srow[c] > srow[sbest]) sbest = c;
                tags.push_back(vocabs.slot.token(int(sbest)));
            }
            out.slot_tags.push_back(std::move(tags));
        }
    }
    return out;
}

struct EvalResult {
    SlotScore slot;
    IntentScore intent;
    double slot_loss = 0.0;
    double intent_loss = 0.0;
    Predictions predictions;
};

inline EvalResult evaluate_model(const ClimConfig& cfg, const ModelParams& params,
                                 const std::vector<Example>& examples,
                                 const Vocabs& vocabs, long batch_size) {
    NoGradGuard ng;
    Rng dummy(0);
    EvalResult res;
    auto batches = make_batches(examples, vocabs, batch_size, 0, /*shuffle=*/false);
    std::vector<std::vector<std::string>> gold_tags;
    std::vector<int> gold_intents, pred_intents;
    double slot_loss_sum = 0.0, intent_loss_sum = 0.0, token_count = 0.0;
    long utt_count = 0;
    for (const auto& b : batches) {
        ForwardResult fr = forward(cfg, params, b, /*training=*/false, dummy);
        LossParts lp = joint_loss(fr.intent_logits, fr.slot_logits, b, 1.0, 1.0);
        double toks = 0.0;
        for (double m : b.mask) toks += m;
        slot_loss_sum += lp.slot.item() * toks;
        intent_loss_sum += lp.intent.item() * double(b.batch_size);
        token_count += toks;
        utt_count += b.batch_size;
        const long I = fr.intent_logits.dim(1);
        const long S = fr.slot_logits.dim(1);
        for (long r = 0; r < b.batch_size; ++r) {
            const double* irow = fr.intent_logits.values().data() + r * I;
            long ibest = 0;
            for (long c = 1; c < I; ++c)
                if (irow[c] > irow[ibest]) ibest = c;
            pred_intents.push_back(int(ibest));
            gold_intents.push_back(b.intent_ids[std::size_t(r)]);
            res.predictions.intents.push_back(vocabs.intent.token(int(ibest)));
            std::vector<std::string> gt, pt;
            for (long t = 0; t < b.lengths[std::size_t(r)]; ++t) {
                const auto idx = std::size_t(r * b.max_len + t);
                gt.push_back(vocabs.slot.token(b.slot_ids[idx]));
                const double* srow =
                    fr.slot_logits.values().data() + (r * b.max_len + t) * S;
                long sbest = 1;  // class 0 is the padding tag, never predicted
                for (long c = 2; c < S; ++c)
                    if (srow[c] > srow[sbest]) sbest = c;
                pt.push_back(vocabs.slot.token(int(sbest)));
            }
            gold_tags.push_back(std::move(gt));
            res.predictions.slot_tags.push_back(std::move(pt));
        }
    }
    res.slot = slot_f1(gold_tags, res.predictions.slot_tags);
    res.intent = intent_accuracy(gold_intents, pred_intents);
    res.slot_loss = slot_loss_sum / token_count;
    res.intent_loss = intent_loss_sum / double(utt_count);
    return res;
}

// ---------------------------------------------------------------------------
// training schedules

enum class Schedule { Joint, Continual };

inline Schedule parse_schedule(const std::string& s) {
    if (s == "joint") return Schedule::Joint;
    if (s == "continual") return Schedule::Continual;
    throw ConfigError("unknown schedule '" + s + "' (want joint or continual)");
}

struct TrainConfig {
    long epochs = 30;
    long batch_size = 20;
    double learning_rate = 1e-3;
    long embedding_freeze_epoch = 5;  // 0 disables freezing
    double lambda_slot = 1.0;
    double lambda_intent = 1.0;
    Schedule schedule = Schedule::Joint;
    long warmup_epochs = 5;    // continual: initial joint phase
    long phase_epochs = 3;     // continual: length of each focused phase
    double off_task_weight = 0.2;  // continual: positive floor, avoids forgetting
    std::uint64_t seed = 1;
};

struct Phase {
    std::string name;
    long epochs;
    double lambda_slot;
    double lambda_intent;
};

inline std::vector<Phase> build_phase_plan(const TrainConfig& cfg) {
    if (cfg.schedule == Schedule::Joint)
        return {{"joint", cfg.epochs, cfg.lambda_slot, cfg.lambda_intent}};
    if (cfg.off_task_weight <= 0.0)
        throw ConfigError("continual schedule requires off_task_weight > 0");
    std::vector<Phase> plan;
    long remaining = cfg.epochs;
    const long warm = std::min(cfg.warmup_epochs, remaining);
    if (warm > 0) plan.push_back({"joint", warm, 1.0, 1.0});
    remaining -= warm;
    bool slot_focus = true;
    while (remaining > 0) {
        const long len = std::min(cfg.phase_epochs, remaining);
        if (slot_focus)
            plan.push_back({"slot_focus", len, 1.0, cfg.off_task_weight});
        else
            plan.push_back({"intent_focus", len, cfg.off_task_weight, 1.0});
        slot_focus = !slot_focus;
        remaining -= len;
    }
    if (plan.empty()) throw ContractError("empty phase plan");
    return plan;
}

struct TrainResult {
    ModelParams params;  // selected checkpoint
    MetricTrace trace;
    long best_epoch = 0;
    long steps = 0;
};

// Selection rule shared by training and the standalone helper below:
// maximize (slot_f1 + intent_acc)/2 on validation, earlier epoch wins ties.
inline std::size_t checkpoint_select_index(const MetricTrace& trace) {
    if (trace.empty()) throw ContractError("checkpoint_select: empty trace");
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const double score = (trace[i].slot_f1 + trace[i].intent_acc) / 2.0;
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return best;
}

inline ModelParams checkpoint_select(const MetricTrace& trace,
                                     const std::vector<ModelParams>& checkpoints) {
    if (trace.size() != checkpoints.size())
        throw ContractError("checkpoint_select: " + std::to_string(trace.size()) +
                            " trace records vs " + std::to_string(checkpoints.size()) +
                            " checkpoints");
    return checkpoints[checkpoint_select_index(trace)].clone();
}

// Runs the given phase plan. The RNG consumption per epoch is independent of
// the loss weights, so a continual plan with off_task_weight = 1 reproduces a
// joint run bit-exactly (numeric columns; only the phase tags differ).
inline TrainResult train_run(const ClimConfig& mcfg, const TrainConfig& tcfg,
                             ModelParams params,
                             const std::vector<Example>& train_examples,
                             const std::vector<Example>& valid_examples,
                             const Vocabs& vocabs,
                             const std::vector<Phase>& plan) {
    AdamState adam;
    adam.learning_rate = tcfg.learning_rate;
    Rng dropout_rng(tcfg.seed * 0x9e3779b97f4a7c15ULL + 1);
    TrainResult result;
    result.params = params.clone();
    double best_score = -1.0;
    long epoch = 0;
    long global_step = 0;
    for (const auto& phase : plan) {
        for (long pe = 0; pe < phase.epochs; ++pe) {
            ++epoch;
            auto batches = make_batches(train_examples, vocabs, tcfg.batch_size,
                                        tcfg.seed + std::uint64_t(epoch), true);
            for (const auto& b : batches) {
                ++global_step;
                ForwardResult fr = forward(mcfg, params, b, /*training=*/true,
                                           dropout_rng);
                LossParts lp = joint_loss(fr.intent_logits, fr.slot_logits, b,
                                          phase.lambda_slot, phase.lambda_intent);
                if (!std::isfinite(lp.total.item()))
                    throw TrainingError("loss diverged (non-finite) at epoch " +
                                        std::to_string(epoch) + " step " +
                                        std::to_string(global_step));
                params.zero_grads();
                backward(lp.total);
                adam_step(params, adam);
            }
            EvalResult ev = evaluate_model(mcfg, params, valid_examples, vocabs,
                                           tcfg.batch_size);
            result.trace.push_back({epoch, phase.name, ev.slot.f1,
                                    ev.intent.accuracy, ev.slot_loss,
                                    ev.intent_loss});
            const double score = (ev.slot.f1 + ev.intent.accuracy) / 2.0;
            if (score > best_score) {
                best_score = score;
                result.params = params.clone();
                result.best_epoch = epoch;
            }
            if (tcfg.embedding_freeze_epoch > 0 &&
                epoch == tcfg.embedding_freeze_epoch)
                params.set_frozen("embedding.table", true);
        }
    }
    result.steps = global_step;
    return result;
}

inline TrainResult train_joint(const ClimConfig& mcfg, const TrainConfig& tcfg,
                               ModelParams params,
                               const std::vector<Example>& train_examples,
                               const std::vector<Example>& valid_examples,
                               const Vocabs& vocabs) {
    TrainConfig cfg = tcfg;
    cfg.schedule = Schedule::Joint;
    return train_run(mcfg, cfg, std::move(params), train_examples, valid_examples,
                     vocabs, build_phase_plan(cfg));
}

inline TrainResult train_continual(const ClimConfig& mcfg, const TrainConfig& tcfg,
                                   ModelParams params,
                                   const std::vector<Example>& train_examples,
                                   const std::vector<Example>& valid_examples,
                                   const Vocabs& vocabs) {
    TrainConfig cfg = tcfg;
    cfg.schedule = Schedule::Continual;
    return train_run(mcfg, cfg, std::move(params), train_examples, valid_examples,
                     vocabs, build_phase_plan(cfg));
}

}  // namespace clim
