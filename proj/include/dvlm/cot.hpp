#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "dvlm/model.hpp"

namespace dvlm {

// Staged question answering: perception first, then prediction, planning,
// behavior. When chaining is active, object identities named in downstream
// questions are replaced by the tags the model actually predicted in its
// perception answer — ground-truth tags the model missed are removed entirely
// so later stages can't leak identities the model never produced.
struct CoTPlan {
    std::vector<Task> stages{Task::perception, Task::prediction, Task::planning, Task::behavior};
    bool core_only = true;  // chained rewriting active (restricted to the core chain)
    std::map<std::string, std::string> substitutions;  // gt tag -> predicted tag ("" = drop)
    bool flagged = false;  // predicted tags present but unparseable
};

// Builds the substitution map from the core perception exchange: the k-th
// ground-truth tag maps to the k-th predicted tag; ground-truth tags beyond
// the prediction map to the empty string (dropped downstream). A prediction
// that contains tag-like text which fails to parse flags the plan and leaves
// the map empty (everything ground-truth gets dropped downstream).
inline CoTPlan build_cot_plan(const std::vector<std::string>& gold_tags,
                              const std::string& predicted_answer, bool use_cot) {
    CoTPlan plan;
    plan.core_only = use_cot;
    if (!use_cot) return plan;

    auto pred_tags = extract_ctags(predicted_answer);
    size_t tag_starts = 0;
    for (size_t pos = 0; (pos = predicted_answer.find("<c", pos)) != std::string::npos; ++pos) {
        if (pos + 2 < predicted_answer.size() && std::isdigit(predicted_answer[pos + 2]))
            ++tag_starts;
    }
    if (tag_starts > pred_tags.size()) {
        plan.flagged = true;
        pred_tags.clear();
    }
    for (size_t k = 0; k < gold_tags.size(); ++k)
        plan.substitutions[gold_tags[k]] = k < pred_tags.size() ? pred_tags[k] : std::string();
    return plan;
}

namespace detail {

// Removes one occurrence starting at pos, swallowing an immediately adjacent
// list connective (" and " / " , ") so dropped tags leave clean text behind.
inline void erase_tag_at(std::string& text, size_t pos, size_t len) {
    size_t begin = pos, end = pos + len;
    auto precedes = [&](const std::string& tok) {
        return begin >= tok.size() && text.compare(begin - tok.size(), tok.size(), tok) == 0;
    };
    auto follows = [&](const std::string& tok) {
        return text.compare(end, tok.size(), tok) == 0;
    };
    if (precedes(" and ")) {
        begin -= 5;
    } else if (precedes(" , ")) {
        begin -= 3;
    } else if (follows(" and ")) {
        end += 5;
    } else if (follows(" , ")) {
        end += 3;
    } else if (follows(" ")) {
        end += 1;
    } else if (precedes(" ")) {
        begin -= 1;
    }
    text.erase(begin, end - begin);
}

}  // namespace detail

// Applies the plan to one downstream question: mapped tags are substituted,
// dropped tags are removed along with their list connectives. Inactive plans
// return the question verbatim.
inline std::string rewrite_question(const std::string& question, const CoTPlan& plan) {
    if (!plan.core_only) return question;
    std::string out = question;
    for (const auto& [gt, sub] : plan.substitutions) {
        size_t pos = 0;
        while ((pos = out.find(gt, pos)) != std::string::npos) {
            if (!sub.empty()) {
                out.replace(pos, gt.size(), sub);
                pos += sub.size();
            } else {
                detail::erase_tag_at(out, pos, gt.size());
            }
        }
    }
    return out;
}

// One scored exchange of the staged pipeline.
struct StagedAnswer {
    QARecord record;
    std::string asked_question;  // after any rewriting
    std::string prediction;
    bool flagged = false;
};

struct CoTResult {
    CoTPlan plan;
    std::vector<StagedAnswer> answers;
};

// Runs the full staged pipeline over one scene's records: the core perception
// question is asked verbatim and its prediction seeds the substitution plan;
// every later-stage question is rewritten through the plan before being
// asked. Non-core questions carry no chained context beyond that rewriting.
template <class S>
CoTResult cot_pipeline(Model<S>& model, const std::vector<QARecord>& scene_records,
                       bool use_cot, int max_new, bool detached = true) {
    if (scene_records.empty()) throw InputError("cot_pipeline: no records");
    for (const auto& r : scene_records)
        if (r.scene_seed != scene_records.front().scene_seed)
            throw InputError("cot_pipeline: records span multiple scenes");

    // Stage-ordered view: perception, prediction, planning, behavior; the
    // core record leads within each stage.
    std::vector<size_t> order(scene_records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const auto& ra = scene_records[a];
        const auto& rb = scene_records[b];
        if (ra.task != rb.task) return static_cast<int>(ra.task) < static_cast<int>(rb.task);
        return ra.is_core && !rb.is_core;
    });

    CoTResult out;
    out.plan.core_only = use_cot;
    auto answer_one = [&](const QARecord& rec, const std::string& question) {
        auto ctx = prepare_record(model, rec);
        auto builder = make_prefix_builder(model, ctx, detached);
        StagedAnswer sa;
        sa.record = rec;
        sa.asked_question = question;
        sa.prediction = generate(model.dec, model.ps, model.cfg.use_plora ? &model.bank : nullptr,
                                 ctx.route, builder, model.vocab, question, max_new);
        return sa;
    };

    bool plan_built = false;
    for (size_t idx : order) {
        const QARecord& rec = scene_records[idx];
        if (!plan_built && rec.task == Task::perception && rec.is_core) {
            StagedAnswer sa = answer_one(rec, rec.question);
            out.plan = build_cot_plan(rec.identities, sa.prediction, use_cot);
            sa.flagged = out.plan.flagged;
            out.answers.push_back(std::move(sa));
            plan_built = true;
            continue;
        }
        std::string q = rec.task == Task::perception ? rec.question
                                                     : rewrite_question(rec.question, out.plan);
        out.answers.push_back(answer_one(rec, q));
    }
    return out;
}

}  // namespace dvlm
