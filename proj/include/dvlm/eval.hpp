#pragma once

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvlm/cot.hpp"
#include "dvlm/judge.hpp"
#include "dvlm/metrics.hpp"

namespace dvlm {

struct EvalOptions {
    bool use_cot = true;
    JudgeConfig judge;
    double tag_tol = 0.05;   // normalized image distance for identity matching
    int subset = 0;          // evaluate only the first N scenes (0 = all)
    int max_new = 48;        // generation budget per answer
    bool detached = true;    // driving-token detachment during generation
};

// One evaluated exchange with its scores.
struct EvalRecordResult {
    QARecord record;
    std::string asked_question;
    std::string prediction;
    bool flagged = false;
    std::optional<double> judge_score;
    std::string judge_provenance;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["scene_seed"] = record.scene_seed;
        j["task"] = to_string(record.task);
        j["qtype"] = to_string(record.qtype);
        j["is_core"] = record.is_core;
        j["question"] = record.question;
        j["asked_question"] = asked_question;
        j["gold"] = record.answer;
        j["prediction"] = prediction;
        j["flagged"] = flagged;
        j["judge"] = judge_score ? nlohmann::json(*judge_score) : nlohmann::json(nullptr);
        j["judge_provenance"] = judge_provenance;
        return j;
    }
};

struct EvalResult {
    MetricReport report;
    std::optional<double> final;
    std::vector<EvalRecordResult> records;
    // per-scene substitution plans in evaluation order, for debugging and
    // leak auditing
    std::vector<std::pair<int64_t, CoTPlan>> plans;
};

// Full evaluation: staged generation per scene, then the metric suite.
// Closed-form questions feed accuracy; open questions feed the language
// metrics and the judge; core perception questions feed the identity-match
// score, which is blended half-and-half with the judge score of those same
// records.
template <class S>
EvalResult evaluate(Model<S>& model, const std::vector<QARecord>& records,
                    const EvalOptions& opts) {
    if (records.empty()) throw InputError("evaluate: no records");

    // group by scene in first-appearance order
    std::vector<int64_t> scene_order;
    std::map<int64_t, std::vector<QARecord>> by_scene;
    for (const auto& r : records) {
        if (by_scene.find(r.scene_seed) == by_scene.end()) scene_order.push_back(r.scene_seed);
        by_scene[r.scene_seed].push_back(r);
    }
    if (opts.subset > 0 && static_cast<int>(scene_order.size()) > opts.subset)
        scene_order.resize(static_cast<size_t>(opts.subset));

    EvalResult out;
    for (int64_t seed : scene_order) {
        auto res = cot_pipeline(model, by_scene[seed], opts.use_cot, opts.max_new, opts.detached);
        out.plans.emplace_back(seed, res.plan);
        for (auto& sa : res.answers) {
            EvalRecordResult rr;
            rr.record = std::move(sa.record);
            rr.asked_question = std::move(sa.asked_question);
            rr.prediction = std::move(sa.prediction);
            rr.flagged = sa.flagged;
            out.records.push_back(std::move(rr));
        }
    }

    // --- accuracy over closed-form questions ---------------------------
    std::vector<std::string> closed_pred, closed_gold;
    for (const auto& r : out.records) {
        if (r.record.qtype == QType::open) continue;
        closed_pred.push_back(r.prediction);
        closed_gold.push_back(r.record.answer);
    }
    if (!closed_pred.empty()) out.report.accuracy = accuracy_pct(closed_pred, closed_gold);

    // --- language metrics + judge over open questions ------------------
    std::vector<size_t> open_idx;
    for (size_t i = 0; i < out.records.size(); ++i)
        if (out.records[i].record.qtype == QType::open) open_idx.push_back(i);

    if (!open_idx.empty()) {
        std::vector<std::string> preds, golds;
        std::vector<JudgeQuery> queries;
        for (size_t i : open_idx) {
            const auto& r = out.records[i];
            preds.push_back(r.prediction);
            golds.push_back(r.record.answer);
            queries.push_back({r.asked_question, r.record.answer, r.prediction});
        }
        double b = 0, rl = 0;
        for (size_t k = 0; k < preds.size(); ++k) {
            b += bleu(preds[k], golds[k]);
            rl += rouge_l(preds[k], golds[k]);
        }
        out.report.bleu = 100.0 * b / static_cast<double>(preds.size());
        out.report.rouge_l = 100.0 * rl / static_cast<double>(preds.size());
        out.report.cider = cider(preds, golds);

        auto scores = judge_batch(queries, opts.judge);
        double jsum = 0;
        bool any_endpoint = false, any_fallback = false;
        for (size_t k = 0; k < open_idx.size(); ++k) {
            out.records[open_idx[k]].judge_score = scores[k].score;
            out.records[open_idx[k]].judge_provenance = scores[k].provenance;
            jsum += scores[k].score;
            any_endpoint = any_endpoint || scores[k].provenance == "endpoint";
            any_fallback = any_fallback || scores[k].provenance == "fallback";
        }
        out.report.judge = jsum / static_cast<double>(open_idx.size());
        out.report.judge_provenance =
            any_endpoint && any_fallback ? "mixed" : (any_endpoint ? "endpoint" : "fallback");
    }

    // --- identity match over core perception ---------------------------
    int matched = 0, gold_total = 0, eligible = 0;
    double judge_eligible = 0;
    for (const auto& r : out.records) {
        if (!(r.record.task == Task::perception && r.record.is_core)) continue;
        if (r.record.identities.empty()) continue;
        auto tm = match_tags(extract_ctags(r.prediction), r.record.identities, opts.tag_tol,
                             model.cfg.gen.image_w, model.cfg.gen.image_h);
        matched += tm.matched;
        gold_total += tm.gold_count;
        ++eligible;
        judge_eligible += r.judge_score.value_or(0.0);
    }
    if (eligible > 0 && gold_total > 0) {
        double recall_pct = 100.0 * matched / gold_total;
        double judge_mean = judge_eligible / eligible;
        out.report.match = 0.5 * recall_pct + 0.5 * judge_mean;
    }

    if (out.report.accuracy && out.report.judge && out.report.bleu && out.report.rouge_l &&
        out.report.cider && out.report.match)
        out.final = final_score(out.report);
    return out;
}

// ---------------------------------------------------------------------------
// Report artifacts
// ---------------------------------------------------------------------------

inline nlohmann::json eval_to_json(const EvalResult& res) {
    nlohmann::json j;
    j["report"] = res.report.to_json();
    j["final"] = res.final ? nlohmann::json(*res.final) : nlohmann::json(nullptr);
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : res.records) recs.push_back(r.to_json());
    j["records"] = std::move(recs);
    nlohmann::json plans = nlohmann::json::array();
    for (const auto& [seed, plan] : res.plans) {
        nlohmann::json p;
        p["scene_seed"] = seed;
        p["cot_active"] = plan.core_only;
        p["flagged"] = plan.flagged;
        nlohmann::json subs = nlohmann::json::object();
        for (const auto& [gt, sub] : plan.substitutions) subs[gt] = sub;
        p["substitutions"] = std::move(subs);
        plans.push_back(std::move(p));
    }
    j["plans"] = std::move(plans);
    return j;
}

inline std::string eval_table(const EvalResult& res) {
    std::ostringstream os;
    auto row = [&](const std::string& name, const std::optional<double>& v) {
        os << std::left << std::setw(12) << name;
        if (v)
            os << std::right << std::setw(8) << std::fixed << std::setprecision(2) << *v;
        else
            os << std::right << std::setw(8) << "-";
        os << "\n";
    };
    os << "metric        value\n";
    os << "-------------------\n";
    row("accuracy", res.report.accuracy);
    row("judge", res.report.judge);
    row("bleu", res.report.bleu);
    row("rouge_l", res.report.rouge_l);
    row("cider", res.report.cider);
    if (res.report.bleu && res.report.rouge_l && res.report.cider)
        row("lang", res.report.lang_score());
    else
        row("lang", std::nullopt);
    row("match", res.report.match);
    row("final", res.final);
    os << "records: " << res.records.size() << "  judge: " << res.report.judge_provenance
       << "\n";
    return os.str();
}

// Minimal standalone SVG helpers for the report artifacts.
inline void write_svg_bars(const std::string& path, const std::string& title,
                           const std::vector<std::pair<std::string, double>>& bars,
                           double max_value) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write SVG: " + path);
    const int w = 560, h = 320, pad = 48;
    const int plot_w = w - 2 * pad, plot_h = h - 2 * pad;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\">\n";
    out << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
        << title << "</text>\n";
    if (!bars.empty() && max_value > 0) {
        double bw = static_cast<double>(plot_w) / static_cast<double>(bars.size());
        for (size_t i = 0; i < bars.size(); ++i) {
            double frac = std::min(1.0, std::max(0.0, bars[i].second / max_value));
            double bh = frac * plot_h;
            double x = pad + static_cast<double>(i) * bw + bw * 0.15;
            out << "<rect x=\"" << x << "\" y=\"" << (pad + plot_h - bh) << "\" width=\""
                << bw * 0.7 << "\" height=\"" << bh << "\" fill=\"#4477aa\"/>\n";
            out << "<text x=\"" << x + bw * 0.35 << "\" y=\"" << (h - pad + 16)
                << "\" text-anchor=\"middle\" font-size=\"11\">" << bars[i].first << "</text>\n";
            out << "<text x=\"" << x + bw * 0.35 << "\" y=\"" << (pad + plot_h - bh - 4)
                << "\" text-anchor=\"middle\" font-size=\"10\">" << std::fixed
                << std::setprecision(1) << bars[i].second << "</text>\n";
        }
    }
    out << "<line x1=\"" << pad << "\" y1=\"" << (pad + plot_h) << "\" x2=\"" << (w - pad)
        << "\" y2=\"" << (pad + plot_h) << "\" stroke=\"black\"/>\n";
    out << "</svg>\n";
}

inline void write_svg_line(const std::string& path, const std::string& title,
                           const std::vector<double>& ys) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write SVG: " + path);
    const int w = 560, h = 320, pad = 48;
    const int plot_w = w - 2 * pad, plot_h = h - 2 * pad;
    double lo = 0.0, hi = 1e-9;
    for (double y : ys) hi = std::max(hi, y);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\">\n";
    out << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
        << title << "</text>\n";
    if (ys.size() >= 2) {
        out << "<polyline fill=\"none\" stroke=\"#aa4433\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < ys.size(); ++i) {
            double x = pad + static_cast<double>(i) / static_cast<double>(ys.size() - 1) * plot_w;
            double frac = (ys[i] - lo) / (hi - lo);
            double y = pad + plot_h - frac * plot_h;
            out << x << "," << y << " ";
        }
        out << "\"/>\n";
    }
    out << "<line x1=\"" << pad << "\" y1=\"" << (pad + plot_h) << "\" x2=\"" << (w - pad)
        << "\" y2=\"" << (pad + plot_h) << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << pad << "\" y=\"" << (pad - 8) << "\" font-size=\"11\">max "
        << std::fixed << std::setprecision(3) << hi << "</text>\n";
    out << "</svg>\n";
}

inline void write_metrics_svg(const std::string& path, const EvalResult& res) {
    std::vector<std::pair<std::string, double>> bars;
    auto push = [&](const char* name, const std::optional<double>& v) {
        if (v) bars.emplace_back(name, *v);
    };
    push("acc", res.report.accuracy);
    push("judge", res.report.judge);
    push("bleu", res.report.bleu);
    push("rouge", res.report.rouge_l);
    push("cider", res.report.cider);
    push("match", res.report.match);
    if (res.final) bars.emplace_back("final", *res.final);
    write_svg_bars(path, "evaluation metrics", bars, 100.0);
}

}  // namespace dvlm
