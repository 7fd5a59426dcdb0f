#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvlm/errors.hpp"
#include "dvlm/qa.hpp"

namespace dvlm {

// Whitespace tokenization for text metrics; metrics never consult the model
// vocabulary, they score raw strings.
inline std::vector<std::string> metric_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// Trim and collapse internal whitespace; exact-match accuracy compares these.
inline std::string normalize_ws(const std::string& s) {
    std::string out;
    bool in_space = true;  // swallows leading whitespace
    for (char c : s) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            if (!in_space) out.push_back(' ');
            in_space = true;
        } else {
            out.push_back(c);
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

namespace detail {

// n-gram multiset, keys joined with an unlikely separator byte.
inline std::map<std::string, int> ngram_counts(const std::vector<std::string>& toks, int n) {
    std::map<std::string, int> out;
    if (static_cast<int>(toks.size()) < n) return out;
    for (size_t i = 0; i + static_cast<size_t>(n) <= toks.size(); ++i) {
        std::string key = toks[i];
        for (int j = 1; j < n; ++j) {
            key.push_back('\x1f');
            key += toks[i + static_cast<size_t>(j)];
        }
        ++out[key];
    }
    return out;
}

}  // namespace detail

// Sentence BLEU: geometric mean of clipped 1..4-gram precisions times the
// brevity penalty. Orders longer than the candidate contribute no n-grams and
// are skipped (so a short exact match still scores 1); any included order
// with zero overlap sends the whole score to zero.
inline double bleu(const std::string& pred, const std::string& gold) {
    auto c = metric_tokens(pred);
    auto r = metric_tokens(gold);
    if (c.empty() || r.empty()) return 0.0;

    double log_sum = 0.0;
    int orders = 0;
    for (int n = 1; n <= 4; ++n) {
        auto cg = detail::ngram_counts(c, n);
        if (cg.empty()) break;
        auto rg = detail::ngram_counts(r, n);
        int total = 0, clipped = 0;
        for (const auto& [g, cnt] : cg) {
            total += cnt;
            auto it = rg.find(g);
            if (it != rg.end()) clipped += std::min(cnt, it->second);
        }
        if (clipped == 0) return 0.0;
        log_sum += std::log(static_cast<double>(clipped) / total);
        ++orders;
    }
    if (orders == 0) return 0.0;
    double bp = c.size() >= r.size()
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(r.size()) / static_cast<double>(c.size()));
    return bp * std::exp(log_sum / orders);
}

// ROUGE-L: F-measure over the longest common subsequence with beta = 1.2
// (recall-weighted), the convention used by caption benchmarks.
inline double rouge_l(const std::string& pred, const std::string& gold) {
    auto c = metric_tokens(pred);
    auto r = metric_tokens(gold);
    if (c.empty() || r.empty()) return 0.0;
    const size_t n = c.size(), m = r.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j)
            cur[j] = c[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    double lcs = prev[m];
    if (lcs == 0.0) return 0.0;
    double p = lcs / static_cast<double>(n);
    double rec = lcs / static_cast<double>(m);
    const double beta2 = 1.2 * 1.2;
    return (1.0 + beta2) * rec * p / (rec + beta2 * p);
}

// Corpus CIDEr: TF-IDF n-gram vectors (document frequency over the gold
// corpus, idf = ln(N) - ln(max(1, DF))), cosine similarity per order,
// averaged over n = 1..4 and scaled by 10; the corpus score is the mean over
// pairs.
inline double cider(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
    if (preds.size() != golds.size()) throw ShapeError("cider: candidate/reference count mismatch");
    if (golds.empty()) throw InputError("cider: empty corpus");
    const double n_docs = static_cast<double>(golds.size());

    std::vector<std::vector<std::string>> gold_toks;
    gold_toks.reserve(golds.size());
    for (const auto& s : golds) gold_toks.push_back(metric_tokens(s));

    // document frequency per order
    std::vector<std::map<std::string, int>> df(4);
    for (const auto& toks : gold_toks)
        for (int n = 1; n <= 4; ++n)
            for (const auto& [g, cnt] : detail::ngram_counts(toks, n)) {
                (void)cnt;
                ++df[static_cast<size_t>(n - 1)][g];
            }
    auto idf = [&](int n, const std::string& g) {
        auto it = df[static_cast<size_t>(n - 1)].find(g);
        int d = it == df[static_cast<size_t>(n - 1)].end() ? 0 : it->second;
        return std::log(n_docs) - std::log(static_cast<double>(std::max(1, d)));
    };

    double total = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        auto ct = metric_tokens(preds[i]);
        double pair_score = 0.0;
        for (int n = 1; n <= 4; ++n) {
            auto cg = detail::ngram_counts(ct, n);
            auto rg = detail::ngram_counts(gold_toks[i], n);
            double dot = 0.0, nc = 0.0, nr = 0.0;
            for (const auto& [g, cnt] : cg) {
                double w = cnt * idf(n, g);
                nc += w * w;
                auto it = rg.find(g);
                if (it != rg.end()) dot += w * (it->second * idf(n, g));
            }
            for (const auto& [g, cnt] : rg) {
                double w = cnt * idf(n, g);
                nr += w * w;
            }
            if (nc > 0.0 && nr > 0.0) pair_score += dot / (std::sqrt(nc) * std::sqrt(nr));
        }
        total += 10.0 * pair_score / 4.0;
    }
    return total / n_docs;
}

// Token-level F1 with multiset clipping; the deterministic fallback judge.
inline double token_f1(const std::string& pred, const std::string& gold) {
    auto c = metric_tokens(pred);
    auto r = metric_tokens(gold);
    if (c.empty() && r.empty()) return 1.0;
    if (c.empty() || r.empty()) return 0.0;
    auto cg = detail::ngram_counts(c, 1);
    auto rg = detail::ngram_counts(r, 1);
    int overlap = 0;
    for (const auto& [g, cnt] : cg) {
        auto it = rg.find(g);
        if (it != rg.end()) overlap += std::min(cnt, it->second);
    }
    if (overlap == 0) return 0.0;
    double p = static_cast<double>(overlap) / static_cast<double>(c.size());
    double rec = static_cast<double>(overlap) / static_cast<double>(r.size());
    return 2.0 * p * rec / (p + rec);
}

// Exact-match percentage after whitespace normalization; the metric for
// closed-form (multiple-choice and yes/no) questions.
inline double accuracy_pct(const std::vector<std::string>& preds,
                           const std::vector<std::string>& golds) {
    if (preds.size() != golds.size())
        throw ShapeError("accuracy: candidate/reference count mismatch");
    if (preds.empty()) throw InputError("accuracy: empty set");
    int hit = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (normalize_ws(preds[i]) == normalize_ws(golds[i])) ++hit;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(preds.size());
}

// Identity-tag recall: a gold tag counts as recovered when some predicted tag
// names the same camera and its normalized image-plane center lies within tol.
// Malformed gold tags count as unmatched; malformed predicted tags are
// ignored.
struct TagMatchResult {
    int matched = 0;
    int gold_count = 0;
    double recall_pct() const {
        return gold_count > 0 ? 100.0 * matched / gold_count : 0.0;
    }
};

inline TagMatchResult match_tags(const std::vector<std::string>& pred_tags,
                                 const std::vector<std::string>& gold_tags, double tol,
                                 int img_w, int img_h) {
    if (img_w < 1 || img_h < 1) throw ConfigError("match_tags: bad image dimensions");
    std::vector<CTag> preds;
    for (const auto& t : pred_tags)
        if (auto p = parse_ctag(t)) preds.push_back(*p);
    TagMatchResult out;
    out.gold_count = static_cast<int>(gold_tags.size());
    for (const auto& gt : gold_tags) {
        auto g = parse_ctag(gt);
        if (!g) continue;
        for (const auto& p : preds) {
            if (p.cam_tag != g->cam_tag) continue;
            double du = static_cast<double>(p.u - g->u) / img_w;
            double dv = static_cast<double>(p.v - g->v) / img_h;
            if (std::sqrt(du * du + dv * dv) <= tol) {
                ++out.matched;
                break;
            }
        }
    }
    return out;
}

// Aggregate evaluation scores. Components missing from a run (e.g. no
// closed-form questions in the subset) stay unset and serialize as null;
// composing the final score then fails loudly naming the gap.
struct MetricReport {
    std::optional<double> accuracy;   // % on closed-form questions
    std::optional<double> judge;      // % semantic score
    std::optional<double> bleu;       // 0..100
    std::optional<double> rouge_l;    // 0..100
    std::optional<double> cider;      // ~0..10
    std::optional<double> match;      // % (already blended with judge)
    std::string judge_provenance;     // "fallback", "endpoint", or "mixed"

    double lang_score() const {
        if (!bleu || !rouge_l || !cider) throw ConfigError("language score components missing");
        return (*bleu + *rouge_l + *cider) / 3.0;
    }

    nlohmann::json to_json() const {
        auto opt = [](const std::optional<double>& v) {
            return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
        };
        nlohmann::json j;
        j["accuracy"] = opt(accuracy);
        j["judge"] = opt(judge);
        j["bleu"] = opt(bleu);
        j["rouge_l"] = opt(rouge_l);
        j["cider"] = opt(cider);
        j["lang_score"] = (bleu && rouge_l && cider) ? nlohmann::json(lang_score())
                                                     : nlohmann::json(nullptr);
        j["match"] = opt(match);
        j["judge_provenance"] = judge_provenance;
        return j;
    }
};

// Weighted composition: 0.2 accuracy + 0.4 judge + 0.2 language + 0.2 match.
inline double final_score(const MetricReport& r) {
    if (!r.accuracy) throw ConfigError("final score: accuracy missing");
    if (!r.judge) throw ConfigError("final score: judge missing");
    if (!r.bleu || !r.rouge_l || !r.cider)
        throw ConfigError("final score: language components missing");
    if (!r.match) throw ConfigError("final score: match missing");
    return 0.2 * *r.accuracy + 0.4 * *r.judge + 0.2 * r.lang_score() + 0.2 * *r.match;
}

inline double final_score(double accuracy, double judge, double bleu_100, double rouge_100,
                          double cider_raw, double match) {
    MetricReport r;
    r.accuracy = accuracy;
    r.judge = judge;
    r.bleu = bleu_100;
    r.rouge_l = rouge_100;
    r.cider = cider_raw;
    r.match = match;
    return final_score(r);
}

}  // namespace dvlm
