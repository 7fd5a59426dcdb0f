#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dvlm/checkpoint.hpp"
#include "dvlm/model.hpp"

namespace dvlm {

// ---------------------------------------------------------------------------
// Text loss
// ---------------------------------------------------------------------------

// Next-token cross entropy over one encoded record: logits row t scores the
// token at position t+1, and only positions whose *target* is an answer token
// (or the closing EOS) contribute. An all-masked record yields exactly zero
// and raises the empty_mask flag so callers can warn instead of silently
// training on nothing.
template <class S>
struct TextLossVars {
    typename Graph<S>::Var loss;  // 1x1
    bool empty_mask = false;
};

template <class S>
TextLossVars<S> text_loss_graph(Graph<S>& g, typename Graph<S>::Var logits,
                                const EncodedQA& qa) {
    const int n = static_cast<int>(qa.ids.size());
    if (n < 2) throw ShapeError("text loss needs at least two tokens");
    if (g.value(logits).rows != n)
        throw ShapeError("text loss: logits rows must match token count");

    // Shift: position t predicts token t+1. The final position has no target
    // and is always masked out.
    std::vector<int> targets(static_cast<size_t>(n), Vocabulary::kPad);
    std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
    for (int t = 0; t + 1 < n; ++t) {
        targets[static_cast<size_t>(t)] = qa.ids[static_cast<size_t>(t) + 1];
        mask[static_cast<size_t>(t)] = qa.loss_mask[static_cast<size_t>(t) + 1];
    }

    TextLossVars<S> out;
    out.empty_mask =
        std::none_of(mask.begin(), mask.end(), [](uint8_t b) { return b != 0; });
    out.loss = g.cross_entropy_rows(logits, targets, mask);
    return out;
}

// ---------------------------------------------------------------------------
// Driving-output loss (detection + motion + planning)
// ---------------------------------------------------------------------------

struct MatchPair {
    int pred = -1;  // instance slot in the selected backbone output
    int gt = -1;    // index into scene.objects
    double dist = 0.0;
};

// Greedy bipartite matching on ground-plane centers: repeatedly take the
// globally closest still-unmatched (prediction, object) pair within the gate,
// breaking exact ties by (pred index, gt index). Null padding slots never
// match.
inline std::vector<MatchPair> greedy_center_match(
    const std::vector<std::pair<double, double>>& pred_centers,
    const std::vector<uint8_t>& pred_valid,
    const std::vector<std::pair<double, double>>& gt_centers, double gate) {
    const int np = static_cast<int>(pred_centers.size());
    const int ng = static_cast<int>(gt_centers.size());
    std::vector<uint8_t> pused(static_cast<size_t>(np), 0);
    std::vector<uint8_t> gused(static_cast<size_t>(ng), 0);
    std::vector<MatchPair> out;
    for (;;) {
        MatchPair best;
        best.dist = std::numeric_limits<double>::infinity();
        for (int i = 0; i < np; ++i) {
            if (pused[static_cast<size_t>(i)] || !pred_valid[static_cast<size_t>(i)]) continue;
            for (int j = 0; j < ng; ++j) {
                if (gused[static_cast<size_t>(j)]) continue;
                double dx = pred_centers[static_cast<size_t>(i)].first -
                            gt_centers[static_cast<size_t>(j)].first;
                double dy = pred_centers[static_cast<size_t>(i)].second -
                            gt_centers[static_cast<size_t>(j)].second;
                double d = std::sqrt(dx * dx + dy * dy);
                if (d > gate) continue;
                if (d < best.dist ||
                    (d == best.dist && (i < best.pred || (i == best.pred && j < best.gt)))) {
                    best = MatchPair{i, j, d};
                }
            }
        }
        if (best.pred < 0) break;
        pused[static_cast<size_t>(best.pred)] = 1;
        gused[static_cast<size_t>(best.gt)] = 1;
        out.push_back(best);
    }
    return out;
}

namespace detail {

inline std::vector<double> box_params(const Box3& b) {
    return {b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.yaw};
}

inline std::vector<double> flat_traj(const std::vector<Vec2>& traj) {
    std::vector<double> out;
    out.reserve(traj.size() * 2);
    for (const auto& p : traj) {
        out.push_back(p.x);
        out.push_back(p.y);
    }
    return out;
}

}  // namespace detail

// Plain-value predictions, as read back from a graph or produced directly.
template <class S>
struct E2EPred {
    Mat<S> det_boxes;   // n_ins x 7 (cx cy cz sx sy sz yaw)
    Mat<S> det_logits;  // n_ins x kNumClassLabels
    Mat<S> mot_traj;    // n_ins x 2K
    Mat<S> ego_traj;    // 1 x 2K
    std::vector<uint8_t> null_mask;
};

template <class S>
E2EPred<S> pred_values(const Graph<S>& g, const E2EAssembly<S>& a) {
    E2EPred<S> p;
    p.det_boxes = g.value(a.det_boxes);
    p.det_logits = g.value(a.det_logits);
    p.mot_traj = g.value(a.mot_traj);
    p.ego_traj = g.value(a.ego_traj);
    p.null_mask = a.null_mask;
    return p;
}

struct E2ELossParts {
    double l_det = 0.0;
    double l_mot = 0.0;
    double l_plan = 0.0;
    std::vector<MatchPair> matches;
    double l_e2e() const { return l_det + l_mot + l_plan; }
};

// Value-level loss. Detection: mean absolute error over the 7 box parameters
// of matched pairs plus mean class cross entropy. Motion / planning: L1
// waypoint displacement normalized per coordinate pair, so a uniform 1 m
// offset on one axis scores exactly 1. No matches => detection and motion
// terms are exactly zero; planning always applies.
template <class S>
E2ELossParts e2e_loss(const E2EPred<S>& pred, const SceneGraph& scene, double gate = 2.0) {
    const int n = pred.det_boxes.rows;
    std::vector<std::pair<double, double>> pc, gc;
    std::vector<uint8_t> valid;
    pc.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        pc.emplace_back(static_cast<double>(pred.det_boxes.at(i, 0)),
                        static_cast<double>(pred.det_boxes.at(i, 1)));
        valid.push_back(pred.null_mask[static_cast<size_t>(i)] ? 0 : 1);
    }
    for (const auto& o : scene.objects) gc.emplace_back(o.box3d.center.x, o.box3d.center.y);

    E2ELossParts out;
    out.matches = greedy_center_match(pc, valid, gc, gate);
    const size_t m = out.matches.size();
    const int k = scene.cfg.k_waypoints;

    if (m > 0) {
        double box_abs = 0.0, ce = 0.0, mot_abs = 0.0;
        for (const auto& mp : out.matches) {
            const auto& obj = scene.objects[static_cast<size_t>(mp.gt)];
            auto gt_box = detail::box_params(obj.box3d);
            for (int c = 0; c < 7; ++c)
                box_abs += std::abs(static_cast<double>(pred.det_boxes.at(mp.pred, c)) -
                                    gt_box[static_cast<size_t>(c)]);
            // log-sum-exp minus the true-class logit, stabilized by the row max
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < kNumClassLabels; ++c)
                mx = std::max(mx, static_cast<double>(pred.det_logits.at(mp.pred, c)));
            double lse = 0.0;
            for (int c = 0; c < kNumClassLabels; ++c)
                lse += std::exp(static_cast<double>(pred.det_logits.at(mp.pred, c)) - mx);
            int tgt = static_cast<int>(obj.class_label);
            ce += mx + std::log(lse) - static_cast<double>(pred.det_logits.at(mp.pred, tgt));
            auto gt_mot = detail::flat_traj(obj.traj);
            for (int c = 0; c < 2 * k; ++c)
                mot_abs += std::abs(static_cast<double>(pred.mot_traj.at(mp.pred, c)) -
                                    gt_mot[static_cast<size_t>(c)]);
        }
        out.l_det = box_abs / (7.0 * static_cast<double>(m)) + ce / static_cast<double>(m);
        out.l_mot = mot_abs / (static_cast<double>(m) * static_cast<double>(k));
    }
    auto gt_ego = detail::flat_traj(scene.ego_plan);
    double ego_abs = 0.0;
    for (int c = 0; c < 2 * k; ++c)
        ego_abs += std::abs(static_cast<double>(pred.ego_traj.at(0, c)) -
                            gt_ego[static_cast<size_t>(c)]);
    out.l_plan = ego_abs / static_cast<double>(k);
    return out;
}

template <class S>
struct E2ELossVars {
    typename Graph<S>::Var l_det;
    typename Graph<S>::Var l_mot;
    typename Graph<S>::Var l_plan;
    typename Graph<S>::Var l_e2e;
    std::vector<MatchPair> matches;
};

// Differentiable counterpart: matching is decided once from current values
// and then baked into the graph as fixed row gathers, so gradients flow
// through the residual heads (and, when attached, the whole token path) for
// a fixed assignment.
template <class S>
E2ELossVars<S> e2e_loss_graph(Graph<S>& g, const E2EAssembly<S>& a, const SceneGraph& scene,
                              double gate = 2.0) {
    using Var = typename Graph<S>::Var;
    auto snap = pred_values(g, a);
    const int k = scene.cfg.k_waypoints;

    std::vector<std::pair<double, double>> pc, gc;
    std::vector<uint8_t> valid;
    for (int i = 0; i < snap.det_boxes.rows; ++i) {
        pc.emplace_back(static_cast<double>(snap.det_boxes.at(i, 0)),
                        static_cast<double>(snap.det_boxes.at(i, 1)));
        valid.push_back(snap.null_mask[static_cast<size_t>(i)] ? 0 : 1);
    }
    for (const auto& o : scene.objects) gc.emplace_back(o.box3d.center.x, o.box3d.center.y);

    E2ELossVars<S> out;
    out.matches = greedy_center_match(pc, valid, gc, gate);
    const size_t m = out.matches.size();

    if (m > 0) {
        std::vector<int> pids;
        std::vector<int> classes;
        Mat<S> gt_boxes(static_cast<int>(m), 7);
        Mat<S> gt_mots(static_cast<int>(m), 2 * k);
        int r = 0;
        for (const auto& mp : out.matches) {
            pids.push_back(mp.pred);
            const auto& obj = scene.objects[static_cast<size_t>(mp.gt)];
            classes.push_back(static_cast<int>(obj.class_label));
            auto bp = detail::box_params(obj.box3d);
            for (int c = 0; c < 7; ++c) gt_boxes.at(r, c) = static_cast<S>(bp[static_cast<size_t>(c)]);
            auto tm = detail::flat_traj(obj.traj);
            for (int c = 0; c < 2 * k; ++c) gt_mots.at(r, c) = static_cast<S>(tm[static_cast<size_t>(c)]);
            ++r;
        }
        Var box_mae = g.mean_all(g.abs(g.sub(g.gather_rows(a.det_boxes, pids),
                                             g.constant(std::move(gt_boxes)))));
        std::vector<uint8_t> all_on(m, 1);
        Var ce = g.cross_entropy_rows(g.gather_rows(a.det_logits, pids), classes, all_on);
        out.l_det = g.add(box_mae, ce);
        Var mot_abs = g.sum_all(g.abs(g.sub(g.gather_rows(a.mot_traj, pids),
                                            g.constant(std::move(gt_mots)))));
        out.l_mot = g.scale(mot_abs, static_cast<S>(1.0 / (static_cast<double>(m) * k)));
    } else {
        out.l_det = g.scalar_const(static_cast<S>(0));
        out.l_mot = g.scalar_const(static_cast<S>(0));
    }

    auto ge = detail::flat_traj(scene.ego_plan);
    Mat<S> gt_ego(1, 2 * k);
    for (int c = 0; c < 2 * k; ++c) gt_ego.at(0, c) = static_cast<S>(ge[static_cast<size_t>(c)]);
    out.l_plan = g.scale(g.sum_all(g.abs(g.sub(a.ego_traj, g.constant(std::move(gt_ego))))),
                         static_cast<S>(1.0 / k));
    out.l_e2e = g.add(g.add(out.l_det, out.l_mot), out.l_plan);
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// AdamW step with decoupled weight decay: decay multiplies the weight
// directly (only for parameters flagged for decay) and never enters the
// moment estimates. t is 1-based. Moment buffers are sized lazily on first
// use so freshly registered parameters need no extra setup.
template <class S>
void adamw_step(ParamStore<S>& ps, const AdamWConfig& cfg, int t) {
    if (t < 1) throw ConfigError("adamw_step: t is 1-based");
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (const auto& name : ps.names()) {
        Param<S>& p = ps.get(name);
        if (!p.trainable) continue;
        if (p.m.a.size() != p.value.a.size()) p.m = Mat<S>(p.value.rows, p.value.cols);
        if (p.v.a.size() != p.value.a.size()) p.v = Mat<S>(p.value.rows, p.value.cols);
        for (size_t i = 0; i < p.value.a.size(); ++i) {
            double gr = static_cast<double>(p.grad.a[i]);
            double m = cfg.beta1 * static_cast<double>(p.m.a[i]) + (1.0 - cfg.beta1) * gr;
            double v = cfg.beta2 * static_cast<double>(p.v.a[i]) + (1.0 - cfg.beta2) * gr * gr;
            p.m.a[i] = static_cast<S>(m);
            p.v.a[i] = static_cast<S>(v);
            double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
            double w = static_cast<double>(p.value.a[i]);
            if (p.decay) w -= cfg.lr * cfg.weight_decay * w;
            w -= cfg.lr * upd;
            p.value.a[i] = static_cast<S>(w);
        }
    }
}

// Learning rate at 1-based step: linear ramp from zero over the warmup
// fraction of total steps (at least one step), then cosine decay to zero at
// the final step.
inline double lr_at(int step, int total_steps, double peak, double warmup_ratio) {
    if (total_steps < 1) throw ConfigError("lr_at: total_steps must be >= 1");
    if (step < 0 || step > total_steps) throw ConfigError("lr_at: step out of range");
    int w = std::max(1, static_cast<int>(std::lround(warmup_ratio * total_steps)));
    if (step <= w) return peak * static_cast<double>(step) / static_cast<double>(w);
    if (step >= total_steps) return 0.0;
    double t = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
    return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

enum class TrainStrategy { frozen_e2e, joint };

inline TrainStrategy strategy_from_string(const std::string& s) {
    if (s == "frozen_e2e" || s == "frozen-e2e") return TrainStrategy::frozen_e2e;
    if (s == "joint") return TrainStrategy::joint;
    throw ConfigError("unknown training strategy: " + s);
}

inline const char* to_string(TrainStrategy s) {
    return s == TrainStrategy::frozen_e2e ? "frozen_e2e" : "joint";
}

struct TrainConfig {
    TrainStrategy strategy = TrainStrategy::frozen_e2e;
    double lambda = 1.0;        // weight on the driving-output loss (joint only)
    double lr = 3e-3;
    double weight_decay = 0.01;
    double warmup_ratio = 0.03;
    int epochs = 1;
    int steps = 0;              // if > 0, overrides epochs
    int batch_size = 4;
    uint64_t seed = 7;
    int checkpoint_every = 100;
    double match_gate = 2.0;    // meters, for prediction/object matching

    void validate() const {
        if (lr <= 0) throw ConfigError("lr must be > 0");
        if (lambda < 0) throw ConfigError("lambda must be >= 0");
        if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
        if (warmup_ratio < 0 || warmup_ratio >= 1) throw ConfigError("warmup_ratio must be in [0, 1)");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 1 && steps < 1) throw ConfigError("need epochs >= 1 or steps >= 1");
        if (match_gate <= 0) throw ConfigError("match_gate must be > 0");
    }
};

// Under the frozen strategy the residual prediction heads are not trained;
// under joint they are. Flips only the head parameters so everything else
// keeps its registered trainability.
template <class S>
void set_e2e_heads_trainable(ParamStore<S>& ps, bool on) {
    for (const auto& name : e2e_head_param_names()) ps.get(name).trainable = on;
}

template <class S>
void apply_strategy(ParamStore<S>& ps, TrainStrategy s) {
    set_e2e_heads_trainable(ps, s == TrainStrategy::joint);
}

struct LossReport {
    double l_txt = 0.0;
    double l_det = 0.0;
    double l_mot = 0.0;
    double l_plan = 0.0;
    double l_e2e = 0.0;
    double total = 0.0;
    double lambda = 0.0;          // effective weight: 0 under frozen_e2e
    bool e2e_in_objective = false;  // joint strategy: driving loss reaches the total
    bool lambda_ignored = false;  // frozen_e2e requested with a non-default lambda
    bool empty_text_mask = false;

    // Log schema: the l_* columns report what the optimized objective saw, so
    // a frozen run logs a zero driving loss; the raw diagnostic value is kept
    // under monitor_l_e2e either way.
    nlohmann::json to_json() const {
        double z = e2e_in_objective ? 1.0 : 0.0;
        return {{"l_txt", l_txt},           {"l_det", z * l_det},
                {"l_mot", z * l_mot},       {"l_plan", z * l_plan},
                {"l_e2e", z * l_e2e},       {"total", total},
                {"lambda", lambda},         {"monitor_l_e2e", l_e2e}};
    }
};

// One optimizer step over a batch of records. Each record gets its own graph;
// the per-record loss is scaled by 1/batch before backward so gradients
// accumulate into the shared store as a batch mean. Under frozen_e2e the
// driving-token features are detached, the total is the text loss alone, and
// the driving losses are still computed for reporting. The reported total is
// recomposed from the reported components, so total == l_txt + lambda * l_e2e
// holds exactly. If the total is non-finite the parameter update is skipped.
template <class S>
LossReport train_step(Model<S>& model, const std::vector<QARecord>& batch,
                      const TrainConfig& cfg, double lr_now, int adam_t) {
    if (batch.empty()) throw InputError("train_step: empty batch");
    cfg.validate();
    const bool frozen = cfg.strategy == TrainStrategy::frozen_e2e;
    apply_strategy(model.ps, cfg.strategy);
    model.ps.zero_grads();

    LossReport rep;
    rep.lambda = frozen ? 0.0 : cfg.lambda;
    rep.e2e_in_objective = !frozen;
    rep.lambda_ignored = frozen && cfg.lambda != 1.0;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    for (const auto& rec : batch) {
        auto ctx = prepare_record(model, rec);
        Graph<S> g;
        Binder<S> bind(g, model.ps);
        auto fwd = forward_record(bind, model, ctx, /*detached=*/frozen);
        auto tl = text_loss_graph(g, fwd.logits, ctx.qa);
        auto el = e2e_loss_graph(g, fwd.assembly, ctx.scene, cfg.match_gate);
        typename Graph<S>::Var total =
            frozen ? tl.loss
                   : g.add(tl.loss, g.scale(el.l_e2e, static_cast<S>(cfg.lambda)));
        g.backward(g.scale(total, static_cast<S>(inv_b)));

        rep.l_txt += inv_b * static_cast<double>(g.value(tl.loss).at(0, 0));
        rep.l_det += inv_b * static_cast<double>(g.value(el.l_det).at(0, 0));
        rep.l_mot += inv_b * static_cast<double>(g.value(el.l_mot).at(0, 0));
        rep.l_plan += inv_b * static_cast<double>(g.value(el.l_plan).at(0, 0));
        rep.empty_text_mask = rep.empty_text_mask || tl.empty_mask;
    }
    rep.l_e2e = rep.l_det + rep.l_mot + rep.l_plan;
    rep.total = rep.l_txt + rep.lambda * rep.l_e2e;

    if (std::isfinite(rep.total)) {
        AdamWConfig ac;
        ac.lr = lr_now;
        ac.weight_decay = cfg.weight_decay;
        adamw_step(model.ps, ac, adam_t);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    int index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    bool all_pass = true;
    bool aborted = false;        // non-finite value encountered
    std::string message;
    double worst_rel_err = 0.0;
    std::string worst_name;
    std::vector<GradCheckEntry> entries;
};

// Central finite differences against the full single-record loss. Samples a
// few entries per trainable parameter (first / middle / last) rather than
// every coordinate. The matching baked into the graph stays fixed during
// perturbation, so the comparison is against the loss restricted to the
// current assignment — exactly the function backward differentiates.
// corrupt_name/corrupt_factor deliberately scale one parameter's analytic
// gradient after backward, for validating that the checker actually fails.
template <class S>
GradCheckReport grad_check(Model<S>& model, const QARecord& rec, const TrainConfig& cfg,
                           double eps = 1e-5, double rtol = 1e-4,
                           int entries_per_param = 3, const std::string& corrupt_name = "",
                           double corrupt_factor = 1.0) {
    const bool frozen = cfg.strategy == TrainStrategy::frozen_e2e;
    apply_strategy(model.ps, cfg.strategy);
    auto ctx = prepare_record(model, rec);

    Graph<S> g;
    Binder<S> bind(g, model.ps);
    auto fwd = forward_record(bind, model, ctx, frozen);
    auto tl = text_loss_graph(g, fwd.logits, ctx.qa);
    auto el = e2e_loss_graph(g, fwd.assembly, ctx.scene, cfg.match_gate);
    typename Graph<S>::Var total =
        frozen ? tl.loss : g.add(tl.loss, g.scale(el.l_e2e, static_cast<S>(cfg.lambda)));

    GradCheckReport rep;
    double f0 = static_cast<double>(g.value(total).at(0, 0));
    if (!std::isfinite(f0)) {
        rep.aborted = true;
        rep.all_pass = false;
        rep.message = "loss is non-finite before perturbation";
        return rep;
    }

    model.ps.zero_grads();
    g.backward(total);
    if (!corrupt_name.empty())
        for (auto& x : model.ps.get(corrupt_name).grad.a)
            x = static_cast<S>(static_cast<double>(x) * corrupt_factor);

    for (const auto& name : model.ps.names()) {
        Param<S>& p = model.ps.get(name);
        if (!p.trainable || p.value.a.empty()) continue;
        const size_t n = p.value.a.size();
        std::vector<size_t> idx;
        idx.push_back(0);
        if (entries_per_param >= 2 && n > 1) idx.push_back(n / 2);
        if (entries_per_param >= 3 && n > 2) idx.push_back(n - 1);
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());

        for (size_t i : idx) {
            const S keep = p.value.a[i];
            p.value.a[i] = static_cast<S>(static_cast<double>(keep) + eps);
            g.recompute();
            double fp = static_cast<double>(g.value(total).at(0, 0));
            p.value.a[i] = static_cast<S>(static_cast<double>(keep) - eps);
            g.recompute();
            double fm = static_cast<double>(g.value(total).at(0, 0));
            p.value.a[i] = keep;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                rep.aborted = true;
                rep.all_pass = false;
                rep.message = "non-finite loss while perturbing " + name;
                g.recompute();
                return rep;
            }
            GradCheckEntry e;
            e.name = name;
            e.index = static_cast<int>(i);
            e.numeric = (fp - fm) / (2.0 * eps);
            e.analytic = static_cast<double>(p.grad.a[i]);
            e.rel_err = std::abs(e.numeric - e.analytic) /
                        std::max({1.0, std::abs(e.numeric), std::abs(e.analytic)});
            if (e.rel_err > rep.worst_rel_err) {
                rep.worst_rel_err = e.rel_err;
                rep.worst_name = name;
            }
            if (e.rel_err > rtol) rep.all_pass = false;
            rep.entries.push_back(std::move(e));
        }
    }
    g.recompute();  // restore clean forward values
    if (!rep.all_pass && rep.message.empty())
        rep.message = "worst relative error " + std::to_string(rep.worst_rel_err) + " at " +
                      rep.worst_name;
    return rep;
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

struct TrainLogEntry {
    int step = 0;
    double lr = 0.0;
    LossReport rep;
};

struct FitResult {
    std::vector<TrainLogEntry> log;
    int steps_run = 0;
    bool aborted = false;
    std::string message;
    std::string last_checkpoint;  // empty if none written
};

// Epoch-shuffled minibatch training. Records are visited in a seeded shuffle,
// reshuffled each time the pool is exhausted. Writes one JSON object per step
// to log_path (if given) and periodic checkpoints to checkpoint_dir (if
// given). A non-finite total aborts immediately; the parameters from that
// step are never checkpointed, so the newest file on disk is the last good
// state.
template <class S>
FitResult fit(Model<S>& model, const std::vector<QARecord>& records, const TrainConfig& cfg,
              const std::string& checkpoint_dir = "", const std::string& log_path = "",
              const nlohmann::json& extra_meta = nlohmann::json::object()) {
    cfg.validate();
    if (records.empty()) throw InputError("fit: empty dataset");

    const int n = static_cast<int>(records.size());
    const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * steps_per_epoch;

    std::ofstream log_out;
    if (!log_path.empty()) {
        log_out.open(log_path);
        if (!log_out) throw IoError("cannot open training log: " + log_path);
    }

    Rng shuffle_rng(cfg.seed ^ 0x5eedf17ull);
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    int cursor = n;  // forces an initial shuffle

    FitResult out;
    for (int step = 1; step <= total_steps; ++step) {
        std::vector<QARecord> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= n) {
                for (int i = n - 1; i > 0; --i) {
                    int j = static_cast<int>(shuffle_rng.uniform_int(0, i));
                    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
                }
                cursor = 0;
            }
            batch.push_back(records[static_cast<size_t>(order[static_cast<size_t>(cursor++)])]);
        }

        double lr_now = lr_at(step, total_steps, cfg.lr, cfg.warmup_ratio);
        LossReport rep = train_step(model, batch, cfg, lr_now, step);
        out.steps_run = step;

        TrainLogEntry entry;
        entry.step = step;
        entry.lr = lr_now;
        entry.rep = rep;
        out.log.push_back(entry);
        if (log_out) {
            nlohmann::json j = rep.to_json();
            j["step"] = step;
            j["lr"] = lr_now;
            log_out << j.dump() << "\n";
        }

        if (!std::isfinite(rep.total)) {
            out.aborted = true;
            out.message = "non-finite loss at step " + std::to_string(step) +
                          (out.last_checkpoint.empty()
                               ? "; no checkpoint written"
                               : "; last good checkpoint: " + out.last_checkpoint);
            break;
        }

        if (!checkpoint_dir.empty() &&
            (step % cfg.checkpoint_every == 0 || step == total_steps)) {
            // Each checkpoint directory is self-contained: parameters,
            // metadata, and the vocabulary the model was built against.
            nlohmann::json meta = extra_meta;
            meta["step"] = step;
            meta["strategy"] = to_string(cfg.strategy);
            meta["total"] = rep.total;
            meta["vocab_fingerprint"] = model.vocab.fingerprint();
            std::string path = checkpoint_dir + "/step_" + std::to_string(step);
            save_checkpoint(path, model.ps, meta);
            model.vocab.save(path + "/vocab.txt");
            out.last_checkpoint = path;
        }
    }
    return out;
}

// Fraction of supervised positions (answer tokens plus the closing EOS) whose
// argmax next-token prediction matches the target, over the given records.
template <class S>
double masked_token_accuracy(Model<S>& model, const std::vector<QARecord>& records,
                             bool detached = true) {
    int64_t hit = 0, total = 0;
    for (const auto& rec : records) {
        auto ctx = prepare_record(model, rec);
        Graph<S> g;
        Binder<S> bind(g, model.ps);
        auto fwd = forward_record(bind, model, ctx, detached);
        const Mat<S>& lv = g.value(fwd.logits);
        const int n = static_cast<int>(ctx.qa.ids.size());
        for (int t = 0; t + 1 < n; ++t) {
            if (!ctx.qa.loss_mask[static_cast<size_t>(t) + 1]) continue;
            int best = 0;
            for (int c = 1; c < lv.cols; ++c)
                if (lv.at(t, c) > lv.at(t, best)) best = c;
            if (best == ctx.qa.ids[static_cast<size_t>(t) + 1]) ++hit;
            ++total;
        }
    }
    return total > 0 ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace dvlm
