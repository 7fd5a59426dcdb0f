#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dvlm/attention.hpp"
#include "dvlm/plora.hpp"
#include "dvlm/scene.hpp"
#include "dvlm/vocab.hpp"

namespace dvlm {

// Token groups of the driving branch, concatenated det | mot | ego.
enum class E2EGroup { det, mot, ego };

inline const char* to_string(E2EGroup g) {
    switch (g) {
        case E2EGroup::det: return "det";
        case E2EGroup::mot: return "mot";
        case E2EGroup::ego: return "ego";
    }
    return "?";
}

inline constexpr int kNumClassLabels = 5;

struct E2EConfig {
    int n_ins = 10;            // instances kept per scene (det and mot each)
    int d = 64;                // feature/token width, equals decoder width
    int k_waypoints = 6;       // waypoints per trajectory
    int heads = 4;             // heads of the text-aggregation attention
    double depth_range = 51.2; // depth normalization ceiling, meters
    double near_band = 15.0;   // "near" below this distance
    double mid_band = 35.0;    // "mid" below this, "far" beyond
    bool use_prompts = true;   // test hook: drop prompt injection entirely
    bool linear_adapters = false;  // test hook: single linear layer adapters

    void validate() const {
        if (n_ins < 1) throw ConfigError("n_ins must be >= 1");
        if (d < 1) throw ConfigError("token width must be >= 1");
        if (d % heads != 0) throw ConfigError("token width not divisible by heads");
        if (k_waypoints < 2) throw ConfigError("k_waypoints < 2");
        if (!(depth_range > 0)) throw ConfigError("depth_range must be positive");
        if (!(near_band > 0 && mid_band > near_band))
            throw ConfigError("distance bands must satisfy 0 < near < mid");
    }
};

// One driving instance: detection and motion entries are index-aligned.
template <class S>
struct E2EInstance {
    int object_id = -1;
    ClassLabel cls = ClassLabel::car;
    double confidence = 0.0;
    Box3 box3d;              // possibly perturbed copy of the ground truth
    std::vector<Vec2> traj;  // predicted future ground positions
    Mat<S> f_det;            // 1 x d detection feature
    Mat<S> f_mot;            // 1 x d motion feature
    bool is_null = false;    // padding entry, confidence 0
};

template <class S>
struct E2EBackboneOutput {
    std::vector<E2EInstance<S>> instances;
    Mat<S> f_ego;                // 1 x d planning feature
    std::vector<Vec2> ego_traj;  // planned ego waypoints
    int d = 0;
    int k_waypoints = 0;
};

namespace detail {

// Deterministic fixed-width encoding: tile the raw descriptor across d slots
// with a slot-dependent modulation so repeated tiles stay distinguishable.
template <class S>
Mat<S> tiled_encoding(const std::vector<double>& raw, int d) {
    if (raw.empty()) throw InputError("tiled_encoding of empty descriptor");
    Mat<S> f(1, d);
    int n = static_cast<int>(raw.size());
    for (int i = 0; i < d; ++i)
        f.a[static_cast<size_t>(i)] =
            static_cast<S>(raw[static_cast<size_t>(i % n)] * std::cos(0.31 * i + 1.7));
    return f;
}

inline double dist_to_ego(const SceneGraph& scene, const Vec3& center) {
    double dx = center.x - scene.ego_pose.position.x;
    double dy = center.y - scene.ego_pose.position.y;
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

// Stand-in for a full driving stack: emits ground truth perturbed by Gaussian
// noise of the given scale, confidence falling off with distance, and fixed
// feature encodings of the perturbed state. Deterministic in
// (scene, noise, rng_seed).
template <class S>
E2EBackboneOutput<S> synthetic_backbone(const SceneGraph& scene, double noise, uint64_t rng_seed,
                                        int d) {
    if (noise < 0) throw ConfigError("backbone noise must be >= 0");
    if (d < 1) throw ConfigError("backbone feature width must be >= 1");
    Rng rng(hash_combine(0xe2ebac0full, hash_combine(static_cast<uint64_t>(scene.seed), rng_seed)));

    E2EBackboneOutput<S> out;
    out.d = d;
    out.k_waypoints = scene.cfg.k_waypoints;
    for (const auto& obj : scene.objects) {
        E2EInstance<S> inst;
        inst.object_id = obj.id;
        inst.cls = obj.class_label;
        inst.box3d = obj.box3d;
        inst.box3d.center.x += noise * rng.gaussian();
        inst.box3d.center.y += noise * rng.gaussian();
        inst.box3d.yaw = wrap_angle(inst.box3d.yaw + 0.1 * noise * rng.gaussian());
        inst.traj = obj.traj;
        for (auto& wp : inst.traj) {
            wp.x += noise * rng.gaussian();
            wp.y += noise * rng.gaussian();
        }
        inst.confidence = 1.0 / (1.0 + ego_distance(scene, obj) / 10.0);

        std::vector<double> raw_det = {
            inst.box3d.center.x / 50.0, inst.box3d.center.y / 50.0, inst.box3d.center.z / 5.0,
            inst.box3d.size.x / 5.0,    inst.box3d.size.y / 5.0,    inst.box3d.size.z / 5.0,
            std::sin(inst.box3d.yaw),   std::cos(inst.box3d.yaw),   inst.confidence};
        for (int c = 0; c < kNumClassLabels; ++c)
            raw_det.push_back(static_cast<int>(inst.cls) == c ? 1.0 : 0.0);
        inst.f_det = detail::tiled_encoding<S>(raw_det, d);

        std::vector<double> raw_mot;
        for (const auto& wp : inst.traj) {
            raw_mot.push_back(wp.x / 50.0);
            raw_mot.push_back(wp.y / 50.0);
        }
        inst.f_mot = detail::tiled_encoding<S>(raw_mot, d);
        out.instances.push_back(std::move(inst));
    }

    out.ego_traj = scene.ego_plan;
    for (auto& wp : out.ego_traj) {
        wp.x += noise * rng.gaussian();
        wp.y += noise * rng.gaussian();
    }
    std::vector<double> raw_ego = {std::sin(scene.ego_pose.heading),
                                   std::cos(scene.ego_pose.heading)};
    for (const auto& wp : out.ego_traj) {
        raw_ego.push_back(wp.x / 50.0);
        raw_ego.push_back(wp.y / 50.0);
    }
    out.f_ego = detail::tiled_encoding<S>(raw_ego, d);
    return out;
}

// Keep the n_ins most confident instances (ties broken by ascending id); pad
// short scenes with null instances carrying the learned null features (zeros
// if no store is supplied) and confidence 0.
template <class S>
E2EBackboneOutput<S> select_top_instances(const E2EBackboneOutput<S>& out, int n_ins,
                                          const ParamStore<S>* ps = nullptr) {
    if (n_ins < 1) throw ConfigError("n_ins must be >= 1");
    E2EBackboneOutput<S> sel;
    sel.d = out.d;
    sel.k_waypoints = out.k_waypoints;
    sel.f_ego = out.f_ego;
    sel.ego_traj = out.ego_traj;

    std::vector<int> order(out.instances.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto& ia = out.instances[static_cast<size_t>(a)];
        const auto& ib = out.instances[static_cast<size_t>(b)];
        if (ia.confidence != ib.confidence) return ia.confidence > ib.confidence;
        return ia.object_id < ib.object_id;
    });
    int keep = std::min<int>(n_ins, static_cast<int>(order.size()));
    for (int i = 0; i < keep; ++i)
        sel.instances.push_back(out.instances[static_cast<size_t>(order[static_cast<size_t>(i)])]);

    for (int i = keep; i < n_ins; ++i) {
        E2EInstance<S> pad;
        pad.is_null = true;
        pad.confidence = 0.0;
        pad.object_id = -1;
        pad.traj.assign(static_cast<size_t>(std::max(out.k_waypoints, 2)), Vec2{0, 0});
        if (ps != nullptr && ps->has("e2e.null.det")) {
            pad.f_det = ps->get("e2e.null.det").value;
            pad.f_mot = ps->get("e2e.null.mot").value;
        } else {
            pad.f_det = Mat<S>::zeros(1, out.d);
            pad.f_mot = Mat<S>::zeros(1, out.d);
        }
        sel.instances.push_back(std::move(pad));
    }
    return sel;
}

// ---------------------------------------------------------------------------
// Prompt text
// ---------------------------------------------------------------------------

inline std::string view_phrase(const std::string& cam_tag) {
    if (cam_tag == "CAM_FRONT") return "front";
    if (cam_tag == "CAM_FRONT_LEFT") return "front left";
    if (cam_tag == "CAM_FRONT_RIGHT") return "front right";
    if (cam_tag == "CAM_BACK") return "back";
    if (cam_tag == "CAM_BACK_LEFT") return "back left";
    if (cam_tag == "CAM_BACK_RIGHT") return "back right";
    throw InputError("unknown camera tag: " + cam_tag);
}

inline std::string distance_band(double depth, const E2EConfig& cfg) {
    if (depth < cfg.near_band) return "near";
    if (depth < cfg.mid_band) return "mid";
    return "far";
}

// Detection prompt text, e.g. "a car at front, near".
inline std::string text_prompt_string_for(const E2EConfig& cfg, ClassLabel cls,
                                          const std::string& cam_tag, double depth) {
    return std::string("a ") + to_string(cls) + " at " + view_phrase(cam_tag) + ", " +
           distance_band(depth, cfg);
}

// Motion/ego prompt text, e.g. "Go straight, acceleration".
inline std::string text_prompt_string_for(const std::vector<Vec2>& traj, double heading0) {
    return derive_motion_text(traj, heading0);
}

// Every word the generated prompt strings can contain, so vocabulary builds
// can keep them in-vocabulary. Commas ride on the preceding word.
inline std::vector<std::string> e2e_prompt_symbols() {
    return {"Go",   "straight,", "Turn",  "Left,", "Right,",       "acceleration",
            "deceleration",      "constant",       "speed",        "a",
            "car",  "truck",     "pedestrian",     "traffic_sign", "barrier",
            "at",   "front",     "back",  "front,", "back,",       "left,",
            "right,", "near",    "mid",   "far"};
}

// Largest-area image projection of a box across the rig, if any.
inline std::optional<Box2DDepth> best_projection(const SceneGraph& scene, const Box3& box) {
    std::optional<Box2DDepth> best;
    double best_area = -1.0;
    for (size_t ci = 0; ci < scene.cameras.size(); ++ci) {
        auto b = project_box(box, scene.cameras[ci], static_cast<int>(ci));
        if (!b) continue;
        double area = (b->u_max - b->u_min) * (b->v_max - b->v_min);
        if (area > best_area) {
            best_area = area;
            best = b;
        }
    }
    return best;
}

// Camera whose optical axis is closest to the object's bearing; fallback view
// for boxes that project into no image.
inline const CameraModel& nearest_camera(const SceneGraph& scene, const Vec3& center) {
    if (scene.cameras.empty()) throw InputError("scene has no cameras");
    double bearing = std::atan2(center.y - scene.ego_pose.position.y,
                                center.x - scene.ego_pose.position.x);
    size_t best = 0;
    double best_off = 1e30;
    for (size_t i = 0; i < scene.cameras.size(); ++i) {
        double off = std::abs(wrap_angle(bearing - scene.cameras[i].yaw));
        if (off < best_off) {
            best_off = off;
            best = i;
        }
    }
    return scene.cameras[best];
}

// ---------------------------------------------------------------------------
// Learnable pieces
// ---------------------------------------------------------------------------

template <class S>
void register_mlp2(ParamStore<S>& ps, const std::string& prefix, int d_in, int d_hidden,
                   int d_out) {
    register_linear(ps, prefix + ".up", d_in, d_hidden);
    register_linear(ps, prefix + ".down", d_hidden, d_out);
}

template <class S>
typename Graph<S>::Var mlp2(Binder<S>& bind, const std::string& prefix,
                            typename Graph<S>::Var x) {
    Graph<S>& g = bind.graph();
    return linear(bind, prefix + ".down", g.gelu(linear(bind, prefix + ".up", x)));
}

template <class S>
void register_e2e(ParamStore<S>& ps, const E2EConfig& cfg) {
    cfg.validate();
    int d = cfg.d;
    int kw = 2 * cfg.k_waypoints;
    // learned null-instance features (embedding-like: no weight decay)
    ps.add("e2e.null.det", 1, d, Init::Gaussian, 0.02, true, false);
    ps.add("e2e.null.mot", 1, d, Init::Gaussian, 0.02, true, false);
    // numerical prompt maps
    register_mlp2(ps, "e2e.nmlp.det", 5, d, d);
    register_mlp2(ps, "e2e.nmlp.mot", kw, d, d);
    register_mlp2(ps, "e2e.nmlp.ego", kw, d, d);
    // text prompt aggregation: learnable query + one attention layer
    ps.add("e2e.fq", 1, d, Init::Gaussian, 0.02, true, false);
    register_mha(ps, "e2e.tmha", d);
    // per-group adapters
    register_mlp2(ps, "e2e.adapter.det", d, d, d);
    register_mlp2(ps, "e2e.adapter.mot", d, d, d);
    register_mlp2(ps, "e2e.adapter.ego", d, d, d);
    // residual refinement heads, zero-init so predictions start at the
    // backbone output exactly
    ps.add("e2e.head.det.box.w", d, 7, Init::Zero, 0.0, true, true);
    ps.add("e2e.head.det.box.b", 1, 7, Init::Zero, 0.0, true, false);
    ps.add("e2e.head.det.cls.w", d, kNumClassLabels, Init::Zero, 0.0, true, true);
    ps.add("e2e.head.det.cls.b", 1, kNumClassLabels, Init::Zero, 0.0, true, false);
    ps.add("e2e.head.mot.w", d, kw, Init::Zero, 0.0, true, true);
    ps.add("e2e.head.mot.b", 1, kw, Init::Zero, 0.0, true, false);
    ps.add("e2e.head.ego.w", d, kw, Init::Zero, 0.0, true, true);
    ps.add("e2e.head.ego.b", 1, kw, Init::Zero, 0.0, true, false);
}

// Parameter names of the refinement heads; the frozen-branch training
// strategy excludes exactly these from the trainable set.
inline std::vector<std::string> e2e_head_param_names() {
    return {"e2e.head.det.box.w", "e2e.head.det.box.b", "e2e.head.det.cls.w",
            "e2e.head.det.cls.b", "e2e.head.mot.w",     "e2e.head.mot.b",
            "e2e.head.ego.w",     "e2e.head.ego.b"};
}

// Flat 1 x 2K row of waypoint coordinates.
template <class S>
Mat<S> flatten_traj(const std::vector<Vec2>& traj) {
    Mat<S> m(1, static_cast<int>(traj.size()) * 2);
    for (size_t i = 0; i < traj.size(); ++i) {
        m.a[2 * i] = static_cast<S>(traj[i].x);
        m.a[2 * i + 1] = static_cast<S>(traj[i].y);
    }
    return m;
}

// Detection prompt input (u_min, v_min, u_max, v_max, clamped depth fraction);
// boxes with no projection contribute a zero box plus their ego distance.
template <class S>
Mat<S> det_prompt_input(const std::optional<Box2DDepth>& proj, double fallback_dist,
                        const E2EConfig& cfg) {
    Mat<S> m(1, 5);
    double depth = fallback_dist;
    if (proj) {
        m.a[0] = static_cast<S>(proj->u_min);
        m.a[1] = static_cast<S>(proj->v_min);
        m.a[2] = static_cast<S>(proj->u_max);
        m.a[3] = static_cast<S>(proj->v_max);
        depth = proj->depth;
    }
    m.a[4] = static_cast<S>(std::min(depth / cfg.depth_range, 1.0));
    return m;
}

// Two-layer map of a numeric descriptor row to token width.
template <class S>
typename Graph<S>::Var numerical_prompt(Binder<S>& bind, const std::string& prefix,
                                        typename Graph<S>::Var x) {
    return mlp2(bind, prefix, x);
}

// Embed the prompt words with the decoder embedding table, then aggregate
// them with a single learnable query through one attention layer.
template <class S>
typename Graph<S>::Var text_prompt(Binder<S>& bind, const E2EConfig& cfg, const Vocabulary& vocab,
                                   const std::string& text,
                                   const std::string& embed_param = "dec.embed") {
    std::vector<int> ids = vocab.tokenize(text);
    if (ids.empty()) throw InputError("empty text prompt");
    Graph<S>& g = bind.graph();
    auto emb = g.gather_rows(bind(embed_param), ids);
    return mha(bind, "e2e.tmha", bind("e2e.fq"), emb, all_true_mask(1, static_cast<int>(ids.size())),
               cfg.heads);
}

// Prompt features for the prompted tokens, in token order.
template <class S>
struct PromptFeatures {
    std::vector<typename Graph<S>::Var> numerical;
    std::vector<typename Graph<S>::Var> textual;
    std::vector<std::string> source_text;
    std::vector<int> token_index;  // row of the token each prompt feeds
};

template <class S>
struct E2EAssembly {
    typename Graph<S>::Var tokens;  // (2 n_ins + 1) x d
    std::vector<E2EGroup> groups;   // per-token group label
    bool detached = false;
    PromptFeatures<S> prompts;
    // refined predictions (backbone output + zero-init residual heads)
    typename Graph<S>::Var det_boxes;   // n_ins x 7: cx cy cz sx sy sz yaw
    typename Graph<S>::Var det_logits;  // n_ins x kNumClassLabels
    typename Graph<S>::Var mot_traj;    // n_ins x 2K
    typename Graph<S>::Var ego_traj;    // 1 x 2K
    std::vector<int> object_ids;        // det/mot instance ids (-1 for null)
    std::vector<uint8_t> null_mask;     // per instance
};

// Build the (2 n_ins + 1) x d driving-token block: per group,
// token = adapter(feature + numerical prompt + textual prompt), concatenated
// det | mot | ego. detached severs all gradient flow into backbone features.
// `sel` must stay alive while the graph is in use (features are bound, not
// copied, when detached is false).
template <class S>
E2EAssembly<S> assemble_e2e_tokens(Binder<S>& bind, const E2EConfig& cfg, const Vocabulary& vocab,
                                   const SceneGraph& scene, const E2EBackboneOutput<S>& sel,
                                   bool detached,
                                   const std::string& embed_param = "dec.embed") {
    cfg.validate();
    if (static_cast<int>(sel.instances.size()) != cfg.n_ins)
        throw ShapeError("assemble_e2e_tokens: instance count != n_ins");
    if (sel.d != cfg.d) throw ShapeError("assemble_e2e_tokens: feature width != token width");
    Graph<S>& g = bind.graph();

    E2EAssembly<S> out;
    out.detached = detached;

    auto bind_feature = [&](const Mat<S>& feat, bool is_null, const char* null_name) {
        if (is_null) return bind(null_name);
        return detached ? g.constant(feat) : g.input(feat, nullptr);
    };

    auto adapter = [&](const char* prefix, typename Graph<S>::Var x) {
        if (cfg.linear_adapters) return linear(bind, std::string(prefix) + ".up", x);
        return mlp2(bind, prefix, x);
    };

    auto add_prompts = [&](typename Graph<S>::Var feat, typename Graph<S>::Var num,
                           typename Graph<S>::Var text, const std::string& text_src,
                           int token_row) {
        out.prompts.numerical.push_back(num);
        out.prompts.textual.push_back(text);
        out.prompts.source_text.push_back(text_src);
        out.prompts.token_index.push_back(token_row);
        return g.add(feat, g.add(num, text));
    };

    std::vector<typename Graph<S>::Var> rows;
    int n = cfg.n_ins;

    for (int i = 0; i < n; ++i) {
        const auto& inst = sel.instances[static_cast<size_t>(i)];
        out.object_ids.push_back(inst.object_id);
        out.null_mask.push_back(inst.is_null ? 1 : 0);
        auto feat = bind_feature(inst.f_det, inst.is_null, "e2e.null.det");
        auto x = feat;
        if (cfg.use_prompts && !inst.is_null) {
            auto proj = best_projection(scene, inst.box3d);
            double fallback = detail::dist_to_ego(scene, inst.box3d.center);
            auto num = numerical_prompt(bind, "e2e.nmlp.det",
                                        g.constant(det_prompt_input<S>(proj, fallback, cfg)));
            std::string cam_tag = proj ? scene.cameras[static_cast<size_t>(proj->cam_index)].tag_name
                                       : nearest_camera(scene, inst.box3d.center).tag_name;
            double depth = proj ? proj->depth : fallback;
            std::string txt = text_prompt_string_for(cfg, inst.cls, cam_tag, depth);
            auto tv = text_prompt(bind, cfg, vocab, txt, embed_param);
            x = add_prompts(feat, num, tv, txt, i);
        }
        rows.push_back(adapter("e2e.adapter.det", x));
        out.groups.push_back(E2EGroup::det);
    }

    for (int i = 0; i < n; ++i) {
        const auto& inst = sel.instances[static_cast<size_t>(i)];
        auto feat = bind_feature(inst.f_mot, inst.is_null, "e2e.null.mot");
        auto x = feat;
        if (cfg.use_prompts && !inst.is_null) {
            auto num = numerical_prompt(bind, "e2e.nmlp.mot",
                                        g.constant(flatten_traj<S>(inst.traj)));
            std::string txt = text_prompt_string_for(inst.traj, inst.box3d.yaw);
            auto tv = text_prompt(bind, cfg, vocab, txt, embed_param);
            x = add_prompts(feat, num, tv, txt, n + i);
        }
        rows.push_back(adapter("e2e.adapter.mot", x));
        out.groups.push_back(E2EGroup::mot);
    }

    {
        auto feat = detached ? g.constant(sel.f_ego) : g.input(sel.f_ego, nullptr);
        auto x = feat;
        if (cfg.use_prompts) {
            auto num = numerical_prompt(bind, "e2e.nmlp.ego",
                                        g.constant(flatten_traj<S>(sel.ego_traj)));
            std::string txt = text_prompt_string_for(sel.ego_traj, scene.ego_pose.heading);
            auto tv = text_prompt(bind, cfg, vocab, txt, embed_param);
            x = add_prompts(feat, num, tv, txt, 2 * n);
        }
        rows.push_back(adapter("e2e.adapter.ego", x));
        out.groups.push_back(E2EGroup::ego);
    }

    out.tokens = g.concat_rows(rows);

    // Refined predictions: perturbed backbone state plus zero-init heads, so
    // they start exactly at the backbone output and become trainable under
    // the joint strategy.
    int kw = 2 * sel.k_waypoints;
    Mat<S> base_boxes(n, 7), base_logits(n, kNumClassLabels), base_mot(n, kw);
    for (int i = 0; i < n; ++i) {
        const auto& inst = sel.instances[static_cast<size_t>(i)];
        if (!inst.is_null) {
            base_boxes.at(i, 0) = static_cast<S>(inst.box3d.center.x);
            base_boxes.at(i, 1) = static_cast<S>(inst.box3d.center.y);
            base_boxes.at(i, 2) = static_cast<S>(inst.box3d.center.z);
            base_boxes.at(i, 3) = static_cast<S>(inst.box3d.size.x);
            base_boxes.at(i, 4) = static_cast<S>(inst.box3d.size.y);
            base_boxes.at(i, 5) = static_cast<S>(inst.box3d.size.z);
            base_boxes.at(i, 6) = static_cast<S>(inst.box3d.yaw);
            base_logits.at(i, static_cast<int>(inst.cls)) = static_cast<S>(4.0);
            for (int j = 0; j < kw && j < 2 * static_cast<int>(inst.traj.size()); ++j)
                base_mot.at(i, j) = static_cast<S>(j % 2 == 0 ? inst.traj[static_cast<size_t>(j / 2)].x
                                                              : inst.traj[static_cast<size_t>(j / 2)].y);
        }
    }
    auto det_rows = g.slice_rows(out.tokens, 0, n);
    auto mot_rows = g.slice_rows(out.tokens, n, n);
    auto ego_row = g.slice_rows(out.tokens, 2 * n, 1);
    out.det_boxes = g.add(g.constant(base_boxes), linear(bind, "e2e.head.det.box", det_rows));
    out.det_logits = g.add(g.constant(base_logits), linear(bind, "e2e.head.det.cls", det_rows));
    out.mot_traj = g.add(g.constant(base_mot), linear(bind, "e2e.head.mot", mot_rows));
    out.ego_traj =
        g.add(g.constant(flatten_traj<S>(sel.ego_traj)), linear(bind, "e2e.head.ego", ego_row));
    return out;
}

// The token rows a task may look at, per its visibility gate: det rows, then
// mot rows, then the ego row, each kept only when the gate admits the group.
template <class S>
std::optional<typename Graph<S>::Var> visible_e2e_rows(Graph<S>& g, const E2EAssembly<S>& a,
                                                       const GroupVisibility& vis) {
    int n = 0;
    while (n < static_cast<int>(a.groups.size()) && a.groups[static_cast<size_t>(n)] == E2EGroup::det)
        ++n;
    std::vector<typename Graph<S>::Var> kept;
    if (vis.det && n > 0) kept.push_back(g.slice_rows(a.tokens, 0, n));
    if (vis.mot && n > 0) kept.push_back(g.slice_rows(a.tokens, n, n));
    if (vis.ego) kept.push_back(g.slice_rows(a.tokens, 2 * n, 1));
    if (kept.empty()) return std::nullopt;
    if (kept.size() == 1) return kept[0];
    return g.concat_rows(kept);
}

}  // namespace dvlm
