#pragma once

#include <algorithm>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dvlm/geometry.hpp"
#include "dvlm/rng.hpp"
#include "dvlm/scene.hpp"
#include "dvlm/tasks.hpp"

namespace dvlm {

inline constexpr double kImportantMaxDist = 25.0;
inline constexpr int kImportantCap = 3;
inline constexpr double kHazardMaxDist = 20.0;
inline constexpr double kHazardHalfAngleDeg = 45.0;

// An object worth talking about: visible in at least one camera and close to
// the ego. The tag encodes its primary camera (largest projected area) and the
// integer pixel position of the projected 3D center in that camera.
struct ImportantObject {
    int obj_index = -1;
    int cam_index = -1;
    int u = 0, v = 0;
    std::string tag;
    Box2DDepth box;
};

struct CTag {
    int n = 0;  // 1-based rank within the scene's important objects
    std::string cam_tag;
    int u = 0, v = 0;
};

inline std::string format_ctag(int n, const std::string& cam_tag, int u, int v) {
    std::ostringstream os;
    os << "<c" << n << "," << cam_tag << "," << u << "," << v << ">";
    return os.str();
}

inline std::optional<CTag> parse_ctag(const std::string& s) {
    if (s.size() < 8 || s.front() != '<' || s.back() != '>' || s[1] != 'c') return std::nullopt;
    std::string body = s.substr(2, s.size() - 3);
    std::vector<std::string> parts;
    size_t start = 0;
    while (true) {
        size_t comma = body.find(',', start);
        if (comma == std::string::npos) {
            parts.push_back(body.substr(start));
            break;
        }
        parts.push_back(body.substr(start, comma - start));
        start = comma + 1;
    }
    if (parts.size() != 4) return std::nullopt;
    CTag t;
    try {
        size_t used = 0;
        t.n = std::stoi(parts[0], &used);
        if (used != parts[0].size() || t.n < 1) return std::nullopt;
        t.cam_tag = parts[1];
        t.u = std::stoi(parts[2], &used);
        if (used != parts[2].size()) return std::nullopt;
        t.v = std::stoi(parts[3], &used);
        if (used != parts[3].size()) return std::nullopt;
    } catch (const std::exception&) {
        return std::nullopt;
    }
    if (t.cam_tag.rfind("CAM_", 0) != 0) return std::nullopt;
    return t;
}

// Every substring shaped like a c-tag, in order of appearance.
inline std::vector<std::string> extract_ctags(const std::string& text) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (true) {
        size_t open = text.find("<c", pos);
        if (open == std::string::npos) break;
        size_t close = text.find('>', open);
        if (close == std::string::npos) break;
        std::string cand = text.substr(open, close - open + 1);
        if (parse_ctag(cand)) out.push_back(cand);
        pos = open + 1;
    }
    return out;
}

inline std::vector<ImportantObject> important_objects(const SceneGraph& scene) {
    struct Cand {
        int idx;
        double dist;
        int cam_index;
        Box2DDepth box;
    };
    std::vector<Cand> cands;
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& obj = scene.objects[i];
        double dist = ego_distance(scene, obj);
        if (dist > kImportantMaxDist) continue;
        int best_cam = -1;
        double best_area = -1;
        Box2DDepth best_box;
        for (size_t ci = 0; ci < scene.cameras.size(); ++ci) {
            auto b = project_box(obj.box3d, scene.cameras[ci], static_cast<int>(ci));
            if (!b) continue;
            double area = (b->u_max - b->u_min) * (b->v_max - b->v_min);
            if (area > best_area) {
                best_area = area;
                best_cam = static_cast<int>(ci);
                best_box = *b;
            }
        }
        if (best_cam < 0) continue;
        cands.push_back({static_cast<int>(i), dist, best_cam, best_box});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        return a.idx < b.idx;
    });
    if (static_cast<int>(cands.size()) > kImportantCap) cands.resize(kImportantCap);

    std::vector<ImportantObject> out;
    for (size_t rank = 0; rank < cands.size(); ++rank) {
        const auto& c = cands[rank];
        const auto& cam = scene.cameras[c.cam_index];
        ImportantObject io;
        io.obj_index = c.idx;
        io.cam_index = c.cam_index;
        io.box = c.box;
        auto pp = project_point(cam, scene.objects[c.idx].box3d.center);
        if (pp) {
            io.u = static_cast<int>(std::lround(pp->u));
            io.v = static_cast<int>(std::lround(pp->v));
        } else {
            io.u = static_cast<int>(std::lround((c.box.u_min + c.box.u_max) / 2 * cam.width));
            io.v = static_cast<int>(std::lround((c.box.v_min + c.box.v_max) / 2 * cam.height));
        }
        io.tag = format_ctag(static_cast<int>(rank) + 1, cam.tag_name, io.u, io.v);
        out.push_back(std::move(io));
    }
    return out;
}

// Index of a pedestrian within 20 m in the forward ±45° wedge, nearest first;
// -1 when none. Drives the yield rule in planning answers.
inline int hazard_pedestrian(const SceneGraph& scene) {
    int best = -1;
    double best_dist = 1e30;
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (o.class_label != ClassLabel::pedestrian) continue;
        double dist = ego_distance(scene, o);
        if (dist > kHazardMaxDist) continue;
        if (std::abs(rad2deg(ego_bearing(scene, o))) > kHazardHalfAngleDeg) continue;
        if (dist < best_dist) {
            best_dist = dist;
            best = static_cast<int>(i);
        }
    }
    return best;
}

struct QARecord {
    int64_t scene_seed = 0;
    Task task = Task::perception;
    QType qtype = QType::open;
    bool is_core = false;
    std::string question;
    std::string answer;
    std::vector<std::string> identities;
};

namespace detail {

inline std::string tag_list_text(const std::vector<ImportantObject>& objs) {
    if (objs.empty()) return "";
    if (objs.size() == 1) return objs[0].tag;
    std::string out = objs[0].tag;
    for (size_t i = 1; i + 1 < objs.size(); ++i) out += " , " + objs[i].tag;
    out += " and " + objs.back().tag;
    return out;
}

inline const char* steer_phrase(Steer s) {
    switch (s) {
        case Steer::straight: return "go straight";
        case Steer::left: return "turn left";
        case Steer::right: return "turn right";
    }
    return "?";
}

inline const char* speed_phrase(SpeedTrend s) {
    switch (s) {
        case SpeedTrend::constant: return "keep speed";
        case SpeedTrend::accel: return "speed up";
        case SpeedTrend::decel: return "slow down";
    }
    return "?";
}

// Spaced-punctuation "<Steer> , <speed> ." sentence used in QA answers.
inline std::string motion_answer(const MotionLabel& m) {
    return std::string(steer_text(m.steer)) + " , " + speed_text(m.speed) + " .";
}

}  // namespace detail

// Template QA set for one scene: a core open question per driving stage
// (perception / prediction / planning), plus closed-form distractors covering
// every task family. Answers come straight from ground truth.
inline std::vector<QARecord> gen_qa(const SceneGraph& scene) {
    std::vector<QARecord> out;
    auto imp = important_objects(scene);
    Rng rng(hash_combine(0x9a11ULL, static_cast<uint64_t>(scene.seed)));

    auto push = [&](Task task, QType qt, bool core, std::string q, std::string a,
                    std::vector<std::string> ids) {
        QARecord r;
        r.scene_seed = scene.seed;
        r.task = task;
        r.qtype = qt;
        r.is_core = core;
        r.question = std::move(q);
        r.answer = std::move(a);
        r.identities = std::move(ids);
        out.push_back(std::move(r));
    };

    // --- perception -----------------------------------------------------
    {
        std::string ans;
        std::vector<std::string> ids;
        if (imp.empty()) {
            ans = "There are no important objects .";
        } else {
            for (const auto& io : imp) ids.push_back(io.tag);
            if (imp.size() == 1)
                ans = "The important object is " + imp[0].tag + " .";
            else
                ans = "The important objects are " + detail::tag_list_text(imp) + " .";
        }
        push(Task::perception, QType::open, true,
             "What are the important objects in the current scene ?", ans, ids);
    }
    {
        ClassLabel probe;
        bool want_present = rng.uniform() < 0.5 && !scene.objects.empty();
        if (want_present) {
            probe = scene.objects[rng.uniform_int(0, static_cast<int64_t>(scene.objects.size()) -
                                                         1)]
                        .class_label;
        } else {
            probe = static_cast<ClassLabel>(rng.uniform_int(0, kNumClasses - 1));
        }
        bool present = false;
        for (const auto& o : scene.objects) present = present || o.class_label == probe;
        push(Task::perception, QType::yes_no, false,
             std::string("Is there a ") + to_string(probe) + " in the current scene ?",
             present ? "Yes" : "No", {});
    }
    {
        const char* letter = imp.empty()           ? "A"
                             : imp.size() == 1     ? "B"
                             : imp.size() == 2     ? "C"
                                                   : "D";
        push(Task::perception, QType::multiple_choice, false,
             "How many important objects are in the current scene ? "
             "A. zero B. one C. two D. three or more",
             letter, {});
    }

    // --- prediction -----------------------------------------------------
    if (!imp.empty()) {
        const auto& io = imp[0];
        const auto& obj = scene.objects[io.obj_index];
        MotionLabel m = derive_motion_label(obj.traj, obj.box3d.yaw);
        push(Task::prediction, QType::open, true,
             "What is the future state of " + io.tag + " ?", detail::motion_answer(m),
             {io.tag});
        size_t k = obj.traj.size();
        double last_speed = norm(obj.traj[k - 1] - obj.traj[k - 2]) / scene.cfg.dt;
        push(Task::prediction, QType::yes_no, false, "Is " + io.tag + " moving ?",
             last_speed > 0.5 ? "Yes" : "No", {io.tag});
    } else {
        MotionLabel m = derive_motion_label(scene.ego_plan, scene.ego_pose.heading);
        push(Task::prediction, QType::open, true,
             "What is the future state of the ego vehicle ?", detail::motion_answer(m), {});
    }

    // --- planning -------------------------------------------------------
    MotionLabel ego_m = derive_motion_label(scene.ego_plan, scene.ego_pose.heading);
    {
        std::string ans;
        if (hazard_pedestrian(scene) >= 0) {
            ans = "The ego vehicle should slow down and yield to the pedestrian .";
        } else {
            ans = std::string("The ego vehicle should ") + detail::steer_phrase(ego_m.steer) +
                  " and " + detail::speed_phrase(ego_m.speed) + " .";
        }
        push(Task::planning, QType::open, true, "What should the ego vehicle do ?", ans, {});
    }

    // --- behavior -------------------------------------------------------
    {
        const char* letter = ego_m.steer == Steer::straight ? "A"
                             : ego_m.steer == Steer::left   ? "B"
                                                            : "C";
        push(Task::behavior, QType::multiple_choice, false,
             "What is the planned maneuver of the ego vehicle ? "
             "A. Go straight B. Turn Left C. Turn Right",
             letter, {});
    }
    {
        bool slow = hazard_pedestrian(scene) >= 0 || ego_m.speed == SpeedTrend::decel;
        push(Task::behavior, QType::yes_no, false, "Should the ego vehicle slow down ?",
             slow ? "Yes" : "No", {});
    }

    return out;
}

// True when the tag names a camera of the scene and some scene object's
// projected center lands within one pixel of the tag position in that camera.
inline bool resolve_ctag(const SceneGraph& scene, const std::string& tag) {
    auto t = parse_ctag(tag);
    if (!t) return false;
    int cam_index = -1;
    for (size_t ci = 0; ci < scene.cameras.size(); ++ci)
        if (scene.cameras[ci].tag_name == t->cam_tag) cam_index = static_cast<int>(ci);
    if (cam_index < 0) return false;
    for (const auto& obj : scene.objects) {
        auto pp = project_point(scene.cameras[cam_index], obj.box3d.center);
        if (!pp) continue;
        if (std::abs(pp->u - t->u) <= 1.0 && std::abs(pp->v - t->v) <= 1.0) return true;
    }
    return false;
}

}  // namespace dvlm
