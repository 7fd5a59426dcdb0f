#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dvlm/errors.hpp"
#include "dvlm/geometry.hpp"
#include "dvlm/rng.hpp"

namespace dvlm {

enum class ClassLabel { car, truck, pedestrian, traffic_sign, barrier };
inline constexpr int kNumClasses = 5;

inline const char* to_string(ClassLabel c) {
    switch (c) {
        case ClassLabel::car: return "car";
        case ClassLabel::truck: return "truck";
        case ClassLabel::pedestrian: return "pedestrian";
        case ClassLabel::traffic_sign: return "traffic_sign";
        case ClassLabel::barrier: return "barrier";
    }
    return "?";
}

inline ClassLabel class_from_string(const std::string& s) {
    if (s == "car") return ClassLabel::car;
    if (s == "truck") return ClassLabel::truck;
    if (s == "pedestrian") return ClassLabel::pedestrian;
    if (s == "traffic_sign") return ClassLabel::traffic_sign;
    if (s == "barrier") return ClassLabel::barrier;
    throw InputError("unknown class label: " + s);
}

struct GenConfig {
    int min_objects = 1;
    int max_objects = 8;
    double min_speed = 0.0;
    double max_speed = 12.0;
    double spawn_min_dist = 5.0;
    double spawn_max_dist = 45.0;
    int k_waypoints = 6;   // future positions per trajectory
    double dt = 0.5;       // seconds between waypoints
    int image_w = 1600;
    int image_h = 900;
    int grid_p = 8;        // feature grid is grid_p x grid_p per camera
    int feat_dim = 64;

    void validate() const {
        if (min_objects > max_objects) throw ConfigError("min_objects > max_objects");
        if (min_objects < 0) throw ConfigError("min_objects < 0");
        if (min_speed > max_speed) throw ConfigError("min_speed > max_speed");
        if (min_speed < 0) throw ConfigError("min_speed < 0");
        if (k_waypoints < 2) throw ConfigError("k_waypoints < 2");
        if (grid_p < 1 || feat_dim < 1) throw ConfigError("grid_p/feat_dim < 1");
        if (image_w < 2 || image_h < 2) throw ConfigError("image size too small");
    }
};

struct ObjectState {
    int id = 0;
    ClassLabel class_label = ClassLabel::car;
    Box3 box3d;
    Vec2 velocity;
    std::vector<Vec2> traj;  // K future ground positions
    double confidence = 1.0;
};

struct EgoPose {
    Vec2 position;
    double heading = 0;
};

struct SceneGraph {
    int64_t seed = 0;
    EgoPose ego_pose;
    std::vector<Vec2> ego_plan;  // K future ground positions
    std::vector<ObjectState> objects;
    std::vector<CameraModel> cameras;
    GenConfig cfg;
};

namespace detail {

// Constant-turn-rate, linearly interpolated speed rollout: K future positions.
inline std::vector<Vec2> roll_trajectory(Vec2 start, double heading0, double speed0,
                                         double total_turn, double speed_factor, int k,
                                         double dt) {
    std::vector<Vec2> out;
    out.reserve(k);
    Vec2 p = start;
    for (int i = 1; i <= k; ++i) {
        double frac = static_cast<double>(i) / k;
        double heading = heading0 + total_turn * frac;
        double speed = speed0 * (1.0 + (speed_factor - 1.0) * frac);
        p = p + Vec2{std::cos(heading), std::sin(heading)} * (speed * dt);
        out.push_back(p);
    }
    return out;
}

struct Maneuver {
    double total_turn = 0;     // radians over the horizon
    double speed_factor = 1.0;  // final/initial speed ratio
};

// Draw a maneuver whose labels are unambiguous under the 15-degree / 10%
// thresholds: straight stays under 5 degrees, turns exceed 20; constant stays
// under 3% speed change, acceleration/deceleration exceed 25%.
inline Maneuver draw_maneuver(Rng& rng) {
    Maneuver m;
    double u = rng.uniform();
    if (u < 0.5) {
        m.total_turn = deg2rad(rng.uniform(-5.0, 5.0));
    } else {
        double mag = deg2rad(rng.uniform(20.0, 40.0));
        m.total_turn = (u < 0.75) ? mag : -mag;
    }
    double v = rng.uniform();
    if (v < 0.4) {
        m.speed_factor = rng.uniform(0.97, 1.03);
    } else if (v < 0.7) {
        m.speed_factor = rng.uniform(1.25, 1.6);
    } else {
        m.speed_factor = rng.uniform(0.4, 0.75);
    }
    return m;
}

inline Vec3 class_size(ClassLabel c, Rng& rng) {
    auto jitter = [&](double base) { return base * rng.uniform(0.9, 1.1); };
    switch (c) {
        case ClassLabel::car: return {jitter(4.5), jitter(1.9), jitter(1.6)};
        case ClassLabel::truck: return {jitter(8.0), jitter(2.5), jitter(3.0)};
        case ClassLabel::pedestrian: return {jitter(0.7), jitter(0.7), jitter(1.7)};
        case ClassLabel::traffic_sign: return {jitter(0.4), jitter(0.4), jitter(2.2)};
        case ClassLabel::barrier: return {jitter(2.0), jitter(0.5), jitter(1.0)};
    }
    return {1, 1, 1};
}

}  // namespace detail

// Seeded synthetic scene: ego at the origin heading +x, objects scattered on
// the ground plane with class-dependent motion. Pure in (seed, cfg).
inline SceneGraph gen_scene(int64_t seed, const GenConfig& cfg = {}) {
    cfg.validate();
    SceneGraph s;
    s.seed = seed;
    s.cfg = cfg;
    s.ego_pose = {{0, 0}, 0};
    s.cameras = make_rig(s.ego_pose.position, s.ego_pose.heading, cfg.image_w, cfg.image_h);

    Rng rng(hash_combine(0x5ce9e5ULL, static_cast<uint64_t>(seed)));

    double ego_speed = rng.uniform(3.0, 10.0);
    auto ego_m = detail::draw_maneuver(rng);
    s.ego_plan = detail::roll_trajectory(s.ego_pose.position, s.ego_pose.heading, ego_speed,
                                         ego_m.total_turn, ego_m.speed_factor, cfg.k_waypoints,
                                         cfg.dt);

    int n = static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));
    s.objects.reserve(n);
    for (int i = 0; i < n; ++i) {
        ObjectState o;
        o.id = i;
        double cu = rng.uniform();
        if (cu < 0.35)
            o.class_label = ClassLabel::car;
        else if (cu < 0.50)
            o.class_label = ClassLabel::truck;
        else if (cu < 0.75)
            o.class_label = ClassLabel::pedestrian;
        else if (cu < 0.88)
            o.class_label = ClassLabel::traffic_sign;
        else
            o.class_label = ClassLabel::barrier;

        double bearing = rng.uniform(-M_PI, M_PI);
        double dist = rng.uniform(cfg.spawn_min_dist, cfg.spawn_max_dist);
        Vec3 size = detail::class_size(o.class_label, rng);
        double yaw = rng.uniform(-M_PI, M_PI);
        o.box3d = {{dist * std::cos(bearing), dist * std::sin(bearing), size.z / 2}, size, yaw};

        bool moves = o.class_label == ClassLabel::car || o.class_label == ClassLabel::truck ||
                     o.class_label == ClassLabel::pedestrian;
        double speed = 0.0;
        detail::Maneuver m;
        if (moves) {
            if (o.class_label == ClassLabel::pedestrian) {
                speed = rng.uniform(0.5, std::min(2.0, std::max(0.6, cfg.max_speed)));
                m.speed_factor = rng.uniform(0.97, 1.03);
            } else {
                speed = rng.uniform(cfg.min_speed, cfg.max_speed);
                m = detail::draw_maneuver(rng);
            }
        }
        o.velocity = Vec2{std::cos(yaw), std::sin(yaw)} * speed;
        Vec2 ground{o.box3d.center.x, o.box3d.center.y};
        o.traj = detail::roll_trajectory(ground, yaw, speed, m.total_turn, m.speed_factor,
                                         cfg.k_waypoints, cfg.dt);
        o.confidence = std::min(1.0, std::max(0.1, 1.0 - dist / 80.0));
        s.objects.push_back(std::move(o));
    }
    return s;
}

inline double ego_distance(const SceneGraph& s, const ObjectState& o) {
    return norm(Vec2{o.box3d.center.x, o.box3d.center.y} - s.ego_pose.position);
}

// Bearing of an object relative to ego heading, wrapped to (-pi, pi].
inline double ego_bearing(const SceneGraph& s, const ObjectState& o) {
    Vec2 d = Vec2{o.box3d.center.x, o.box3d.center.y} - s.ego_pose.position;
    return wrap_angle(std::atan2(d.y, d.x) - s.ego_pose.heading);
}

inline constexpr double kTurnThresholdDeg = 15.0;
inline constexpr double kSpeedChangeThreshold = 0.10;

enum class Steer { straight, left, right };
enum class SpeedTrend { constant, accel, decel };

struct MotionLabel {
    Steer steer = Steer::straight;
    SpeedTrend speed = SpeedTrend::constant;
};

// Classify a waypoint sequence: heading change beyond 15 degrees over the
// horizon is a turn, relative speed change beyond 10% is acceleration or
// deceleration. Translation-invariant (uses segment differences only).
inline MotionLabel derive_motion_label(const std::vector<Vec2>& traj, double heading0) {
    if (traj.size() < 2) throw InputError("motion label needs at least 2 waypoints");
    size_t k = traj.size();
    Vec2 first_seg = traj[1] - traj[0];
    Vec2 last_seg = traj[k - 1] - traj[k - 2];
    double s0 = norm(first_seg);
    double s1 = norm(last_seg);

    MotionLabel m;
    if (s1 > 1e-9) {
        double h1 = std::atan2(last_seg.y, last_seg.x);
        double dh = rad2deg(wrap_angle(h1 - heading0));
        if (dh > kTurnThresholdDeg)
            m.steer = Steer::left;
        else if (dh < -kTurnThresholdDeg)
            m.steer = Steer::right;
    }
    if (s0 < 1e-6) {
        if (s1 > 1e-3) m.speed = SpeedTrend::accel;
    } else {
        double rel = (s1 - s0) / s0;
        if (rel > kSpeedChangeThreshold)
            m.speed = SpeedTrend::accel;
        else if (rel < -kSpeedChangeThreshold)
            m.speed = SpeedTrend::decel;
    }
    return m;
}

inline const char* steer_text(Steer s) {
    switch (s) {
        case Steer::straight: return "Go straight";
        case Steer::left: return "Turn Left";
        case Steer::right: return "Turn Right";
    }
    return "?";
}

inline const char* speed_text(SpeedTrend s) {
    switch (s) {
        case SpeedTrend::constant: return "constant speed";
        case SpeedTrend::accel: return "acceleration";
        case SpeedTrend::decel: return "deceleration";
    }
    return "?";
}

// "<Steer>, <Speed>" form used by the e2e text prompts.
inline std::string derive_motion_text(const std::vector<Vec2>& traj, double heading0) {
    MotionLabel m = derive_motion_label(traj, heading0);
    return std::string(steer_text(m.steer)) + ", " + speed_text(m.speed);
}

}  // namespace dvlm
