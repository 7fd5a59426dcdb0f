#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dvlm/errors.hpp"

namespace dvlm {

struct Vec2 {
    double x = 0, y = 0;
};

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(Vec2 a, double s) { return {a.x * s, a.y * s}; }
inline double norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y); }
inline double norm(Vec3 a) { return std::sqrt(a.x * a.x + a.y * a.y + a.z * a.z); }

inline double wrap_angle(double a) {
    while (a > M_PI) a -= 2 * M_PI;
    while (a < -M_PI) a += 2 * M_PI;
    return a;
}

inline double deg2rad(double d) { return d * M_PI / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / M_PI; }

// Oriented 3D box: size = (length along heading, width, height), yaw about +z.
struct Box3 {
    Vec3 center;
    Vec3 size;
    double yaw = 0;
};

inline std::array<Vec3, 8> box_corners(const Box3& b) {
    std::array<Vec3, 8> out;
    double ch = std::cos(b.yaw), sh = std::sin(b.yaw);
    for (int i = 0; i < 8; ++i) {
        double sx = (i & 1) ? b.size.x / 2 : -b.size.x / 2;
        double sy = (i & 2) ? b.size.y / 2 : -b.size.y / 2;
        double sz = (i & 4) ? b.size.z / 2 : -b.size.z / 2;
        out[i] = {b.center.x + sx * ch - sy * sh, b.center.y + sx * sh + sy * ch,
                  b.center.z + sz};
    }
    return out;
}

// The 12 edges of a box as corner-index pairs (corners differing in one bit).
inline const std::array<std::pair<int, int>, 12>& box_edges() {
    static const std::array<std::pair<int, int>, 12> e = {{{0, 1},
                                                           {2, 3},
                                                           {4, 5},
                                                           {6, 7},
                                                           {0, 2},
                                                           {1, 3},
                                                           {4, 6},
                                                           {5, 7},
                                                           {0, 4},
                                                           {1, 5},
                                                           {2, 6},
                                                           {3, 7}}};
    return e;
}

// Pinhole camera. World frame: x/y ground plane, z up. Camera frame follows
// the usual computer-vision convention: x right, y down, z forward (optical
// axis horizontal at the given yaw).
struct CameraModel {
    std::string name;      // "front", "back-left", ...
    std::string tag_name;  // "CAM_FRONT", "CAM_BACK_LEFT", ...
    double yaw = 0;        // optical-axis heading in world frame
    Vec3 position;
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
};

inline Vec3 world_to_cam(const CameraModel& cam, Vec3 p) {
    double dx = p.x - cam.position.x, dy = p.y - cam.position.y, dz = p.z - cam.position.z;
    double c = std::cos(cam.yaw), s = std::sin(cam.yaw);
    // rows of the rotation: right = (sin, -cos, 0), down = (0,0,-1), forward = (cos, sin, 0)
    return {s * dx - c * dy, -dz, c * dx + s * dy};
}

struct PixelPoint {
    double u = 0, v = 0;  // pixels
    double z = 0;         // camera-frame forward distance
};

inline constexpr double kNearPlane = 0.1;

inline std::optional<PixelPoint> project_point(const CameraModel& cam, Vec3 p_world) {
    Vec3 pc = world_to_cam(cam, p_world);
    if (pc.z <= kNearPlane) return std::nullopt;
    return PixelPoint{cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy, pc.z};
}

struct Box2DDepth {
    int cam_index = -1;
    std::string cam;                              // camera name
    double u_min = 0, v_min = 0, u_max = 0, v_max = 0;  // normalized [0,1]
    double depth = 0;                             // meters, Euclidean to box center
};

// Project an oriented box into a camera: clip the 12 edges against the near
// plane, project surviving points, take the pixel-space bounding box, and
// intersect with the image. Clipping (rather than dropping behind-plane
// corners) keeps the projected center inside the 2D box even when the box
// straddles the image plane. Returns nothing if fully behind or off-image.
inline std::optional<Box2DDepth> project_box(const Box3& box, const CameraModel& cam,
                                             int cam_index = -1) {
    auto corners = box_corners(box);
    std::array<Vec3, 8> cc;
    bool any_front = false;
    for (int i = 0; i < 8; ++i) {
        cc[i] = world_to_cam(cam, corners[i]);
        any_front = any_front || cc[i].z > kNearPlane;
    }
    if (!any_front) return std::nullopt;

    double u_min = 1e30, u_max = -1e30, v_min = 1e30, v_max = -1e30;
    auto admit = [&](const Vec3& p) {
        double u = cam.fx * p.x / p.z + cam.cx;
        double v = cam.fy * p.y / p.z + cam.cy;
        u_min = std::min(u_min, u);
        u_max = std::max(u_max, u);
        v_min = std::min(v_min, v);
        v_max = std::max(v_max, v);
    };
    for (int i = 0; i < 8; ++i)
        if (cc[i].z > kNearPlane) admit(cc[i]);
    for (auto [a, b] : box_edges()) {
        bool fa = cc[a].z > kNearPlane, fb = cc[b].z > kNearPlane;
        if (fa == fb) continue;
        double t = (kNearPlane - cc[a].z) / (cc[b].z - cc[a].z);
        Vec3 p = {cc[a].x + t * (cc[b].x - cc[a].x), cc[a].y + t * (cc[b].y - cc[a].y),
                  kNearPlane};
        admit(p);
    }

    u_min = std::max(u_min, 0.0);
    v_min = std::max(v_min, 0.0);
    u_max = std::min(u_max, static_cast<double>(cam.width));
    v_max = std::min(v_max, static_cast<double>(cam.height));
    if (u_min >= u_max || v_min >= v_max) return std::nullopt;

    Box2DDepth out;
    out.cam_index = cam_index;
    out.cam = cam.name;
    out.u_min = u_min / cam.width;
    out.v_min = v_min / cam.height;
    out.u_max = u_max / cam.width;
    out.v_max = v_max / cam.height;
    out.depth = norm(world_to_cam(cam, box.center));
    return out;
}

// Six-view rig: 60° yaw spacing, 70° horizontal field of view, mounted at the
// given ground pose at 1.5 m height.
inline std::vector<CameraModel> make_rig(Vec2 ego_pos, double ego_heading, int image_w = 1600,
                                         int image_h = 900) {
    struct Def {
        const char* name;
        const char* tag;
        double yaw_deg;
    };
    static const Def defs[6] = {{"front", "CAM_FRONT", 0.0},
                                {"front-left", "CAM_FRONT_LEFT", 60.0},
                                {"front-right", "CAM_FRONT_RIGHT", -60.0},
                                {"back", "CAM_BACK", 180.0},
                                {"back-left", "CAM_BACK_LEFT", 120.0},
                                {"back-right", "CAM_BACK_RIGHT", -120.0}};
    const double fov = deg2rad(70.0);
    double f = (image_w / 2.0) / std::tan(fov / 2.0);
    std::vector<CameraModel> rig;
    rig.reserve(6);
    for (const auto& d : defs) {
        CameraModel c;
        c.name = d.name;
        c.tag_name = d.tag;
        c.yaw = wrap_angle(ego_heading + deg2rad(d.yaw_deg));
        c.position = {ego_pos.x, ego_pos.y, 1.5};
        c.fx = f;
        c.fy = f;
        c.cx = image_w / 2.0;
        c.cy = image_h / 2.0;
        c.width = image_w;
        c.height = image_h;
        rig.push_back(std::move(c));
    }
    return rig;
}

}  // namespace dvlm
