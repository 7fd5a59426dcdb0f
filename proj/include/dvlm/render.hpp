#pragma once

#include <vector>

#include "dvlm/mat.hpp"
#include "dvlm/rng.hpp"
#include "dvlm/scene.hpp"

namespace dvlm {

// Stand-in for image-encoder output: one grid_p x grid_p grid of feat_dim
// vectors per camera, flattened row-major to (grid_p^2) x feat_dim.
template <class S>
struct MultiViewFeatures {
    int grid_p = 0;
    int feat_dim = 0;
    std::vector<Mat<S>> cams;

    int tokens_per_cam() const { return grid_p * grid_p; }
};

namespace detail {

template <class S>
void fill_gaussian_from(Mat<S>& m, uint64_t seed, double amp) {
    Rng rng(seed);
    for (auto& v : m.a) v = static_cast<S>(amp * rng.gaussian());
}

}  // namespace detail

// Deterministic pseudo-rendering: a fixed per-cell background field plus, for
// every camera that sees an object, a class-and-pose-keyed signature added to
// each grid cell the projected box overlaps. Signature amplitude falls off
// with distance so near objects dominate.
template <class S>
MultiViewFeatures<S> render_views(const SceneGraph& scene) {
    const GenConfig& cfg = scene.cfg;
    const int P = cfg.grid_p, D = cfg.feat_dim;
    MultiViewFeatures<S> mv;
    mv.grid_p = P;
    mv.feat_dim = D;
    mv.cams.reserve(scene.cameras.size());

    for (size_t ci = 0; ci < scene.cameras.size(); ++ci) {
        Mat<S> grid(P * P, D);
        for (int cell = 0; cell < P * P; ++cell) {
            Rng rng(hash_combine(0xBAC6ULL, static_cast<uint64_t>(ci) * 4096 + cell));
            S* row = grid.row(cell);
            for (int d = 0; d < D; ++d) row[d] = static_cast<S>(0.1 * rng.gaussian());
        }
        mv.cams.push_back(std::move(grid));
    }

    for (const auto& obj : scene.objects) {
        uint64_t key = hash_combine(
            hash_combine(static_cast<uint64_t>(obj.class_label) + 1,
                         static_cast<uint64_t>(std::llround(obj.box3d.center.x * 10.0)) * 2 +
                             (obj.box3d.center.x < 0 ? 1 : 0)),
            hash_combine(static_cast<uint64_t>(std::llround(obj.box3d.center.y * 10.0)) * 2 +
                             (obj.box3d.center.y < 0 ? 1 : 0),
                         static_cast<uint64_t>(std::llround(obj.box3d.yaw * 100.0)) * 2 +
                             (obj.box3d.yaw < 0 ? 1 : 0)));
        Mat<S> sig(1, D);
        detail::fill_gaussian_from(sig, key, 1.0);

        for (size_t ci = 0; ci < scene.cameras.size(); ++ci) {
            auto b = project_box(obj.box3d, scene.cameras[ci], static_cast<int>(ci));
            if (!b) continue;
            double amp = 1.0 / (1.0 + b->depth / 10.0);
            for (int r = 0; r < P; ++r) {
                double v_lo = static_cast<double>(r) / P, v_hi = static_cast<double>(r + 1) / P;
                if (b->v_max <= v_lo || b->v_min >= v_hi) continue;
                for (int c = 0; c < P; ++c) {
                    double u_lo = static_cast<double>(c) / P,
                           u_hi = static_cast<double>(c + 1) / P;
                    if (b->u_max <= u_lo || b->u_min >= u_hi) continue;
                    S* row = mv.cams[ci].row(r * P + c);
                    for (int d = 0; d < D; ++d)
                        row[d] += static_cast<S>(amp) * sig.a[d];
                }
            }
        }
    }
    return mv;
}

}  // namespace dvlm
