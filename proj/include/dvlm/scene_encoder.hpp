#pragma once

#include <string>
#include <vector>

#include "dvlm/attention.hpp"
#include "dvlm/errors.hpp"

namespace dvlm {

enum class EncoderMode { qformer, direct };

inline const char* to_string(EncoderMode m) {
    return m == EncoderMode::qformer ? "qformer" : "direct";
}

inline EncoderMode encoder_mode_from_string(const std::string& s) {
    if (s == "qformer") return EncoderMode::qformer;
    if (s == "direct") return EncoderMode::direct;
    throw ConfigError("unknown encoder mode: " + s);
}

struct SceneEncoderConfig {
    int n_q = 16;            // learnable content queries
    int n_c = 6;             // cameras
    int d = 64;              // token width
    int blocks = 4;          // alternating stack, first block is view-level
    int heads = 4;
    int d_ff = 0;            // 0 -> 4*d
    int tokens_per_cam = 64; // image tokens per camera grid
    EncoderMode mode = EncoderMode::qformer;

    int ff() const { return d_ff > 0 ? d_ff : 4 * d; }
    int out_tokens() const {
        return mode == EncoderMode::qformer ? n_q * n_c : n_c * tokens_per_cam;
    }
    void validate() const {
        if (n_q < 1 || n_c < 1 || d < 1 || blocks < 1 || heads < 1 || tokens_per_cam < 1)
            throw ConfigError("scene encoder sizes must be positive");
        if (blocks % 2 != 0) throw ConfigError("scene encoder needs an even block count");
        if (d % heads != 0) throw ConfigError("scene encoder width not divisible by heads");
    }
};

// Row j*N_q + i = Q[i] + Q_c[j]: camera-group-major broadcast of content
// queries against per-camera identifier queries.
template <class S>
Mat<S> broadcast_combine(const Mat<S>& q, const Mat<S>& qc, std::vector<int>* groups = nullptr) {
    if (q.cols != qc.cols) throw ShapeError("broadcast_combine width mismatch");
    Mat<S> out(q.rows * qc.rows, q.cols);
    if (groups) groups->clear();
    for (int j = 0; j < qc.rows; ++j)
        for (int i = 0; i < q.rows; ++i) {
            S* r = out.row(j * q.rows + i);
            for (int c = 0; c < q.cols; ++c) r[c] = q.at(i, c) + qc.at(j, c);
            if (groups) groups->push_back(j);
        }
    return out;
}

// Multi-view encoder: combined queries pass through blocks that alternate
// between view-level attention (1st, 3rd, ... blocks: interaction confined to
// each camera group and its own image grid) and scene-level attention (2nd,
// 4th, ...: everything sees everything). In qformer mode the queries
// cross-attend to the image grids; in direct mode the image tokens themselves
// (plus camera embeddings) are the sequence and only self-attention is used.
template <class S>
class SceneEncoder {
  public:
    using Var = typename Graph<S>::Var;

    explicit SceneEncoder(SceneEncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const SceneEncoderConfig& config() const { return cfg_; }

    void register_params(ParamStore<S>& ps, bool trainable = true) const {
        if (cfg_.mode == EncoderMode::qformer)
            ps.add("venc.q", cfg_.n_q, cfg_.d, Init::Gaussian, 0.02, trainable, false);
        ps.add("venc.qc", cfg_.n_c, cfg_.d, Init::Gaussian, 0.02, trainable, false);
        for (int b = 0; b < cfg_.blocks; ++b) {
            std::string pb = block_prefix(b);
            register_layer_norm(ps, pb + ".ln1", cfg_.d, trainable);
            register_mha(ps, pb + ".sa", cfg_.d, trainable);
            if (cfg_.mode == EncoderMode::qformer) {
                register_layer_norm(ps, pb + ".ln2", cfg_.d, trainable);
                register_mha(ps, pb + ".ca", cfg_.d, trainable);
            }
            register_layer_norm(ps, pb + ".ln3", cfg_.d, trainable);
            register_ffn(ps, pb + ".ff", cfg_.d, cfg_.ff(), trainable);
        }
    }

    // Initial sequence: combined queries (qformer) or camera-embedded image
    // tokens (direct).
    Var build_input(Binder<S>& bind, const std::vector<Var>& cam_grids) const {
        check_grids(cam_grids);
        Graph<S>& g = bind.graph();
        if (cfg_.mode == EncoderMode::qformer) {
            std::vector<int> q_ids, c_ids;
            for (int j = 0; j < cfg_.n_c; ++j)
                for (int i = 0; i < cfg_.n_q; ++i) {
                    q_ids.push_back(i);
                    c_ids.push_back(j);
                }
            return g.add(g.gather_rows(bind("venc.q"), q_ids),
                         g.gather_rows(bind("venc.qc"), c_ids));
        }
        std::vector<int> c_ids;
        for (int j = 0; j < cfg_.n_c; ++j)
            for (int t = 0; t < cfg_.tokens_per_cam; ++t) c_ids.push_back(j);
        return g.add(g.concat_rows(cam_grids), g.gather_rows(bind("venc.qc"), c_ids));
    }

    // One block of the alternating stack. Even 0-based indices are the
    // view-level ("odd-numbered", 1-based) blocks.
    Var apply_block(Binder<S>& bind, Var x, int b, const std::vector<Var>& cam_grids) const {
        check_grids(cam_grids);
        if (b < 0 || b >= cfg_.blocks) throw ConfigError("block index out of range");
        Graph<S>& g = bind.graph();
        bool view_level = (b % 2 == 0);
        std::vector<int> row_groups = sequence_groups();
        std::string pb = block_prefix(b);

        Mask self_mask = view_level
                             ? group_mask(row_groups, row_groups)
                             : all_true_mask(static_cast<int>(row_groups.size()),
                                             static_cast<int>(row_groups.size()));
        auto h1 = layer_norm(bind, pb + ".ln1", x);
        x = g.add(x, mha(bind, pb + ".sa", h1, h1, self_mask, cfg_.heads));

        if (cfg_.mode == EncoderMode::qformer) {
            std::vector<int> kv_groups;
            for (int j = 0; j < cfg_.n_c; ++j)
                for (int t = 0; t < cfg_.tokens_per_cam; ++t) kv_groups.push_back(j);
            Mask cross_mask = view_level
                                  ? group_mask(row_groups, kv_groups)
                                  : all_true_mask(static_cast<int>(row_groups.size()),
                                                  static_cast<int>(kv_groups.size()));
            Var kv = g.concat_rows(cam_grids);
            auto h2 = layer_norm(bind, pb + ".ln2", x);
            x = g.add(x, mha(bind, pb + ".ca", h2, kv, cross_mask, cfg_.heads));
        }
        auto h3 = layer_norm(bind, pb + ".ln3", x);
        return g.add(x, ffn(bind, pb + ".ff", h3));
    }

    // One Var per camera grid, each tokens_per_cam x d. Returns the encoded
    // token sequence (out_tokens x d).
    Var encode(Binder<S>& bind, const std::vector<Var>& cam_grids) const {
        Var x = build_input(bind, cam_grids);
        for (int b = 0; b < cfg_.blocks; ++b) x = apply_block(bind, x, b, cam_grids);
        return x;
    }

    // Group id of every encoder sequence row, for mask oracles.
    std::vector<int> sequence_groups() const {
        std::vector<int> out;
        int per = cfg_.mode == EncoderMode::qformer ? cfg_.n_q : cfg_.tokens_per_cam;
        for (int j = 0; j < cfg_.n_c; ++j)
            for (int i = 0; i < per; ++i) out.push_back(j);
        return out;
    }

    static std::string block_prefix(int b) { return "venc.b" + std::to_string(b); }

  private:
    void check_grids(const std::vector<Var>& cam_grids) const {
        if (static_cast<int>(cam_grids.size()) != cfg_.n_c)
            throw ShapeError("encoder expects " + std::to_string(cfg_.n_c) +
                             " camera grids, got " + std::to_string(cam_grids.size()));
        for (const auto& gvar : cam_grids)
            if (gvar.rows != cfg_.tokens_per_cam || gvar.cols != cfg_.d)
                throw ShapeError("camera grid must be " +
                                 shape_str(cfg_.tokens_per_cam, cfg_.d) + ", got " +
                                 shape_str(gvar.rows, gvar.cols));
    }

    SceneEncoderConfig cfg_;
};

}  // namespace dvlm
