#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dvlm/decoder.hpp"
#include "dvlm/e2e_bridge.hpp"
#include "dvlm/qa.hpp"
#include "dvlm/render.hpp"
#include "dvlm/scene_encoder.hpp"

namespace dvlm {

// Full-system configuration: every module width must line up, and the scene
// generator must feed the encoder exactly the grid the encoder expects.
struct ModelConfig {
    SceneEncoderConfig enc;
    DecoderConfig dec;
    E2EConfig e2e;
    PLoRAConfig plora;
    GenConfig gen;
    double e2e_noise = 0.1;   // backbone perturbation scale
    bool use_plora = true;
    uint64_t param_seed = 1234;

    void validate() const {
        enc.validate();
        dec.validate();
        e2e.validate();
        gen.validate();
        if (e2e_noise < 0) throw ConfigError("e2e_noise must be >= 0");
        if (enc.d != dec.d || e2e.d != dec.d)
            throw ConfigError("encoder, bridge and decoder widths must match");
        if (gen.feat_dim != enc.d)
            throw ConfigError("rendered feature width must match encoder width");
        if (enc.tokens_per_cam != gen.grid_p * gen.grid_p)
            throw ConfigError("encoder tokens_per_cam must equal grid_p^2");
        if (enc.n_c != 6) throw ConfigError("encoder camera count must match the 6-camera rig");
        if (e2e.k_waypoints != gen.k_waypoints)
            throw ConfigError("bridge k_waypoints must match scene generator");
    }

    // Small but fully trainable configuration used by tests and the CLI
    // defaults; every module shrinks together.
    static ModelConfig desk() {
        ModelConfig c;
        c.enc.n_q = 4;
        c.enc.n_c = 6;
        c.enc.d = 32;
        c.enc.blocks = 2;
        c.enc.heads = 4;
        c.enc.d_ff = 64;
        c.enc.tokens_per_cam = 16;
        c.dec.layers = 2;
        c.dec.d = 32;
        c.dec.heads = 4;
        c.dec.d_ff = 64;
        c.dec.max_text_len = 96;
        c.e2e.n_ins = 10;
        c.e2e.d = 32;
        c.e2e.heads = 4;
        c.e2e.k_waypoints = 6;
        c.plora.rank = 8;
        c.gen.grid_p = 4;
        c.gen.feat_dim = 32;
        return c;
    }
};

// One parameter store shared by the vision encoder, the driving-token bridge,
// and the decoder (with its adapter bank), built against a fixed vocabulary.
template <class S>
struct Model {
    ModelConfig cfg;
    Vocabulary vocab;
    ParamStore<S> ps;
    PLoRABank<S> bank;
    SceneEncoder<S> enc;
    Decoder<S> dec;

    Model(ModelConfig c, Vocabulary v)
        : cfg(std::move(c)),
          vocab(std::move(v)),
          ps(cfg.param_seed),
          bank(cfg.plora),
          enc(cfg.enc),
          dec(cfg.dec, vocab.size()) {
        cfg.validate();
        enc.register_params(ps);
        dec.register_params(ps, cfg.use_plora ? &bank : nullptr);
        register_e2e(ps, cfg.e2e);
    }
};

// Per-record state that must outlive any graph built over it: the scene, the
// selected backbone output (its feature matrices get bound into graphs), the
// adapter route, and the encoded text.
template <class S>
struct RecordContext {
    SceneGraph scene;
    E2EBackboneOutput<S> sel;
    BranchRoute route;
    EncodedQA qa;
};

template <class S>
RecordContext<S> prepare_record(const Model<S>& m, const QARecord& rec) {
    RecordContext<S> ctx;
    ctx.scene = gen_scene(rec.scene_seed, m.cfg.gen);
    auto backbone = synthetic_backbone<S>(ctx.scene, m.cfg.e2e_noise,
                                          static_cast<uint64_t>(rec.scene_seed), m.cfg.e2e.d);
    ctx.sel = select_top_instances(backbone, m.cfg.e2e.n_ins, &m.ps);
    ctx.route = route(rec.task, rec.qtype, m.cfg.plora.mode);
    ctx.qa = encode_qa(m.vocab, rec.question, rec.answer);
    return ctx;
}

template <class S>
struct ForwardResult {
    typename Graph<S>::Var logits;
    typename Graph<S>::Var vision;
    E2EAssembly<S> assembly;
};

// Full forward pass for one record inside the caller's graph: render, encode
// views, assemble driving tokens, filter them by the route, decode.
template <class S>
ForwardResult<S> forward_record(Binder<S>& bind, const Model<S>& m, const RecordContext<S>& ctx,
                                bool detached, const std::vector<int>* text_override = nullptr) {
    Graph<S>& g = bind.graph();
    auto views = render_views<S>(ctx.scene);
    std::vector<typename Graph<S>::Var> grids;
    for (auto& cam : views.cams) grids.push_back(g.constant(cam));

    ForwardResult<S> out;
    out.vision = m.enc.encode(bind, grids);
    out.assembly = assemble_e2e_tokens(bind, m.cfg.e2e, m.vocab, ctx.scene, ctx.sel, detached);

    TokenSequence<S> seq;
    seq.vision = out.vision;
    seq.e2e = visible_e2e_rows(g, out.assembly, ctx.route.visible);
    seq.text_ids = text_override != nullptr ? *text_override : ctx.qa.ids;
    seq.loss_mask.assign(seq.text_ids.size(), 0);
    out.logits = m.dec.forward(bind, seq, m.cfg.use_plora ? &m.bank : nullptr, ctx.route);
    return out;
}

// Prefix builder for greedy generation; ctx and m are captured by reference
// and must outlive the returned closure.
template <class S>
PrefixBuilder<S> make_prefix_builder(const Model<S>& m, const RecordContext<S>& ctx,
                                     bool detached) {
    return [&m, &ctx, detached](Binder<S>& bind, TokenSequence<S>& seq) {
        Graph<S>& g = bind.graph();
        auto views = render_views<S>(ctx.scene);
        std::vector<typename Graph<S>::Var> grids;
        for (auto& cam : views.cams) grids.push_back(g.constant(cam));
        seq.vision = m.enc.encode(bind, grids);
        auto assembly = assemble_e2e_tokens(bind, m.cfg.e2e, m.vocab, ctx.scene, ctx.sel, detached);
        seq.e2e = visible_e2e_rows(g, assembly, ctx.route.visible);
    };
}

}  // namespace dvlm
