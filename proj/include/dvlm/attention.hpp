#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dvlm/graph.hpp"
#include "dvlm/params.hpp"

namespace dvlm {

// Binds store parameters into a graph on demand. Trainable parameters get
// their grad field as sink; frozen ones are bound without a sink so backward
// skips them entirely. Each parameter becomes one node per graph, so repeated
// uses share storage and gradients accumulate in one place.
template <class S>
class Binder {
  public:
    using Var = typename Graph<S>::Var;

    Binder(Graph<S>& g, ParamStore<S>& ps) : g_(g), ps_(ps) {}

    Var operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        Param<S>& p = ps_.get(name);
        Var v = g_.input(p.value, p.trainable ? &p.grad : nullptr);
        cache_.emplace(name, v);
        return v;
    }

    Graph<S>& graph() { return g_; }
    ParamStore<S>& store() { return ps_; }

  private:
    Graph<S>& g_;
    ParamStore<S>& ps_;
    std::map<std::string, Var> cache_;
};

// Optional low-rank residual attached to a linear projection:
//   y += lora_scale * (x A) B,  A Gaussian-init d_in x r, B zero-init r x d_out.
struct LoraHook {
    std::string prefix;  // parameters <prefix>.A and <prefix>.B
    double scale = 2.0;
    bool active = false;
};

inline LoraHook lora_hook(const std::string& prefix, double scale) {
    return LoraHook{prefix, scale, true};
}

template <class S>
void register_lora(ParamStore<S>& ps, const std::string& prefix, int d_in, int d_out, int rank,
                   double init_stddev = 0.01) {
    ps.add(prefix + ".A", d_in, rank, Init::Gaussian, init_stddev, true, false);
    ps.add(prefix + ".B", rank, d_out, Init::Zero, 0.0, true, false);
}

template <class S>
void register_linear(ParamStore<S>& ps, const std::string& prefix, int d_in, int d_out,
                     bool trainable = true, double stddev = 0.02) {
    // projection matrices opt into weight decay; biases never do
    ps.add(prefix + ".w", d_in, d_out, Init::Gaussian, stddev, trainable, trainable);
    ps.add(prefix + ".b", 1, d_out, Init::Zero, 0.0, trainable, false);
}

template <class S>
typename Graph<S>::Var linear(Binder<S>& bind, const std::string& prefix,
                              typename Graph<S>::Var x, const LoraHook& lora = {}) {
    Graph<S>& g = bind.graph();
    auto y = g.add_row(g.matmul(x, bind(prefix + ".w")), bind(prefix + ".b"));
    if (lora.active) {
        auto low = g.matmul(g.matmul(x, bind(lora.prefix + ".A")), bind(lora.prefix + ".B"));
        y = g.add(y, g.scale(low, static_cast<S>(lora.scale)));
    }
    return y;
}

template <class S>
void register_layer_norm(ParamStore<S>& ps, const std::string& prefix, int d,
                         bool trainable = true) {
    ps.add(prefix + ".g", 1, d, Init::Ones, 0.0, trainable, false);
    ps.add(prefix + ".b", 1, d, Init::Zero, 0.0, trainable, false);
}

template <class S>
typename Graph<S>::Var layer_norm(Binder<S>& bind, const std::string& prefix,
                                  typename Graph<S>::Var x) {
    return bind.graph().layer_norm_rows(x, bind(prefix + ".g"), bind(prefix + ".b"));
}

template <class S>
void register_mha(ParamStore<S>& ps, const std::string& prefix, int d, bool trainable = true) {
    register_linear(ps, prefix + ".q", d, d, trainable);
    register_linear(ps, prefix + ".k", d, d, trainable);
    register_linear(ps, prefix + ".v", d, d, trainable);
    register_linear(ps, prefix + ".o", d, d, trainable);
}

// Multi-head attention with an explicit boolean admission mask over
// (query position, key position). Masked weights are exactly zero, so masked
// keys are exactly invisible. Optional LoRA hooks on the query and value
// projections.
template <class S>
typename Graph<S>::Var mha(Binder<S>& bind, const std::string& prefix,
                           typename Graph<S>::Var q_in, typename Graph<S>::Var kv_in,
                           const Mask& mask, int heads, const LoraHook& lora_q = {},
                           const LoraHook& lora_v = {}) {
    Graph<S>& g = bind.graph();
    if (q_in.cols != kv_in.cols) throw ShapeError("mha query/key width mismatch");
    int d = q_in.cols;
    if (d % heads != 0) throw ShapeError("mha width not divisible by heads");
    int dh = d / heads;

    auto q = linear(bind, prefix + ".q", q_in, lora_q);
    auto k = linear(bind, prefix + ".k", kv_in);
    auto v = linear(bind, prefix + ".v", kv_in, lora_v);

    std::vector<typename Graph<S>::Var> head_outs;
    head_outs.reserve(heads);
    S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int h = 0; h < heads; ++h) {
        auto qh = g.slice_cols(q, h * dh, dh);
        auto kh = g.slice_cols(k, h * dh, dh);
        auto vh = g.slice_cols(v, h * dh, dh);
        auto scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
        auto attn = g.softmax_rows(scores, mask);
        head_outs.push_back(g.matmul(attn, vh));
    }
    auto merged = g.concat_cols(head_outs);
    return linear(bind, prefix + ".o", merged);
}

template <class S>
void register_ffn(ParamStore<S>& ps, const std::string& prefix, int d, int d_ff,
                  bool trainable = true) {
    register_linear(ps, prefix + ".up", d, d_ff, trainable);
    register_linear(ps, prefix + ".down", d_ff, d, trainable);
}

// Two-layer GELU feed-forward; LoRA hooks attach to the up and down
// projections (this is where the routed branches live in the decoder).
template <class S>
typename Graph<S>::Var ffn(Binder<S>& bind, const std::string& prefix,
                           typename Graph<S>::Var x, const LoraHook& lora_up = {},
                           const LoraHook& lora_down = {}) {
    Graph<S>& g = bind.graph();
    auto h = g.gelu(linear(bind, prefix + ".up", x, lora_up));
    return linear(bind, prefix + ".down", h, lora_down);
}

// Strictly-causal mask over n positions with an always-visible prefix block.
inline Mask causal_mask(int n_text, int n_prefix = 0) {
    int n = n_prefix + n_text;
    Mask m(n, n);
    m.fill(0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            bool vis = j < n_prefix ? true : (i >= n_prefix && j <= i);
            m.at(i, j) = vis ? 1 : 0;
        }
    return m;
}

// Block-diagonal mask: position i may see position j iff they carry the same
// group id.
inline Mask group_mask(const std::vector<int>& row_groups, const std::vector<int>& col_groups) {
    Mask m(static_cast<int>(row_groups.size()), static_cast<int>(col_groups.size()));
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) m.at(i, j) = row_groups[i] == col_groups[j] ? 1 : 0;
    return m;
}

}  // namespace dvlm
