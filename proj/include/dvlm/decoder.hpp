#pragma once

#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dvlm/attention.hpp"
#include "dvlm/plora.hpp"
#include "dvlm/vocab.hpp"

namespace dvlm {

// How the non-text vectors reach the decoder: spliced into the input sequence
// ahead of the text, or attended per layer through zero-init-gated
// cross-attention.
enum class InjectionMode { input_tokens, adapter };

inline const char* to_string(InjectionMode m) {
    return m == InjectionMode::input_tokens ? "input_tokens" : "adapter";
}

inline InjectionMode injection_mode_from_string(const std::string& s) {
    if (s == "input_tokens") return InjectionMode::input_tokens;
    if (s == "adapter") return InjectionMode::adapter;
    throw ConfigError("unknown injection mode: " + s);
}

struct DecoderConfig {
    int layers = 2;
    int d = 64;
    int heads = 4;
    int d_ff = 256;
    int max_text_len = 160;
    InjectionMode injection = InjectionMode::input_tokens;

    void validate() const {
        if (layers < 1) throw ConfigError("decoder needs at least one layer");
        if (d < 1 || d_ff < 1) throw ConfigError("decoder widths must be positive");
        if (d % heads != 0) throw ConfigError("decoder width not divisible by heads");
        if (max_text_len < 2) throw ConfigError("max_text_len too small");
    }
};

// One decoder input: optional vision and driving-token prefixes (graph
// variables so gradients reach their producers) plus the text ids and the
// per-position answer mask.
template <class S>
struct TokenSequence {
    std::optional<typename Graph<S>::Var> vision;
    std::optional<typename Graph<S>::Var> e2e;  // already visibility-filtered
    std::vector<int> text_ids;
    std::vector<uint8_t> loss_mask;
};

// Text ids and loss mask for one question/answer pair. Position t's logits
// predict token t+1, so the mask marks positions whose target is an answer
// token or the closing EOS.
struct EncodedQA {
    std::vector<int> ids;
    std::vector<uint8_t> loss_mask;
    int answer_start = 0;  // index of the first answer token in ids
};

inline EncodedQA encode_qa(const Vocabulary& vocab, const std::string& question,
                           const std::string& answer) {
    EncodedQA out;
    out.ids.push_back(Vocabulary::kBos);
    for (int id : vocab.tokenize(question)) out.ids.push_back(id);
    out.answer_start = static_cast<int>(out.ids.size());
    for (int id : vocab.tokenize(answer)) out.ids.push_back(id);
    out.ids.push_back(Vocabulary::kEos);
    out.loss_mask.assign(out.ids.size(), 0);
    for (size_t t = 0; t + 1 < out.ids.size(); ++t)
        if (static_cast<int>(t) + 1 >= out.answer_start) out.loss_mask[t] = 1;
    return out;
}

inline std::vector<int> encode_prompt(const Vocabulary& vocab, const std::string& question) {
    std::vector<int> ids{Vocabulary::kBos};
    for (int id : vocab.tokenize(question)) ids.push_back(id);
    return ids;
}

// Tiny pre-norm causal transformer with optional per-layer adapter routing.
template <class S>
class Decoder {
  public:
    using Var = typename Graph<S>::Var;

    Decoder(const DecoderConfig& cfg, int vocab_size) : cfg_(cfg), vocab_size_(vocab_size) {
        cfg_.validate();
        if (vocab_size_ < 8) throw ConfigError("vocabulary too small for reserved symbols");
    }

    const DecoderConfig& config() const { return cfg_; }
    int vocab_size() const { return vocab_size_; }

    static std::string block_prefix(int b) { return "dec.b" + std::to_string(b); }

    // Registers every decoder parameter. Both injection modes share one
    // parameter set: the gated cross-attention simply goes unused in
    // input_tokens mode.
    void register_params(ParamStore<S>& ps, PLoRABank<S>* bank = nullptr) const {
        ps.add("dec.embed", vocab_size_, cfg_.d, Init::Gaussian, 0.02, true, false);
        ps.add("dec.pos", cfg_.max_text_len, cfg_.d, Init::Gaussian, 0.02, true, false);
        for (int b = 0; b < cfg_.layers; ++b) {
            std::string pb = block_prefix(b);
            register_layer_norm(ps, pb + ".ln1", cfg_.d);
            register_mha(ps, pb + ".sa", cfg_.d);
            register_layer_norm(ps, pb + ".lnx", cfg_.d);
            register_mha(ps, pb + ".xa", cfg_.d);
            ps.add(pb + ".gate", 1, 1, Init::Zero, 0.0, true, false);
            register_layer_norm(ps, pb + ".ln3", cfg_.d);
            register_ffn(ps, pb + ".ff", cfg_.d, cfg_.d_ff);
            if (bank != nullptr) {
                bank->add_attn_site(ps, pb + ".sa", cfg_.d);
                bank->add_ffn_site(ps, pb + ".ff", cfg_.d, cfg_.d_ff);
            }
        }
        register_layer_norm(ps, "dec.lnf", cfg_.d);
        register_linear(ps, "dec.out", cfg_.d, vocab_size_);
    }

    // Logits for every text position (n_text x vocab). The prefix segments
    // enter per the configured injection mode; adapter hooks follow the
    // route's branch.
    Var forward(Binder<S>& bind, const TokenSequence<S>& seq, const PLoRABank<S>* bank,
                const BranchRoute& route) const {
        Graph<S>& g = bind.graph();
        int n_text = static_cast<int>(seq.text_ids.size());
        if (n_text < 1) throw ShapeError("decoder needs at least one text token");
        if (n_text > cfg_.max_text_len) throw ShapeError("text longer than max_text_len");
        if (seq.loss_mask.size() != seq.text_ids.size())
            throw ShapeError("loss mask length != text length");
        if (seq.vision && seq.vision->cols != cfg_.d)
            throw ShapeError("vision segment width != decoder width");
        if (seq.e2e && seq.e2e->cols != cfg_.d)
            throw ShapeError("e2e segment width != decoder width");
        for (int id : seq.text_ids)
            if (id < 0 || id >= vocab_size_) throw ShapeError("text id out of vocabulary");

        std::vector<int> pos(static_cast<size_t>(n_text));
        std::iota(pos.begin(), pos.end(), 0);
        auto text = g.add(g.gather_rows(bind("dec.embed"), seq.text_ids),
                          g.gather_rows(bind("dec.pos"), pos));

        if (cfg_.injection == InjectionMode::input_tokens)
            return forward_input_tokens(bind, seq, text, n_text, bank, route);
        return forward_adapter(bind, seq, text, n_text, bank, route);
    }

  private:
    Var forward_input_tokens(Binder<S>& bind, const TokenSequence<S>& seq, Var text, int n_text,
                             const PLoRABank<S>* bank, const BranchRoute& route) const {
        Graph<S>& g = bind.graph();
        // prefix = vision | <e2e> | e2e tokens | </e2e>, then the text
        std::vector<Var> parts;
        if (seq.vision) parts.push_back(*seq.vision);
        if (seq.e2e) {
            parts.push_back(g.gather_rows(bind("dec.embed"), {Vocabulary::kE2eOpen}));
            parts.push_back(*seq.e2e);
            parts.push_back(g.gather_rows(bind("dec.embed"), {Vocabulary::kE2eClose}));
        }
        int n_prefix = 0;
        for (const auto& p : parts) n_prefix += p.rows;
        parts.push_back(text);
        Var x = parts.size() == 1 ? text : g.concat_rows(parts);
        Mask mask = causal_mask(n_text, n_prefix);
        for (int b = 0; b < cfg_.layers; ++b) x = block(bind, x, mask, b, bank, route);
        auto out = g.slice_rows(x, n_prefix, n_text);
        return linear(bind, "dec.out", layer_norm(bind, "dec.lnf", out));
    }

    Var forward_adapter(Binder<S>& bind, const TokenSequence<S>& seq, Var text, int n_text,
                        const PLoRABank<S>* bank, const BranchRoute& route) const {
        Graph<S>& g = bind.graph();
        std::optional<Var> prefix;
        if (seq.vision && seq.e2e)
            prefix = g.concat_rows({*seq.vision, *seq.e2e});
        else if (seq.vision)
            prefix = seq.vision;
        else if (seq.e2e)
            prefix = seq.e2e;

        Var x = text;
        Mask mask = causal_mask(n_text, 0);
        for (int b = 0; b < cfg_.layers; ++b) {
            std::string pb = block_prefix(b);
            auto h = layer_norm(bind, pb + ".ln1", x);
            x = g.add(x, self_attn(bind, pb, h, mask, bank));
            if (prefix) {
                // zero-init gate: the adapted prefix contributes nothing
                // until training moves the gate
                auto hx = layer_norm(bind, pb + ".lnx", x);
                auto cross = mha(bind, pb + ".xa", hx, *prefix,
                                 all_true_mask(n_text, prefix->rows), cfg_.heads);
                x = g.add(x, g.scale_by(cross, bind(pb + ".gate")));
            }
            auto h3 = layer_norm(bind, pb + ".ln3", x);
            x = g.add(x, ffn_routed(bind, pb, h3, bank, route));
        }
        return linear(bind, "dec.out", layer_norm(bind, "dec.lnf", x));
    }

    Var block(Binder<S>& bind, Var x, const Mask& mask, int b, const PLoRABank<S>* bank,
              const BranchRoute& route) const {
        Graph<S>& g = bind.graph();
        std::string pb = block_prefix(b);
        auto h = layer_norm(bind, pb + ".ln1", x);
        x = g.add(x, self_attn(bind, pb, h, mask, bank));
        auto h3 = layer_norm(bind, pb + ".ln3", x);
        return g.add(x, ffn_routed(bind, pb, h3, bank, route));
    }

    Var self_attn(Binder<S>& bind, const std::string& pb, Var h, const Mask& mask,
                  const PLoRABank<S>* bank) const {
        LoraHook hq, hv;
        if (bank != nullptr) {
            hq = bank->attn_q_hook(pb + ".sa");
            hv = bank->attn_v_hook(pb + ".sa");
        }
        return mha(bind, pb + ".sa", h, h, mask, cfg_.heads, hq, hv);
    }

    Var ffn_routed(Binder<S>& bind, const std::string& pb, Var h, const PLoRABank<S>* bank,
                   const BranchRoute& route) const {
        LoraHook hu, hd;
        if (bank != nullptr) {
            hu = bank->ffn_up_hook(pb + ".ff", route);
            hd = bank->ffn_down_hook(pb + ".ff", route);
        }
        return ffn(bind, pb + ".ff", h, hu, hd);
    }

    DecoderConfig cfg_;
    int vocab_size_;
};

// Builds the non-text segments of a sequence inside the current step's graph;
// generation re-runs it every step because each step is a fresh graph.
template <class S>
using PrefixBuilder = std::function<void(Binder<S>&, TokenSequence<S>&)>;

// Greedy decoding: returns prompt plus generated ids (EOS kept if produced).
template <class S>
std::vector<int> generate_ids(const Decoder<S>& dec, ParamStore<S>& ps, const PLoRABank<S>* bank,
                              const BranchRoute& route, const PrefixBuilder<S>& prefix_builder,
                              const std::vector<int>& prompt_ids, int max_new) {
    if (max_new < 1) throw ConfigError("max_new must be >= 1");
    if (prompt_ids.empty()) throw InputError("empty generation prompt");
    std::vector<int> ids = prompt_ids;
    for (int step = 0; step < max_new; ++step) {
        Graph<S> g;
        Binder<S> bind(g, ps);
        TokenSequence<S> seq;
        if (prefix_builder) prefix_builder(bind, seq);
        seq.text_ids = ids;
        seq.loss_mask.assign(ids.size(), 0);
        auto logits = dec.forward(bind, seq, bank, route);
        const Mat<S>& lv = g.value(logits);
        int last = lv.rows - 1;
        int best = 0;
        S best_v = lv.at(last, 0);
        for (int c = 1; c < lv.cols; ++c)
            if (lv.at(last, c) > best_v) {
                best_v = lv.at(last, c);
                best = c;
            }
        ids.push_back(best);
        if (best == Vocabulary::kEos) break;
    }
    return ids;
}

// Greedy decoding to text: the generated continuation, EOS stripped.
template <class S>
std::string generate(const Decoder<S>& dec, ParamStore<S>& ps, const PLoRABank<S>* bank,
                     const BranchRoute& route, const PrefixBuilder<S>& prefix_builder,
                     const Vocabulary& vocab, const std::string& question, int max_new) {
    std::vector<int> prompt = encode_prompt(vocab, question);
    std::vector<int> ids = generate_ids(dec, ps, bank, route, prefix_builder, prompt, max_new);
    std::vector<int> answer(ids.begin() + static_cast<std::ptrdiff_t>(prompt.size()), ids.end());
    while (!answer.empty() && answer.back() == Vocabulary::kEos) answer.pop_back();
    return vocab.detokenize(answer);
}

}  // namespace dvlm
