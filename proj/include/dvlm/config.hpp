#pragma once

#include <string>

#include "json.hpp"

#include "dvlm/eval.hpp"
#include "dvlm/model.hpp"
#include "dvlm/training.hpp"

namespace dvlm {

// Merged run-level configuration for the command-line tool. Every flag has a
// config-file counterpart with the same name (dashes become underscores);
// precedence is built-in defaults < config file < explicit flags, and the
// effective result is dumped verbatim into the output directory.
struct RunConfig {
    // dataset generation
    int scenes = 20;
    double split = 0.8;

    // model geometry and behavior
    std::string preset = "desk";      // desk | tiny
    std::string plora_mode = "task";  // task | question | hierarchical
    int n_ins = 0;                    // driving-token instance slots (0 = preset value)
    double e2e_noise = 0.1;           // synthetic backbone perturbation
    bool detach = true;               // block gradients into the driving backbone

    // training
    std::string strategy = "frozen_e2e";  // frozen_e2e (or frozen-e2e) | joint
    double lambda = 1.0;                  // driving-loss weight under joint
    int steps = 200;
    int batch_size = 4;
    double lr = 1e-2;
    double weight_decay = 0.01;
    double warmup_ratio = 0.03;
    int checkpoint_every = 100;

    // evaluation / inference
    int subset = 0;                 // first N scenes only (0 = all)
    bool use_cot = true;            // --no-cot clears this
    std::string judge = "fallback";  // fallback | endpoint
    std::string judge_url;
    bool dump_tokens = false;
    int max_new = 48;
    int64_t scene_seed = 1;  // infer / inspect target scene

    // bookkeeping
    uint64_t seed = 7;
    std::string out;
    std::string data;
    std::string checkpoint;

    nlohmann::json to_json() const {
        return nlohmann::json{{"scenes", scenes},
                              {"split", split},
                              {"preset", preset},
                              {"plora_mode", plora_mode},
                              {"n_ins", n_ins},
                              {"e2e_noise", e2e_noise},
                              {"detach", detach},
                              {"strategy", strategy},
                              {"lambda", lambda},
                              {"steps", steps},
                              {"batch_size", batch_size},
                              {"lr", lr},
                              {"weight_decay", weight_decay},
                              {"warmup_ratio", warmup_ratio},
                              {"checkpoint_every", checkpoint_every},
                              {"subset", subset},
                              {"use_cot", use_cot},
                              {"judge", judge},
                              {"judge_url", judge_url},
                              {"dump_tokens", dump_tokens},
                              {"max_new", max_new},
                              {"scene_seed", scene_seed},
                              {"seed", seed},
                              {"out", out},
                              {"data", data},
                              {"checkpoint", checkpoint}};
    }

    // Overlays values from a config file; unknown keys are rejected so typos
    // surface instead of silently falling back to defaults.
    void apply_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("config file root must be an object");
        for (const auto& [key, val] : j.items()) {
            try {
                if (key == "scenes") scenes = val.get<int>();
                else if (key == "split") split = val.get<double>();
                else if (key == "preset") preset = val.get<std::string>();
                else if (key == "plora_mode") plora_mode = val.get<std::string>();
                else if (key == "n_ins") n_ins = val.get<int>();
                else if (key == "e2e_noise") e2e_noise = val.get<double>();
                else if (key == "detach") detach = val.get<bool>();
                else if (key == "strategy") strategy = val.get<std::string>();
                else if (key == "lambda") lambda = val.get<double>();
                else if (key == "steps") steps = val.get<int>();
                else if (key == "batch_size") batch_size = val.get<int>();
                else if (key == "lr") lr = val.get<double>();
                else if (key == "weight_decay") weight_decay = val.get<double>();
                else if (key == "warmup_ratio") warmup_ratio = val.get<double>();
                else if (key == "checkpoint_every") checkpoint_every = val.get<int>();
                else if (key == "subset") subset = val.get<int>();
                else if (key == "use_cot") use_cot = val.get<bool>();
                else if (key == "judge") judge = val.get<std::string>();
                else if (key == "judge_url") judge_url = val.get<std::string>();
                else if (key == "dump_tokens") dump_tokens = val.get<bool>();
                else if (key == "max_new") max_new = val.get<int>();
                else if (key == "scene_seed") scene_seed = val.get<int64_t>();
                else if (key == "seed") seed = val.get<uint64_t>();
                else if (key == "out") out = val.get<std::string>();
                else if (key == "data") data = val.get<std::string>();
                else if (key == "checkpoint") checkpoint = val.get<std::string>();
                else throw ConfigError("unknown config key: " + key);
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError("config key '" + key + "': " + e.what());
            }
        }
    }

    void validate() const {
        if (scenes < 1) throw ConfigError("scenes must be >= 1");
        if (split < 0.0 || split > 1.0) throw ConfigError("split outside [0,1]");
        if (preset != "desk" && preset != "tiny")
            throw ConfigError("unknown preset: " + preset + " (expected desk or tiny)");
        plora_mode_from_string(plora_mode);  // throws on bad value
        strategy_from_string(strategy);
        if (n_ins < 0) throw ConfigError("n_ins must be >= 1 (or 0 for the preset value)");
        if (e2e_noise < 0) throw ConfigError("e2e_noise must be >= 0");
        if (lambda < 0) throw ConfigError("lambda must be >= 0");
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
        if (subset < 0) throw ConfigError("subset must be >= 0");
        if (judge != "fallback" && judge != "endpoint")
            throw ConfigError("judge must be fallback or endpoint");
        if (judge == "endpoint" && judge_url.empty())
            throw ConfigError("judge endpoint selected but judge_url is empty");
        if (max_new < 1) throw ConfigError("max_new must be >= 1");
    }
};

// Model geometry by preset name: "desk" is the default fully-trainable size,
// "tiny" shrinks every module together for fast smoke runs.
inline ModelConfig preset_model_config(const std::string& preset) {
    if (preset == "desk") return ModelConfig::desk();
    if (preset == "tiny") {
        ModelConfig c = ModelConfig::desk();
        c.enc.n_q = 2;
        c.enc.d = 16;
        c.enc.blocks = 2;
        c.enc.heads = 2;
        c.enc.d_ff = 24;
        c.enc.tokens_per_cam = 4;
        c.dec.layers = 1;
        c.dec.d = 16;
        c.dec.heads = 2;
        c.dec.d_ff = 24;
        c.dec.max_text_len = 48;
        c.e2e.n_ins = 2;
        c.e2e.d = 16;
        c.e2e.heads = 2;
        c.plora.rank = 2;
        c.gen.grid_p = 2;
        c.gen.feat_dim = 16;
        return c;
    }
    throw ConfigError("unknown preset: " + preset);
}

inline ModelConfig model_config_from(const RunConfig& rc) {
    ModelConfig mc = preset_model_config(rc.preset);
    mc.plora.mode = plora_mode_from_string(rc.plora_mode);
    if (rc.n_ins > 0) mc.e2e.n_ins = rc.n_ins;
    mc.e2e_noise = rc.e2e_noise;
    mc.validate();
    return mc;
}

inline TrainConfig train_config_from(const RunConfig& rc) {
    TrainConfig tc;
    tc.strategy = strategy_from_string(rc.strategy);
    tc.lambda = rc.lambda;
    tc.lr = rc.lr;
    tc.weight_decay = rc.weight_decay;
    tc.warmup_ratio = rc.warmup_ratio;
    tc.steps = rc.steps;
    tc.batch_size = rc.batch_size;
    tc.seed = rc.seed;
    tc.checkpoint_every = rc.checkpoint_every;
    tc.validate();
    return tc;
}

inline EvalOptions eval_options_from(const RunConfig& rc) {
    EvalOptions opts;
    opts.use_cot = rc.use_cot;
    opts.subset = rc.subset;
    opts.max_new = rc.max_new;
    opts.detached = rc.detach;
    if (rc.judge == "endpoint") opts.judge.url = rc.judge_url;
    return opts;
}

}  // namespace dvlm
