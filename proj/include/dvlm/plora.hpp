#pragma once

#include <string>
#include <vector>

#include "dvlm/attention.hpp"
#include "dvlm/errors.hpp"
#include "dvlm/tasks.hpp"

namespace dvlm {

enum class PLoRAMode { task, question, hierarchical };

inline const char* to_string(PLoRAMode m) {
    switch (m) {
        case PLoRAMode::task: return "task";
        case PLoRAMode::question: return "question";
        case PLoRAMode::hierarchical: return "hierarchical";
    }
    return "?";
}

inline PLoRAMode plora_mode_from_string(const std::string& s) {
    if (s == "task") return PLoRAMode::task;
    if (s == "question") return PLoRAMode::question;
    if (s == "hierarchical") return PLoRAMode::hierarchical;
    throw RoutingError("unknown P-LoRA mode: " + s);
}

struct GroupVisibility {
    bool det = false;
    bool mot = false;
    bool ego = false;
};

struct BranchRoute {
    Task task = Task::perception;
    QType qtype = QType::open;
    std::string branch_key;
    GroupVisibility visible;
};

// Behavior questions ride the planning branch (they sit at the planning stage
// of the QA chain); this also keeps the task-mode branch set at three.
inline Task branch_task(Task t) { return t == Task::behavior ? Task::planning : t; }

inline std::vector<std::string> branch_keys(PLoRAMode mode) {
    std::vector<std::string> tasks = {"perception", "prediction", "planning"};
    std::vector<std::string> qtypes = {"multiple_choice", "yes_no", "open"};
    switch (mode) {
        case PLoRAMode::task: return tasks;
        case PLoRAMode::question: return qtypes;
        case PLoRAMode::hierarchical: {
            std::vector<std::string> out;
            for (const auto& t : tasks)
                for (const auto& q : qtypes) out.push_back(t + "." + q);
            return out;
        }
    }
    return {};
}

// Select the adapter branch and which e2e token groups the decoder may see.
inline BranchRoute route(Task task, QType qtype, PLoRAMode mode) {
    BranchRoute r;
    r.task = task;
    r.qtype = qtype;
    std::string t = to_string(branch_task(task));
    switch (mode) {
        case PLoRAMode::task: r.branch_key = t; break;
        case PLoRAMode::question: r.branch_key = to_string(qtype); break;
        case PLoRAMode::hierarchical: r.branch_key = t + "." + to_string(qtype); break;
    }
    switch (task) {
        case Task::perception: r.visible = {true, false, false}; break;
        case Task::prediction: r.visible = {true, true, false}; break;
        case Task::planning:
        case Task::behavior: r.visible = {true, true, true}; break;
    }
    return r;
}

struct PLoRAConfig {
    PLoRAMode mode = PLoRAMode::task;
    int rank = 8;
    double alpha = 16.0;
    double init_stddev = 0.01;

    double scale() const { return alpha / rank; }
};

// Names and hooks for one adapter bank: per-branch low-rank pairs on every
// feed-forward site, one shared pair on every attention site's query and value
// projections. The bank owns naming only; parameters live in the store.
template <class S>
class PLoRABank {
  public:
    PLoRABank() = default;
    explicit PLoRABank(PLoRAConfig cfg) : cfg_(cfg), keys_(branch_keys(cfg.mode)) {}

    const PLoRAConfig& config() const { return cfg_; }
    const std::vector<std::string>& keys() const { return keys_; }

    void add_ffn_site(ParamStore<S>& ps, const std::string& site, int d, int d_ff) {
        ffn_sites_.push_back(site);
        for (const auto& key : keys_) {
            register_lora(ps, site + ".plora." + key + ".up", d, d_ff, cfg_.rank,
                          cfg_.init_stddev);
            register_lora(ps, site + ".plora." + key + ".down", d_ff, d, cfg_.rank,
                          cfg_.init_stddev);
        }
    }

    void add_attn_site(ParamStore<S>& ps, const std::string& site, int d) {
        attn_sites_.push_back(site);
        register_lora(ps, site + ".lshared.q", d, d, cfg_.rank, cfg_.init_stddev);
        register_lora(ps, site + ".lshared.v", d, d, cfg_.rank, cfg_.init_stddev);
    }

    LoraHook ffn_up_hook(const std::string& site, const BranchRoute& r) const {
        return lora_hook(site + ".plora." + check_key(r) + ".up", cfg_.scale());
    }
    LoraHook ffn_down_hook(const std::string& site, const BranchRoute& r) const {
        return lora_hook(site + ".plora." + check_key(r) + ".down", cfg_.scale());
    }
    LoraHook attn_q_hook(const std::string& site) const {
        return lora_hook(site + ".lshared.q", cfg_.scale());
    }
    LoraHook attn_v_hook(const std::string& site) const {
        return lora_hook(site + ".lshared.v", cfg_.scale());
    }

    // Adapter parameter names grouped for isolation tests: the ones a given
    // route trains, and the routed-branch complement that must stay untouched.
    std::vector<std::string> routed_param_names(const BranchRoute& r) const {
        std::vector<std::string> out;
        for (const auto& site : ffn_sites_)
            for (const char* proj : {".up", ".down"})
                for (const char* mat : {".A", ".B"})
                    out.push_back(site + ".plora." + r.branch_key + proj + mat);
        return out;
    }

    std::vector<std::string> non_routed_param_names(const BranchRoute& r) const {
        std::vector<std::string> out;
        for (const auto& site : ffn_sites_)
            for (const auto& key : keys_) {
                if (key == r.branch_key) continue;
                for (const char* proj : {".up", ".down"})
                    for (const char* mat : {".A", ".B"})
                        out.push_back(site + ".plora." + key + proj + mat);
            }
        return out;
    }

    std::vector<std::string> shared_param_names() const {
        std::vector<std::string> out;
        for (const auto& site : attn_sites_)
            for (const char* proj : {".q", ".v"})
                for (const char* mat : {".A", ".B"})
                    out.push_back(site + ".lshared" + std::string(proj) + mat);
        return out;
    }

  private:
    const std::string& check_key(const BranchRoute& r) const {
        for (const auto& k : keys_)
            if (k == r.branch_key) return r.branch_key;
        throw RoutingError("branch key '" + r.branch_key + "' not in bank (mode " +
                           to_string(cfg_.mode) + ")");
    }

    PLoRAConfig cfg_;
    std::vector<std::string> keys_;
    std::vector<std::string> ffn_sites_;
    std::vector<std::string> attn_sites_;
};

}  // namespace dvlm
