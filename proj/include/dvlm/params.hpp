#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dvlm/errors.hpp"
#include "dvlm/mat.hpp"
#include "dvlm/rng.hpp"

namespace dvlm {

enum class Init { Zero, Gaussian, Ones };

// One named trainable tensor plus its gradient and optimizer state.
//  - trainable=false freezes it (no gradient flows, optimizer skips it).
//  - decay=true opts it into weight decay; adapters, biases, gains, gates and
//    query tables leave it off so untouched branches stay bitwise identical.
template <class S>
struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;
    Mat<S> m;  // first-moment accumulator
    Mat<S> v;  // second-moment accumulator
    bool trainable = true;
    bool decay = false;

    int64_t count() const { return static_cast<int64_t>(value.a.size()); }
};

// Registry of parameters in insertion order. Initialization is a pure
// function of (store seed, parameter name), so construction order elsewhere
// never changes the weights a given name receives.
template <class S>
class ParamStore {
  public:
    explicit ParamStore(uint64_t seed = 0x5eedULL) : seed_(seed) {}

    Param<S>& add(const std::string& name, int rows, int cols, Init init = Init::Gaussian,
                  double stddev = 0.02, bool trainable = true, bool decay = false) {
        if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
        auto p = std::make_unique<Param<S>>();
        p->name = name;
        p->trainable = trainable;
        p->decay = decay;
        switch (init) {
            case Init::Zero:
                p->value = Mat<S>::zeros(rows, cols);
                break;
            case Init::Ones:
                p->value = Mat<S>::filled(rows, cols, S(1));
                break;
            case Init::Gaussian: {
                Rng rng(hash_combine(seed_, fnv1a(name.data(), name.size())));
                p->value = Mat<S>::gaussian(rows, cols, stddev, rng);
                break;
            }
        }
        p->grad = Mat<S>::zeros(rows, cols);
        p->m = Mat<S>::zeros(rows, cols);
        p->v = Mat<S>::zeros(rows, cols);
        index_[name] = order_.size();
        order_.push_back(std::move(p));
        return *order_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Param<S>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return *order_[it->second];
    }

    const Param<S>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return *order_[it->second];
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(order_.size());
        for (const auto& p : order_) out.push_back(p->name);
        return out;
    }

    size_t size() const { return order_.size(); }
    Param<S>& at(size_t i) { return *order_[i]; }
    const Param<S>& at(size_t i) const { return *order_[i]; }

    int64_t total_values() const {
        int64_t n = 0;
        for (const auto& p : order_) n += p->count();
        return n;
    }

    int64_t trainable_values() const {
        int64_t n = 0;
        for (const auto& p : order_)
            if (p->trainable) n += p->count();
        return n;
    }

    void zero_grads() {
        for (auto& p : order_) p->grad.fill(S(0));
    }

    uint64_t seed() const { return seed_; }

  private:
    uint64_t seed_;
    std::vector<std::unique_ptr<Param<S>>> order_;
    std::map<std::string, size_t> index_;
};

}  // namespace dvlm
