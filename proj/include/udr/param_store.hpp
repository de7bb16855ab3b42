#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "udr/rng.hpp"
#include "udr/tensor.hpp"

namespace udr {

// Named parameter registry. Names are dot paths ("encoder.s1.rb1.conv1.w");
// the first segment is the parameter group used for freeze protocols and
// count reports. std::map keeps iteration deterministic, which checkpoint
// writing and freeze audits rely on.
template <class T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> tensor;
        bool trainable = true;
    };

    Tensor<T> add(const std::string& name, Tensor<T> t) {
        if (entries_.count(name)) throw std::invalid_argument("param exists: " + name);
        t.set_requires_grad(true);
        entries_.emplace(name, Entry{t, true});
        return t;
    }

    // Conv kernels draw uniform from ±sqrt(1/fan_in), fan_in = Cin*kh*kw.
    Tensor<T> conv_weight(const std::string& name, long cout, long cin, long kh, long kw, Rng& rng) {
        const double bound = std::sqrt(1.0 / static_cast<double>(cin * kh * kw));
        return add(name, Tensor<T>::rand_uniform({cout, cin, kh, kw}, rng, static_cast<T>(-bound),
                                                 static_cast<T>(bound)));
    }

    Tensor<T> linear_weight(const std::string& name, long out, long in, Rng& rng) {
        const double bound = std::sqrt(1.0 / static_cast<double>(in));
        return add(name, Tensor<T>::rand_uniform({out, in}, rng, static_cast<T>(-bound),
                                                 static_cast<T>(bound)));
    }

    Tensor<T> bias(const std::string& name, long n) { return add(name, Tensor<T>::zeros({n})); }

    Tensor<T> zeros(const std::string& name, Shape shape) {
        return add(name, Tensor<T>::zeros(std::move(shape)));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
        return it->second.tensor;
    }

    bool trainable(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
        return it->second.trainable;
    }

    void set_trainable(const std::string& name, bool v) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
        it->second.trainable = v;
        it->second.tensor.set_requires_grad(v);
    }

    // Freeze helpers used by the stage-2 and task-extension protocols.
    void freeze_prefix(const std::string& prefix) {
        for (auto& [name, e] : entries_)
            if (name.rfind(prefix, 0) == 0) {
                e.trainable = false;
                e.tensor.set_requires_grad(false);
            }
    }

    void freeze_all_except_prefix(const std::string& prefix) {
        for (auto& [name, e] : entries_) {
            const bool keep = name.rfind(prefix, 0) == 0;
            e.trainable = keep;
            e.tensor.set_requires_grad(keep);
        }
    }

    void unfreeze_all() {
        for (auto& [name, e] : entries_) {
            e.trainable = true;
            e.tensor.set_requires_grad(true);
        }
    }

    void zero_grad_all() {
        for (auto& [name, e] : entries_) e.tensor.zero_grad();
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, e] : entries_) out.push_back(name);
        return out;
    }

    std::size_t size() const { return entries_.size(); }

    // Scalar counts per leading group segment ("encoder", "pfm", ...).
    std::map<std::string, long> count_by_group() const {
        std::map<std::string, long> out;
        for (const auto& [name, e] : entries_) {
            const auto dot = name.find('.');
            out[name.substr(0, dot)] += e.tensor.numel();
        }
        return out;
    }

    template <class Fn>
    void for_each(Fn&& fn) {
        for (auto& [name, e] : entries_) fn(name, e);
    }
    template <class Fn>
    void for_each(Fn&& fn) const {
        for (const auto& [name, e] : entries_) fn(name, e);
    }

private:
    std::map<std::string, Entry> entries_;
};

// Decoupled-weight-decay Adam. Moment slots are lazily created per
// parameter; frozen parameters are skipped entirely (their moments, if
// any, stay untouched).
template <class T>
class AdamW {
public:
    T lr = static_cast<T>(1e-4);
    T beta1 = static_cast<T>(0.9);
    T beta2 = static_cast<T>(0.999);
    T eps = static_cast<T>(1e-8);
    T weight_decay = static_cast<T>(5e-4);

    explicit AdamW(T lr_ = static_cast<T>(1e-4), T wd = static_cast<T>(5e-4))
        : lr(lr_), weight_decay(wd) {}

    void step(ParamStore<T>& ps) {
        ++step_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step_));
        ps.for_each([&](const std::string& name, typename ParamStore<T>::Entry& e) {
            if (!e.trainable) return;
            if (!e.tensor.has_grad())
                throw std::runtime_error("adamw: trainable param has no gradient: " + name);
            auto& slot = slots_[name];
            const auto g = e.tensor.grad();
            auto p = e.tensor.data();
            if (slot.m.empty()) {
                slot.m.assign(g.size(), T(0));
                slot.v.assign(g.size(), T(0));
            }
            for (std::size_t i = 0; i < g.size(); ++i) {
                slot.m[i] = beta1 * slot.m[i] + (T(1) - beta1) * g[i];
                slot.v[i] = beta2 * slot.v[i] + (T(1) - beta2) * g[i] * g[i];
                const T mhat = static_cast<T>(slot.m[i] / bc1);
                const T vhat = static_cast<T>(slot.v[i] / bc2);
                p[i] -= lr * (mhat / (std::sqrt(vhat) + eps)) + lr * weight_decay * p[i];
            }
        });
    }

    long step_count() const { return step_; }

private:
    struct Slot {
        std::vector<T> m, v;
    };
    std::map<std::string, Slot> slots_;
    long step_ = 0;
};

} // namespace udr
