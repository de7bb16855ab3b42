#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "udr/tensor.hpp"

// Registry of restoration tasks. Indices are load-bearing: they select the
// one-hot slot fed to the fusion module and must stay stable across
// checkpoints. Slots beyond the registered tasks stay spare so adding a
// task never resizes a backbone tensor.

namespace udr {

inline constexpr long kTaskSlots = 8;

struct TaskDef {
    std::string name;
    bool high_band; // which frequency-aware loss term the task trains with
};

inline const std::vector<TaskDef>& task_registry() {
    static const std::vector<TaskDef> defs = {
        {"deblur", true},     {"deshadow", false},  {"illuminate", false},
        {"binarize", true},   {"hw_remove", true},  {"denoise", true},
    };
    return defs;
}

inline long task_index(const std::string& name) {
    const auto& defs = task_registry();
    for (std::size_t i = 0; i < defs.size(); ++i)
        if (defs[i].name == name) return static_cast<long>(i);
    throw std::invalid_argument("task_index: unregistered task '" + name + "'");
}

inline bool task_is_high_band(const std::string& name) {
    return task_registry()[static_cast<std::size_t>(task_index(name))].high_band;
}

template <class T>
Tensor<T> task_one_hot(const std::string& name, long slots = kTaskSlots) {
    const long idx = task_index(name);
    if (idx >= slots)
        throw std::invalid_argument("task_one_hot: task '" + name + "' needs slot " +
                                    std::to_string(idx) + " but only " + std::to_string(slots) +
                                    " slots exist");
    Tensor<T> v = Tensor<T>::zeros({slots});
    v.data()[idx] = T(1);
    return v;
}

} // namespace udr
