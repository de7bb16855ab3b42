#pragma once

#include <stdexcept>
#include <string>

#include "udr/filters.hpp"
#include "udr/tasks.hpp"
#include "udr/tensor.hpp"

// Training losses. Every function returns a scalar tensor wired into the
// autodiff graph. Frequency bands split an image into a heavy gaussian
// blur (low) and its complement (high), so low + high reconstructs the
// input exactly.

namespace udr {

enum class Band { low, high };

inline constexpr double kBandSigma = 2.0;

struct LossWeights {
    double beta1 = 1.0; // low-band weight (deshadow, illuminate)
    double beta2 = 0.1; // high-band weight (deblur, binarize, hw_remove)
};

template <class T>
Tensor<T> band_filter(Tensor<T> x, Band band) {
    auto low = gaussian_blur(x, kBandSigma);
    return band == Band::low ? low : sub(x, low);
}

template <class T>
Tensor<T> l1_loss(Tensor<T> pred, Tensor<T> gt) {
    if (pred.shape() != gt.shape())
        throw std::invalid_argument("l1_loss: pred " + shape_str(pred.shape()) + " vs gt " +
                                    shape_str(gt.shape()));
    return mean(abs_val(sub(pred, gt)));
}

template <class T>
Tensor<T> freq_loss(Tensor<T> pred, Tensor<T> gt, Band band) {
    if (pred.shape() != gt.shape())
        throw std::invalid_argument("freq_loss: pred " + shape_str(pred.shape()) + " vs gt " +
                                    shape_str(gt.shape()));
    return l1_loss(band_filter(pred, band), band_filter(gt, band));
}

// L1 plus the task's band-aware term: low-band tasks add beta1 * L_low,
// high-band tasks add beta2 * L_high.
template <class T>
Tensor<T> task_loss(Tensor<T> pred, Tensor<T> gt, const std::string& task,
                    const LossWeights& w = {}) {
    const bool high = task_is_high_band(task); // throws for unregistered tasks
    const Band band = high ? Band::high : Band::low;
    const double beta = high ? w.beta2 : w.beta1;
    return add(l1_loss(pred, gt), scale(freq_loss(pred, gt, band), static_cast<T>(beta)));
}

template <class T>
Tensor<T> cpb_loss(Tensor<T> bm, Tensor<T> bm_gt) {
    if (bm.shape() != bm_gt.shape())
        throw std::invalid_argument("cpb_loss: bm " + shape_str(bm.shape()) + " vs bm_gt " +
                                    shape_str(bm_gt.shape()));
    return mean(abs_val(sub(bm, bm_gt)));
}

} // namespace udr
