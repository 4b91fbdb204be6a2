#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tbench/dataset.hpp"
#include "tbench/model.hpp"
#include "tbench/rng.hpp"
#include "tbench/tensor.hpp"
#include "tbench/train.hpp"

namespace tbench::test {

// Central finite differences on sampled coordinates, independent of the
// backward pass it checks. Coordinates are drawn uniformly among positions
// whose analytic gradient is non-negligible (|g| >= 5% of the max), since a
// relative-error criterion is meaningless at near-zero slope; for each
// coordinate the step size giving the best agreement among a small ladder is
// used to control float32 truncation/noise trade-off.
struct FdCheck {
    double max_rel_err = 0.0;
    int checked = 0;
};

inline FdCheck finite_diff_check(const std::function<double(const Tensor&)>& loss_fn,
                                 const Tensor& x, const Tensor& grad, int n_coords,
                                 uint64_t seed) {
    FdCheck result;
    float gmax = grad.max_abs();
    if (gmax == 0.f) return result;
    Rng rng(seed);
    std::vector<size_t> coords;
    int guard = 0;
    while (static_cast<int>(coords.size()) < n_coords && guard < 100000) {
        ++guard;
        size_t i = rng.next_u64() % x.size();
        if (std::fabs(grad[i]) >= 0.05f * gmax) coords.push_back(i);
    }
    for (size_t i : coords) {
        double best = 1e300;
        for (double h : {5e-3, 1e-2, 2e-2}) {
            Tensor xp = x, xm = x;
            xp[i] += static_cast<float>(h);
            xm[i] -= static_cast<float>(h);
            double fd = (loss_fn(xp) - loss_fn(xm)) / (2 * h);
            double g = grad[i];
            double err = std::fabs(fd - g) / std::max({std::fabs(fd), std::fabs(g), 1e-12});
            best = std::min(best, err);
        }
        result.max_rel_err = std::max(result.max_rel_err, best);
        ++result.checked;
    }
    return result;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

// Small trained classifier shared across tests (cached per process).
inline const ModelHandle& tiny_trained_model() {
    static ModelHandle model = [] {
        Dataset train = make_synthetic_dataset(300, 10, 32, 900);
        Dataset held = make_synthetic_dataset(80, 10, 32, 901);
        TrainRecipe r;
        r.architecture_id = "resnet_small";
        r.epochs = 4;
        r.seed = 5;
        return train_reference_model(r, train, held);
    }();
    return model;
}

inline const ModelHandle& tiny_untrained_resnet() {
    static ModelHandle model = [] {
        auto def = build_architecture("resnet_small", 10, 32, 77);
        return ModelHandle(std::move(def));
    }();
    return model;
}

inline const ModelHandle& tiny_untrained_convnet() {
    static ModelHandle model = [] {
        auto def = build_architecture("convnet_small", 10, 32, 78);
        return ModelHandle(std::move(def));
    }();
    return model;
}

inline Tensor random_image(int size, uint64_t seed, float lo = 0.2f, float hi = 0.8f) {
    Rng rng(seed);
    Tensor img({1, 3, size, size});
    for (size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform(lo, hi);
    return quantize8(img);
}

}  // namespace tbench::test
