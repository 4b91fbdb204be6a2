#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tbench/dataset.hpp"
#include "tbench/model.hpp"
#include "tbench/rng.hpp"
#include "tbench/tensor.hpp"

namespace tbench {

struct TransformSpec {
    enum class Kind { Identity, DI, TI, SI, VT, Admix };
    Kind kind = Kind::Identity;
    // DI: random resize into [di_lo, di_hi], random pad, resize back
    float di_lo = 1.f, di_hi = 1.1f;
    float di_prob = 0.7f;
    // TI: integer translations in [-ti_range, ti_range]
    int ti_range = 2;
    // SI: pixel-value scale factor; uniform in [si_lo, si_hi] or the 1/2^i ladder
    float si_lo = 0.1f, si_hi = 1.f;
    bool si_ladder = false;
    // VT: additive uniform noise in [-vt_scale*eps, vt_scale*eps]
    float vt_scale = 1.5f;
    float epsilon = 16.f / 255.f;  // VT noise reference
    // Admix
    float admix_eta = 0.2f;
    int copies = 5;  // m
};

TransformSpec::Kind transform_kind_from_string(const std::string& s);

// One concrete draw of a transform, with enough record to apply the exact
// adjoint to gradients.
struct TransformDraw {
    TransformSpec::Kind kind = TransformSpec::Kind::Identity;
    bool applied = false;  // DI only fires with probability p
    float di_scale = 1.f;
    int di_top = 0, di_left = 0, di_canvas = 0, di_resized = 0;
    int ti_dx = 0, ti_dy = 0;
    float si_factor = 1.f;
    Tensor clip_mask;  // VT / Admix: 1 where the output was not clipped
    Tensor vt_noise;
    int admix_donor = -1;
};

// Applies a fresh draw of the transform. Admix needs a donor pool with
// labels different from `label`; passing none is a config error.
Tensor augment(const TransformSpec& spec, const Tensor& image, Rng& rng,
               TransformDraw* draw = nullptr, const Dataset* donor_pool = nullptr, int label = -1,
               int copy_index = 0);

// Exact vector-Jacobian product of the recorded draw.
Tensor augment_vjp(const TransformDraw& draw, const Tensor& grad_out);

// (1/m) * sum_j grad of CE(T_j(x), y) mapped back through T_j. Accumulates
// in double so the identity transform reproduces the plain gradient bitwise.
Tensor averaged_gradient(const TransformSpec& spec, const ModelHandle& model, const Tensor& x,
                         int label, Rng& rng, const Dataset* donor_pool = nullptr);

// Mean drop of the clean top-1 logit under the transform (positive =
// transformation reduces the top-1 logit).
double input_diversity(const TransformSpec& spec, const ModelHandle& model, const Dataset& ds,
                       int repeats, uint64_t seed, const Dataset* donor_pool = nullptr);

}  // namespace tbench
