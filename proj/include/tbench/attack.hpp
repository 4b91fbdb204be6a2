#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tbench/model.hpp"
#include "tbench/tensor.hpp"

namespace tbench {

enum class Stabilization { None, MI, NI, PI, Window };

struct AttackSpec {
    std::string variant = "PGD";
    float epsilon = 16.f / 255.f;
    float step_size = 0.f;  // must be set > 0 (default_step_size gives the convention)
    int iterations = 50;
    Stabilization stabilization = Stabilization::None;
    int window_k = 1;             // look-ahead window for Stabilization::Window
    float mu = 1.f;               // momentum decay
    float lookahead_alpha = 0.f;  // 0 = use step_size
    bool targeted = false;
    int target_class = -1;
    uint64_t seed = 0;
    bool record_curve = false;
};

inline float default_step_size(float epsilon, int iterations) {
    return std::max(epsilon / iterations * 2.f, 1.f / 255.f);
}

struct AdversarialBatch {
    Tensor originals;
    Tensor adversarials;  // 8-bit quantized
    std::vector<int> labels;
    std::string attack_id;
    float epsilon = 0.f;
    uint64_t seed = 0;
    std::vector<float> per_iteration_success;  // empty unless requested
};

// Gradient of the objective the attack ascends, for one image {1,C,H,W}.
// `image_index` selects the per-image RNG stream, `iteration` the draw.
using GradProvider =
    std::function<Tensor(const Tensor& x, size_t image_index, int iteration)>;

// Momentum / look-ahead state for one image.
struct StabState {
    Tensor momentum;                  // g_{i-1}
    std::vector<Tensor> raw_history;  // raw gradients r_j, oldest first
};

// One update of Eq.-style stabilized gradients. `raw_grad_at` evaluates the
// plain gradient at an arbitrary point. MI accumulates; NI/PI/window(k)
// first look ahead along the (truncated) accumulation of past raw gradients.
Tensor stabilized_gradient(Stabilization method, int window_k, float mu, StabState& state,
                           const std::function<Tensor(const Tensor&)>& raw_grad_at,
                           const Tensor& x, float alpha);

Tensor project(const Tensor& candidate, const Tensor& original, float epsilon);

AdversarialBatch run_iterative_attack(const AttackSpec& spec, const ModelHandle& model,
                                      const Tensor& images, const std::vector<int>& labels,
                                      const GradProvider& grad_provider,
                                      const ModelHandle* curve_probe = nullptr, int workers = 1);

// CE provider for the plain PGD family (targeted mode flips the sign and
// uses the attack's target class).
GradProvider make_ce_grad_provider(const ModelHandle& model, const std::vector<int>& labels,
                                   const AttackSpec& spec);

void save_adversarial_batch(const std::string& dir, const AdversarialBatch& batch);
AdversarialBatch load_adversarial_batch(const std::string& dir);

}  // namespace tbench
