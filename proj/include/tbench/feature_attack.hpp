#pragma once

#include <string>
#include <vector>

#include "tbench/attack.hpp"
#include "tbench/dataset.hpp"
#include "tbench/model.hpp"
#include "tbench/rng.hpp"

namespace tbench {

struct FeatureLossSpec {
    enum class Variant { TAP, AA, ILA, FIA, NAA };
    Variant variant = Variant::FIA;
    std::string layer = "conv3_x";
    bool tap_all_layers = true;  // TAP disrupts every stage
    float tap_lambda = 0.005f;   // CE term weight
    float tap_eta = 0.01f;       // smoothness term weight
    float tap_alpha = 0.5f;      // smoothness exponent
    int aa_num_targets = 20;
    int aa_num_classes = 4;
    int fia_n = 30;
    float fia_pdrop = 0.3f;
    int naa_n = 30;
    float naa_gamma = 1.f;
};

// Gradient (ascent direction) of the plain L2 feature distance
// ||f_l(x') - f_l(ref)||^2. `descend` flips the sign (AA drives features
// towards a target image).
Tensor feature_distance_gradient(const ModelHandle& model, const Tensor& x_adv,
                                 const Tensor& x_ref, const std::string& layer,
                                 bool descend = false);

// TAP objective gradient: feature term (all stages or one), plus
// tap_lambda * CE and a smoothness penalty on the perturbation with exponent
// tap_alpha. With lambda = eta = 0 this reduces to the plain L2 gradient.
Tensor tap_gradient(const FeatureLossSpec& spec, const ModelHandle& model, const Tensor& x_adv,
                    const Tensor& x_clean, int label);

// Mean over N random pixel-drop masks of d(logit_y)/d(feature map) at the
// masked clean image.
Tensor fia_feature_importance(const ModelHandle& model, const Tensor& x, int label,
                              const std::string& layer, int n, float p_drop, Rng& rng);

// Midpoint-Riemann path attribution from a black baseline to x:
// (f_l(x) - f_l(0)) .* mean path feature-gradient of logit_y.
struct NaaAttribution {
    Tensor attribution;   // per-feature attribution at x
    Tensor path_gradient; // mean d(logit_y)/d(f_l) along the path (fixed by NAA's loss)
    Tensor baseline_features;
};
NaaAttribution naa_attribution(const ModelHandle& model, const Tensor& x, int label,
                               const std::string& layer, int n);

// AA target feature sets: aa_num_targets images drawn from aa_num_classes
// other classes; returns their stacked mid-layer features.
Tensor aa_target_features(const FeatureLossSpec& spec, const ModelHandle& model,
                          const Dataset& pool, int source_label, Rng& rng);

// Grad providers used by the attack engine.
GradProvider make_feature_grad_provider(const FeatureLossSpec& spec, const ModelHandle& model,
                                        const Tensor& clean_images, const std::vector<int>& labels,
                                        const Dataset* aa_pool, uint64_t seed, int workers = 1);

// ILA: a CE warm-up stage, then T2 iterations maximizing the projection of
// the feature displacement onto the stage-1 direction.
AdversarialBatch ila_two_stage(const AttackSpec& stage1, const ModelHandle& model,
                               const Tensor& images, const std::vector<int>& labels,
                               const std::string& layer, int t2, int workers = 1);

struct LayerSweepRow {
    std::string layer;
    double success;
};
std::vector<LayerSweepRow> layer_sweep(const FeatureLossSpec& variant_spec, AttackSpec attack,
                                       const ModelHandle& surrogate, const ModelHandle& target,
                                       const Dataset& ds, const std::vector<std::string>& layers,
                                       int workers = 1);

}  // namespace tbench
