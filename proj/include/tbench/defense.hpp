#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tbench/attack.hpp"
#include "tbench/dataset.hpp"
#include "tbench/model.hpp"
#include "tbench/rng.hpp"

namespace tbench {

// Bit-depth reduction: each channel quantized to 2^depth levels.
Tensor bdr(const Tensor& image, int depth);

// Single-level 2D Haar transform with soft-thresholding of the detail bands.
Tensor haar_denoise(const Tensor& image, float sigma);

// Randomly replaces `count` pixels (weighted towards non-salient ones) with
// neighbors from a k x k window, then wavelet-denoises. A null saliency map
// means uniform weighting.
Tensor pixel_deflection(const Tensor& image, int count, int window, float sigma, Rng& rng,
                        const Tensor* saliency = nullptr);

// Random resize into [lo, hi] * H, random zero padding to ceil(hi * H), then
// resize to the model input size.
Tensor resize_pad(const Tensor& image, float lo, float hi, Rng& rng, int out_size);

// Image-to-image residual denoiser.
struct Purifier {
    enum class Recipe { HGD, NRP, DiffPure };
    Recipe recipe = Recipe::NRP;
    std::vector<std::unique_ptr<Layer>> net;
    // DiffPure-style noise schedule: sigma(t) = sigma_max * t / steps
    float sigma_max = 0.5f;
    int schedule_steps = 200;
    int inference_t = 30;
    uint64_t seed = 0;

    Purifier() = default;
    Purifier(Purifier&&) = default;
    Purifier& operator=(Purifier&&) = default;

    Tensor denoise(const Tensor& x) const;                  // x + net(x)
    Tensor purify(const Tensor& x, uint64_t call_seed) const;  // adds forward noise for DiffPure
    std::vector<Tensor*> params();
};

struct PurifierTrainConfig {
    Purifier::Recipe recipe = Purifier::Recipe::NRP;
    int epochs = 6;
    float lr = 1e-3f;
    int batch_size = 32;
    uint64_t seed = 11;
    std::string feature_layer = "conv3_x";  // HGD / NRP feature loss
    float nrp_feature_weight = 1.f;
    float sigma_max = 0.5f;
    int schedule_steps = 200;
    int inference_t = 30;
    float psnr_gain_floor = 0.f;  // on held-out adversarials; 0 = skip
};

// HGD / NRP train on (adversarial, clean) pairs; DiffPure trains on clean
// images with Gaussian corruption only.
Purifier train_purifier(const PurifierTrainConfig& cfg, const Dataset& clean,
                        const AdversarialBatch* attack_pool, const ModelHandle& classifier);

void save_purifier(const Purifier& p, const std::string& dir);
Purifier load_purifier(const std::string& dir);

struct DefenseSpec {
    enum class Kind { None, BDR, PD, RP, Purifier, RobustModel };
    Kind kind = Kind::None;
    std::string id = "none";
    int bdr_depth = 2;
    int pd_count = 100;  // mandatory for PD runs
    int pd_window = 5;
    float pd_sigma = 0.04f;
    bool pd_use_saliency = true;
    float rp_lo = 1.f, rp_hi = 1.1f;
    const tbench::Purifier* purifier = nullptr;
    ModelHandle robust_model;
    uint64_t seed = 0;
};

std::vector<int> defend_then_classify(const DefenseSpec& defense, const AdversarialBatch& batch,
                                      const ModelHandle& target, int workers = 1);

// Applies only the input transform of the defense to one image (robust-model
// and none kinds return the image unchanged).
Tensor apply_defense_transform(const DefenseSpec& defense, const Tensor& image,
                               const ModelHandle& target, size_t image_index);

}  // namespace tbench
