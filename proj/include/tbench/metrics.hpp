#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tbench/model.hpp"
#include "tbench/tensor.hpp"

namespace tbench {

// fraction of predictions that differ from the labels
double success_rate(const std::vector<int>& predictions, const std::vector<int>& labels);

// data range 1.0; returns +infinity for identical inputs
double psnr(const Tensor& x, const Tensor& x_adv);

// Gaussian 11x11 window, sigma 1.5, c1 = 0.01^2, c2 = 0.03^2, averaged over
// valid window positions and channels. Inputs {1,C,H,W}.
double ssim(const Tensor& x, const Tensor& x_adv);

// sRGB (D65) -> Lab
void srgb_to_lab(float r, float g, float b, float lab[3]);
// CIEDE2000 between two Lab pixels, kL = kC = kH = 1
double ciede2000(const float lab1[3], const float lab2[3]);
// image-level score: RMS of per-pixel delta-E values
double delta_e2000(const Tensor& x, const Tensor& x_adv);

// unit channel-normalized cosine distance, spatial mean per layer, summed
double lpips(const Tensor& x, const Tensor& x_adv, const ModelHandle& feature_model,
             const std::vector<std::string>& layers);

// Frechet distance between Gaussians fitted to per-image feature vectors.
// `features` rows are samples. Sets `regularized` when a tiny ridge was
// needed for the covariances.
double fid_from_features(const std::vector<std::vector<double>>& set_a,
                         const std::vector<std::vector<double>>& set_b,
                         bool* regularized = nullptr);
// pooled penultimate features of the model
std::vector<std::vector<double>> pooled_features(const ModelHandle& model, const Tensor& images);
double fid(const Tensor& set_a, const Tensor& set_b, const ModelHandle& feature_model,
           bool* regularized = nullptr);

struct InterpretabilityScores {
    double average_increase = 0.0;  // percent
    double average_drop = 0.0;      // percent
};
InterpretabilityScores ai_ad_from_probabilities(const std::vector<double>& original,
                                                const std::vector<double>& masked);
InterpretabilityScores average_increase_drop(const ModelHandle& model, const Tensor& images,
                                             const Tensor& masked_images,
                                             const std::vector<int>& labels);
// GradCAM soft mask applied multiplicatively
Tensor gradcam_masked_images(const ModelHandle& model, const Tensor& images,
                             const std::vector<int>& labels);

// mean KL divergence of output distributions (natural log). The single-class
// mode uses only the true-class probabilities renormalized against the rest.
double model_kl(const ModelHandle& surrogate, const ModelHandle& target, const Tensor& images,
                const std::vector<int>& labels = {}, bool single_class_mode = false);

// ReLU of gradient-weighted last-stage feature maps, upsampled, min-max
// normalized to [0,1]. Returns {1,1,H,W}.
Tensor gradcam(const ModelHandle& model, const Tensor& image, int class_id);

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace tbench
