#pragma once

#include <string>
#include <vector>

#include "tbench/dataset.hpp"
#include "tbench/model.hpp"

namespace tbench {

struct TrainRecipe {
    enum class Kind { Standard, PgdAdversarial, Distilled };
    enum class Norm { Linf, L2 };

    Kind kind = Kind::Standard;
    std::string architecture_id = "resnet_small";
    int epochs = 10;
    float lr = 0.05f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    int batch_size = 32;
    std::vector<int> lr_drop_epochs;
    float lr_drop_factor = 0.1f;
    uint64_t seed = 1;

    // pgd_adversarial
    Norm at_norm = Norm::Linf;
    float at_eps = 8.f / 255.f;
    int at_steps = 7;
    float at_step_size = 2.f / 255.f;

    // distilled
    ModelHandle teacher;
    bool cutmix = false;
    float distill_temperature = 2.f;

    // floors checked on the held-out split after training (0 = skip)
    float accuracy_floor = 0.f;
    float robust_floor = 0.f;
};

// Trains from scratch; throws TrainingError (with the accuracy curve) if a
// configured floor is not met. Bitwise reproducible for a fixed
// (recipe, seed, dataset) in single-worker mode.
ModelHandle train_reference_model(const TrainRecipe& recipe, const Dataset& train,
                                  const Dataset& heldout);

float accuracy(const ModelHandle& model, const Dataset& ds, int batch_size = 64);

// The framework's own PGD, as used for adversarial training and robustness
// floors. Linf uses sign steps, L2 normalized-gradient steps.
Tensor pgd_perturb(const ModelHandle& model, const Tensor& batch, const std::vector<int>& labels,
                   TrainRecipe::Norm norm, float eps, int steps, float step_size);
float robust_accuracy_pgd(const ModelHandle& model, const Dataset& ds, TrainRecipe::Norm norm,
                          float eps, int steps, float step_size, int batch_size = 64);

}  // namespace tbench
