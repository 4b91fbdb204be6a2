#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tbench/attack.hpp"
#include "tbench/dataset.hpp"
#include "tbench/model.hpp"
#include "tbench/rng.hpp"

namespace tbench {

enum class GenLoss { GAP_CE, CDA_RelativisticCE, GAPF_Feature, BIA_FeatureRN, TTP_Distribution };

GenLoss gen_loss_from_string(const std::string& s);
std::string gen_loss_to_string(GenLoss l);

struct GenTrainConfig {
    GenLoss loss = GenLoss::GAP_CE;
    float eps_train = 10.f / 255.f;
    int epochs = 8;
    float lr = 1e-3f;
    int batch_size = 32;
    uint64_t seed = 7;
    std::string feature_layer = "conv3_x";  // GAPF / BIA
    int ttp_target_class = -1;              // TTP only
    bool ttp_smooth_projection = true;
    float nrp_feature_weight = 1.f;
};

// Encoder-decoder perturbation generator (3 downsample blocks, 3 residual
// blocks, 3 upsample blocks). Output is an unbounded perturbation map.
class GeneratorNet {
public:
    GeneratorNet() = default;
    explicit GeneratorNet(uint64_t init_seed);

    Tensor raw_perturbation(const Tensor& x) const;  // single forward pass
    Tensor forward(const Tensor& x, std::vector<LayerCtx>* ctxs) const;
    Tensor backward(const Tensor& gy, const std::vector<LayerCtx>& ctxs, GradStore& gs) const;

    std::vector<Tensor*> params();
    std::vector<const Tensor*> params() const;
    uint64_t param_hash() const;

    GenTrainConfig config;  // training metadata
    std::vector<std::unique_ptr<Layer>> layers;
};

// Value and gradient (w.r.t. the adversarial image) of the minimized
// generator objective for one batch.
struct GenLossEval {
    double value = 0.0;
    Tensor grad_adv;
};
GenLossEval gen_loss_eval(const GenTrainConfig& cfg, const ModelHandle& discriminator,
                          const Tensor& clean, const std::vector<int>& labels, const Tensor& adv,
                          const Tensor* ttp_target_features, Rng* rn_rng);

// Trains the generator against a frozen discriminator. Asserts the
// discriminator parameters did not move.
GeneratorNet train_generator(const GenTrainConfig& cfg, const Dataset& train,
                             const ModelHandle& discriminator);

AdversarialBatch generate(const GeneratorNet& gen, const Tensor& images,
                          const std::vector<int>& labels, float eps_test);

struct EpsSweepResult {
    std::vector<float> eps_train_values;
    std::vector<float> eps_test_values;
    std::vector<std::vector<double>> success;  // [train][test]
};
EpsSweepResult eps_sweep(const GenTrainConfig& base_cfg, const Dataset& train_set,
                         const Dataset& eval_set, const ModelHandle& discriminator,
                         const ModelHandle& target, const std::vector<float>& eps_train_list,
                         const std::vector<float>& eps_test_list, const std::string& cache_dir);

// Mean pairwise cosine similarity of perturbations (image-agnosticism
// diagnostic; reported, not asserted).
double perturbation_cosine_similarity(const GeneratorNet& gen, const Tensor& images,
                                      float eps_test);

void save_generator(const GeneratorNet& gen, const std::string& dir);
GeneratorNet load_generator(const std::string& dir);

}  // namespace tbench
