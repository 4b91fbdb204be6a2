#pragma once

#include <map>
#include <string>
#include <vector>

#include "tbench/attack.hpp"
#include "tbench/augment.hpp"
#include "tbench/dataset.hpp"
#include "tbench/feature_attack.hpp"
#include "tbench/generative.hpp"
#include "tbench/model.hpp"

namespace tbench {

// Everything a variant may need to run: the base surrogate, retrained
// surrogates, auxiliary images (Admix donors, AA targets), and pre-trained
// generators keyed by variant id ("TTP:<class>" for TTP).
struct AttackResources {
    ModelHandle surrogate;
    ModelHandle rfa_surrogate;
    ModelHandle dsm_surrogate;
    const Dataset* aux_pool = nullptr;
    const std::map<std::string, GeneratorNet>* generators = nullptr;
    std::string linbp_start = "conv3_x";
    float sgm_gamma = 0.5f;
    float iaa_beta = 15.f;
    std::string feature_layer = "conv3_x";
    std::vector<int> ttp_targets;
    int workers = 1;
};

// The attack repository: the PGD baseline plus the 23 categorized attacks.
const std::vector<std::string>& all_attack_variants();
const std::vector<std::string>& all_categories();  // baseline + 5 categories
std::string attack_category(const std::string& variant);
int attack_category_id(const std::string& variant);
bool attack_is_stochastic(const std::string& variant);  // consumes RNG at craft time
bool attack_is_generative(const std::string& variant);
// 10 iterations for gradient stabilization, 50 for other iterative attacks
int default_iterations(const std::string& variant);

AdversarialBatch run_attack_variant(const AttackSpec& spec, const AttackResources& res,
                                    const Tensor& images, const std::vector<int>& labels,
                                    const ModelHandle* curve_probe = nullptr);

}  // namespace tbench
