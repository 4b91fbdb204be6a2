#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tbench/attack.hpp"
#include "tbench/dataset.hpp"
#include "tbench/model.hpp"
#include "tbench/svm.hpp"

namespace tbench {

struct TracebackDataset {
    Tensor adversarials;
    Tensor cleans;
    std::vector<int> attack_ids;    // index into `attack_names`
    std::vector<int> category_ids;  // index into all_categories()
    std::vector<bool> is_test;
    std::vector<std::string> attack_names;
    uint64_t seed = 0;

    size_t size() const { return attack_ids.size(); }
};

using AttackRunner =
    std::function<AdversarialBatch(const std::string& variant, const Tensor& images,
                                   const std::vector<int>& labels)>;

// Runs every listed attack over the images (train/test split per attack is
// fixed by position: the first `train_per_attack` samples train).
TracebackDataset build_traceback_dataset(const std::vector<std::string>& attacks,
                                         const Tensor& images, const std::vector<int>& labels,
                                         const AttackRunner& runner, int train_per_attack,
                                         int test_per_attack, uint64_t seed);

struct TracebackReport {
    double overall_accuracy = 0.0;
    double category_accuracy = 0.0;
    std::vector<std::vector<int>> confusion;  // [true][pred] on the test split
    std::vector<std::string> attack_names;
};

struct ImageClassifierConfig {
    bool use_perturbation = false;  // adversarial - clean input mode
    int epochs = 25;
    float lr = 0.02f;
    int batch_size = 32;
    uint64_t seed = 23;
};

TracebackReport train_image_classifier(const TracebackDataset& ds,
                                       const ImageClassifierConfig& cfg);

struct MisclassSvmRow {
    int top_n = 0;
    double accuracy = 0.0;
    bool degenerate = false;  // all feature vectors identical
};
std::vector<MisclassSvmRow> train_misclass_svm(const TracebackDataset& ds,
                                               const ModelHandle& target,
                                               const std::vector<int>& top_n_values,
                                               uint64_t seed = 13);

// Bag-of-classes encoding of the top-N predicted class ids.
std::vector<float> top_n_feature(const Tensor& logits_row, int num_classes, int top_n);

struct ClassFrequencyRow {
    int class_id;
    double frequency;
};
struct ClassFrequencyTable {
    std::string attack;
    std::vector<ClassFrequencyRow> top5;
    double top1_share = 0.0;
};
ClassFrequencyTable class_frequency_distribution(const std::string& attack,
                                                 const std::vector<int>& predictions,
                                                 int num_classes);

}  // namespace tbench
