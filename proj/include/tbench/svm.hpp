#pragma once

#include <cstdint>
#include <vector>

namespace tbench {

// One-vs-rest SVM with an RBF kernel, trained with simplified SMO.
struct SvmModel {
    std::vector<std::vector<float>> support;  // training points (shared by all classes)
    std::vector<std::vector<double>> alpha_y; // per class: alpha_i * y_i
    std::vector<double> bias;                 // per class
    double gamma = 0.0;
    int num_classes = 0;
};

SvmModel svm_train_ovr(const std::vector<std::vector<float>>& x, const std::vector<int>& y,
                       int num_classes, double c = 1.0, double gamma = 0.0, int max_passes = 5,
                       double tol = 1e-3, uint64_t seed = 13);

int svm_predict(const SvmModel& model, const std::vector<float>& x);
double svm_accuracy(const SvmModel& model, const std::vector<std::vector<float>>& x,
                    const std::vector<int>& y);

}  // namespace tbench
