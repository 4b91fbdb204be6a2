#include "tbench/svm.hpp"

#include <algorithm>
#include <cmath>

#include "tbench/errors.hpp"
#include "tbench/rng.hpp"

namespace tbench {

static double rbf(const std::vector<float>& a, const std::vector<float>& b, double gamma) {
    double d2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        d2 += d * d;
    }
    return std::exp(-gamma * d2);
}

// Simplified SMO (Platt) on a precomputed kernel matrix.
static void smo_binary(const std::vector<std::vector<double>>& kernel,
                       const std::vector<int>& y, double c, double tol, int max_passes,
                       Rng& rng, std::vector<double>& alpha, double& b) {
    size_t n = y.size();
    alpha.assign(n, 0.0);
    b = 0.0;
    auto decision = [&](size_t i) {
        double s = -b;
        for (size_t j = 0; j < n; ++j)
            if (alpha[j] != 0.0) s += alpha[j] * y[j] * kernel[j][i];
        return s;
    };
    int passes = 0;
    int safety = 0;
    const int safety_cap = 200;
    while (passes < max_passes && safety < safety_cap) {
        ++safety;
        int changed = 0;
        for (size_t i = 0; i < n; ++i) {
            double ei = decision(i) - y[i];
            if ((y[i] * ei < -tol && alpha[i] < c) || (y[i] * ei > tol && alpha[i] > 0)) {
                size_t j = rng.uniform_int(0, static_cast<int>(n) - 2);
                if (j >= i) ++j;
                double ej = decision(j) - y[j];
                double ai_old = alpha[i], aj_old = alpha[j];
                double lo, hi;
                if (y[i] != y[j]) {
                    lo = std::max(0.0, alpha[j] - alpha[i]);
                    hi = std::min(c, c + alpha[j] - alpha[i]);
                } else {
                    lo = std::max(0.0, alpha[i] + alpha[j] - c);
                    hi = std::min(c, alpha[i] + alpha[j]);
                }
                if (lo == hi) continue;
                double eta = 2 * kernel[i][j] - kernel[i][i] - kernel[j][j];
                if (eta >= 0) continue;
                double aj = aj_old - y[j] * (ei - ej) / eta;
                aj = std::min(std::max(aj, lo), hi);
                if (std::fabs(aj - aj_old) < 1e-5) continue;
                double ai = ai_old + y[i] * y[j] * (aj_old - aj);
                alpha[i] = ai;
                alpha[j] = aj;
                double b1 = b + ei + y[i] * (ai - ai_old) * kernel[i][i] +
                            y[j] * (aj - aj_old) * kernel[i][j];
                double b2 = b + ej + y[i] * (ai - ai_old) * kernel[i][j] +
                            y[j] * (aj - aj_old) * kernel[j][j];
                if (ai > 0 && ai < c) b = b1;
                else if (aj > 0 && aj < c) b = b2;
                else b = (b1 + b2) / 2;
                ++changed;
            }
        }
        passes = changed == 0 ? passes + 1 : 0;
    }
}

SvmModel svm_train_ovr(const std::vector<std::vector<float>>& x, const std::vector<int>& y,
                       int num_classes, double c, double gamma, int max_passes, double tol,
                       uint64_t seed) {
    if (x.empty() || x.size() != y.size()) throw ConfigError("svm: bad training data");
    SvmModel model;
    model.support = x;
    model.num_classes = num_classes;
    model.gamma = gamma > 0.0 ? gamma : 1.0 / static_cast<double>(x[0].size());

    size_t n = x.size();
    std::vector<std::vector<double>> kernel(n, std::vector<double>(n));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i; j < n; ++j)
            kernel[i][j] = kernel[j][i] = rbf(x[i], x[j], model.gamma);

    model.alpha_y.resize(num_classes);
    model.bias.resize(num_classes);
    for (int cls = 0; cls < num_classes; ++cls) {
        std::vector<int> yy(n);
        for (size_t i = 0; i < n; ++i) yy[i] = y[i] == cls ? 1 : -1;
        Rng rng = Rng::substream(seed, 0x53D0, static_cast<uint64_t>(cls));
        std::vector<double> alpha;
        double b = 0.0;
        smo_binary(kernel, yy, c, tol, max_passes, rng, alpha, b);
        model.alpha_y[cls].assign(n, 0.0);
        for (size_t i = 0; i < n; ++i) model.alpha_y[cls][i] = alpha[i] * yy[i];
        model.bias[cls] = b;
    }
    return model;
}

int svm_predict(const SvmModel& model, const std::vector<float>& x) {
    size_t n = model.support.size();
    std::vector<double> k(n);
    for (size_t i = 0; i < n; ++i) k[i] = rbf(model.support[i], x, model.gamma);
    int best = 0;
    double best_score = -1e300;
    for (int cls = 0; cls < model.num_classes; ++cls) {
        double s = -model.bias[cls];
        for (size_t i = 0; i < n; ++i)
            if (model.alpha_y[cls][i] != 0.0) s += model.alpha_y[cls][i] * k[i];
        if (s > best_score) {
            best_score = s;
            best = cls;
        }
    }
    return best;
}

double svm_accuracy(const SvmModel& model, const std::vector<std::vector<float>>& x,
                    const std::vector<int>& y) {
    if (x.empty()) return 0.0;
    size_t correct = 0;
    for (size_t i = 0; i < x.size(); ++i)
        if (svm_predict(model, x[i]) == y[i]) ++correct;
    return static_cast<double>(correct) / x.size();
}

}  // namespace tbench
