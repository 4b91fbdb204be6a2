#include "tbench/attack.hpp"

#include <atomic>
#include <limits>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tbench/errors.hpp"
#include "tbench/image.hpp"
#include "tbench/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tbench {

Tensor project(const Tensor& candidate, const Tensor& original, float epsilon) {
    return project_linf(candidate, original, epsilon);
}

Tensor stabilized_gradient(Stabilization method, int window_k, float mu, StabState& state,
                           const std::function<Tensor(const Tensor&)>& raw_grad_at,
                           const Tensor& x, float alpha) {
    if (method == Stabilization::None) return raw_grad_at(x);

    if (method == Stabilization::MI) {
        Tensor r = raw_grad_at(x);
        if (state.momentum.empty()) state.momentum = Tensor(r.shape());
        Tensor g = state.momentum;
        g.scale(mu);
        g.add_scaled(r, 1.f);
        state.momentum = g;
        return g;
    }

    // NI == window(inf), PI == window(1): look ahead along the mu-weighted
    // left fold of the last k raw gradients, then accumulate as MI does.
    int k = method == Stabilization::NI ? std::numeric_limits<int>::max()
            : method == Stabilization::PI ? 1
                                          : window_k;
    Tensor point = x;
    if (!state.raw_history.empty()) {
        size_t take = std::min<size_t>(k, state.raw_history.size());
        size_t start = state.raw_history.size() - take;
        Tensor v(state.raw_history[start].shape());
        for (size_t j = start; j < state.raw_history.size(); ++j) {
            v.scale(mu);
            v.add_scaled(state.raw_history[j], 1.f);
        }
        point.add_scaled(v, alpha);
    }
    Tensor r = raw_grad_at(point);
    if (state.momentum.empty()) state.momentum = Tensor(r.shape());
    Tensor g = state.momentum;
    g.scale(mu);
    g.add_scaled(r, 1.f);
    state.momentum = g;
    state.raw_history.push_back(std::move(r));
    return g;
}

GradProvider make_ce_grad_provider(const ModelHandle& model, const std::vector<int>& labels,
                                   const AttackSpec& spec) {
    bool targeted = spec.targeted;
    int target = spec.target_class;
    return [model, labels, targeted, target](const Tensor& x, size_t image_index,
                                             int) -> Tensor {
        LossSpec loss;
        if (targeted) {
            loss.kind = LossSpec::Kind::TargetedCrossEntropy;
            loss.labels = {target};
        } else {
            loss.kind = LossSpec::Kind::CrossEntropy;
            loss.labels = {labels[image_index]};
        }
        return input_gradient(model, x, loss);
    };
}

AdversarialBatch run_iterative_attack(const AttackSpec& spec, const ModelHandle& model,
                                      const Tensor& images, const std::vector<int>& labels,
                                      const GradProvider& grad_provider,
                                      const ModelHandle* curve_probe, int workers) {
    if (spec.step_size <= 0.f) throw ConfigError("attack step size must be > 0");
    if (spec.iterations <= 0) throw ConfigError("attack iteration count must be > 0");
    if (spec.epsilon < 0.f || spec.epsilon > 1.f) throw ConfigError("epsilon must be in [0,1]");

    size_t n = labels.size();
    AdversarialBatch out;
    out.originals = images;
    out.adversarials = images;
    out.labels = labels;
    out.attack_id = spec.variant;
    out.epsilon = spec.epsilon;
    out.seed = spec.seed;

    const ModelHandle* probe = spec.record_curve ? (curve_probe ? curve_probe : &model) : nullptr;
    std::vector<std::vector<int>> curve_hits;
    if (probe) curve_hits.assign(spec.iterations, std::vector<int>(n, 0));

    float alpha = spec.lookahead_alpha > 0.f ? spec.lookahead_alpha : spec.step_size;

    std::atomic<int> failed_iteration{-1};
    parallel_for(n, workers, [&](size_t i) {
        Tensor x0 = images.slice_n(static_cast<int>(i));
        Tensor x = x0;
        StabState state;
        for (int it = 0; it < spec.iterations; ++it) {
            if (failed_iteration.load(std::memory_order_relaxed) >= 0) return;
            auto raw = [&](const Tensor& p) { return grad_provider(p, i, it); };
            Tensor g = stabilized_gradient(spec.stabilization, spec.window_k, spec.mu, state, raw,
                                           x, alpha);
            if (g.has_nan()) {
                failed_iteration.store(it, std::memory_order_relaxed);
                return;
            }
            for (size_t j = 0; j < x.size(); ++j) {
                float s = g[j] > 0.f ? 1.f : (g[j] < 0.f ? -1.f : 0.f);
                x[j] += spec.step_size * s;
            }
            x = project(x, x0, spec.epsilon);
            if (probe) {
                Tensor snap = quantize8(x);
                auto pred = predict(*probe, snap);
                curve_hits[it][i] = pred[0] != labels[i] ? 1 : 0;
            }
        }
        out.adversarials.set_slice_n(static_cast<int>(i), x);
    });

    if (failed_iteration.load() >= 0)
        throw AttackError("NaN gradient in attack '" + spec.variant + "' at iteration " +
                              std::to_string(failed_iteration.load()),
                          failed_iteration.load());

    out.adversarials = quantize8(out.adversarials);
    if (probe) {
        out.per_iteration_success.resize(spec.iterations);
        for (int it = 0; it < spec.iterations; ++it) {
            int hits = 0;
            for (size_t i = 0; i < n; ++i) hits += curve_hits[it][i];
            out.per_iteration_success[it] = n ? static_cast<float>(hits) / n : 0.f;
        }
    }
    return out;
}

void save_adversarial_batch(const std::string& dir, const AdversarialBatch& batch) {
    fs::create_directories(dir);
    json manifest;
    manifest["attack_id"] = batch.attack_id;
    manifest["epsilon"] = batch.epsilon;
    manifest["seed"] = batch.seed;
    manifest["count"] = batch.labels.size();
    manifest["labels"] = batch.labels;
    if (!batch.per_iteration_success.empty())
        manifest["per_iteration_success"] = batch.per_iteration_success;
    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    char name[64];
    for (size_t i = 0; i < batch.labels.size(); ++i) {
        std::snprintf(name, sizeof(name), "adv_%05zu.ppm", i);
        save_ppm(dir + "/" + name, batch.adversarials.slice_n(static_cast<int>(i)));
        std::snprintf(name, sizeof(name), "orig_%05zu.ppm", i);
        save_ppm(dir + "/" + name, batch.originals.slice_n(static_cast<int>(i)));
    }
}

AdversarialBatch load_adversarial_batch(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("missing adversarial batch manifest: " + dir);
    json manifest = json::parse(mf);
    AdversarialBatch batch;
    batch.attack_id = manifest["attack_id"].get<std::string>();
    batch.epsilon = manifest["epsilon"].get<float>();
    batch.seed = manifest["seed"].get<uint64_t>();
    batch.labels = manifest["labels"].get<std::vector<int>>();
    if (manifest.contains("per_iteration_success"))
        batch.per_iteration_success = manifest["per_iteration_success"].get<std::vector<float>>();
    size_t n = batch.labels.size();
    char name[64];
    for (size_t i = 0; i < n; ++i) {
        std::snprintf(name, sizeof(name), "adv_%05zu.ppm", i);
        Tensor adv = load_ppm(dir + "/" + name);
        std::snprintf(name, sizeof(name), "orig_%05zu.ppm", i);
        Tensor orig = load_ppm(dir + "/" + name);
        if (i == 0) {
            batch.adversarials = Tensor({static_cast<int>(n), 3, adv.dim(2), adv.dim(3)});
            batch.originals = Tensor({static_cast<int>(n), 3, adv.dim(2), adv.dim(3)});
        }
        batch.adversarials.set_slice_n(static_cast<int>(i), adv);
        batch.originals.set_slice_n(static_cast<int>(i), orig);
    }
    return batch;
}

}  // namespace tbench
