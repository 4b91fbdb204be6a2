#include "tbench/feature_attack.hpp"

#include <algorithm>
#include <cmath>

#include <atomic>

#include "tbench/errors.hpp"
#include "tbench/parallel.hpp"

namespace tbench {

Tensor feature_distance_gradient(const ModelHandle& model, const Tensor& x_adv,
                                 const Tensor& x_ref, const std::string& layer, bool descend) {
    auto ref = forward_with_taps(model, x_ref, {layer});
    ForwardTrace trace;
    forward(model, x_adv, &trace);
    int si = model.def().stage_index(layer);
    if (si < 0 && layer != "pool") throw ConfigError("unknown layer: " + layer);
    Tensor feat = layer == "pool" ? trace.pooled : trace.stage_outputs[si];
    Tensor tap_grad = feat - ref.taps.at(layer);  // d/df ||f - f_ref||^2 = 2 (f - f_ref)
    tap_grad.scale(descend ? -2.f : 2.f);
    std::map<std::string, Tensor> inject{{layer, tap_grad}};
    Tensor zero_logits(trace.logits.shape());
    return backward_to_input(model, trace, zero_logits, &inject);
}

// Smoothness penalty on the perturbation: sum over adjacent pixel pairs of
// ((d_a - d_b)^2 + eps^2)^(alpha/2). Returns the gradient w.r.t. x_adv and
// optionally the value.
static Tensor smoothness_gradient(const Tensor& delta, float alpha, double* value) {
    const float eps2 = 1e-8f;
    Tensor g(delta.shape());
    int n = delta.dim(0), c = delta.dim(1), h = delta.dim(2), w = delta.dim(3);
    double val = 0.0;
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    auto pair_term = [&](int y2, int x2) {
                        float d = delta.at(b, k, y, x) - delta.at(b, k, y2, x2);
                        float base = d * d + eps2;
                        val += std::pow(base, alpha / 2.f);
                        float coef = alpha * d * std::pow(base, alpha / 2.f - 1.f);
                        g.at(b, k, y, x) += coef;
                        g.at(b, k, y2, x2) -= coef;
                    };
                    if (x + 1 < w) pair_term(y, x + 1);
                    if (y + 1 < h) pair_term(y + 1, x);
                }
    if (value) *value = val;
    return g;
}

Tensor tap_gradient(const FeatureLossSpec& spec, const ModelHandle& model, const Tensor& x_adv,
                    const Tensor& x_clean, int label) {
    std::vector<std::string> layers;
    if (spec.tap_all_layers)
        for (const auto& st : model.def().stages) layers.push_back(st.name);
    else
        layers.push_back(spec.layer);

    auto ref = forward_with_taps(model, x_clean, layers);
    ForwardTrace trace;
    Tensor logits = forward(model, x_adv, &trace);

    std::map<std::string, Tensor> inject;
    for (const auto& l : layers) {
        int si = model.def().stage_index(l);
        Tensor tap_grad = trace.stage_outputs[si] - ref.taps.at(l);
        tap_grad.scale(2.f);
        inject[l] = std::move(tap_grad);
    }
    Tensor grad_logits(logits.shape());
    if (spec.tap_lambda != 0.f) {
        grad_logits = cross_entropy_grad(logits, {label});
        grad_logits.scale(spec.tap_lambda);
    }
    Tensor g = backward_to_input(model, trace, grad_logits, &inject);
    if (spec.tap_eta != 0.f) {
        Tensor delta = x_adv - x_clean;
        Tensor gs = smoothness_gradient(delta, spec.tap_alpha, nullptr);
        g.add_scaled(gs, -spec.tap_eta);  // penalty enters the maximized objective negatively
    }
    return g;
}

Tensor fia_feature_importance(const ModelHandle& model, const Tensor& x, int label,
                              const std::string& layer, int n, float p_drop, Rng& rng) {
    if (n < 1) throw ConfigError("FIA aggregation count must be >= 1");
    if (p_drop < 0.f || p_drop >= 1.f) throw ConfigError("FIA drop probability must be in [0,1)");
    int si = model.def().stage_index(layer);
    if (si < 0) throw ConfigError("unknown layer: " + layer);

    std::vector<double> acc;
    int h = x.dim(2), w = x.dim(3);
    for (int it = 0; it < n; ++it) {
        Tensor masked = x;
        if (p_drop > 0.f) {
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    float keep = rng.uniform() >= p_drop ? 1.f : 0.f;
                    for (int c = 0; c < x.dim(1); ++c) masked.at(0, c, y, xx) *= keep;
                }
        }
        ForwardTrace trace;
        Tensor logits = forward(model, masked, &trace);
        Tensor gl(logits.shape());
        gl[label] = 1.f;  // gradient of the true-class logit
        std::map<std::string, Tensor> record;
        backward_to_input(model, trace, gl, nullptr, nullptr, &record);
        const Tensor& fg = record.at(layer);
        if (acc.empty()) acc.assign(fg.size(), 0.0);
        for (size_t i = 0; i < fg.size(); ++i) acc[i] += fg[i];
    }
    // shape of the layer feature map
    auto taps = forward_with_taps(model, x, {layer});
    Tensor out(taps.taps.at(layer).shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / n);
    return out;
}

NaaAttribution naa_attribution(const ModelHandle& model, const Tensor& x, int label,
                               const std::string& layer, int n) {
    if (n < 1) throw ConfigError("NAA path step count must be >= 1");
    int si = model.def().stage_index(layer);
    if (si < 0) throw ConfigError("unknown layer: " + layer);
    Tensor baseline(x.shape());  // black image

    std::vector<double> acc;
    for (int k = 1; k <= n; ++k) {
        float t = (static_cast<float>(k) - 0.5f) / n;
        Tensor xt = baseline;
        xt.add_scaled(x, t);  // baseline + t * (x - 0) = t * x
        ForwardTrace trace;
        Tensor logits = forward(model, xt, &trace);
        Tensor gl(logits.shape());
        gl[label] = 1.f;
        std::map<std::string, Tensor> record;
        backward_to_input(model, trace, gl, nullptr, nullptr, &record);
        const Tensor& fg = record.at(layer);
        if (acc.empty()) acc.assign(fg.size(), 0.0);
        for (size_t i = 0; i < fg.size(); ++i) acc[i] += fg[i];
    }
    auto fx = forward_with_taps(model, x, {layer});
    auto f0 = forward_with_taps(model, baseline, {layer});

    NaaAttribution res;
    res.baseline_features = f0.taps.at(layer);
    res.path_gradient = Tensor(res.baseline_features.shape());
    for (size_t i = 0; i < res.path_gradient.size(); ++i)
        res.path_gradient[i] = static_cast<float>(acc[i] / n);
    Tensor delta = fx.taps.at(layer) - res.baseline_features;
    res.attribution = delta;
    for (size_t i = 0; i < res.attribution.size(); ++i) res.attribution[i] *= res.path_gradient[i];
    return res;
}

Tensor aa_target_features(const FeatureLossSpec& spec, const ModelHandle& model,
                          const Dataset& pool, int source_label, Rng& rng) {
    std::vector<int> classes;
    for (int c = 0; c < pool.num_classes; ++c)
        if (c != source_label) classes.push_back(c);
    // pick aa_num_classes distinct other classes
    for (size_t i = classes.size(); i > 1; --i)
        std::swap(classes[i - 1], classes[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    int use_classes = std::min<int>(spec.aa_num_classes, static_cast<int>(classes.size()));
    classes.resize(use_classes);

    std::vector<int> chosen;
    int per_class = std::max(1, spec.aa_num_targets / std::max(1, use_classes));
    for (int c : classes) {
        std::vector<int> members;
        for (size_t i = 0; i < pool.size(); ++i)
            if (pool.labels[i] == c) members.push_back(static_cast<int>(i));
        for (int j = 0; j < per_class && !members.empty(); ++j)
            chosen.push_back(members[rng.uniform_int(0, static_cast<int>(members.size()) - 1)]);
    }
    if (chosen.empty()) throw ConfigError("AA: no target images available");
    Dataset targets = pool.subset(chosen);
    auto taps = forward_with_taps(model, targets.images, {spec.layer});
    return taps.taps.at(spec.layer);  // {T, C, H, W}
}

GradProvider make_feature_grad_provider(const FeatureLossSpec& spec, const ModelHandle& model,
                                        const Tensor& clean_images, const std::vector<int>& labels,
                                        const Dataset* aa_pool, uint64_t seed, int workers) {
    using V = FeatureLossSpec::Variant;
    size_t n = labels.size();
    switch (spec.variant) {
        case V::TAP:
            return [spec, model, clean_images, labels](const Tensor& x, size_t i, int) {
                return tap_gradient(spec, model, x, clean_images.slice_n(static_cast<int>(i)),
                                    labels[i]);
            };
        case V::AA: {
            if (!aa_pool) throw ConfigError("AA requires a target image pool");
            // per-image mean target feature maps, drawn up front
            auto targets = std::make_shared<std::vector<Tensor>>(n);
            Dataset pool = *aa_pool;
            parallel_for(n, workers, [&](size_t i) {
                Rng rng = Rng::substream(seed, 0xAA00, i);
                Tensor feats = aa_target_features(spec, model, pool, labels[i], rng);
                int t = feats.dim(0);
                Tensor mean({1, feats.dim(1), feats.dim(2), feats.dim(3)});
                size_t stride = mean.size();
                for (int j = 0; j < t; ++j)
                    for (size_t s = 0; s < stride; ++s) mean[s] += feats[j * stride + s];
                mean.scale(1.f / t);
                (*targets)[i] = std::move(mean);
            });
            return [spec, model, targets](const Tensor& x, size_t i, int) {
                // descend distance to the mean target features
                ForwardTrace trace;
                forward(model, x, &trace);
                int si = model.def().stage_index(spec.layer);
                Tensor tap_grad = trace.stage_outputs[si] - (*targets)[i];
                tap_grad.scale(-2.f);
                std::map<std::string, Tensor> inject{{spec.layer, tap_grad}};
                Tensor zeros(trace.logits.shape());
                return backward_to_input(model, trace, zeros, &inject);
            };
        }
        case V::FIA: {
            auto weights = std::make_shared<std::vector<Tensor>>(n);
            parallel_for(n, workers, [&](size_t i) {
                Rng rng = Rng::substream(seed, 0xF1A0, i);
                (*weights)[i] = fia_feature_importance(
                    model, clean_images.slice_n(static_cast<int>(i)), labels[i], spec.layer,
                    spec.fia_n, spec.fia_pdrop, rng);
            });
            return [spec, model, weights](const Tensor& x, size_t i, int) {
                // minimize sum(W .* f_l(x')) => ascend with tap grad -W
                ForwardTrace trace;
                forward(model, x, &trace);
                Tensor tap_grad = (*weights)[i];
                tap_grad.scale(-1.f);
                std::map<std::string, Tensor> inject{{spec.layer, tap_grad}};
                Tensor zeros(trace.logits.shape());
                return backward_to_input(model, trace, zeros, &inject);
            };
        }
        case V::NAA: {
            auto attrs = std::make_shared<std::vector<NaaAttribution>>(n);
            parallel_for(n, workers, [&](size_t i) {
                (*attrs)[i] = naa_attribution(model, clean_images.slice_n(static_cast<int>(i)),
                                              labels[i], spec.layer, spec.naa_n);
            });
            float gamma = spec.naa_gamma;
            return [spec, model, attrs, gamma](const Tensor& x, size_t i, int) {
                // minimize the gamma-weighted attribution sum of x'':
                // A(x') = (f_l(x') - f_l(baseline)) .* path_grad;
                // transform: a >= 0 -> a, a < 0 -> gamma * a (linear; gamma=1 -> identity)
                ForwardTrace trace;
                forward(model, x, &trace);
                int si = model.def().stage_index(spec.layer);
                const Tensor& feat = trace.stage_outputs[si];
                const NaaAttribution& naa = (*attrs)[i];
                Tensor tap_grad(feat.shape());
                for (size_t s = 0; s < tap_grad.size(); ++s) {
                    float a = (feat[s] - naa.baseline_features[s]) * naa.path_gradient[s];
                    float slope = a >= 0.f ? 1.f : gamma;
                    tap_grad[s] = -slope * naa.path_gradient[s];
                }
                std::map<std::string, Tensor> inject{{spec.layer, tap_grad}};
                Tensor zeros(trace.logits.shape());
                return backward_to_input(model, trace, zeros, &inject);
            };
        }
        case V::ILA:
            throw ConfigError("ILA runs through ila_two_stage, not a grad provider");
    }
    throw ConfigError("unhandled feature variant");
}

AdversarialBatch ila_two_stage(const AttackSpec& stage1, const ModelHandle& model,
                               const Tensor& images, const std::vector<int>& labels,
                               const std::string& layer, int t2, int workers) {
    GradProvider ce = make_ce_grad_provider(model, labels, stage1);
    AdversarialBatch warm = run_iterative_attack(stage1, model, images, labels, ce, nullptr,
                                                 workers);
    if (t2 == 0) return warm;
    if (t2 < 0) throw ConfigError("ILA stage-2 iteration count must be >= 0");

    // stage-1 feature displacement directions
    auto clean_taps = forward_with_taps(model, images, {layer});
    auto warm_taps = forward_with_taps(model, warm.adversarials, {layer});
    Tensor directions = warm_taps.taps.at(layer) - clean_taps.taps.at(layer);
    size_t n = labels.size();
    size_t stride = directions.size() / n;
    for (size_t i = 0; i < n; ++i) {
        double norm2 = 0.0;
        for (size_t s = 0; s < stride; ++s) {
            float v = directions[i * stride + s];
            norm2 += static_cast<double>(v) * v;
        }
        if (norm2 == 0.0)
            throw AttackError("ILA: zero stage-1 feature displacement for sample " +
                              std::to_string(i));
    }

    int si = model.def().stage_index(layer);
    auto clean_feats = std::make_shared<Tensor>(clean_taps.taps.at(layer));
    auto dirs = std::make_shared<Tensor>(std::move(directions));
    GradProvider proj = [model, si, dirs, stride](const Tensor& x, size_t i, int) {
        // maximize <f_l(x'') , v_i>; constant reference term drops out
        ForwardTrace trace;
        forward(model, x, &trace);
        Tensor tap_grad({1, (*dirs).dim(1), (*dirs).dim(2), (*dirs).dim(3)});
        for (size_t s = 0; s < stride; ++s) tap_grad[s] = (*dirs)[i * stride + s];
        std::map<std::string, Tensor> inject{{model.def().stages[si].name, tap_grad}};
        Tensor zeros(trace.logits.shape());
        return backward_to_input(model, trace, zeros, &inject);
    };

    AttackSpec stage2 = stage1;
    stage2.iterations = t2;
    stage2.stabilization = Stabilization::None;
    // stage 2 refines the warm start under the same budget around the originals
    if (stage2.step_size <= 0.f) throw ConfigError("attack step size must be > 0");
    size_t count = labels.size();
    AdversarialBatch out = warm;
    Tensor advs = warm.adversarials;
    std::atomic<int> failed{-1};
    parallel_for(count, workers, [&](size_t i) {
        Tensor x0 = images.slice_n(static_cast<int>(i));
        Tensor x = advs.slice_n(static_cast<int>(i));
        for (int it = 0; it < t2; ++it) {
            if (failed.load(std::memory_order_relaxed) >= 0) return;
            Tensor g = proj(x, i, it);
            if (g.has_nan()) {
                failed.store(it, std::memory_order_relaxed);
                return;
            }
            for (size_t j = 0; j < x.size(); ++j) {
                float s = g[j] > 0.f ? 1.f : (g[j] < 0.f ? -1.f : 0.f);
                x[j] += stage2.step_size * s;
            }
            x = project(x, x0, stage2.epsilon);
        }
        advs.set_slice_n(static_cast<int>(i), x);
    });
    if (failed.load() >= 0)
        throw AttackError("NaN gradient in ILA stage 2 at iteration " + std::to_string(failed.load()),
                          failed.load());
    out.adversarials = quantize8(advs);
    return out;
}

std::vector<LayerSweepRow> layer_sweep(const FeatureLossSpec& variant_spec, AttackSpec attack,
                                       const ModelHandle& surrogate, const ModelHandle& target,
                                       const Dataset& ds, const std::vector<std::string>& layers,
                                       int workers) {
    std::vector<LayerSweepRow> rows;
    for (const auto& layer : layers) {
        FeatureLossSpec spec = variant_spec;
        spec.layer = layer;
        spec.tap_all_layers = false;
        AdversarialBatch batch;
        if (spec.variant == FeatureLossSpec::Variant::ILA) {
            AttackSpec stage1 = attack;
            stage1.iterations = std::max(1, attack.iterations / 5);
            batch = ila_two_stage(stage1, surrogate, ds.images, ds.labels, layer,
                                  attack.iterations - stage1.iterations, workers);
        } else {
            GradProvider provider = make_feature_grad_provider(spec, surrogate, ds.images,
                                                               ds.labels, &ds, attack.seed, workers);
            batch = run_iterative_attack(attack, surrogate, ds.images, ds.labels, provider,
                                         nullptr, workers);
        }
        auto preds = predict(target, batch.adversarials);
        size_t wrong = 0;
        for (size_t i = 0; i < preds.size(); ++i)
            if (preds[i] != ds.labels[i]) ++wrong;
        rows.push_back({layer, static_cast<double>(wrong) / preds.size()});
    }
    return rows;
}

}  // namespace tbench
