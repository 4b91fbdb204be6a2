#include "tbench/train.hpp"

#include <algorithm>
#include <deque>
#include <cmath>
#include <numeric>

#include "tbench/errors.hpp"
#include "tbench/rng.hpp"

namespace tbench {

float accuracy(const ModelHandle& model, const Dataset& ds, int batch_size) {
    size_t correct = 0;
    for (size_t start = 0; start < ds.size(); start += batch_size) {
        size_t end = std::min(ds.size(), start + batch_size);
        std::vector<int> idx(end - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        Dataset sub = ds.subset(idx);
        auto preds = predict(model, sub.images);
        for (size_t i = 0; i < preds.size(); ++i)
            if (preds[i] == sub.labels[i]) ++correct;
    }
    return ds.size() ? static_cast<float>(correct) / ds.size() : 0.f;
}

static void project_l2_ball(Tensor& x, const Tensor& ref, float eps) {
    // per-sample L2 ball, then [0,1]
    int n = x.dim(0);
    size_t stride = x.size() / n;
    for (int b = 0; b < n; ++b) {
        float* xd = x.data() + b * stride;
        const float* rd = ref.data() + b * stride;
        double norm2 = 0.0;
        for (size_t i = 0; i < stride; ++i) {
            double d = xd[i] - rd[i];
            norm2 += d * d;
        }
        float norm = static_cast<float>(std::sqrt(norm2));
        float scale = norm > eps ? eps / norm : 1.f;
        for (size_t i = 0; i < stride; ++i) {
            float v = rd[i] + (xd[i] - rd[i]) * scale;
            xd[i] = std::min(std::max(v, 0.f), 1.f);
        }
    }
}

Tensor pgd_perturb(const ModelHandle& model, const Tensor& batch, const std::vector<int>& labels,
                   TrainRecipe::Norm norm, float eps, int steps, float step_size) {
    Tensor x = batch;
    LossSpec loss{LossSpec::Kind::CrossEntropy, labels};
    for (int it = 0; it < steps; ++it) {
        Tensor g = input_gradient(model, x, loss);
        int n = x.dim(0);
        size_t stride = x.size() / n;
        if (norm == TrainRecipe::Norm::Linf) {
            for (size_t i = 0; i < x.size(); ++i) {
                float s = g[i] > 0.f ? 1.f : (g[i] < 0.f ? -1.f : 0.f);
                x[i] += step_size * s;
            }
            x = project_linf(x, batch, eps);
        } else {
            for (int b = 0; b < n; ++b) {
                float* xd = x.data() + b * stride;
                const float* gd = g.data() + b * stride;
                double norm2 = 0.0;
                for (size_t i = 0; i < stride; ++i) norm2 += static_cast<double>(gd[i]) * gd[i];
                float gn = static_cast<float>(std::sqrt(norm2));
                if (gn < 1e-12f) continue;
                for (size_t i = 0; i < stride; ++i) xd[i] += step_size * gd[i] / gn;
            }
            project_l2_ball(x, batch, eps);
        }
    }
    return x;
}

float robust_accuracy_pgd(const ModelHandle& model, const Dataset& ds, TrainRecipe::Norm norm,
                          float eps, int steps, float step_size, int batch_size) {
    size_t correct = 0;
    for (size_t start = 0; start < ds.size(); start += batch_size) {
        size_t end = std::min(ds.size(), start + batch_size);
        std::vector<int> idx(end - start);
        std::iota(idx.begin(), idx.end(), static_cast<int>(start));
        Dataset sub = ds.subset(idx);
        Tensor adv = pgd_perturb(model, sub.images, sub.labels, norm, eps, steps, step_size);
        auto preds = predict(model, adv);
        for (size_t i = 0; i < preds.size(); ++i)
            if (preds[i] == sub.labels[i]) ++correct;
    }
    return ds.size() ? static_cast<float>(correct) / ds.size() : 0.f;
}

namespace {

struct SgdState {
    std::vector<Tensor> velocity;
};

void sgd_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              SgdState& state, float lr, float momentum, float weight_decay) {
    if (state.velocity.empty()) {
        for (Tensor* p : params) state.velocity.emplace_back(Tensor(p->shape()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& v = state.velocity[i];
        Tensor& w = *params[i];
        const Tensor& g = *grads[i];
        for (size_t j = 0; j < w.size(); ++j) {
            float grad = g[j] + weight_decay * w[j];
            v[j] = momentum * v[j] - lr * grad;
            w[j] += v[j];
        }
    }
}

Tensor cutmix_batch(const Tensor& images, Rng& rng) {
    int n = images.dim(0), h = images.dim(2), w = images.dim(3);
    Tensor out = images;
    for (int b = 0; b < n; ++b) {
        int donor = rng.uniform_int(0, n - 1);
        float lam = rng.uniform();
        int bw = static_cast<int>(w * std::sqrt(1.f - lam));
        int bh = static_cast<int>(h * std::sqrt(1.f - lam));
        if (bw < 1 || bh < 1) continue;
        int x0 = rng.uniform_int(0, w - bw);
        int y0 = rng.uniform_int(0, h - bh);
        for (int c = 0; c < images.dim(1); ++c)
            for (int y = y0; y < y0 + bh; ++y)
                for (int x = x0; x < x0 + bw; ++x)
                    out.at(b, c, y, x) = images.at(donor, c, y, x);
    }
    return out;
}

}  // namespace

ModelHandle train_reference_model(const TrainRecipe& recipe, const Dataset& train,
                                  const Dataset& heldout) {
    if (train.size() == 0) throw ConfigError("empty training set");
    for (int l : train.labels)
        if (l < 0 || l >= train.num_classes) throw ConfigError("label out of range");
    if (recipe.kind == TrainRecipe::Kind::Distilled && !recipe.teacher.valid())
        throw ConfigError("distilled recipe requires a teacher model");

    auto def = build_architecture(recipe.architecture_id, train.num_classes,
                                  train.images.dim(2), recipe.seed);
    ModelHandle model(def);  // shares the mutable def during training
    auto params = def->params();
    SgdState opt;
    Rng shuffle_rng = Rng::substream(recipe.seed, 0x5467);
    Rng aug_rng = Rng::substream(recipe.seed, 0xC07A);

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<float> curve;
    float lr = recipe.lr;

    for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
        if (std::find(recipe.lr_drop_epochs.begin(), recipe.lr_drop_epochs.end(), epoch) !=
            recipe.lr_drop_epochs.end())
            lr *= recipe.lr_drop_factor;
        // Fisher-Yates with the seeded stream
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);

        for (size_t start = 0; start < train.size(); start += recipe.batch_size) {
            size_t end = std::min(train.size(), start + recipe.batch_size);
            std::vector<int> idx(order.begin() + start, order.begin() + end);
            Dataset batch = train.subset(idx);
            Tensor inputs = batch.images;

            if (recipe.kind == TrainRecipe::Kind::PgdAdversarial) {
                inputs = pgd_perturb(model, inputs, batch.labels, recipe.at_norm, recipe.at_eps,
                                     recipe.at_steps, recipe.at_step_size);
            } else if (recipe.kind == TrainRecipe::Kind::Distilled && recipe.cutmix) {
                inputs = cutmix_batch(inputs, aug_rng);
            }

            ForwardTrace trace;
            Tensor logits = forward(model, inputs, &trace);
            Tensor gl;
            if (recipe.kind == TrainRecipe::Kind::Distilled) {
                float temp = recipe.distill_temperature;
                Tensor t_logits = forward(recipe.teacher, inputs);
                Tensor t_scaled = t_logits;
                t_scaled.scale(1.f / temp);
                Tensor soft = softmax_rows(t_scaled);
                Tensor s_scaled = logits;
                s_scaled.scale(1.f / temp);
                gl = softmax_rows(s_scaled);
                gl.add_scaled(soft, -1.f);
                gl.scale(1.f / temp);
            } else {
                gl = cross_entropy_grad(logits, batch.labels);
            }
            gl.scale(1.f / static_cast<float>(idx.size()));

            GradStore gs;
            backward_to_input(model, trace, gl, nullptr, &gs);
            std::vector<Tensor*> grad_ptrs;
            std::deque<Tensor> zero_backing;
            for (auto& st : def->stages)
                for (auto& l : st.layers) l->collect_grads(gs, zero_backing, grad_ptrs);
            for (auto& l : def->head) l->collect_grads(gs, zero_backing, grad_ptrs);
            std::vector<const Tensor*> grads(grad_ptrs.begin(), grad_ptrs.end());
            sgd_step(params, grads, opt, lr, recipe.momentum, recipe.weight_decay);
        }
        curve.push_back(accuracy(model, heldout));
    }

    if (recipe.accuracy_floor > 0.f && (curve.empty() || curve.back() < recipe.accuracy_floor)) {
        std::string msg = "accuracy floor unmet: got " +
                          std::to_string(curve.empty() ? 0.f : curve.back()) + ", want " +
                          std::to_string(recipe.accuracy_floor);
        throw TrainingError(msg, curve);
    }
    if (recipe.kind == TrainRecipe::Kind::PgdAdversarial && recipe.robust_floor > 0.f) {
        float racc = robust_accuracy_pgd(model, heldout, recipe.at_norm, recipe.at_eps,
                                         recipe.at_steps, recipe.at_step_size);
        if (racc < recipe.robust_floor)
            throw TrainingError("robust accuracy floor unmet: got " + std::to_string(racc), curve);
    }
    return ModelHandle(std::shared_ptr<const ModelDef>(def));
}

}  // namespace tbench
