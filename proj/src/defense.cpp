#include "tbench/defense.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tbench/errors.hpp"
#include "tbench/image.hpp"
#include "tbench/metrics.hpp"
#include "tbench/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tbench {

Tensor bdr(const Tensor& image, int depth) {
    if (depth < 1 || depth > 8) throw ConfigError("bit depth must be in [1,8]");
    float levels = static_cast<float>((1 << depth) - 1);
    Tensor out = image;
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = std::round(out[i] * levels) / levels;
    return out;
}

Tensor haar_denoise(const Tensor& image, float sigma) {
    int n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
    if (h % 2 || w % 2) throw ConfigError("haar_denoise requires even image dimensions");
    if (sigma == 0.f) return image;
    Tensor out = image;
    const float inv_sqrt2 = static_cast<float>(1.0 / std::sqrt(2.0));
    std::vector<float> buf(static_cast<size_t>(h) * w);
    auto soft = [sigma](float v) {
        float a = std::fabs(v) - sigma;
        return a > 0.f ? (v > 0.f ? a : -a) : 0.f;
    };
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k) {
            // rows
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w / 2; ++x) {
                    float a = out.at(b, k, y, 2 * x), d = out.at(b, k, y, 2 * x + 1);
                    buf[y * w + x] = (a + d) * inv_sqrt2;
                    buf[y * w + w / 2 + x] = (a - d) * inv_sqrt2;
                }
            // columns
            std::vector<float> buf2(buf.size());
            for (int x = 0; x < w; ++x)
                for (int y = 0; y < h / 2; ++y) {
                    float a = buf[(2 * y) * w + x], d = buf[(2 * y + 1) * w + x];
                    buf2[y * w + x] = (a + d) * inv_sqrt2;
                    buf2[(h / 2 + y) * w + x] = (a - d) * inv_sqrt2;
                }
            // soft-threshold detail bands (everything except the LL quadrant)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (y >= h / 2 || x >= w / 2) buf2[y * w + x] = soft(buf2[y * w + x]);
            // inverse columns
            for (int x = 0; x < w; ++x)
                for (int y = 0; y < h / 2; ++y) {
                    float s = buf2[y * w + x], d = buf2[(h / 2 + y) * w + x];
                    buf[(2 * y) * w + x] = (s + d) * inv_sqrt2;
                    buf[(2 * y + 1) * w + x] = (s - d) * inv_sqrt2;
                }
            // inverse rows
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w / 2; ++x) {
                    float s = buf[y * w + x], d = buf[y * w + w / 2 + x];
                    float v0 = (s + d) * inv_sqrt2, v1 = (s - d) * inv_sqrt2;
                    out.at(b, k, y, 2 * x) = std::min(std::max(v0, 0.f), 1.f);
                    out.at(b, k, y, 2 * x + 1) = std::min(std::max(v1, 0.f), 1.f);
                }
        }
    return out;
}

Tensor pixel_deflection(const Tensor& image, int count, int window, float sigma, Rng& rng,
                        const Tensor* saliency) {
    if (window % 2 == 0 || window < 1) throw ConfigError("deflection window must be odd");
    if (count < 0) throw ConfigError("deflection count must be >= 0");
    int h = image.dim(2), w = image.dim(3);
    Tensor out = image;
    // sampling weights: inversely proportional to saliency
    std::vector<double> cdf(static_cast<size_t>(h) * w);
    double total = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = saliency ? (*saliency).at(0, 0, y, x) : 0.0;
            total += (1.0 - std::min(std::max(s, 0.0), 1.0)) + 1e-3;
            cdf[y * w + x] = total;
        }
    int half = window / 2;
    for (int i = 0; i < count; ++i) {
        double u = rng.uniform() * total;
        size_t pos = std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
        if (pos >= cdf.size()) pos = cdf.size() - 1;
        int y = static_cast<int>(pos) / w, x = static_cast<int>(pos) % w;
        int ny = std::clamp(y + rng.uniform_int(-half, half), 0, h - 1);
        int nx = std::clamp(x + rng.uniform_int(-half, half), 0, w - 1);
        for (int c = 0; c < image.dim(1); ++c) out.at(0, c, y, x) = out.at(0, c, ny, nx);
    }
    return haar_denoise(out, sigma);
}

Tensor resize_pad(const Tensor& image, float lo, float hi, Rng& rng, int out_size) {
    if (lo > hi || lo <= 0.f) throw ConfigError("bad resize range");
    int h = image.dim(2);
    float s = rng.uniform(lo, hi);
    int nh = static_cast<int>(s * h);
    int canvas = static_cast<int>(std::ceil(hi * h));
    Tensor r = resize_bilinear(image, nh, nh);
    int top = canvas > nh ? rng.uniform_int(0, canvas - nh) : 0;
    int left = canvas > nh ? rng.uniform_int(0, canvas - nh) : 0;
    Tensor padded = pad_to(r, canvas, canvas, top, left);
    return resize_bilinear(padded, out_size, out_size);
}

// ------------------------------------------------------------------ purifier

static std::vector<std::unique_ptr<Layer>> build_denoiser(uint64_t seed) {
    Rng rng = Rng::substream(seed, 0xDE17);
    std::vector<std::unique_ptr<Layer>> net;
    auto conv = [&rng](int ic, int oc, float scale = 1.f) {
        auto c = std::make_unique<Conv2d>(ic, oc, 3, 1, 1);
        c->init_he(rng);
        if (scale != 1.f) c->weight.scale(scale);
        return c;
    };
    net.push_back(conv(3, 16));
    net.push_back(std::make_unique<ReLU>());
    net.push_back(conv(16, 16));
    net.push_back(std::make_unique<ReLU>());
    net.push_back(conv(16, 16));
    net.push_back(std::make_unique<ReLU>());
    net.push_back(conv(16, 3, 0.1f));
    return net;
}

Tensor Purifier::denoise(const Tensor& x) const {
    RefineCtx rc;
    Tensor residual = run_layers_forward(net, x, rc, nullptr);
    Tensor out = x + residual;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(out[i], 0.f), 1.f);
    return out;
}

Tensor Purifier::purify(const Tensor& x, uint64_t call_seed) const {
    if (recipe != Recipe::DiffPure) return denoise(x);
    float sigma = sigma_max * static_cast<float>(inference_t) / schedule_steps;
    Rng rng = Rng::substream(seed ^ call_seed, 0xD1F2);
    Tensor noisy = x;
    for (size_t i = 0; i < noisy.size(); ++i)
        noisy[i] = std::min(std::max(noisy[i] + sigma * rng.normal(), 0.f), 1.f);
    return denoise(noisy);
}

std::vector<Tensor*> Purifier::params() {
    std::vector<Tensor*> out;
    for (auto& l : net) l->collect_params(out);
    return out;
}

namespace {
struct AdamState {
    std::vector<Tensor> m, v;
    int t = 0;
};
void adam_step(std::vector<Tensor*>& params, const std::vector<Tensor*>& grads, AdamState& st,
               float lr) {
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    if (st.m.empty())
        for (Tensor* p : params) {
            st.m.emplace_back(Tensor(p->shape()));
            st.v.emplace_back(Tensor(p->shape()));
        }
    ++st.t;
    float c1 = 1.f - std::pow(b1, static_cast<float>(st.t));
    float c2 = 1.f - std::pow(b2, static_cast<float>(st.t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& w = *params[i];
        const Tensor& g = *grads[i];
        for (size_t j = 0; j < w.size(); ++j) {
            st.m[i][j] = b1 * st.m[i][j] + (1.f - b1) * g[j];
            st.v[i][j] = b2 * st.v[i][j] + (1.f - b2) * g[j] * g[j];
            w[j] -= lr * (st.m[i][j] / c1) / (std::sqrt(st.v[i][j] / c2) + eps);
        }
    }
}
}  // namespace

Purifier train_purifier(const PurifierTrainConfig& cfg, const Dataset& clean,
                        const AdversarialBatch* attack_pool, const ModelHandle& classifier) {
    bool needs_pool = cfg.recipe != Purifier::Recipe::DiffPure;
    if (needs_pool && (!attack_pool || attack_pool->labels.empty()))
        throw ConfigError("HGD/NRP purifier training needs an adversarial attack pool");

    Purifier p;
    p.recipe = cfg.recipe;
    p.net = build_denoiser(cfg.seed);
    p.sigma_max = cfg.sigma_max;
    p.schedule_steps = cfg.schedule_steps;
    p.inference_t = cfg.inference_t;
    p.seed = cfg.seed;
    auto params = p.params();
    AdamState opt;
    Rng rng = Rng::substream(cfg.seed, 0xD3A0);

    size_t n = needs_pool ? attack_pool->labels.size() : clean.size();
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
        for (size_t start = 0; start < n; start += cfg.batch_size) {
            size_t end = std::min(n, start + cfg.batch_size);
            std::vector<int> idx(order.begin() + start, order.begin() + end);
            int bsz = static_cast<int>(idx.size());

            Tensor noisy({bsz, 3, clean.images.dim(2), clean.images.dim(3)});
            Tensor target_img(noisy.shape());
            for (int b = 0; b < bsz; ++b) {
                if (needs_pool) {
                    noisy.set_slice_n(b, attack_pool->adversarials.slice_n(idx[b]));
                    target_img.set_slice_n(b, attack_pool->originals.slice_n(idx[b]));
                } else {
                    Tensor x = clean.images.slice_n(idx[b]);
                    target_img.set_slice_n(b, x);
                    int t = rng.uniform_int(1, cfg.schedule_steps);
                    float sigma = cfg.sigma_max * static_cast<float>(t) / cfg.schedule_steps;
                    for (size_t j = 0; j < x.size(); ++j)
                        x[j] = std::min(std::max(x[j] + sigma * rng.normal(), 0.f), 1.f);
                    noisy.set_slice_n(b, x);
                }
            }

            RefineCtx rc;
            std::vector<LayerCtx> ctxs;
            Tensor residual = run_layers_forward(p.net, noisy, rc, &ctxs);
            Tensor denoised = noisy + residual;
            Tensor range_mask(denoised.shape());
            for (size_t j = 0; j < denoised.size(); ++j) {
                if (denoised[j] < 0.f) denoised[j] = 0.f;
                else if (denoised[j] > 1.f) denoised[j] = 1.f;
                else range_mask[j] = 1.f;
            }

            // image-space L2 term (NRP, DiffPure)
            Tensor grad_out(denoised.shape());
            float img_w = cfg.recipe == Purifier::Recipe::HGD ? 0.f : 1.f;
            if (img_w > 0.f) {
                for (size_t j = 0; j < grad_out.size(); ++j)
                    grad_out[j] = img_w * 2.f * (denoised[j] - target_img[j]) / denoised.size();
            }
            // feature-space term (HGD, NRP)
            if (cfg.recipe != Purifier::Recipe::DiffPure) {
                float fw = cfg.recipe == Purifier::Recipe::HGD ? 1.f : cfg.nrp_feature_weight;
                auto ref = forward_with_taps(classifier, target_img, {cfg.feature_layer});
                ForwardTrace trace;
                forward(classifier, denoised, &trace);
                int si = classifier.def().stage_index(cfg.feature_layer);
                Tensor tap_grad = trace.stage_outputs[si] - ref.taps.at(cfg.feature_layer);
                tap_grad.scale(2.f * fw / tap_grad.size());
                std::map<std::string, Tensor> inject{{cfg.feature_layer, tap_grad}};
                Tensor zeros(trace.logits.shape());
                Tensor gfeat = backward_to_input(classifier, trace, zeros, &inject);
                grad_out.add_scaled(gfeat, 1.f);
            }

            for (size_t j = 0; j < grad_out.size(); ++j) grad_out[j] *= range_mask[j];
            GradStore gs;
            run_layers_backward(p.net, grad_out, rc, ctxs, &gs);
            std::vector<Tensor*> grad_ptrs;
            std::deque<Tensor> backing;
            for (auto& l : p.net) l->collect_grads(gs, backing, grad_ptrs);
            adam_step(params, grad_ptrs, opt, cfg.lr);
        }
    }

    if (cfg.psnr_gain_floor > 0.f && needs_pool) {
        // PSNR of purified vs clean must beat PSNR of adversarial vs clean
        double before = 0.0, after = 0.0;
        size_t count = std::min<size_t>(attack_pool->labels.size(), 64);
        for (size_t i = 0; i < count; ++i) {
            Tensor adv = attack_pool->adversarials.slice_n(static_cast<int>(i));
            Tensor cl = attack_pool->originals.slice_n(static_cast<int>(i));
            Tensor pur = p.denoise(adv);
            before += psnr(cl, adv);
            after += psnr(cl, pur);
        }
        double gain = (after - before) / count;
        if (gain < cfg.psnr_gain_floor)
            throw TrainingError("purifier denoising floor unmet: psnr gain " +
                                    std::to_string(gain),
                                {static_cast<float>(gain)});
    }
    return p;
}

void save_purifier(const Purifier& p, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["schema_version"] = 1;
    manifest["recipe"] = p.recipe == Purifier::Recipe::HGD   ? "HGD"
                         : p.recipe == Purifier::Recipe::NRP ? "NRP"
                                                             : "DiffPure";
    manifest["sigma_max"] = p.sigma_max;
    manifest["schedule_steps"] = p.schedule_steps;
    manifest["inference_t"] = p.inference_t;
    manifest["seed"] = p.seed;
    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    std::ofstream pf(dir + "/params.bin", std::ios::binary);
    for (const Tensor* t : const_cast<Purifier&>(p).params())
        pf.write(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(float));
}

Purifier load_purifier(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("missing purifier manifest: " + dir);
    json manifest = json::parse(mf);
    Purifier p;
    std::string r = manifest["recipe"].get<std::string>();
    p.recipe = r == "HGD" ? Purifier::Recipe::HGD
               : r == "NRP" ? Purifier::Recipe::NRP
                            : Purifier::Recipe::DiffPure;
    p.sigma_max = manifest["sigma_max"].get<float>();
    p.schedule_steps = manifest["schedule_steps"].get<int>();
    p.inference_t = manifest["inference_t"].get<int>();
    p.seed = manifest["seed"].get<uint64_t>();
    p.net = build_denoiser(p.seed);
    std::ifstream pf(dir + "/params.bin", std::ios::binary);
    if (!pf) throw IoError("missing purifier params: " + dir);
    for (Tensor* t : p.params())
        pf.read(reinterpret_cast<char*>(t->data()), t->size() * sizeof(float));
    if (!pf) throw IoError("truncated purifier params: " + dir);
    return p;
}

// ------------------------------------------------------------------ defend

Tensor apply_defense_transform(const DefenseSpec& defense, const Tensor& image,
                               const ModelHandle& target, size_t image_index) {
    switch (defense.kind) {
        case DefenseSpec::Kind::None:
        case DefenseSpec::Kind::RobustModel:
            return image;
        case DefenseSpec::Kind::BDR:
            return bdr(image, defense.bdr_depth);
        case DefenseSpec::Kind::PD: {
            Rng rng = Rng::substream(defense.seed, 0xDEF1, image_index);
            if (defense.pd_use_saliency) {
                auto preds = predict(target, image);
                Tensor sal = gradcam(target, image, preds[0]);
                return pixel_deflection(image, defense.pd_count, defense.pd_window,
                                        defense.pd_sigma, rng, &sal);
            }
            return pixel_deflection(image, defense.pd_count, defense.pd_window, defense.pd_sigma,
                                    rng, nullptr);
        }
        case DefenseSpec::Kind::RP: {
            Rng rng = Rng::substream(defense.seed, 0xDEF2, image_index);
            return resize_pad(image, defense.rp_lo, defense.rp_hi, rng, target.input_size());
        }
        case DefenseSpec::Kind::Purifier: {
            if (!defense.purifier) throw ConfigError("purifier defense without a purifier handle");
            return defense.purifier->purify(image, image_index);
        }
    }
    throw ConfigError("unhandled defense kind");
}

std::vector<int> defend_then_classify(const DefenseSpec& defense, const AdversarialBatch& batch,
                                      const ModelHandle& target, int workers) {
    const ModelHandle& model =
        defense.kind == DefenseSpec::Kind::RobustModel ? defense.robust_model : target;
    size_t n = batch.labels.size();
    std::vector<int> preds(n);
    parallel_for(n, workers, [&](size_t i) {
        Tensor x = batch.adversarials.slice_n(static_cast<int>(i));
        Tensor defended = apply_defense_transform(defense, x, model, i);
        preds[i] = predict(model, defended)[0];
    });
    return preds;
}

}  // namespace tbench
