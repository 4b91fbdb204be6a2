#include "tbench/generative.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tbench/errors.hpp"
#include "tbench/image.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tbench {

GenLoss gen_loss_from_string(const std::string& s) {
    if (s == "GAP_CE") return GenLoss::GAP_CE;
    if (s == "CDA_relativistic_CE") return GenLoss::CDA_RelativisticCE;
    if (s == "GAPF_feature") return GenLoss::GAPF_Feature;
    if (s == "BIA_feature_RN") return GenLoss::BIA_FeatureRN;
    if (s == "TTP_distribution") return GenLoss::TTP_Distribution;
    throw ConfigError("unknown generator loss: " + s);
}

std::string gen_loss_to_string(GenLoss l) {
    switch (l) {
        case GenLoss::GAP_CE: return "GAP_CE";
        case GenLoss::CDA_RelativisticCE: return "CDA_relativistic_CE";
        case GenLoss::GAPF_Feature: return "GAPF_feature";
        case GenLoss::BIA_FeatureRN: return "BIA_feature_RN";
        case GenLoss::TTP_Distribution: return "TTP_distribution";
    }
    return "?";
}

static std::unique_ptr<Layer> gconv(int ic, int oc, int k, int s, int p, Rng& rng, float scale = 1.f) {
    auto c = std::make_unique<Conv2d>(ic, oc, k, s, p);
    c->init_he(rng);
    if (scale != 1.f) c->weight.scale(scale);
    return c;
}

GeneratorNet::GeneratorNet(uint64_t init_seed) {
    Rng rng = Rng::substream(init_seed, 0x6E4E);
    // 3 downsample blocks
    layers.push_back(gconv(3, 16, 3, 2, 1, rng));
    layers.push_back(std::make_unique<ReLU>());
    layers.push_back(gconv(16, 32, 3, 2, 1, rng));
    layers.push_back(std::make_unique<ReLU>());
    layers.push_back(gconv(32, 64, 3, 2, 1, rng));
    layers.push_back(std::make_unique<ReLU>());
    // 3 residual blocks
    for (int i = 0; i < 3; ++i) {
        std::vector<std::unique_ptr<Layer>> branch;
        branch.push_back(gconv(64, 64, 3, 1, 1, rng));
        branch.push_back(std::make_unique<ReLU>());
        branch.push_back(gconv(64, 64, 3, 1, 1, rng));
        layers.push_back(std::make_unique<ResidualBlock>(
            std::move(branch), std::vector<std::unique_ptr<Layer>>{}, true, false, -1, -1));
    }
    // 3 upsample blocks
    layers.push_back(std::make_unique<UpsampleNearest2>());
    layers.push_back(gconv(64, 32, 3, 1, 1, rng));
    layers.push_back(std::make_unique<ReLU>());
    layers.push_back(std::make_unique<UpsampleNearest2>());
    layers.push_back(gconv(32, 16, 3, 1, 1, rng));
    layers.push_back(std::make_unique<ReLU>());
    layers.push_back(std::make_unique<UpsampleNearest2>());
    layers.push_back(gconv(16, 8, 3, 1, 1, rng));
    layers.push_back(std::make_unique<ReLU>());
    // head starts near zero so early perturbations are small
    layers.push_back(gconv(8, 3, 3, 1, 1, rng, 0.1f));
}

Tensor GeneratorNet::forward(const Tensor& x, std::vector<LayerCtx>* ctxs) const {
    RefineCtx rc;
    return run_layers_forward(layers, x, rc, ctxs);
}

Tensor GeneratorNet::backward(const Tensor& gy, const std::vector<LayerCtx>& ctxs,
                              GradStore& gs) const {
    RefineCtx rc;
    return run_layers_backward(layers, gy, rc, ctxs, &gs);
}

Tensor GeneratorNet::raw_perturbation(const Tensor& x) const { return forward(x, nullptr); }

std::vector<Tensor*> GeneratorNet::params() {
    std::vector<Tensor*> out;
    for (auto& l : layers) l->collect_params(out);
    return out;
}

std::vector<const Tensor*> GeneratorNet::params() const {
    auto mut = const_cast<GeneratorNet*>(this)->params();
    return {mut.begin(), mut.end()};
}

uint64_t GeneratorNet::param_hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (const Tensor* t : params()) {
        const unsigned char* b = reinterpret_cast<const unsigned char*>(t->data());
        for (size_t i = 0; i < t->size() * sizeof(float); ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

// ------------------------------------------------------------------ losses

static Tensor mean_pool_channels(const Tensor& f) {
    int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
    Tensor out({n, 1, h, w});
    for (int b = 0; b < n; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float s = 0.f;
                for (int k = 0; k < c; ++k) s += f.at(b, k, y, x);
                out.at(b, 0, y, x) = s / c;
            }
    return out;
}

GenLossEval gen_loss_eval(const GenTrainConfig& cfg, const ModelHandle& discriminator,
                          const Tensor& clean, const std::vector<int>& labels, const Tensor& adv,
                          const Tensor* ttp_target_features, Rng* rn_rng) {
    GenLossEval out;
    switch (cfg.loss) {
        case GenLoss::GAP_CE: {
            // minimize -CE(f(x'), y)
            ForwardTrace trace;
            Tensor logits = forward(discriminator, adv, &trace);
            out.value = -cross_entropy_sum(logits, labels);
            Tensor gl = cross_entropy_grad(logits, labels);
            gl.scale(-1.f);
            out.grad_adv = backward_to_input(discriminator, trace, gl);
            return out;
        }
        case GenLoss::CDA_RelativisticCE: {
            // minimize -CE(f(x') - f(x), y); clean logits are a detached baseline
            Tensor clean_logits = forward(discriminator, clean);
            ForwardTrace trace;
            Tensor logits = forward(discriminator, adv, &trace);
            Tensor rel = logits - clean_logits;
            out.value = -cross_entropy_sum(rel, labels);
            Tensor gl = cross_entropy_grad(rel, labels);
            gl.scale(-1.f);
            out.grad_adv = backward_to_input(discriminator, trace, gl);
            return out;
        }
        case GenLoss::GAPF_Feature:
        case GenLoss::BIA_FeatureRN: {
            bool bia = cfg.loss == GenLoss::BIA_FeatureRN;
            Tensor adv_in = adv, clean_in = clean;
            float rn_std = 1.f;
            if (bia) {
                // random normalization: per-step affine draw simulating an
                // unknown input distribution
                if (!rn_rng) throw ConfigError("BIA loss needs an RNG for random normalization");
                float mu = rn_rng->uniform(0.3f, 0.7f);
                rn_std = rn_rng->uniform(0.7f, 1.4f);
                auto apply = [&](Tensor& t) {
                    for (size_t i = 0; i < t.size(); ++i) t[i] = (t[i] - mu) / rn_std;
                };
                apply(adv_in);
                apply(clean_in);
            }
            auto ref = forward_with_taps(discriminator, clean_in, {cfg.feature_layer});
            ForwardTrace trace;
            forward(discriminator, adv_in, &trace);
            int si = discriminator.def().stage_index(cfg.feature_layer);
            const Tensor& fa = trace.stage_outputs[si];
            const Tensor& fc = ref.taps.at(cfg.feature_layer);
            Tensor tap_grad;
            if (bia) {
                Tensor pa = mean_pool_channels(fa);
                Tensor pc = mean_pool_channels(fc);
                Tensor d = pa - pc;
                double v = 0.0;
                for (size_t i = 0; i < d.size(); ++i) v += static_cast<double>(d[i]) * d[i];
                out.value = -v;
                // d(-||pa-pc||^2)/dfa = -2 (pa - pc) / C broadcast over channels
                int c = fa.dim(1);
                tap_grad = Tensor(fa.shape());
                for (int b = 0; b < fa.dim(0); ++b)
                    for (int k = 0; k < c; ++k)
                        for (int y = 0; y < fa.dim(2); ++y)
                            for (int x = 0; x < fa.dim(3); ++x)
                                tap_grad.at(b, k, y, x) = -2.f * d.at(b, 0, y, x) / c;
            } else {
                Tensor d = fa - fc;
                double v = 0.0;
                for (size_t i = 0; i < d.size(); ++i) v += static_cast<double>(d[i]) * d[i];
                out.value = -v;
                tap_grad = d;
                tap_grad.scale(-2.f);
            }
            std::map<std::string, Tensor> inject{{cfg.feature_layer, tap_grad}};
            Tensor zeros(trace.logits.shape());
            out.grad_adv = backward_to_input(discriminator, trace, zeros, &inject);
            if (bia && rn_std != 1.f) out.grad_adv.scale(1.f / rn_std);
            return out;
        }
        case GenLoss::TTP_Distribution: {
            if (!ttp_target_features) throw ConfigError("TTP loss needs target class features");
            // minimize || mean pooled-features(x') - target class feature mean ||^2
            ForwardTrace trace;
            forward(discriminator, adv, &trace);
            const Tensor& pooled = trace.pooled;  // {N, C, 1, 1}
            int n = pooled.dim(0), c = pooled.dim(1);
            Tensor mean({1, c, 1, 1});
            for (int b = 0; b < n; ++b)
                for (int k = 0; k < c; ++k) mean[k] += pooled.at(b, k, 0, 0);
            mean.scale(1.f / n);
            Tensor d = mean - *ttp_target_features;
            double v = 0.0;
            for (int k = 0; k < c; ++k) v += static_cast<double>(d[k]) * d[k];
            out.value = v;
            Tensor tap_grad(pooled.shape());
            for (int b = 0; b < n; ++b)
                for (int k = 0; k < c; ++k) tap_grad.at(b, k, 0, 0) = 2.f * d[k] / n;
            std::map<std::string, Tensor> inject{{"pool", tap_grad}};
            Tensor zeros(trace.logits.shape());
            out.grad_adv = backward_to_input(discriminator, trace, zeros, &inject);
            return out;
        }
    }
    throw ConfigError("unhandled generator loss");
}

// ------------------------------------------------------------------ training

namespace {

struct AdamState {
    std::vector<Tensor> m, v;
    int t = 0;
};

void adam_step(std::vector<Tensor*>& params, const std::vector<Tensor*>& grads, AdamState& st,
               float lr) {
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    if (st.m.empty()) {
        for (Tensor* p : params) {
            st.m.emplace_back(Tensor(p->shape()));
            st.v.emplace_back(Tensor(p->shape()));
        }
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
            float mh = st.m[i][j] / c1, vh = st.v[i][j] / c2;
            w[j] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

Tensor smooth_box3(const Tensor& x) {
    BoxFilter3 f;
    RefineCtx rc;
    return f.forward(x, rc, nullptr);
}

}  // namespace

GeneratorNet train_generator(const GenTrainConfig& cfg, const Dataset& train,
                             const ModelHandle& discriminator) {
    if (cfg.eps_train <= 0.f || cfg.eps_train > 1.f)
        throw ConfigError("eps_train must be in (0,1]");
    if (cfg.loss == GenLoss::TTP_Distribution &&
        (cfg.ttp_target_class < 0 || cfg.ttp_target_class >= train.num_classes))
        throw ConfigError("TTP requires a valid target class");

    uint64_t disc_hash_before = discriminator.param_hash();
    GeneratorNet gen(cfg.seed);
    gen.config = cfg;
    auto params = gen.params();
    AdamState opt;
    Rng shuffle_rng = Rng::substream(cfg.seed, 0x6E55);
    Rng rn_rng = Rng::substream(cfg.seed, 0x6EB1);

    // TTP: mean pooled features of target-class training images
    Tensor ttp_feats;
    if (cfg.loss == GenLoss::TTP_Distribution) {
        std::vector<int> members;
        for (size_t i = 0; i < train.size(); ++i)
            if (train.labels[i] == cfg.ttp_target_class) members.push_back(static_cast<int>(i));
        if (members.empty()) throw ConfigError("TTP: no images of the target class");
        Dataset sub = train.subset(members);
        auto taps = forward_with_taps(discriminator, sub.images, {"pool"});
        const Tensor& pooled = taps.taps.at("pool");
        int c = pooled.dim(1);
        ttp_feats = Tensor({1, c, 1, 1});
        for (int b = 0; b < pooled.dim(0); ++b)
            for (int k = 0; k < c; ++k) ttp_feats[k] += pooled.at(b, k, 0, 0);
        ttp_feats.scale(1.f / pooled.dim(0));
    }

    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);
        for (size_t start = 0; start < train.size(); start += cfg.batch_size) {
            size_t end = std::min(train.size(), start + cfg.batch_size);
            std::vector<int> idx(order.begin() + start, order.begin() + end);
            Dataset batch = train.subset(idx);

            std::vector<LayerCtx> ctxs;
            Tensor raw = gen.forward(batch.images, &ctxs);
            Tensor delta = raw;
            Tensor smoothed;
            bool smooth = cfg.loss == GenLoss::TTP_Distribution && cfg.ttp_smooth_projection;
            if (smooth) delta = smooth_box3(raw);
            // clip to the training ball, remembering pass-through positions
            Tensor clip_mask(delta.shape());
            for (size_t j = 0; j < delta.size(); ++j) {
                if (delta[j] > cfg.eps_train) {
                    delta[j] = cfg.eps_train;
                } else if (delta[j] < -cfg.eps_train) {
                    delta[j] = -cfg.eps_train;
                } else {
                    clip_mask[j] = 1.f;
                }
            }
            Tensor adv = batch.images + delta;
            Tensor range_mask(adv.shape());
            for (size_t j = 0; j < adv.size(); ++j) {
                if (adv[j] < 0.f) {
                    adv[j] = 0.f;
                } else if (adv[j] > 1.f) {
                    adv[j] = 1.f;
                } else {
                    range_mask[j] = 1.f;
                }
            }

            GenLossEval ev = gen_loss_eval(cfg, discriminator, batch.images, batch.labels, adv,
                                           ttp_feats.empty() ? nullptr : &ttp_feats, &rn_rng);
            Tensor g = ev.grad_adv;
            for (size_t j = 0; j < g.size(); ++j) g[j] *= range_mask[j] * clip_mask[j];
            if (smooth) g = smooth_box3(g);  // symmetric kernel: adjoint = filter

            GradStore gs;
            gen.backward(g, ctxs, gs);
            std::vector<Tensor*> grad_ptrs;
            std::deque<Tensor> backing;
            for (auto& l : gen.layers) l->collect_grads(gs, backing, grad_ptrs);
            adam_step(params, grad_ptrs, opt, cfg.lr);
        }
    }

    if (discriminator.param_hash() != disc_hash_before)
        throw std::logic_error("discriminator parameter drift detected during generator training");
    return gen;
}

AdversarialBatch generate(const GeneratorNet& gen, const Tensor& images,
                          const std::vector<int>& labels, float eps_test) {
    if (eps_test <= 0.f || eps_test > 1.f) throw ConfigError("eps_test must be in (0,1]");
    AdversarialBatch out;
    out.originals = images;
    out.labels = labels;
    out.attack_id = gen_loss_to_string(gen.config.loss);
    out.epsilon = eps_test;
    out.seed = gen.config.seed;
    Tensor raw = gen.raw_perturbation(images);
    if (gen.config.loss == GenLoss::TTP_Distribution && gen.config.ttp_smooth_projection)
        raw = smooth_box3(raw);
    Tensor adv = images;
    for (size_t j = 0; j < raw.size(); ++j) {
        float d = std::min(std::max(raw[j], -eps_test), eps_test);
        adv[j] = std::min(std::max(adv[j] + d, 0.f), 1.f);
    }
    out.adversarials = quantize8(adv);
    return out;
}

EpsSweepResult eps_sweep(const GenTrainConfig& base_cfg, const Dataset& train_set,
                         const Dataset& eval_set, const ModelHandle& discriminator,
                         const ModelHandle& target, const std::vector<float>& eps_train_list,
                         const std::vector<float>& eps_test_list, const std::string& cache_dir) {
    EpsSweepResult res;
    res.eps_train_values = eps_train_list;
    res.eps_test_values = eps_test_list;
    for (float et : eps_train_list) {
        GenTrainConfig cfg = base_cfg;
        cfg.eps_train = et;
        GeneratorNet gen;
        std::string key = cache_dir + "/gen_" + gen_loss_to_string(cfg.loss) + "_" +
                          std::to_string(static_cast<int>(std::lround(et * 255.f)));
        if (!cache_dir.empty() && fs::exists(key + "/manifest.json")) {
            gen = load_generator(key);
        } else {
            gen = train_generator(cfg, train_set, discriminator);
            if (!cache_dir.empty()) save_generator(gen, key);
        }
        std::vector<double> row;
        for (float ev : eps_test_list) {
            AdversarialBatch batch = generate(gen, eval_set.images, eval_set.labels, ev);
            auto preds = predict(target, batch.adversarials);
            size_t wrong = 0;
            for (size_t i = 0; i < preds.size(); ++i)
                if (preds[i] != eval_set.labels[i]) ++wrong;
            row.push_back(static_cast<double>(wrong) / preds.size());
        }
        res.success.push_back(std::move(row));
    }
    return res;
}

double perturbation_cosine_similarity(const GeneratorNet& gen, const Tensor& images,
                                      float eps_test) {
    Tensor raw = gen.raw_perturbation(images);
    int n = raw.dim(0);
    size_t stride = raw.size() / n;
    for (size_t j = 0; j < raw.size(); ++j)
        raw[j] = std::min(std::max(raw[j], -eps_test), eps_test);
    double total = 0.0;
    int pairs = 0;
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) {
            double dot = 0, na = 0, nb = 0;
            for (size_t s = 0; s < stride; ++s) {
                double va = raw[a * stride + s], vb = raw[b * stride + s];
                dot += va * vb;
                na += va * va;
                nb += vb * vb;
            }
            if (na > 0 && nb > 0) {
                total += dot / (std::sqrt(na) * std::sqrt(nb));
                ++pairs;
            }
        }
    return pairs ? total / pairs : 0.0;
}

void save_generator(const GeneratorNet& gen, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["schema_version"] = 1;
    manifest["loss"] = gen_loss_to_string(gen.config.loss);
    manifest["eps_train"] = gen.config.eps_train;
    manifest["epochs"] = gen.config.epochs;
    manifest["lr"] = gen.config.lr;
    manifest["batch_size"] = gen.config.batch_size;
    manifest["seed"] = gen.config.seed;
    manifest["feature_layer"] = gen.config.feature_layer;
    manifest["ttp_target_class"] = gen.config.ttp_target_class;
    manifest["ttp_smooth_projection"] = gen.config.ttp_smooth_projection;
    manifest["param_hash"] = gen.param_hash();
    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
    std::ofstream pf(dir + "/params.bin", std::ios::binary);
    for (const Tensor* t : gen.params())
        pf.write(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(float));
}

GeneratorNet load_generator(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("missing generator manifest: " + dir);
    json manifest = json::parse(mf);
    GenTrainConfig cfg;
    cfg.loss = gen_loss_from_string(manifest["loss"].get<std::string>());
    cfg.eps_train = manifest["eps_train"].get<float>();
    cfg.epochs = manifest["epochs"].get<int>();
    cfg.lr = manifest["lr"].get<float>();
    cfg.batch_size = manifest["batch_size"].get<int>();
    cfg.seed = manifest["seed"].get<uint64_t>();
    cfg.feature_layer = manifest["feature_layer"].get<std::string>();
    cfg.ttp_target_class = manifest["ttp_target_class"].get<int>();
    cfg.ttp_smooth_projection = manifest["ttp_smooth_projection"].get<bool>();
    GeneratorNet gen(cfg.seed);
    gen.config = cfg;
    std::ifstream pf(dir + "/params.bin", std::ios::binary);
    if (!pf) throw IoError("missing generator params: " + dir);
    for (Tensor* t : gen.params())
        pf.read(reinterpret_cast<char*>(t->data()), t->size() * sizeof(float));
    if (!pf) throw IoError("truncated generator params: " + dir);
    if (gen.param_hash() != manifest["param_hash"].get<uint64_t>())
        throw IoError("generator checkpoint hash mismatch: " + dir);
    return gen;
}

}  // namespace tbench
