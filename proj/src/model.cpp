#include "tbench/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tbench/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tbench {

bool ModelDef::has_residual() const {
    for (const auto& st : stages)
        for (const auto& l : st.layers)
            if (l->has_residual()) return true;
    return false;
}

std::vector<Tensor*> ModelDef::params() {
    std::vector<Tensor*> out;
    for (auto& st : stages)
        for (auto& l : st.layers) l->collect_params(out);
    for (auto& l : head) l->collect_params(out);
    return out;
}

std::vector<const Tensor*> ModelDef::params() const {
    auto mut = const_cast<ModelDef*>(this)->params();
    return {mut.begin(), mut.end()};
}

uint64_t ModelDef::param_hash() const {
    uint64_t h = 1469598103934665603ULL;
    auto mix_bytes = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (const Tensor* t : params()) mix_bytes(t->data(), t->size() * sizeof(float));
    return h;
}

int ModelDef::stage_index(const std::string& name) const {
    for (size_t i = 0; i < stages.size(); ++i)
        if (stages[i].name == name) return static_cast<int>(i);
    return -1;
}

// ------------------------------------------------------------ architectures

static std::unique_ptr<Layer> conv(int ic, int oc, int k, int s, int p, Rng& rng) {
    auto c = std::make_unique<Conv2d>(ic, oc, k, s, p);
    c->init_he(rng);
    return c;
}

static std::unique_ptr<Layer> res_block(int ic, int oc, int stride, int stage, int res_index,
                                        Rng& rng) {
    std::vector<std::unique_ptr<Layer>> branch;
    branch.push_back(conv(ic, oc, 3, stride, 1, rng));
    branch.push_back(std::make_unique<ReLU>(true, stage));
    branch.push_back(conv(oc, oc, 3, 1, 1, rng));
    std::vector<std::unique_ptr<Layer>> skip;
    if (ic != oc || stride != 1) skip.push_back(conv(ic, oc, 1, stride, 0, rng));
    return std::make_unique<ResidualBlock>(std::move(branch), std::move(skip), true, true, stage,
                                           res_index);
}

static std::shared_ptr<ModelDef> build_resnet_small(int num_classes, int input_size, Rng& rng,
                                                    bool feature_denoise) {
    auto def = std::make_shared<ModelDef>();
    def->architecture_id = feature_denoise ? "resnet_small_fd" : "resnet_small";
    def->num_classes = num_classes;
    def->input_size = input_size;

    auto& st = def->stages;
    st.resize(5);
    st[0].name = "conv1_x";
    st[0].layers.push_back(conv(3, 8, 3, 1, 1, rng));
    st[0].layers.push_back(std::make_unique<ReLU>(true, 0));
    st[1].name = "conv2_x";
    st[1].layers.push_back(res_block(8, 8, 1, 1, 0, rng));
    st[2].name = "conv3_x";
    st[2].layers.push_back(res_block(8, 16, 2, 2, 1, rng));
    if (feature_denoise) {
        // denoising unit: x + 1x1 conv of a box-filtered map
        std::vector<std::unique_ptr<Layer>> branch;
        branch.push_back(std::make_unique<BoxFilter3>());
        branch.push_back(conv(16, 16, 1, 1, 0, rng));
        st[2].layers.push_back(std::make_unique<ResidualBlock>(
            std::move(branch), std::vector<std::unique_ptr<Layer>>{}, false, false, 2, -1));
    }
    st[3].name = "conv4_x";
    st[3].layers.push_back(res_block(16, 32, 2, 3, 2, rng));
    st[4].name = "conv5_x";
    st[4].layers.push_back(res_block(32, 32, 1, 4, 3, rng));

    def->head.push_back(std::make_unique<GlobalAvgPool>());
    auto lin = std::make_unique<Linear>(32, num_classes);
    lin->init_he(rng);
    def->head.push_back(std::move(lin));
    return def;
}

static std::shared_ptr<ModelDef> build_convnet_small(int num_classes, int input_size, Rng& rng) {
    auto def = std::make_shared<ModelDef>();
    def->architecture_id = "convnet_small";
    def->num_classes = num_classes;
    def->input_size = input_size;
    auto& st = def->stages;
    st.resize(5);
    st[0].name = "conv1_x";
    st[0].layers.push_back(conv(3, 12, 3, 1, 1, rng));
    st[0].layers.push_back(std::make_unique<ReLU>(true, 0));
    st[1].name = "conv2_x";
    st[1].layers.push_back(std::make_unique<AvgPool2>());
    st[1].layers.push_back(conv(12, 24, 3, 1, 1, rng));
    st[1].layers.push_back(std::make_unique<ReLU>(true, 1));
    st[2].name = "conv3_x";
    st[2].layers.push_back(std::make_unique<AvgPool2>());
    st[2].layers.push_back(conv(24, 32, 3, 1, 1, rng));
    st[2].layers.push_back(std::make_unique<ReLU>(true, 2));
    st[3].name = "conv4_x";
    st[3].layers.push_back(conv(32, 32, 3, 1, 1, rng));
    st[3].layers.push_back(std::make_unique<ReLU>(true, 3));
    st[4].name = "conv5_x";
    st[4].layers.push_back(conv(32, 32, 3, 1, 1, rng));
    st[4].layers.push_back(std::make_unique<ReLU>(true, 4));
    def->head.push_back(std::make_unique<GlobalAvgPool>());
    auto lin = std::make_unique<Linear>(32, num_classes);
    lin->init_he(rng);
    def->head.push_back(std::move(lin));
    return def;
}

std::shared_ptr<ModelDef> build_architecture(const std::string& architecture_id, int num_classes,
                                             int input_size, uint64_t init_seed) {
    Rng rng = Rng::substream(init_seed, 0xA0C4);
    if (architecture_id == "resnet_small") return build_resnet_small(num_classes, input_size, rng, false);
    if (architecture_id == "resnet_small_fd") return build_resnet_small(num_classes, input_size, rng, true);
    if (architecture_id == "convnet_small") return build_convnet_small(num_classes, input_size, rng);
    throw ConfigError("unknown architecture: " + architecture_id);
}

// ------------------------------------------------------------ forward/backward

std::vector<std::string> ModelHandle::layer_names() const {
    std::vector<std::string> names;
    for (const auto& st : def_->stages) names.push_back(st.name);
    names.push_back("pool");
    return names;
}

static RefineCtx resolve_refine(const ModelDef& def, const RefineSpec& spec) {
    RefineCtx rc;
    rc.kind = spec.kind;
    rc.gamma = spec.gamma;
    rc.beta = spec.beta;
    rc.skip_weights = spec.skip_weights.empty() ? nullptr : &spec.skip_weights;
    if (spec.kind == RefineSpec::Kind::LinBP) {
        rc.linbp_start_stage = def.stage_index(spec.linbp_start);
        if (rc.linbp_start_stage < 0)
            throw ConfigError("LinBP start stage not found: " + spec.linbp_start);
    }
    return rc;
}

static Tensor normalize_input(const ModelDef& def, const Tensor& batch) {
    bool identity = true;
    for (int c = 0; c < 3; ++c)
        identity = identity && def.norm_mean[c] == 0.f && def.norm_std[c] == 1.f;
    if (identity) return batch;
    Tensor out = batch;
    int n = out.dim(0), ch = out.dim(1), h = out.dim(2), w = out.dim(3);
    for (int b = 0; b < n; ++b)
        for (int c = 0; c < ch; ++c) {
            float m = def.norm_mean[c], s = def.norm_std[c];
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) out.at(b, c, y, x) = (out.at(b, c, y, x) - m) / s;
        }
    return out;
}

Tensor forward(const ModelHandle& model, const Tensor& batch, ForwardTrace* trace) {
    const ModelDef& def = model.def();
    RefineCtx rc = resolve_refine(def, model.refine());
    Tensor cur = normalize_input(def, batch);
    if (trace) {
        trace->stage_ctxs.resize(def.stages.size());
        trace->stage_outputs.resize(def.stages.size());
    }
    for (size_t s = 0; s < def.stages.size(); ++s) {
        cur = run_layers_forward(def.stages[s].layers, cur, rc, trace ? &trace->stage_ctxs[s] : nullptr);
        if (trace) trace->stage_outputs[s] = cur;
    }
    // head: pool, then classifier
    LayerCtx* c0 = nullptr;
    if (trace) {
        trace->head_ctxs.resize(def.head.size());
        c0 = &trace->head_ctxs[0];
    }
    cur = def.head[0]->forward(cur, rc, c0);
    if (trace) trace->pooled = cur;
    for (size_t i = 1; i < def.head.size(); ++i)
        cur = def.head[i]->forward(cur, rc, trace ? &trace->head_ctxs[i] : nullptr);
    if (trace) trace->logits = cur;
    return cur;
}

TapResult forward_with_taps(const ModelHandle& model, const Tensor& batch,
                            const std::vector<std::string>& taps) {
    const ModelDef& def = model.def();
    for (const auto& t : taps) {
        if (t != "pool" && def.stage_index(t) < 0)
            throw ConfigError("unknown tap name: " + t);
    }
    ForwardTrace trace;
    TapResult res;
    res.logits = forward(model, batch, &trace);
    for (const auto& t : taps) {
        if (t == "pool")
            res.taps[t] = trace.pooled;
        else
            res.taps[t] = trace.stage_outputs[def.stage_index(t)];
    }
    return res;
}

Tensor backward_to_input(const ModelHandle& model, const ForwardTrace& trace,
                         const Tensor& grad_logits, const std::map<std::string, Tensor>* grad_taps,
                         GradStore* gs, std::map<std::string, Tensor>* record_tap_grads) {
    const ModelDef& def = model.def();
    RefineCtx rc = resolve_refine(def, model.refine());
    if (grad_taps) {
        for (const auto& [name, g] : *grad_taps) {
            if (name != "pool" && def.stage_index(name) < 0)
                throw ConfigError("unknown tap name: " + name);
            (void)g;
        }
    }

    Tensor g = grad_logits;
    for (size_t i = def.head.size(); i-- > 1;)
        g = def.head[i]->backward(g, rc, trace.head_ctxs[i], gs);
    if (grad_taps) {
        auto it = grad_taps->find("pool");
        if (it != grad_taps->end()) g.add_scaled(it->second, 1.f);
    }
    if (record_tap_grads) (*record_tap_grads)["pool"] = g;
    g = def.head[0]->backward(g, rc, trace.head_ctxs[0], gs);

    for (size_t s = def.stages.size(); s-- > 0;) {
        const std::string& name = def.stages[s].name;
        if (grad_taps) {
            auto it = grad_taps->find(name);
            if (it != grad_taps->end()) g.add_scaled(it->second, 1.f);
        }
        if (record_tap_grads) (*record_tap_grads)[name] = g;
        g = run_layers_backward(def.stages[s].layers, g, rc, trace.stage_ctxs[s], gs);
    }

    // undo input normalization scaling
    bool identity = true;
    for (int c = 0; c < 3; ++c)
        identity = identity && def.norm_mean[c] == 0.f && def.norm_std[c] == 1.f;
    if (!identity) {
        int n = g.dim(0), ch = g.dim(1), h = g.dim(2), w = g.dim(3);
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < ch; ++c) {
                float s = def.norm_std[c];
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) g.at(b, c, y, x) /= s;
            }
    }
    return g;
}

// ------------------------------------------------------------ losses

Tensor softmax_rows(const Tensor& logits) {
    int n = logits.dim(0), k = logits.dim(1);
    Tensor p({n, k});
    for (int b = 0; b < n; ++b) {
        const float* row = logits.data() + static_cast<size_t>(b) * k;
        float m = row[0];
        for (int i = 1; i < k; ++i) m = std::max(m, row[i]);
        double z = 0.0;
        for (int i = 0; i < k; ++i) z += std::exp(static_cast<double>(row[i]) - m);
        for (int i = 0; i < k; ++i)
            p[static_cast<size_t>(b) * k + i] =
                static_cast<float>(std::exp(static_cast<double>(row[i]) - m) / z);
    }
    return p;
}

float cross_entropy_sum(const Tensor& logits, const std::vector<int>& labels) {
    int n = logits.dim(0), k = logits.dim(1);
    Tensor p = softmax_rows(logits);
    double loss = 0.0;
    for (int b = 0; b < n; ++b)
        loss -= std::log(std::max(static_cast<double>(p[static_cast<size_t>(b) * k + labels[b]]), 1e-30));
    return static_cast<float>(loss);
}

Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels) {
    int n = logits.dim(0), k = logits.dim(1);
    Tensor g = softmax_rows(logits);
    for (int b = 0; b < n; ++b) g[static_cast<size_t>(b) * k + labels[b]] -= 1.f;
    return g;
}

Tensor input_gradient(const ModelHandle& model, const Tensor& batch, const LossSpec& loss) {
    switch (loss.kind) {
        case LossSpec::Kind::Constant:
            return Tensor(batch.shape());
        case LossSpec::Kind::PredictionMismatch:
            throw UnsupportedLossError("prediction-mismatch loss is not differentiable");
        case LossSpec::Kind::CrossEntropy:
        case LossSpec::Kind::TargetedCrossEntropy: {
            ForwardTrace trace;
            Tensor logits = forward(model, batch, &trace);
            Tensor gl = cross_entropy_grad(logits, loss.labels);
            if (loss.kind == LossSpec::Kind::TargetedCrossEntropy) gl.scale(-1.f);
            return backward_to_input(model, trace, gl);
        }
    }
    throw UnsupportedLossError("unknown loss kind");
}

ModelHandle apply_refinement(const ModelHandle& model, const RefineSpec& cfg) {
    if (cfg.kind == RefineSpec::Kind::SGM && !model.def().has_residual())
        throw UnsupportedArchitectureError("SGM requires an architecture with skip connections: " +
                                           model.architecture_id());
    if (cfg.kind == RefineSpec::Kind::LinBP && model.def().stage_index(cfg.linbp_start) < 0)
        throw ConfigError("LinBP start stage not found: " + cfg.linbp_start);
    if (cfg.kind == RefineSpec::Kind::SGM && (cfg.gamma <= 0.f || cfg.gamma > 1.f))
        throw ConfigError("SGM gamma must be in (0,1]");
    return ModelHandle(model.def_ptr(), cfg);
}

std::vector<int> predict(const ModelHandle& model, const Tensor& batch) {
    Tensor logits = forward(model, batch);
    int n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (int b = 0; b < n; ++b) {
        const float* row = logits.data() + static_cast<size_t>(b) * k;
        out[b] = static_cast<int>(std::max_element(row, row + k) - row);
    }
    return out;
}

// ------------------------------------------------------------ checkpoints

void save_model(const ModelHandle& model, const std::string& dir, const std::string& notes) {
    fs::create_directories(dir);
    const ModelDef& def = model.def();
    json manifest;
    manifest["schema_version"] = 1;
    manifest["architecture_id"] = def.architecture_id;
    manifest["num_classes"] = def.num_classes;
    manifest["input_size"] = def.input_size;
    manifest["norm_mean"] = def.norm_mean;
    manifest["norm_std"] = def.norm_std;
    json shapes = json::array();
    for (const Tensor* t : def.params()) shapes.push_back(t->shape());
    manifest["param_shapes"] = shapes;
    manifest["param_hash"] = def.param_hash();
    if (!notes.empty()) manifest["notes"] = notes;
    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";

    std::ofstream pf(dir + "/params.bin", std::ios::binary);
    for (const Tensor* t : def.params())
        pf.write(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(float));
}

ModelHandle load_model(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("missing model manifest: " + dir);
    json manifest = json::parse(mf);
    auto def = build_architecture(manifest["architecture_id"].get<std::string>(),
                                  manifest["num_classes"].get<int>(),
                                  manifest["input_size"].get<int>(), 0);
    def->norm_mean = manifest["norm_mean"].get<std::vector<float>>();
    def->norm_std = manifest["norm_std"].get<std::vector<float>>();

    auto params = def->params();
    auto shapes = manifest["param_shapes"];
    if (shapes.size() != params.size())
        throw IoError("checkpoint parameter count mismatch in " + dir);
    for (size_t i = 0; i < params.size(); ++i) {
        auto want = shapes[i].get<std::vector<int>>();
        if (want != params[i]->shape())
            throw IoError("checkpoint parameter shape mismatch in " + dir);
    }
    std::ifstream pf(dir + "/params.bin", std::ios::binary);
    if (!pf) throw IoError("missing params.bin: " + dir);
    for (Tensor* t : params)
        pf.read(reinterpret_cast<char*>(t->data()), t->size() * sizeof(float));
    if (!pf) throw IoError("truncated params.bin: " + dir);
    return ModelHandle(std::move(def));
}

}  // namespace tbench
