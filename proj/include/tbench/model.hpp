#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tbench/nn.hpp"
#include "tbench/tensor.hpp"

namespace tbench {

// A parameterized network with named stages. Immutable once built/trained;
// shared across threads through ModelHandle.
struct ModelDef {
    std::string architecture_id;
    int num_classes = 0;
    int input_size = 0;
    int input_channels = 3;
    std::vector<float> norm_mean{0.f, 0.f, 0.f};
    std::vector<float> norm_std{1.f, 1.f, 1.f};

    struct Stage {
        std::string name;
        std::vector<std::unique_ptr<Layer>> layers;
    };
    std::vector<Stage> stages;
    std::vector<std::unique_ptr<Layer>> head;  // [GlobalAvgPool, Linear]; "pool" tap after head[0]

    bool has_residual() const;
    std::vector<Tensor*> params();
    std::vector<const Tensor*> params() const;
    uint64_t param_hash() const;
    int stage_index(const std::string& name) const;  // -1 if unknown
};

std::shared_ptr<ModelDef> build_architecture(const std::string& architecture_id, int num_classes,
                                             int input_size, uint64_t init_seed);

// Differentiable classifier handle: shared parameters plus a refinement view.
class ModelHandle {
public:
    ModelHandle() = default;
    ModelHandle(std::shared_ptr<const ModelDef> def, RefineSpec refine = RefineSpec::identity())
        : def_(std::move(def)), refine_(std::move(refine)) {}

    const ModelDef& def() const { return *def_; }
    std::shared_ptr<const ModelDef> def_ptr() const { return def_; }
    const RefineSpec& refine() const { return refine_; }
    bool valid() const { return def_ != nullptr; }

    std::vector<std::string> layer_names() const;  // stage names + "pool"
    int num_classes() const { return def_->num_classes; }
    int input_size() const { return def_->input_size; }
    const std::string& architecture_id() const { return def_->architecture_id; }
    uint64_t param_hash() const { return def_->param_hash(); }

private:
    std::shared_ptr<const ModelDef> def_;
    RefineSpec refine_;
};

// Everything backward needs, recorded during forward.
struct ForwardTrace {
    std::vector<std::vector<LayerCtx>> stage_ctxs;
    std::vector<Tensor> stage_outputs;
    std::vector<LayerCtx> head_ctxs;
    Tensor pooled;
    Tensor logits;
};

Tensor forward(const ModelHandle& model, const Tensor& batch, ForwardTrace* trace = nullptr);

struct TapResult {
    Tensor logits;
    std::map<std::string, Tensor> taps;
};
TapResult forward_with_taps(const ModelHandle& model, const Tensor& batch,
                            const std::vector<std::string>& taps);

// Walks the graph backward from the logits. `grad_taps` injects extra
// gradient at named stage outputs (for feature-space losses);
// `record_tap_grads` captures the gradient flowing at stage outputs.
Tensor backward_to_input(const ModelHandle& model, const ForwardTrace& trace,
                         const Tensor& grad_logits,
                         const std::map<std::string, Tensor>* grad_taps = nullptr,
                         GradStore* gs = nullptr,
                         std::map<std::string, Tensor>* record_tap_grads = nullptr);

struct LossSpec {
    enum class Kind {
        CrossEntropy,          // sum over batch of -log p_y
        TargetedCrossEntropy,  // negated CE towards target labels
        Constant,              // ignores the model; zero gradient
        PredictionMismatch,    // 0/1 error count; not differentiable
    };
    Kind kind = Kind::CrossEntropy;
    std::vector<int> labels;
};

Tensor input_gradient(const ModelHandle& model, const Tensor& batch, const LossSpec& loss);

ModelHandle apply_refinement(const ModelHandle& model, const RefineSpec& cfg);

// softmax / cross-entropy helpers (row-wise over a {N, classes} tensor)
Tensor softmax_rows(const Tensor& logits);
float cross_entropy_sum(const Tensor& logits, const std::vector<int>& labels);
Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels);  // softmax - onehot
std::vector<int> predict(const ModelHandle& model, const Tensor& batch);

void save_model(const ModelHandle& model, const std::string& dir, const std::string& notes = "");
ModelHandle load_model(const std::string& dir);

}  // namespace tbench
