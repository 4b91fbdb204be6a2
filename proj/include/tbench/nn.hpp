#pragma once

#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tbench/rng.hpp"
#include "tbench/tensor.hpp"

namespace tbench {

// Backward-pass (and for IAA also forward-pass) modification of a model.
struct RefineSpec {
    enum class Kind { Identity, SGM, LinBP, IAA };
    Kind kind = Kind::Identity;
    float gamma = 0.5f;              // SGM residual-branch gradient decay
    std::string linbp_start;         // LinBP: first stage whose ReLUs backprop linearly
    float beta = 15.f;               // IAA softplus temperature
    std::vector<float> skip_weights; // IAA per-residual-block branch weight (default 1)

    bool is_identity() const { return kind == Kind::Identity; }
    static RefineSpec identity() { return {}; }
};

// Resolved per-forward view of RefineSpec (stage names mapped to ordinals).
struct RefineCtx {
    RefineSpec::Kind kind = RefineSpec::Kind::Identity;
    float gamma = 1.f;
    int linbp_start_stage = -1;  // stage ordinal; -1 = never
    float beta = 15.f;
    const std::vector<float>* skip_weights = nullptr;

    bool iaa() const { return kind == RefineSpec::Kind::IAA; }
    bool sgm() const { return kind == RefineSpec::Kind::SGM; }
    bool linbp_at(int stage) const {
        return kind == RefineSpec::Kind::LinBP && linbp_start_stage >= 0 && stage >= linbp_start_stage;
    }
    float branch_weight(int res_index) const {
        if (!iaa() || !skip_weights || res_index < 0 ||
            res_index >= static_cast<int>(skip_weights->size()))
            return 1.f;
        return (*skip_weights)[res_index];
    }
};

// Per-call saved state for backward. Layers that contain sublayers nest.
struct LayerCtx {
    Tensor saved_a;
    Tensor saved_b;
    std::vector<LayerCtx> children;
};

class Layer;
using GradStore = std::unordered_map<const Layer*, std::vector<Tensor>>;

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const = 0;
    // Returns gradient w.r.t. the layer input; accumulates parameter
    // gradients into `gs` when non-null.
    virtual Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                            GradStore* gs) const = 0;
    virtual void collect_params(std::vector<Tensor*>& out) { (void)out; }
    // Pulls this layer's gradients out of `gs` in collect_params order,
    // materializing zeros for params that saw no backward pass.
    virtual void collect_grads(GradStore& gs, std::deque<Tensor>& backing,
                               std::vector<Tensor*>& out) const;
    virtual std::string kind() const = 0;
    virtual bool has_residual() const { return false; }
};

class Conv2d : public Layer {
public:
    Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad);
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    void collect_params(std::vector<Tensor*>& out) override;
    std::string kind() const override { return "conv2d"; }
    void init_he(Rng& rng);

    Tensor weight;  // {out_ch, in_ch, k, k}
    Tensor bias;    // {out_ch}
    int in_ch, out_ch, ksize, stride, pad;
};

class Linear : public Layer {
public:
    Linear(int in_features, int out_features);
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    void collect_params(std::vector<Tensor*>& out) override;
    std::string kind() const override { return "linear"; }
    void init_he(Rng& rng);

    Tensor weight;  // {out, in}
    Tensor bias;    // {out}
    int in_features, out_features;
};

// ReLU that honors LinBP (identity backward from a stage onward) and IAA
// (softplus(beta x)/beta in both passes) when marked refinable.
class ReLU : public Layer {
public:
    explicit ReLU(bool refinable = false, int stage = -1) : refinable_(refinable), stage_(stage) {}
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    std::string kind() const override { return "relu"; }

private:
    bool refinable_;
    int stage_;
};

class AvgPool2 : public Layer {  // 2x2, stride 2
public:
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    std::string kind() const override { return "avgpool2"; }
};

class GlobalAvgPool : public Layer {
public:
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    std::string kind() const override { return "gap"; }
};

class UpsampleNearest2 : public Layer {
public:
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    std::string kind() const override { return "upsample2"; }
};

// Fixed 3x3 mean filter (same padding), used by the feature-denoising block.
class BoxFilter3 : public Layer {
public:
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    std::string kind() const override { return "boxfilter3"; }
};

// y = skip(x) + w * branch(x), optionally followed by ReLU. SGM decays the
// branch gradient by gamma; IAA scales the branch by its skip weight.
class ResidualBlock : public Layer {
public:
    ResidualBlock(std::vector<std::unique_ptr<Layer>> branch,
                  std::vector<std::unique_ptr<Layer>> skip, bool post_relu, bool refinable,
                  int stage, int res_index);
    Tensor forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const override;
    Tensor backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                    GradStore* gs) const override;
    void collect_params(std::vector<Tensor*>& out) override;
    void collect_grads(GradStore& gs, std::deque<Tensor>& backing,
                       std::vector<Tensor*>& out) const override;
    std::string kind() const override { return "residual"; }
    bool has_residual() const override { return true; }

    std::vector<std::unique_ptr<Layer>> branch;
    std::vector<std::unique_ptr<Layer>> skip;  // empty = identity
    bool post_relu;
    bool refinable;
    int stage;
    int res_index;
};

Tensor run_layers_forward(const std::vector<std::unique_ptr<Layer>>& layers, const Tensor& x,
                          const RefineCtx& rc, std::vector<LayerCtx>* ctxs);
Tensor run_layers_backward(const std::vector<std::unique_ptr<Layer>>& layers, const Tensor& gy,
                           const RefineCtx& rc, const std::vector<LayerCtx>& ctxs, GradStore* gs);

}  // namespace tbench
