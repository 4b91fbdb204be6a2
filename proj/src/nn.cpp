#include "tbench/nn.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace tbench {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void Layer::collect_grads(GradStore& gs, std::deque<Tensor>& backing,
                          std::vector<Tensor*>& out) const {
    std::vector<Tensor*> my_params;
    const_cast<Layer*>(this)->collect_params(my_params);
    if (my_params.empty()) return;
    auto it = gs.find(this);
    if (it != gs.end()) {
        for (auto& g : it->second) out.push_back(&g);
    } else {
        for (Tensor* p : my_params) {
            backing.emplace_back(Tensor(p->shape()));
            out.push_back(&backing.back());
        }
    }
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad)
    : weight({out_ch, in_ch, ksize, ksize}),
      bias({out_ch}),
      in_ch(in_ch), out_ch(out_ch), ksize(ksize), stride(stride), pad(pad) {}

void Conv2d::init_he(Rng& rng) {
    float std = std::sqrt(2.f / (in_ch * ksize * ksize));
    for (size_t i = 0; i < weight.size(); ++i) weight[i] = rng.normal(0.f, std);
    bias.fill(0.f);
}

static void im2col(const Tensor& x, int n, int ksize, int stride, int pad, int oh, int ow,
                   std::vector<float>& cols) {
    int c = x.dim(1), h = x.dim(2), w = x.dim(3);
    // cols layout: (c*k*k) rows x (oh*ow) columns, row-major
    size_t ncols = static_cast<size_t>(oh) * ow;
    cols.assign(static_cast<size_t>(c) * ksize * ksize * ncols, 0.f);
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < ksize; ++ky)
            for (int kx = 0; kx < ksize; ++kx) {
                float* row = cols.data() + ((static_cast<size_t>(ci) * ksize + ky) * ksize + kx) * ncols;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        row[static_cast<size_t>(oy) * ow + ox] = x.at(n, ci, iy, ix);
                    }
                }
            }
}

static void col2im_add(const std::vector<float>& cols, Tensor& gx, int n, int ksize, int stride,
                       int pad, int oh, int ow) {
    int c = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
    size_t ncols = static_cast<size_t>(oh) * ow;
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < ksize; ++ky)
            for (int kx = 0; kx < ksize; ++kx) {
                const float* row =
                    cols.data() + ((static_cast<size_t>(ci) * ksize + ky) * ksize + kx) * ncols;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        gx.at(n, ci, iy, ix) += row[static_cast<size_t>(oy) * ow + ox];
                    }
                }
            }
}

Tensor Conv2d::forward(const Tensor& x, const RefineCtx&, LayerCtx* ctx) const {
    int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    int oh = (h + 2 * pad - ksize) / stride + 1;
    int ow = (w + 2 * pad - ksize) / stride + 1;
    Tensor y({n, out_ch, oh, ow});
    std::vector<float> cols;
    int krows = in_ch * ksize * ksize;
    size_t ncols = static_cast<size_t>(oh) * ow;
    CMapMat wm(weight.data(), out_ch, krows);
    for (int b = 0; b < n; ++b) {
        im2col(x, b, ksize, stride, pad, oh, ow, cols);
        CMapMat cm(cols.data(), krows, ncols);
        MapMat ym(y.data() + static_cast<size_t>(b) * out_ch * ncols, out_ch, ncols);
        ym.noalias() = wm * cm;
        for (int oc = 0; oc < out_ch; ++oc) ym.row(oc).array() += bias[oc];
    }
    if (ctx) ctx->saved_a = x;
    return y;
}

Tensor Conv2d::backward(const Tensor& gy, const RefineCtx&, const LayerCtx& ctx,
                        GradStore* gs) const {
    const Tensor& x = ctx.saved_a;
    int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    int oh = gy.dim(2), ow = gy.dim(3);
    int krows = in_ch * ksize * ksize;
    size_t ncols = static_cast<size_t>(oh) * ow;
    Tensor gx({n, in_ch, h, w});
    CMapMat wm(weight.data(), out_ch, krows);

    Tensor* gw = nullptr;
    Tensor* gb = nullptr;
    if (gs) {
        auto& slot = (*gs)[this];
        if (slot.empty()) {
            slot.emplace_back(Tensor({out_ch, in_ch, ksize, ksize}));
            slot.emplace_back(Tensor({out_ch}));
        }
        gw = &slot[0];
        gb = &slot[1];
    }

    std::vector<float> cols, gcols(static_cast<size_t>(krows) * ncols);
    for (int b = 0; b < n; ++b) {
        im2col(x, b, ksize, stride, pad, oh, ow, cols);
        CMapMat cm(cols.data(), krows, ncols);
        CMapMat gym(gy.data() + static_cast<size_t>(b) * out_ch * ncols, out_ch, ncols);
        if (gw) {
            MapMat gwm(gw->data(), out_ch, krows);
            gwm.noalias() += gym * cm.transpose();
            for (int oc = 0; oc < out_ch; ++oc) (*gb)[oc] += gym.row(oc).sum();
        }
        MapMat gcm(gcols.data(), krows, ncols);
        gcm.noalias() = wm.transpose() * gym;
        col2im_add(gcols, gx, b, ksize, stride, pad, oh, ow);
    }
    return gx;
}

void Conv2d::collect_params(std::vector<Tensor*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

// ---------------------------------------------------------------- Linear

Linear::Linear(int in_features, int out_features)
    : weight({out_features, in_features}), bias({out_features}),
      in_features(in_features), out_features(out_features) {}

void Linear::init_he(Rng& rng) {
    float std = std::sqrt(2.f / in_features);
    for (size_t i = 0; i < weight.size(); ++i) weight[i] = rng.normal(0.f, std);
    bias.fill(0.f);
}

Tensor Linear::forward(const Tensor& x, const RefineCtx&, LayerCtx* ctx) const {
    int n = x.dim(0);
    Tensor y({n, out_features});
    CMapMat wm(weight.data(), out_features, in_features);
    for (int b = 0; b < n; ++b) {
        CMapMat xv(x.data() + static_cast<size_t>(b) * in_features, in_features, 1);
        MapMat yv(y.data() + static_cast<size_t>(b) * out_features, out_features, 1);
        yv.noalias() = wm * xv;
        for (int o = 0; o < out_features; ++o) yv(o, 0) += bias[o];
    }
    if (ctx) ctx->saved_a = x;
    return y;
}

Tensor Linear::backward(const Tensor& gy, const RefineCtx&, const LayerCtx& ctx,
                        GradStore* gs) const {
    const Tensor& x = ctx.saved_a;
    int n = x.dim(0);
    Tensor gx = Tensor::zeros_like(x);
    CMapMat wm(weight.data(), out_features, in_features);
    Tensor* gw = nullptr;
    Tensor* gb = nullptr;
    if (gs) {
        auto& slot = (*gs)[this];
        if (slot.empty()) {
            slot.emplace_back(Tensor({out_features, in_features}));
            slot.emplace_back(Tensor({out_features}));
        }
        gw = &slot[0];
        gb = &slot[1];
    }
    for (int b = 0; b < n; ++b) {
        CMapMat gyv(gy.data() + static_cast<size_t>(b) * out_features, out_features, 1);
        CMapMat xv(x.data() + static_cast<size_t>(b) * in_features, 1, in_features);
        if (gw) {
            MapMat gwm(gw->data(), out_features, in_features);
            gwm.noalias() += gyv * xv;
            for (int o = 0; o < out_features; ++o) (*gb)[o] += gyv(o, 0);
        }
        MapMat gxv(gx.data() + static_cast<size_t>(b) * in_features, in_features, 1);
        gxv.noalias() = wm.transpose() * gyv;
    }
    return gx;
}

void Linear::collect_params(std::vector<Tensor*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

// ---------------------------------------------------------------- ReLU

static float softplus_beta(float x, float beta) {
    // log(1 + exp(beta x)) / beta, numerically stable
    float bx = beta * x;
    if (bx > 20.f) return x + std::log1p(std::exp(-bx)) / beta;
    return std::log1p(std::exp(bx)) / beta;
}

Tensor ReLU::forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const {
    Tensor y = x;
    if (refinable_ && rc.iaa()) {
        for (size_t i = 0; i < y.size(); ++i) y[i] = softplus_beta(x[i], rc.beta);
    } else {
        for (size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.f ? x[i] : 0.f;
    }
    if (ctx) ctx->saved_a = x;
    return y;
}

Tensor ReLU::backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                      GradStore*) const {
    const Tensor& x = ctx.saved_a;
    Tensor gx = gy;
    if (refinable_ && rc.iaa()) {
        for (size_t i = 0; i < gx.size(); ++i) {
            float s = 1.f / (1.f + std::exp(-rc.beta * x[i]));  // sigmoid(beta x)
            gx[i] *= s;
        }
    } else if (refinable_ && rc.linbp_at(stage_)) {
        // linear backward: pass gradient through untouched
    } else {
        for (size_t i = 0; i < gx.size(); ++i)
            if (x[i] <= 0.f) gx[i] = 0.f;
    }
    return gx;
}

// ---------------------------------------------------------------- pooling

Tensor AvgPool2::forward(const Tensor& x, const RefineCtx&, LayerCtx* ctx) const {
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int oh = h / 2, ow = w / 2;
    Tensor y({n, c, oh, ow});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    y.at(b, k, oy, ox) = 0.25f * (x.at(b, k, 2 * oy, 2 * ox) +
                                                  x.at(b, k, 2 * oy, 2 * ox + 1) +
                                                  x.at(b, k, 2 * oy + 1, 2 * ox) +
                                                  x.at(b, k, 2 * oy + 1, 2 * ox + 1));
    if (ctx) {
        ctx->saved_a = Tensor({4});
        ctx->saved_a[0] = static_cast<float>(h);
        ctx->saved_a[1] = static_cast<float>(w);
    }
    return y;
}

Tensor AvgPool2::backward(const Tensor& gy, const RefineCtx&, const LayerCtx& ctx,
                          GradStore*) const {
    int h = static_cast<int>(ctx.saved_a[0]), w = static_cast<int>(ctx.saved_a[1]);
    int n = gy.dim(0), c = gy.dim(1), oh = gy.dim(2), ow = gy.dim(3);
    Tensor gx({n, c, h, w});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    float g = 0.25f * gy.at(b, k, oy, ox);
                    gx.at(b, k, 2 * oy, 2 * ox) = g;
                    gx.at(b, k, 2 * oy, 2 * ox + 1) = g;
                    gx.at(b, k, 2 * oy + 1, 2 * ox) = g;
                    gx.at(b, k, 2 * oy + 1, 2 * ox + 1) = g;
                }
    return gx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, const RefineCtx&, LayerCtx* ctx) const {
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y({n, c, 1, 1});
    float inv = 1.f / (h * w);
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k) {
            double s = 0.0;
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) s += x.at(b, k, yy, xx);
            y.at(b, k, 0, 0) = static_cast<float>(s) * inv;
        }
    if (ctx) {
        ctx->saved_a = Tensor({2});
        ctx->saved_a[0] = static_cast<float>(h);
        ctx->saved_a[1] = static_cast<float>(w);
    }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& gy, const RefineCtx&, const LayerCtx& ctx,
                               GradStore*) const {
    int h = static_cast<int>(ctx.saved_a[0]), w = static_cast<int>(ctx.saved_a[1]);
    int n = gy.dim(0), c = gy.dim(1);
    Tensor gx({n, c, h, w});
    float inv = 1.f / (h * w);
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k) {
            float g = gy.at(b, k, 0, 0) * inv;
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) gx.at(b, k, yy, xx) = g;
        }
    return gx;
}

Tensor UpsampleNearest2::forward(const Tensor& x, const RefineCtx&, LayerCtx*) const {
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y({n, c, 2 * h, 2 * w});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    float v = x.at(b, k, yy, xx);
                    y.at(b, k, 2 * yy, 2 * xx) = v;
                    y.at(b, k, 2 * yy, 2 * xx + 1) = v;
                    y.at(b, k, 2 * yy + 1, 2 * xx) = v;
                    y.at(b, k, 2 * yy + 1, 2 * xx + 1) = v;
                }
    return y;
}

Tensor UpsampleNearest2::backward(const Tensor& gy, const RefineCtx&, const LayerCtx&,
                                  GradStore*) const {
    int n = gy.dim(0), c = gy.dim(1), oh = gy.dim(2), ow = gy.dim(3);
    Tensor gx({n, c, oh / 2, ow / 2});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int yy = 0; yy < oh / 2; ++yy)
                for (int xx = 0; xx < ow / 2; ++xx)
                    gx.at(b, k, yy, xx) = gy.at(b, k, 2 * yy, 2 * xx) +
                                          gy.at(b, k, 2 * yy, 2 * xx + 1) +
                                          gy.at(b, k, 2 * yy + 1, 2 * xx) +
                                          gy.at(b, k, 2 * yy + 1, 2 * xx + 1);
    return gx;
}

// ---------------------------------------------------------------- BoxFilter3

static Tensor box3_apply(const Tensor& x) {
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y({n, c, h, w});
    const float inv9 = 1.f / 9.f;
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    float s = 0.f;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            int iy = yy + dy, ix = xx + dx;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) s += x.at(b, k, iy, ix);
                        }
                    y.at(b, k, yy, xx) = s * inv9;
                }
    return y;
}

Tensor BoxFilter3::forward(const Tensor& x, const RefineCtx&, LayerCtx*) const {
    return box3_apply(x);
}

Tensor BoxFilter3::backward(const Tensor& gy, const RefineCtx&, const LayerCtx&,
                            GradStore*) const {
    // symmetric kernel: adjoint equals the filter itself
    return box3_apply(gy);
}

// ---------------------------------------------------------------- Residual

ResidualBlock::ResidualBlock(std::vector<std::unique_ptr<Layer>> branch_,
                             std::vector<std::unique_ptr<Layer>> skip_, bool post_relu,
                             bool refinable, int stage, int res_index)
    : branch(std::move(branch_)), skip(std::move(skip_)), post_relu(post_relu),
      refinable(refinable), stage(stage), res_index(res_index) {}

Tensor run_layers_forward(const std::vector<std::unique_ptr<Layer>>& layers, const Tensor& x,
                          const RefineCtx& rc, std::vector<LayerCtx>* ctxs) {
    Tensor cur = x;
    for (size_t i = 0; i < layers.size(); ++i) {
        LayerCtx* c = nullptr;
        if (ctxs) {
            ctxs->emplace_back();
            c = &ctxs->back();
        }
        cur = layers[i]->forward(cur, rc, c);
    }
    return cur;
}

Tensor run_layers_backward(const std::vector<std::unique_ptr<Layer>>& layers, const Tensor& gy,
                           const RefineCtx& rc, const std::vector<LayerCtx>& ctxs, GradStore* gs) {
    Tensor cur = gy;
    for (size_t i = layers.size(); i-- > 0;) cur = layers[i]->backward(cur, rc, ctxs[i], gs);
    return cur;
}

Tensor ResidualBlock::forward(const Tensor& x, const RefineCtx& rc, LayerCtx* ctx) const {
    std::vector<LayerCtx>* branch_ctx = nullptr;
    std::vector<LayerCtx>* skip_ctx = nullptr;
    LayerCtx* post_ctx = nullptr;
    if (ctx) {
        // children: [0] branch ctxs holder, [1] skip ctxs holder, [2] post-relu ctx
        ctx->children.resize(3);
        branch_ctx = &ctx->children[0].children;
        skip_ctx = &ctx->children[1].children;
        post_ctx = &ctx->children[2];
    }
    std::vector<LayerCtx> tmp_b, tmp_s;
    Tensor b = run_layers_forward(branch, x, rc, ctx ? branch_ctx : nullptr);
    Tensor s = skip.empty() ? x : run_layers_forward(skip, x, rc, ctx ? skip_ctx : nullptr);
    float w = rc.branch_weight(res_index);
    Tensor y = s;
    y.add_scaled(b, w);
    if (post_relu) {
        if (ctx) post_ctx->saved_a = y;
        if (refinable && rc.iaa()) {
            for (size_t i = 0; i < y.size(); ++i) y[i] = softplus_beta(y[i], rc.beta);
        } else {
            for (size_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.f ? y[i] : 0.f;
        }
    }
    return y;
}

Tensor ResidualBlock::backward(const Tensor& gy, const RefineCtx& rc, const LayerCtx& ctx,
                               GradStore* gs) const {
    Tensor g = gy;
    if (post_relu) {
        const Tensor& pre = ctx.children[2].saved_a;
        if (refinable && rc.iaa()) {
            for (size_t i = 0; i < g.size(); ++i)
                g[i] *= 1.f / (1.f + std::exp(-rc.beta * pre[i]));
        } else if (refinable && rc.linbp_at(stage)) {
            // linear backward
        } else {
            for (size_t i = 0; i < g.size(); ++i)
                if (pre[i] <= 0.f) g[i] = 0.f;
        }
    }
    float w = rc.branch_weight(res_index);
    float branch_scale = w * (rc.sgm() ? rc.gamma : 1.f);
    Tensor g_branch_in = g;
    if (branch_scale != 1.f) g_branch_in.scale(branch_scale);
    Tensor gx = run_layers_backward(branch, g_branch_in, rc, ctx.children[0].children, gs);
    if (skip.empty()) {
        gx.add_scaled(g, 1.f);
    } else {
        Tensor gskip = run_layers_backward(skip, g, rc, ctx.children[1].children, gs);
        gx.add_scaled(gskip, 1.f);
    }
    return gx;
}

void ResidualBlock::collect_params(std::vector<Tensor*>& out) {
    for (auto& l : branch) l->collect_params(out);
    for (auto& l : skip) l->collect_params(out);
}

void ResidualBlock::collect_grads(GradStore& gs, std::deque<Tensor>& backing,
                                  std::vector<Tensor*>& out) const {
    for (const auto& l : branch) l->collect_grads(gs, backing, out);
    for (const auto& l : skip) l->collect_grads(gs, backing, out);
}

}  // namespace tbench
