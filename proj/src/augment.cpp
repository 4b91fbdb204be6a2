#include "tbench/augment.hpp"

#include <algorithm>
#include <cmath>

#include "tbench/errors.hpp"
#include "tbench/image.hpp"

namespace tbench {

TransformSpec::Kind transform_kind_from_string(const std::string& s) {
    if (s == "identity") return TransformSpec::Kind::Identity;
    if (s == "DI") return TransformSpec::Kind::DI;
    if (s == "TI") return TransformSpec::Kind::TI;
    if (s == "SI") return TransformSpec::Kind::SI;
    if (s == "VT") return TransformSpec::Kind::VT;
    if (s == "Admix") return TransformSpec::Kind::Admix;
    throw ConfigError("unknown transform kind: " + s);
}

static Tensor clip01_masked(const Tensor& x, Tensor& mask) {
    Tensor out = x;
    mask = Tensor(x.shape());
    for (size_t i = 0; i < out.size(); ++i) {
        if (out[i] < 0.f) {
            out[i] = 0.f;
        } else if (out[i] > 1.f) {
            out[i] = 1.f;
        } else {
            mask[i] = 1.f;
        }
    }
    return out;
}

Tensor augment(const TransformSpec& spec, const Tensor& image, Rng& rng, TransformDraw* draw,
               const Dataset* donor_pool, int label, int copy_index) {
    TransformDraw local;
    TransformDraw& d = draw ? *draw : local;
    d.kind = spec.kind;
    const int h = image.dim(2), w = image.dim(3);

    switch (spec.kind) {
        case TransformSpec::Kind::Identity:
            return image;
        case TransformSpec::Kind::DI: {
            float u = rng.uniform();
            float s = rng.uniform(spec.di_lo, spec.di_hi);
            if (u >= spec.di_prob) {
                d.applied = false;
                return image;
            }
            d.applied = true;
            d.di_scale = s;
            d.di_resized = static_cast<int>(s * h);
            d.di_canvas = static_cast<int>(std::ceil(spec.di_hi * h));
            d.di_top = rng.uniform_int(0, d.di_canvas - d.di_resized);
            d.di_left = rng.uniform_int(0, d.di_canvas - d.di_resized);
            Tensor r = resize_bilinear(image, d.di_resized, d.di_resized);
            Tensor p = pad_to(r, d.di_canvas, d.di_canvas, d.di_top, d.di_left);
            return resize_bilinear(p, h, w);
        }
        case TransformSpec::Kind::TI: {
            d.applied = true;
            d.ti_dx = rng.uniform_int(-spec.ti_range, spec.ti_range);
            d.ti_dy = rng.uniform_int(-spec.ti_range, spec.ti_range);
            return translate(image, d.ti_dx, d.ti_dy);
        }
        case TransformSpec::Kind::SI: {
            d.applied = true;
            d.si_factor = spec.si_ladder ? 1.f / static_cast<float>(1 << copy_index)
                                         : rng.uniform(spec.si_lo, spec.si_hi);
            Tensor out = image;
            out.scale(d.si_factor);
            return out;
        }
        case TransformSpec::Kind::VT: {
            d.applied = true;
            float range = spec.vt_scale * spec.epsilon;
            d.vt_noise = Tensor(image.shape());
            for (size_t i = 0; i < d.vt_noise.size(); ++i)
                d.vt_noise[i] = rng.uniform(-range, range);
            Tensor out = image + d.vt_noise;
            return clip01_masked(out, d.clip_mask);
        }
        case TransformSpec::Kind::Admix: {
            if (!donor_pool || donor_pool->size() == 0)
                throw ConfigError("Admix requires a donor pool");
            std::vector<int> candidates;
            for (size_t i = 0; i < donor_pool->size(); ++i)
                if (donor_pool->labels[i] != label) candidates.push_back(static_cast<int>(i));
            if (candidates.empty()) throw ConfigError("Admix donor pool has no other-class images");
            d.applied = true;
            d.admix_donor = candidates[rng.uniform_int(0, static_cast<int>(candidates.size()) - 1)];
            Tensor donor = donor_pool->images.slice_n(d.admix_donor);
            Tensor out = image;
            out.add_scaled(donor, spec.admix_eta);
            return clip01_masked(out, d.clip_mask);
        }
    }
    throw ConfigError("unhandled transform kind");
}

Tensor augment_vjp(const TransformDraw& d, const Tensor& grad_out) {
    switch (d.kind) {
        case TransformSpec::Kind::Identity:
            return grad_out;
        case TransformSpec::Kind::DI: {
            if (!d.applied) return grad_out;
            int h = grad_out.dim(2), w = grad_out.dim(3);
            Tensor g = resize_bilinear_vjp(grad_out, d.di_canvas, d.di_canvas);
            g = crop_from(g, d.di_resized, d.di_resized, d.di_top, d.di_left);
            return resize_bilinear_vjp(g, h, w);
        }
        case TransformSpec::Kind::TI:
            return translate(grad_out, -d.ti_dx, -d.ti_dy);
        case TransformSpec::Kind::SI: {
            Tensor g = grad_out;
            g.scale(d.si_factor);
            return g;
        }
        case TransformSpec::Kind::VT:
        case TransformSpec::Kind::Admix: {
            Tensor g = grad_out;
            for (size_t i = 0; i < g.size(); ++i) g[i] *= d.clip_mask[i];
            return g;
        }
    }
    throw ConfigError("unhandled transform kind");
}

Tensor averaged_gradient(const TransformSpec& spec, const ModelHandle& model, const Tensor& x,
                         int label, Rng& rng, const Dataset* donor_pool) {
    if (spec.copies < 1) throw ConfigError("transform copies must be >= 1");
    std::vector<double> acc(x.size(), 0.0);
    LossSpec loss{LossSpec::Kind::CrossEntropy, {label}};
    for (int j = 0; j < spec.copies; ++j) {
        TransformDraw draw;
        Tensor xt = augment(spec, x, rng, &draw, donor_pool, label, j);
        Tensor g = input_gradient(model, xt, loss);
        Tensor gx = augment_vjp(draw, g);
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += gx[i];
    }
    Tensor out(x.shape());
    double m = static_cast<double>(spec.copies);
    for (size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / m);
    return out;
}

double input_diversity(const TransformSpec& spec, const ModelHandle& model, const Dataset& ds,
                       int repeats, uint64_t seed, const Dataset* donor_pool) {
    if (ds.size() == 0) throw ConfigError("input_diversity: empty dataset");
    if (repeats < 1) throw ConfigError("input_diversity: repeats must be >= 1");
    double total = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        Tensor x = ds.images.slice_n(static_cast<int>(i));
        Tensor logits = forward(model, x);
        int k = logits.dim(1);
        int top1 = 0;
        for (int c = 1; c < k; ++c)
            if (logits[c] > logits[top1]) top1 = c;
        float clean_logit = logits[top1];
        Rng rng = Rng::substream(seed, 0xD1FF, i);
        for (int r = 0; r < repeats; ++r) {
            Tensor xt = augment(spec, x, rng, nullptr, donor_pool, ds.labels[i], r % spec.copies);
            Tensor lt = forward(model, xt);
            total += static_cast<double>(clean_logit) - lt[top1];
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

}  // namespace tbench
