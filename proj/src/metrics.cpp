#include "tbench/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tbench/errors.hpp"
#include "tbench/image.hpp"

namespace tbench {

double success_rate(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size()) throw ConfigError("prediction/label size mismatch");
    if (labels.empty()) throw ConfigError("success_rate needs at least one sample");
    size_t wrong = 0;
    for (size_t i = 0; i < labels.size(); ++i)
        if (predictions[i] != labels[i]) ++wrong;
    return static_cast<double>(wrong) / labels.size();
}

double psnr(const Tensor& x, const Tensor& x_adv) {
    if (!x.same_shape(x_adv)) throw ConfigError("psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double d = static_cast<double>(x[i]) - x_adv[i];
        mse += d * d;
    }
    mse /= x.size();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Tensor& x, const Tensor& x_adv) {
    if (!x.same_shape(x_adv)) throw ConfigError("ssim: shape mismatch");
    const int win = 11;
    const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    int c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < win || w < win) throw ConfigError("ssim: image smaller than the 11x11 window");

    double kernel[win][win];
    double ksum = 0.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double dy = i - win / 2, dx = j - win / 2;
            kernel[i][j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            ksum += kernel[i][j];
        }
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) kernel[i][j] /= ksum;

    double total = 0.0;
    size_t count = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y + win <= h; ++y)
            for (int xx = 0; xx + win <= w; ++xx) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        double a = x.at(0, ch, y + i, xx + j);
                        double b = x_adv.at(0, ch, y + i, xx + j);
                        double k = kernel[i][j];
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                sxx -= mx * mx;
                syy -= my * my;
                sxy -= mx * my;
                double num = (2 * mx * my + c1) * (2 * sxy + c2);
                double den = (mx * mx + my * my + c1) * (sxx + syy + c2);
                total += num / den;
                ++count;
            }
    return total / count;
}

// ------------------------------------------------------------------ color

void srgb_to_lab(float r, float g, float b, float lab[3]) {
    auto inv_gamma = [](double u) {
        return u <= 0.04045 ? u / 12.92 : std::pow((u + 0.055) / 1.055, 2.4);
    };
    double rl = inv_gamma(r), gl = inv_gamma(g), bl = inv_gamma(b);
    // sRGB D65
    double X = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    double Y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    double Z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    const double xn = 0.95047, yn = 1.0, zn = 1.08883;
    auto f = [](double t) {
        const double d = 6.0 / 29.0;
        return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
    };
    double fx = f(X / xn), fy = f(Y / yn), fz = f(Z / zn);
    lab[0] = static_cast<float>(116.0 * fy - 16.0);
    lab[1] = static_cast<float>(500.0 * (fx - fy));
    lab[2] = static_cast<float>(200.0 * (fy - fz));
}

double ciede2000(const float lab1[3], const float lab2[3]) {
    const double deg2rad = M_PI / 180.0;
    double L1 = lab1[0], a1 = lab1[1], b1 = lab1[2];
    double L2 = lab2[0], a2 = lab2[1], b2 = lab2[2];

    double c1 = std::sqrt(a1 * a1 + b1 * b1);
    double c2 = std::sqrt(a2 * a2 + b2 * b2);
    double cbar = (c1 + c2) / 2.0;
    double cbar7 = std::pow(cbar, 7.0);
    double g = 0.5 * (1.0 - std::sqrt(cbar7 / (cbar7 + std::pow(25.0, 7.0))));
    double ap1 = (1.0 + g) * a1, ap2 = (1.0 + g) * a2;
    double cp1 = std::sqrt(ap1 * ap1 + b1 * b1), cp2 = std::sqrt(ap2 * ap2 + b2 * b2);

    auto hue = [&](double ap, double b) {
        if (ap == 0.0 && b == 0.0) return 0.0;
        double h = std::atan2(b, ap) / deg2rad;
        return h < 0.0 ? h + 360.0 : h;
    };
    double hp1 = hue(ap1, b1), hp2 = hue(ap2, b2);

    double dL = L2 - L1;
    double dC = cp2 - cp1;
    double dhp;
    if (cp1 * cp2 == 0.0) {
        dhp = 0.0;
    } else {
        dhp = hp2 - hp1;
        if (dhp > 180.0) dhp -= 360.0;
        else if (dhp < -180.0) dhp += 360.0;
    }
    double dH = 2.0 * std::sqrt(cp1 * cp2) * std::sin(dhp * deg2rad / 2.0);

    double lbar = (L1 + L2) / 2.0;
    double cpbar = (cp1 + cp2) / 2.0;
    double hpbar;
    if (cp1 * cp2 == 0.0) {
        hpbar = hp1 + hp2;
    } else {
        hpbar = (hp1 + hp2) / 2.0;
        double diff = std::fabs(hp1 - hp2);
        if (diff > 180.0) {
            if (hp1 + hp2 < 360.0) hpbar += 180.0;
            else hpbar -= 180.0;
        }
    }

    double t = 1.0 - 0.17 * std::cos((hpbar - 30.0) * deg2rad) +
               0.24 * std::cos(2.0 * hpbar * deg2rad) +
               0.32 * std::cos((3.0 * hpbar + 6.0) * deg2rad) -
               0.20 * std::cos((4.0 * hpbar - 63.0) * deg2rad);
    double dtheta = 30.0 * std::exp(-std::pow((hpbar - 275.0) / 25.0, 2.0));
    double cpbar7 = std::pow(cpbar, 7.0);
    double rc = 2.0 * std::sqrt(cpbar7 / (cpbar7 + std::pow(25.0, 7.0)));
    double lterm = (lbar - 50.0) * (lbar - 50.0);
    double sl = 1.0 + 0.015 * lterm / std::sqrt(20.0 + lterm);
    double sc = 1.0 + 0.045 * cpbar;
    double sh = 1.0 + 0.015 * cpbar * t;
    double rt = -std::sin(2.0 * dtheta * deg2rad) * rc;

    double tl = dL / sl, tc = dC / sc, th = dH / sh;
    return std::sqrt(tl * tl + tc * tc + th * th + rt * tc * th);
}

double delta_e2000(const Tensor& x, const Tensor& x_adv) {
    if (!x.same_shape(x_adv)) throw ConfigError("delta_e2000: shape mismatch");
    if (x.dim(1) != 3) throw ConfigError("delta_e2000 needs 3-channel sRGB input");
    int h = x.dim(2), w = x.dim(3);
    double sum2 = 0.0;
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            float lab1[3], lab2[3];
            srgb_to_lab(x.at(0, 0, y, xx), x.at(0, 1, y, xx), x.at(0, 2, y, xx), lab1);
            srgb_to_lab(x_adv.at(0, 0, y, xx), x_adv.at(0, 1, y, xx), x_adv.at(0, 2, y, xx), lab2);
            double d = ciede2000(lab1, lab2);
            sum2 += d * d;
        }
    return std::sqrt(sum2 / (static_cast<double>(h) * w));
}

// ------------------------------------------------------------------ lpips

double lpips(const Tensor& x, const Tensor& x_adv, const ModelHandle& feature_model,
             const std::vector<std::string>& layers) {
    auto ta = forward_with_taps(feature_model, x, layers);
    auto tb = forward_with_taps(feature_model, x_adv, layers);
    double total = 0.0;
    for (const auto& layer : layers) {
        const Tensor& fa = ta.taps.at(layer);
        const Tensor& fb = tb.taps.at(layer);
        int c = fa.dim(1), h = fa.dim(2), w = fa.dim(3);
        double layer_sum = 0.0;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                double na = 0, nb = 0;
                for (int k = 0; k < c; ++k) {
                    double a = fa.at(0, k, y, xx), b = fb.at(0, k, y, xx);
                    na += a * a;
                    nb += b * b;
                }
                na = std::sqrt(na) + 1e-10;
                nb = std::sqrt(nb) + 1e-10;
                // 0.5 ||f/|f| - f'/|f'|||^2 == 1 - cos for unit vectors, and
                // leaves all-zero feature locations at distance 0
                double d2 = 0.0;
                for (int k = 0; k < c; ++k) {
                    double u = fa.at(0, k, y, xx) / na - fb.at(0, k, y, xx) / nb;
                    d2 += u * u;
                }
                layer_sum += 0.5 * d2;
            }
        total += layer_sum / (static_cast<double>(h) * w);
    }
    return total;
}

// ------------------------------------------------------------------ fid

std::vector<std::vector<double>> pooled_features(const ModelHandle& model, const Tensor& images) {
    auto taps = forward_with_taps(model, images, {"pool"});
    const Tensor& pooled = taps.taps.at("pool");
    int n = pooled.dim(0), c = pooled.dim(1);
    std::vector<std::vector<double>> out(n, std::vector<double>(c));
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k) out[b][k] = pooled.at(b, k, 0, 0);
    return out;
}

double fid_from_features(const std::vector<std::vector<double>>& set_a,
                         const std::vector<std::vector<double>>& set_b, bool* regularized) {
    if (set_a.size() < 2 || set_b.size() < 2) throw ConfigError("fid needs >= 2 samples per set");
    size_t d = set_a[0].size();
    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    auto fit = [&](const std::vector<std::vector<double>>& s, Vec& mu, Mat& cov) {
        size_t n = s.size();
        mu = Vec::Zero(d);
        for (const auto& row : s)
            for (size_t i = 0; i < d; ++i) mu(i) += row[i];
        mu /= static_cast<double>(n);
        cov = Mat::Zero(d, d);
        for (const auto& row : s) {
            Vec v(d);
            for (size_t i = 0; i < d; ++i) v(i) = row[i] - mu(i);
            cov += v * v.transpose();
        }
        cov /= static_cast<double>(n - 1);
    };
    Vec mu_a, mu_b;
    Mat cov_a, cov_b;
    fit(set_a, mu_a, cov_a);
    fit(set_b, mu_b, cov_b);

    bool reg = false;
    auto min_eig = [](const Mat& m) {
        Eigen::SelfAdjointEigenSolver<Mat> es(m);
        return es.eigenvalues().minCoeff();
    };
    if (min_eig(cov_a) < 1e-10 || min_eig(cov_b) < 1e-10) {
        reg = true;
        cov_a += 1e-6 * Mat::Identity(d, d);
        cov_b += 1e-6 * Mat::Identity(d, d);
    }
    if (regularized) *regularized = reg;

    // sqrt(cov_a) via symmetric eigendecomposition
    Eigen::SelfAdjointEigenSolver<Mat> es_a(cov_a);
    Vec ev = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Mat sqrt_a = es_a.eigenvectors() * ev.asDiagonal() * es_a.eigenvectors().transpose();

    Mat inner = sqrt_a * cov_b * sqrt_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> es_i(inner);
    double tr_sqrt = es_i.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double mean_term = (mu_a - mu_b).squaredNorm();
    double value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    return std::max(value, 0.0);
}

double fid(const Tensor& set_a, const Tensor& set_b, const ModelHandle& feature_model,
           bool* regularized) {
    return fid_from_features(pooled_features(feature_model, set_a),
                             pooled_features(feature_model, set_b), regularized);
}

// ------------------------------------------------------------------ AI / AD

static std::vector<double> class_probabilities(const ModelHandle& model, const Tensor& images,
                                               const std::vector<int>& labels) {
    Tensor logits = forward(model, images);
    Tensor p = softmax_rows(logits);
    int k = logits.dim(1);
    std::vector<double> out(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) out[i] = p[i * k + labels[i]];
    return out;
}

InterpretabilityScores ai_ad_from_probabilities(const std::vector<double>& original,
                                                const std::vector<double>& masked) {
    if (original.empty() || original.size() != masked.size())
        throw ConfigError("ai/ad need matching non-empty probability lists");
    InterpretabilityScores s;
    for (size_t i = 0; i < original.size(); ++i) {
        if (original[i] <= 0.0) throw ConfigError("ai/ad need positive original probabilities");
        if (original[i] < masked[i]) s.average_increase += 1.0;
        s.average_drop += std::max(original[i] - masked[i], 0.0) / original[i];
    }
    s.average_increase *= 100.0 / original.size();
    s.average_drop *= 100.0 / original.size();
    return s;
}

InterpretabilityScores average_increase_drop(const ModelHandle& model, const Tensor& images,
                                             const Tensor& masked_images,
                                             const std::vector<int>& labels) {
    if (labels.empty()) throw ConfigError("average_increase_drop needs samples");
    return ai_ad_from_probabilities(class_probabilities(model, images, labels),
                                    class_probabilities(model, masked_images, labels));
}

Tensor gradcam_masked_images(const ModelHandle& model, const Tensor& images,
                             const std::vector<int>& labels) {
    Tensor out = images;
    for (size_t i = 0; i < labels.size(); ++i) {
        Tensor img = images.slice_n(static_cast<int>(i));
        Tensor sal = gradcam(model, img, labels[i]);
        Tensor masked = img;
        for (int c = 0; c < img.dim(1); ++c)
            for (int y = 0; y < img.dim(2); ++y)
                for (int x = 0; x < img.dim(3); ++x)
                    masked.at(0, c, y, x) *= sal.at(0, 0, y, x);
        out.set_slice_n(static_cast<int>(i), masked);
    }
    return out;
}

// ------------------------------------------------------------------ KL

double model_kl(const ModelHandle& surrogate, const ModelHandle& target, const Tensor& images,
                const std::vector<int>& labels, bool single_class_mode) {
    Tensor ls = forward(surrogate, images);
    Tensor lt = forward(target, images);
    Tensor ps = softmax_rows(ls);
    Tensor pt = softmax_rows(lt);
    int n = ls.dim(0), k = ls.dim(1);
    double total = 0.0;
    for (int b = 0; b < n; ++b) {
        if (single_class_mode) {
            if (labels.empty()) throw ConfigError("single-class KL mode needs labels");
            double p = std::clamp<double>(ps[b * k + labels[b]], 1e-12, 1.0 - 1e-12);
            double q = std::clamp<double>(pt[b * k + labels[b]], 1e-12, 1.0 - 1e-12);
            total += p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q));
        } else {
            for (int c = 0; c < k; ++c) {
                double p = std::max<double>(ps[b * k + c], 1e-12);
                double q = std::max<double>(pt[b * k + c], 1e-12);
                total += p * std::log(p / q);
            }
        }
    }
    return std::max(total / n, 0.0);
}

// ------------------------------------------------------------------ gradcam

Tensor gradcam(const ModelHandle& model, const Tensor& image, int class_id) {
    ForwardTrace trace;
    Tensor logits = forward(model, image, &trace);
    if (class_id < 0 || class_id >= logits.dim(1)) throw ConfigError("gradcam: bad class id");
    Tensor gl(logits.shape());
    gl[class_id] = 1.f;
    std::map<std::string, Tensor> record;
    backward_to_input(model, trace, gl, nullptr, nullptr, &record);
    const std::string last = model.def().stages.back().name;
    const Tensor& grads = record.at(last);
    const Tensor& feats = trace.stage_outputs.back();
    int c = feats.dim(1), h = feats.dim(2), w = feats.dim(3);

    Tensor cam({1, 1, h, w});
    for (int k = 0; k < c; ++k) {
        double wk = 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) wk += grads.at(0, k, y, x);
        wk /= static_cast<double>(h) * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                cam.at(0, 0, y, x) += static_cast<float>(wk) * feats.at(0, k, y, x);
    }
    for (size_t i = 0; i < cam.size(); ++i) cam[i] = std::max(cam[i], 0.f);
    Tensor up = resize_bilinear(cam, image.dim(2), image.dim(3));
    float mn = up[0], mx = up[0];
    for (size_t i = 0; i < up.size(); ++i) {
        mn = std::min(mn, up[i]);
        mx = std::max(mx, up[i]);
    }
    if (mx - mn < 1e-12f) {
        up.fill(0.5f);  // uniform map for uniform activations
        return up;
    }
    for (size_t i = 0; i < up.size(); ++i) up[i] = (up[i] - mn) / (mx - mn);
    return up;
}

// ------------------------------------------------------------------ spearman

static std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw ConfigError("spearman needs equal sizes >= 2");
    auto ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0 || db == 0) return 0.0;
    return num / std::sqrt(da * db);
}

}  // namespace tbench
