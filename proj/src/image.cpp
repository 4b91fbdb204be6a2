#include "tbench/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "tbench/errors.hpp"

namespace tbench {

Tensor load_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("unsupported image format (want P6 ppm): " + path);
    auto skip_ws_comments = [&f]() {
        while (true) {
            int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
    };
    int w = 0, h = 0, maxval = 0;
    skip_ws_comments(); f >> w;
    skip_ws_comments(); f >> h;
    skip_ws_comments(); f >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError("bad ppm header: " + path);
    f.get();  // single whitespace after header
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(raw.data()), raw.size());
    if (!f) throw IoError("truncated ppm: " + path);
    Tensor img({1, 3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(0, c, y, x) = raw[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.f;
    return img;
}

void save_ppm(const std::string& path, const Tensor& img) {
    if (img.rank() != 4 || img.dim(0) != 1 || img.dim(1) != 3)
        throw IoError("save_ppm expects a single 3-channel image, got " + img.shape_str());
    int h = img.dim(2), w = img.dim(3);
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::min(std::max(img.at(0, c, y, x), 0.f), 1.f);
                raw[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.f));
            }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write image: " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(raw.data()), raw.size());
}

// Sample positions follow the align-corners=false convention.
struct LinCoef {
    int i0, i1;
    float w0, w1;
};

static std::vector<LinCoef> linear_coeffs(int in, int out) {
    std::vector<LinCoef> cs(out);
    double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        double fl = std::floor(src);
        int i0 = static_cast<int>(fl);
        float frac = static_cast<float>(src - fl);
        int i1 = i0 + 1;
        i0 = std::clamp(i0, 0, in - 1);
        i1 = std::clamp(i1, 0, in - 1);
        cs[o] = {i0, i1, 1.f - frac, frac};
    }
    return cs;
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
    int n = x.dim(0), c = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
    if (in_h == out_h && in_w == out_w) return x;
    auto ch = linear_coeffs(in_h, out_h);
    auto cw = linear_coeffs(in_w, out_w);
    Tensor out({n, c, out_h, out_w});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int y = 0; y < out_h; ++y) {
                const auto& cy = ch[y];
                for (int xo = 0; xo < out_w; ++xo) {
                    const auto& cx = cw[xo];
                    float v = cy.w0 * (cx.w0 * x.at(b, k, cy.i0, cx.i0) + cx.w1 * x.at(b, k, cy.i0, cx.i1)) +
                              cy.w1 * (cx.w0 * x.at(b, k, cy.i1, cx.i0) + cx.w1 * x.at(b, k, cy.i1, cx.i1));
                    out.at(b, k, y, xo) = v;
                }
            }
    return out;
}

Tensor resize_bilinear_vjp(const Tensor& gy, int in_h, int in_w) {
    int n = gy.dim(0), c = gy.dim(1), out_h = gy.dim(2), out_w = gy.dim(3);
    if (in_h == out_h && in_w == out_w) return gy;
    auto ch = linear_coeffs(in_h, out_h);
    auto cw = linear_coeffs(in_w, out_w);
    Tensor gx({n, c, in_h, in_w});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int y = 0; y < out_h; ++y) {
                const auto& cy = ch[y];
                for (int xo = 0; xo < out_w; ++xo) {
                    const auto& cx = cw[xo];
                    float g = gy.at(b, k, y, xo);
                    gx.at(b, k, cy.i0, cx.i0) += cy.w0 * cx.w0 * g;
                    gx.at(b, k, cy.i0, cx.i1) += cy.w0 * cx.w1 * g;
                    gx.at(b, k, cy.i1, cx.i0) += cy.w1 * cx.w0 * g;
                    gx.at(b, k, cy.i1, cx.i1) += cy.w1 * cx.w1 * g;
                }
            }
    return gx;
}

Tensor translate(const Tensor& x, int dx, int dy) {
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({n, c, h, w});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int y = 0; y < h; ++y) {
                int sy = y - dy;
                if (sy < 0 || sy >= h) continue;
                for (int xo = 0; xo < w; ++xo) {
                    int sx = xo - dx;
                    if (sx < 0 || sx >= w) continue;
                    out.at(b, k, y, xo) = x.at(b, k, sy, sx);
                }
            }
    return out;
}

Tensor pad_to(const Tensor& x, int out_h, int out_w, int top, int left) {
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({n, c, out_h, out_w});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int y = 0; y < h; ++y)
                for (int xo = 0; xo < w; ++xo)
                    out.at(b, k, y + top, xo + left) = x.at(b, k, y, xo);
    return out;
}

Tensor crop_from(const Tensor& gy, int in_h, int in_w, int top, int left) {
    int n = gy.dim(0), c = gy.dim(1);
    Tensor gx({n, c, in_h, in_w});
    for (int b = 0; b < n; ++b)
        for (int k = 0; k < c; ++k)
            for (int y = 0; y < in_h; ++y)
                for (int xo = 0; xo < in_w; ++xo)
                    gx.at(b, k, y, xo) = gy.at(b, k, y + top, xo + left);
    return gx;
}

Tensor resize_center_crop(const Tensor& x, int size) {
    int h = x.dim(2), w = x.dim(3);
    int short_side = std::min(h, w);
    int nh = static_cast<int>(std::lround(static_cast<double>(h) * size / short_side));
    int nw = static_cast<int>(std::lround(static_cast<double>(w) * size / short_side));
    Tensor r = resize_bilinear(x, nh, nw);
    int top = (nh - size) / 2, left = (nw - size) / 2;
    Tensor out({x.dim(0), x.dim(1), size, size});
    for (int b = 0; b < x.dim(0); ++b)
        for (int k = 0; k < x.dim(1); ++k)
            for (int y = 0; y < size; ++y)
                for (int xo = 0; xo < size; ++xo)
                    out.at(b, k, y, xo) = r.at(b, k, y + top, xo + left);
    return out;
}

}  // namespace tbench
