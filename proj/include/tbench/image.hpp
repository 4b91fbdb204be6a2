#pragma once

#include <string>

#include "tbench/tensor.hpp"

namespace tbench {

// Binary PPM (P6), 8-bit RGB. Images round-trip exactly for values on the
// k/255 grid, which is what quantize8 produces.
Tensor load_ppm(const std::string& path);              // {1,3,H,W} in [0,1]
void save_ppm(const std::string& path, const Tensor& img);  // expects {1,3,H,W}

// Bilinear resize of a {N,C,H,W} tensor to (out_h, out_w). Linear in the
// input, so it has an exact adjoint used for gradient mapping.
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor resize_bilinear_vjp(const Tensor& gy, int in_h, int in_w);

// Integer translation with zero fill; adjoint is the opposite shift.
Tensor translate(const Tensor& x, int dx, int dy);

// Zero-pad to (out_h, out_w) placing the input at (top, left); adjoint crops.
Tensor pad_to(const Tensor& x, int out_h, int out_w, int top, int left);
Tensor crop_from(const Tensor& gy, int in_h, int in_w, int top, int left);

// Shorter-side bilinear resize followed by center crop to (size x size).
Tensor resize_center_crop(const Tensor& x, int size);

}  // namespace tbench
