#pragma once

#include <string>
#include <vector>

#include "tbench/tensor.hpp"

namespace tbench {

struct Dataset {
    Tensor images;  // {N,3,H,W}, 8-bit quantized values in [0,1]
    std::vector<int> labels;
    int num_classes = 0;

    size_t size() const { return labels.size(); }
    Dataset subset(const std::vector<int>& indices) const;
    Dataset take(size_t count) const;
};

// Procedurally rendered 10-class shape/texture corpus. Classes differ in
// shape, hue, and stripe texture; instances vary in position, size,
// rotation, background, and pixel noise.
Dataset make_synthetic_dataset(int count, int num_classes, int image_size, uint64_t seed);

// Two uniformly colored blobs; linearly separable.
Dataset make_two_blob_dataset(int count, uint64_t seed);

void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset_dir(const std::string& dir);

uint64_t dataset_hash(const Dataset& ds);

}  // namespace tbench
