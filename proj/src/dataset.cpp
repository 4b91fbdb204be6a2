#include "tbench/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "tbench/errors.hpp"
#include "tbench/image.hpp"
#include "tbench/rng.hpp"

namespace fs = std::filesystem;

namespace tbench {

Dataset Dataset::subset(const std::vector<int>& indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.images = Tensor({static_cast<int>(indices.size()), images.dim(1), images.dim(2), images.dim(3)});
    out.labels.resize(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        out.images.set_slice_n(static_cast<int>(i), images.slice_n(indices[i]));
        out.labels[i] = labels[indices[i]];
    }
    return out;
}

Dataset Dataset::take(size_t count) const {
    std::vector<int> idx(std::min(count, size()));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    return subset(idx);
}

static void hsv_to_rgb(float h, float s, float v, float rgb[3]) {
    h = h - std::floor(h);
    float i = std::floor(h * 6.f);
    float f = h * 6.f - i;
    float p = v * (1.f - s), q = v * (1.f - f * s), t = v * (1.f - (1.f - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

static bool in_shape(int shape, float xr, float yr, float r) {
    float d2 = xr * xr + yr * yr;
    switch (shape) {
        case 0: return d2 <= r * r;                                        // disk
        case 1: return std::max(std::fabs(xr), std::fabs(yr)) <= 0.82f * r; // square
        case 2: return yr > -0.62f * r && yr < 0.8f * r - 1.5f * std::fabs(xr);  // triangle
        case 3: return d2 <= r * r && d2 >= 0.3f * r * r;                  // ring
        default:                                                           // cross
            return std::max(std::fabs(xr), std::fabs(yr)) <= r &&
                   (std::fabs(xr) <= 0.34f * r || std::fabs(yr) <= 0.34f * r);
    }
}

Dataset make_synthetic_dataset(int count, int num_classes, int image_size, uint64_t seed) {
    Dataset ds;
    ds.num_classes = num_classes;
    ds.images = Tensor({count, 3, image_size, image_size});
    ds.labels.resize(count);
    const float S = static_cast<float>(image_size);
    for (int n = 0; n < count; ++n) {
        Rng rng = Rng::substream(seed, 0xDA7A, static_cast<uint64_t>(n));
        int label = rng.uniform_int(0, num_classes - 1);
        ds.labels[n] = label;
        int shape = label % 5;
        bool striped = (label / 5) % 2 == 1;
        float hue = label / static_cast<float>(num_classes) + rng.uniform(-0.03f, 0.03f);
        float fg[3];
        hsv_to_rgb(hue, 0.85f, 0.9f, fg);

        float base = rng.uniform(0.10f, 0.30f);
        float gx = rng.uniform(-1.f, 1.f), gy = rng.uniform(-1.f, 1.f);
        float cx = S / 2 + rng.uniform(-S / 8, S / 8);
        float cy = S / 2 + rng.uniform(-S / 8, S / 8);
        float r = rng.uniform(0.22f * S, 0.36f * S);
        float theta = rng.uniform(0.f, 2.f * static_cast<float>(M_PI));
        float ct = std::cos(theta), st = std::sin(theta);
        float stripe_freq = 2.f * static_cast<float>(M_PI) / rng.uniform(3.f, 5.f);

        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x) {
                float xr = ct * (x - cx) + st * (y - cy);
                float yr = -st * (x - cx) + ct * (y - cy);
                float bg = base + 0.08f * (gx * x + gy * y) / S;
                float px[3] = {bg, bg, bg};
                if (in_shape(shape, xr, yr, r)) {
                    float mod = 1.f;
                    if (striped) mod = 0.55f + 0.45f * std::sin(stripe_freq * xr);
                    for (int c = 0; c < 3; ++c) px[c] = fg[c] * mod;
                }
                for (int c = 0; c < 3; ++c) {
                    float v = px[c] + rng.normal(0.f, 0.03f);
                    ds.images.at(n, c, y, x) = std::min(std::max(v, 0.f), 1.f);
                }
            }
    }
    ds.images = quantize8(ds.images);
    return ds;
}

Dataset make_two_blob_dataset(int count, uint64_t seed) {
    Dataset ds;
    ds.num_classes = 2;
    const int size = 32;
    ds.images = Tensor({count, 3, size, size});
    ds.labels.resize(count);
    for (int n = 0; n < count; ++n) {
        Rng rng = Rng::substream(seed, 0xB10B, static_cast<uint64_t>(n));
        int label = n % 2;
        ds.labels[n] = label;
        float base = label == 0 ? 0.25f : 0.75f;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    float v = base + rng.normal(0.f, 0.02f);
                    ds.images.at(n, c, y, x) = std::min(std::max(v, 0.f), 1.f);
                }
    }
    ds.images = quantize8(ds.images);
    return ds;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
    fs::create_directories(dir);
    std::ofstream lf(dir + "/labels.csv");
    lf << "filename,label\n";
    char name[64];
    for (size_t n = 0; n < ds.size(); ++n) {
        std::snprintf(name, sizeof(name), "img_%05zu.ppm", n);
        save_ppm(dir + "/" + name, ds.images.slice_n(static_cast<int>(n)));
        lf << name << "," << ds.labels[n] << "\n";
    }
    std::ofstream mf(dir + "/meta.json");
    mf << "{\"num_classes\": " << ds.num_classes << "}\n";
}

Dataset load_dataset_dir(const std::string& dir) {
    std::ifstream lf(dir + "/labels.csv");
    if (!lf) throw IoError("missing labels.csv in " + dir);
    std::string line;
    std::getline(lf, line);  // header
    std::vector<std::pair<std::string, int>> entries;
    while (std::getline(lf, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) throw IoError("bad labels.csv line: " + line);
        entries.emplace_back(line.substr(0, comma), std::stoi(line.substr(comma + 1)));
    }
    if (entries.empty()) throw IoError("empty dataset: " + dir);
    Dataset ds;
    Tensor first = load_ppm(dir + "/" + entries[0].first);
    ds.images = Tensor({static_cast<int>(entries.size()), 3, first.dim(2), first.dim(3)});
    ds.labels.resize(entries.size());
    int max_label = 0;
    for (size_t n = 0; n < entries.size(); ++n) {
        Tensor img = n == 0 ? first : load_ppm(dir + "/" + entries[n].first);
        if (img.dim(2) != first.dim(2) || img.dim(3) != first.dim(3))
            throw IoError("inconsistent image sizes in " + dir);
        ds.images.set_slice_n(static_cast<int>(n), img);
        ds.labels[n] = entries[n].second;
        max_label = std::max(max_label, entries[n].second);
    }
    ds.num_classes = max_label + 1;
    std::ifstream mf(dir + "/meta.json");
    if (mf) {
        std::string text((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
        auto pos = text.find("num_classes");
        if (pos != std::string::npos) {
            pos = text.find(':', pos);
            if (pos != std::string::npos) ds.num_classes = std::stoi(text.substr(pos + 1));
        }
    }
    return ds;
}

uint64_t dataset_hash(const Dataset& ds) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    mix(ds.images.data(), ds.images.size() * sizeof(float));
    mix(ds.labels.data(), ds.labels.size() * sizeof(int));
    return h;
}

}  // namespace tbench
