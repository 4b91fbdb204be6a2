#include <doctest.h>

#include <cmath>

#include "tbench/augment.hpp"
#include "tbench/image.hpp"
#include "tbench/errors.hpp"
#include "test_support.hpp"

using namespace tbench;
using namespace tbench::test;

TEST_SUITE_BEGIN("augment");

namespace {
Dataset donor_pool() {
    static Dataset pool = make_synthetic_dataset(60, 10, 32, 404);
    return pool;
}
}  // namespace

TEST_CASE("identity transform is a no-op") {
    TransformSpec spec;
    Tensor x = random_image(32, 1);
    Rng rng(1);
    Tensor y = augment(spec, x, rng);
    CHECK(bitwise_equal(x, y));
}

TEST_CASE("DI with p=0 is a no-op") {
    TransformSpec spec;
    spec.kind = TransformSpec::Kind::DI;
    spec.di_prob = 0.f;
    Tensor x = random_image(32, 2);
    Rng rng(2);
    CHECK(bitwise_equal(x, augment(spec, x, rng)));
}

TEST_CASE("TI shifts a delta image and zero-fills the frame") {
    Tensor x({1, 3, 32, 32});
    x.at(0, 0, 10, 10) = 1.f;
    Tensor y = translate(x, 2, 0);
    CHECK(y.at(0, 0, 10, 12) == 1.f);
    CHECK(y.at(0, 0, 10, 10) == 0.f);
    // out-of-frame content disappears
    Tensor edge({1, 3, 32, 32});
    edge.at(0, 0, 5, 31) = 1.f;
    Tensor moved = translate(edge, 2, 0);
    CHECK(moved.max_abs() == 0.f);
}

TEST_CASE("every transform preserves shape and range") {
    Dataset pool = donor_pool();
    Tensor x = random_image(32, 3);
    for (auto kind : {TransformSpec::Kind::DI, TransformSpec::Kind::TI, TransformSpec::Kind::SI,
                      TransformSpec::Kind::VT, TransformSpec::Kind::Admix}) {
        TransformSpec spec;
        spec.kind = kind;
        for (int rep = 0; rep < 5; ++rep) {
            Rng rng = Rng::substream(55, 0x7AA, rep);
            Tensor y = augment(spec, x, rng, nullptr, &pool, 0, rep);
            CHECK(y.same_shape(x));
            for (size_t i = 0; i < y.size(); ++i) {
                CHECK(y[i] >= 0.f);
                CHECK(y[i] <= 1.f);
            }
        }
    }
}

TEST_CASE("seeded transform draws are reproducible") {
    TransformSpec spec;
    spec.kind = TransformSpec::Kind::DI;
    Tensor x = random_image(32, 4);
    Rng a = Rng::substream(9, 0xD1, 3);
    Rng b = Rng::substream(9, 0xD1, 3);
    CHECK(bitwise_equal(augment(spec, x, a), augment(spec, x, b)));
}

TEST_CASE("Admix without donors is a config error") {
    TransformSpec spec;
    spec.kind = TransformSpec::Kind::Admix;
    Tensor x = random_image(32, 5);
    Rng rng(5);
    CHECK_THROWS_AS(augment(spec, x, rng), ConfigError);
}

TEST_CASE("identity averaged gradient equals the plain gradient bitwise") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 6);
    for (int m : {1, 5}) {
        TransformSpec spec;
        spec.copies = m;
        Rng rng(6);
        Tensor g = averaged_gradient(spec, model, x, 3, rng);
        Tensor plain = input_gradient(model, x, LossSpec{LossSpec::Kind::CrossEntropy, {3}});
        CHECK(bitwise_equal(g, plain));
    }
}

TEST_CASE("m=2 averaged gradient equals the mean of the two single draws") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 7);
    TransformSpec spec;
    spec.kind = TransformSpec::Kind::TI;
    spec.copies = 2;
    Rng rng_joint = Rng::substream(77, 0xAB, 0);
    Tensor joint = averaged_gradient(spec, model, x, 2, rng_joint);

    // same stream, drawn manually one copy at a time
    Rng rng_manual = Rng::substream(77, 0xAB, 0);
    LossSpec loss{LossSpec::Kind::CrossEntropy, {2}};
    std::vector<double> acc(x.size(), 0.0);
    for (int j = 0; j < 2; ++j) {
        TransformDraw draw;
        Tensor xt = augment(spec, x, rng_manual, &draw, nullptr, 2, j);
        Tensor g = input_gradient(model, xt, loss);
        Tensor gx = augment_vjp(draw, g);
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += gx[i];
    }
    Tensor mean(x.shape());
    for (size_t i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>(acc[i] / 2.0);
    CHECK(bitwise_equal(joint, mean));
}

TEST_CASE("transform-composed CE gradients match finite differences") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 8, 0.3f, 0.7f);
    Dataset pool = donor_pool();
    for (auto kind : {TransformSpec::Kind::DI, TransformSpec::Kind::TI, TransformSpec::Kind::SI,
                      TransformSpec::Kind::Admix}) {
        TransformSpec spec;
        spec.kind = kind;
        // one fixed draw of the transform; check grad of L(T(x)) w.r.t. x
        Rng draw_rng = Rng::substream(100, 0xFD, static_cast<uint64_t>(kind));
        TransformDraw draw;
        Tensor xt = augment(spec, x, draw_rng, &draw, &pool, 1, 0);
        LossSpec loss{LossSpec::Kind::CrossEntropy, {1}};
        Tensor g = augment_vjp(draw, input_gradient(model, xt, loss));
        auto replay = [&](const Tensor& p) {
            Tensor pt;
            switch (draw.kind) {
                case TransformSpec::Kind::DI:
                    if (!draw.applied) { pt = p; break; }
                    pt = resize_bilinear(p, draw.di_resized, draw.di_resized);
                    pt = pad_to(pt, draw.di_canvas, draw.di_canvas, draw.di_top, draw.di_left);
                    pt = resize_bilinear(pt, p.dim(2), p.dim(3));
                    break;
                case TransformSpec::Kind::TI: pt = translate(p, draw.ti_dx, draw.ti_dy); break;
                case TransformSpec::Kind::SI: pt = p; pt.scale(draw.si_factor); break;
                case TransformSpec::Kind::Admix: {
                    pt = p;
                    Tensor donor = pool.images.slice_n(draw.admix_donor);
                    pt.add_scaled(donor, spec.admix_eta);
                    for (size_t i = 0; i < pt.size(); ++i)
                        pt[i] = std::min(std::max(pt[i], 0.f), 1.f);
                    break;
                }
                default: pt = p;
            }
            return static_cast<double>(cross_entropy_sum(forward(model, pt), {1}));
        };
        auto fd = finite_diff_check(replay, x, g, 10, 1000 + static_cast<uint64_t>(kind));
        CHECK(fd.max_rel_err < 2e-3);
    }
}

TEST_CASE("m=5 estimator variance does not exceed the m=1 variance") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 9);
    TransformSpec spec;
    spec.kind = TransformSpec::Kind::VT;
    auto estimator_variance = [&](int m) {
        spec.copies = m;
        std::vector<Tensor> grads;
        for (int s = 0; s < 20; ++s) {
            Rng rng = Rng::substream(500 + s, 0xEE, 0);
            grads.push_back(averaged_gradient(spec, model, x, 2, rng));
        }
        Tensor mean(x.shape());
        for (const auto& g : grads) mean.add_scaled(g, 1.f / grads.size());
        double var = 0.0;
        for (const auto& g : grads)
            for (size_t i = 0; i < g.size(); ++i) {
                double d = g[i] - mean[i];
                var += d * d;
            }
        return var / grads.size();
    };
    CHECK(estimator_variance(5) <= estimator_variance(1));
}

TEST_CASE("input diversity sanity") {
    const ModelHandle& model = tiny_trained_model();
    Dataset ds = make_synthetic_dataset(12, 10, 32, 405);
    SUBCASE("identity is exactly zero") {
        TransformSpec spec;
        CHECK(input_diversity(spec, model, ds, 3, 11) == 0.0);
    }
    SUBCASE("VT with zero noise range is exactly zero") {
        TransformSpec spec;
        spec.kind = TransformSpec::Kind::VT;
        spec.vt_scale = 0.f;
        CHECK(input_diversity(spec, model, ds, 3, 12) == 0.0);
    }
    SUBCASE("empty dataset is a config error") {
        Dataset empty;
        empty.images = Tensor({0, 3, 32, 32});
        TransformSpec spec;
        CHECK_THROWS_AS(input_diversity(spec, model, empty, 1, 13), ConfigError);
    }
}

TEST_CASE("label preservation: accuracy drop under each transform stays small") {
    const ModelHandle& model = tiny_trained_model();
    Dataset ds = make_synthetic_dataset(100, 10, 32, 406);
    Dataset pool = donor_pool();
    float clean = accuracy(model, ds);
    for (auto kind : {TransformSpec::Kind::DI, TransformSpec::Kind::TI, TransformSpec::Kind::SI,
                      TransformSpec::Kind::VT, TransformSpec::Kind::Admix}) {
        TransformSpec spec;
        spec.kind = kind;
        size_t correct = 0;
        for (size_t i = 0; i < ds.size(); ++i) {
            Rng rng = Rng::substream(600, 0xAC, i * 8 + static_cast<uint64_t>(kind));
            Tensor xt = augment(spec, ds.images.slice_n(static_cast<int>(i)), rng, nullptr, &pool,
                                ds.labels[i], 0);
            if (predict(model, xt)[0] == ds.labels[i]) ++correct;
        }
        float aug_acc = static_cast<float>(correct) / ds.size();
        CHECK(aug_acc >= clean - 0.10f);
    }
}

TEST_SUITE_END();
