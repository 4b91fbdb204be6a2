#include <doctest.h>

#include <cmath>

#include "tbench/errors.hpp"
#include "tbench/feature_attack.hpp"
#include "test_support.hpp"

using namespace tbench;
using namespace tbench::test;

TEST_SUITE_BEGIN("feature_attacks");

namespace {
double feature_l2(const ModelHandle& m, const Tensor& a, const Tensor& b,
                  const std::string& layer) {
    auto ta = forward_with_taps(m, a, {layer});
    auto tb = forward_with_taps(m, b, {layer});
    const Tensor& fa = ta.taps.at(layer);
    const Tensor& fb = tb.taps.at(layer);
    double s = 0.0;
    for (size_t i = 0; i < fa.size(); ++i) {
        double d = static_cast<double>(fa[i]) - fb[i];
        s += d * d;
    }
    return s;
}
}  // namespace

TEST_CASE("plain feature distance gradient is zero at the reference point") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 20);
    Tensor g = feature_distance_gradient(model, x, x, "conv3_x");
    CHECK(g.max_abs() == 0.f);
}

TEST_CASE("feature distance gradient matches finite differences") {
    const ModelHandle& model = tiny_trained_model();
    Tensor ref = random_image(32, 21);
    Tensor x = random_image(32, 22);
    Tensor g = feature_distance_gradient(model, x, ref, "conv3_x");
    auto fd = finite_diff_check(
        [&](const Tensor& p) { return feature_l2(model, p, ref, "conv3_x"); }, x, g, 20, 23);
    CHECK(fd.checked == 20);
    CHECK(fd.max_rel_err < 1e-3);
}

TEST_CASE("unknown layer raises a config error") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 24);
    CHECK_THROWS_AS(feature_distance_gradient(model, x, x, "conv7_x"), ConfigError);
}

TEST_CASE("TAP gradient reduces to plain feature distance when both regularizers vanish") {
    const ModelHandle& model = tiny_trained_model();
    Tensor clean = random_image(32, 25);
    Tensor x = random_image(32, 26);
    FeatureLossSpec spec;
    spec.variant = FeatureLossSpec::Variant::TAP;
    spec.tap_all_layers = false;
    spec.layer = "conv3_x";
    spec.tap_lambda = 0.f;
    spec.tap_eta = 0.f;
    Tensor g_tap = tap_gradient(spec, model, x, clean, 1);
    Tensor g_plain = feature_distance_gradient(model, x, clean, "conv3_x");
    for (size_t i = 0; i < g_tap.size(); ++i)
        CHECK(g_tap[i] == doctest::Approx(g_plain[i]).epsilon(1e-5));
}

TEST_CASE("full TAP objective gradient passes finite differences") {
    const ModelHandle& model = tiny_trained_model();
    Tensor clean = random_image(32, 27);
    Tensor x = clean;
    Rng rng(28);
    for (size_t i = 0; i < x.size(); ++i)
        x[i] = std::min(std::max(x[i] + rng.uniform(-0.05f, 0.05f), 0.f), 1.f);
    FeatureLossSpec spec;
    spec.variant = FeatureLossSpec::Variant::TAP;
    spec.tap_all_layers = true;
    Tensor g = tap_gradient(spec, model, x, clean, 4);

    auto loss = [&](const Tensor& p) {
        double total = 0.0;
        for (const auto& st : model.def().stages)
            total += feature_l2(model, p, clean, st.name);
        total += spec.tap_lambda * cross_entropy_sum(forward(model, p), {4});
        // smoothness penalty on the perturbation
        Tensor d = p - clean;
        double tv = 0.0;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 32; ++y)
                for (int xx = 0; xx < 32; ++xx) {
                    if (xx + 1 < 32) {
                        double dd = d.at(0, c, y, xx) - d.at(0, c, y, xx + 1);
                        tv += std::pow(dd * dd + 1e-8, spec.tap_alpha / 2.0);
                    }
                    if (y + 1 < 32) {
                        double dd = d.at(0, c, y, xx) - d.at(0, c, y + 1, xx);
                        tv += std::pow(dd * dd + 1e-8, spec.tap_alpha / 2.0);
                    }
                }
        return total - spec.tap_eta * tv;
    };
    auto fd = finite_diff_check(loss, x, g, 15, 29);
    CHECK(fd.max_rel_err < 2e-3);
}

TEST_CASE("AA gradient vanishes at its own target image") {
    const ModelHandle& model = tiny_trained_model();
    Tensor target = random_image(32, 30);
    Tensor g = feature_distance_gradient(model, target, target, "conv3_x", /*descend=*/true);
    CHECK(g.max_abs() == 0.f);
}

TEST_CASE("FIA importance weights") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 31);
    SUBCASE("p_drop=0 equals the single unmasked feature gradient") {
        Rng rng(32);
        Tensor w = fia_feature_importance(model, x, 2, "conv3_x", 7, 0.f, rng);
        ForwardTrace trace;
        Tensor logits = forward(model, x, &trace);
        Tensor gl(logits.shape());
        gl[2] = 1.f;
        std::map<std::string, Tensor> rec;
        backward_to_input(model, trace, gl, nullptr, nullptr, &rec);
        const Tensor& direct = rec.at("conv3_x");
        REQUIRE(w.same_shape(direct));
        for (size_t i = 0; i < w.size(); ++i)
            CHECK(w[i] == doctest::Approx(direct[i]).epsilon(1e-6));
    }
    SUBCASE("N=1 with a fixed seed equals the directly computed masked gradient") {
        Rng rng = Rng::substream(33, 0xF1A0, 0);
        Tensor w = fia_feature_importance(model, x, 2, "conv3_x", 1, 0.3f, rng);
        Rng rng2 = Rng::substream(33, 0xF1A0, 0);
        Tensor masked = x;
        for (int y = 0; y < 32; ++y)
            for (int xx = 0; xx < 32; ++xx) {
                float keep = rng2.uniform() >= 0.3f ? 1.f : 0.f;
                for (int c = 0; c < 3; ++c) masked.at(0, c, y, xx) *= keep;
            }
        ForwardTrace trace;
        Tensor logits = forward(model, masked, &trace);
        Tensor gl(logits.shape());
        gl[2] = 1.f;
        std::map<std::string, Tensor> rec;
        backward_to_input(model, trace, gl, nullptr, nullptr, &rec);
        const Tensor& direct = rec.at("conv3_x");
        for (size_t i = 0; i < w.size(); ++i)
            CHECK(w[i] == doctest::Approx(direct[i]).epsilon(1e-6));
    }
    SUBCASE("weight shape equals the feature map shape") {
        Rng rng(34);
        Tensor w = fia_feature_importance(model, x, 2, "conv3_x", 2, 0.3f, rng);
        auto taps = forward_with_taps(model, x, {"conv3_x"});
        CHECK(w.same_shape(taps.taps.at("conv3_x")));
    }
}

TEST_CASE("NAA attribution") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 35);
    SUBCASE("zero at the baseline image") {
        Tensor black({1, 3, 32, 32});
        NaaAttribution a = naa_attribution(model, black, 1, "conv3_x", 4);
        CHECK(a.attribution.max_abs() == 0.f);
    }
    SUBCASE("N=1 equals the single midpoint gradient times the feature delta") {
        NaaAttribution a = naa_attribution(model, x, 1, "conv3_x", 1);
        Tensor mid = x;
        mid.scale(0.5f);
        ForwardTrace trace;
        Tensor logits = forward(model, mid, &trace);
        Tensor gl(logits.shape());
        gl[1] = 1.f;
        std::map<std::string, Tensor> rec;
        backward_to_input(model, trace, gl, nullptr, nullptr, &rec);
        const Tensor& g_mid = rec.at("conv3_x");
        auto fx = forward_with_taps(model, x, {"conv3_x"});
        Tensor black({1, 3, 32, 32});
        auto f0 = forward_with_taps(model, black, {"conv3_x"});
        for (size_t i = 0; i < a.attribution.size(); ++i) {
            float expect = (fx.taps.at("conv3_x")[i] - f0.taps.at("conv3_x")[i]) * g_mid[i];
            CHECK(a.attribution[i] == doctest::Approx(expect).epsilon(1e-5));
        }
    }
    SUBCASE("completeness at the last stage (linear head) for N=300") {
        // from conv5_x the head is GAP + linear, so the feature-space path
        // integral telescopes exactly up to the Riemann error
        NaaAttribution a = naa_attribution(model, x, 1, "conv5_x", 300);
        double total = 0.0;
        for (size_t i = 0; i < a.attribution.size(); ++i) total += a.attribution[i];
        Tensor black({1, 3, 32, 32});
        float lx = forward(model, x)[1];
        float l0 = forward(model, black)[1];
        double want = static_cast<double>(lx) - l0;
        CHECK(std::fabs(total - want) <= 0.05 * std::fabs(want));
    }
}

TEST_CASE("ILA two-stage behavior") {
    const ModelHandle& model = tiny_trained_model();
    Tensor imgs({4, 3, 32, 32});
    for (int i = 0; i < 4; ++i) imgs.set_slice_n(i, random_image(32, 36 + i));
    std::vector<int> labels = {0, 1, 2, 3};
    AttackSpec stage1;
    stage1.variant = "ILA";
    stage1.epsilon = 16.f / 255.f;
    stage1.step_size = 2.f / 255.f;
    stage1.iterations = 5;

    SUBCASE("T2=0 returns the warm-start batch unchanged") {
        AdversarialBatch warm = ila_two_stage(stage1, model, imgs, labels, "conv3_x", 0);
        GradProvider ce = make_ce_grad_provider(model, labels, stage1);
        AdversarialBatch direct = run_iterative_attack(stage1, model, imgs, labels, ce);
        CHECK(bitwise_equal(warm.adversarials, direct.adversarials));
    }
    SUBCASE("stage 2 grows the feature displacement and keeps the budget") {
        AdversarialBatch two = ila_two_stage(stage1, model, imgs, labels, "conv3_x", 15);
        CHECK(linf_distance(two.adversarials, two.originals) <= stage1.epsilon + 1.f / 510.f);
        GradProvider ce = make_ce_grad_provider(model, labels, stage1);
        AdversarialBatch warm = run_iterative_attack(stage1, model, imgs, labels, ce);
        int grew = 0;
        for (int i = 0; i < 4; ++i) {
            double before = feature_l2(model, warm.adversarials.slice_n(i), imgs.slice_n(i),
                                       "conv3_x");
            double after = feature_l2(model, two.adversarials.slice_n(i), imgs.slice_n(i),
                                      "conv3_x");
            if (after >= before) ++grew;
        }
        CHECK(grew >= 3);  // >= 90% of samples at this batch size means all but one
    }
}

TEST_CASE("feature grad providers pass finite differences against their objectives") {
    const ModelHandle& model = tiny_trained_model();
    Tensor imgs({1, 3, 32, 32});
    imgs.set_slice_n(0, random_image(32, 40));
    std::vector<int> labels = {2};
    Dataset pool = make_synthetic_dataset(60, 10, 32, 407);

    SUBCASE("FIA provider") {
        FeatureLossSpec spec;
        spec.variant = FeatureLossSpec::Variant::FIA;
        spec.fia_n = 4;
        GradProvider provider = make_feature_grad_provider(spec, model, imgs, labels, &pool, 41);
        Tensor x = imgs.slice_n(0);
        Tensor g = provider(x, 0, 0);
        Rng rng = Rng::substream(41, 0xF1A0, 0);
        Tensor w = fia_feature_importance(model, x, 2, "conv3_x", 4, 0.3f, rng);
        auto loss = [&](const Tensor& p) {
            auto taps = forward_with_taps(model, p, {"conv3_x"});
            const Tensor& f = taps.taps.at("conv3_x");
            double s = 0.0;
            for (size_t i = 0; i < f.size(); ++i) s += static_cast<double>(w[i]) * f[i];
            return -s;  // provider ascends the negated FIA loss
        };
        auto fd = finite_diff_check(loss, x, g, 15, 42);
        CHECK(fd.max_rel_err < 1e-3);
    }
    SUBCASE("AA provider descends towards its target features") {
        FeatureLossSpec spec;
        spec.variant = FeatureLossSpec::Variant::AA;
        spec.aa_num_targets = 8;
        GradProvider provider = make_feature_grad_provider(spec, model, imgs, labels, &pool, 43);
        Tensor x = imgs.slice_n(0);
        Tensor g = provider(x, 0, 0);
        CHECK(g.max_abs() > 0.f);
    }
}

TEST_CASE("layer sweep emits one deterministic row per layer") {
    const ModelHandle& surrogate = tiny_trained_model();
    const ModelHandle& target = tiny_untrained_convnet();
    Dataset ds = make_synthetic_dataset(6, 10, 32, 408);
    FeatureLossSpec spec;
    spec.variant = FeatureLossSpec::Variant::FIA;
    spec.fia_n = 3;
    AttackSpec atk;
    atk.variant = "FIA";
    atk.epsilon = 16.f / 255.f;
    atk.step_size = 4.f / 255.f;
    atk.iterations = 3;
    auto rows = layer_sweep(spec, atk, surrogate, target, ds, {"conv2_x", "conv3_x", "conv5_x"});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].layer == "conv2_x");
    auto again = layer_sweep(spec, atk, surrogate, target, ds, {"conv2_x", "conv3_x", "conv5_x"});
    for (size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].success == again[i].success);
}

TEST_SUITE_END();
