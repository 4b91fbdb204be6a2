#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tbench/errors.hpp"
#include "tbench/generative.hpp"
#include "test_support.hpp"

using namespace tbench;
using namespace tbench::test;

TEST_SUITE_BEGIN("generative");

namespace {
const GeneratorNet& small_trained_generator() {
    static GeneratorNet gen = [] {
        Dataset train = make_synthetic_dataset(160, 10, 32, 501);
        GenTrainConfig cfg;
        cfg.loss = GenLoss::GAP_CE;
        cfg.epochs = 2;
        cfg.seed = 17;
        return train_generator(cfg, train, tiny_trained_model());
    }();
    return gen;
}
}  // namespace

TEST_CASE("generator output shape equals input shape and is deterministic") {
    GeneratorNet gen(3);
    Tensor x({2, 3, 32, 32});
    for (int i = 0; i < 2; ++i) x.set_slice_n(i, random_image(32, 60 + i));
    Tensor a = gen.raw_perturbation(x);
    Tensor b = gen.raw_perturbation(x);
    CHECK(a.same_shape(x));
    CHECK(bitwise_equal(a, b));
}

TEST_CASE("discriminator parameters stay frozen during training") {
    const ModelHandle& disc = tiny_trained_model();
    uint64_t before = disc.param_hash();
    (void)small_trained_generator();
    CHECK(disc.param_hash() == before);
}

TEST_CASE("lr=0 leaves generator parameters unchanged") {
    Dataset train = make_synthetic_dataset(40, 10, 32, 502);
    GenTrainConfig cfg;
    cfg.loss = GenLoss::GAP_CE;
    cfg.epochs = 1;
    cfg.lr = 0.f;
    cfg.seed = 5;
    GeneratorNet trained = train_generator(cfg, train, tiny_trained_model());
    GeneratorNet fresh(cfg.seed);
    CHECK(trained.param_hash() == fresh.param_hash());
}

TEST_CASE("generator losses pass finite-difference checks in the perturbation") {
    const ModelHandle& disc = tiny_trained_model();
    Tensor clean({2, 3, 32, 32});
    clean.set_slice_n(0, random_image(32, 61, 0.3f, 0.7f));
    clean.set_slice_n(1, random_image(32, 62, 0.3f, 0.7f));
    std::vector<int> labels = {1, 4};

    Tensor adv = clean;
    Rng rng(63);
    // keep strictly inside the clip region so the chain is differentiable
    for (size_t i = 0; i < adv.size(); ++i) adv[i] += rng.uniform(-0.02f, 0.02f);

    Tensor pool_feats;
    {
        Dataset pool = make_synthetic_dataset(40, 10, 32, 503);
        std::vector<int> members;
        for (size_t i = 0; i < pool.size(); ++i)
            if (pool.labels[i] == 0) members.push_back(static_cast<int>(i));
        Dataset sub = pool.subset(members);
        auto taps = forward_with_taps(disc, sub.images, {"pool"});
        const Tensor& pooled = taps.taps.at("pool");
        pool_feats = Tensor({1, pooled.dim(1), 1, 1});
        for (int b = 0; b < pooled.dim(0); ++b)
            for (int k = 0; k < pooled.dim(1); ++k) pool_feats[k] += pooled.at(b, k, 0, 0);
        pool_feats.scale(1.f / pooled.dim(0));
    }

    for (GenLoss loss : {GenLoss::GAP_CE, GenLoss::CDA_RelativisticCE, GenLoss::GAPF_Feature,
                         GenLoss::BIA_FeatureRN, GenLoss::TTP_Distribution}) {
        CAPTURE(static_cast<int>(loss));
        GenTrainConfig cfg;
        cfg.loss = loss;
        cfg.ttp_target_class = 0;
        // fix the BIA normalization draw so value and gradient see the same transform
        auto eval_at = [&](const Tensor& a) {
            Rng rn = Rng::substream(99, 0xB1A, 0);
            return gen_loss_eval(cfg, disc, clean, labels, a, &pool_feats, &rn);
        };
        GenLossEval ev = eval_at(adv);
        auto fd = finite_diff_check([&](const Tensor& a) { return eval_at(a).value; }, adv,
                                    ev.grad_adv, 15, 64 + static_cast<uint64_t>(loss));
        CHECK(fd.checked >= 10);
        CHECK(fd.max_rel_err < 2e-3);
    }
}

TEST_CASE("generate clips, quantizes, and honors the budget") {
    const GeneratorNet& gen = small_trained_generator();
    Tensor imgs({3, 3, 32, 32});
    for (int i = 0; i < 3; ++i) imgs.set_slice_n(i, random_image(32, 70 + i));
    std::vector<int> labels = {0, 1, 2};
    AdversarialBatch b = generate(gen, imgs, labels, 16.f / 255.f);
    CHECK(linf_distance(b.adversarials, b.originals) <= 16.f / 255.f + 1.f / 510.f);
    CHECK(bitwise_equal(b.adversarials, quantize8(b.adversarials)));
}

TEST_CASE("eps_test clipping algebra: small-budget perturbation is the clip of the large one") {
    const GeneratorNet& gen = small_trained_generator();
    Tensor imgs({2, 3, 32, 32});
    imgs.set_slice_n(0, random_image(32, 72));
    imgs.set_slice_n(1, random_image(32, 73));
    std::vector<int> labels = {0, 1};
    AdversarialBatch big = generate(gen, imgs, labels, 16.f / 255.f);
    AdversarialBatch small = generate(gen, imgs, labels, 4.f / 255.f);
    Tensor clipped = big.adversarials;
    for (size_t i = 0; i < clipped.size(); ++i) {
        float d = clipped[i] - imgs[i];
        d = std::min(std::max(d, -4.f / 255.f), 4.f / 255.f);
        clipped[i] = imgs[i] + d;
    }
    clipped = quantize8(clipped);
    CHECK(bitwise_equal(small.adversarials, clipped));
}

TEST_CASE("smallest positive eps reduces to the originals after quantization") {
    const GeneratorNet& gen = small_trained_generator();
    Tensor imgs({2, 3, 32, 32});
    imgs.set_slice_n(0, random_image(32, 74));
    imgs.set_slice_n(1, random_image(32, 75));
    std::vector<int> labels = {0, 1};
    AdversarialBatch b = generate(gen, imgs, labels, 1e-4f);  // < half quantum
    CHECK(bitwise_equal(b.adversarials, imgs));
}

TEST_CASE("eps_test out of range is rejected") {
    const GeneratorNet& gen = small_trained_generator();
    Tensor imgs({1, 3, 32, 32});
    imgs.set_slice_n(0, random_image(32, 76));
    CHECK_THROWS_AS(generate(gen, imgs, {0}, 0.f), ConfigError);
    CHECK_THROWS_AS(generate(gen, imgs, {0}, 1.5f), ConfigError);
}

TEST_CASE("eps sweep grid shape and byte-identical generator caching") {
    Dataset train = make_synthetic_dataset(60, 10, 32, 504);
    Dataset eval = make_synthetic_dataset(10, 10, 32, 505);
    GenTrainConfig cfg;
    cfg.loss = GenLoss::GAP_CE;
    cfg.epochs = 1;
    cfg.seed = 9;
    std::string cache = "/tmp/tbench_gen_cache";
    std::filesystem::remove_all(cache);
    std::vector<float> etr = {4.f / 255.f, 8.f / 255.f};
    std::vector<float> ete = {4.f / 255.f, 8.f / 255.f, 16.f / 255.f};
    EpsSweepResult a = eps_sweep(cfg, train, eval, tiny_trained_model(), tiny_trained_model(),
                                 etr, ete, cache);
    REQUIRE(a.success.size() == 2);
    REQUIRE(a.success[0].size() == 3);
    // second run loads the cached generators and reproduces the grid exactly
    EpsSweepResult b = eps_sweep(cfg, train, eval, tiny_trained_model(), tiny_trained_model(),
                                 etr, ete, cache);
    for (size_t r = 0; r < a.success.size(); ++r)
        for (size_t c = 0; c < a.success[r].size(); ++c)
            CHECK(a.success[r][c] == b.success[r][c]);
    GeneratorNet g1 = load_generator(cache + "/gen_GAP_CE_4");
    GeneratorNet g2 = load_generator(cache + "/gen_GAP_CE_4");
    CHECK(g1.param_hash() == g2.param_hash());
}

TEST_CASE("generator checkpoint round-trip") {
    const GeneratorNet& gen = small_trained_generator();
    std::string dir = "/tmp/tbench_gen_ckpt";
    std::filesystem::remove_all(dir);
    save_generator(gen, dir);
    GeneratorNet back = load_generator(dir);
    CHECK(back.param_hash() == gen.param_hash());
    Tensor x({1, 3, 32, 32});
    x.set_slice_n(0, random_image(32, 80));
    CHECK(bitwise_equal(gen.raw_perturbation(x), back.raw_perturbation(x)));
}

TEST_CASE("perturbation cosine similarity diagnostic is within [-1, 1]") {
    const GeneratorNet& gen = small_trained_generator();
    Tensor imgs({4, 3, 32, 32});
    for (int i = 0; i < 4; ++i) imgs.set_slice_n(i, random_image(32, 82 + i));
    double cs = perturbation_cosine_similarity(gen, imgs, 10.f / 255.f);
    CHECK(cs >= -1.0);
    CHECK(cs <= 1.0);
}

TEST_SUITE_END();
