#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tbench/errors.hpp"
#include "tbench/model.hpp"
#include "tbench/train.hpp"
#include "test_support.hpp"

using namespace tbench;
using namespace tbench::test;

TEST_SUITE_BEGIN("model_core");

TEST_CASE("forward_with_taps shape contracts") {
    const ModelHandle& model = tiny_untrained_resnet();
    Tensor batch({4, 3, 32, 32});
    for (size_t i = 0; i < batch.size(); ++i) batch[i] = 0.3f + 0.0001f * (i % 97);

    auto none = forward_with_taps(model, batch, {});
    CHECK(none.logits.dim(0) == 4);
    CHECK(none.logits.dim(1) == 10);
    CHECK(none.taps.empty());

    auto mid = forward_with_taps(model, batch, {"conv3_x"});
    CHECK(mid.taps.at("conv3_x").dim(0) == 4);

    CHECK_THROWS_AS(forward_with_taps(model, batch, {"conv9_x"}), ConfigError);
    try {
        forward_with_taps(model, batch, {"conv9_x"});
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("conv9_x") != std::string::npos);
    }
}

TEST_CASE("forward is deterministic for fixed parameters") {
    const ModelHandle& model = tiny_untrained_resnet();
    Tensor x = random_image(32, 123);
    Tensor a = forward(model, x);
    Tensor b = forward(model, x);
    CHECK(bitwise_equal(a, b));
}

TEST_CASE("input_gradient matches finite differences for CE") {
    const ModelHandle& model = tiny_trained_model();
    Tensor x = random_image(32, 5);
    LossSpec loss{LossSpec::Kind::CrossEntropy, {3}};
    Tensor g = input_gradient(model, x, loss);
    auto fd = finite_diff_check([&](const Tensor& p) {
        return cross_entropy_sum(forward(model, p), {3});
    }, x, g, 20, 7);
    CHECK(fd.checked == 20);
    CHECK(fd.max_rel_err < 1e-3);
}

TEST_CASE("constant loss yields an exactly zero gradient") {
    const ModelHandle& model = tiny_untrained_resnet();
    Tensor x = random_image(32, 6);
    Tensor g = input_gradient(model, x, LossSpec{LossSpec::Kind::Constant, {}});
    CHECK(g.max_abs() == 0.f);
}

TEST_CASE("CE gradient at a saturated prediction has near-zero norm") {
    auto def = build_architecture("resnet_small", 10, 32, 555);
    {
        auto params = def->params();
        Tensor& bias = *params.back();  // head linear bias
        for (size_t i = 0; i < bias.size(); ++i) bias[i] = i == 0 ? 40.f : -40.f;
    }
    ModelHandle model{std::shared_ptr<const ModelDef>(std::move(def))};
    Tensor x = random_image(32, 8);
    Tensor g_sat = input_gradient(model, x, LossSpec{LossSpec::Kind::CrossEntropy, {0}});
    Tensor g_other = input_gradient(model, x, LossSpec{LossSpec::Kind::CrossEntropy, {1}});
    CHECK(g_sat.l2_norm() < 1e-6f);
    CHECK(g_other.l2_norm() > 1e-3f);
}

TEST_CASE("non-differentiable loss spec is rejected") {
    const ModelHandle& model = tiny_untrained_resnet();
    Tensor x = random_image(32, 9);
    CHECK_THROWS_AS(input_gradient(model, x, LossSpec{LossSpec::Kind::PredictionMismatch, {}}),
                    UnsupportedLossError);
}

TEST_CASE("SGM gamma=1 equals the base model; gamma=0.5 differs") {
    const ModelHandle& base = tiny_trained_model();
    Tensor x = random_image(32, 10);
    LossSpec loss{LossSpec::Kind::CrossEntropy, {2}};
    Tensor g_base = input_gradient(base, x, loss);

    RefineSpec one;
    one.kind = RefineSpec::Kind::SGM;
    one.gamma = 1.f;
    Tensor g_one = input_gradient(apply_refinement(base, one), x, loss);
    CHECK(bitwise_equal(g_base, g_one));

    RefineSpec half = one;
    half.gamma = 0.5f;
    Tensor g_half = input_gradient(apply_refinement(base, half), x, loss);
    CHECK_FALSE(bitwise_equal(g_base, g_half));

    // forward is untouched either way
    CHECK(bitwise_equal(forward(base, x), forward(apply_refinement(base, half), x)));
}

TEST_CASE("SGM requires skip connections") {
    const ModelHandle& convnet = tiny_untrained_convnet();
    RefineSpec r;
    r.kind = RefineSpec::Kind::SGM;
    CHECK_THROWS_AS(apply_refinement(convnet, r), UnsupportedArchitectureError);
}

TEST_CASE("LinBP keeps forward bitwise and changes gradients, matching hand backprop") {
    // two 1x1-conv layers; the algebra per pixel is explicit
    auto def = std::make_shared<ModelDef>();
    def->architecture_id = "hand2";
    def->num_classes = 1;
    def->input_size = 4;
    def->stages.resize(2);
    def->stages[0].name = "s1";
    auto c1 = std::make_unique<Conv2d>(1, 2, 1, 1, 0);
    c1->weight.at(0, 0, 0, 0) = 0.8f;
    c1->weight.at(1, 0, 0, 0) = -1.2f;
    c1->bias[0] = 0.1f;
    c1->bias[1] = -0.05f;
    const float w1[2] = {0.8f, -1.2f};
    const float b1[2] = {0.1f, -0.05f};
    def->stages[0].layers.push_back(std::move(c1));
    def->stages[0].layers.push_back(std::make_unique<ReLU>(true, 0));
    def->stages[1].name = "s2";
    auto c2 = std::make_unique<Conv2d>(2, 1, 1, 1, 0);
    c2->weight.at(0, 0, 0, 0) = 0.7f;
    c2->weight.at(0, 1, 0, 0) = 0.4f;
    const float w2[2] = {0.7f, 0.4f};
    def->stages[1].layers.push_back(std::move(c2));
    def->head.push_back(std::make_unique<GlobalAvgPool>());
    auto lin = std::make_unique<Linear>(1, 1);
    lin->weight[0] = 1.f;
    def->head.push_back(std::move(lin));

    ModelHandle base{std::shared_ptr<const ModelDef>(def)};
    RefineSpec r;
    r.kind = RefineSpec::Kind::LinBP;
    r.linbp_start = "s1";
    ModelHandle refined = apply_refinement(base, r);

    Tensor x({1, 1, 4, 4});
    Rng rng(17);
    for (size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.f, 1.f);

    CHECK(bitwise_equal(forward(base, x), forward(refined, x)));

    // logit = mean_p sum_c w2_c * relu(w1_c x_p + b1_c); d logit / dx_p by hand
    const int npix = 16;
    Tensor g_base_hand({1, 1, 4, 4}), g_lin_hand({1, 1, 4, 4});
    for (int p = 0; p < npix; ++p) {
        float gb = 0.f, gl = 0.f;
        for (int c = 0; c < 2; ++c) {
            float pre = w1[c] * x[p] + b1[c];
            gl += w2[c] * w1[c];
            if (pre > 0.f) gb += w2[c] * w1[c];
        }
        g_base_hand[p] = gb / npix;
        g_lin_hand[p] = gl / npix;
    }

    auto logit_grad = [](const ModelHandle& m, const Tensor& img) {
        ForwardTrace trace;
        Tensor logits = forward(m, img, &trace);
        Tensor gl(logits.shape());
        gl[0] = 1.f;
        return backward_to_input(m, trace, gl);
    };
    Tensor g_base = logit_grad(base, x);
    Tensor g_lin = logit_grad(refined, x);
    for (int p = 0; p < npix; ++p) {
        CHECK(g_base[p] == doctest::Approx(g_base_hand[p]).epsilon(1e-5));
        CHECK(g_lin[p] == doctest::Approx(g_lin_hand[p]).epsilon(1e-5));
    }
    CHECK_FALSE(bitwise_equal(g_base, g_lin));  // x has negative pre-activations
}

TEST_CASE("IAA softplus approaches relu as beta grows") {
    const ModelHandle& base = tiny_trained_model();
    Tensor x = random_image(32, 11);
    RefineSpec r;
    r.kind = RefineSpec::Kind::IAA;
    r.beta = 1000.f;
    Tensor y_base = forward(base, x);
    Tensor y_iaa = forward(apply_refinement(base, r), x);
    float max_dev = 0.f;
    for (size_t i = 0; i < y_base.size(); ++i)
        max_dev = std::max(max_dev, std::fabs(y_base[i] - y_iaa[i]));
    CHECK(max_dev < 1e-3f);

    r.beta = 15.f;
    Tensor y15 = forward(apply_refinement(base, r), x);
    CHECK_FALSE(bitwise_equal(y_base, y15));  // beta=15 changes the forward pass
}

TEST_CASE("standard recipe separates the toy two-class set") {
    Dataset train = make_two_blob_dataset(120, 3);
    Dataset held = make_two_blob_dataset(40, 4);
    TrainRecipe r;
    r.architecture_id = "convnet_small";
    r.epochs = 3;
    r.seed = 2;
    r.accuracy_floor = 0.99f;
    ModelHandle model = train_reference_model(r, train, held);
    CHECK(accuracy(model, held) >= 0.99f);
}

TEST_CASE("training is bitwise reproducible from (recipe, seed, dataset)") {
    Dataset train = make_two_blob_dataset(60, 5);
    Dataset held = make_two_blob_dataset(20, 6);
    TrainRecipe r;
    r.architecture_id = "convnet_small";
    r.epochs = 2;
    r.seed = 9;
    ModelHandle a = train_reference_model(r, train, held);
    ModelHandle b = train_reference_model(r, train, held);
    CHECK(a.param_hash() == b.param_hash());
}

TEST_CASE("adversarially trained model is more robust than the standard one") {
    Dataset train = make_synthetic_dataset(260, 10, 32, 700);
    Dataset held = make_synthetic_dataset(60, 10, 32, 701);
    TrainRecipe std_r;
    std_r.architecture_id = "convnet_small";
    std_r.epochs = 4;
    std_r.seed = 3;
    ModelHandle plain = train_reference_model(std_r, train, held);

    TrainRecipe at = std_r;
    at.kind = TrainRecipe::Kind::PgdAdversarial;
    at.at_eps = 8.f / 255.f;
    at.at_steps = 4;
    at.at_step_size = 2.f / 255.f;
    ModelHandle robust = train_reference_model(at, train, held);

    float r_plain = robust_accuracy_pgd(plain, held, TrainRecipe::Norm::Linf, 8.f / 255.f, 6,
                                        2.f / 255.f);
    float r_robust = robust_accuracy_pgd(robust, held, TrainRecipe::Norm::Linf, 8.f / 255.f, 6,
                                         2.f / 255.f);
    CHECK(r_robust > r_plain);
}

TEST_CASE("self-distillation lands within two points of the teacher") {
    Dataset train = make_synthetic_dataset(300, 10, 32, 702);
    Dataset held = make_synthetic_dataset(80, 10, 32, 703);
    TrainRecipe tr;
    tr.architecture_id = "convnet_small";
    tr.epochs = 6;
    tr.seed = 4;
    ModelHandle teacher = train_reference_model(tr, train, held);

    TrainRecipe ds = tr;
    ds.kind = TrainRecipe::Kind::Distilled;
    ds.teacher = teacher;
    ds.cutmix = false;
    ds.seed = 40;
    ModelHandle student = train_reference_model(ds, train, held);
    CHECK(accuracy(student, held) >= accuracy(teacher, held) - 0.02f);
}

TEST_CASE("training fails loudly when the accuracy floor is unmet") {
    Dataset train = make_synthetic_dataset(60, 10, 32, 704);
    Dataset held = make_synthetic_dataset(30, 10, 32, 705);
    TrainRecipe r;
    r.architecture_id = "convnet_small";
    r.epochs = 1;
    r.seed = 1;
    r.accuracy_floor = 0.999f;
    try {
        train_reference_model(r, train, held);
        CHECK(false);
    } catch (const TrainingError& e) {
        CHECK_FALSE(e.accuracy_curve.empty());
    }
}

TEST_CASE("checkpoint round-trip is bitwise and validates shapes") {
    const ModelHandle& model = tiny_trained_model();
    std::string dir = "/tmp/tbench_ckpt_test";
    std::filesystem::remove_all(dir);
    save_model(model, dir);
    ModelHandle back = load_model(dir);
    CHECK(back.param_hash() == model.param_hash());
    CHECK(back.architecture_id() == model.architecture_id());
    Tensor x = random_image(32, 77);
    CHECK(bitwise_equal(forward(model, x), forward(back, x)));
}

TEST_SUITE_END();
