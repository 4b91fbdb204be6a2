#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tbench/errors.hpp"
#include "tbench/harness.hpp"
#include "tbench/plots.hpp"
#include "tbench/train.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace tbench;
using namespace tbench::test;

TEST_SUITE_BEGIN("harness");

namespace {

ExperimentConfig small_config(const std::string& root) {
    ExperimentConfig cfg;
    cfg.dataset_dir = root + "/dataset/eval";
    cfg.models_dir = root + "/models";
    cfg.eval_count = 6;
    cfg.targets = {"target_convnet"};
    cfg.defense_target = "target_convnet";
    AttackConfig pgd;
    pgd.variant = "PGD";
    pgd.step_size = 4.f / 255.f;
    pgd.iterations = 3;
    AttackConfig mi = pgd;
    mi.variant = "MI";
    cfg.attacks = {pgd, mi};
    DefenseConfig none;
    DefenseConfig b2;
    b2.kind = "BDR";
    b2.id = "BDR";
    DefenseConfig rp;
    rp.kind = "RP";
    rp.id = "RP";
    cfg.defenses = {none, b2, rp};
    cfg.output_dir = root + "/out";
    cfg.cache_dir = root + "/cache";
    cfg.workers = 2;
    cfg.interp_subset = 4;
    return cfg;
}

// minimal on-disk store: surrogate + one target + datasets
std::string build_small_store() {
    static std::string root = [] {
        std::string dir = "/tmp/tbench_harness_store";
        fs::remove_all(dir);
        fs::create_directories(dir + "/models");
        Dataset train = make_synthetic_dataset(240, 10, 32, 610);
        Dataset held = make_synthetic_dataset(60, 10, 32, 611);
        Dataset eval = make_synthetic_dataset(40, 10, 32, 612);
        save_dataset(dir + "/dataset/train", train);
        save_dataset(dir + "/dataset/heldout", held);
        save_dataset(dir + "/dataset/eval", eval);
        TrainRecipe r;
        r.architecture_id = "resnet_small";
        r.epochs = 4;
        r.seed = 21;
        save_model(train_reference_model(r, train, held), dir + "/models/surrogate");
        r.architecture_id = "convnet_small";
        r.seed = 22;
        save_model(train_reference_model(r, train, held), dir + "/models/target_convnet");
        return dir;
    }();
    return root;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("config round-trips losslessly") {
    ExperimentConfig cfg = small_config("/tmp/x");
    nlohmann::json j1 = config_to_json(cfg);
    ExperimentConfig back = config_from_json(j1);
    nlohmann::json j2 = config_to_json(back);
    CHECK(j1.dump() == j2.dump());
    CHECK(config_hash(cfg) == config_hash(back));
    back.eval_count = 7;
    CHECK(config_hash(cfg) != config_hash(back));
}

TEST_CASE("step size is mandatory in experiment configs") {
    nlohmann::json j = config_to_json(small_config("/tmp/x"));
    j["attacks"][0].erase("step_size");
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
}

TEST_CASE("fnv1a64 is stable") {
    const char* s = "transferbench";
    uint64_t h1 = fnv1a64(s, 13);
    uint64_t h2 = fnv1a64(s, 13);
    CHECK(h1 == h2);
    CHECK(h1 != fnv1a64("x", 1));
}

TEST_CASE("ingest: errors, filtering, and k-per-class selection") {
    SUBCASE("missing directory errors") {
        CHECK_THROWS_AS(ingest_dataset("/tmp/tbench_no_such_dir", {}, 0, 10, 1), IoError);
    }
    SUBCASE("perfect model keeps everything") {
        std::string dir = "/tmp/tbench_ingest_blobs";
        fs::remove_all(dir);
        Dataset blobs = make_two_blob_dataset(40, 613);
        save_dataset(dir, blobs);
        TrainRecipe r;
        r.architecture_id = "convnet_small";
        r.epochs = 2;
        r.seed = 614;
        ModelHandle perfect = train_reference_model(r, blobs, blobs);
        REQUIRE(accuracy(perfect, blobs) == 1.f);
        IngestReport rep;
        Dataset out = ingest_dataset(dir, {perfect}, 0, 0, 5, &rep);
        CHECK(rep.total == 40);
        CHECK(rep.correctly_classified == 40);
        CHECK(out.size() == 40);
    }
    SUBCASE("k-per-class selection is seeded and balanced") {
        std::string dir = "/tmp/tbench_ingest_kpc";
        fs::remove_all(dir);
        Dataset ds = make_synthetic_dataset(120, 10, 32, 615);
        save_dataset(dir, ds);
        Dataset a = ingest_dataset(dir, {}, 2, 0, 77);
        Dataset b = ingest_dataset(dir, {}, 2, 0, 77);
        CHECK(a.size() <= 20);
        CHECK(bitwise_equal(a.images, b.images));
        std::map<int, int> counts;
        for (int l : a.labels) counts[l]++;
        for (const auto& [cls, n] : counts) CHECK(n <= 2);
        Dataset c = ingest_dataset(dir, {}, 2, 0, 78);
        CHECK_FALSE(bitwise_equal(a.images, c.images));
    }
}

TEST_CASE("experiment grid shape, caching, and bitwise determinism") {
    std::string root = build_small_store();
    ExperimentConfig cfg = small_config(root);
    fs::remove_all(cfg.output_dir);
    fs::remove_all(cfg.cache_dir);

    ExperimentResult r1 = run_experiment(cfg);
    // 2 attacks x (1 undefended target + 2 defenses)
    CHECK(r1.attack_ids.size() == 2);
    CHECK(r1.column_ids.size() == 3);
    CHECK(r1.metrics.size() == 2);
    CHECK(r1.cache_misses == 2);
    std::string t1 = slurp(cfg.output_dir + "/transfer_table.csv");
    std::string m1 = slurp(cfg.output_dir + "/imperceptibility_table.csv");

    // warm cache: zero attack computations, identical bytes
    ExperimentResult r2 = run_experiment(cfg);
    CHECK(r2.cache_misses == 0);
    CHECK(r2.cache_hits >= 2);
    CHECK(slurp(cfg.output_dir + "/transfer_table.csv") == t1);
    CHECK(slurp(cfg.output_dir + "/imperceptibility_table.csv") == m1);

    // manifest exists and carries the config hash
    nlohmann::json manifest = nlohmann::json::parse(slurp(r2.manifest_path));
    CHECK(manifest["config_hash"].get<uint64_t>() == config_hash(cfg));
}

TEST_CASE("repeat seeds emit mean and std columns; deterministic attacks have zero std") {
    std::string root = build_small_store();
    ExperimentConfig cfg = small_config(root);
    cfg.output_dir = root + "/out_repeats";
    cfg.seeds = {1, 2, 3};
    fs::remove_all(cfg.output_dir);
    ExperimentResult res = run_experiment(cfg);
    REQUIRE(res.success.size() == 3);
    // PGD and MI are deterministic: all repeats identical
    for (const auto& col : res.column_ids) {
        if (col.find("RP") != std::string::npos) continue;  // stochastic defense draw is seeded per defense, not per repeat
        for (const auto& atk : res.attack_ids) {
            double v0 = res.success[0].at(atk).at(col);
            for (size_t rep = 1; rep < 3; ++rep)
                CHECK(res.success[rep].at(atk).at(col) == v0);
        }
    }
    std::string csv = slurp(cfg.output_dir + "/transfer_table.csv");
    CHECK(csv.find("_std") != std::string::npos);
}

TEST_CASE("plot registry writes each id once with matching csv data") {
    std::string dir = "/tmp/tbench_plots";
    fs::remove_all(dir);
    PlotRegistry reg(dir);
    std::vector<double> xs = {1, 2, 3};
    std::map<std::string, std::vector<double>> series{{"a", {0.1, 0.2, 0.3}}};
    reg.line_chart("curve", "t", "x", "y", xs, series);
    CHECK(fs::exists(dir + "/curve.svg"));
    std::string csv = slurp(dir + "/curve.csv");
    CHECK(csv == "x,a\n1.000000,0.100000\n2.000000,0.200000\n3.000000,0.300000\n");
    CHECK_THROWS_AS(reg.line_chart("curve", "t", "x", "y", xs, series), ConfigError);
    reg.bar_chart("bars", "b", {"p", "q"}, {0.5, 0.25});
    CHECK(slurp(dir + "/bars.csv") == "label,value\np,0.500000\nq,0.250000\n");
    reg.heatmap("heat", "h", {"r1"}, {"c1", "c2"}, {{0.1, 0.9}});
    CHECK(fs::exists(dir + "/heat.svg"));
}

TEST_SUITE_END();
