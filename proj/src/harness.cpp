#include "tbench/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "tbench/errors.hpp"
#include "tbench/image.hpp"
#include "tbench/metrics.hpp"
#include "tbench/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace tbench {

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
    const unsigned char* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
    return h;
}

static std::string fmt6(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

// ------------------------------------------------------------------ config

json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["schema_version"] = cfg.schema_version;
    j["dataset_dir"] = cfg.dataset_dir;
    j["models_dir"] = cfg.models_dir;
    j["eval_count"] = cfg.eval_count;
    j["per_class"] = cfg.per_class;
    j["dataset_seed"] = cfg.dataset_seed;
    j["targets"] = cfg.targets;
    j["defense_target"] = cfg.defense_target;
    json attacks = json::array();
    for (const auto& a : cfg.attacks) {
        json ja;
        ja["variant"] = a.variant;
        ja["epsilon"] = a.epsilon;
        ja["step_size"] = a.step_size;
        ja["iterations"] = a.iterations;
        ja["seed"] = a.seed;
        attacks.push_back(ja);
    }
    j["attacks"] = attacks;
    json defenses = json::array();
    for (const auto& d : cfg.defenses) {
        json jd;
        jd["kind"] = d.kind;
        jd["id"] = d.id;
        jd["bdr_depth"] = d.bdr_depth;
        jd["pd_count"] = d.pd_count;
        jd["pd_window"] = d.pd_window;
        jd["pd_sigma"] = d.pd_sigma;
        jd["rp_lo"] = d.rp_lo;
        jd["rp_hi"] = d.rp_hi;
        jd["seed"] = d.seed;
        defenses.push_back(jd);
    }
    j["defenses"] = defenses;
    j["metrics"] = cfg.metrics;
    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir;
    j["cache_dir"] = cfg.cache_dir;
    j["use_cache"] = cfg.use_cache;
    j["workers"] = cfg.workers;
    j["interp_subset"] = cfg.interp_subset;
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    cfg.schema_version = j.at("schema_version").get<int>();
    if (cfg.schema_version != 1)
        throw ConfigError("unsupported config schema version " +
                          std::to_string(cfg.schema_version));
    cfg.dataset_dir = j.at("dataset_dir").get<std::string>();
    cfg.models_dir = j.at("models_dir").get<std::string>();
    cfg.eval_count = j.value("eval_count", 50);
    cfg.per_class = j.value("per_class", 0);
    cfg.dataset_seed = j.value("dataset_seed", 1ULL);
    cfg.targets = j.at("targets").get<std::vector<std::string>>();
    cfg.defense_target = j.value("defense_target", cfg.targets.empty() ? "" : cfg.targets[0]);
    for (const auto& ja : j.at("attacks")) {
        AttackConfig a;
        a.variant = ja.at("variant").get<std::string>();
        a.epsilon = ja.value("epsilon", 16.f / 255.f);
        if (!ja.contains("step_size"))
            throw ConfigError("attack config for " + a.variant +
                              " must set step_size explicitly");
        a.step_size = ja.at("step_size").get<float>();
        a.iterations = ja.value("iterations", 0);
        a.seed = ja.value("seed", 0ULL);
        cfg.attacks.push_back(a);
    }
    if (j.contains("defenses"))
        for (const auto& jd : j.at("defenses")) {
            DefenseConfig d;
            d.kind = jd.at("kind").get<std::string>();
            d.id = jd.value("id", d.kind);
            d.bdr_depth = jd.value("bdr_depth", 2);
            d.pd_count = jd.value("pd_count", 100);
            d.pd_window = jd.value("pd_window", 5);
            d.pd_sigma = jd.value("pd_sigma", 0.04f);
            d.rp_lo = jd.value("rp_lo", 1.f);
            d.rp_hi = jd.value("rp_hi", 1.1f);
            d.seed = jd.value("seed", 0ULL);
            cfg.defenses.push_back(d);
        }
    if (j.contains("metrics")) cfg.metrics = j.at("metrics").get<std::vector<std::string>>();
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    cfg.output_dir = j.value("output_dir", std::string("out"));
    cfg.cache_dir = j.value("cache_dir", std::string("cache"));
    cfg.use_cache = j.value("use_cache", true);
    cfg.workers = j.value("workers", 1);
    cfg.interp_subset = j.value("interp_subset", 30);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    return config_from_json(json::parse(f));
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream f(path);
    f << config_to_json(cfg).dump(2) << "\n";
}

uint64_t config_hash(const ExperimentConfig& cfg) {
    std::string s = config_to_json(cfg).dump();
    return fnv1a64(s.data(), s.size());
}

// ------------------------------------------------------------------ store

const ModelHandle& ModelStore::model(const std::string& id) const {
    auto it = models.find(id);
    if (it == models.end()) throw ConfigError("model id not in store: " + id);
    return it->second;
}

void train_all_models(const TrainAllConfig& cfg, const std::string& dataset_dir,
                      const std::string& store_dir, bool verbose) {
    fs::create_directories(store_dir);
    auto log = [verbose](const std::string& msg) {
        if (verbose) std::printf("[train-models] %s\n", msg.c_str());
    };

    Dataset train, heldout;
    if (fs::exists(dataset_dir + "/train/labels.csv")) {
        train = load_dataset_dir(dataset_dir + "/train");
        heldout = load_dataset_dir(dataset_dir + "/heldout");
    } else {
        log("generating synthetic dataset");
        Dataset all = make_synthetic_dataset(cfg.train_count + cfg.heldout_count, cfg.num_classes,
                                             cfg.image_size, cfg.seed);
        train = all.take(cfg.train_count);
        std::vector<int> rest(cfg.heldout_count);
        std::iota(rest.begin(), rest.end(), cfg.train_count);
        heldout = all.subset(rest);
        save_dataset(dataset_dir + "/train", train);
        save_dataset(dataset_dir + "/heldout", heldout);
    }

    Dataset at_train = train.take(cfg.at_subset);
    Dataset gen_train = train.take(cfg.gen_subset);

    auto std_recipe = [&](const std::string& arch, uint64_t seed) {
        TrainRecipe r;
        r.architecture_id = arch;
        r.epochs = cfg.epochs_standard;
        r.seed = seed;
        r.lr_drop_epochs = {cfg.epochs_standard * 3 / 4};
        return r;
    };

    log("surrogate (resnet_small)");
    ModelHandle surrogate = train_reference_model(std_recipe("resnet_small", cfg.seed + 1), train, heldout);
    save_model(surrogate, store_dir + "/surrogate");
    log("target_convnet (convnet_small)");
    ModelHandle target_conv = train_reference_model(std_recipe("convnet_small", cfg.seed + 2), train, heldout);
    save_model(target_conv, store_dir + "/target_convnet");
    log("target_resnet (resnet_small, independent seed)");
    ModelHandle target_res = train_reference_model(std_recipe("resnet_small", cfg.seed + 3), train, heldout);
    save_model(target_res, store_dir + "/target_resnet");

    log("rfa_surrogate (Linf adversarial training)");
    TrainRecipe at = std_recipe("resnet_small", cfg.seed + 4);
    at.kind = TrainRecipe::Kind::PgdAdversarial;
    at.epochs = cfg.epochs_at;
    at.at_eps = cfg.at_eps;
    at.at_steps = cfg.at_steps;
    at.at_step_size = cfg.at_eps / 4.f;
    at.lr_drop_epochs = {};
    ModelHandle rfa = train_reference_model(at, at_train, heldout);
    save_model(rfa, store_dir + "/rfa_surrogate");

    log("at_inf defense model (convnet_small)");
    at.architecture_id = "convnet_small";
    at.seed = cfg.seed + 5;
    ModelHandle at_inf = train_reference_model(at, at_train, heldout);
    save_model(at_inf, store_dir + "/at_inf");

    log("fd_inf defense model (resnet_small_fd)");
    at.architecture_id = "resnet_small_fd";
    at.seed = cfg.seed + 6;
    ModelHandle fd_inf = train_reference_model(at, at_train, heldout);
    save_model(fd_inf, store_dir + "/fd_inf");

    log("at_l2 defense model (convnet_small)");
    at.architecture_id = "convnet_small";
    at.seed = cfg.seed + 7;
    at.at_norm = TrainRecipe::Norm::L2;
    at.at_eps = cfg.at_l2_eps;
    at.at_step_size = cfg.at_l2_eps / 3.f;
    ModelHandle at_l2 = train_reference_model(at, at_train, heldout);
    save_model(at_l2, store_dir + "/at_l2");

    log("dsm_surrogate (distilled with CutMix)");
    TrainRecipe dsm = std_recipe("resnet_small", cfg.seed + 8);
    dsm.kind = TrainRecipe::Kind::Distilled;
    dsm.teacher = surrogate;
    dsm.cutmix = true;
    ModelHandle dsm_model = train_reference_model(dsm, train, heldout);
    save_model(dsm_model, store_dir + "/dsm_surrogate");

    // generators (frozen discriminator = surrogate)
    for (const char* loss : {"GAP_CE", "CDA_relativistic_CE", "GAPF_feature", "BIA_feature_RN"}) {
        log(std::string("generator ") + loss);
        GenTrainConfig gc;
        gc.loss = gen_loss_from_string(loss);
        gc.eps_train = cfg.eps_train;
        gc.epochs = cfg.gen_epochs;
        gc.seed = cfg.seed + 21;
        GeneratorNet gen = train_generator(gc, gen_train, surrogate);
        std::string id = std::string("GAP_CE") == loss        ? "GAP"
                         : std::string("CDA_relativistic_CE") == loss ? "CDA"
                         : std::string("GAPF_feature") == loss        ? "GAPF"
                                                                      : "BIA";
        save_generator(gen, store_dir + "/gen_" + id);
    }
    for (int t : cfg.ttp_targets) {
        log("generator TTP class " + std::to_string(t));
        GenTrainConfig gc;
        gc.loss = GenLoss::TTP_Distribution;
        gc.eps_train = cfg.eps_train;
        gc.epochs = cfg.gen_epochs;
        gc.seed = cfg.seed + 22;
        gc.ttp_target_class = t;
        GeneratorNet gen = train_generator(gc, gen_train, surrogate);
        save_generator(gen, store_dir + "/gen_TTP_" + std::to_string(t));
    }
    {
        json meta;
        meta["ttp_targets"] = cfg.ttp_targets;
        std::ofstream mf(store_dir + "/store.json");
        mf << meta.dump(2) << "\n";
    }

    // purifier training pool: feature-attack adversarials on the surrogate
    log("purifier attack pool (FIA adversarials)");
    Dataset pool_src = heldout.take(std::min<size_t>(heldout.size(), 200));
    AttackResources res;
    res.surrogate = surrogate;
    res.aux_pool = &train;
    res.workers = 2;
    AttackSpec fia;
    fia.variant = "FIA";
    fia.epsilon = 16.f / 255.f;
    fia.step_size = default_step_size(fia.epsilon, 20);
    fia.iterations = 20;
    fia.seed = cfg.seed + 31;
    AdversarialBatch pool = run_attack_variant(fia, res, pool_src.images, pool_src.labels);

    for (const char* recipe : {"HGD", "NRP", "DiffPure"}) {
        log(std::string("purifier ") + recipe);
        PurifierTrainConfig pc;
        pc.recipe = std::string("HGD") == recipe   ? Purifier::Recipe::HGD
                    : std::string("NRP") == recipe ? Purifier::Recipe::NRP
                                                   : Purifier::Recipe::DiffPure;
        pc.epochs = cfg.purifier_epochs;
        pc.seed = cfg.seed + 41;
        Purifier p = train_purifier(pc, train.take(cfg.gen_subset), &pool, surrogate);
        save_purifier(p, store_dir + std::string("/purifier_") + recipe);
    }
    log("done");
}

ModelStore load_model_store(const std::string& dir) {
    ModelStore store;
    store.dir = dir;
    for (const char* id : {"surrogate", "target_convnet", "target_resnet", "rfa_surrogate",
                           "at_inf", "fd_inf", "at_l2", "dsm_surrogate"}) {
        std::string path = dir + "/" + id;
        if (fs::exists(path + "/manifest.json")) store.models[id] = load_model(path);
    }
    for (const char* id : {"GAP", "CDA", "GAPF", "BIA"}) {
        std::string path = dir + "/gen_" + std::string(id);
        if (fs::exists(path + "/manifest.json")) store.generators[id] = load_generator(path);
    }
    if (fs::exists(dir + "/store.json")) {
        std::ifstream mf(dir + "/store.json");
        json meta = json::parse(mf);
        for (int t : meta.value("ttp_targets", std::vector<int>{})) {
            std::string path = dir + "/gen_TTP_" + std::to_string(t);
            if (fs::exists(path + "/manifest.json"))
                store.generators["TTP:" + std::to_string(t)] = load_generator(path);
        }
    }
    for (const char* id : {"HGD", "NRP", "DiffPure"}) {
        std::string path = dir + "/purifier_" + std::string(id);
        if (fs::exists(path + "/manifest.json")) store.purifiers[id] = load_purifier(path);
    }
    if (fs::exists(dir + "/../dataset/train/labels.csv"))
        store.aux_pool = load_dataset_dir(dir + "/../dataset/train");
    return store;
}

// ------------------------------------------------------------------ ingest

Dataset ingest_dataset(const std::string& dir, const std::vector<ModelHandle>& filter_models,
                       int k_per_class, int max_count, uint64_t seed, IngestReport* report) {
    Dataset ds = load_dataset_dir(dir);
    if (!filter_models.empty()) {
        int want = filter_models[0].input_size();
        if (ds.images.dim(2) != want || ds.images.dim(3) != want) {
            Tensor resized({ds.images.dim(0), 3, want, want});
            for (int i = 0; i < ds.images.dim(0); ++i)
                resized.set_slice_n(i, quantize8(resize_center_crop(ds.images.slice_n(i), want)));
            ds.images = resized;
        }
    }
    IngestReport local;
    local.total = ds.size();

    std::vector<int> keep;
    for (size_t i = 0; i < ds.size(); ++i) {
        Tensor img = ds.images.slice_n(static_cast<int>(i));
        bool ok = true;
        for (const auto& m : filter_models)
            if (predict(m, img)[0] != ds.labels[i]) {
                ok = false;
                break;
            }
        if (ok) keep.push_back(static_cast<int>(i));
    }
    local.correctly_classified = keep.size();

    // seeded selection, optionally k per class
    Rng rng = Rng::substream(seed, 0x1235);
    for (size_t i = keep.size(); i > 1; --i)
        std::swap(keep[i - 1], keep[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    std::vector<int> selected;
    if (k_per_class > 0) {
        std::map<int, int> per_class;
        for (int idx : keep) {
            if (per_class[ds.labels[idx]] < k_per_class) {
                selected.push_back(idx);
                ++per_class[ds.labels[idx]];
            }
        }
    } else {
        selected = keep;
    }
    if (max_count > 0 && static_cast<int>(selected.size()) > max_count)
        selected.resize(max_count);
    std::sort(selected.begin(), selected.end());
    local.selected = selected.size();
    if (report) *report = local;
    if (selected.empty()) throw ConfigError("ingest: no eligible images after filtering");
    return ds.subset(selected);
}

// ------------------------------------------------------------------ attacks

AttackResources make_resources(const ModelStore& store, int workers) {
    AttackResources res;
    res.surrogate = store.model("surrogate");
    if (store.has_model("rfa_surrogate")) res.rfa_surrogate = store.model("rfa_surrogate");
    if (store.has_model("dsm_surrogate")) res.dsm_surrogate = store.model("dsm_surrogate");
    res.aux_pool = store.aux_pool.size() ? &store.aux_pool : nullptr;
    res.generators = &store.generators;
    for (const auto& [id, _] : store.generators)
        if (id.rfind("TTP:", 0) == 0) res.ttp_targets.push_back(std::stoi(id.substr(4)));
    std::sort(res.ttp_targets.begin(), res.ttp_targets.end());
    res.workers = workers;
    return res;
}

AdversarialBatch craft_attack(const ExperimentConfig& cfg, const ModelStore& store,
                              const AttackConfig& atk, const Dataset& eval_set,
                              uint64_t repeat_seed, bool* cache_hit,
                              const ModelHandle* curve_probe) {
    AttackSpec spec;
    spec.variant = atk.variant;
    spec.epsilon = atk.epsilon;
    spec.step_size = atk.step_size;
    spec.iterations = atk.iterations > 0 ? atk.iterations : default_iterations(atk.variant);
    spec.seed = atk.seed ^ repeat_seed;
    spec.record_curve = curve_probe != nullptr;

    AttackResources res = make_resources(store, cfg.workers);

    // cache key: spec + surrogate params + dataset content
    json key;
    key["variant"] = spec.variant;
    key["epsilon"] = spec.epsilon;
    key["step_size"] = spec.step_size;
    key["iterations"] = spec.iterations;
    key["seed"] = spec.seed;
    key["curve"] = spec.record_curve;
    key["model_hash"] = res.surrogate.param_hash();
    key["dataset_hash"] = dataset_hash(eval_set);
    std::string key_str = key.dump();
    uint64_t h = fnv1a64(key_str.data(), key_str.size());
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    std::string cache_path = cfg.cache_dir + "/attacks/" + spec.variant + "_" + hex;

    if (cfg.use_cache && fs::exists(cache_path + "/manifest.json")) {
        if (cache_hit) *cache_hit = true;
        return load_adversarial_batch(cache_path);
    }
    if (cache_hit) *cache_hit = false;
    AdversarialBatch batch =
        run_attack_variant(spec, res, eval_set.images, eval_set.labels, curve_probe);
    if (cfg.use_cache) save_adversarial_batch(cache_path, batch);
    return batch;
}

DefenseSpec resolve_defense(const DefenseConfig& dc, const ModelStore& store) {
    DefenseSpec d;
    d.id = dc.id;
    d.seed = dc.seed;
    if (dc.kind == "none") {
        d.kind = DefenseSpec::Kind::None;
    } else if (dc.kind == "BDR") {
        d.kind = DefenseSpec::Kind::BDR;
        d.bdr_depth = dc.bdr_depth;
    } else if (dc.kind == "PD") {
        d.kind = DefenseSpec::Kind::PD;
        d.pd_count = dc.pd_count;
        d.pd_window = dc.pd_window;
        d.pd_sigma = dc.pd_sigma;
    } else if (dc.kind == "RP") {
        d.kind = DefenseSpec::Kind::RP;
        d.rp_lo = dc.rp_lo;
        d.rp_hi = dc.rp_hi;
    } else if (dc.kind == "HGD" || dc.kind == "NRP" || dc.kind == "DiffPure") {
        d.kind = DefenseSpec::Kind::Purifier;
        auto it = store.purifiers.find(dc.kind);
        if (it == store.purifiers.end()) throw ConfigError("purifier not in store: " + dc.kind);
        d.purifier = &it->second;
    } else if (dc.kind == "AT_inf") {
        d.kind = DefenseSpec::Kind::RobustModel;
        d.robust_model = store.model("at_inf");
    } else if (dc.kind == "FD_inf") {
        d.kind = DefenseSpec::Kind::RobustModel;
        d.robust_model = store.model("fd_inf");
    } else if (dc.kind == "AT_l2") {
        d.kind = DefenseSpec::Kind::RobustModel;
        d.robust_model = store.model("at_l2");
    } else {
        throw ConfigError("unknown defense kind: " + dc.kind);
    }
    return d;
}

// ------------------------------------------------------------------ run

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    auto t_start = std::chrono::steady_clock::now();
    fs::create_directories(cfg.output_dir);
    ModelStore store = load_model_store(cfg.models_dir);

    std::vector<ModelHandle> filter_models{store.model("surrogate")};
    for (const auto& t : cfg.targets) filter_models.push_back(store.model(t));
    IngestReport ingest;
    Dataset eval_set = ingest_dataset(cfg.dataset_dir, filter_models, cfg.per_class,
                                      cfg.eval_count, cfg.dataset_seed, &ingest);

    ExperimentResult result;
    for (const auto& a : cfg.attacks) result.attack_ids.push_back(a.variant);
    for (const auto& t : cfg.targets) result.column_ids.push_back(t);
    for (const auto& d : cfg.defenses)
        if (d.kind != "none") result.column_ids.push_back(cfg.defense_target + ":" + d.id);

    json stage_timings;
    json seed_ledger;
    seed_ledger["dataset_seed"] = cfg.dataset_seed;
    seed_ledger["repeat_seeds"] = cfg.seeds;

    for (uint64_t repeat_seed : cfg.seeds) {
        std::map<std::string, std::map<std::string, double>> table;
        for (const auto& atk : cfg.attacks) {
            bool hit = false;
            AdversarialBatch batch = craft_attack(cfg, store, atk, eval_set, repeat_seed, &hit);
            (hit ? result.cache_hits : result.cache_misses) += 1;
            for (const auto& t : cfg.targets) {
                DefenseSpec none;
                auto preds = defend_then_classify(none, batch, store.model(t), cfg.workers);
                table[atk.variant][t] = success_rate(preds, batch.labels);
            }
            for (const auto& dc : cfg.defenses) {
                if (dc.kind == "none") continue;
                DefenseSpec d = resolve_defense(dc, store);
                auto preds =
                    defend_then_classify(d, batch, store.model(cfg.defense_target), cfg.workers);
                table[atk.variant][cfg.defense_target + ":" + dc.id] =
                    success_rate(preds, batch.labels);
            }
        }
        result.success.push_back(std::move(table));
    }

    // metric suite on the first repeat
    bool want = !cfg.metrics.empty();
    if (want) {
        AttackResources res = make_resources(store, cfg.workers);
        const ModelHandle& kl_target = store.model(cfg.defense_target);
        int interp_n = std::min<int>(cfg.interp_subset, static_cast<int>(eval_set.size()));
        std::vector<int> interp_idx(interp_n);
        std::iota(interp_idx.begin(), interp_idx.end(), 0);
        Dataset interp_set = eval_set.subset(interp_idx);

        for (const auto& atk : cfg.attacks) {
            AdversarialBatch batch = craft_attack(cfg, store, atk, eval_set, cfg.seeds[0]);
            MetricRow row;
            double psnr_acc = 0.0, ssim_acc = 0.0, de_acc = 0.0, lp_acc = 0.0;
            size_t n = batch.labels.size(), finite_psnr = 0;
            for (size_t i = 0; i < n; ++i) {
                Tensor a = batch.originals.slice_n(static_cast<int>(i));
                Tensor b = batch.adversarials.slice_n(static_cast<int>(i));
                double p = psnr(a, b);
                if (std::isinf(p)) {
                    row.psnr_infinite = true;
                } else {
                    psnr_acc += p;
                    ++finite_psnr;
                }
                ssim_acc += ssim(a, b);
                de_acc += delta_e2000(a, b);
                lp_acc += lpips(a, b, store.model("surrogate"), {"conv2_x", "conv3_x", "conv4_x"});
            }
            row.psnr = finite_psnr ? psnr_acc / finite_psnr : 0.0;
            row.ssim = ssim_acc / n;
            row.delta_e = de_acc / n;
            row.lpips = lp_acc / n;
            row.fid = fid(batch.adversarials, batch.originals, store.model("surrogate"));

            // surrogate-property metrics for this attack's surrogate
            ModelHandle prop_model = res.surrogate;
            if (atk.variant == "RFA" && res.rfa_surrogate.valid()) prop_model = res.rfa_surrogate;
            if (atk.variant == "DSM" && res.dsm_surrogate.valid()) prop_model = res.dsm_surrogate;
            if (atk.variant == "IAA") {
                RefineSpec r;
                r.kind = RefineSpec::Kind::IAA;
                prop_model = apply_refinement(res.surrogate, r);
            }
            Tensor masked = gradcam_masked_images(prop_model, interp_set.images, interp_set.labels);
            auto scores =
                average_increase_drop(prop_model, interp_set.images, masked, interp_set.labels);
            row.ai = scores.average_increase;
            row.ad = scores.average_drop;
            row.kl = model_kl(prop_model, kl_target, interp_set.images);
            result.metrics[atk.variant] = row;
        }

        // success-vs-imperceptibility correlation diagnostic
        std::vector<double> suc;
        std::map<std::string, std::vector<double>> per_metric;
        const std::string& first_col = cfg.targets.empty() ? "" : cfg.targets[0];
        for (const auto& atk : cfg.attacks) {
            suc.push_back(result.success[0][atk.variant][first_col]);
            const MetricRow& r = result.metrics[atk.variant];
            per_metric["psnr"].push_back(r.psnr);
            per_metric["ssim"].push_back(r.ssim);
            per_metric["delta_e"].push_back(r.delta_e);
            per_metric["lpips"].push_back(r.lpips);
            per_metric["fid"].push_back(r.fid);
        }
        if (suc.size() >= 2)
            for (const auto& [name, vals] : per_metric)
                result.spearman[name] = spearman_rho(suc, vals);
    }

    // ---------------- output files
    auto mean_std = [&](const std::string& attack, const std::string& col) {
        std::vector<double> vals;
        for (const auto& rep : result.success) vals.push_back(rep.at(attack).at(col));
        double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        double sd = vals.size() > 1 ? std::sqrt(var / vals.size()) : 0.0;
        return std::pair<double, double>(mean, sd);
    };

    {
        std::ofstream csv(cfg.output_dir + "/transfer_table.csv");
        csv << "attack";
        for (const auto& c : result.column_ids) csv << "," << c;
        if (cfg.seeds.size() > 1)
            for (const auto& c : result.column_ids) csv << "," << c << "_std";
        csv << "\n";
        for (const auto& a : result.attack_ids) {
            csv << a;
            std::vector<double> stds;
            for (const auto& c : result.column_ids) {
                auto [m, s] = mean_std(a, c);
                csv << "," << fmt6(m);
                stds.push_back(s);
            }
            if (cfg.seeds.size() > 1)
                for (double s : stds) csv << "," << fmt6(s);
            csv << "\n";
        }
    }
    if (want) {
        std::ofstream csv(cfg.output_dir + "/imperceptibility_table.csv");
        csv << "attack,psnr,psnr_infinite,ssim,delta_e,lpips,fid,ai,ad,kl\n";
        for (const auto& a : result.attack_ids) {
            const MetricRow& r = result.metrics[a];
            csv << a << "," << fmt6(r.psnr) << "," << (r.psnr_infinite ? 1 : 0) << ","
                << fmt6(r.ssim) << "," << fmt6(r.delta_e) << "," << fmt6(r.lpips) << ","
                << fmt6(r.fid) << "," << fmt6(r.ai) << "," << fmt6(r.ad) << "," << fmt6(r.kl)
                << "\n";
        }
        json jm;
        for (const auto& a : result.attack_ids) {
            const MetricRow& r = result.metrics[a];
            json row;
            row["psnr"] = r.psnr_infinite ? json(nullptr) : json(r.psnr);
            row["psnr_infinite"] = r.psnr_infinite;
            row["ssim"] = r.ssim;
            row["delta_e"] = r.delta_e;
            row["lpips"] = r.lpips;
            row["fid"] = r.fid;
            row["ai"] = r.ai;
            row["ad"] = r.ad;
            row["kl"] = r.kl;
            jm[a] = row;
        }
        json spearman_j;
        for (const auto& [k, v] : result.spearman) spearman_j[k] = v;
        jm["_spearman_vs_success"] = spearman_j;
        std::ofstream jf(cfg.output_dir + "/imperceptibility_table.json");
        jf << jm.dump(2) << "\n";
    }
    {
        json js;
        for (size_t rep = 0; rep < result.success.size(); ++rep) {
            json jr;
            for (const auto& [a, cols] : result.success[rep]) {
                json jc;
                for (const auto& [c, v] : cols) jc[c] = v;
                jr[a] = jc;
            }
            js.push_back(jr);
        }
        std::ofstream jf(cfg.output_dir + "/transfer_table.json");
        jf << js.dump(2) << "\n";
    }

    auto t_end = std::chrono::steady_clock::now();
    stage_timings["total_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(t_end - t_start).count();

    json manifest;
    manifest["framework_version"] = "0.1.0";
    manifest["config_hash"] = config_hash(cfg);
    manifest["config"] = config_to_json(cfg);
    manifest["timings"] = stage_timings;
    manifest["seed_ledger"] = seed_ledger;
    manifest["cache_hits"] = result.cache_hits;
    manifest["cache_misses"] = result.cache_misses;
    manifest["ingest"] = {{"total", ingest.total},
                          {"correctly_classified", ingest.correctly_classified},
                          {"selected", ingest.selected}};
    manifest["artifacts"] = {cfg.output_dir + "/transfer_table.csv",
                             cfg.output_dir + "/imperceptibility_table.csv",
                             cfg.output_dir + "/transfer_table.json"};
    result.manifest_path = cfg.output_dir + "/manifest.json";
    std::ofstream mf(result.manifest_path);
    mf << manifest.dump(2) << "\n";
    return result;
}

TracebackRunResult run_traceback(const ExperimentConfig& cfg, int train_per_attack,
                                 int test_per_attack) {
    ModelStore store = load_model_store(cfg.models_dir);
    std::vector<ModelHandle> filter_models{store.model("surrogate")};
    for (const auto& t : cfg.targets) filter_models.push_back(store.model(t));
    Dataset eval_set = ingest_dataset(cfg.dataset_dir, filter_models, cfg.per_class,
                                      train_per_attack + test_per_attack, cfg.dataset_seed);

    std::vector<std::string> variants;
    for (const auto& a : cfg.attacks) variants.push_back(a.variant);

    AttackRunner runner = [&](const std::string& variant, const Tensor& images,
                              const std::vector<int>& labels) {
        for (const auto& a : cfg.attacks)
            if (a.variant == variant) {
                Dataset sub;
                sub.images = images;
                sub.labels = labels;
                sub.num_classes = eval_set.num_classes;
                return craft_attack(cfg, store, a, sub, cfg.seeds[0]);
            }
        throw ConfigError("attack not in config: " + variant);
    };

    TracebackDataset ds = build_traceback_dataset(variants, eval_set.images, eval_set.labels,
                                                  runner, train_per_attack, test_per_attack,
                                                  cfg.seeds[0]);
    TracebackRunResult out;
    ImageClassifierConfig icfg;
    out.image_report = train_image_classifier(ds, icfg);
    out.svm_rows = train_misclass_svm(ds, store.model(cfg.defense_target), {1, 3, 5, 10});

    // class-frequency tables per attack on the defense target
    const ModelHandle& target = store.model(cfg.defense_target);
    for (size_t a = 0; a < variants.size(); ++a) {
        std::vector<int> preds;
        for (size_t i = 0; i < ds.size(); ++i)
            if (ds.attack_ids[i] == static_cast<int>(a))
                preds.push_back(predict(target, ds.adversarials.slice_n(static_cast<int>(i)))[0]);
        out.frequency_tables.push_back(
            class_frequency_distribution(variants[a], preds, target.num_classes()));
    }

    fs::create_directories(cfg.output_dir);
    {
        std::ofstream csv(cfg.output_dir + "/traceback_confusion.csv");
        csv << "attack";
        for (const auto& n : out.image_report.attack_names) csv << "," << n;
        csv << "\n";
        for (size_t r = 0; r < out.image_report.confusion.size(); ++r) {
            csv << out.image_report.attack_names[r];
            for (int v : out.image_report.confusion[r]) csv << "," << v;
            csv << "\n";
        }
        std::ofstream sf(cfg.output_dir + "/traceback_summary.csv");
        sf << "metric,value\n";
        sf << "overall_accuracy," << fmt6(out.image_report.overall_accuracy) << "\n";
        sf << "category_accuracy," << fmt6(out.image_report.category_accuracy) << "\n";
        std::ofstream nf(cfg.output_dir + "/misclass_svm.csv");
        nf << "top_n,accuracy,degenerate\n";
        for (const auto& row : out.svm_rows)
            nf << row.top_n << "," << fmt6(row.accuracy) << "," << (row.degenerate ? 1 : 0)
               << "\n";
        json freq = json::array();
        for (const auto& t : out.frequency_tables) {
            json jt;
            jt["attack"] = t.attack;
            jt["top1_share"] = t.top1_share;
            json rows = json::array();
            for (const auto& r : t.top5) rows.push_back({{"class", r.class_id}, {"freq", r.frequency}});
            jt["top5"] = rows;
            freq.push_back(jt);
        }
        std::ofstream ff(cfg.output_dir + "/class_frequencies.json");
        ff << freq.dump(2) << "\n";
    }
    return out;
}

}  // namespace tbench
