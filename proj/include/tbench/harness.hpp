#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tbench/dataset.hpp"
#include "tbench/defense.hpp"
#include "tbench/generative.hpp"
#include "tbench/model.hpp"
#include "tbench/registry.hpp"
#include "tbench/traceback.hpp"

namespace tbench {

struct AttackConfig {
    std::string variant = "PGD";
    float epsilon = 16.f / 255.f;
    float step_size = 0.f;  // mandatory in experiment configs
    int iterations = 0;     // 0 = category default
    uint64_t seed = 0;
};

struct DefenseConfig {
    // none | BDR | PD | RP | HGD | NRP | DiffPure | AT_inf | FD_inf | AT_l2
    std::string kind = "none";
    std::string id = "none";
    int bdr_depth = 2;
    int pd_count = 100;
    int pd_window = 5;
    float pd_sigma = 0.04f;
    float rp_lo = 1.f, rp_hi = 1.1f;
    uint64_t seed = 0;
};

struct ExperimentConfig {
    int schema_version = 1;
    std::string dataset_dir;
    std::string models_dir;
    int eval_count = 50;
    int per_class = 0;  // 0 = unrestricted selection
    uint64_t dataset_seed = 1;
    std::vector<std::string> targets;  // model ids in the store
    std::string defense_target;        // defenses protect this target
    std::vector<AttackConfig> attacks;
    std::vector<DefenseConfig> defenses;
    std::vector<std::string> metrics = {"psnr", "ssim", "delta_e", "lpips", "fid", "ai_ad", "kl"};
    std::vector<uint64_t> seeds = {1};
    std::string output_dir = "out";
    std::string cache_dir = "cache";
    bool use_cache = true;
    int workers = 1;
    int interp_subset = 30;  // images used for AI/AD
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& cfg, const std::string& path);
uint64_t config_hash(const ExperimentConfig& cfg);
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ULL);

// Trained artifact store on disk (classifiers, generators, purifiers).
struct ModelStore {
    std::string dir;
    std::map<std::string, ModelHandle> models;
    std::map<std::string, GeneratorNet> generators;
    std::map<std::string, Purifier> purifiers;
    Dataset aux_pool;  // training split used for donors / AA targets

    const ModelHandle& model(const std::string& id) const;
    bool has_model(const std::string& id) const { return models.count(id) > 0; }
};

struct TrainAllConfig {
    uint64_t seed = 1;
    int train_count = 1200;
    int heldout_count = 300;
    int image_size = 32;
    int num_classes = 10;
    int epochs_standard = 8;
    int epochs_at = 4;
    int at_subset = 800;
    int at_steps = 5;
    int gen_epochs = 4;
    int gen_subset = 800;
    int purifier_epochs = 4;
    std::vector<int> ttp_targets = {0, 3, 6};
    float eps_train = 10.f / 255.f;
    float at_eps = 8.f / 255.f;
    float at_l2_eps = 0.5f;
};

// Trains every artifact the experiments need and saves them under
// `store_dir`; also writes the train/heldout splits as dataset dirs.
void train_all_models(const TrainAllConfig& cfg, const std::string& dataset_dir,
                      const std::string& store_dir, bool verbose = false);
ModelStore load_model_store(const std::string& dir);

struct IngestReport {
    size_t total = 0;
    size_t correctly_classified = 0;
    size_t selected = 0;
};
// Loads a dataset directory, resizes/crops to the model input size, keeps
// only images every filter model classifies correctly, then selects up to
// `max_count` (optionally k per class) under the seed.
Dataset ingest_dataset(const std::string& dir, const std::vector<ModelHandle>& filter_models,
                       int k_per_class, int max_count, uint64_t seed,
                       IngestReport* report = nullptr);

struct MetricRow {
    double psnr = 0.0;
    bool psnr_infinite = false;
    double ssim = 0.0, delta_e = 0.0, lpips = 0.0, fid = 0.0;
    double ai = 0.0, ad = 0.0, kl = 0.0;
};

struct ExperimentResult {
    std::vector<std::string> attack_ids;
    std::vector<std::string> column_ids;
    // success[repeat][attack][column]
    std::vector<std::map<std::string, std::map<std::string, double>>> success;
    std::map<std::string, MetricRow> metrics;
    std::map<std::string, double> spearman;  // imperceptibility metric -> rho
    std::string manifest_path;
    size_t cache_hits = 0;
    size_t cache_misses = 0;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Crafts (or loads from cache) one attack batch for the experiment.
AdversarialBatch craft_attack(const ExperimentConfig& cfg, const ModelStore& store,
                              const AttackConfig& atk, const Dataset& eval_set,
                              uint64_t repeat_seed, bool* cache_hit = nullptr,
                              const ModelHandle* curve_probe = nullptr);

DefenseSpec resolve_defense(const DefenseConfig& dc, const ModelStore& store);
AttackResources make_resources(const ModelStore& store, int workers);

struct TracebackRunResult {
    TracebackReport image_report;
    std::vector<MisclassSvmRow> svm_rows;
    std::vector<ClassFrequencyTable> frequency_tables;
};
TracebackRunResult run_traceback(const ExperimentConfig& cfg, int train_per_attack,
                                 int test_per_attack);

}  // namespace tbench
