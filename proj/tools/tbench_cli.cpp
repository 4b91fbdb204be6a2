// Experiment CLI: dataset generation, model training, attack/defense runs,
// metric tables, traceback, parameter sweeps, and plot emission.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tbench/errors.hpp"

#include "tbench/dataset.hpp"
#include "tbench/harness.hpp"
#include "tbench/metrics.hpp"
#include "tbench/plots.hpp"
#include "tbench/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tbench;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out;
    std::string cache_dir;
    uint64_t seed = 0;
    int workers = 0;
};

ExperimentConfig load_with_overrides(const CommonOpts& o) {
    ExperimentConfig cfg = load_config(o.config_path);
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (!o.cache_dir.empty()) cfg.cache_dir = o.cache_dir;
    if (o.seed) cfg.seeds = {o.seed};
    if (o.workers > 0) cfg.workers = o.workers;
    return cfg;
}

int write_failure_manifest(const std::string& out_dir, const std::string& stage,
                           const std::string& what) {
    fs::create_directories(out_dir.empty() ? "." : out_dir);
    std::string path = (out_dir.empty() ? "." : out_dir) + "/failure_manifest.json";
    json j;
    j["stage"] = stage;
    j["error"] = what;
    std::ofstream f(path);
    f << j.dump(2) << "\n";
    std::fprintf(stderr, "error: %s\nmanifest: %s\n", what.c_str(), path.c_str());
    return 1;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
    cmd->add_option("--config", o.config_path, "experiment config (json)")
        ->required(config_required);
    cmd->add_option("--out", o.out, "output directory override");
    cmd->add_option("--cache-dir", o.cache_dir, "cache directory override");
    cmd->add_option("--seed", o.seed, "repeat seed override");
    cmd->add_option("--workers", o.workers, "worker thread override");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"transferbench: transferable adversarial example evaluation"};
    app.require_subcommand(1);

    // ---- make-dataset
    auto* mkds = app.add_subcommand("make-dataset", "generate the synthetic image corpus");
    std::string ds_dir = "dataset";
    int ds_count = 1500, ds_classes = 10, ds_size = 32;
    uint64_t ds_seed = 1;
    mkds->add_option("--out", ds_dir, "output directory");
    mkds->add_option("--count", ds_count, "image count");
    mkds->add_option("--classes", ds_classes, "class count");
    mkds->add_option("--size", ds_size, "image side length");
    mkds->add_option("--seed", ds_seed, "generation seed");

    // ---- train-models
    auto* train = app.add_subcommand("train-models", "train classifiers, generators, purifiers");
    std::string tm_dataset = "dataset", tm_store = "models";
    uint64_t tm_seed = 1;
    bool tm_quiet = false;
    train->add_option("--dataset", tm_dataset, "dataset root (train/ heldout/ created if absent)");
    train->add_option("--out", tm_store, "model store directory");
    train->add_option("--seed", tm_seed, "training seed");
    train->add_flag("--quiet", tm_quiet, "suppress progress lines");

    // ---- run-attacks
    CommonOpts atk_opts;
    auto* runatk = app.add_subcommand("run-attacks", "craft adversarial batches (cached)");
    add_common(runatk, atk_opts);

    // ---- run-defenses / evaluate
    CommonOpts def_opts;
    auto* rundef = app.add_subcommand("run-defenses", "attack x defense success grid");
    add_common(rundef, def_opts);
    CommonOpts eval_opts;
    auto* evaluate = app.add_subcommand("evaluate", "full tables: transferability + stealthiness");
    add_common(evaluate, eval_opts);

    // ---- traceback
    CommonOpts tb_opts;
    int tb_train = 40, tb_test = 10;
    auto* traceback = app.add_subcommand("traceback", "attack attribution classifiers");
    add_common(traceback, tb_opts);
    traceback->add_option("--train-per-attack", tb_train, "training samples per attack");
    traceback->add_option("--test-per-attack", tb_test, "test samples per attack");

    // ---- sweep
    CommonOpts sw_opts;
    std::string sweep_kind = "iterations";
    auto* sweep = app.add_subcommand("sweep", "intra-category analyses");
    add_common(sweep, sw_opts);
    sweep->add_option("--kind", sweep_kind,
                      "iterations | window | copies | layers | eps-grid | diversity");

    // ---- plot
    CommonOpts plot_opts;
    auto* plot = app.add_subcommand("plot", "render SVG charts from result tables");
    add_common(plot, plot_opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (mkds->parsed()) {
            Dataset ds = make_synthetic_dataset(ds_count, ds_classes, ds_size, ds_seed);
            save_dataset(ds_dir, ds);
            std::printf("wrote %d images to %s\n", ds_count, ds_dir.c_str());
            return 0;
        }
        if (train->parsed()) {
            TrainAllConfig cfg;
            cfg.seed = tm_seed;
            train_all_models(cfg, tm_dataset, tm_store, !tm_quiet);
            std::printf("model store ready: %s\n", tm_store.c_str());
            return 0;
        }
        if (runatk->parsed()) {
            ExperimentConfig cfg = load_with_overrides(atk_opts);
            ModelStore store = load_model_store(cfg.models_dir);
            std::vector<ModelHandle> filters{store.model("surrogate")};
            for (const auto& t : cfg.targets) filters.push_back(store.model(t));
            Dataset eval_set = ingest_dataset(cfg.dataset_dir, filters, cfg.per_class,
                                              cfg.eval_count, cfg.dataset_seed);
            for (const auto& a : cfg.attacks) {
                bool hit = false;
                AdversarialBatch b = craft_attack(cfg, store, a, eval_set, cfg.seeds[0], &hit);
                std::printf("%-6s eps=%.4f linf=%.4f %s\n", a.variant.c_str(), a.epsilon,
                            linf_distance(b.adversarials, b.originals), hit ? "(cache)" : "");
            }
            return 0;
        }
        if (rundef->parsed() || evaluate->parsed()) {
            ExperimentConfig cfg = load_with_overrides(rundef->parsed() ? def_opts : eval_opts);
            if (rundef->parsed()) cfg.metrics.clear();  // grid only
            ExperimentResult res = run_experiment(cfg);
            std::printf("wrote %s and tables under %s (cache hits %zu, misses %zu)\n",
                        res.manifest_path.c_str(), cfg.output_dir.c_str(), res.cache_hits,
                        res.cache_misses);
            return 0;
        }
        if (traceback->parsed()) {
            ExperimentConfig cfg = load_with_overrides(tb_opts);
            TracebackRunResult res = run_traceback(cfg, tb_train, tb_test);
            std::printf("image-feature accuracy %.4f (category %.4f)\n",
                        res.image_report.overall_accuracy, res.image_report.category_accuracy);
            for (const auto& row : res.svm_rows)
                std::printf("misclass svm top-%d accuracy %.4f%s\n", row.top_n, row.accuracy,
                            row.degenerate ? " (degenerate)" : "");
            return 0;
        }
        if (sweep->parsed()) {
            ExperimentConfig cfg = load_with_overrides(sw_opts);
            ModelStore store = load_model_store(cfg.models_dir);
            std::vector<ModelHandle> filters{store.model("surrogate")};
            for (const auto& t : cfg.targets) filters.push_back(store.model(t));
            Dataset eval_set = ingest_dataset(cfg.dataset_dir, filters, cfg.per_class,
                                              cfg.eval_count, cfg.dataset_seed);
            const ModelHandle& target = store.model(cfg.targets[0]);
            PlotRegistry plots(cfg.output_dir);
            AttackResources res = make_resources(store, cfg.workers);

            if (sweep_kind == "iterations") {
                std::map<std::string, std::vector<double>> series;
                std::vector<double> xs;
                for (const auto& a : cfg.attacks) {
                    AdversarialBatch b =
                        craft_attack(cfg, store, a, eval_set, cfg.seeds[0], nullptr, &target);
                    if (xs.empty())
                        for (size_t i = 0; i < b.per_iteration_success.size(); ++i)
                            xs.push_back(static_cast<double>(i + 1));
                    series[a.variant] = {b.per_iteration_success.begin(),
                                         b.per_iteration_success.end()};
                }
                plots.line_chart("iteration_curves", "Transferability vs. iterations",
                                 "iteration", "success rate", xs, series);
            } else if (sweep_kind == "window") {
                std::vector<double> xs;
                std::vector<double> ys;
                for (int k : {1, 2, 3, 5, 10, 1000}) {
                    AttackSpec s;
                    s.variant = "NI";
                    s.epsilon = cfg.attacks[0].epsilon;
                    s.step_size = cfg.attacks[0].step_size;
                    s.iterations = cfg.attacks[0].iterations > 0 ? cfg.attacks[0].iterations : 10;
                    s.stabilization = Stabilization::Window;
                    s.window_k = k;
                    GradProvider g = make_ce_grad_provider(res.surrogate, eval_set.labels, s);
                    AdversarialBatch b = run_iterative_attack(s, res.surrogate, eval_set.images,
                                                              eval_set.labels, g, nullptr,
                                                              cfg.workers);
                    auto preds = defend_then_classify(DefenseSpec{}, b, target, cfg.workers);
                    xs.push_back(k);
                    ys.push_back(success_rate(preds, b.labels));
                }
                plots.line_chart("window_sweep", "Look-ahead window size", "window k",
                                 "success rate", xs, {{"window", ys}});
            } else if (sweep_kind == "copies") {
                std::map<std::string, std::vector<double>> series;
                std::vector<double> xs = {1, 3, 5};
                for (const auto& a : cfg.attacks) {
                    if (attack_category(a.variant) != "input_augmentation") continue;
                    std::vector<double> ys;
                    for (double m : xs) {
                        TransformSpec t;
                        t.kind = transform_kind_from_string(a.variant);
                        t.epsilon = a.epsilon;
                        t.copies = static_cast<int>(m);
                        AttackSpec s;
                        s.variant = a.variant;
                        s.epsilon = a.epsilon;
                        s.step_size = a.step_size;
                        s.iterations = a.iterations > 0 ? a.iterations : 50;
                        s.seed = a.seed ^ cfg.seeds[0];
                        const Dataset* pool = res.aux_pool;
                        ModelHandle model = res.surrogate;
                        auto labels = eval_set.labels;
                        uint64_t seed = s.seed;
                        GradProvider g = [t, model, labels, pool, seed](const Tensor& x, size_t i,
                                                                        int iter) {
                            Rng rng = Rng::substream(
                                seed ^ (0x17E5A7 * static_cast<uint64_t>(iter + 1)), 0xA060, i);
                            return averaged_gradient(t, model, x, labels[i], rng, pool);
                        };
                        AdversarialBatch b = run_iterative_attack(s, res.surrogate,
                                                                  eval_set.images, eval_set.labels,
                                                                  g, nullptr, cfg.workers);
                        auto preds = defend_then_classify(DefenseSpec{}, b, target, cfg.workers);
                        ys.push_back(success_rate(preds, b.labels));
                    }
                    series[a.variant] = ys;
                }
                plots.line_chart("copy_count", "Input copies m", "copies", "success rate", xs,
                                 series);
            } else if (sweep_kind == "layers") {
                FeatureLossSpec f;
                f.variant = FeatureLossSpec::Variant::FIA;
                AttackSpec s;
                s.variant = "FIA";
                s.epsilon = cfg.attacks[0].epsilon;
                s.step_size = cfg.attacks[0].step_size;
                s.iterations = cfg.attacks[0].iterations > 0 ? cfg.attacks[0].iterations : 50;
                s.seed = cfg.seeds[0];
                auto rows = layer_sweep(f, s, res.surrogate, target, eval_set,
                                        {"conv2_x", "conv3_x", "conv4_x", "conv5_x"}, cfg.workers);
                std::vector<std::string> labels;
                std::vector<double> vals;
                for (const auto& r : rows) {
                    labels.push_back(r.layer);
                    vals.push_back(r.success);
                }
                plots.bar_chart("layer_sweep", "Feature layer sweep (FIA)", labels, vals);
            } else if (sweep_kind == "eps-grid") {
                GenTrainConfig gc;
                gc.loss = GenLoss::GAP_CE;
                Dataset gen_train = store.aux_pool.size() ? store.aux_pool.take(800) : eval_set;
                std::vector<float> etr = {4.f / 255, 8.f / 255, 16.f / 255};
                std::vector<float> ete = {4.f / 255, 8.f / 255, 16.f / 255};
                EpsSweepResult grid = eps_sweep(gc, gen_train, eval_set, res.surrogate, target,
                                                etr, ete, cfg.cache_dir + "/generators");
                std::vector<std::string> rl, cl;
                for (float v : etr) rl.push_back(std::to_string(static_cast<int>(v * 255 + 0.5f)));
                for (float v : ete) cl.push_back(std::to_string(static_cast<int>(v * 255 + 0.5f)));
                plots.heatmap("eps_grid", "Generator eps_train x eps_test", rl, cl, grid.success);
            } else if (sweep_kind == "diversity") {
                std::vector<std::string> labels;
                std::vector<double> vals;
                for (const char* kind : {"DI", "TI", "SI", "VT", "Admix"}) {
                    TransformSpec t;
                    t.kind = transform_kind_from_string(kind);
                    t.epsilon = 16.f / 255.f;
                    labels.push_back(kind);
                    vals.push_back(input_diversity(t, res.surrogate, eval_set, 10, cfg.seeds[0],
                                                   res.aux_pool));
                }
                plots.bar_chart("input_diversity", "Input diversity (top-1 logit drop)", labels,
                                vals);
            } else {
                throw tbench::ConfigError("unknown sweep kind: " + sweep_kind);
            }
            std::printf("sweep '%s' written to %s\n", sweep_kind.c_str(),
                        cfg.output_dir.c_str());
            return 0;
        }
        if (plot->parsed()) {
            ExperimentConfig cfg = load_with_overrides(plot_opts);
            PlotRegistry plots(cfg.output_dir + "/plots");
            // transfer heatmap from the table written by `evaluate`
            std::ifstream tf(cfg.output_dir + "/transfer_table.csv");
            if (!tf) throw tbench::IoError("run `evaluate` first: missing transfer_table.csv");
            std::string line;
            std::getline(tf, line);
            std::vector<std::string> cols;
            {
                size_t pos = 0;
                while ((pos = line.find(',')) != std::string::npos) {
                    cols.push_back(line.substr(0, pos));
                    line.erase(0, pos + 1);
                }
                cols.push_back(line);
            }
            std::vector<std::string> rows;
            std::vector<std::vector<double>> vals;
            while (std::getline(tf, line)) {
                if (line.empty()) continue;
                std::vector<std::string> parts;
                size_t pos = 0;
                std::string rest = line;
                while ((pos = rest.find(',')) != std::string::npos) {
                    parts.push_back(rest.substr(0, pos));
                    rest.erase(0, pos + 1);
                }
                parts.push_back(rest);
                rows.push_back(parts[0]);
                std::vector<double> row;
                for (size_t i = 1; i < parts.size(); ++i) row.push_back(std::stod(parts[i]));
                vals.push_back(row);
            }
            std::vector<std::string> col_labels(cols.begin() + 1, cols.end());
            plots.heatmap("transfer_heatmap", "Attack transferability", rows, col_labels, vals);
            std::printf("plots written to %s/plots\n", cfg.output_dir.c_str());
            return 0;
        }
    } catch (const std::exception& e) {
        std::string out;
        if (atk_opts.out.size()) out = atk_opts.out;
        for (const auto* o : {&def_opts, &eval_opts, &tb_opts, &sw_opts, &plot_opts})
            if (!o->out.empty()) out = o->out;
        return write_failure_manifest(out, app.get_subcommands().empty()
                                               ? "unknown"
                                               : app.get_subcommands()[0]->get_name(),
                                      e.what());
    }
    return 0;
}
