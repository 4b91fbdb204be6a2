#include "tbench/traceback.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "tbench/errors.hpp"
#include "tbench/registry.hpp"
#include "tbench/train.hpp"
#include "tbench/rng.hpp"

namespace tbench {

TracebackDataset build_traceback_dataset(const std::vector<std::string>& attacks,
                                         const Tensor& images, const std::vector<int>& labels,
                                         const AttackRunner& runner, int train_per_attack,
                                         int test_per_attack, uint64_t seed) {
    int per_attack = train_per_attack + test_per_attack;
    if (per_attack <= 0 || per_attack > static_cast<int>(labels.size()))
        throw ConfigError("traceback: per-attack sample count exceeds available images");
    std::vector<int> idx(per_attack);
    std::iota(idx.begin(), idx.end(), 0);

    TracebackDataset ds;
    ds.attack_names = attacks;
    ds.seed = seed;
    size_t total = attacks.size() * per_attack;
    ds.adversarials = Tensor({static_cast<int>(total), 3, images.dim(2), images.dim(3)});
    ds.cleans = Tensor({static_cast<int>(total), 3, images.dim(2), images.dim(3)});
    ds.attack_ids.resize(total);
    ds.category_ids.resize(total);
    ds.is_test.resize(total);

    Tensor sub({per_attack, 3, images.dim(2), images.dim(3)});
    std::vector<int> sub_labels(per_attack);
    for (int i = 0; i < per_attack; ++i) {
        sub.set_slice_n(i, images.slice_n(i));
        sub_labels[i] = labels[i];
    }

    for (size_t a = 0; a < attacks.size(); ++a) {
        AdversarialBatch batch;
        try {
            batch = runner(attacks[a], sub, sub_labels);
        } catch (const std::exception& e) {
            throw AttackError("traceback dataset build aborted: attack '" + attacks[a] +
                              "' failed: " + e.what());
        }
        for (int i = 0; i < per_attack; ++i) {
            size_t row = a * per_attack + i;
            ds.adversarials.set_slice_n(static_cast<int>(row), batch.adversarials.slice_n(i));
            ds.cleans.set_slice_n(static_cast<int>(row), sub.slice_n(i));
            ds.attack_ids[row] = static_cast<int>(a);
            ds.category_ids[row] = attack_category_id(attacks[a]);
            ds.is_test[row] = i >= train_per_attack;
        }
    }
    return ds;
}

TracebackReport train_image_classifier(const TracebackDataset& ds,
                                       const ImageClassifierConfig& cfg) {
    int num_attacks = static_cast<int>(ds.attack_names.size());
    auto input_of = [&](size_t row) {
        Tensor adv = ds.adversarials.slice_n(static_cast<int>(row));
        if (!cfg.use_perturbation) return adv;
        // scaled perturbation view: (adv - clean) mapped into [0,1]
        Tensor clean = ds.cleans.slice_n(static_cast<int>(row));
        Tensor d = adv - clean;
        for (size_t i = 0; i < d.size(); ++i) d[i] = std::min(std::max(d[i] * 4.f + 0.5f, 0.f), 1.f);
        return d;
    };

    std::vector<int> train_rows, test_rows;
    for (size_t i = 0; i < ds.size(); ++i)
        (ds.is_test[i] ? test_rows : train_rows).push_back(static_cast<int>(i));
    if (train_rows.empty() || test_rows.empty())
        throw ConfigError("traceback: empty train or test split");

    Dataset train;
    train.num_classes = num_attacks;
    train.images = Tensor({static_cast<int>(train_rows.size()), 3, ds.adversarials.dim(2),
                           ds.adversarials.dim(3)});
    train.labels.resize(train_rows.size());
    for (size_t i = 0; i < train_rows.size(); ++i) {
        train.images.set_slice_n(static_cast<int>(i), input_of(train_rows[i]));
        train.labels[i] = ds.attack_ids[train_rows[i]];
    }
    Dataset test = train;  // shapes reused below
    test.images = Tensor({static_cast<int>(test_rows.size()), 3, ds.adversarials.dim(2),
                          ds.adversarials.dim(3)});
    test.labels.resize(test_rows.size());
    for (size_t i = 0; i < test_rows.size(); ++i) {
        test.images.set_slice_n(static_cast<int>(i), input_of(test_rows[i]));
        test.labels[i] = ds.attack_ids[test_rows[i]];
    }

    TrainRecipe recipe;
    recipe.kind = TrainRecipe::Kind::Standard;
    recipe.architecture_id = "convnet_small";
    recipe.epochs = cfg.epochs;
    recipe.lr = cfg.lr;
    recipe.batch_size = cfg.batch_size;
    recipe.seed = cfg.seed;
    ModelHandle clf = train_reference_model(recipe, train, test);

    TracebackReport report;
    report.attack_names = ds.attack_names;
    report.confusion.assign(num_attacks, std::vector<int>(num_attacks, 0));
    auto preds = predict(clf, test.images);
    size_t correct = 0, cat_correct = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        report.confusion[test.labels[i]][preds[i]] += 1;
        if (preds[i] == test.labels[i]) ++correct;
        if (attack_category_id(ds.attack_names[preds[i]]) ==
            attack_category_id(ds.attack_names[test.labels[i]]))
            ++cat_correct;
    }
    report.overall_accuracy = static_cast<double>(correct) / preds.size();
    report.category_accuracy = static_cast<double>(cat_correct) / preds.size();
    return report;
}

std::vector<float> top_n_feature(const Tensor& logits_row, int num_classes, int top_n) {
    std::vector<int> order(num_classes);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits_row[a] > logits_row[b]; });
    std::vector<float> feat(num_classes, 0.f);
    for (int i = 0; i < std::min(top_n, num_classes); ++i) feat[order[i]] += 1.f;
    return feat;
}

std::vector<MisclassSvmRow> train_misclass_svm(const TracebackDataset& ds,
                                               const ModelHandle& target,
                                               const std::vector<int>& top_n_values,
                                               uint64_t seed) {
    int num_attacks = static_cast<int>(ds.attack_names.size());
    int num_classes = target.num_classes();
    Tensor logits = forward(target, ds.adversarials);
    int k = logits.dim(1);

    std::vector<MisclassSvmRow> rows;
    for (int top_n : top_n_values) {
        if (top_n < 1) throw ConfigError("top-N must be >= 1");
        std::vector<std::vector<float>> xtr, xte;
        std::vector<int> ytr, yte;
        for (size_t i = 0; i < ds.size(); ++i) {
            Tensor row({k});
            for (int c = 0; c < k; ++c) row[c] = logits[i * k + c];
            auto feat = top_n_feature(row, num_classes, top_n);
            if (ds.is_test[i]) {
                xte.push_back(std::move(feat));
                yte.push_back(ds.attack_ids[i]);
            } else {
                xtr.push_back(std::move(feat));
                ytr.push_back(ds.attack_ids[i]);
            }
        }
        bool degenerate = std::all_of(xtr.begin(), xtr.end(),
                                      [&](const auto& f) { return f == xtr.front(); });
        MisclassSvmRow row;
        row.top_n = top_n;
        row.degenerate = degenerate;
        if (degenerate) {
            row.accuracy = 1.0 / num_attacks;  // chance-level report
        } else {
            SvmModel svm = svm_train_ovr(xtr, ytr, num_attacks, 1.0, 0.0, 3, 1e-3, seed);
            row.accuracy = svm_accuracy(svm, xte, yte);
        }
        rows.push_back(row);
    }
    return rows;
}

ClassFrequencyTable class_frequency_distribution(const std::string& attack,
                                                 const std::vector<int>& predictions,
                                                 int num_classes) {
    ClassFrequencyTable table;
    table.attack = attack;
    if (predictions.empty()) return table;
    std::vector<int> counts(num_classes, 0);
    for (int p : predictions)
        if (p >= 0 && p < num_classes) ++counts[p];
    std::vector<int> order(num_classes);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counts[a] > counts[b]; });
    for (int i = 0; i < std::min(5, num_classes); ++i) {
        if (counts[order[i]] == 0) break;
        table.top5.push_back(
            {order[i], static_cast<double>(counts[order[i]]) / predictions.size()});
    }
    table.top1_share = counts[order[0]] / static_cast<double>(predictions.size());
    return table;
}

}  // namespace tbench
