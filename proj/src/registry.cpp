#include "tbench/registry.hpp"

#include <algorithm>

#include "tbench/errors.hpp"

namespace tbench {

namespace {

struct VariantInfo {
    const char* name;
    const char* category;
    bool stochastic;
    int default_iters;
};

// clang-format off
const VariantInfo kVariants[] = {
    {"PGD",   "baseline",              false, 50},
    {"MI",    "gradient_stabilization", false, 10},
    {"NI",    "gradient_stabilization", false, 10},
    {"PI",    "gradient_stabilization", false, 10},
    {"DI",    "input_augmentation",     true,  50},
    {"TI",    "input_augmentation",     true,  50},
    {"SI",    "input_augmentation",     true,  50},
    {"VT",    "input_augmentation",     true,  50},
    {"Admix", "input_augmentation",     true,  50},
    {"TAP",   "feature_disruption",     false, 50},
    {"AA",    "feature_disruption",     true,  50},
    {"ILA",   "feature_disruption",     false, 50},
    {"FIA",   "feature_disruption",     true,  50},
    {"NAA",   "feature_disruption",     false, 50},
    {"SGM",   "surrogate_refinement",   false, 50},
    {"LinBP", "surrogate_refinement",   false, 50},
    {"RFA",   "surrogate_refinement",   false, 50},
    {"IAA",   "surrogate_refinement",   false, 50},
    {"DSM",   "surrogate_refinement",   false, 50},
    {"GAP",   "generative_modeling",    false, 1},
    {"CDA",   "generative_modeling",    false, 1},
    {"GAPF",  "generative_modeling",    false, 1},
    {"BIA",   "generative_modeling",    false, 1},
    {"TTP",   "generative_modeling",    false, 1},
};
// clang-format on

const VariantInfo& info(const std::string& variant) {
    for (const auto& v : kVariants)
        if (variant == v.name) return v;
    throw ConfigError("unknown attack variant: " + variant);
}

}  // namespace

const std::vector<std::string>& all_attack_variants() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& v : kVariants) out.emplace_back(v.name);
        return out;
    }();
    return names;
}

const std::vector<std::string>& all_categories() {
    static const std::vector<std::string> cats = {
        "baseline",           "gradient_stabilization", "input_augmentation",
        "feature_disruption", "surrogate_refinement",   "generative_modeling"};
    return cats;
}

std::string attack_category(const std::string& variant) { return info(variant).category; }

int attack_category_id(const std::string& variant) {
    const auto& cats = all_categories();
    auto it = std::find(cats.begin(), cats.end(), attack_category(variant));
    return static_cast<int>(it - cats.begin());
}

bool attack_is_stochastic(const std::string& variant) { return info(variant).stochastic; }

bool attack_is_generative(const std::string& variant) {
    return attack_category(variant) == "generative_modeling";
}

int default_iterations(const std::string& variant) { return info(variant).default_iters; }

static TransformSpec aug_spec_for(const std::string& variant, const AttackSpec& spec) {
    TransformSpec t;
    t.kind = transform_kind_from_string(variant);
    t.epsilon = spec.epsilon;
    return t;
}

AdversarialBatch run_attack_variant(const AttackSpec& spec, const AttackResources& res,
                                    const Tensor& images, const std::vector<int>& labels,
                                    const ModelHandle* curve_probe) {
    const std::string& v = spec.variant;
    const std::string cat = attack_category(v);

    if (cat == "generative_modeling") {
        if (!res.generators) throw ConfigError("generative attack without trained generators");
        if (v == "TTP") {
            if (res.ttp_targets.empty()) throw ConfigError("TTP requires target classes");
            // Round-robin target assignment by image index keeps TTP
            // deterministic across seeds.
            AdversarialBatch out;
            out.originals = images;
            out.adversarials = images;
            out.labels = labels;
            out.attack_id = v;
            out.epsilon = spec.epsilon;
            out.seed = spec.seed;
            for (size_t i = 0; i < labels.size(); ++i) {
                int target = res.ttp_targets[i % res.ttp_targets.size()];
                if (target == labels[i])
                    target = res.ttp_targets[(i + 1) % res.ttp_targets.size()];
                auto it = res.generators->find("TTP:" + std::to_string(target));
                if (it == res.generators->end())
                    throw ConfigError("missing TTP generator for class " + std::to_string(target));
                AdversarialBatch one = generate(it->second, images.slice_n(static_cast<int>(i)),
                                                {labels[i]}, spec.epsilon);
                out.adversarials.set_slice_n(static_cast<int>(i), one.adversarials.slice_n(0));
            }
            return out;
        }
        auto it = res.generators->find(v);
        if (it == res.generators->end()) throw ConfigError("missing generator for " + v);
        AdversarialBatch out = generate(it->second, images, labels, spec.epsilon);
        out.attack_id = v;
        out.seed = spec.seed;
        return out;
    }

    if (cat == "baseline" || cat == "gradient_stabilization") {
        AttackSpec s = spec;
        if (v == "MI") s.stabilization = Stabilization::MI;
        else if (v == "NI") s.stabilization = Stabilization::NI;
        else if (v == "PI") s.stabilization = Stabilization::PI;
        else if (v == "PGD") s.stabilization = Stabilization::None;
        GradProvider g = make_ce_grad_provider(res.surrogate, labels, s);
        return run_iterative_attack(s, res.surrogate, images, labels, g, curve_probe, res.workers);
    }

    if (cat == "input_augmentation") {
        TransformSpec t = aug_spec_for(v, spec);
        const Dataset* pool = res.aux_pool;
        ModelHandle model = res.surrogate;
        uint64_t seed = spec.seed;
        GradProvider g = [t, model, labels, pool, seed](const Tensor& x, size_t i, int iter) {
            Rng rng = Rng::substream(seed ^ (0x17E5A7 * static_cast<uint64_t>(iter + 1)), 0xA060, i);
            return averaged_gradient(t, model, x, labels[i], rng, pool);
        };
        return run_iterative_attack(spec, res.surrogate, images, labels, g, curve_probe,
                                    res.workers);
    }

    if (cat == "feature_disruption") {
        FeatureLossSpec f;
        f.layer = res.feature_layer;
        if (v == "ILA") {
            AttackSpec stage1 = spec;
            stage1.iterations = std::max(1, spec.iterations / 5);
            int t2 = spec.iterations - stage1.iterations;
            return ila_two_stage(stage1, res.surrogate, images, labels, f.layer, t2, res.workers);
        }
        if (v == "TAP") f.variant = FeatureLossSpec::Variant::TAP;
        else if (v == "AA") f.variant = FeatureLossSpec::Variant::AA;
        else if (v == "FIA") f.variant = FeatureLossSpec::Variant::FIA;
        else if (v == "NAA") f.variant = FeatureLossSpec::Variant::NAA;
        if (v == "AA" && !res.aux_pool) throw ConfigError("AA requires an auxiliary image pool");
        GradProvider g = make_feature_grad_provider(f, res.surrogate, images, labels, res.aux_pool,
                                                    spec.seed, res.workers);
        return run_iterative_attack(spec, res.surrogate, images, labels, g, curve_probe,
                                    res.workers);
    }

    // surrogate refinement: PGD-CE against a refined or retrained surrogate
    ModelHandle surrogate = res.surrogate;
    if (v == "SGM") {
        RefineSpec r;
        r.kind = RefineSpec::Kind::SGM;
        r.gamma = res.sgm_gamma;
        surrogate = apply_refinement(res.surrogate, r);
    } else if (v == "LinBP") {
        RefineSpec r;
        r.kind = RefineSpec::Kind::LinBP;
        r.linbp_start = res.linbp_start;
        surrogate = apply_refinement(res.surrogate, r);
    } else if (v == "IAA") {
        RefineSpec r;
        r.kind = RefineSpec::Kind::IAA;
        r.beta = res.iaa_beta;
        surrogate = apply_refinement(res.surrogate, r);
    } else if (v == "RFA") {
        if (!res.rfa_surrogate.valid()) throw ConfigError("RFA surrogate not trained");
        surrogate = res.rfa_surrogate;
    } else if (v == "DSM") {
        if (!res.dsm_surrogate.valid()) throw ConfigError("DSM surrogate not trained");
        surrogate = res.dsm_surrogate;
    }
    GradProvider g = make_ce_grad_provider(surrogate, labels, spec);
    return run_iterative_attack(spec, surrogate, images, labels, g, curve_probe, res.workers);
}

}  // namespace tbench
