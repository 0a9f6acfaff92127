#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sare/data/fracture.hpp"
#include "sare/data/io.hpp"
#include "sare/flow/checkpoint.hpp"
#include "sare/infer/refine.hpp"

namespace sare::cli {

using json = nlohmann::json;

inline constexpr const char* kSeedEnv = "SARE_KIT_SEED";
inline constexpr const char* kToolVersion = "0.1.0";

struct DatasetSpec {
    std::vector<std::string> shapes{"cube", "sphere", "cylinder", "ellipsoid", "L-prism"};
    std::map<int, double> k_histogram{{2, 1.0}, {3, 1.0}, {4, 1.0}, {5, 1.0}, {6, 1.0}};
    int train_count = 200;
    int test_count = 50;
    std::size_t surface_points = 20000;
    std::size_t interior_points = 20000;
    double eps_f = 0.01;
    double eps_adj = 0.02;
};

struct ModelSpec {
    flow::ModelConfig net;
    std::size_t tokens = 512; ///< M
    std::size_t neighbors = kDefaultNeighbors;
};

struct TrainSpec {
    int epochs = 30;
    double lr = 1e-4;
    double lambda_f = 0.01;
    double lambda_a = 0.01;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double warmup_steps = 0;
    bool cosine_decay = false;
    bool augment = true;
};

struct AblateSpec {
    std::vector<bool> heads{true, false};
    std::vector<int> structural_layers{2, 4};
    std::vector<double> alphas{0.5, 1.0};
    bool freeze = true;
    int epochs = 0; ///< 0 = use train.epochs
};

struct Paths {
    std::string data = "data";
    std::string run = "run";
};

struct RunConfig {
    std::uint64_t seed = 0;
    DatasetSpec dataset;
    ModelSpec model;
    TrainSpec train;
    int steps = kDefaultSteps;
    RefineConfig refine;
    RefineMode refine_mode = RefineMode::Repaint;
    double pa_threshold = 0.01;
    AblateSpec ablate;
    Paths paths;
};

// ---------------------------------------------------------------------------
// JSON <-> RunConfig

inline json to_json(const RunConfig& c) {
    json hist = json::object();
    for (auto [k, w] : c.dataset.k_histogram) hist[std::to_string(k)] = w;
    const auto& r = c.refine;
    return {
        {"seed", c.seed},
        {"dataset",
         {{"shapes", c.dataset.shapes},
          {"k_histogram", hist},
          {"train_count", c.dataset.train_count},
          {"test_count", c.dataset.test_count},
          {"surface_points", c.dataset.surface_points},
          {"interior_points", c.dataset.interior_points},
          {"eps_f", c.dataset.eps_f},
          {"eps_adj", c.dataset.eps_adj}}},
        {"model",
         {{"net", flow::model_config_to_json(c.model.net)},
          {"tokens", c.model.tokens},
          {"neighbors", c.model.neighbors}}},
        {"train",
         {{"epochs", c.train.epochs},
          {"lr", c.train.lr},
          {"lambda_f", c.train.lambda_f},
          {"lambda_a", c.train.lambda_a},
          {"weight_decay", c.train.weight_decay},
          {"grad_clip", c.train.grad_clip},
          {"warmup_steps", c.train.warmup_steps},
          {"cosine_decay", c.train.cosine_decay},
          {"augment", c.train.augment}}},
        {"sample", {{"steps", c.steps}}},
        {"refine",
         {{"mode", mode_name(c.refine_mode)},
          {"edge_threshold", r.edge_threshold},
          {"overlap_tau", r.overlap_tau},
          {"resolution", r.resolution},
          {"coverage_tolerance", r.coverage_tolerance},
          {"coverage_fraction", r.coverage_fraction},
          {"min_component", r.min_component},
          {"alpha", r.alpha},
          {"resample_repeats", r.resample_repeats},
          {"fracture_threshold", r.fracture_threshold},
          {"bbox_inflation", r.bbox_inflation}}},
        {"eval", {{"pa_threshold", c.pa_threshold}}},
        {"ablate",
         {{"heads", c.ablate.heads},
          {"structural_layers", c.ablate.structural_layers},
          {"alphas", c.ablate.alphas},
          {"freeze", c.ablate.freeze},
          {"epochs", c.ablate.epochs}}},
        {"paths", {{"data", c.paths.data}, {"run", c.paths.run}}},
    };
}

namespace detail {

/// Reads the keys of one JSON object, rejecting anything not claimed.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const json* child(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

} // namespace detail

inline void validate(const RunConfig& c) {
    if (c.dataset.shapes.empty()) throw ConfigError("dataset.shapes must not be empty");
    for (const auto& s : c.dataset.shapes) {
        try {
            parse_shape(s);
        } catch (const Error&) {
            throw ConfigError("dataset.shapes: unknown shape '" + s + "'");
        }
    }
    if (c.dataset.k_histogram.empty()) throw ConfigError("dataset.k_histogram must not be empty");
    double mass = 0.0;
    for (auto [k, w] : c.dataset.k_histogram) {
        if (k < 2 || k > kMaxFragments)
            throw ConfigError("dataset.k_histogram: K=" + std::to_string(k) + " outside [2, " + std::to_string(kMaxFragments) + "]");
        if (!(w >= 0.0)) throw ConfigError("dataset.k_histogram: weights must be non-negative");
        mass += w;
    }
    if (!(mass > 0.0)) throw ConfigError("dataset.k_histogram: total weight must be positive");
    if (c.dataset.train_count < 0 || c.dataset.test_count < 0) throw ConfigError("dataset counts must be >= 0");
    if (c.dataset.surface_points < 100) throw ConfigError("dataset.surface_points must be >= 100");
    if (!(c.dataset.eps_f > 0.0) || !(c.dataset.eps_adj > 0.0)) throw ConfigError("dataset eps values must be positive");
    try {
        c.model.net.check();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("model.net: ") + e.what());
    }
    if (c.model.net.max_parts < c.dataset.k_histogram.rbegin()->first)
        throw ConfigError("model.net.max_parts is smaller than the largest K");
    if (c.model.tokens < kQueryFloor * static_cast<std::size_t>(c.dataset.k_histogram.rbegin()->first))
        throw ConfigError("model.tokens is below 8 queries per fragment for the largest K");
    if (c.model.neighbors < 3) throw ConfigError("model.neighbors must be >= 3");
    if (c.train.epochs < 0 || !(c.train.lr >= 0.0)) throw ConfigError("train.epochs and train.lr must be >= 0");
    if (!(c.train.lambda_f >= 0.0) || !(c.train.lambda_a >= 0.0)) throw ConfigError("train loss weights must be >= 0");
    if (c.steps < 1) throw ConfigError("sample.steps must be >= 1");
    c.refine.check();
    if (!(c.pa_threshold > 0.0)) throw ConfigError("eval.pa_threshold must be positive");
}

inline RunConfig from_json(const json& j, RunConfig c = {}) {
    detail::Section root(j, "config");
    root.get("seed", c.seed);
    if (const json* d = root.child("dataset")) {
        detail::Section s(*d, "dataset");
        s.get("shapes", c.dataset.shapes);
        if (const json* h = s.child("k_histogram")) {
            if (!h->is_object()) throw ConfigError("dataset.k_histogram must map K to a weight");
            c.dataset.k_histogram.clear();
            for (auto it = h->begin(); it != h->end(); ++it) {
                int k = 0;
                try {
                    std::size_t used = 0;
                    k = std::stoi(it.key(), &used);
                    if (used != it.key().size()) throw std::invalid_argument("trailing");
                } catch (const std::exception&) {
                    throw ConfigError("dataset.k_histogram: key '" + it.key() + "' is not an integer");
                }
                if (!it->is_number()) throw ConfigError("dataset.k_histogram: weight for K=" + it.key() + " must be a number");
                c.dataset.k_histogram[k] = it->get<double>();
            }
        }
        s.get("train_count", c.dataset.train_count);
        s.get("test_count", c.dataset.test_count);
        s.get("surface_points", c.dataset.surface_points);
        s.get("interior_points", c.dataset.interior_points);
        s.get("eps_f", c.dataset.eps_f);
        s.get("eps_adj", c.dataset.eps_adj);
        s.finish();
    }
    if (const json* m = root.child("model")) {
        detail::Section s(*m, "model");
        if (const json* n = s.child("net")) {
            json merged = flow::model_config_to_json(c.model.net);
            if (!n->is_object()) throw ConfigError("model.net must be a JSON object");
            for (auto it = n->begin(); it != n->end(); ++it) merged[it.key()] = *it;
            c.model.net = flow::model_config_from_json(merged, "model.net");
        }
        s.get("tokens", c.model.tokens);
        s.get("neighbors", c.model.neighbors);
        s.finish();
    }
    if (const json* t = root.child("train")) {
        detail::Section s(*t, "train");
        s.get("epochs", c.train.epochs);
        s.get("lr", c.train.lr);
        s.get("lambda_f", c.train.lambda_f);
        s.get("lambda_a", c.train.lambda_a);
        s.get("weight_decay", c.train.weight_decay);
        s.get("grad_clip", c.train.grad_clip);
        s.get("warmup_steps", c.train.warmup_steps);
        s.get("cosine_decay", c.train.cosine_decay);
        s.get("augment", c.train.augment);
        s.finish();
    }
    if (const json* t = root.child("sample")) {
        detail::Section s(*t, "sample");
        s.get("steps", c.steps);
        s.finish();
    }
    if (const json* r = root.child("refine")) {
        detail::Section s(*r, "refine");
        std::string mode = mode_name(c.refine_mode);
        s.get("mode", mode);
        c.refine_mode = parse_mode(mode);
        s.get("edge_threshold", c.refine.edge_threshold);
        s.get("overlap_tau", c.refine.overlap_tau);
        s.get("resolution", c.refine.resolution);
        s.get("coverage_tolerance", c.refine.coverage_tolerance);
        s.get("coverage_fraction", c.refine.coverage_fraction);
        s.get("min_component", c.refine.min_component);
        s.get("alpha", c.refine.alpha);
        s.get("resample_repeats", c.refine.resample_repeats);
        s.get("fracture_threshold", c.refine.fracture_threshold);
        s.get("bbox_inflation", c.refine.bbox_inflation);
        s.finish();
    }
    if (const json* e = root.child("eval")) {
        detail::Section s(*e, "eval");
        s.get("pa_threshold", c.pa_threshold);
        s.finish();
    }
    if (const json* a = root.child("ablate")) {
        detail::Section s(*a, "ablate");
        s.get("heads", c.ablate.heads);
        s.get("structural_layers", c.ablate.structural_layers);
        s.get("alphas", c.ablate.alphas);
        s.get("freeze", c.ablate.freeze);
        s.get("epochs", c.ablate.epochs);
        s.finish();
    }
    if (const json* p = root.child("paths")) {
        detail::Section s(*p, "paths");
        s.get("data", c.paths.data);
        s.get("run", c.paths.run);
        s.finish();
    }
    root.finish();
    validate(c);
    return c;
}

inline RunConfig load_config(const std::filesystem::path& p) {
    json j;
    try {
        j = io::read_json(p);
    } catch (const ParseError& e) {
        throw ConfigError(e.what());
    }
    return from_json(j);
}

/// Applies one "a.b.c=value" override; the value is parsed as JSON and
/// falls back to a plain string.
inline RunConfig apply_override(const RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
    const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json j = to_json(c);
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) {
            if (!node->is_object() || !node->contains(key)) throw ConfigError("override: unknown key '" + path + "'");
            (*node)[key] = value;
            break;
        }
        if (!node->is_object() || !node->contains(key)) throw ConfigError("override: unknown key '" + path + "'");
        node = &(*node)[key];
        start = dot + 1;
    }
    return from_json(j);
}

/// SARE_KIT_SEED, when set, replaces the configured master seed.
inline void apply_seed_env(RunConfig& c) {
    const char* v = std::getenv(kSeedEnv);
    if (!v || !*v) return;
    try {
        std::size_t used = 0;
        const auto s = std::stoull(v, &used, 0);
        if (used != std::string(v).size()) throw std::invalid_argument("trailing");
        c.seed = s;
    } catch (const std::exception&) {
        throw ConfigError(std::string(kSeedEnv) + " must be an unsigned integer, got '" + v + "'");
    }
}

enum class Stage { Train, Sample, Full };

/// FNV-1a over the canonical (key-sorted, compact) JSON of the fields a stage
/// depends on. Paths never count. Train covers the seed plus the sections
/// that shape the weights; Sample adds the step count.
inline std::string config_hash(const RunConfig& c, Stage stage = Stage::Full) {
    json j = to_json(c);
    j.erase("paths");
    if (stage != Stage::Full)
        for (const char* k : {"refine", "eval", "ablate"}) j.erase(k);
    if (stage == Stage::Train) j.erase("sample");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

inline flow::TrainConfig train_config(const RunConfig& c) {
    flow::TrainConfig t;
    t.epochs = c.train.epochs;
    t.lr = c.train.lr;
    t.weights = {c.train.lambda_f, c.train.lambda_a};
    t.weight_decay = c.train.weight_decay;
    t.grad_clip = c.train.grad_clip;
    t.warmup_steps = c.train.warmup_steps;
    t.cosine_decay = c.train.cosine_decay;
    t.augment = c.train.augment;
    t.seed = derive_seed(c.seed, "train");
    return t;
}

inline FractureOptions fracture_options(const RunConfig& c) {
    FractureOptions o;
    o.surface_points = c.dataset.surface_points;
    o.interior_points = c.dataset.interior_points;
    o.eps_f = c.dataset.eps_f;
    o.eps_adj = c.dataset.eps_adj;
    return o;
}

} // namespace sare::cli
