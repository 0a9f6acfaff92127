#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sare/cli/config.hpp"
#include "sare/data/fracture.hpp"
#include "sare/data/io.hpp"
#include "sare/eval/metrics.hpp"
#include "sare/flow/checkpoint.hpp"
#include "sare/flow/train.hpp"
#include "sare/geom/sampling.hpp"
#include "sare/infer/prediction.hpp"
#include "sare/infer/refine.hpp"

namespace sare::cli {

namespace fs = std::filesystem;

inline constexpr const char* kDatasetFormatVersion = "1";

/// A required input is missing or was produced by an incompatible config.
class ArtifactError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Small utilities

struct Logger {
    bool quiet = false;
    void operator()(const std::string& msg) const {
        if (!quiet) std::fprintf(stderr, "[sare] %s\n", msg.c_str());
    }
};

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work items must be
/// independent; the exception of the lowest failing index is rethrown.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline void require_path(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ArtifactError("missing " + what + ": " + p.string());
}

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string dataset_hash(const RunConfig& c) {
    json j = {{"seed", c.seed}, {"dataset", to_json(c)["dataset"]}};
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

inline json run_manifest(const RunConfig& c, const std::string& command) {
    return {{"command", command},
            {"tool_version", kToolVersion},
            {"config_hash", config_hash(c)},
            {"train_hash", config_hash(c, Stage::Train)},
            {"sample_hash", config_hash(c, Stage::Sample)},
            {"dataset_hash", dataset_hash(c)},
            {"seed", c.seed},
            {"config", to_json(c)}};
}

// ---------------------------------------------------------------------------
// Dataset

struct DatasetIndex {
    std::string dataset_hash;
    std::vector<std::string> train;
    std::vector<std::string> test;
};

/// Fragment counts for a split of `count` objects. Counts per K follow the
/// histogram exactly (largest remainder), then the order is shuffled.
inline std::vector<int> k_schedule(const std::map<int, double>& hist, int count, std::uint64_t seed) {
    std::vector<int> ks;
    std::vector<double> w;
    for (auto [k, weight] : hist)
        if (weight > 0.0) {
            ks.push_back(k);
            w.push_back(weight);
        }
    std::vector<int> out;
    if (count <= 0) return out;
    const auto n = allocate_budget(w, static_cast<std::size_t>(count), 0);
    for (std::size_t i = 0; i < ks.size(); ++i) out.insert(out.end(), n[i], ks[i]);
    Rng rng(seed);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

inline int largest_area_fragment(const AssemblySample& s) {
    int best = 0;
    for (int i = 1; i < s.k(); ++i)
        if (s.fragments[i].area > s.fragments[best].area) best = i;
    return best;
}

/// Object `index` of a split. Test objects get a random pose for every
/// fragment except the largest, which keeps its canonical frame like a
/// training anchor.
inline AssemblySample make_object(const RunConfig& c, const std::string& split, int index, int k) {
    const std::string id = split + "_" + [&] {
        char b[16];
        std::snprintf(b, sizeof b, "%04d", index);
        return std::string(b);
    }();
    const std::uint64_t seed = derive_seed(c.seed, "object-" + split, static_cast<std::uint64_t>(index));
    const ShapeId shape = parse_shape(c.dataset.shapes[static_cast<std::size_t>(index) % c.dataset.shapes.size()]);
    AssemblySample s;
    try {
        s = fracture_object(shape, k, seed, fracture_options(c), id);
    } catch (const GenerationFailure& e) {
        throw GenerationFailure("object " + id + ": " + e.what());
    }
    if (split == "test") s = augment(s, largest_area_fragment(s), derive_seed(seed, "pose"));
    return s;
}

inline DatasetIndex read_dataset_index(const fs::path& data) {
    require_path(data / "dataset.json", "dataset index (run gen-data first)");
    const json j = io::read_json(data / "dataset.json");
    const std::string where = (data / "dataset.json").string();
    if (io::field<std::string>(j, "format_version", where) != kDatasetFormatVersion)
        throw ArtifactError(where + ": unsupported dataset format version");
    DatasetIndex d;
    d.dataset_hash = io::field<std::string>(j, "dataset_hash", where);
    d.train = io::field<std::vector<std::string>>(j, "train", where);
    d.test = io::field<std::vector<std::string>>(j, "test", where);
    return d;
}

inline DatasetIndex gen_data(const RunConfig& c, const fs::path& data, int jobs, const Logger& log = {}) {
    validate(c);
    fs::create_directories(data);
    DatasetIndex idx;
    idx.dataset_hash = dataset_hash(c);
    for (const auto& [split, count] : {std::pair<std::string, int>{"train", c.dataset.train_count},
                                       std::pair<std::string, int>{"test", c.dataset.test_count}}) {
        std::vector<std::string> ids(static_cast<std::size_t>(count));
        const auto ks = k_schedule(c.dataset.k_histogram, count, derive_seed(c.seed, "k-schedule-" + split));
        parallel_for(ids.size(), jobs, [&](std::size_t i) {
            auto s = make_object(c, split, static_cast<int>(i), ks[i]);
            write_sample(data / split / s.object_id, s);
            ids[i] = s.object_id;
        });
        (split == "train" ? idx.train : idx.test) = ids;
        log("generated " + std::to_string(count) + " " + split + " objects");
    }
    json j = {{"format_version", kDatasetFormatVersion},
              {"dataset_hash", idx.dataset_hash},
              {"seed", c.seed},
              {"train", idx.train},
              {"test", idx.test},
              {"dataset", to_json(c)["dataset"]}};
    io::write_text(data / "dataset.json", j.dump(2) + "\n");
    return idx;
}

inline std::vector<AssemblySample> load_split(const fs::path& data, const std::vector<std::string>& ids,
                                              const std::string& split, int jobs) {
    std::vector<AssemblySample> out(ids.size());
    parallel_for(ids.size(), jobs, [&](std::size_t i) {
        const fs::path dir = data / split / ids[i];
        require_path(dir / "manifest.json", "object manifest");
        out[i] = read_sample(dir);
    });
    return out;
}

inline void check_dataset(const RunConfig& c, const DatasetIndex& d, bool force) {
    if (!force && d.dataset_hash != dataset_hash(c))
        throw ArtifactError("dataset was generated with a different seed or dataset settings (hash " + d.dataset_hash +
                            ", config expects " + dataset_hash(c) + "); pass --force to use it anyway");
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
    flow::Params<float> params;
    std::vector<flow::EpochRecord> curve;
};

inline std::vector<flow::TrainingItem> prepare_training_items(const RunConfig& c, const std::vector<AssemblySample>& train,
                                                              int jobs) {
    std::vector<flow::TrainingItem> items(train.size());
    parallel_for(train.size(), jobs, [&](std::size_t i) {
        items[i] = flow::prepare_item(train[i], c.model.tokens, derive_seed(c.seed, "train-queries", i), c.model.neighbors);
    });
    return items;
}

inline TrainOutcome train_on(const RunConfig& c, const std::vector<flow::TrainingItem>& items,
                             const flow::StepCallback& on_step = {}, const flow::EpochCallback& on_epoch = {}) {
    TrainOutcome out;
    out.params = flow::init_params<float>(c.model.net, derive_seed(c.seed, "init"));
    out.curve = flow::train(out.params, items, train_config(c), on_step, on_epoch);
    return out;
}

inline TrainOutcome cmd_train(const RunConfig& c, const fs::path& data, const fs::path& run, int jobs, bool force,
                              const Logger& log = {}, const flow::StepCallback& on_step = {}) {
    validate(c);
    const auto idx = read_dataset_index(data);
    check_dataset(c, idx, force);
    if (idx.train.empty()) throw ArtifactError("dataset has no training objects: " + (data / "train").string());
    const auto train = load_split(data, idx.train, "train", jobs);
    const auto items = prepare_training_items(c, train, jobs);
    fs::create_directories(run);
    const fs::path loss = run / "loss.csv";
    fs::remove(loss);
    const auto t0 = std::chrono::steady_clock::now();
    const std::string hash = config_hash(c, Stage::Train);
    auto out = train_on(c, items, on_step, [&](const flow::EpochRecord& r) {
        flow::append_loss_csv(loss, r, hash);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log("epoch " + std::to_string(r.epoch) + " l_rf=" + fmt(r.l_rf) + " l_F=" + fmt(r.l_f) + " l_A=" + fmt(r.l_a) +
            " (" + fmt(secs) + " s)");
    });
    flow::CheckpointInfo info;
    info.model = c.model.net;
    info.config_hash = hash;
    info.extra = {{"seed", c.seed}, {"epochs", c.train.epochs}, {"objects", items.size()}};
    flow::save_checkpoint(run / "model.ckpt", out.params, info);
    json m = run_manifest(c, "train");
    m["epochs"] = json::array();
    for (const auto& r : out.curve)
        m["epochs"].push_back({{"epoch", r.epoch}, {"l_rf", r.l_rf}, {"l_F", r.l_f}, {"l_A", r.l_a}, {"total", r.total}});
    io::write_text(run / "train_manifest.json", m.dump(2) + "\n");
    return out;
}

inline flow::Params<float> load_model(const RunConfig& c, const fs::path& run, bool force) {
    require_path(run / "model.ckpt", "checkpoint (run train first)");
    auto ck = flow::load_checkpoint(run / "model.ckpt");
    if (!force && ck.info.config_hash != config_hash(c, Stage::Train))
        throw ArtifactError("checkpoint " + (run / "model.ckpt").string() + " was trained with config hash " +
                            ck.info.config_hash + " but the current config hashes to " + config_hash(c, Stage::Train) +
                            "; pass --force to use it anyway");
    return std::move(ck.params);
}

// ---------------------------------------------------------------------------
// Sampling and refinement

inline std::uint64_t inference_seed(const RunConfig& c, std::size_t index) {
    return derive_seed(c.seed, "infer", index);
}

inline Prediction predict_object(const RunConfig& c, const flow::Params<float>& params, const AssemblySample& s,
                                 std::uint64_t seed) {
    const auto in = prepare_inference(s, params.config(), c.model.tokens, seed, c.model.neighbors);
    Prediction p;
    p.object_id = s.object_id;
    p.config_hash = config_hash(c, Stage::Sample);
    p.seed = seed;
    p.steps = c.steps;
    p.anchor = in.queries.anchor;
    p.budgets = in.queries.budgets;
    p.result = euler_sample(model_field(params, in.cond), in, c.steps, derive_seed(seed, "sample"));
    return p;
}

inline std::vector<Prediction> sample_split(const RunConfig& c, const flow::Params<float>& params,
                                            const std::vector<AssemblySample>& test, int jobs) {
    std::vector<Prediction> preds(test.size());
    parallel_for(test.size(), jobs, [&](std::size_t i) { preds[i] = predict_object(c, params, test[i], inference_seed(c, i)); });
    return preds;
}

inline std::vector<Prediction> cmd_sample(const RunConfig& c, const fs::path& data, const fs::path& run, int jobs,
                                          bool force, const Logger& log = {}) {
    validate(c);
    const auto idx = read_dataset_index(data);
    check_dataset(c, idx, force);
    const auto params = load_model(c, run, force);
    const auto test = load_split(data, idx.test, "test", jobs);
    auto preds = sample_split(c, params, test, jobs);
    for (const auto& p : preds) write_prediction(run / "predictions" / p.object_id, p);
    io::write_text(run / "sample_manifest.json", run_manifest(c, "sample").dump(2) + "\n");
    log("sampled " + std::to_string(preds.size()) + " objects");
    return preds;
}

struct RefinedObject {
    Prediction prediction;
    RefineReport report;
};

inline RefinedObject refine_object(const RunConfig& c, const flow::Params<float>& params, const AssemblySample& s,
                                   const Prediction& first, RefineMode mode) {
    const auto in = prepare_inference(s, params.config(), c.model.tokens, first.seed, c.model.neighbors);
    if (in.queries.anchor != first.anchor || in.queries.budgets != first.budgets)
        throw ArtifactError("prediction for " + s.object_id + " does not match its regenerated queries");
    // Same noise as the first pass: with nothing verified the output is
    // unchanged, and any delta comes from the blended stable region.
    auto outcome = refine_pipeline(model_field(params, in.cond), s, in, first.result, c.refine, mode, first.steps,
                                   derive_seed(first.seed, "sample"), &s.adjacency);
    RefinedObject r;
    r.prediction = first;
    r.prediction.result = std::move(outcome.result);
    r.report = std::move(outcome.report);
    return r;
}

inline std::vector<RefinedObject> refine_split(const RunConfig& c, const flow::Params<float>& params,
                                               const std::vector<AssemblySample>& test,
                                               const std::vector<Prediction>& first, RefineMode mode, int jobs) {
    std::vector<RefinedObject> out(test.size());
    parallel_for(test.size(), jobs, [&](std::size_t i) { out[i] = refine_object(c, params, test[i], first[i], mode); });
    return out;
}

inline std::vector<Prediction> read_predictions(const fs::path& dir, const std::vector<std::string>& ids,
                                                const std::string& expected_hash, bool force, int jobs) {
    require_path(dir, "predictions directory");
    std::vector<Prediction> out(ids.size());
    parallel_for(ids.size(), jobs, [&](std::size_t i) {
        const fs::path p = dir / ids[i];
        require_path(p / "prediction.json", "prediction");
        out[i] = read_prediction(p);
        if (!force && out[i].config_hash != expected_hash)
            throw ArtifactError((p / "prediction.json").string() + " has config hash " + out[i].config_hash +
                                ", expected " + expected_hash + "; pass --force to pair them anyway");
    });
    return out;
}

inline std::vector<RefinedObject> cmd_refine(const RunConfig& c, const fs::path& data, const fs::path& run, int jobs,
                                             bool force, const Logger& log = {}) {
    validate(c);
    const auto idx = read_dataset_index(data);
    check_dataset(c, idx, force);
    const auto params = load_model(c, run, force);
    const auto test = load_split(data, idx.test, "test", jobs);
    const auto first = read_predictions(run / "predictions", idx.test, config_hash(c, Stage::Sample), force, jobs);
    auto refined = refine_split(c, params, test, first, c.refine_mode, jobs);
    for (const auto& r : refined) {
        const fs::path dir = run / "refined" / r.prediction.object_id;
        write_prediction(dir, r.prediction);
        io::write_text(dir / "refine_report.json",
                       refine_report_to_json(r.report, config_hash(c), r.prediction.object_id).dump(2) + "\n");
    }
    json m = run_manifest(c, "refine");
    m["mode"] = mode_name(c.refine_mode);
    io::write_text(run / "refine_manifest.json", m.dump(2) + "\n");
    std::size_t kept = 0;
    for (const auto& r : refined) kept += r.report.kept.size();
    log("refined " + std::to_string(refined.size()) + " objects (" + mode_name(c.refine_mode) + "), " +
        std::to_string(kept) + " verified edges");
    return refined;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Baselines {
    double random_pose_pa = 0.0;
    double all_edges_precision = 0.0;
};

inline Baselines compute_baselines(const RunConfig& c, const std::vector<AssemblySample>& test,
                                   const std::vector<Prediction>& preds, int jobs) {
    std::vector<double> pa(test.size());
    parallel_for(test.size(), jobs, [&](std::size_t i) {
        const auto t = eval::random_pose_baseline(test[i], derive_seed(c.seed, "baseline", i));
        pa[i] = eval::part_accuracy(test[i], eval::gauge_align(t, test[i].gt_transforms, preds[i].anchor), c.pa_threshold);
    });
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& s : test) {
        const auto r = eval::adjacency_prf(eval::all_edges(s.k()), s.adjacency);
        tp += r.tp;
        fp += r.fp;
        fn += r.fn;
    }
    Baselines b;
    for (double v : pa) b.random_pose_pa += v;
    b.random_pose_pa /= std::max<std::size_t>(1, pa.size());
    b.all_edges_precision = eval::prf_from_counts(tp, fp, fn).precision;
    return b;
}

inline std::vector<eval::ObjectMetrics> evaluate_predictions(const RunConfig& c, const std::vector<AssemblySample>& test,
                                                             const std::vector<Prediction>& preds, int jobs) {
    std::vector<eval::ObjectMetrics> rows(test.size());
    eval::EvalOptions opt;
    opt.pa_threshold = c.pa_threshold;
    opt.edge_threshold = c.refine.edge_threshold;
    parallel_for(test.size(), jobs, [&](std::size_t i) {
        const auto& r = preds[i].result;
        rows[i] = eval::evaluate_object(test[i], r.transforms, preds[i].anchor, r.a_scores, r.degenerate, opt);
    });
    return rows;
}

inline constexpr const char* kMetricsColumns =
    "object_id,K,rmse_rot_deg,rmse_trans,pa,object_cd,adj_precision,adj_recall,adj_f1,adj_empty_prediction,"
    "induced_precision,induced_recall,induced_f1,degenerate";

/// One row per object in dataset order; absent values are empty cells.
inline std::string metrics_csv(const std::vector<eval::ObjectMetrics>& rows, const std::string& hash) {
    std::string out = "# config_hash=" + hash + "\n" + kMetricsColumns + "\n";
    for (const auto& r : rows) {
        out += r.object_id + "," + std::to_string(r.k) + "," + fmt(r.rmse_rot_deg) + "," + fmt(r.rmse_trans) + "," +
               fmt(r.pa) + "," + fmt(r.object_cd) + ",";
        if (r.predicted)
            out += fmt(r.predicted->precision) + "," + fmt(r.predicted->recall) + "," + fmt(r.predicted->f1) + "," +
                   (r.predicted->empty_prediction ? "1" : "0") + ",";
        else
            out += ",,,,";
        out += fmt(r.induced.precision) + "," + fmt(r.induced.recall) + "," + fmt(r.induced.f1) + "," +
               std::to_string(r.degenerate) + "\n";
    }
    return out;
}

inline json prf_json(const std::optional<eval::Prf>& p) {
    if (!p) return nullptr;
    return {{"precision", p->precision}, {"recall", p->recall}, {"f1", p->f1},
            {"tp", p->tp},               {"fp", p->fp},         {"fn", p->fn},
            {"empty_prediction", p->empty_prediction}};
}

inline json aggregate_json(const eval::Aggregate& a) {
    return {{"count", a.count},
            {"pa", a.pa},
            {"rmse_rot_deg", a.rmse_rot_deg},
            {"rmse_trans", a.rmse_trans},
            {"object_cd", a.object_cd},
            {"adjacency_micro", prf_json(a.predicted_micro)},
            {"induced_micro", prf_json(a.induced_micro)}};
}

inline json bin_json(const eval::BinRow& b) {
    json j = {{"bin", b.label}, {"before", aggregate_json(b.before)}};
    if (b.after) j["after"] = aggregate_json(*b.after);
    if (b.delta_pa_pp) j["delta_pa_pp"] = *b.delta_pa_pp;
    return j;
}

inline json report_json(const eval::MetricsReport& r) {
    json j = {{"overall", aggregate_json(r.overall)}, {"k_bins", json::array()}, {"pa_bins", json::array()}};
    if (r.overall_after) {
        j["overall_after"] = aggregate_json(*r.overall_after);
        j["overall_delta_pa_pp"] = 100.0 * (r.overall_after->pa - r.overall.pa);
    }
    for (const auto& b : r.k_bins) j["k_bins"].push_back(bin_json(b));
    for (const auto& b : r.pa_bins) j["pa_bins"].push_back(bin_json(b));
    j["hard_subset"] = r.hard_subset ? bin_json(*r.hard_subset) : json(nullptr);
    return j;
}

struct EvalOutcome {
    std::vector<eval::ObjectMetrics> first;
    std::optional<std::vector<eval::ObjectMetrics>> refined;
    eval::MetricsReport report;
    Baselines baselines;
    json summary;
};

inline EvalOutcome evaluate_run(const RunConfig& c, const std::vector<AssemblySample>& test,
                                const std::vector<Prediction>& first,
                                const std::vector<Prediction>* refined, int jobs) {
    EvalOutcome out;
    out.first = evaluate_predictions(c, test, first, jobs);
    if (refined) out.refined = evaluate_predictions(c, test, *refined, jobs);
    out.report = eval::binned_report(out.first, out.refined ? &*out.refined : nullptr);
    out.baselines = compute_baselines(c, test, first, jobs);
    out.summary = run_manifest(c, "eval");
    out.summary["objects"] = test.size();
    out.summary["first_pass"] = report_json(out.report);
    out.summary["baselines"] = {{"random_pose_pa", out.baselines.random_pose_pa},
                                {"all_edges_precision", out.baselines.all_edges_precision}};
    std::size_t empty = 0;
    for (const auto& r : out.first) empty += r.predicted && r.predicted->empty_prediction;
    out.summary["empty_prediction_objects"] = empty;
    return out;
}

inline EvalOutcome cmd_eval(const RunConfig& c, const fs::path& data, const fs::path& run, int jobs, bool force,
                            const Logger& log = {}) {
    validate(c);
    const auto idx = read_dataset_index(data);
    check_dataset(c, idx, force);
    require_path(run / "predictions", "predictions directory (run sample first)");
    const auto first = read_predictions(run / "predictions", idx.test, config_hash(c, Stage::Sample), force, jobs);
    std::optional<std::vector<Prediction>> refined;
    if (fs::exists(run / "refined")) {
        refined = read_predictions(run / "refined", idx.test, config_hash(c, Stage::Sample), force, jobs);
        for (std::size_t i = 0; i < first.size(); ++i)
            if (!force && (*refined)[i].config_hash != first[i].config_hash)
                throw ArtifactError("refined and first-pass predictions for " + first[i].object_id +
                                    " come from different configs; pass --force to pair them");
    }
    const auto test = load_split(data, idx.test, "test", jobs);
    auto out = evaluate_run(c, test, first, refined ? &*refined : nullptr, jobs);
    const std::string hash = config_hash(c);
    io::write_text(run / "metrics.csv", metrics_csv(out.first, hash));
    if (out.refined) io::write_text(run / "metrics_refined.csv", metrics_csv(*out.refined, hash));
    io::write_text(run / "summary.json", out.summary.dump(2) + "\n");
    log("PA " + fmt(100.0 * out.report.overall.pa) + "% (random-pose baseline " +
        fmt(100.0 * out.baselines.random_pose_pa) + "%)" +
        (out.report.overall_after ? ", after refine " + fmt(100.0 * out.report.overall_after->pa) + "%" : ""));
    return out;
}

// ---------------------------------------------------------------------------
// Ablation sweep

struct AblationRow {
    bool heads = true;
    int structural_layer = 4;
    std::string refine; ///< "none", "repaint(alpha=...)", "freeze"
    double pa = 0.0;
    std::optional<double> adj_precision;
    double rmse_rot_deg = 0.0;
    double rmse_trans = 0.0;
    double delta_pa_pp = 0.0;
    double delta_rmse_rot_deg = 0.0;
    double delta_rmse_trans = 0.0;
};

inline std::vector<AblationRow> cmd_ablate(const RunConfig& c, const fs::path& data, const fs::path& run, int jobs,
                                           bool force, const Logger& log = {}) {
    validate(c);
    std::vector<int> layers;
    for (int l : c.ablate.structural_layers)
        if (l >= 1 && l <= c.model.net.blocks) layers.push_back(l);
    if (c.ablate.heads.empty() || layers.empty())
        throw ConfigError("ablate: the sweep is empty (need at least one head setting and one layer in [1, blocks])");
    const auto idx = read_dataset_index(data);
    check_dataset(c, idx, force);
    const auto train = load_split(data, idx.train, "train", jobs);
    const auto test = load_split(data, idx.test, "test", jobs);
    if (train.empty() || test.empty()) throw ArtifactError("ablate needs both train and test objects in " + data.string());

    std::vector<AblationRow> rows;
    for (bool heads : c.ablate.heads)
        for (int layer : layers) {
            if (!heads && layer != layers.front()) continue; // the layer is irrelevant without heads
            RunConfig v = c;
            v.model.net.fracture_head = v.model.net.adjacency_head = heads;
            v.model.net.structural_layer = layer;
            if (!heads) v.train.lambda_f = v.train.lambda_a = 0.0;
            if (c.ablate.epochs > 0) v.train.epochs = c.ablate.epochs;
            log("ablate: training heads=" + std::string(heads ? "on" : "off") + " layer=" + std::to_string(layer));
            const auto items = prepare_training_items(v, train, jobs);
            const auto model = train_on(v, items);
            const auto first = sample_split(v, model.params, test, jobs);
            const auto base = evaluate_run(v, test, first, nullptr, jobs).report.overall;

            auto add = [&](const std::string& name, const eval::Aggregate& a) {
                AblationRow r;
                r.heads = heads;
                r.structural_layer = layer;
                r.refine = name;
                r.pa = a.pa;
                if (a.predicted_micro) r.adj_precision = a.predicted_micro->precision;
                r.rmse_rot_deg = a.rmse_rot_deg;
                r.rmse_trans = a.rmse_trans;
                r.delta_pa_pp = 100.0 * (a.pa - base.pa);
                r.delta_rmse_rot_deg = a.rmse_rot_deg - base.rmse_rot_deg;
                r.delta_rmse_trans = a.rmse_trans - base.rmse_trans;
                rows.push_back(r);
            };
            add("none", base);
            std::vector<std::pair<std::string, RunConfig>> variants;
            for (double alpha : c.ablate.alphas) {
                RunConfig rv = v;
                rv.refine.alpha = alpha;
                rv.refine_mode = RefineMode::Repaint;
                variants.emplace_back("repaint(alpha=" + fmt(alpha) + ")", rv);
            }
            if (c.ablate.freeze) {
                RunConfig rv = v;
                rv.refine_mode = RefineMode::Freeze;
                variants.emplace_back("freeze", rv);
            }
            for (const auto& [name, rv] : variants) {
                const auto refined = refine_split(rv, model.params, test, first, rv.refine_mode, jobs);
                std::vector<Prediction> preds;
                for (const auto& r : refined) preds.push_back(r.prediction);
                add(name, evaluate_run(rv, test, preds, nullptr, jobs).report.overall);
            }
        }

    fs::create_directories(run);
    std::string csv = "# config_hash=" + config_hash(c) + "\n" +
                      "heads,structural_layer,refine,pa,adj_precision,rmse_rot_deg,rmse_trans,delta_pa_pp,"
                      "delta_rmse_rot_deg,delta_rmse_trans\n";
    json arr = json::array();
    for (const auto& r : rows) {
        csv += std::string(r.heads ? "on" : "off") + "," + std::to_string(r.structural_layer) + "," + r.refine + "," +
               fmt(r.pa) + "," + (r.adj_precision ? fmt(*r.adj_precision) : "") + "," + fmt(r.rmse_rot_deg) + "," +
               fmt(r.rmse_trans) + "," + fmt(r.delta_pa_pp) + "," + fmt(r.delta_rmse_rot_deg) + "," +
               fmt(r.delta_rmse_trans) + "\n";
        arr.push_back({{"heads", r.heads},
                       {"structural_layer", r.structural_layer},
                       {"refine", r.refine},
                       {"pa", r.pa},
                       {"adj_precision", r.adj_precision ? json(*r.adj_precision) : json(nullptr)},
                       {"rmse_rot_deg", r.rmse_rot_deg},
                       {"rmse_trans", r.rmse_trans},
                       {"delta_pa_pp", r.delta_pa_pp},
                       {"delta_rmse_rot_deg", r.delta_rmse_rot_deg},
                       {"delta_rmse_trans", r.delta_rmse_trans}});
    }
    io::write_text(run / "ablate.csv", csv);
    json j = run_manifest(c, "ablate");
    j["rows"] = arr;
    io::write_text(run / "ablate.json", j.dump(2) + "\n");
    return rows;
}

// ---------------------------------------------------------------------------
// Human-readable report

inline std::string pct(const json& v) { return v.is_number() ? fmt(std::round(1000.0 * v.get<double>()) / 10.0) : "--"; }

inline std::string cmd_report(const fs::path& run) {
    require_path(run / "summary.json", "evaluation summary (run eval first)");
    const json s = io::read_json(run / "summary.json");
    std::string out = "# Run report\n\nconfig hash `" + s.value("config_hash", std::string{}) + "`, seed " +
                      std::to_string(s.value("seed", std::uint64_t{0})) + ", " +
                      std::to_string(s.value("objects", 0)) + " test objects\n\n";
    const json& fp = s.at("first_pass");
    const bool paired = fp.contains("overall_after");
    out += "| subset | n | PA % | rot RMSE deg | trans RMSE | adj. precision %" +
           std::string(paired ? " | PA after % | delta pp" : "") + " |\n";
    out += "|---|---|---|---|---|---" + std::string(paired ? "|---|---" : "") + "|\n";
    auto line = [&](const std::string& name, const json& b, const json* after, const json* delta) {
        const json& adj = b.at("adjacency_micro");
        out += "| " + name + " | " + std::to_string(b.at("count").get<int>()) + " | " + pct(b.at("pa")) + " | " +
               fmt(b.at("rmse_rot_deg").get<double>()) + " | " + fmt(b.at("rmse_trans").get<double>()) + " | " +
               (adj.is_null() ? "--" : pct(adj.at("precision")));
        if (paired) out += " | " + (after ? pct(after->at("pa")) : "--") + " | " + (delta ? fmt(delta->get<double>()) : "--");
        out += " |\n";
    };
    const json* oa = paired ? &fp.at("overall_after") : nullptr;
    const json* od = paired ? &fp.at("overall_delta_pa_pp") : nullptr;
    line("all", fp.at("overall"), oa, od);
    for (const auto& b : fp.at("k_bins"))
        line("K " + b.at("bin").get<std::string>(), b.at("before"), b.contains("after") ? &b.at("after") : nullptr,
             b.contains("delta_pa_pp") ? &b.at("delta_pa_pp") : nullptr);
    for (const auto& b : fp.at("pa_bins"))
        line("PA " + b.at("bin").get<std::string>(), b.at("before"), b.contains("after") ? &b.at("after") : nullptr,
             b.contains("delta_pa_pp") ? &b.at("delta_pa_pp") : nullptr);
    if (!fp.at("hard_subset").is_null()) {
        const json& h = fp.at("hard_subset");
        line("PA <= 95", h.at("before"), h.contains("after") ? &h.at("after") : nullptr,
             h.contains("delta_pa_pp") ? &h.at("delta_pa_pp") : nullptr);
    }
    const json& b = s.at("baselines");
    out += "\nrandom-pose baseline PA " + pct(b.at("random_pose_pa")) + " %, all-edges precision " +
           pct(b.at("all_edges_precision")) + " %\n";
    if (fs::exists(run / "ablate.json")) {
        const json a = io::read_json(run / "ablate.json");
        out += "\n## Ablation\n\n| heads | layer | refine | PA % | adj. precision % | delta PA pp |\n|---|---|---|---|---|---|\n";
        for (const auto& r : a.at("rows"))
            out += "| " + std::string(r.at("heads").get<bool>() ? "on" : "off") + " | " +
                   std::to_string(r.at("structural_layer").get<int>()) + " | " + r.at("refine").get<std::string>() +
                   " | " + pct(r.at("pa")) + " | " + pct(r.at("adj_precision")) + " | " +
                   fmt(r.at("delta_pa_pp").get<double>()) + " |\n";
    }
    io::write_text(run / "report.md", out);
    return out;
}

} // namespace sare::cli
