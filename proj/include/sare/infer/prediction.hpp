#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sare/data/io.hpp"
#include "sare/infer/refine.hpp"

namespace sare {

inline constexpr const char* kPredictionFormatVersion = "1";

/// Sampler output for one object plus what downstream stages need to rebuild
/// its inputs deterministically.
struct Prediction {
    std::string object_id;
    std::string config_hash;
    std::uint64_t seed = 0; ///< per-object inference seed
    int steps = kDefaultSteps;
    int anchor = 0;
    std::vector<std::size_t> budgets;
    SampleResult result;
};

namespace io {

inline void write_matrix_f32(const fs::path& p, const MatT<double>& m) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error("cannot write " + p.string());
    const auto rows = static_cast<std::uint32_t>(m.rows()), cols = static_cast<std::uint32_t>(m.cols());
    write_bytes(os, &rows, sizeof rows);
    write_bytes(os, &cols, sizeof cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) write_f32(os, m(r, c));
}

inline MatT<double> read_matrix_f32(const fs::path& p) {
    ByteReader rd(slurp(p), p.string());
    std::uint32_t rows = 0, cols = 0;
    rd.read(&rows, sizeof rows, "rows");
    rd.read(&cols, sizeof cols, "cols");
    std::vector<float> buf(static_cast<std::size_t>(rows) * cols);
    rd.read(buf.data(), buf.size() * sizeof(float), "values");
    if (!rd.at_end()) throw ParseError(ParseError::Kind::Schema, p.string() + ": trailing bytes");
    MatT<double> m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = buf[static_cast<std::size_t>(r) * cols + c];
    return m;
}

inline json matrix_to_json(const MatT<double>& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

inline MatT<double> matrix_from_json(const json& j, const std::string& where) {
    if (!j.is_array()) throw ParseError(ParseError::Kind::Schema, where + ": matrix must be an array of rows");
    const auto n = static_cast<Eigen::Index>(j.size());
    MatT<double> m(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
        if (!j[r].is_array() || static_cast<Eigen::Index>(j[r].size()) != n)
            throw ParseError(ParseError::Kind::Schema, where + ": matrix must be square");
        for (Eigen::Index c = 0; c < n; ++c) m(r, c) = j[r][c].get<double>();
    }
    return m;
}

} // namespace io

/// `dir` holds prediction.json, x0_hat.bin, eps.bin and (when the fracture
/// head is on) f_probs.bin. Binary blobs: u32 rows, u32 cols, f32 row-major.
/// The JSON keeps transforms at full precision; blobs are float32.
inline void write_prediction(const fs::path& dir, const Prediction& p) {
    fs::create_directories(dir);
    json transforms = json::array();
    for (const auto& t : p.result.transforms) transforms.push_back(io::transform_to_json(t));
    json j = {{"format_version", kPredictionFormatVersion},
              {"config_hash", p.config_hash},
              {"object_id", p.object_id},
              {"K", p.result.transforms.size()},
              {"M", p.result.x0_hat.rows()},
              {"seed", p.seed},
              {"steps", p.steps},
              {"anchor", p.anchor},
              {"budgets", p.budgets},
              {"transforms", transforms},
              {"degenerate", p.result.degenerate},
              {"a_scores", p.result.a_scores.size() ? io::matrix_to_json(p.result.a_scores) : json(nullptr)},
              {"files", {{"x0_hat", "x0_hat.bin"}, {"eps", "eps.bin"}}}};
    io::write_matrix_f32(dir / "x0_hat.bin", p.result.x0_hat);
    io::write_matrix_f32(dir / "eps.bin", p.result.eps);
    if (p.result.f_probs.size()) {
        io::write_matrix_f32(dir / "f_probs.bin", MatT<double>(p.result.f_probs));
        j["files"]["f_probs"] = "f_probs.bin";
    }
    io::write_text(dir / "prediction.json", j.dump(2) + "\n");
}

inline Prediction read_prediction(const fs::path& dir) {
    using io::field;
    const fs::path jp = dir / "prediction.json";
    const json j = io::read_json(jp);
    const std::string where = jp.string();
    const auto version = field<std::string>(j, "format_version", where);
    if (version != kPredictionFormatVersion)
        throw ParseError(ParseError::Kind::Version,
                         where + ": prediction format '" + version + "', expected '" + kPredictionFormatVersion + "'");
    Prediction p;
    p.object_id = field<std::string>(j, "object_id", where);
    p.config_hash = field<std::string>(j, "config_hash", where);
    p.seed = field<std::uint64_t>(j, "seed", where);
    p.steps = field<int>(j, "steps", where);
    p.anchor = field<int>(j, "anchor", where);
    p.budgets = field<std::vector<std::size_t>>(j, "budgets", where);
    for (const auto& t : field<json>(j, "transforms", where)) p.result.transforms.push_back(io::transform_from_json(t, where));
    p.result.degenerate = field<std::vector<std::uint8_t>>(j, "degenerate", where);
    const int k = field<int>(j, "K", where);
    if (static_cast<int>(p.result.transforms.size()) != k || static_cast<int>(p.result.degenerate.size()) != k ||
        static_cast<int>(p.budgets.size()) != k)
        throw ParseError(ParseError::Kind::Schema, where + ": K disagrees with the per-fragment lists");
    if (!j.at("a_scores").is_null()) p.result.a_scores = io::matrix_from_json(j.at("a_scores"), where);
    p.result.x0_hat = io::read_matrix_f32(dir / "x0_hat.bin");
    p.result.eps = io::read_matrix_f32(dir / "eps.bin");
    if (fs::exists(dir / "f_probs.bin")) p.result.f_probs = io::read_matrix_f32(dir / "f_probs.bin").col(0);
    if (p.result.x0_hat.rows() != field<Eigen::Index>(j, "M", where) || p.result.x0_hat.cols() != 3)
        throw ParseError(ParseError::Kind::Schema, where + ": x0_hat shape disagrees with M");
    return p;
}

inline json refine_report_to_json(const RefineReport& r, const std::string& config_hash, const std::string& object_id) {
    json cand = json::array();
    for (std::size_t i = 0; i < r.candidates.size(); ++i)
        cand.push_back({{"edge", {r.candidates[i].first, r.candidates[i].second}}, {"score", r.candidate_scores[i]}});
    json checks = json::array();
    for (const auto& c : r.checks)
        checks.push_back({{"edge", {c.edge.first, c.edge.second}},
                          {"overlap", c.overlap},
                          {"coverage_ij", c.cover_ij},
                          {"coverage_ji", c.cover_ji},
                          {"kept", c.kept},
                          {"reason", c.reason}});
    json kept = json::array();
    for (auto [i, j] : r.kept) kept.push_back({i, j});
    const auto& c = r.config;
    return {{"format_version", kPredictionFormatVersion},
            {"config_hash", config_hash},
            {"object_id", object_id},
            {"mode", mode_name(r.mode)},
            {"candidates", cand},
            {"checks", checks},
            {"kept", kept},
            {"components", r.components},
            {"mask_tokens", r.mask_tokens},
            {"resample_schedule",
             "each step on the first half of the grid is repeated resample_repeats times (stand-in schedule)"},
            {"config",
             {{"edge_threshold", c.edge_threshold},
              {"overlap_tau", c.overlap_tau},
              {"resolution", c.resolution},
              {"coverage_tolerance", c.coverage_tolerance},
              {"coverage_fraction", c.coverage_fraction},
              {"min_component", c.min_component},
              {"alpha", c.alpha},
              {"resample_repeats", c.resample_repeats},
              {"fracture_threshold", c.fracture_threshold},
              {"bbox_inflation", c.bbox_inflation}}}};
}

} // namespace sare
