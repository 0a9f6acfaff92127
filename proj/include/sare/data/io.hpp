#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sare/data/fracture.hpp"
#include "sare/data/sample.hpp"
#include "sare/geom/metrics.hpp"

namespace sare {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kSampleFormatVersion = "1";

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace io {

inline void write_bytes(std::ofstream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void write_f32(std::ofstream& os, double v) {
    auto f = static_cast<float>(v);
    write_bytes(os, &f, sizeof f);
}

/// Sequential reader over an in-memory file that reports which section ran short.
class ByteReader {
public:
    ByteReader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    void read(void* dst, std::size_t n, const char* section) {
        if (pos_ + n > bytes_.size())
            throw ParseError(ParseError::Kind::Truncated,
                             path_ + ": truncated file, missing section '" + section + "'");
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }

    bool at_end() const noexcept { return pos_ == bytes_.size(); }

private:
    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw ParseError(ParseError::Kind::Io, "cannot open " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline json read_json(const fs::path& p) {
    std::string text = slurp(p);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(ParseError::Kind::Schema, p.string() + ": invalid JSON: " + e.what());
    }
}

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error("cannot write " + p.string());
    os << text;
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key))
        throw ParseError(ParseError::Kind::Schema, where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ParseError(ParseError::Kind::Schema, where + ": bad field '" + key + "': " + e.what());
    }
}

inline json transform_to_json(const RigidTransform& t) {
    json rows = json::array();
    for (int r = 0; r < 3; ++r) rows.push_back({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)});
    return {{"rotation", rows}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

inline RigidTransform transform_from_json(const json& j, const std::string& where) {
    auto rows = field<std::vector<std::vector<double>>>(j, "rotation", where);
    auto tr = field<std::vector<double>>(j, "translation", where);
    if (rows.size() != 3 || tr.size() != 3)
        throw ParseError(ParseError::Kind::Schema, where + ": transform must be 3x3 + 3");
    RigidTransform t;
    for (int r = 0; r < 3; ++r) {
        if (rows[r].size() != 3) throw ParseError(ParseError::Kind::Schema, where + ": rotation row size");
        for (int c = 0; c < 3; ++c) t.rotation(r, c) = rows[r][c];
        t.translation[r] = tr[r];
    }
    return t;
}

} // namespace io

/// Object directory: manifest.json plus frag_<i>.bin holding
/// count:u32, count*3 f32 points, count*3 f32 normals, count u8 labels.
inline void write_sample(const fs::path& dir, const AssemblySample& s) {
    validate(s);
    fs::create_directories(dir);
    json frags = json::array();
    for (const auto& f : s.fragments) {
        std::string file = "frag_" + std::to_string(f.id) + ".bin";
        frags.push_back({{"id", f.id}, {"area", f.area}, {"count", f.cloud.size()}, {"file", file}});
        std::ofstream os(dir / file, std::ios::binary);
        if (!os) throw Error("cannot write " + (dir / file).string());
        auto count = static_cast<std::uint32_t>(f.cloud.size());
        io::write_bytes(os, &count, sizeof count);
        for (const auto& p : f.cloud.points)
            for (int a = 0; a < 3; ++a) io::write_f32(os, p[a]);
        for (const auto& n : f.cloud.normals)
            for (int a = 0; a < 3; ++a) io::write_f32(os, n[a]);
        io::write_bytes(os, s.fracture_labels[f.id].data(), s.fracture_labels[f.id].size());
    }
    json edges = json::array();
    for (int i = 0; i < s.k(); ++i)
        for (int j = 0; j < s.k(); ++j)
            if (s.adjacency(i, j)) edges.push_back({i, j});
    json transforms = json::array();
    for (const auto& t : s.gt_transforms) transforms.push_back(io::transform_to_json(t));
    json m = {{"format_version", kSampleFormatVersion},
              {"object_id", s.object_id},
              {"shape", s.shape},
              {"K", s.k()},
              {"seeds", {{"object", s.seed}}},
              {"eps_f", s.eps_f},
              {"eps_adj", s.eps_adj},
              {"fragments", frags},
              {"adjacency_edges", edges},
              {"gt_transforms", transforms}};
    io::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline AssemblySample read_sample(const fs::path& dir) {
    using io::field;
    const fs::path mpath = dir / "manifest.json";
    const json m = io::read_json(mpath);
    const std::string where = mpath.string();
    auto version = field<std::string>(m, "format_version", where);
    if (version != kSampleFormatVersion)
        throw ParseError(ParseError::Kind::Version,
                         where + ": format version '" + version + "', expected '" + kSampleFormatVersion + "'");

    AssemblySample s;
    s.object_id = field<std::string>(m, "object_id", where);
    s.shape = m.value("shape", std::string{});
    const int k = field<int>(m, "K", where);
    s.seed = field<json>(m, "seeds", where).value("object", std::uint64_t{0});
    s.eps_f = field<double>(m, "eps_f", where);
    s.eps_adj = field<double>(m, "eps_adj", where);
    auto frags = field<json>(m, "fragments", where);
    auto transforms = field<json>(m, "gt_transforms", where);
    if (k < 2 || k > kMaxFragments || static_cast<int>(frags.size()) != k || static_cast<int>(transforms.size()) != k)
        throw ParseError(ParseError::Kind::Schema, where + ": K disagrees with fragment/transform lists");

    for (int i = 0; i < k; ++i) {
        const json& fj = frags[i];
        Fragment f;
        f.id = field<int>(fj, "id", where);
        f.area = field<double>(fj, "area", where);
        const auto expected = field<std::uint32_t>(fj, "count", where);
        const fs::path fpath = dir / field<std::string>(fj, "file", where);
        io::ByteReader rd(io::slurp(fpath), fpath.string());
        std::uint32_t count = 0;
        rd.read(&count, sizeof count, "count");
        if (count != expected)
            throw ParseError(ParseError::Kind::Schema, fpath.string() + ": point count disagrees with manifest");
        std::vector<float> buf(3 * static_cast<std::size_t>(count));
        rd.read(buf.data(), buf.size() * sizeof(float), "points");
        f.cloud.points.resize(count);
        for (std::uint32_t p = 0; p < count; ++p) f.cloud.points[p] = Vec3(buf[3 * p], buf[3 * p + 1], buf[3 * p + 2]);
        rd.read(buf.data(), buf.size() * sizeof(float), "normals");
        f.cloud.normals.resize(count);
        for (std::uint32_t p = 0; p < count; ++p)
            f.cloud.normals[p] = Vec3(buf[3 * p], buf[3 * p + 1], buf[3 * p + 2]);
        std::vector<std::uint8_t> labels(count);
        rd.read(labels.data(), labels.size(), "labels");
        if (!rd.at_end()) throw ParseError(ParseError::Kind::Schema, fpath.string() + ": trailing bytes");
        s.fragments.push_back(std::move(f));
        s.fracture_labels.push_back(std::move(labels));
        s.gt_transforms.push_back(io::transform_from_json(transforms[i], where));
    }

    s.adjacency = AdjacencyMatrix::Zero(k, k);
    for (const auto& e : field<json>(m, "adjacency_edges", where)) {
        if (!e.is_array() || e.size() != 2)
            throw ParseError(ParseError::Kind::Schema, where + ": adjacency edge must be [i, j]");
        int i = e[0].get<int>(), j = e[1].get<int>();
        if (i < 0 || j < 0 || i >= k || j >= k)
            throw ValidationError(where + ": adjacency edge index out of range");
        s.adjacency(i, j) = 1;
    }
    validate(s);
    return s;
}

/// Imports `frag_*.xyz` files (one "x y z [nx ny nz]" per line) holding
/// fragments in assembled pose. Normals are estimated when absent; fracture
/// labels and adjacency come from label_structure.
inline AssemblySample import_xyz(const fs::path& dir, std::string object_id, double eps_f = 0.01,
                                 double eps_adj = 0.02, std::size_t normal_neighbors = 16) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".xyz") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.size() < 2) throw ParseError(ParseError::Kind::Schema, dir.string() + ": need at least two .xyz files");

    std::vector<PointCloud> world;
    for (const auto& f : files) {
        std::istringstream in(io::slurp(f));
        PointCloud c;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::istringstream ls(line);
            std::vector<double> v;
            for (double x; ls >> x;) v.push_back(x);
            if (v.size() != 3 && v.size() != 6)
                throw ParseError(ParseError::Kind::Schema, f.string() + ": expected 3 or 6 numbers per line");
            c.points.emplace_back(v[0], v[1], v[2]);
            if (v.size() == 6) c.normals.push_back(Vec3(v[3], v[4], v[5]).normalized());
        }
        if (!c.normals.empty() && c.normals.size() != c.points.size())
            throw ParseError(ParseError::Kind::Schema, f.string() + ": normals on some lines only");
        if (c.normals.empty()) c = estimate_normals(c, std::min(normal_neighbors, c.size()));
        world.push_back(std::move(c));
    }

    AssemblySample s;
    s.object_id = std::move(object_id);
    s.shape = "imported";
    s.eps_f = eps_f;
    s.eps_adj = eps_adj;
    for (std::size_t i = 0; i < world.size(); ++i) {
        const auto& w = world[i];
        KdTree tree(w.points);
        double spacing = 0.0;
        for (const auto& p : w.points) spacing += std::sqrt(tree.knn(p, 2).back().sq_dist);
        spacing /= static_cast<double>(w.size());
        Fragment f;
        f.id = static_cast<int>(i);
        // mean nearest-neighbour spacing of a uniform planar sample is 0.5/sqrt(density)
        f.area = std::max(4.0 * spacing * spacing * static_cast<double>(w.size()), 1e-12);
        const Vec3 c = w.centroid();
        for (const auto& p : w.points) f.cloud.points.push_back(p - c);
        f.cloud.normals = w.normals;
        s.fragments.push_back(std::move(f));
        s.gt_transforms.push_back({Mat3::Identity(), c});
    }
    relabel(s);
    return s;
}

} // namespace sare
