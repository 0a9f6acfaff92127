#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sare/data/io.hpp"
#include "sare/flow/params.hpp"
#include "sare/flow/train.hpp"

namespace sare::flow {

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'R', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Model hyper-parameters as JSON; unknown keys are rejected on read.
inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"blocks", c.blocks},           {"width", c.width},         {"heads", c.heads},
            {"structural_layer", c.structural_layer}, {"mlp_ratio", c.mlp_ratio}, {"head_hidden", c.head_hidden},
            {"bands", c.bands},             {"x_bands", c.x_bands},     {"time_freqs", c.time_freqs},
            {"max_parts", c.max_parts},     {"token_dim", c.token_dim}, {"fracture_head", c.fracture_head},
            {"adjacency_head", c.adjacency_head}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": model config must be an object");
    ModelConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        try {
            if (k == "blocks") c.blocks = it->get<int>();
            else if (k == "width") c.width = it->get<int>();
            else if (k == "heads") c.heads = it->get<int>();
            else if (k == "structural_layer") c.structural_layer = it->get<int>();
            else if (k == "mlp_ratio") c.mlp_ratio = it->get<int>();
            else if (k == "head_hidden") c.head_hidden = it->get<int>();
            else if (k == "bands") c.bands = it->get<int>();
            else if (k == "x_bands") c.x_bands = it->get<int>();
            else if (k == "time_freqs") c.time_freqs = it->get<int>();
            else if (k == "max_parts") c.max_parts = it->get<int>();
            else if (k == "token_dim") c.token_dim = it->get<int>();
            else if (k == "fracture_head") c.fracture_head = it->get<bool>();
            else if (k == "adjacency_head") c.adjacency_head = it->get<bool>();
            else throw ConfigError(where + ": unknown key '" + k + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where + ": bad value for '" + k + "': " + e.what());
        }
    }
    try {
        c.check();
    } catch (const InvalidArgument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return c;
}

struct CheckpointInfo {
    ModelConfig model;
    std::string config_hash;
    nlohmann::json extra; ///< free-form provenance (seed, epochs, ...)
};

/// Layout: magic[8] | u32 version | u32 header bytes | header JSON |
/// u64 parameter count | f32 parameters | u64 FNV-1a of header and parameters.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Params<T>& p, const CheckpointInfo& info) {
    nlohmann::json header = {{"model", model_config_to_json(p.config())},
                             {"config_hash", info.config_hash},
                             {"parameter_count", p.data().size()},
                             {"extra", info.extra.is_null() ? nlohmann::json::object() : info.extra}};
    const std::string h = header.dump();
    std::vector<float> blob(p.data().begin(), p.data().end());
    std::string body(reinterpret_cast<const char*>(blob.data()), blob.size() * sizeof(float));
    const std::uint64_t checksum = fnv1a64(body, fnv1a64(h));

    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    const auto hlen = static_cast<std::uint32_t>(h.size());
    const auto count = static_cast<std::uint64_t>(blob.size());
    io::write_bytes(os, kCheckpointMagic, sizeof kCheckpointMagic);
    io::write_bytes(os, &kCheckpointVersion, sizeof kCheckpointVersion);
    io::write_bytes(os, &hlen, sizeof hlen);
    io::write_bytes(os, h.data(), h.size());
    io::write_bytes(os, &count, sizeof count);
    io::write_bytes(os, body.data(), body.size());
    io::write_bytes(os, &checksum, sizeof checksum);
    if (!os) throw Error("short write on " + path.string());
}

struct LoadedCheckpoint {
    Params<float> params;
    CheckpointInfo info;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    using PE = ParseError;
    io::ByteReader rd(io::slurp(path), path.string());
    char magic[8];
    rd.read(magic, sizeof magic, "magic");
    if (!std::equal(magic, magic + 8, kCheckpointMagic)) throw PE(PE::Kind::Schema, path.string() + ": not a checkpoint");
    std::uint32_t version = 0, hlen = 0;
    rd.read(&version, sizeof version, "version");
    if (version != kCheckpointVersion)
        throw PE(PE::Kind::Version, path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                                        std::to_string(kCheckpointVersion));
    rd.read(&hlen, sizeof hlen, "header length");
    std::string h(hlen, '\0');
    rd.read(h.data(), hlen, "header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(h);
    } catch (const nlohmann::json::exception& e) {
        throw PE(PE::Kind::Schema, path.string() + ": bad checkpoint header: " + e.what());
    }
    std::uint64_t count = 0;
    rd.read(&count, sizeof count, "parameter count");
    std::string body(count * sizeof(float), '\0');
    rd.read(body.data(), body.size(), "parameters");
    std::uint64_t checksum = 0;
    rd.read(&checksum, sizeof checksum, "checksum");
    if (!rd.at_end()) throw PE(PE::Kind::Schema, path.string() + ": trailing bytes after checksum");
    if (checksum != fnv1a64(body, fnv1a64(h))) throw PE(PE::Kind::Schema, path.string() + ": checksum mismatch");

    LoadedCheckpoint out;
    try {
        out.info.model = model_config_from_json(header.at("model"), path.string());
        out.info.config_hash = header.value("config_hash", std::string{});
        out.info.extra = header.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw PE(PE::Kind::Schema, path.string() + ": incomplete checkpoint header: " + e.what());
    } catch (const ConfigError& e) {
        throw PE(PE::Kind::Schema, e.what());
    }
    out.params = Params<float>(std::make_shared<const Layout>(out.info.model));
    if (out.params.data().size() != count)
        throw PE(PE::Kind::Schema, path.string() + ": parameter count does not match the model config");
    std::memcpy(out.params.data().data(), body.data(), body.size());
    return out;
}

inline constexpr const char* kLossCsvHeader = "epoch,l_rf,l_F,l_A,total";

inline std::string loss_csv_row(const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g", r.epoch, r.l_rf, r.l_f, r.l_a, r.total);
    return buf;
}

/// Appends one epoch, writing the header first when the file is new.
/// A non-empty `config_hash` goes on a leading "# config_hash=" line when the
/// file is started.
inline void append_loss_csv(const std::filesystem::path& path, const EpochRecord& r, const std::string& config_hash = {}) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream os(path, std::ios::app);
    if (!os) throw Error("cannot append to " + path.string());
    if (fresh && !config_hash.empty()) os << "# config_hash=" << config_hash << "\n";
    if (fresh) os << kLossCsvHeader << "\n";
    os << loss_csv_row(r) << "\n";
}

} // namespace sare::flow
