#include "tmerge/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "tmerge/error.hpp"

namespace tmerge {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

const TensorMeta* CheckpointManifest::find(const std::string& name) const {
    auto it = std::lower_bound(tensors.begin(), tensors.end(), name,
                               [](const TensorMeta& m, const std::string& n) { return m.name < n; });
    if (it == tensors.end() || it->name != name) return nullptr;
    return &*it;
}

std::filesystem::path CheckpointManifest::shard_file(int shard_id) const {
    if (shard_id < 0 || static_cast<std::size_t>(shard_id) >= shard_paths.size()) {
        throw user_error("shard id out of range: " + std::to_string(shard_id));
    }
    return root / shard_paths[static_cast<std::size_t>(shard_id)];
}

namespace {

void validate_manifest(CheckpointManifest& m) {
    std::sort(m.tensors.begin(), m.tensors.end(),
              [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
    for (std::size_t i = 1; i < m.tensors.size(); ++i) {
        if (m.tensors[i].name == m.tensors[i - 1].name) {
            throw user_error("duplicate tensor name: " + m.tensors[i].name);
        }
    }

    m.total_params = 0;
    for (const TensorMeta& t : m.tensors) {
        m.total_params += t.element_count();
        if (t.shard_id < 0 || static_cast<std::size_t>(t.shard_id) >= m.shard_paths.size()) {
            throw user_error("tensor " + t.name + " references shard " +
                             std::to_string(t.shard_id) + " with no shard path");
        }
    }
    for (const std::string& rel : m.shard_paths) {
        fs::path p = m.root / rel;
        if (!fs::exists(p)) throw user_error("shard path missing: " + p.string());
    }

    // Per-shard byte ranges must be disjoint (empty ranges never overlap).
    std::map<int, std::vector<std::pair<std::uint64_t, std::uint64_t>>> ranges;
    for (const TensorMeta& t : m.tensors) {
        if (t.byte_length > 0) ranges[t.shard_id].push_back({t.byte_offset, t.byte_length});
    }
    for (auto& [shard, rs] : ranges) {
        std::sort(rs.begin(), rs.end());
        for (std::size_t i = 1; i < rs.size(); ++i) {
            if (rs[i - 1].first + rs[i - 1].second > rs[i].first) {
                throw user_error("overlapping byte ranges in shard " + std::to_string(shard));
            }
        }
    }
}

CheckpointManifest open_manifest_dir(const fs::path& dir) {
    fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw user_error("missing manifest: " + manifest_path.string());

    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const std::exception& e) {
        throw user_error("invalid manifest JSON in " + manifest_path.string() + ": " + e.what());
    }

    CheckpointManifest m;
    m.root = dir;
    try {
        m.model_id = j.at("model_id").get<std::string>();
        for (const auto& jt : j.at("tensors")) {
            TensorMeta t;
            t.name = jt.at("name").get<std::string>();
            t.dtype = dtype_from_tag(jt.at("dtype").get<std::string>());
            t.shape = jt.at("shape").get<std::vector<std::int64_t>>();
            t.shard_id = jt.at("shard").get<int>();
            t.byte_offset = jt.at("offset").get<std::uint64_t>();
            t.byte_length = jt.at("length").get<std::uint64_t>();
            for (std::int64_t d : t.shape) {
                if (d < 0) throw user_error("negative extent in tensor " + t.name);
            }
            m.tensors.push_back(std::move(t));
        }
        m.shard_paths = j.at("shards").get<std::vector<std::string>>();
    } catch (const user_error&) {
        throw;
    } catch (const std::exception& e) {
        throw user_error("malformed manifest " + manifest_path.string() + ": " + e.what());
    }

    validate_manifest(m);
    return m;
}

CheckpointManifest open_safetensors(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw user_error("missing manifest: " + file.string());

    std::uint64_t header_len = 0;
    unsigned char lenbuf[8];
    if (!in.read(reinterpret_cast<char*>(lenbuf), 8)) {
        throw user_error("truncated safetensors header in " + file.string());
    }
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | lenbuf[i];

    std::string header(header_len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
        throw user_error("truncated safetensors header in " + file.string());
    }

    ordered_json j;
    try {
        j = ordered_json::parse(header);
    } catch (const std::exception& e) {
        throw user_error("invalid safetensors header in " + file.string() + ": " + e.what());
    }

    CheckpointManifest m;
    m.root = file.parent_path();
    m.shard_paths = {file.filename().string()};
    m.model_id = file.stem().string();

    const std::uint64_t data_base = 8 + header_len;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "__metadata__") {
            if (it.value().is_object() && it.value().contains("model_id")) {
                m.model_id = it.value()["model_id"].get<std::string>();
            }
            continue;
        }
        const auto& jt = it.value();
        TensorMeta t;
        t.name = it.key();
        t.dtype = dtype_from_safetensors(jt.at("dtype").get<std::string>());
        t.shape = jt.at("shape").get<std::vector<std::int64_t>>();
        auto offs = jt.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offs.size() != 2 || offs[1] < offs[0]) {
            throw user_error("bad data_offsets for tensor " + t.name + " in " + file.string());
        }
        t.shard_id = 0;
        t.byte_offset = data_base + offs[0];
        t.byte_length = offs[1] - offs[0];
        m.tensors.push_back(std::move(t));
    }

    validate_manifest(m);
    return m;
}

}  // namespace

CheckpointManifest open_checkpoint(const std::filesystem::path& path) {
    if (fs::is_directory(path)) return open_manifest_dir(path);
    if (fs::is_regular_file(path)) return open_safetensors(path);
    throw user_error("missing manifest: " + path.string());
}

std::string manifest_to_json(const CheckpointManifest& manifest) {
    ordered_json j;
    j["model_id"] = manifest.model_id;
    j["tensors"] = ordered_json::array();
    for (const TensorMeta& t : manifest.tensors) {
        ordered_json jt;
        jt["name"] = t.name;
        jt["dtype"] = dtype_tag(t.dtype);
        jt["shape"] = t.shape;
        jt["shard"] = t.shard_id;
        jt["offset"] = t.byte_offset;
        jt["length"] = t.byte_length;
        j["tensors"].push_back(std::move(jt));
    }
    j["shards"] = manifest.shard_paths;
    return j.dump(2) + "\n";
}

}  // namespace tmerge
