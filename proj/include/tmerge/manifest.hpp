#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tmerge/tensor.hpp"

namespace tmerge {

// Index of named tensors across shard files. Immutable once opened; safe to
// share across threads.
struct CheckpointManifest {
    std::string model_id;
    std::vector<TensorMeta> tensors;         // sorted lexicographically by name
    std::vector<std::string> shard_paths;    // relative to root
    std::uint64_t total_params = 0;          // sum of tensor element counts
    std::filesystem::path root;              // directory holding the shard files

    const TensorMeta* find(const std::string& name) const;
    std::filesystem::path shard_file(int shard_id) const;
};

// Opens either a checkpoint directory (manifest.json + raw shards) or a
// single-file safetensors checkpoint. Validates names, dtype tags, shard
// paths, and byte-range disjointness; loads no tensor data.
CheckpointManifest open_checkpoint(const std::filesystem::path& path);

// Canonical JSON form of the manifest; writing the same logical checkpoint
// twice yields byte-identical manifest files.
std::string manifest_to_json(const CheckpointManifest& manifest);

}  // namespace tmerge
