#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tmerge/manifest.hpp"
#include "tmerge/tensor.hpp"

namespace tmerge {

// Loads one tensor, converting stored bytes to float32. Source files are
// never modified.
DenseTensor read_tensor(const CheckpointManifest& manifest, const std::string& name);

// Streams tensors into a checkpoint directory: raw little-endian shards plus
// a canonical manifest. Tensors must arrive in strictly increasing name
// order; shards are packed greedily, opening a new shard when the next
// tensor would exceed max_shard_bytes.
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path dir, std::string model_id, DType output_dtype,
                     std::uint64_t max_shard_bytes);

    void add(const DenseTensor& tensor);
    CheckpointManifest finish();

private:
    void open_next_shard();

    std::filesystem::path dir_;
    DType dtype_;
    std::uint64_t max_shard_bytes_ = 0;
    CheckpointManifest manifest_;
    std::ofstream shard_;
    std::uint64_t shard_bytes_ = 0;
    bool finished_ = false;
};

// Convenience wrapper when all tensors are already in memory.
CheckpointManifest write_checkpoint(std::vector<DenseTensor>& tensors, DType output_dtype,
                                    const std::filesystem::path& dir, std::uint64_t max_shard_bytes,
                                    const std::string& model_id);

// FNV-1a over the canonical manifest followed by every shard's bytes, as a
// 16-hex-digit string. Equal hashes mean bit-identical checkpoints.
std::string checkpoint_content_hash(const CheckpointManifest& manifest);

}  // namespace tmerge
