#include "tmerge/store.hpp"

#include <algorithm>
#include <cstring>

#include "tmerge/error.hpp"
#include "tmerge/rng.hpp"

namespace tmerge {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kChunkElems = 1u << 20;  // 4 MiB of float32 per staging chunk

std::string shard_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "shard_%05d.bin", index);
    return buf;
}

// Storage is little-endian; so are the supported hosts, so 16/32-bit lanes
// are copied directly.
void decode_chunk(const unsigned char* src, float* dst, std::size_t count, DType dtype) {
    switch (dtype) {
        case DType::F32:
            std::memcpy(dst, src, count * 4);
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < count; ++i) {
                std::uint16_t bits;
                std::memcpy(&bits, src + 2 * i, 2);
                dst[i] = bf16_to_f32(bits);
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < count; ++i) {
                std::uint16_t bits;
                std::memcpy(&bits, src + 2 * i, 2);
                dst[i] = f16_to_f32(bits);
            }
            break;
    }
}

void encode_chunk(const float* src, unsigned char* dst, std::size_t count, DType dtype) {
    switch (dtype) {
        case DType::F32:
            std::memcpy(dst, src, count * 4);
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < count; ++i) {
                std::uint16_t bits = f32_to_bf16(src[i]);
                std::memcpy(dst + 2 * i, &bits, 2);
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < count; ++i) {
                std::uint16_t bits = f32_to_f16(src[i]);
                std::memcpy(dst + 2 * i, &bits, 2);
            }
            break;
    }
}

}  // namespace

DenseTensor read_tensor(const CheckpointManifest& manifest, const std::string& name) {
    const TensorMeta* meta = manifest.find(name);
    if (!meta) throw user_error("unknown tensor name: " + name);

    const std::uint64_t expected = meta->element_count() * dtype_size(meta->dtype);
    if (meta->byte_length != expected) {
        throw user_error("byte_length mismatch for tensor " + name + ": manifest says " +
                         std::to_string(meta->byte_length) + ", shape implies " +
                         std::to_string(expected));
    }

    fs::path shard = manifest.shard_file(meta->shard_id);
    std::ifstream in(shard, std::ios::binary);
    if (!in) throw user_error("shard read failure: cannot open " + shard.string());
    in.seekg(static_cast<std::streamoff>(meta->byte_offset));

    DenseTensor t(name, meta->shape);
    const std::size_t esize = dtype_size(meta->dtype);
    std::vector<unsigned char> chunk(std::min<std::size_t>(kChunkElems, t.size() + 1) * esize);
    std::size_t done = 0;
    while (done < t.size()) {
        std::size_t n = std::min(kChunkElems, t.size() - done);
        if (!in.read(reinterpret_cast<char*>(chunk.data()), static_cast<std::streamsize>(n * esize))) {
            throw user_error("shard read failure: truncated data for tensor " + name + " in " +
                             shard.string());
        }
        decode_chunk(chunk.data(), t.data() + done, n, meta->dtype);
        done += n;
    }
    return t;
}

CheckpointWriter::CheckpointWriter(std::filesystem::path dir, std::string model_id,
                                   DType output_dtype, std::uint64_t max_shard_bytes)
    : dir_(std::move(dir)), dtype_(output_dtype), max_shard_bytes_(max_shard_bytes) {
    fs::create_directories(dir_);
    manifest_.model_id = std::move(model_id);
    manifest_.root = dir_;
}

void CheckpointWriter::open_next_shard() {
    if (shard_.is_open()) {
        shard_.close();
        if (!shard_) throw user_error("IO failure closing shard in " + dir_.string());
    }
    std::string name = shard_name(static_cast<int>(manifest_.shard_paths.size()));
    shard_.open(dir_ / name, std::ios::binary | std::ios::trunc);
    if (!shard_) throw user_error("IO failure opening shard " + (dir_ / name).string());
    manifest_.shard_paths.push_back(name);
    shard_bytes_ = 0;
}

void CheckpointWriter::add(const DenseTensor& tensor) {
    if (finished_) throw user_error("writer already finished");
    if (!manifest_.tensors.empty()) {
        const std::string& prev = manifest_.tensors.back().name;
        if (tensor.name() == prev) throw user_error("duplicate tensor name: " + tensor.name());
        if (tensor.name() < prev) {
            throw user_error("tensors out of order: " + tensor.name() + " after " + prev);
        }
    }

    const std::uint64_t bytes = tensor.element_count() * dtype_size(dtype_);
    if (bytes > max_shard_bytes_) {
        throw user_error("shard budget smaller than a single tensor: " + tensor.name() + " needs " +
                         std::to_string(bytes) + " bytes, max_shard_bytes = " +
                         std::to_string(max_shard_bytes_));
    }
    if (!shard_.is_open() || (shard_bytes_ > 0 && shard_bytes_ + bytes > max_shard_bytes_)) {
        open_next_shard();
    }

    TensorMeta meta;
    meta.name = tensor.name();
    meta.dtype = dtype_;
    meta.shape = tensor.shape();
    meta.shard_id = static_cast<int>(manifest_.shard_paths.size()) - 1;
    meta.byte_offset = shard_bytes_;
    meta.byte_length = bytes;

    const std::size_t esize = dtype_size(dtype_);
    std::vector<unsigned char> chunk(std::min<std::size_t>(kChunkElems, tensor.size() + 1) * esize);
    std::size_t done = 0;
    while (done < tensor.size()) {
        std::size_t n = std::min(kChunkElems, tensor.size() - done);
        encode_chunk(tensor.data() + done, chunk.data(), n, dtype_);
        shard_.write(reinterpret_cast<const char*>(chunk.data()),
                     static_cast<std::streamsize>(n * esize));
        if (!shard_) throw user_error("IO failure writing shard in " + dir_.string());
        done += n;
    }
    shard_bytes_ += bytes;
    manifest_.tensors.push_back(std::move(meta));
    manifest_.total_params += tensor.element_count();
}

CheckpointManifest CheckpointWriter::finish() {
    if (finished_) throw user_error("writer already finished");
    finished_ = true;
    if (shard_.is_open()) {
        shard_.close();
        if (!shard_) throw user_error("IO failure closing shard in " + dir_.string());
    }
    std::ofstream out(dir_ / "manifest.json", std::ios::binary | std::ios::trunc);
    std::string json = manifest_to_json(manifest_);
    out.write(json.data(), static_cast<std::streamsize>(json.size()));
    if (!out) throw user_error("IO failure writing manifest in " + dir_.string());
    return manifest_;
}

CheckpointManifest write_checkpoint(std::vector<DenseTensor>& tensors, DType output_dtype,
                                    const std::filesystem::path& dir, std::uint64_t max_shard_bytes,
                                    const std::string& model_id) {
    std::sort(tensors.begin(), tensors.end(),
              [](const DenseTensor& a, const DenseTensor& b) { return a.name() < b.name(); });
    CheckpointWriter w(dir, model_id, output_dtype, max_shard_bytes);
    for (const DenseTensor& t : tensors) w.add(t);
    return w.finish();
}

std::string checkpoint_content_hash(const CheckpointManifest& manifest) {
    Fnv1a h;
    std::string json = manifest_to_json(manifest);
    h.update(json.data(), json.size());
    std::vector<char> buf(1u << 22);
    for (const std::string& rel : manifest.shard_paths) {
        std::ifstream in(manifest.root / rel, std::ios::binary);
        if (!in) throw user_error("shard read failure: cannot open " + (manifest.root / rel).string());
        while (in) {
            in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
            std::streamsize got = in.gcount();
            if (got > 0) h.update(buf.data(), static_cast<std::size_t>(got));
        }
    }
    return hash_hex(h.digest());
}

}  // namespace tmerge
