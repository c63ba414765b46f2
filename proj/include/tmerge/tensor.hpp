#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tmerge/dtype.hpp"
#include "tmerge/memory.hpp"

namespace tmerge {

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    int shard_id = 0;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (std::int64_t d : shape) n *= static_cast<std::uint64_t>(d);
        return n;
    }
};

// In-memory tensor, always float32 regardless of on-disk dtype. Storage uses
// the tracking allocator so merge peak memory can be measured.
class DenseTensor {
public:
    DenseTensor() = default;
    DenseTensor(std::string name, std::vector<std::int64_t> shape)
        : name_(std::move(name)), shape_(std::move(shape)) {
        data_.resize(element_count());
    }

    const std::string& name() const { return name_; }
    void set_name(std::string name) { name_ = std::move(name); }
    const std::vector<std::int64_t>& shape() const { return shape_; }

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (std::int64_t d : shape_) n *= static_cast<std::uint64_t>(d);
        return n;
    }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::size_t size() const { return data_.size(); }

    Eigen::Map<Eigen::ArrayXf> array() {
        return Eigen::Map<Eigen::ArrayXf>(data_.data(), static_cast<Eigen::Index>(data_.size()));
    }
    Eigen::Map<const Eigen::ArrayXf> array() const {
        return Eigen::Map<const Eigen::ArrayXf>(data_.data(),
                                                static_cast<Eigen::Index>(data_.size()));
    }

    TensorBuffer& buffer() { return data_; }
    const TensorBuffer& buffer() const { return data_; }

private:
    std::string name_;
    std::vector<std::int64_t> shape_;
    TensorBuffer data_;
};

}  // namespace tmerge
