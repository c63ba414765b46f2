#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tmerge/error.hpp"
#include "tmerge/manifest.hpp"
#include "tmerge/merge.hpp"
#include "tmerge/store.hpp"

namespace test_util {

// Fresh scratch directory under the test working directory, wiped on reuse.
inline std::filesystem::path temp_dir(const std::string& tag) {
    std::filesystem::path dir = std::filesystem::path("test_tmp") / tag;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

struct NamedValues {
    std::string name;
    std::vector<float> values;
};

inline tmerge::CheckpointManifest make_checkpoint(const std::filesystem::path& dir,
                                                  const std::string& model_id,
                                                  std::vector<NamedValues> tensors,
                                                  tmerge::DType dtype = tmerge::DType::F32,
                                                  std::uint64_t max_shard_bytes = 1u << 20) {
    std::vector<tmerge::DenseTensor> ts;
    for (NamedValues& nv : tensors) {
        tmerge::DenseTensor t(nv.name, {static_cast<std::int64_t>(nv.values.size())});
        std::copy(nv.values.begin(), nv.values.end(), t.data());
        ts.push_back(std::move(t));
    }
    return tmerge::write_checkpoint(ts, dtype, dir, max_shard_bytes, model_id);
}

inline std::vector<tmerge::DenseTensor> collect(
    const std::function<void(const tmerge::TensorSink&)>& run) {
    std::vector<tmerge::DenseTensor> out;
    run([&out](tmerge::DenseTensor&& t) { out.push_back(std::move(t)); });
    return out;
}

inline std::vector<tmerge::DenseTensor> read_all(const tmerge::CheckpointManifest& m) {
    std::vector<tmerge::DenseTensor> out;
    for (const tmerge::TensorMeta& meta : m.tensors) out.push_back(tmerge::read_tensor(m, meta.name));
    return out;
}

inline bool bytes_equal(const tmerge::DenseTensor& a, const tmerge::DenseTensor& b) {
    return a.name() == b.name() && a.shape() == b.shape() && a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

inline bool all_bytes_equal(const std::vector<tmerge::DenseTensor>& a,
                            const std::vector<tmerge::DenseTensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!bytes_equal(a[i], b[i])) return false;
    }
    return true;
}

// Relative error with a unit floor, so near-zero targets compare absolutely.
inline double rel_err(double got, double want) {
    return std::fabs(got - want) / std::max(1.0, std::fabs(want));
}

inline double max_rel_err(const std::vector<tmerge::DenseTensor>& got,
                          const std::vector<tmerge::DenseTensor>& want) {
    if (got.size() != want.size()) return 1e30;
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        if (got[i].size() != want[i].size()) return 1e30;
        for (std::size_t p = 0; p < got[i].size(); ++p) {
            worst = std::max(worst, rel_err(got[i].data()[p], want[i].data()[p]));
        }
    }
    return worst;
}

// Distance in representable floats; large sentinel when the signs differ.
inline std::int64_t ulp_diff(float a, float b) {
    if (a == b) return 0;
    if ((a < 0.0f) != (b < 0.0f)) return 1 << 30;
    std::int32_t ia = 0, ib = 0;
    std::memcpy(&ia, &a, 4);
    std::memcpy(&ib, &b, 4);
    return std::llabs(static_cast<std::int64_t>(ia) - static_cast<std::int64_t>(ib));
}

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void spit(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

// Runs f, returning the user_error message it throws ("no error thrown" if none).
template <typename F>
inline std::string error_of(F&& f) {
    try {
        f();
    } catch (const tmerge::user_error& e) {
        return e.what();
    } catch (const std::exception& e) {
        return std::string("unexpected exception type: ") + e.what();
    }
    return "no error thrown";
}

inline bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

}  // namespace test_util
