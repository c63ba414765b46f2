#include "tmerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tmerge/error.hpp"
#include "tmerge/rng.hpp"
#include "tmerge/store.hpp"

namespace tmerge {

namespace {

inline float fsgn(float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); }

void require_density(double density) {
    if (!(density > 0.0) || !(density <= 1.0)) {
        throw user_error("density out of range: " + std::to_string(density) +
                         " (must be in (0, 1])");
    }
}

void require_drop_p(double drop_p) {
    if (!(drop_p >= 0.0) || !(drop_p < 1.0)) {
        throw user_error("drop_p out of range: " + std::to_string(drop_p) +
                         " (must be in [0, 1))");
    }
}

void require_lambda(float lambda) {
    if (!std::isfinite(lambda)) throw user_error("non-finite lambda");
}

std::size_t trim_keep_count(std::size_t n, double density) {
    double k = std::ceil(density * static_cast<double>(n));
    if (k < 0.0) return 0;
    if (k > static_cast<double>(n)) return n;
    return static_cast<std::size_t>(k);
}

// Canonical processing order: experts sorted by model_id (stable for
// duplicates). All checkpoint-level merges use it, which makes the results
// independent of how the caller ordered the expert list.
std::vector<const CheckpointManifest*> canonical_order(
    const std::vector<CheckpointManifest>& experts) {
    std::vector<const CheckpointManifest*> out;
    out.reserve(experts.size());
    for (const auto& e : experts) out.push_back(&e);
    std::stable_sort(out.begin(), out.end(),
                     [](const CheckpointManifest* a, const CheckpointManifest* b) {
                         return a->model_id < b->model_id;
                     });
    return out;
}

// Pairwise (tree) in-place summation of aligned buffers into buffers[lo];
// bounds float32 rounding growth for larger expert counts.
void tree_sum(std::vector<DenseTensor>& ts, std::size_t lo, std::size_t hi) {
    if (hi - lo <= 1) return;
    std::size_t mid = lo + (hi - lo) / 2;
    tree_sum(ts, lo, mid);
    tree_sum(ts, mid, hi);
    ts[lo].array() += ts[mid].array();
}

void require_experts(const std::vector<CheckpointManifest>& experts) {
    if (experts.empty()) throw user_error("empty expert list");
}

}  // namespace

std::uint64_t dare_sub_seed(std::uint64_t rng_seed, std::string_view expert_id) {
    return derive_seed(rng_seed, expert_id);
}

// ---- buffer kernels ----

void trim_to_density(float* v, std::size_t n, double density) {
    require_density(density);
    if (n == 0) return;
    std::size_t k = trim_keep_count(n, density);
    if (k >= n) return;  // keep everything, bitwise untouched

    TensorBuffer mag(n);
    for (std::size_t i = 0; i < n; ++i) mag[i] = std::fabs(v[i]);
    std::nth_element(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(k - 1), mag.end(),
                     std::greater<float>());
    const float thr = mag[k - 1];

    std::size_t above = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (std::fabs(v[i]) > thr) ++above;
    }
    // Entries above the threshold always survive; ties at the threshold
    // survive in flat-index order until the budget is exhausted.
    std::size_t at_thr_budget = k - above;
    for (std::size_t i = 0; i < n; ++i) {
        float a = std::fabs(v[i]);
        if (a > thr) continue;
        if (a == thr && at_thr_budget > 0) {
            --at_thr_budget;
            continue;
        }
        v[i] = 0.0f;
    }
}

void dare_prune_buffer(float* v, std::size_t n, double drop_p, std::uint64_t seed,
                       std::string_view tensor_name) {
    require_drop_p(drop_p);
    CounterRng rng(seed, tensor_name);
    const float scale = static_cast<float>(1.0 / (1.0 - drop_p));
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform(i) < drop_p) {
            v[i] = 0.0f;
        } else {
            v[i] *= scale;
        }
    }
}

void elect_signs_buffer(const std::vector<const float*>& deltas, std::size_t n, float* signs) {
    for (std::size_t p = 0; p < n; ++p) {
        float s = 0.0f;
        for (const float* d : deltas) s += d[p];
        signs[p] = fsgn(s);
    }
}

void disjoint_mean_buffer(const std::vector<const float*>& deltas, std::size_t n,
                          const float* signs, float* out) {
    for (std::size_t p = 0; p < n; ++p) {
        const float g = signs[p];
        if (g == 0.0f) {
            out[p] = 0.0f;
            continue;
        }
        float sum = 0.0f;
        int count = 0;
        for (const float* d : deltas) {
            float x = d[p];
            if (fsgn(x) == g) {
                sum += x;
                ++count;
            }
        }
        out[p] = count > 0 ? sum / static_cast<float>(count) : 0.0f;
    }
}

void ties_combine(float* base, const std::vector<const float*>& deltas, std::size_t n,
                  float lambda) {
    for (std::size_t p = 0; p < n; ++p) {
        float s = 0.0f;
        for (const float* d : deltas) s += d[p];
        const float g = fsgn(s);
        float mean = 0.0f;
        if (g != 0.0f) {
            float sum = 0.0f;
            int count = 0;
            for (const float* d : deltas) {
                float x = d[p];
                if (fsgn(x) == g) {
                    sum += x;
                    ++count;
                }
            }
            mean = count > 0 ? sum / static_cast<float>(count) : 0.0f;
        }
        base[p] += lambda * mean;
    }
}

// ---- structure checks ----

void check_same_structure(const CheckpointManifest& a, const CheckpointManifest& b) {
    if (a.tensors.size() != b.tensors.size()) {
        throw user_error("structure mismatch between " + a.model_id + " and " + b.model_id +
                         ": tensor counts " + std::to_string(a.tensors.size()) + " vs " +
                         std::to_string(b.tensors.size()));
    }
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        const TensorMeta& ta = a.tensors[i];
        const TensorMeta& tb = b.tensors[i];
        if (ta.name != tb.name) {
            throw user_error("structure mismatch between " + a.model_id + " and " + b.model_id +
                             ": tensor " + ta.name + " vs " + tb.name);
        }
        if (ta.shape != tb.shape) {
            throw user_error("structure mismatch between " + a.model_id + " and " + b.model_id +
                             ": shape of " + ta.name + " differs");
        }
    }
}

namespace {

void check_aligned(const std::vector<TrimmedTaskVector>& trimmed) {
    if (trimmed.empty()) throw user_error("empty expert list");
    const auto& first = trimmed.front().deltas;
    for (const TrimmedTaskVector& tv : trimmed) {
        if (tv.deltas.size() != first.size()) {
            throw user_error("structure mismatch: task vectors have different tensor counts");
        }
        for (std::size_t i = 0; i < first.size(); ++i) {
            if (tv.deltas[i].name() != first[i].name() || tv.deltas[i].shape() != first[i].shape()) {
                throw user_error("structure mismatch: task vector tensor " + tv.deltas[i].name() +
                                 " is not aligned");
            }
        }
    }
}

}  // namespace

// ---- type-level operations ----

TaskVector compute_task_vector(const CheckpointManifest& expert, const CheckpointManifest& base) {
    check_same_structure(expert, base);
    TaskVector tv;
    tv.base_id = base.model_id;
    tv.expert_id = expert.model_id;
    for (const TensorMeta& meta : base.tensors) {
        DenseTensor d = read_tensor(expert, meta.name);
        DenseTensor b = read_tensor(base, meta.name);
        d.array() -= b.array();
        tv.deltas.push_back(std::move(d));
    }
    return tv;
}

TrimmedTaskVector trim_by_magnitude(const TaskVector& tv, double density) {
    require_density(density);
    TrimmedTaskVector out;
    out.base_id = tv.base_id;
    out.expert_id = tv.expert_id;
    out.density = density;
    out.deltas = tv.deltas;
    for (DenseTensor& t : out.deltas) trim_to_density(t.data(), t.size(), density);
    return out;
}

SignVector elect_signs(const std::vector<TrimmedTaskVector>& trimmed) {
    check_aligned(trimmed);
    SignVector sv;
    for (std::size_t i = 0; i < trimmed.front().deltas.size(); ++i) {
        const DenseTensor& ref = trimmed.front().deltas[i];
        DenseTensor s(ref.name(), ref.shape());
        std::vector<const float*> ptrs;
        for (const TrimmedTaskVector& tv : trimmed) ptrs.push_back(tv.deltas[i].data());
        elect_signs_buffer(ptrs, s.size(), s.data());
        sv.signs.push_back(std::move(s));
    }
    return sv;
}

TaskVector disjoint_merge(const std::vector<TrimmedTaskVector>& trimmed, const SignVector& signs) {
    check_aligned(trimmed);
    if (signs.signs.size() != trimmed.front().deltas.size()) {
        throw user_error("structure mismatch: sign vector is not aligned");
    }
    TaskVector out;
    out.base_id = trimmed.front().base_id;
    out.expert_id = "merged";
    for (std::size_t i = 0; i < trimmed.front().deltas.size(); ++i) {
        const DenseTensor& ref = trimmed.front().deltas[i];
        if (signs.signs[i].name() != ref.name() || signs.signs[i].shape() != ref.shape()) {
            throw user_error("structure mismatch: sign vector tensor " + signs.signs[i].name() +
                             " is not aligned");
        }
        DenseTensor m(ref.name(), ref.shape());
        std::vector<const float*> ptrs;
        for (const TrimmedTaskVector& tv : trimmed) ptrs.push_back(tv.deltas[i].data());
        disjoint_mean_buffer(ptrs, m.size(), signs.signs[i].data(), m.data());
        out.deltas.push_back(std::move(m));
    }
    return out;
}

TaskVector dare_prune(const TaskVector& tv, double drop_p, std::uint64_t rng_seed) {
    require_drop_p(drop_p);
    TaskVector out;
    out.base_id = tv.base_id;
    out.expert_id = tv.expert_id;
    out.deltas = tv.deltas;
    for (DenseTensor& t : out.deltas) {
        dare_prune_buffer(t.data(), t.size(), drop_p, rng_seed, t.name());
    }
    return out;
}

// ---- checkpoint-level streaming merges ----

void merge_average(const std::vector<CheckpointManifest>& experts, const TensorSink& sink) {
    require_experts(experts);
    auto order = canonical_order(experts);
    for (std::size_t i = 1; i < order.size(); ++i) check_same_structure(*order[0], *order[i]);

    const float n = static_cast<float>(experts.size());
    for (const TensorMeta& meta : order[0]->tensors) {
        std::vector<DenseTensor> ts;
        ts.reserve(order.size());
        for (const CheckpointManifest* m : order) ts.push_back(read_tensor(*m, meta.name));
        tree_sum(ts, 0, ts.size());
        ts[0].array() /= n;
        sink(std::move(ts[0]));
    }
}

void merge_task_arithmetic(const CheckpointManifest& base,
                           const std::vector<CheckpointManifest>& experts, float lambda,
                           const TensorSink& sink) {
    require_experts(experts);
    require_lambda(lambda);
    auto order = canonical_order(experts);
    for (const CheckpointManifest* m : order) check_same_structure(base, *m);

    for (const TensorMeta& meta : base.tensors) {
        DenseTensor b = read_tensor(base, meta.name);
        std::vector<DenseTensor> ds;
        ds.reserve(order.size());
        for (const CheckpointManifest* m : order) {
            DenseTensor d = read_tensor(*m, meta.name);
            d.array() -= b.array();
            ds.push_back(std::move(d));
        }
        tree_sum(ds, 0, ds.size());
        b.array() += lambda * ds[0].array();
        ds.clear();
        sink(std::move(b));
    }
}

namespace {

// Shared body of merge_ties and merge_dare_ties; dare_seed is empty for plain
// TIES. Buffer schedule per tensor: base + k deltas while subtracting (≤ N+1),
// then N deltas + trim scratch (N+1), then N deltas + re-read base (N+1); the
// peak stays strictly below the (N+2) x largest-tensor contract.
void ties_pipeline(const CheckpointManifest& base, const std::vector<CheckpointManifest>& experts,
                   float lambda, double density, const double* drop_p,
                   std::uint64_t rng_seed, const TensorSink& sink) {
    require_experts(experts);
    require_lambda(lambda);
    require_density(density);
    if (drop_p) require_drop_p(*drop_p);
    auto order = canonical_order(experts);
    for (const CheckpointManifest* m : order) check_same_structure(base, *m);

    for (const TensorMeta& meta : base.tensors) {
        std::vector<DenseTensor> ds;
        ds.reserve(order.size());
        {
            DenseTensor b = read_tensor(base, meta.name);
            for (const CheckpointManifest* m : order) {
                DenseTensor d = read_tensor(*m, meta.name);
                d.array() -= b.array();
                if (drop_p) {
                    dare_prune_buffer(d.data(), d.size(), *drop_p,
                                      dare_sub_seed(rng_seed, m->model_id), meta.name);
                }
                ds.push_back(std::move(d));
            }
        }
        for (DenseTensor& d : ds) trim_to_density(d.data(), d.size(), density);

        DenseTensor out = read_tensor(base, meta.name);
        std::vector<const float*> ptrs;
        for (const DenseTensor& d : ds) ptrs.push_back(d.data());
        ties_combine(out.data(), ptrs, out.size(), lambda);
        ds.clear();
        sink(std::move(out));
    }
}

}  // namespace

void merge_ties(const CheckpointManifest& base, const std::vector<CheckpointManifest>& experts,
                float lambda, double density, const TensorSink& sink) {
    ties_pipeline(base, experts, lambda, density, nullptr, 0, sink);
}

void merge_dare_ties(const CheckpointManifest& base,
                     const std::vector<CheckpointManifest>& experts, float lambda, double density,
                     double drop_p, std::uint64_t rng_seed, const TensorSink& sink) {
    ties_pipeline(base, experts, lambda, density, &drop_p, rng_seed, sink);
}

}  // namespace tmerge
