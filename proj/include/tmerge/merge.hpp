#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tmerge/manifest.hpp"
#include "tmerge/tensor.hpp"

namespace tmerge {

// ---- whole-model types (desk-scale; the checkpoint-level merges below
// ---- stream per tensor and never build these for a full model) ----

struct TaskVector {
    std::string base_id;
    std::string expert_id;
    std::vector<DenseTensor> deltas;  // sorted by name, aligned with the base manifest
};

struct TrimmedTaskVector {
    std::string base_id;
    std::string expert_id;
    double density = 1.0;
    std::vector<DenseTensor> deltas;
};

// Per-parameter sign in {-1, 0, +1}, stored as float (exact at these values).
struct SignVector {
    std::vector<DenseTensor> signs;
};

// ---- buffer kernels (shared by the streaming merges and the type-level ops) ----

// Keeps the ceil(density * n) entries of largest magnitude, zeroes the rest.
// Equal magnitudes break toward the lower flat index. density == 1 leaves the
// buffer bitwise untouched.
void trim_to_density(float* v, std::size_t n, double density);

// Bernoulli-zeroes each element with probability drop_p and scales survivors
// by 1/(1-drop_p). Mask bits come from (seed, tensor name, flat index) only,
// so results are independent of scheduling.
void dare_prune_buffer(float* v, std::size_t n, double drop_p, std::uint64_t seed,
                       std::string_view tensor_name);

// signs[p] = sgn(sum_i deltas[i][p]); the sum is float32, taken left to right.
void elect_signs_buffer(const std::vector<const float*>& deltas, std::size_t n, float* signs);

// out[p] = mean of deltas[i][p] over i with sgn(deltas[i][p]) == signs[p];
// empty match set (including signs[p] == 0) yields 0. A zero entry never
// matches a nonzero elected sign.
void disjoint_mean_buffer(const std::vector<const float*>& deltas, std::size_t n,
                          const float* signs, float* out);

// Fused election + disjoint mean: base[p] += lambda * disjoint-mean. Performs
// the same float32 operations in the same order as the two kernels above.
void ties_combine(float* base, const std::vector<const float*>& deltas, std::size_t n,
                  float lambda);

// ---- type-level operations ----

void check_same_structure(const CheckpointManifest& a, const CheckpointManifest& b);

TaskVector compute_task_vector(const CheckpointManifest& expert, const CheckpointManifest& base);
TrimmedTaskVector trim_by_magnitude(const TaskVector& tv, double density);
SignVector elect_signs(const std::vector<TrimmedTaskVector>& trimmed);
TaskVector disjoint_merge(const std::vector<TrimmedTaskVector>& trimmed, const SignVector& signs);
TaskVector dare_prune(const TaskVector& tv, double drop_p, std::uint64_t rng_seed);

// ---- checkpoint-level streaming merges ----
//
// Tensors are produced in lexicographic name order and handed to the sink one
// at a time; peak resident tensor data stays within (N + 2) x the largest
// tensor. Experts are reordered canonically by model_id first, which (with
// DARE sub-seeds keyed by model_id) makes every merge invariant to the order
// experts are listed in.

using TensorSink = std::function<void(DenseTensor&&)>;

void merge_average(const std::vector<CheckpointManifest>& experts, const TensorSink& sink);

void merge_task_arithmetic(const CheckpointManifest& base,
                           const std::vector<CheckpointManifest>& experts, float lambda,
                           const TensorSink& sink);

void merge_ties(const CheckpointManifest& base, const std::vector<CheckpointManifest>& experts,
                float lambda, double density, const TensorSink& sink);

void merge_dare_ties(const CheckpointManifest& base,
                     const std::vector<CheckpointManifest>& experts, float lambda, double density,
                     double drop_p, std::uint64_t rng_seed, const TensorSink& sink);

// Sub-seed for one expert's DARE masks, keyed by model_id so reordering the
// expert list cannot change any mask.
std::uint64_t dare_sub_seed(std::uint64_t rng_seed, std::string_view expert_id);

}  // namespace tmerge
