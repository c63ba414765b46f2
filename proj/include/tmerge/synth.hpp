#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tmerge/merge.hpp"
#include "tmerge/recipe.hpp"

namespace tmerge::synth {

// Controlled base/expert family: base drawn from a seeded standard normal,
// each expert = base + a sparse delta with prescribed sparsity, scale, and
// pairwise sign-conflict rate. Fully deterministic in rng_seed.
struct FamilySpec {
    std::uint64_t rng_seed = 0;
    std::vector<std::vector<std::int64_t>> tensor_shapes;
    int n_experts = 1;
    double delta_scale = 0.1;
    double delta_sparsity = 1.0;
    double conflict_rate = 0.0;
    std::string family_id = "family";
    std::vector<std::string> expert_ids;  // optional; defaults to expert_00..
};

FamilySpec parse_family_spec(const std::string& text);
FamilySpec load_family_spec(const std::filesystem::path& path);

struct FamilyPaths {
    std::filesystem::path base;
    std::vector<std::filesystem::path> experts;
};

// Writes <out_dir>/base plus <out_dir>/experts/<expert_id>. The base model_id
// is family_id; expert model_ids are "<family_id>-<expert_id>".
FamilyPaths gen_family(const FamilySpec& spec, const std::filesystem::path& out_dir,
                       DType dtype = DType::F32,
                       std::uint64_t max_shard_bytes = kDefaultMaxShardBytes);

struct ConflictStats {
    double rate = 0.0;           // conflicted / overlapping, 0 when no overlap
    bool no_overlap = false;
    std::uint64_t overlapping = 0;
    std::uint64_t conflicted = 0;
};

// Fraction of parameters, among those where >= 2 task vectors are nonzero,
// where at least two nonzero entries disagree in sign.
ConflictStats conflict_rate(const std::vector<TaskVector>& tvs);

// Naive whole-model reference implementation of all four merge methods:
// straightforward loops over flat buffers, double accumulation for the
// continuous stages, sharing only the RNG derivation with the streaming
// implementation. Tensors are returned sorted by name.
std::vector<DenseTensor> reference_merge(const MergeRecipe& recipe, const CheckpointManifest* base,
                                         const std::vector<CheckpointManifest>& experts);

}  // namespace tmerge::synth
