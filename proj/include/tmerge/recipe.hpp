#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tmerge/dtype.hpp"
#include "tmerge/manifest.hpp"

namespace tmerge {

enum class MergeMethod { Average, TaskArithmetic, Ties, DareTies };

const char* method_name(MergeMethod m);
MergeMethod method_from_name(const std::string& name);

// One merge job. Hyperparameters that a method does not use must be absent
// from the recipe file; absent-but-used ones take the defaults below.
struct MergeRecipe {
    MergeMethod method = MergeMethod::Average;
    double lambda = 1.0;
    double trim_density = 0.2;
    double drop_p = 0.9;
    std::uint64_t rng_seed = 0;
    std::string base;                  // checkpoint path; unused by average
    std::vector<std::string> experts;  // checkpoint paths, N >= 1, duplicates allowed
    std::string output_path;
    std::optional<DType> output_dtype;

    bool uses_base() const { return method != MergeMethod::Average; }
    bool uses_lambda() const { return method != MergeMethod::Average; }
    bool uses_density() const {
        return method == MergeMethod::Ties || method == MergeMethod::DareTies;
    }
    bool uses_drop_p() const { return method == MergeMethod::DareTies; }
};

// Parses a recipe JSON document / file. Unknown fields and fields unused by
// the method are rejected by name; ranges are validated.
MergeRecipe parse_recipe_json(const std::string& text, bool require_output_path);
MergeRecipe load_recipe(const std::filesystem::path& path, bool require_output_path = true);

// Canonical JSON for provenance echoes.
std::string recipe_to_json(const MergeRecipe& recipe);

// Content hash over method, hyperparameters in use, rng seed, base id, and
// expert ids — not file paths or timestamps — so resume decisions survive
// relocations of the checkpoint tree.
std::string recipe_content_hash(const MergeRecipe& recipe, const std::string& base_id,
                                const std::vector<std::string>& expert_ids);

struct MergeOutcome {
    CheckpointManifest manifest;
    std::string output_hash;            // content hash of the written checkpoint
    std::string base_id;                // empty for average
    std::vector<std::string> expert_ids;
};

inline constexpr std::uint64_t kDefaultMaxShardBytes = 256ull << 20;

// Opens the recipe's checkpoints, dispatches to the right merge, and streams
// the result into recipe.output_path.
MergeOutcome run_merge_recipe(const MergeRecipe& recipe, const std::string& output_model_id = "",
                              std::uint64_t max_shard_bytes = kDefaultMaxShardBytes);

}  // namespace tmerge
