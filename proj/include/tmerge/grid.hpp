#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tmerge/recipe.hpp"

namespace tmerge::grid {

// Factorial experiment design plus the execution knobs shared by every cell.
struct GridConfig {
    std::vector<std::string> base_models;
    std::vector<std::string> sizes;
    std::vector<std::string> methods;
    std::vector<int> expert_counts;
    std::vector<std::int64_t> seeds;
    std::vector<std::string> category_pool;

    // Optional execution settings.
    std::string checkpoint_root;  // <root>/<base>/<size>/base and .../experts/<category>
    double lambda = 1.0;
    double trim_density = 0.2;
    double drop_p = 0.9;
    std::string output_dtype;  // empty = per-merge default
};

GridConfig parse_grid_config(const std::string& text);
GridConfig load_grid_config(const std::filesystem::path& path);

// Seeded Fisher-Yates shuffle of the pool, then the first n entries. Depends
// only on (seed, n, pool): never on base model, size, or method. For one seed
// the n=k selection is a prefix of the n=k' selection whenever k <= k'.
std::vector<std::string> select_expert_subset(std::int64_t seed, int n,
                                              const std::vector<std::string>& pool);

struct ExperimentRecord {
    MergeRecipe recipe;
    std::vector<std::string> selected_categories;
    std::string base_model;
    std::string size;
    std::string method;
    std::int64_t seed = 0;
    int n_experts = 0;
    std::string base_id;                   // "<base_model>-<size>"
    std::vector<std::string> expert_ids;   // "<base_model>-<size>-<category>"
    std::string output_id;                 // "<base_model>-<size>-<method>-n<k>-s<seed>"
    std::string recipe_hash;
};

// Cartesian product over base_models x sizes x methods x expert_counts x
// seeds, in that nesting order.
std::vector<ExperimentRecord> expand_grid(const GridConfig& config,
                                          const std::filesystem::path& run_dir);

struct RunSummary {
    std::size_t total = 0;
    std::size_t executed = 0;
    std::size_t skipped = 0;
    std::size_t failed = 0;
    std::vector<std::pair<std::string, std::string>> failures;  // (output_id, error)
};

// Executes one record and returns the output checkpoint's content hash.
using Executor = std::function<std::string(const ExperimentRecord&)>;

Executor default_executor();

// Runs every record, isolating per-record failures, writing one JSON record
// file per cell under <run_dir>/records/<recipe_hash>.json. With resume,
// records whose file reports status "done" for the same recipe hash are
// skipped without executing a merge.
RunSummary run_grid(const std::vector<ExperimentRecord>& records,
                    const std::filesystem::path& run_dir, bool resume, int workers,
                    const Executor& executor = default_executor());

struct LoadedRecords {
    std::vector<ExperimentRecord> done;
    std::size_t failed = 0;
};

// Reads the per-cell record files back, keeping completed cells; used by the
// report stage.
LoadedRecords load_records(const std::filesystem::path& run_dir);

}  // namespace tmerge::grid
