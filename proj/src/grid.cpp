#include "tmerge/grid.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "tmerge/error.hpp"
#include "tmerge/rng.hpp"

namespace tmerge::grid {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string iso_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void validate_config(const GridConfig& c) {
    if (c.base_models.empty()) throw user_error("empty grid axis: base_models");
    if (c.sizes.empty()) throw user_error("empty grid axis: sizes");
    if (c.methods.empty()) throw user_error("empty grid axis: methods");
    if (c.expert_counts.empty()) throw user_error("empty grid axis: expert_counts");
    if (c.seeds.empty()) throw user_error("empty grid axis: seeds");
    if (c.category_pool.empty()) throw user_error("empty grid axis: category_pool");
    for (const std::string& m : c.methods) method_from_name(m);
    for (int n : c.expert_counts) {
        if (n < 1 || static_cast<std::size_t>(n) > c.category_pool.size()) {
            throw user_error("expert_count " + std::to_string(n) +
                             " out of range (category pool has " +
                             std::to_string(c.category_pool.size()) + " entries)");
        }
    }
    std::set<std::int64_t> distinct(c.seeds.begin(), c.seeds.end());
    if (distinct.size() != c.seeds.size()) throw user_error("seeds must be distinct");
    std::set<std::string> cats(c.category_pool.begin(), c.category_pool.end());
    if (cats.size() != c.category_pool.size()) {
        throw user_error("category_pool entries must be distinct");
    }
}

}  // namespace

GridConfig parse_grid_config(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw user_error(std::string("invalid grid config JSON: ") + e.what());
    }
    if (!j.is_object()) throw user_error("invalid grid config JSON: top level must be an object");

    static const std::set<std::string> known = {
        "base_models", "sizes",  "methods",      "expert_counts", "seeds",
        "category_pool", "checkpoint_root", "lambda", "trim_density", "drop_p", "output_dtype"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) throw user_error("unknown grid config field: " + it.key());
    }

    GridConfig c;
    try {
        c.base_models = j.at("base_models").get<std::vector<std::string>>();
        c.sizes = j.at("sizes").get<std::vector<std::string>>();
        c.methods = j.at("methods").get<std::vector<std::string>>();
        c.expert_counts = j.at("expert_counts").get<std::vector<int>>();
        c.seeds = j.at("seeds").get<std::vector<std::int64_t>>();
        c.category_pool = j.at("category_pool").get<std::vector<std::string>>();
        if (j.contains("checkpoint_root")) {
            c.checkpoint_root = j.at("checkpoint_root").get<std::string>();
        }
        if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
        if (j.contains("trim_density")) c.trim_density = j.at("trim_density").get<double>();
        if (j.contains("drop_p")) c.drop_p = j.at("drop_p").get<double>();
        if (j.contains("output_dtype")) c.output_dtype = j.at("output_dtype").get<std::string>();
    } catch (const user_error&) {
        throw;
    } catch (const std::exception& e) {
        throw user_error(std::string("malformed grid config: ") + e.what());
    }
    validate_config(c);
    return c;
}

GridConfig load_grid_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open grid config file: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_grid_config(buf.str());
}

std::vector<std::string> select_expert_subset(std::int64_t seed, int n,
                                              const std::vector<std::string>& pool) {
    if (n < 1 || static_cast<std::size_t>(n) > pool.size()) {
        throw user_error("subset size " + std::to_string(n) + " out of range (pool has " +
                         std::to_string(pool.size()) + " entries)");
    }
    std::vector<std::string> shuffled = pool;
    CounterRng rng(static_cast<std::uint64_t>(seed), "expert-subset");
    std::uint64_t counter = 0;
    for (std::size_t i = shuffled.size() - 1; i > 0; --i, ++counter) {
        auto j = static_cast<std::size_t>(rng.uniform(counter) * static_cast<double>(i + 1));
        if (j > i) j = i;  // uniform() < 1 makes this unreachable; belt and braces
        std::swap(shuffled[i], shuffled[j]);
    }
    shuffled.resize(static_cast<std::size_t>(n));
    return shuffled;
}

std::vector<ExperimentRecord> expand_grid(const GridConfig& config,
                                          const std::filesystem::path& run_dir) {
    validate_config(config);
    std::vector<ExperimentRecord> records;

    for (const std::string& bm : config.base_models) {
        for (const std::string& size : config.sizes) {
            for (const std::string& method : config.methods) {
                for (int count : config.expert_counts) {
                    for (std::int64_t seed : config.seeds) {
                        ExperimentRecord r;
                        r.base_model = bm;
                        r.size = size;
                        r.method = method;
                        r.seed = seed;
                        r.n_experts = count;
                        r.selected_categories =
                            select_expert_subset(seed, count, config.category_pool);
                        r.base_id = bm + "-" + size;
                        for (const std::string& cat : r.selected_categories) {
                            r.expert_ids.push_back(r.base_id + "-" + cat);
                        }
                        r.output_id = bm + "-" + size + "-" + method + "-n" +
                                      std::to_string(count) + "-s" + std::to_string(seed);

                        MergeRecipe& recipe = r.recipe;
                        recipe.method = method_from_name(method);
                        if (recipe.uses_lambda()) recipe.lambda = config.lambda;
                        if (recipe.uses_density()) recipe.trim_density = config.trim_density;
                        if (recipe.uses_drop_p()) recipe.drop_p = config.drop_p;
                        // The cell seed always enters the recipe hash, so two
                        // cells differing only in seed stay distinct records.
                        recipe.rng_seed = static_cast<std::uint64_t>(seed);
                        if (!config.output_dtype.empty()) {
                            recipe.output_dtype = dtype_from_tag(config.output_dtype);
                        }
                        if (!config.checkpoint_root.empty()) {
                            std::filesystem::path root = config.checkpoint_root;
                            if (recipe.uses_base()) {
                                recipe.base = (root / bm / size / "base").string();
                            }
                            for (const std::string& cat : r.selected_categories) {
                                recipe.experts.push_back(
                                    (root / bm / size / "experts" / cat).string());
                            }
                        } else {
                            // no checkpoint root: ids stand in for paths
                            if (recipe.uses_base()) recipe.base = r.base_id;
                            recipe.experts = r.expert_ids;
                        }
                        recipe.output_path = (run_dir / "checkpoints" / r.output_id).string();
                        r.recipe_hash = recipe_content_hash(recipe, r.base_id, r.expert_ids);
                        records.push_back(std::move(r));
                    }
                }
            }
        }
    }
    return records;
}

namespace {

ordered_json record_to_json(const ExperimentRecord& r, const std::string& status,
                            const std::string& output_hash, const std::string& error,
                            const std::string& started, const std::string& finished) {
    ordered_json j;
    j["recipe_hash"] = r.recipe_hash;
    j["status"] = status;
    j["base_model"] = r.base_model;
    j["size"] = r.size;
    j["method"] = r.method;
    j["seed"] = r.seed;
    j["n_experts"] = r.n_experts;
    j["selected_categories"] = r.selected_categories;
    j["base_id"] = r.base_id;
    j["expert_ids"] = r.expert_ids;
    j["output_id"] = r.output_id;
    j["output_path"] = r.recipe.output_path;
    if (!output_hash.empty()) j["output_checkpoint_hash"] = output_hash;
    if (!error.empty()) j["error"] = error;
    j["recipe"] = ordered_json::parse(recipe_to_json(r.recipe));
    j["started_at"] = started;
    j["finished_at"] = finished;
    return j;
}

void write_record_file(const std::filesystem::path& path, const ordered_json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) throw user_error("IO failure writing record file " + path.string());
}

}  // namespace

Executor default_executor() {
    return [](const ExperimentRecord& r) {
        return run_merge_recipe(r.recipe, r.output_id).output_hash;
    };
}

RunSummary run_grid(const std::vector<ExperimentRecord>& records,
                    const std::filesystem::path& run_dir, bool resume, int workers,
                    const Executor& executor) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir / "records");
    fs::create_directories(run_dir / "checkpoints");

    RunSummary summary;
    summary.total = records.size();
    std::mutex mu;
    std::atomic<std::size_t> next{0};

    auto work = [&]() {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= records.size()) return;
            const ExperimentRecord& r = records[i];
            fs::path record_path = run_dir / "records" / (r.recipe_hash + ".json");

            if (resume && fs::exists(record_path)) {
                bool done = false;
                try {
                    std::ifstream in(record_path, std::ios::binary);
                    ordered_json j = ordered_json::parse(in);
                    done = j.value("status", "") == "done" &&
                           j.value("recipe_hash", "") == r.recipe_hash;
                } catch (...) {
                    done = false;  // unreadable record: redo the cell
                }
                if (done) {
                    std::lock_guard<std::mutex> lock(mu);
                    ++summary.skipped;
                    continue;
                }
            }

            std::string started = iso_now();
            try {
                std::string hash = executor(r);
                write_record_file(record_path,
                                  record_to_json(r, "done", hash, "", started, iso_now()));
                std::lock_guard<std::mutex> lock(mu);
                ++summary.executed;
            } catch (const std::exception& e) {
                try {
                    write_record_file(record_path,
                                      record_to_json(r, "failed", "", e.what(), started,
                                                     iso_now()));
                } catch (...) {
                    // the failure itself is still reported in the summary
                }
                std::lock_guard<std::mutex> lock(mu);
                ++summary.failed;
                summary.failures.emplace_back(r.output_id, e.what());
            }
        }
    };

    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (std::thread& t : pool) t.join();
    }

    std::sort(summary.failures.begin(), summary.failures.end());
    return summary;
}

LoadedRecords load_records(const std::filesystem::path& run_dir) {
    namespace fs = std::filesystem;
    fs::path dir = run_dir / "records";
    if (!fs::is_directory(dir)) {
        throw user_error("no records directory under " + run_dir.string());
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());

    LoadedRecords out;
    for (const fs::path& f : files) {
        std::ifstream in(f, std::ios::binary);
        ordered_json j;
        try {
            j = ordered_json::parse(in);
        } catch (const std::exception& e) {
            throw user_error("invalid record file " + f.string() + ": " + e.what());
        }
        if (j.value("status", "") != "done") {
            ++out.failed;
            continue;
        }
        try {
            ExperimentRecord r;
            r.recipe = parse_recipe_json(j.at("recipe").dump(), true);
            r.selected_categories = j.at("selected_categories").get<std::vector<std::string>>();
            r.base_model = j.at("base_model").get<std::string>();
            r.size = j.at("size").get<std::string>();
            r.method = j.at("method").get<std::string>();
            r.seed = j.at("seed").get<std::int64_t>();
            r.n_experts = j.at("n_experts").get<int>();
            r.base_id = j.at("base_id").get<std::string>();
            r.expert_ids = j.at("expert_ids").get<std::vector<std::string>>();
            r.output_id = j.at("output_id").get<std::string>();
            r.recipe_hash = j.at("recipe_hash").get<std::string>();
            out.done.push_back(std::move(r));
        } catch (const user_error&) {
            throw;
        } catch (const std::exception& e) {
            throw user_error("malformed record file " + f.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace tmerge::grid
