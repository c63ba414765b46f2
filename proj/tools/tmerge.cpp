#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tmerge/error.hpp"
#include "tmerge/grid.hpp"
#include "tmerge/manifest.hpp"
#include "tmerge/merge.hpp"
#include "tmerge/metrics.hpp"
#include "tmerge/recipe.hpp"
#include "tmerge/rng.hpp"
#include "tmerge/store.hpp"
#include "tmerge/synth.hpp"
#include "tmerge/version.hpp"

namespace {

using ordered_json = nlohmann::ordered_json;
using namespace tmerge;

int default_workers() {
    if (const char* env = std::getenv("TMERGE_WORKERS")) {
        int w = std::atoi(env);
        if (w >= 1) return w;
    }
    return 1;
}

std::string slurp(const std::filesystem::path& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error(std::string("cannot open ") + what + ": " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw user_error("cannot write " + path.string());
}

// ---- merge ----

struct MergeArgs {
    std::string recipe_path;
    std::string output;
    std::string method;
    std::string base;
    std::string output_dtype;
    std::string model_id;
    double lambda = 0.0;
    double trim_density = 0.0;
    double drop_p = -1.0;
    std::int64_t rng_seed = 0;
    std::uint64_t max_shard_bytes = kDefaultMaxShardBytes;
    bool has_lambda = false, has_density = false, has_drop_p = false, has_seed = false;
};

int cmd_merge(const MergeArgs& a) {
    // Flag overrides are applied to the recipe document before validation so
    // the presence rules treat them exactly like recipe fields.
    ordered_json j;
    try {
        j = ordered_json::parse(slurp(a.recipe_path, "recipe file"));
    } catch (const user_error&) {
        throw;
    } catch (const std::exception& e) {
        throw user_error(std::string("invalid recipe JSON: ") + e.what());
    }
    if (!j.is_object()) throw user_error("invalid recipe JSON: top level must be an object");
    if (!a.method.empty()) j["method"] = a.method;
    if (!a.base.empty()) j["base"] = a.base;
    if (!a.output.empty()) j["output_path"] = a.output;
    if (!a.output_dtype.empty()) j["output_dtype"] = a.output_dtype;
    if (a.has_lambda) j["lambda"] = a.lambda;
    if (a.has_density) j["trim_density"] = a.trim_density;
    if (a.has_drop_p) j["drop_p"] = a.drop_p;
    if (a.has_seed) j["rng_seed"] = a.rng_seed;

    MergeRecipe recipe = parse_recipe_json(j.dump(), true);

    std::cerr << "merging " << recipe.experts.size() << " experts with method "
              << method_name(recipe.method) << " -> " << recipe.output_path << "\n";
    MergeOutcome outcome = run_merge_recipe(recipe, a.model_id, a.max_shard_bytes);

    // Provenance sidecar: effective recipe, content hashes of all inputs and
    // the output, and the tool version.
    ordered_json prov;
    prov["tool_version"] = kToolVersion;
    prov["recipe"] = ordered_json::parse(recipe_to_json(recipe));
    prov["recipe_hash"] = recipe_content_hash(recipe, outcome.base_id, outcome.expert_ids);
    if (recipe.uses_base()) {
        prov["base_id"] = outcome.base_id;
        prov["base_hash"] = checkpoint_content_hash(open_checkpoint(recipe.base));
    }
    prov["expert_ids"] = outcome.expert_ids;
    ordered_json expert_hashes = ordered_json::array();
    for (const std::string& p : recipe.experts) {
        expert_hashes.push_back(checkpoint_content_hash(open_checkpoint(p)));
    }
    prov["expert_hashes"] = expert_hashes;
    prov["output_model_id"] = outcome.manifest.model_id;
    prov["output_hash"] = outcome.output_hash;
    write_text(std::filesystem::path(recipe.output_path) / "provenance.json",
               prov.dump(2) + "\n");

    ordered_json result;
    result["output_path"] = recipe.output_path;
    result["output_hash"] = outcome.output_hash;
    result["recipe_hash"] = prov["recipe_hash"];
    std::cout << result.dump(2) << "\n";
    return 0;
}

// ---- inspect ----

int cmd_inspect(const std::string& path, bool with_tensors) {
    CheckpointManifest m = open_checkpoint(path);
    ordered_json j;
    j["model_id"] = m.model_id;
    j["tensor_count"] = m.tensors.size();
    j["total_params"] = m.total_params;
    j["shards"] = m.shard_paths;
    if (with_tensors) {
        ordered_json ts = ordered_json::array();
        for (const TensorMeta& t : m.tensors) {
            ordered_json jt;
            jt["name"] = t.name;
            jt["dtype"] = dtype_tag(t.dtype);
            jt["shape"] = t.shape;
            jt["shard"] = t.shard_id;
            jt["offset"] = t.byte_offset;
            jt["length"] = t.byte_length;
            ts.push_back(std::move(jt));
        }
        j["tensors"] = std::move(ts);
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

// ---- diff ----

int cmd_diff(const std::string& base_path, const std::vector<std::string>& expert_paths,
             double threshold) {
    CheckpointManifest base = open_checkpoint(base_path);
    std::vector<TaskVector> tvs;
    ordered_json j;
    ordered_json experts = ordered_json::array();
    for (const std::string& p : expert_paths) {
        CheckpointManifest expert = open_checkpoint(p);
        TaskVector tv = compute_task_vector(expert, base);
        ordered_json je;
        je["expert_id"] = tv.expert_id;
        ordered_json tensors = ordered_json::array();
        for (const DenseTensor& d : tv.deltas) {
            std::size_t nonzero = 0, pos = 0, neg = 0;
            double l2 = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i) {
                float x = d.data()[i];
                l2 += static_cast<double>(x) * static_cast<double>(x);
                if (std::fabs(x) > threshold) ++nonzero;
                if (x > 0.0f) ++pos;
                if (x < 0.0f) ++neg;
            }
            ordered_json jt;
            jt["name"] = d.name();
            jt["l2"] = std::sqrt(l2);
            jt["nonzero_fraction"] =
                d.size() == 0 ? 0.0 : static_cast<double>(nonzero) / static_cast<double>(d.size());
            jt["sign_balance"] = (pos + neg) == 0
                                     ? 0.0
                                     : (static_cast<double>(pos) - static_cast<double>(neg)) /
                                           static_cast<double>(pos + neg);
            tensors.push_back(std::move(jt));
        }
        je["tensors"] = std::move(tensors);
        experts.push_back(std::move(je));
        tvs.push_back(std::move(tv));
    }
    j["base_id"] = base.model_id;
    j["experts"] = std::move(experts);
    if (tvs.size() >= 2) {
        synth::ConflictStats stats = synth::conflict_rate(tvs);
        j["pairwise_conflict_rate"] = stats.rate;
        j["overlapping_params"] = stats.overlapping;
        j["no_overlap"] = stats.no_overlap;
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

// ---- grid ----

int cmd_grid(const std::string& config_path, const std::string& run_dir, bool resume, int workers,
             bool dry_run) {
    grid::GridConfig config = grid::load_grid_config(config_path);
    std::vector<grid::ExperimentRecord> records = grid::expand_grid(config, run_dir);
    std::cout << "planned records: " << records.size() << "\n";
    if (dry_run) return 0;

    std::size_t done = 0;
    grid::Executor executor = [&](const grid::ExperimentRecord& r) {
        std::cerr << "[" << ++done << "/" << records.size() << "] " << r.output_id << "\n";
        return grid::default_executor()(r);
    };
    grid::RunSummary summary = grid::run_grid(records, run_dir, resume, workers, executor);
    std::cout << "executed: " << summary.executed << "\n";
    std::cout << "skipped: " << summary.skipped << "\n";
    std::cout << "failed: " << summary.failed << "\n";
    for (const auto& [id, err] : summary.failures) {
        std::cout << "failure: " << id << ": " << err << "\n";
    }
    return summary.failed == 0 ? 0 : 1;
}

// ---- report ----

int cmd_report(const std::string& run_dir, const std::string& scores_path,
               const std::string& format, const std::string& out_path) {
    grid::LoadedRecords loaded = grid::load_records(run_dir);
    metrics::ScoreTable scores = metrics::ScoreTable::load_csv(scores_path);
    metrics::ExclusionTally tally;
    tally.failed_records = loaded.failed;
    std::vector<metrics::ReportTable> tables =
        metrics::build_report(loaded.done, scores, tally);
    std::string text = metrics::render_report(tables, tally, format);
    if (out_path.empty()) {
        std::cout << text;
    } else {
        write_text(out_path, text);
        std::cerr << "report written to " << out_path << "\n";
    }
    return 0;
}

// ---- synth ----

int cmd_synth(const std::string& spec_path, const std::string& out_dir,
              const std::string& dtype_tag_str, std::uint64_t max_shard_bytes) {
    synth::FamilySpec spec = synth::load_family_spec(spec_path);
    DType dtype = dtype_tag_str.empty() ? DType::F32 : dtype_from_tag(dtype_tag_str);
    std::cerr << "generating family " << spec.family_id << " with " << spec.n_experts
              << " experts\n";
    synth::FamilyPaths paths = synth::gen_family(spec, out_dir, dtype, max_shard_bytes);
    ordered_json j;
    j["base"] = paths.base.string();
    ordered_json es = ordered_json::array();
    for (const auto& p : paths.experts) es.push_back(p.string());
    j["experts"] = std::move(es);
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"checkpoint merging toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    MergeArgs margs;
    CLI::App* merge = app.add_subcommand("merge", "merge checkpoints per a recipe file");
    merge->add_option("--recipe", margs.recipe_path, "recipe JSON path")->required();
    merge->add_option("--output", margs.output, "output checkpoint directory (overrides recipe)");
    merge->add_option("--method", margs.method, "merge method (overrides recipe)");
    merge->add_option("--base", margs.base, "base checkpoint path (overrides recipe)");
    merge->add_option("--output-dtype", margs.output_dtype, "f32, bf16, or f16 (overrides recipe)");
    merge->add_option("--model-id", margs.model_id, "model_id for the merged checkpoint");
    auto* fl = merge->add_option("--lambda", margs.lambda, "scaling factor (overrides recipe)");
    auto* fd = merge->add_option("--trim-density", margs.trim_density,
                                 "trim density (overrides recipe)");
    auto* fp = merge->add_option("--drop-p", margs.drop_p, "drop probability (overrides recipe)");
    auto* fs = merge->add_option("--rng-seed", margs.rng_seed, "rng seed (overrides recipe)");
    merge->add_option("--max-shard-bytes", margs.max_shard_bytes, "shard size budget in bytes");

    std::string inspect_path;
    bool inspect_tensors = false;
    CLI::App* inspect = app.add_subcommand("inspect", "print a checkpoint's manifest summary");
    inspect->add_option("path", inspect_path, "checkpoint directory or safetensors file")
        ->required();
    inspect->add_flag("--tensors", inspect_tensors, "include the per-tensor listing");

    std::string diff_base;
    std::vector<std::string> diff_experts;
    double diff_threshold = 0.0;
    CLI::App* diff = app.add_subcommand("diff", "task-vector statistics of experts vs a base");
    diff->add_option("--base", diff_base, "base checkpoint path")->required();
    diff->add_option("experts", diff_experts, "expert checkpoint paths")->required();
    diff->add_option("--threshold", diff_threshold, "magnitude threshold for nonzero fraction");

    std::string grid_config, grid_run_dir;
    bool grid_resume = false, grid_dry = false;
    int grid_workers = default_workers();
    CLI::App* gridc = app.add_subcommand("grid", "expand and execute an experiment grid");
    gridc->add_option("--config", grid_config, "grid config JSON path")->required();
    gridc->add_option("--run-dir", grid_run_dir, "run directory for records and outputs")
        ->required();
    gridc->add_flag("--resume", grid_resume, "skip records already completed");
    gridc->add_option("--workers", grid_workers, "parallel worker count (default TMERGE_WORKERS)");
    gridc->add_flag("--dry-run", grid_dry, "only print the planned record count");

    std::string report_run_dir, report_scores, report_format = "markdown", report_out;
    CLI::App* report = app.add_subcommand("report", "normalized-performance report tables");
    report->add_option("--run-dir", report_run_dir, "grid run directory")->required();
    report->add_option("--scores", report_scores, "scores CSV path")->required();
    report->add_option("--format", report_format, "markdown or csv");
    report->add_option("--out", report_out, "output file (default stdout)");

    std::string synth_spec, synth_out, synth_dtype;
    std::uint64_t synth_max_shard = kDefaultMaxShardBytes;
    CLI::App* synthc = app.add_subcommand("synth", "generate a synthetic base/expert family");
    synthc->add_option("--spec", synth_spec, "family spec JSON path")->required();
    synthc->add_option("--out", synth_out, "output directory")->required();
    synthc->add_option("--dtype", synth_dtype, "storage dtype (default f32)");
    synthc->add_option("--max-shard-bytes", synth_max_shard, "shard size budget in bytes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        margs.has_lambda = fl->count() > 0;
        margs.has_density = fd->count() > 0;
        margs.has_drop_p = fp->count() > 0;
        margs.has_seed = fs->count() > 0;

        if (merge->parsed()) return cmd_merge(margs);
        if (inspect->parsed()) return cmd_inspect(inspect_path, inspect_tensors);
        if (diff->parsed()) return cmd_diff(diff_base, diff_experts, diff_threshold);
        if (gridc->parsed()) {
            return cmd_grid(grid_config, grid_run_dir, grid_resume, grid_workers, grid_dry);
        }
        if (report->parsed()) {
            return cmd_report(report_run_dir, report_scores, report_format, report_out);
        }
        if (synthc->parsed()) {
            return cmd_synth(synth_spec, synth_out, synth_dtype, synth_max_shard);
        }
        return 1;
    } catch (const user_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}
