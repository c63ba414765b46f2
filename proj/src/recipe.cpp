#include "tmerge/recipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tmerge/error.hpp"
#include "tmerge/merge.hpp"
#include "tmerge/rng.hpp"
#include "tmerge/store.hpp"

namespace tmerge {

using ordered_json = nlohmann::ordered_json;

const char* method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::Average: return "average";
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::Ties: return "ties";
        case MergeMethod::DareTies: return "dare_ties";
    }
    return "unknown";
}

MergeMethod method_from_name(const std::string& name) {
    if (name == "average") return MergeMethod::Average;
    if (name == "task_arithmetic") return MergeMethod::TaskArithmetic;
    if (name == "ties") return MergeMethod::Ties;
    if (name == "dare_ties") return MergeMethod::DareTies;
    throw user_error("unknown method: " + name +
                     " (expected average, task_arithmetic, ties, or dare_ties)");
}

namespace {

const std::set<std::string> kRecipeFields = {"method",   "lambda",  "trim_density",
                                             "drop_p",   "rng_seed", "base",
                                             "experts",  "output_path", "output_dtype"};

void reject_unused(const MergeRecipe& r, bool present, const char* field, bool used) {
    if (present && !used) {
        throw user_error(std::string("field ") + field + " is not used by method " +
                         method_name(r.method));
    }
}

}  // namespace

MergeRecipe parse_recipe_json(const std::string& text, bool require_output_path) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw user_error(std::string("invalid recipe JSON: ") + e.what());
    }
    if (!j.is_object()) throw user_error("invalid recipe JSON: top level must be an object");

    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!kRecipeFields.count(it.key())) {
            throw user_error("unknown recipe field: " + it.key());
        }
    }
    if (!j.contains("method")) throw user_error("recipe is missing field method");

    MergeRecipe r;
    try {
        r.method = method_from_name(j.at("method").get<std::string>());

        if (j.contains("lambda")) r.lambda = j.at("lambda").get<double>();
        if (j.contains("trim_density")) r.trim_density = j.at("trim_density").get<double>();
        if (j.contains("drop_p")) r.drop_p = j.at("drop_p").get<double>();
        if (j.contains("rng_seed")) {
            const auto& s = j.at("rng_seed");
            if (s.is_number_integer() && s.get<long long>() < 0) {
                throw user_error("rng_seed must be non-negative");
            }
            r.rng_seed = s.get<std::uint64_t>();
        }
        if (j.contains("base")) r.base = j.at("base").get<std::string>();
        if (j.contains("experts")) r.experts = j.at("experts").get<std::vector<std::string>>();
        if (j.contains("output_path")) r.output_path = j.at("output_path").get<std::string>();
        if (j.contains("output_dtype")) {
            r.output_dtype = dtype_from_tag(j.at("output_dtype").get<std::string>());
        }
    } catch (const user_error&) {
        throw;
    } catch (const std::exception& e) {
        throw user_error(std::string("malformed recipe: ") + e.what());
    }

    reject_unused(r, j.contains("lambda"), "lambda", r.uses_lambda());
    reject_unused(r, j.contains("trim_density"), "trim_density", r.uses_density());
    reject_unused(r, j.contains("drop_p"), "drop_p", r.uses_drop_p());
    reject_unused(r, j.contains("rng_seed"), "rng_seed", r.uses_drop_p());
    reject_unused(r, j.contains("base"), "base", r.uses_base());

    if (r.uses_lambda() && !(std::isfinite(r.lambda) && r.lambda > 0.0)) {
        throw user_error("lambda out of range: " + std::to_string(r.lambda) +
                         " (must be a positive finite real)");
    }
    if (r.uses_density() && !(r.trim_density > 0.0 && r.trim_density <= 1.0)) {
        throw user_error("trim_density out of range: " + std::to_string(r.trim_density) +
                         " (must be in (0, 1])");
    }
    if (r.uses_drop_p() && !(r.drop_p >= 0.0 && r.drop_p < 1.0)) {
        throw user_error("drop_p out of range: " + std::to_string(r.drop_p) +
                         " (must be in [0, 1))");
    }
    if (r.uses_base() && r.base.empty()) {
        throw user_error("recipe is missing field base (required by method " +
                         std::string(method_name(r.method)) + ")");
    }
    if (r.experts.empty()) throw user_error("recipe field experts must list at least one checkpoint");
    if (require_output_path && r.output_path.empty()) {
        throw user_error("recipe is missing field output_path");
    }
    return r;
}

MergeRecipe load_recipe(const std::filesystem::path& path, bool require_output_path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open recipe file: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_recipe_json(buf.str(), require_output_path);
}

std::string recipe_to_json(const MergeRecipe& recipe) {
    ordered_json j;
    j["method"] = method_name(recipe.method);
    if (recipe.uses_lambda()) j["lambda"] = recipe.lambda;
    if (recipe.uses_density()) j["trim_density"] = recipe.trim_density;
    if (recipe.uses_drop_p()) {
        j["drop_p"] = recipe.drop_p;
        j["rng_seed"] = recipe.rng_seed;
    }
    if (recipe.uses_base()) j["base"] = recipe.base;
    j["experts"] = recipe.experts;
    j["output_path"] = recipe.output_path;
    if (recipe.output_dtype) j["output_dtype"] = dtype_tag(*recipe.output_dtype);
    return j.dump(2) + "\n";
}

std::string recipe_content_hash(const MergeRecipe& recipe, const std::string& base_id,
                                const std::vector<std::string>& expert_ids) {
    ordered_json j;
    j["method"] = method_name(recipe.method);
    if (recipe.uses_lambda()) j["lambda"] = recipe.lambda;
    if (recipe.uses_density()) j["trim_density"] = recipe.trim_density;
    if (recipe.uses_drop_p()) j["drop_p"] = recipe.drop_p;
    j["rng_seed"] = recipe.rng_seed;
    if (recipe.uses_base()) j["base_id"] = base_id;
    std::vector<std::string> ids = expert_ids;
    std::sort(ids.begin(), ids.end());
    j["expert_ids"] = ids;
    if (recipe.output_dtype) j["output_dtype"] = dtype_tag(*recipe.output_dtype);
    std::string s = j.dump();
    return hash_hex(fnv1a64(s));
}

MergeOutcome run_merge_recipe(const MergeRecipe& recipe, const std::string& output_model_id,
                              std::uint64_t max_shard_bytes) {
    if (recipe.output_path.empty()) throw user_error("recipe is missing field output_path");

    CheckpointManifest base;
    std::vector<CheckpointManifest> experts;
    if (recipe.uses_base()) base = open_checkpoint(recipe.base);
    for (const std::string& p : recipe.experts) experts.push_back(open_checkpoint(p));

    MergeOutcome out;
    if (recipe.uses_base()) out.base_id = base.model_id;
    for (const CheckpointManifest& e : experts) out.expert_ids.push_back(e.model_id);

    // Output dtype default: the base's storage dtype; for average (no base),
    // the canonically-first expert's. Independent of expert list order.
    DType dtype = DType::F32;
    if (recipe.output_dtype) {
        dtype = *recipe.output_dtype;
    } else if (recipe.uses_base()) {
        if (!base.tensors.empty()) dtype = base.tensors[0].dtype;
    } else {
        const CheckpointManifest* first = &experts[0];
        for (const CheckpointManifest& e : experts) {
            if (e.model_id < first->model_id) first = &e;
        }
        if (!first->tensors.empty()) dtype = first->tensors[0].dtype;
    }

    std::string model_id = output_model_id.empty()
                               ? std::string("merged-") + method_name(recipe.method)
                               : output_model_id;
    CheckpointWriter writer(recipe.output_path, model_id, dtype, max_shard_bytes);
    TensorSink sink = [&writer](DenseTensor&& t) { writer.add(t); };

    const float lambda = static_cast<float>(recipe.lambda);
    switch (recipe.method) {
        case MergeMethod::Average:
            merge_average(experts, sink);
            break;
        case MergeMethod::TaskArithmetic:
            merge_task_arithmetic(base, experts, lambda, sink);
            break;
        case MergeMethod::Ties:
            merge_ties(base, experts, lambda, recipe.trim_density, sink);
            break;
        case MergeMethod::DareTies:
            merge_dare_ties(base, experts, lambda, recipe.trim_density, recipe.drop_p,
                            recipe.rng_seed, sink);
            break;
    }
    out.manifest = writer.finish();
    out.output_hash = checkpoint_content_hash(out.manifest);
    return out;
}

}  // namespace tmerge
