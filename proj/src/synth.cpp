#include "tmerge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tmerge/error.hpp"
#include "tmerge/rng.hpp"
#include "tmerge/store.hpp"

namespace tmerge::synth {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string tensor_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "tensor_%03zu", i);
    return buf;
}

std::string default_expert_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "expert_%02d", i);
    return buf;
}

void validate_spec(const FamilySpec& spec) {
    if (spec.n_experts < 1) throw user_error("n_experts must be at least 1");
    if (!(spec.delta_scale > 0.0) || !std::isfinite(spec.delta_scale)) {
        throw user_error("delta_scale must be a positive finite real");
    }
    if (!(spec.delta_sparsity > 0.0) || !(spec.delta_sparsity <= 1.0)) {
        throw user_error("delta_sparsity out of range: must be in (0, 1]");
    }
    if (!(spec.conflict_rate >= 0.0) || !(spec.conflict_rate <= 1.0)) {
        throw user_error("conflict_rate out of range: must be in [0, 1]");
    }
    for (const auto& shape : spec.tensor_shapes) {
        for (std::int64_t d : shape) {
            if (d < 0) throw user_error("tensor shapes must have non-negative extents");
        }
    }
    if (!spec.expert_ids.empty() &&
        spec.expert_ids.size() != static_cast<std::size_t>(spec.n_experts)) {
        throw user_error("expert_ids length must equal n_experts");
    }

    if (spec.conflict_rate > 0.0) {
        // A conflict needs two experts supporting the same parameter; with the
        // expected overlap below one parameter no rate is realizable.
        double expected_overlap = 0.0;
        if (spec.n_experts >= 2) {
            const double s = spec.delta_sparsity;
            const double n = static_cast<double>(spec.n_experts);
            const double p_ge2 =
                1.0 - std::pow(1.0 - s, n) - n * s * std::pow(1.0 - s, n - 1.0);
            double elems = 0.0;
            for (const auto& shape : spec.tensor_shapes) {
                double e = 1.0;
                for (std::int64_t d : shape) e *= static_cast<double>(d);
                elems += e;
            }
            expected_overlap = elems * p_ge2;
        }
        if (spec.n_experts < 2 || expected_overlap < 1.0) {
            std::ostringstream msg;
            msg << "infeasible conflict_rate " << spec.conflict_rate << ": with "
                << spec.n_experts << " experts at delta_sparsity " << spec.delta_sparsity
                << " the expected overlapping support is "
                << (spec.n_experts < 2 ? 0.0 : expected_overlap)
                << " parameters; the maximum feasible rate is 0";
            throw user_error(msg.str());
        }
    }
}

}  // namespace

FamilySpec parse_family_spec(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw user_error(std::string("invalid family spec JSON: ") + e.what());
    }
    if (!j.is_object()) throw user_error("invalid family spec JSON: top level must be an object");

    static const std::set<std::string> known = {"rng_seed",       "tensor_shapes", "n_experts",
                                                "delta_scale",    "delta_sparsity", "conflict_rate",
                                                "family_id",      "expert_ids"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) throw user_error("unknown family spec field: " + it.key());
    }

    FamilySpec spec;
    try {
        if (j.contains("rng_seed")) spec.rng_seed = j.at("rng_seed").get<std::uint64_t>();
        if (j.contains("tensor_shapes")) {
            spec.tensor_shapes = j.at("tensor_shapes").get<std::vector<std::vector<std::int64_t>>>();
        }
        if (j.contains("n_experts")) spec.n_experts = j.at("n_experts").get<int>();
        if (j.contains("delta_scale")) spec.delta_scale = j.at("delta_scale").get<double>();
        if (j.contains("delta_sparsity")) spec.delta_sparsity = j.at("delta_sparsity").get<double>();
        if (j.contains("conflict_rate")) spec.conflict_rate = j.at("conflict_rate").get<double>();
        if (j.contains("family_id")) spec.family_id = j.at("family_id").get<std::string>();
        if (j.contains("expert_ids")) {
            spec.expert_ids = j.at("expert_ids").get<std::vector<std::string>>();
        }
    } catch (const user_error&) {
        throw;
    } catch (const std::exception& e) {
        throw user_error(std::string("malformed family spec: ") + e.what());
    }
    validate_spec(spec);
    return spec;
}

FamilySpec load_family_spec(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open family spec file: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_family_spec(buf.str());
}

FamilyPaths gen_family(const FamilySpec& spec, const std::filesystem::path& out_dir, DType dtype,
                       std::uint64_t max_shard_bytes) {
    validate_spec(spec);

    std::vector<std::string> expert_ids = spec.expert_ids;
    if (expert_ids.empty()) {
        for (int i = 0; i < spec.n_experts; ++i) expert_ids.push_back(default_expert_id(i));
    }

    FamilyPaths paths;
    paths.base = out_dir / "base";

    // Base checkpoint: seeded standard normal per tensor.
    {
        CheckpointWriter w(paths.base, spec.family_id, dtype, max_shard_bytes);
        for (std::size_t t = 0; t < spec.tensor_shapes.size(); ++t) {
            DenseTensor tensor(tensor_name(t), spec.tensor_shapes[t]);
            CounterRng base_rng(spec.rng_seed, "base/" + tensor.name());
            for (std::size_t p = 0; p < tensor.size(); ++p) tensor.data()[p] = base_rng.normal(p);
            w.add(tensor);
        }
        w.finish();
    }

    const float scale = static_cast<float>(spec.delta_scale);
    for (int i = 0; i < spec.n_experts; ++i) {
        const std::string& eid = expert_ids[i];
        const std::string model_id = spec.family_id + "-" + eid;
        std::filesystem::path dir = out_dir / "experts" / eid;
        CheckpointWriter w(dir, model_id, dtype, max_shard_bytes);

        for (std::size_t t = 0; t < spec.tensor_shapes.size(); ++t) {
            DenseTensor tensor(tensor_name(t), spec.tensor_shapes[t]);
            const std::string& tname = tensor.name();
            CounterRng base_rng(spec.rng_seed, "base/" + tname);
            CounterRng sign_rng(spec.rng_seed, "sign/" + tname);
            CounterRng conflict_rng(spec.rng_seed, "conflict/" + tname);
            CounterRng support_rng(spec.rng_seed, "support/" + spec.family_id + "-" + eid + "/" + tname);
            CounterRng mag_rng(spec.rng_seed, "mag/" + model_id + "/" + tname);
            CounterRng csign_rng(spec.rng_seed, "csign/" + model_id + "/" + tname);

            // Earlier experts' support streams, to rank supporters at
            // conflicted parameters (first keeps the family sign, second gets
            // the opposite, later ones draw a fresh sign).
            std::vector<CounterRng> earlier;
            if (spec.conflict_rate > 0.0) {
                for (int jdx = 0; jdx < i; ++jdx) {
                    earlier.emplace_back(spec.rng_seed, "support/" + spec.family_id + "-" +
                                                            expert_ids[jdx] + "/" + tname);
                }
            }

            for (std::size_t p = 0; p < tensor.size(); ++p) {
                float value = base_rng.normal(p);
                if (support_rng.uniform(p) < spec.delta_sparsity) {
                    const float sigma = sign_rng.uniform(p) < 0.5 ? -1.0f : 1.0f;
                    float sgn = sigma;
                    if (spec.conflict_rate > 0.0 &&
                        conflict_rng.uniform(p) < spec.conflict_rate) {
                        int rank = 0;
                        for (const CounterRng& er : earlier) {
                            if (er.uniform(p) < spec.delta_sparsity) ++rank;
                        }
                        if (rank == 1) {
                            sgn = -sigma;
                        } else if (rank >= 2) {
                            sgn = csign_rng.uniform(p) < 0.5 ? -sigma : sigma;
                        }
                    }
                    value += sgn * std::fabs(mag_rng.normal(p)) * scale;
                }
                tensor.data()[p] = value;
            }
            w.add(tensor);
        }
        w.finish();
        paths.experts.push_back(dir);
    }
    return paths;
}

ConflictStats conflict_rate(const std::vector<TaskVector>& tvs) {
    if (tvs.size() < 2) throw user_error("conflict_rate requires at least 2 task vectors");
    const auto& first = tvs.front().deltas;
    for (const TaskVector& tv : tvs) {
        if (tv.deltas.size() != first.size()) {
            throw user_error("structure mismatch: task vectors have different tensor counts");
        }
        for (std::size_t i = 0; i < first.size(); ++i) {
            if (tv.deltas[i].name() != first[i].name() ||
                tv.deltas[i].shape() != first[i].shape()) {
                throw user_error("structure mismatch: task vector tensor " +
                                 tv.deltas[i].name() + " is not aligned");
            }
        }
    }

    ConflictStats stats;
    for (std::size_t i = 0; i < first.size(); ++i) {
        const std::size_t n = first[i].size();
        for (std::size_t p = 0; p < n; ++p) {
            int nonzero = 0;
            bool pos = false, neg = false;
            for (const TaskVector& tv : tvs) {
                float x = tv.deltas[i].data()[p];
                if (x != 0.0f) {
                    ++nonzero;
                    if (x > 0.0f) pos = true;
                    if (x < 0.0f) neg = true;
                }
            }
            if (nonzero >= 2) {
                ++stats.overlapping;
                if (pos && neg) ++stats.conflicted;
            }
        }
    }
    if (stats.overlapping == 0) {
        stats.no_overlap = true;
        stats.rate = 0.0;
    } else {
        stats.rate = static_cast<double>(stats.conflicted) / static_cast<double>(stats.overlapping);
    }
    return stats;
}

namespace {

// Flat whole-model image: tensors in name order, concatenated.
struct FlatModel {
    std::vector<float> values;
    std::vector<std::size_t> offsets;  // per tensor, into values
};

FlatModel load_flat(const CheckpointManifest& m) {
    FlatModel f;
    f.values.reserve(m.total_params);
    for (const TensorMeta& meta : m.tensors) {
        f.offsets.push_back(f.values.size());
        DenseTensor t = read_tensor(m, meta.name);
        f.values.insert(f.values.end(), t.data(), t.data() + t.size());
    }
    return f;
}

int isgn(float x) { return x > 0.0f ? 1 : (x < 0.0f ? -1 : 0); }

}  // namespace

std::vector<DenseTensor> reference_merge(const MergeRecipe& recipe, const CheckpointManifest* base,
                                         const std::vector<CheckpointManifest>& experts) {
    if (experts.empty()) throw user_error("empty expert list");
    const bool needs_base = recipe.method != MergeMethod::Average;
    if (needs_base && !base) throw user_error("method requires a base checkpoint");

    // Same canonical expert order as the streaming implementation, derived
    // independently here.
    std::vector<const CheckpointManifest*> order;
    for (const auto& e : experts) order.push_back(&e);
    std::stable_sort(order.begin(), order.end(),
                     [](const CheckpointManifest* a, const CheckpointManifest* b) {
                         return a->model_id < b->model_id;
                     });

    const CheckpointManifest& layout = needs_base ? *base : *order[0];
    std::vector<FlatModel> flats;
    for (const CheckpointManifest* m : order) flats.push_back(load_flat(*m));
    FlatModel base_flat;
    if (needs_base) base_flat = load_flat(*base);

    const std::size_t total = needs_base ? base_flat.values.size() : flats[0].values.size();
    const std::size_t n_exp = flats.size();
    std::vector<float> merged(total, 0.0f);

    if (recipe.method == MergeMethod::Average) {
        for (std::size_t p = 0; p < total; ++p) {
            double s = 0.0;
            for (const FlatModel& f : flats) s += static_cast<double>(f.values[p]);
            merged[p] = static_cast<float>(s / static_cast<double>(n_exp));
        }
    } else if (recipe.method == MergeMethod::TaskArithmetic) {
        for (std::size_t p = 0; p < total; ++p) {
            double s = 0.0;
            for (const FlatModel& f : flats) {
                s += static_cast<double>(f.values[p]) - static_cast<double>(base_flat.values[p]);
            }
            merged[p] = static_cast<float>(static_cast<double>(base_flat.values[p]) +
                                           recipe.lambda * s);
        }
    } else {
        // TIES / DARE-TIES. Task vectors, the DARE masks, the trim survivor
        // sets, and the election sums must be computed in float32 so the
        // discrete stages select exactly the same parameters as the streaming
        // path; the disjoint mean and final add are free to use double.
        std::vector<std::vector<float>> taus(n_exp, std::vector<float>(total));
        for (std::size_t i = 0; i < n_exp; ++i) {
            for (std::size_t p = 0; p < total; ++p) {
                taus[i][p] = flats[i].values[p] - base_flat.values[p];
            }
        }

        if (recipe.method == MergeMethod::DareTies) {
            const float rescale = static_cast<float>(1.0 / (1.0 - recipe.drop_p));
            for (std::size_t i = 0; i < n_exp; ++i) {
                std::uint64_t sub = dare_sub_seed(recipe.rng_seed, order[i]->model_id);
                std::size_t flat_pos = 0;
                for (std::size_t t = 0; t < layout.tensors.size(); ++t) {
                    const std::size_t count = layout.tensors[t].element_count();
                    CounterRng rng(sub, layout.tensors[t].name);
                    for (std::size_t p = 0; p < count; ++p) {
                        if (rng.uniform(p) < recipe.drop_p) {
                            taus[i][flat_pos + p] = 0.0f;
                        } else {
                            taus[i][flat_pos + p] *= rescale;
                        }
                    }
                    flat_pos += count;
                }
            }
        }

        // Trim per tensor: full stable sort by (|tau| desc, index asc), keep
        // the first ceil(density * n).
        for (std::size_t i = 0; i < n_exp; ++i) {
            std::size_t flat_pos = 0;
            for (std::size_t t = 0; t < layout.tensors.size(); ++t) {
                const std::size_t count = layout.tensors[t].element_count();
                if (count > 0 && recipe.trim_density < 1.0) {
                    std::vector<std::size_t> idx(count);
                    std::iota(idx.begin(), idx.end(), 0);
                    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                        return std::fabs(taus[i][flat_pos + a]) > std::fabs(taus[i][flat_pos + b]);
                    });
                    double kd = std::ceil(recipe.trim_density * static_cast<double>(count));
                    std::size_t k = kd >= static_cast<double>(count)
                                        ? count
                                        : static_cast<std::size_t>(kd);
                    for (std::size_t r = k; r < count; ++r) taus[i][flat_pos + idx[r]] = 0.0f;
                }
                flat_pos += count;
            }
        }

        for (std::size_t p = 0; p < total; ++p) {
            float s = 0.0f;
            for (std::size_t i = 0; i < n_exp; ++i) s += taus[i][p];
            const int g = isgn(s);
            double mean = 0.0;
            if (g != 0) {
                double sum = 0.0;
                int count = 0;
                for (std::size_t i = 0; i < n_exp; ++i) {
                    if (isgn(taus[i][p]) == g) {
                        sum += static_cast<double>(taus[i][p]);
                        ++count;
                    }
                }
                if (count > 0) mean = sum / static_cast<double>(count);
            }
            merged[p] = static_cast<float>(static_cast<double>(base_flat.values[p]) +
                                           recipe.lambda * mean);
        }
    }

    std::vector<DenseTensor> out;
    std::size_t flat_pos = 0;
    for (const TensorMeta& meta : layout.tensors) {
        DenseTensor t(meta.name, meta.shape);
        std::copy(merged.begin() + static_cast<std::ptrdiff_t>(flat_pos),
                  merged.begin() + static_cast<std::ptrdiff_t>(flat_pos + t.size()), t.data());
        flat_pos += t.size();
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace tmerge::synth
