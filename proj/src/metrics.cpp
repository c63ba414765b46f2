#include "tmerge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "tmerge/error.hpp"

namespace tmerge::metrics {

const char* split_name(Split s) { return s == Split::HeldIn ? "held_in" : "held_out"; }

Split split_from_name(const std::string& name) {
    if (name == "held_in") return Split::HeldIn;
    if (name == "held_out") return Split::HeldOut;
    throw user_error("unknown split: " + name + " (expected held_in or held_out)");
}

void ScoreTable::add(ScoreRow row) {
    auto key = std::make_tuple(row.model_id, row.dataset_id, row.seed);
    if (index_.count(key)) {
        throw user_error("duplicate score row for (" + row.model_id + ", " + row.dataset_id +
                         ", seed " + std::to_string(row.seed) + ")");
    }
    index_[key] = rows_.size();
    rows_.push_back(std::move(row));
}

const ScoreRow* ScoreTable::find(const std::string& model_id, const std::string& dataset_id,
                                 std::int64_t seed) const {
    auto it = index_.find(std::make_tuple(model_id, dataset_id, seed));
    return it == index_.end() ? nullptr : &rows_[it->second];
}

const ScoreRow* ScoreTable::find_reference(const std::string& model_id,
                                           const std::string& dataset_id,
                                           std::int64_t seed) const {
    if (const ScoreRow* r = find(model_id, dataset_id, seed)) return r;
    return find(model_id, dataset_id, 0);
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

ScoreTable ScoreTable::parse_csv(const std::string& text) {
    static const char* kHeader = "model_id,dataset_id,category_id,split,seed,score";
    ScoreTable table;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            if (line != kHeader) {
                throw user_error("bad scores CSV header (line 1): expected \"" +
                                 std::string(kHeader) + "\"");
            }
            saw_header = true;
            continue;
        }
        std::vector<std::string> f = split_fields(line);
        if (f.size() != 6) {
            throw user_error("bad scores CSV row at line " + std::to_string(lineno) +
                             ": expected 6 fields, got " + std::to_string(f.size()));
        }
        ScoreRow row;
        row.model_id = f[0];
        row.dataset_id = f[1];
        row.category_id = f[2];
        row.split = split_from_name(f[3]);
        try {
            row.seed = std::stoll(f[4]);
            row.score = std::stod(f[5]);
        } catch (const std::exception&) {
            throw user_error("bad scores CSV row at line " + std::to_string(lineno) +
                             ": seed or score is not a number");
        }
        if (!std::isfinite(row.score)) {
            throw user_error("bad scores CSV row at line " + std::to_string(lineno) +
                             ": score must be finite");
        }
        table.add(std::move(row));
    }
    if (!saw_header) throw user_error("empty scores CSV: missing header");
    return table;
}

ScoreTable ScoreTable::load_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw user_error("cannot open scores file: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_csv(buf.str());
}

double normalize_held_in(double merged_score, double expert_score) {
    if (!(expert_score > 0.0)) {
        throw user_error("expert reference score must be positive, got " +
                         std::to_string(expert_score));
    }
    return merged_score / expert_score;
}

double normalize_held_out(double merged_score, double base_score) {
    if (!(base_score > 0.0)) {
        throw user_error("base reference score must be positive, got " +
                         std::to_string(base_score));
    }
    return merged_score / base_score;
}

std::vector<NormalizedRow> normalize_scores(const std::vector<grid::ExperimentRecord>& records,
                                            const ScoreTable& scores, ExclusionTally& tally) {
    std::vector<NormalizedRow> out;
    for (const grid::ExperimentRecord& rec : records) {
        std::set<std::string> selected(rec.selected_categories.begin(),
                                       rec.selected_categories.end());
        std::map<std::string, std::pair<std::size_t, std::size_t>> category_counts;  // seen, kept

        for (const ScoreRow& row : scores.rows()) {
            if (row.model_id != rec.output_id || row.seed != rec.seed) continue;

            std::string reference_id;
            if (row.split == Split::HeldIn) {
                if (!selected.count(row.category_id)) {
                    ++tally.ignored_rows;
                    continue;
                }
                reference_id = rec.base_id + "-" + row.category_id;
            } else {
                reference_id = rec.base_id;
            }
            auto& counts = category_counts[split_name(row.split) + std::string(":") +
                                           row.category_id];
            ++counts.first;

            const ScoreRow* ref = scores.find_reference(reference_id, row.dataset_id, rec.seed);
            if (!ref) {
                ++tally.missing_reference;
                continue;
            }
            if (!(ref->score > 0.0)) {
                ++tally.nonpositive_reference;
                continue;
            }

            NormalizedRow n;
            n.output_id = rec.output_id;
            n.method = rec.method;
            n.size = rec.size;
            n.base_model = rec.base_model;
            n.n_experts = rec.n_experts;
            n.seed = rec.seed;
            n.category_id = row.category_id;
            n.dataset_id = row.dataset_id;
            n.split = row.split;
            n.value = row.split == Split::HeldIn ? normalize_held_in(row.score, ref->score)
                                                 : normalize_held_out(row.score, ref->score);
            n.reference_id = ref->model_id;
            n.reference_seed = ref->seed;
            n.reference_score = ref->score;
            out.push_back(std::move(n));
            ++counts.second;
        }

        for (const auto& [cat, counts] : category_counts) {
            if (counts.first > 0 && counts.second == 0) ++tally.dropped_categories;
        }
    }
    return out;
}

std::optional<double> aggregate(const std::vector<NormalizedRow>& rows) {
    if (rows.empty()) return std::nullopt;

    // seed -> category -> dataset -> value, ordered maps so every level
    // combines its children in ascending key order.
    std::map<std::int64_t, std::map<std::string, std::map<std::string, double>>> tree;
    for (const NormalizedRow& r : rows) {
        tree[r.seed][r.category_id][r.dataset_id] = r.value;
    }

    double seed_sum = 0.0;
    std::size_t seed_count = 0;
    for (const auto& [seed, categories] : tree) {
        double cat_sum = 0.0;
        std::size_t cat_count = 0;
        for (const auto& [cat, datasets] : categories) {
            double ds_sum = 0.0;
            std::size_t ds_count = 0;
            for (const auto& [ds, value] : datasets) {
                ds_sum += value;
                ++ds_count;
            }
            cat_sum += ds_sum / static_cast<double>(ds_count);
            ++cat_count;
        }
        seed_sum += cat_sum / static_cast<double>(cat_count);
        ++seed_count;
    }
    return seed_sum / static_cast<double>(seed_count);
}

std::vector<ReportTable> build_report(const std::vector<grid::ExperimentRecord>& records,
                                      const ScoreTable& scores, ExclusionTally& tally) {
    std::vector<NormalizedRow> rows = normalize_scores(records, scores, tally);

    // Axis orders follow first appearance in the records.
    std::vector<std::string> bases, methods, sizes;
    std::vector<int> counts;
    for (const grid::ExperimentRecord& r : records) {
        if (std::find(bases.begin(), bases.end(), r.base_model) == bases.end()) {
            bases.push_back(r.base_model);
        }
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) {
            methods.push_back(r.method);
        }
        if (std::find(sizes.begin(), sizes.end(), r.size) == sizes.end()) {
            sizes.push_back(r.size);
        }
        if (std::find(counts.begin(), counts.end(), r.n_experts) == counts.end()) {
            counts.push_back(r.n_experts);
        }
    }
    std::sort(counts.begin(), counts.end());

    std::vector<ReportTable> tables;
    for (const std::string& base : bases) {
        for (Split split : {Split::HeldIn, Split::HeldOut}) {
            bool any = std::any_of(rows.begin(), rows.end(), [&](const NormalizedRow& r) {
                return r.base_model == base && r.split == split;
            });
            if (!any) continue;

            ReportTable t;
            t.base_model = base;
            t.split = split;
            t.methods = methods;
            for (const std::string& size : sizes) {
                for (int n : counts) t.columns.emplace_back(size, n);
            }
            for (const std::string& method : methods) {
                std::vector<std::optional<double>> line;
                for (const auto& [size, n] : t.columns) {
                    std::vector<NormalizedRow> cell;
                    for (const NormalizedRow& r : rows) {
                        if (r.base_model == base && r.split == split && r.method == method &&
                            r.size == size && r.n_experts == n) {
                            cell.push_back(r);
                        }
                    }
                    line.push_back(aggregate(cell));
                }
                t.cells.push_back(std::move(line));
            }
            tables.push_back(std::move(t));
        }
    }
    return tables;
}

std::string format_value(double v) {
    long long cents = std::llrint(v * 100.0);  // round-half-even under the default FP mode
    long long mag = cents < 0 ? -cents : cents;
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%s%lld.%02lld", cents < 0 ? "-" : "", mag / 100, mag % 100);
    return buf;
}

namespace {

std::string column_label(const std::pair<std::string, int>& col) {
    return col.first + " n=" + std::to_string(col.second);
}

std::string cell_text(const std::optional<double>& v) {
    return v ? format_value(*v) : std::string("—");
}

}  // namespace

std::string render_markdown(const ReportTable& table) {
    std::ostringstream out;
    out << "## " << split_name(table.split) << " — base " << table.base_model << "\n\n";
    out << "| method |";
    for (const auto& col : table.columns) out << " " << column_label(col) << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < table.columns.size(); ++i) out << "---|";
    out << "\n";
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
        out << "| " << table.methods[m] << " |";
        for (const auto& cell : table.cells[m]) out << " " << cell_text(cell) << " |";
        out << "\n";
    }
    return out.str();
}

std::string render_csv(const ReportTable& table) {
    std::ostringstream out;
    out << "base_model,split,method";
    for (const auto& col : table.columns) {
        out << "," << col.first << "-n" << col.second;
    }
    out << "\n";
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
        out << table.base_model << "," << split_name(table.split) << "," << table.methods[m];
        for (const auto& cell : table.cells[m]) out << "," << cell_text(cell);
        out << "\n";
    }
    return out.str();
}

std::string render_report(const std::vector<ReportTable>& tables, const ExclusionTally& tally,
                          const std::string& format) {
    if (format != "markdown" && format != "csv") {
        throw user_error("unknown report format: " + format + " (expected markdown or csv)");
    }
    std::ostringstream out;
    if (tables.empty()) {
        if (format == "markdown") {
            out << "## report\n\n| method |\n|---|\n\nwarning: empty summary, no rows to report\n";
        } else {
            out << "base_model,split,method\n";
            out << "# warning: empty summary, no rows to report\n";
        }
    }
    for (std::size_t i = 0; i < tables.size(); ++i) {
        out << (format == "markdown" ? render_markdown(tables[i]) : render_csv(tables[i]));
        out << "\n";
    }
    if (!tally.empty()) {
        const char* prefix = format == "csv" ? "# " : "";
        out << prefix << "exclusions:";
        bool first = true;
        auto item = [&](std::size_t n, const char* what) {
            if (n == 0) return;
            out << (first ? " " : "; ") << n << " " << what;
            first = false;
        };
        item(tally.nonpositive_reference, "rows with a non-positive reference score");
        item(tally.missing_reference, "rows with no reference score");
        item(tally.ignored_rows, "held-in rows outside the experiment's categories");
        item(tally.dropped_categories, "categories dropped after exclusions");
        item(tally.failed_records, "failed experiment records not reported");
        out << "\n";
    }
    return out.str();
}

}  // namespace tmerge::metrics
