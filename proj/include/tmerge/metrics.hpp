#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tmerge/grid.hpp"

namespace tmerge::metrics {

enum class Split { HeldIn, HeldOut };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct ScoreRow {
    std::string model_id;
    std::string dataset_id;
    std::string category_id;
    Split split = Split::HeldIn;
    std::int64_t seed = 0;
    double score = 0.0;
};

// Raw evaluation scores keyed by (model_id, dataset_id, seed). Reference
// models (experts, bases) conventionally carry seed 0; lookups for a
// reference try the exact seed first, then fall back to seed 0.
class ScoreTable {
public:
    static ScoreTable parse_csv(const std::string& text);
    static ScoreTable load_csv(const std::filesystem::path& path);

    void add(ScoreRow row);
    const ScoreRow* find(const std::string& model_id, const std::string& dataset_id,
                         std::int64_t seed) const;
    const ScoreRow* find_reference(const std::string& model_id, const std::string& dataset_id,
                                   std::int64_t seed) const;
    const std::vector<ScoreRow>& rows() const { return rows_; }

private:
    std::vector<ScoreRow> rows_;
    std::map<std::tuple<std::string, std::string, std::int64_t>, std::size_t> index_;
};

// merged / reference; 1.0 is parity with the reference model.
double normalize_held_in(double merged_score, double expert_score);
double normalize_held_out(double merged_score, double base_score);

struct NormalizedRow {
    std::string output_id;
    std::string method;
    std::string size;
    std::string base_model;
    int n_experts = 0;
    std::int64_t seed = 0;
    std::string category_id;
    std::string dataset_id;
    Split split = Split::HeldIn;
    double value = 0.0;
    // Normalization reference provenance.
    std::string reference_id;
    std::int64_t reference_seed = 0;
    double reference_score = 0.0;
};

struct ExclusionTally {
    std::size_t nonpositive_reference = 0;
    std::size_t missing_reference = 0;
    std::size_t ignored_rows = 0;       // held-in rows outside the experiment's categories
    std::size_t dropped_categories = 0; // categories whose datasets were all excluded
    std::size_t failed_records = 0;

    bool empty() const {
        return nonpositive_reference == 0 && missing_reference == 0 && ignored_rows == 0 &&
               dropped_categories == 0 && failed_records == 0;
    }
};

// Joins experiment records with raw scores: held-in rows normalize by the
// category expert, held-out rows by the base model. Non-positive or missing
// references exclude the row and bump the tally.
std::vector<NormalizedRow> normalize_scores(const std::vector<grid::ExperimentRecord>& records,
                                            const ScoreTable& scores, ExclusionTally& tally);

// Unweighted mean over datasets within category, then over categories, then
// over seeds — exactly that order. Children are combined in ascending key
// order at every level. Returns nothing for an empty row set.
std::optional<double> aggregate(const std::vector<NormalizedRow>& rows);

struct ReportTable {
    std::string base_model;
    Split split = Split::HeldIn;
    std::vector<std::string> methods;                        // row labels
    std::vector<std::pair<std::string, int>> columns;        // (size, n_experts)
    std::vector<std::vector<std::optional<double>>> cells;   // [method][column]
};

// One table per (base_model, split), methods as rows, size x n_experts as
// columns. Axis order follows first appearance in the records.
std::vector<ReportTable> build_report(const std::vector<grid::ExperimentRecord>& records,
                                      const ScoreTable& scores, ExclusionTally& tally);

// Two decimals, round-half-even.
std::string format_value(double v);

std::string render_markdown(const ReportTable& table);
std::string render_csv(const ReportTable& table);

// Full document: every table plus an exclusion footer; format is "markdown"
// or "csv".
std::string render_report(const std::vector<ReportTable>& tables, const ExclusionTally& tally,
                          const std::string& format);

}  // namespace tmerge::metrics
