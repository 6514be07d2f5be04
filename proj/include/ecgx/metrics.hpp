#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgx/matrix.hpp"

namespace ecgx::metrics {

using LabelSet = std::vector<std::string>;

struct ClassScore {
    std::string name;
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t support = 0;  // tp + fn
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct F1Report {
    std::vector<ClassScore> per_class;  // in `classes` order
    double macro = 0.0;     // unweighted mean over all classes
    double weighted = 0.0;  // support-weighted; zero-support classes drop out
};

/// Multi-label F1. Each sample carries a set of class names; single-label
/// data is the special case of one name per sample. 0/0 counts as 0.
F1Report f1_scores(const std::vector<LabelSet>& truth, const std::vector<LabelSet>& pred,
                   const std::vector<std::string>& classes);

F1Report f1_scores(const std::vector<std::string>& truth, const std::vector<std::string>& pred,
                   const std::vector<std::string>& classes);

struct AggregateStats {
    double average = 0.0;
    double median = 0.0;
    double iqr = 0.0;  // Q(0.75) - Q(0.25), linear interpolation at q(n-1)
    double cv = 0.0;   // sample standard deviation / mean
};

/// Linear-interpolation quantile at fractional index q*(n-1).
double quantile(std::span<const double> values, double q);

AggregateStats aggregate(std::span<const double> values);

enum class Vocab { icd10, physionet, edms, ptbxl };

struct LabelRule {
    Vocab vocab = Vocab::icd10;
    std::string section;
    std::string code;
    std::string target;
};

/// Source-code to class rules grouped in named sections (e.g. "superclass",
/// "mi", "bbb"). Text format, one rule per line:
///
///     [section]
///     vocab, code, class     # comment
///
/// ICD-10 codes match by prefix, ignoring dots and case ("I21.0" and "I210"
/// both match rule "I21"); other vocabularies match exactly.
class LabelMap {
public:
    static LabelMap parse(std::string_view text, std::string name = {});
    static LabelMap load(const std::filesystem::path& file);

    const std::string& name() const noexcept { return name_; }
    const std::vector<LabelRule>& rules() const noexcept { return rules_; }
    std::vector<std::string> sections() const;
    /// Target classes of the given sections (all when empty), sorted.
    std::vector<std::string> targets(const std::vector<std::string>& sections = {}) const;

    /// Classes for one code: per section, the most specific matching rule.
    /// A code equal to a target class maps to itself when no rule matches.
    LabelSet map_code(std::string_view code, const std::vector<std::string>& sections = {}) const;

private:
    std::string name_;
    std::vector<LabelRule> rules_;
};

/// Union of map_code over the codes of each sample; sorted, no duplicates.
std::vector<LabelSet> map_labels(const std::vector<LabelSet>& codes, const LabelMap& map,
                                 const std::vector<std::string>& sections = {});

/// Resolves "icd10" / "physionet" / "edms" against the label map directory
/// (ECGX_LABELMAP_DIR, else the directory shipped with the sources); any
/// other argument is taken as a file path.
std::filesystem::path labelmap_path(std::string_view name_or_path);

struct DatasetEvaluation {
    std::vector<LabelSet> predictions;
    F1Report f1;
};

/// Thresholds probability rows (prob >= threshold) into label sets and scores them.
DatasetEvaluation evaluate_dataset(const std::vector<LabelSet>& truth, const Matrix& probs,
                                   const std::vector<std::string>& classes, double threshold = 0.5);

}  // namespace ecgx::metrics
