#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

/// Threshold-free and thresholded metrics for a binary real/fake detector. "Positive" means fake.
namespace r2bd {

struct ScoredSample {
    std::string id;
    int label = 0;  // 1 = fake, 0 = real
    double score = 0.0;
};

/// Area under the ROC curve (trapezoidal over tie groups, i.e. the rank-sum probability).
double compute_auroc(std::span<const ScoredSample> samples);
/// Average precision with step interpolation over tie groups.
double compute_auprc(std::span<const ScoredSample> samples);
/// base_rate * tpr / (base_rate * tpr + (1 - base_rate) * fpr). A zero denominator yields 0 and
/// sets `undefined` when given.
double compute_bdr(double tpr, double fpr, double base_rate, bool* undefined = nullptr);
/// Error rate where FPR equals FNR, interpolating linearly between adjacent score thresholds.
double compute_eer(std::span<const ScoredSample> samples);

struct ConfusionCounts {
    long tp = 0, fp = 0, tn = 0, fn = 0;
    long total() const { return tp + fp + tn + fn; }
};
/// Predicted fake iff score >= threshold.
ConfusionCounts confusion_at(std::span<const ScoredSample> samples, double threshold);

struct RocPoint {
    double threshold;
    double fpr;
    double tpr;
};
/// ROC vertices from (0, 0) to (1, 1), one per distinct score (descending thresholds).
std::vector<RocPoint> roc_curve(std::span<const ScoredSample> samples);

inline constexpr double kInDatasetBaseRate = 0.6;
inline constexpr double kCrossDatasetBaseRate = 0.722;

struct MetricsReport {
    double acc = 0.0;
    double auroc = 0.0;
    double auprc = 0.0;
    double bdr = 0.0;
    bool bdr_undefined = false;
    double eer = 0.0;
    double base_rate = kInDatasetBaseRate;
    double threshold = 0.5;
    ConfusionCounts counts;
    long n_real = 0;
    long n_fake = 0;
    std::vector<RocPoint> roc;
    std::vector<std::pair<std::string, std::string>> failures;
    /// Optional context (perturbation cell, codec version, resolved config); omitted when null.
    nlohmann::json perturbation;
    nlohmann::json config;
};

/// Computes every metric from scored samples (both classes required).
MetricsReport compute_metrics(std::span<const ScoredSample> samples, double base_rate, double threshold);

nlohmann::json to_json(const MetricsReport& r);
/// Writes the report as indented JSON; byte-identical for identical reports.
void write_report(const MetricsReport& r, const std::string& path);

}  // namespace r2bd
