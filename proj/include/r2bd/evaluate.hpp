#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "r2bd/detector.hpp"
#include "r2bd/metrics.hpp"
#include "r2bd/perturb.hpp"

namespace r2bd {

struct EvaluateOptions {
    double base_rate = kInDatasetBaseRate;
    /// Overrides the detector's stored threshold when set.
    std::optional<double> threshold;
    std::optional<PerturbationSpec> perturbation;
    PerturbationLevels levels;
    BiasOptions bias;
};

/// Builds a report from per-item results; failed items are excluded from the metrics and listed.
/// `labels[i]` is 1 for fake entries.
MetricsReport report_from_results(const std::vector<DetectionResult>& results, const std::vector<int>& labels,
                                  double base_rate, double threshold);

/// Scores every manifest entry through the full pipeline (optionally perturbing each image first,
/// with a per-image noise stream derived from the entry id) and computes all metrics.
MetricsReport evaluate(const Detector& detector, const ModelBundle& bundle, const DatasetManifest& manifest,
                       const std::filesystem::path& image_root, const EvaluateOptions& opts);

/// Same as `evaluate`, loading both checkpoints from disk.
MetricsReport evaluate_checkpoints(const std::filesystem::path& detector_ckpt, const std::filesystem::path& bundle_ckpt,
                                   const DatasetManifest& manifest, const std::filesystem::path& image_root,
                                   const EvaluateOptions& opts);

struct SweepCell {
    PerturbationSpec spec;
    MetricsReport report;
};

/// Every kind x level cell of the robustness ladder.
std::vector<SweepCell> robustness_sweep(const Detector& detector, const ModelBundle& bundle,
                                        const DatasetManifest& manifest, const std::filesystem::path& image_root,
                                        const EvaluateOptions& base, std::uint64_t seed);

/// Compact per-cell AUROC summary of a sweep.
nlohmann::json sweep_summary(const std::vector<SweepCell>& cells);

}  // namespace r2bd
