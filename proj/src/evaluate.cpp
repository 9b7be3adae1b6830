#include "r2bd/evaluate.hpp"

#include "r2bd/error.hpp"

namespace r2bd {

MetricsReport report_from_results(const std::vector<DetectionResult>& results, const std::vector<int>& labels,
                                  double base_rate, double threshold) {
    require(results.size() == labels.size(), "one label per result required");
    std::vector<ScoredSample> samples;
    std::vector<std::pair<std::string, std::string>> failures;
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (!results[i].ok()) {
            failures.emplace_back(results[i].id, results[i].error);
            continue;
        }
        samples.push_back({results[i].id, labels[i], results[i].score});
    }
    MetricsReport report = compute_metrics(samples, base_rate, threshold);
    report.failures = std::move(failures);
    return report;
}

MetricsReport evaluate(const Detector& detector, const ModelBundle& bundle, const DatasetManifest& manifest,
                       const std::filesystem::path& image_root, const EvaluateOptions& opts) {
    Detector det = detector;
    if (opts.threshold) det.mutable_config().threshold = *opts.threshold;
    const double threshold = det.config().threshold;

    ImageTransform transform;
    if (opts.perturbation) {
        const PerturbationSpec spec = *opts.perturbation;
        const PerturbationLevels levels = opts.levels;
        transform = [spec, levels](const Tensor& image, const ManifestEntry& entry) {
            PerturbationSpec item = spec;
            item.seed = derive_seed(spec.seed, entry.id);
            return apply_perturbation(image, item, levels);
        };
    }
    const std::vector<DetectionResult> results = predict_batch(det, manifest, image_root, bundle, opts.bias, transform);
    std::vector<int> labels;
    labels.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) labels.push_back(e.is_fake() ? 1 : 0);

    MetricsReport report = report_from_results(results, labels, opts.base_rate, threshold);
    if (opts.perturbation) {
        const PerturbationSpec& s = *opts.perturbation;
        report.perturbation = {{"kind", to_string(s.kind)},
                               {"level", s.level},
                               {"intensity", opts.levels.intensity(s.kind, s.level)},
                               {"seed", s.seed}};
        if (s.kind == PerturbationKind::jpeg) report.perturbation["codec"] = jpeg_codec_version();
    }
    return report;
}

MetricsReport evaluate_checkpoints(const std::filesystem::path& detector_ckpt, const std::filesystem::path& bundle_ckpt,
                                   const DatasetManifest& manifest, const std::filesystem::path& image_root,
                                   const EvaluateOptions& opts) {
    const Detector det = Detector::load(detector_ckpt);
    const ModelBundle bundle = load_bundle(bundle_ckpt);
    return evaluate(det, bundle, manifest, image_root, opts);
}

std::vector<SweepCell> robustness_sweep(const Detector& detector, const ModelBundle& bundle,
                                        const DatasetManifest& manifest, const std::filesystem::path& image_root,
                                        const EvaluateOptions& base, std::uint64_t seed) {
    std::vector<SweepCell> cells;
    for (PerturbationKind kind : kAllPerturbations) {
        for (int level = 1; level <= 5; ++level) {
            EvaluateOptions opts = base;
            opts.perturbation = PerturbationSpec{kind, level, seed};
            cells.push_back({*opts.perturbation, evaluate(detector, bundle, manifest, image_root, opts)});
        }
    }
    return cells;
}

nlohmann::json sweep_summary(const std::vector<SweepCell>& cells) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& c : cells) out[to_string(c.spec.kind)][std::to_string(c.spec.level)] = c.report.auroc;
    return out;
}

}  // namespace r2bd
