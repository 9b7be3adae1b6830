#include "r2bd/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include "r2bd/error.hpp"

namespace r2bd {

namespace {

struct ClassCounts {
    long pos = 0;
    long neg = 0;
};

ClassCounts count_classes(std::span<const ScoredSample> samples) {
    ClassCounts c;
    for (const auto& s : samples) {
        require(s.label == 0 || s.label == 1, "labels must be 0 (real) or 1 (fake)");
        (s.label == 1 ? c.pos : c.neg)++;
    }
    require(c.pos > 0 && c.neg > 0, "metric requires both real and fake samples");
    return c;
}

/// Tie groups in descending score order: cumulative (tp, fp) after each group.
struct Group {
    double score;
    long tp;
    long fp;
};

std::vector<Group> descending_groups(std::span<const ScoredSample> samples) {
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a].score > samples[b].score; });
    std::vector<Group> groups;
    long tp = 0, fp = 0;
    for (std::size_t k = 0; k < order.size();) {
        const double s = samples[order[k]].score;
        while (k < order.size() && samples[order[k]].score == s) {
            (samples[order[k]].label == 1 ? tp : fp)++;
            ++k;
        }
        groups.push_back({s, tp, fp});
    }
    return groups;
}

}  // namespace

std::vector<RocPoint> roc_curve(std::span<const ScoredSample> samples) {
    const ClassCounts c = count_classes(samples);
    std::vector<RocPoint> pts;
    pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    for (const Group& g : descending_groups(samples))
        pts.push_back({g.score, static_cast<double>(g.fp) / c.neg, static_cast<double>(g.tp) / c.pos});
    return pts;
}

double compute_auroc(std::span<const ScoredSample> samples) {
    const std::vector<RocPoint> pts = roc_curve(samples);
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
    return area;
}

double compute_auprc(std::span<const ScoredSample> samples) {
    const ClassCounts c = count_classes(samples);
    double ap = 0.0;
    long prev_tp = 0;
    for (const Group& g : descending_groups(samples)) {
        const double precision = static_cast<double>(g.tp) / static_cast<double>(g.tp + g.fp);
        ap += static_cast<double>(g.tp - prev_tp) / c.pos * precision;
        prev_tp = g.tp;
    }
    return ap;
}

double compute_bdr(double tpr, double fpr, double base_rate, bool* undefined) {
    require(tpr >= 0.0 && tpr <= 1.0 && fpr >= 0.0 && fpr <= 1.0 && base_rate >= 0.0 && base_rate <= 1.0,
            "BDR inputs must lie in [0, 1]");
    const double num = base_rate * tpr;
    const double den = num + (1.0 - base_rate) * fpr;
    if (undefined) *undefined = den == 0.0;
    return den == 0.0 ? 0.0 : num / den;
}

double compute_eer(std::span<const ScoredSample> samples) {
    const ClassCounts c = count_classes(samples);
    // Thresholds in ascending order: each distinct score, then one above the maximum.
    std::vector<Group> groups = descending_groups(samples);
    struct Point {
        double fpr, fnr;
    };
    std::vector<Point> pts;
    pts.reserve(groups.size() + 1);
    // Threshold = g.score flags every sample with score >= g.score.
    for (auto it = groups.rbegin(); it != groups.rend(); ++it)
        pts.push_back({static_cast<double>(it->fp) / c.neg, 1.0 - static_cast<double>(it->tp) / c.pos});
    pts.push_back({0.0, 1.0});
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const double da = pts[i].fpr - pts[i].fnr;
        const double db = pts[i + 1].fpr - pts[i + 1].fnr;
        if (da == 0.0) return pts[i].fpr;
        if (da > 0.0 && db <= 0.0) {
            if (db == 0.0) return pts[i + 1].fpr;
            const double lambda = da / (da - db);
            return pts[i].fpr + lambda * (pts[i + 1].fpr - pts[i].fpr);
        }
    }
    return pts.back().fpr;  // unreachable: the sweep ends at fpr - fnr = -1
}

ConfusionCounts confusion_at(std::span<const ScoredSample> samples, double threshold) {
    ConfusionCounts c;
    for (const auto& s : samples) {
        const bool flagged = s.score >= threshold;
        if (s.label == 1) (flagged ? c.tp : c.fn)++;
        else (flagged ? c.fp : c.tn)++;
    }
    return c;
}

MetricsReport compute_metrics(std::span<const ScoredSample> samples, double base_rate, double threshold) {
    const ClassCounts classes = count_classes(samples);
    MetricsReport r;
    r.base_rate = base_rate;
    r.threshold = threshold;
    r.n_fake = classes.pos;
    r.n_real = classes.neg;
    r.counts = confusion_at(samples, threshold);
    r.acc = static_cast<double>(r.counts.tp + r.counts.tn) / static_cast<double>(r.counts.total());
    r.auroc = compute_auroc(samples);
    r.auprc = compute_auprc(samples);
    r.eer = compute_eer(samples);
    const double tpr = static_cast<double>(r.counts.tp) / classes.pos;
    const double fpr = static_cast<double>(r.counts.fp) / classes.neg;
    r.bdr = compute_bdr(tpr, fpr, base_rate, &r.bdr_undefined);
    r.roc = roc_curve(samples);
    return r;
}

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json roc = nlohmann::json::array();
    for (const auto& p : r.roc) roc.push_back({p.fpr, p.tpr});
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& [id, err] : r.failures) failures.push_back({{"id", id}, {"error", err}});
    nlohmann::json j = {{"acc", r.acc},
                        {"auroc", r.auroc},
                        {"auprc", r.auprc},
                        {"bdr", r.bdr},
                        {"bdr_undefined", r.bdr_undefined},
                        {"eer", r.eer},
                        {"base_rate", r.base_rate},
                        {"threshold", r.threshold},
                        {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}}},
                        {"n_real", r.n_real},
                        {"n_fake", r.n_fake},
                        {"roc", roc},
                        {"failures", failures}};
    if (!r.perturbation.is_null()) j["perturbation"] = r.perturbation;
    if (!r.config.is_null()) j["config"] = r.config;
    return j;
}

void write_report(const MetricsReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), "cannot write report " + path);
    out << to_json(r).dump(2) << '\n';
}

}  // namespace r2bd
