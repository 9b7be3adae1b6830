#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "r2bd/error.hpp"
#include "r2bd/metrics.hpp"
#include "r2bd/rng.hpp"

using namespace r2bd;

namespace {

std::vector<ScoredSample> random_samples(int n, std::uint64_t seed, int grid = 0) {
    Rng rng(seed);
    std::vector<ScoredSample> out;
    for (int i = 0; i < n; ++i) {
        const int label = rng.uniform() < 0.45 ? 1 : 0;
        // Fakes score a little higher on average; `grid` > 0 quantizes scores to force ties.
        double s = rng.uniform() + 0.3 * label;
        if (grid > 0) s = std::floor(s * grid) / grid;
        out.push_back({"s" + std::to_string(i), label, s});
    }
    out[0].label = 1;
    out[1].label = 0;
    return out;
}

double pairwise_auroc(const std::vector<ScoredSample>& s) {
    double wins = 0.0;
    long pairs = 0;
    for (const auto& f : s)
        for (const auto& r : s) {
            if (f.label != 1 || r.label != 0) continue;
            ++pairs;
            wins += f.score > r.score ? 1.0 : (f.score == r.score ? 0.5 : 0.0);
        }
    return wins / static_cast<double>(pairs);
}

// Average precision by enumerating every distinct threshold and recounting from scratch.
double threshold_enumeration_ap(const std::vector<ScoredSample>& s) {
    std::set<double, std::greater<>> thresholds;
    long pos = 0;
    for (const auto& x : s) {
        thresholds.insert(x.score);
        pos += x.label;
    }
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        long tp = 0, flagged = 0;
        for (const auto& x : s)
            if (x.score >= t) {
                ++flagged;
                tp += x.label;
            }
        const double recall = static_cast<double>(tp) / pos;
        ap += (recall - prev_recall) * static_cast<double>(tp) / flagged;
        prev_recall = recall;
    }
    return ap;
}

// Dense sweep of thresholds; the crossing is located between consecutive distinct operating
// points and interpolated linearly there.
double grid_eer(const std::vector<ScoredSample>& s, int points) {
    double lo = 1e300, hi = -1e300;
    long pos = 0, neg = 0;
    for (const auto& x : s) {
        lo = std::min(lo, x.score);
        hi = std::max(hi, x.score);
        (x.label ? pos : neg)++;
    }
    std::vector<std::pair<double, double>> ops;  // (fpr, fnr), thresholds ascending
    for (int k = 0; k <= points; ++k) {
        const double t = lo + (hi - lo + 1e-3) * k / points;
        long fp = 0, fn = 0;
        for (const auto& x : s) {
            if (x.label == 0 && x.score >= t) ++fp;
            if (x.label == 1 && x.score < t) ++fn;
        }
        const std::pair<double, double> p{static_cast<double>(fp) / neg, static_cast<double>(fn) / pos};
        if (ops.empty() || ops.back() != p) ops.push_back(p);
    }
    for (std::size_t i = 0; i + 1 < ops.size(); ++i) {
        const double da = ops[i].first - ops[i].second, db = ops[i + 1].first - ops[i + 1].second;
        if (da == 0.0) return ops[i].first;
        if (da > 0.0 && db <= 0.0) return ops[i].first + da / (da - db) * (ops[i + 1].first - ops[i].first);
    }
    return -1.0;
}

}  // namespace

TEST(Auroc, TrivialCases) {
    const std::vector<ScoredSample> separated{{"a", 1, 0.9}, {"b", 1, 0.8}, {"c", 0, 0.2}, {"d", 0, 0.1}};
    EXPECT_EQ(compute_auroc(separated), 1.0);
    const std::vector<ScoredSample> tied{{"a", 1, 0.5}, {"b", 0, 0.5}, {"c", 0, 0.5}};
    EXPECT_EQ(compute_auroc(tied), 0.5);
    EXPECT_THROW(compute_auroc(std::vector<ScoredSample>{{"a", 1, 0.1}}), ValidationError);
}

TEST(Auroc, MatchesPairwiseOracle) {
    for (int grid : {0, 20}) {
        const auto s = random_samples(200, 1 + grid, grid);
        EXPECT_NEAR(compute_auroc(s), pairwise_auroc(s), 1e-12) << "grid " << grid;
    }
}

TEST(Auroc, InvariantUnderIncreasingTransforms) {
    auto s = random_samples(150, 3);
    const double base = compute_auroc(s);
    for (auto& x : s) x.score = std::exp(3.0 * x.score) - 7.0;
    EXPECT_EQ(compute_auroc(s), base);
}

TEST(Auprc, TrivialAndTiedCases) {
    const std::vector<ScoredSample> perfect{{"a", 1, 0.9}, {"b", 0, 0.2}, {"c", 1, 0.7}};
    EXPECT_EQ(compute_auprc(perfect), 1.0);
    std::vector<ScoredSample> tied;
    for (int i = 0; i < 7; ++i) tied.push_back({"t" + std::to_string(i), i < 3 ? 1 : 0, 0.25});
    EXPECT_NEAR(compute_auprc(tied), 3.0 / 7.0, 1e-15);
    EXPECT_NEAR(compute_auprc(tied), threshold_enumeration_ap(tied), 1e-15);
}

TEST(Auprc, MatchesThresholdEnumerationOracle) {
    for (int grid : {0, 15}) {
        const auto s = random_samples(200, 5 + grid, grid);
        EXPECT_NEAR(compute_auprc(s), threshold_enumeration_ap(s), 1e-12) << "grid " << grid;
    }
}

TEST(Bdr, IdentitiesAndFormula) {
    EXPECT_EQ(compute_bdr(1.0, 0.0, 0.3), 1.0);
    for (double b : {0.2, 0.6, 0.722}) EXPECT_NEAR(compute_bdr(0.37, 0.37, b), b, 1e-15);
    EXPECT_NEAR(compute_bdr(0.9, 0.1, 0.6), 0.54 / 0.58, 1e-15);
    EXPECT_EQ(compute_bdr(0.4, 0.2, 1.0), 1.0);
    double prev = 0.0;
    for (int k = 0; k <= 20; ++k) {
        const double v = compute_bdr(0.7, 0.3, k / 20.0);
        EXPECT_GE(v, prev);
        prev = v;
    }
    bool undefined = false;
    EXPECT_EQ(compute_bdr(0.0, 0.0, 0.6, &undefined), 0.0);
    EXPECT_TRUE(undefined);
    compute_bdr(0.5, 0.0, 0.6, &undefined);
    EXPECT_FALSE(undefined);
    EXPECT_THROW(compute_bdr(1.2, 0.0, 0.6), ValidationError);
}

TEST(Eer, TrivialCases) {
    const std::vector<ScoredSample> separated{{"a", 1, 0.9}, {"b", 1, 0.8}, {"c", 0, 0.2}, {"d", 0, 0.1}};
    EXPECT_EQ(compute_eer(separated), 0.0);
    std::vector<ScoredSample> inverted = separated;
    for (auto& x : inverted) x.score = -x.score;
    EXPECT_EQ(compute_eer(inverted), 1.0);
}

TEST(Eer, MatchesDenseGridOracle) {
    // Scores on a 1/1000 grid so that a 1e5-point sweep visits every operating point.
    for (std::uint64_t seed : {7u, 8u, 9u}) {
        const auto s = random_samples(200, seed, 1000);
        const double oracle = grid_eer(s, 100000);
        ASSERT_GE(oracle, 0.0);
        EXPECT_NEAR(compute_eer(s), oracle, 1e-6);
        const double e = compute_eer(s);
        EXPECT_GE(e, 0.0);
        EXPECT_LE(e, 1.0);
    }
}

TEST(Eer, LabelNegationAndReflection) {
    const auto s = random_samples(200, 10);
    const double e = compute_eer(s);
    auto negated = s;
    for (auto& x : negated) x.label = 1 - x.label;
    // Swapping the classes swaps FPR with 1 - FNR: the crossing stays, the rate becomes 1 - EER.
    EXPECT_NEAR(compute_eer(negated), 1.0 - e, 1e-12);
    auto reflected = negated;
    for (auto& x : reflected) x.score = -x.score;
    EXPECT_NEAR(compute_eer(reflected), e, 1e-12);
}

TEST(Metrics, FourSampleHandCalculation) {
    const std::vector<ScoredSample> s{{"f1", 1, 0.9}, {"r1", 0, 0.6}, {"f2", 1, 0.4}, {"r2", 0, 0.1}};
    const MetricsReport r = compute_metrics(s, 0.6, 0.5);
    EXPECT_EQ(r.counts.tp, 1);
    EXPECT_EQ(r.counts.fp, 1);
    EXPECT_EQ(r.counts.tn, 1);
    EXPECT_EQ(r.counts.fn, 1);
    EXPECT_DOUBLE_EQ(r.acc, 0.5);
    EXPECT_DOUBLE_EQ(r.auroc, 0.75);
    EXPECT_NEAR(r.auprc, 0.5 + 0.5 * 2.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(r.eer, 0.5);
    EXPECT_NEAR(r.bdr, 0.6, 1e-15);
    EXPECT_EQ(r.n_fake, 2);
    EXPECT_EQ(r.roc.size(), 5u);
    EXPECT_EQ(r.roc.back().fpr, 1.0);
    EXPECT_EQ(r.roc.back().tpr, 1.0);
}

TEST(Metrics, AccuracyMatchesOwnCounts) {
    const auto s = random_samples(120, 11);
    for (double th : {0.2, 0.5, 0.9}) {
        const MetricsReport r = compute_metrics(s, kCrossDatasetBaseRate, th);
        EXPECT_EQ(r.counts.total(), 120);
        EXPECT_DOUBLE_EQ(r.acc, static_cast<double>(r.counts.tp + r.counts.tn) / 120.0);
    }
}

TEST(Metrics, ReportsAreByteIdenticalAndOmitNullContext) {
    const auto s = random_samples(50, 12);
    MetricsReport r = compute_metrics(s, 0.6, 0.5);
    const auto dir = std::filesystem::temp_directory_path() / "r2bd_metrics";
    std::filesystem::create_directories(dir);
    write_report(r, (dir / "a.json").string());
    write_report(compute_metrics(s, 0.6, 0.5), (dir / "b.json").string());
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
    const nlohmann::json j = to_json(r);
    EXPECT_FALSE(j.contains("perturbation"));
    r.perturbation = {{"kind", "jpeg"}};
    EXPECT_EQ(to_json(r)["perturbation"]["kind"], "jpeg");
}
