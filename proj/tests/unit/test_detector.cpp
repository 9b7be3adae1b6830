#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "fd_check.hpp"
#include "r2bd/detector.hpp"
#include "r2bd/error.hpp"
#include "r2bd/image_io.hpp"

using namespace r2bd;
namespace fs = std::filesystem;

namespace {

DetectorConfig small_config(DetectorMode mode = DetectorMode::two_stream) {
    DetectorConfig c;
    c.mode = mode;
    c.width = 4;
    c.head_hidden = 8;
    c.heads = 2;
    c.image_size = 16;
    c.latent_size = 4;
    c.latent_channels = 4;
    c.batch_size = 8;
    c.epochs = 3;
    c.learning_rate = 3e-3;
    return c;
}

DetectorBatch random_batch(int n, const DetectorConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    DetectorBatch b;
    b.rgb = abs(rng.normal_tensor({n, 3, c.image_size, c.image_size}));
    b.latent = abs(rng.normal_tensor({n, c.latent_channels, c.latent_size, c.latent_size}));
    for (int i = 0; i < n; ++i) b.labels.push_back(i % 2);
    return b;
}

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("r2bd_det_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double dot_row(const Tensor& w, int row, const std::vector<double>& x) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += w[static_cast<std::size_t>(row) * x.size() + k] * x[k];
    return s;
}

std::vector<double> apply_linear(const nn::Linear& l, const std::vector<double>& x) {
    const Tensor& w = l.weight.value();
    std::vector<double> y(static_cast<std::size_t>(w.dim(0)));
    for (int o = 0; o < w.dim(0); ++o) y[static_cast<std::size_t>(o)] = dot_row(w, o, x) + l.bias.value()[static_cast<std::size_t>(o)];
    return y;
}

// Scaled dot-product cross-attention evaluated token by token.
Tensor attention_by_hand(const CrossAttention& att, const Tensor& query, const Tensor& context) {
    const int n = query.dim(0), lq = query.dim(1), lc = context.dim(1), d = query.dim(2);
    Tensor out({n, lq, d});
    auto token = [d](const Tensor& t, int b, int i) {
        const std::size_t off = (static_cast<std::size_t>(b) * t.dim(1) + i) * d;
        return std::vector<double>(t.data() + off, t.data() + off + d);
    };
    for (int b = 0; b < n; ++b)
        for (int i = 0; i < lq; ++i) {
            std::vector<double> merged;
            for (const AttentionHead& h : att.heads) {
                const std::vector<double> q = apply_linear(h.q, token(query, b, i));
                const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
                std::vector<double> logits(static_cast<std::size_t>(lc));
                std::vector<std::vector<double>> values;
                for (int j = 0; j < lc; ++j) {
                    const std::vector<double> k = apply_linear(h.k, token(context, b, j));
                    double s = 0.0;
                    for (std::size_t m = 0; m < q.size(); ++m) s += q[m] * k[m];
                    logits[static_cast<std::size_t>(j)] = s * scale;
                    values.push_back(apply_linear(h.v, token(context, b, j)));
                }
                const double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0.0;
                for (double& l : logits) z += (l = std::exp(l - mx));
                std::vector<double> o(q.size(), 0.0);
                for (int j = 0; j < lc; ++j)
                    for (std::size_t m = 0; m < o.size(); ++m) o[m] += logits[static_cast<std::size_t>(j)] / z * values[static_cast<std::size_t>(j)][m];
                merged.insert(merged.end(), o.begin(), o.end());
            }
            const std::vector<double> y = apply_linear(att.out, merged);
            std::copy(y.begin(), y.end(), out.data() + (static_cast<std::size_t>(b) * lq + i) * d);
        }
    return out;
}

}  // namespace

TEST(CrossAttention, MatchesTokenByTokenComputation) {
    Rng rng(1);
    nn::ParamSet ps;
    const CrossAttention att = make_cross_attention(ps, "att", 6, 3, &rng);
    const Tensor q = rng.normal_tensor({2, 5, 6});
    const Tensor c = rng.normal_tensor({2, 4, 6});
    const Tensor got = att(ag::constant(q), ag::constant(c)).value();
    EXPECT_LE((got - attention_by_hand(att, q, c)).max_abs(), 1e-12);
}

TEST(CrossAttention, ZeroQueryKeyWeightsGiveMeanPooledValues) {
    Rng rng(2);
    nn::ParamSet ps;
    CrossAttention att = make_cross_attention(ps, "att", 4, 2, &rng);
    for (AttentionHead& h : att.heads) {
        h.q.weight.mutable_value().fill(0.0);
        h.k.weight.mutable_value().fill(0.0);
    }
    const Tensor q = rng.normal_tensor({1, 3, 4});
    const Tensor c = rng.normal_tensor({1, 5, 4});
    const Tensor got = att(ag::constant(q), ag::constant(c)).value();
    std::vector<double> mean_ctx(4, 0.0);
    for (int j = 0; j < 5; ++j)
        for (int m = 0; m < 4; ++m) mean_ctx[static_cast<std::size_t>(m)] += c[static_cast<std::size_t>(j * 4 + m)] / 5;
    // Uniform weights: output = out(concat_h v_h(mean context)) for every query token.
    std::vector<double> merged;
    for (const AttentionHead& h : att.heads) {
        const std::vector<double> v = apply_linear(h.v, mean_ctx);
        merged.insert(merged.end(), v.begin(), v.end());
    }
    const std::vector<double> expect = apply_linear(att.out, merged);
    for (int i = 0; i < 3; ++i)
        for (int m = 0; m < 4; ++m) EXPECT_NEAR(got[static_cast<std::size_t>(i * 4 + m)], expect[static_cast<std::size_t>(m)], 1e-12);
}

TEST(Detector, ZeroHeadScoresOneHalf) {
    Rng rng(3);
    Detector det(small_config(), &rng);
    det.zero_head();
    for (double s : det.scores(random_batch(4, det.config(), 4))) EXPECT_EQ(s, 0.5);
}

TEST(Detector, ParameterGradientsMatchFiniteDifferences) {
    DetectorConfig c = small_config();
    c.width = 1;
    c.heads = 2;
    c.head_hidden = 2;
    c.kernel = 1;
    Rng rng(5);
    Detector det(c, &rng);
    ASSERT_LE(det.params().scalar_count(), 500u);
    const DetectorBatch b = random_batch(3, c, 6);
    EXPECT_LT(r2bd::testing::param_gradient_error(det.params(), [&] { return bce_with_logits(det.logits(b), b.labels); }),
              1e-4);
}

TEST(Detector, BceMatchesDirectFormula) {
    const Var logits = ag::constant(Tensor({3, 1}, std::vector<double>{-2.0, 0.5, 30.0}));
    const std::vector<int> y{0, 1, 1};
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    const double expect = -(std::log(1 - sig(-2.0)) + std::log(sig(0.5)) + std::log(sig(30.0))) / 3;
    EXPECT_NEAR(bce_with_logits(logits, y).value()[0], expect, 1e-14);
}

TEST(Detector, RgbOnlyIgnoresTheLatentStream) {
    Rng rng(7);
    Detector det(small_config(DetectorMode::rgb_only), &rng);
    DetectorBatch b = random_batch(4, det.config(), 8);
    ag::backward(bce_with_logits(det.logits(b), b.labels));
    for (const auto& [name, var] : det.params().entries()) {
        const bool unused = name.rfind("latent.", 0) == 0 || name.rfind("fusion", 0) == 0;
        if (unused) {
            EXPECT_EQ(var.grad().max_abs(), 0.0) << name;
        }
    }
    EXPECT_GT(det.params().get("rgb.stem.weight").grad().max_abs(), 0.0);
    const std::vector<double> s = det.scores(b);
    b.latent = Tensor();
    EXPECT_EQ(det.scores(b), s);
}

TEST(Detector, LatentOnlyIgnoresTheRgbStream) {
    Rng rng(9);
    const Detector det(small_config(DetectorMode::latent_only), &rng);
    DetectorBatch b = random_batch(4, det.config(), 10);
    const std::vector<double> s = det.scores(b);
    Rng other(11);
    b.rgb = other.normal_tensor(b.rgb.shape());
    EXPECT_EQ(det.scores(b), s);
    b.rgb = Tensor();
    EXPECT_EQ(det.scores(b), s);
    EXPECT_FALSE(det.stream_parameter_names("latent").empty());
}

TEST(Detector, ScoresArePermutationEquivariant) {
    Rng rng(12);
    const Detector det(small_config(), &rng);
    const DetectorBatch b = random_batch(5, det.config(), 13);
    const std::vector<int> perm{3, 0, 4, 1, 2};
    DetectorBatch p;
    std::vector<Tensor> rgb, lat;
    for (int i : perm) {
        rgb.push_back(b.rgb.item(i));
        lat.push_back(b.latent.item(i));
    }
    p.rgb = stack(rgb);
    p.latent = stack(lat);
    const std::vector<double> s = det.scores(b), sp = det.scores(p);
    for (std::size_t k = 0; k < perm.size(); ++k) EXPECT_EQ(sp[k], s[static_cast<std::size_t>(perm[k])]);
}

TEST(Detector, RejectsWrongGeometry) {
    Rng rng(14);
    const Detector det(small_config(), &rng);
    DetectorBatch b = random_batch(2, det.config(), 15);
    b.latent = Tensor({2, 4, 8, 8});
    EXPECT_THROW(det.scores(b), ValidationError);
    DetectorConfig bad = small_config();
    bad.heads = 3;
    EXPECT_THROW(validate_detector_config(bad), ValidationError);
    EXPECT_THROW(parse_detector_mode("three_stream"), ValidationError);
    EXPECT_EQ(parse_detector_mode(to_string(DetectorMode::raw_residual)), DetectorMode::raw_residual);
}

TEST(DetectorTraining, LearnsASeparableToyProblem) {
    DetectorConfig c = small_config();
    c.epochs = 15;
    DetectorBatch b = random_batch(64, c, 16);
    // Fakes carry a stronger residual in both streams.
    for (int i = 0; i < 64; ++i) {
        if (!b.labels[static_cast<std::size_t>(i)]) continue;
        const std::size_t rs = b.rgb.size() / 64, ls = b.latent.size() / 64;
        for (std::size_t k = 0; k < rs; ++k) b.rgb[i * rs + k] *= 1.6;
        for (std::size_t k = 0; k < ls; ++k) b.latent[i * ls + k] *= 1.6;
    }
    const DetectorTrainResult r = train_detector(b, c);
    ASSERT_EQ(r.log.size(), 15u);
    EXPECT_LT(r.log.back().loss, r.log.front().loss);
    EXPECT_GE(r.log.back().accuracy, 0.9);
    const DetectorTrainResult again = train_detector(b, c);
    EXPECT_TRUE(r.detector.params().bitwise_equal(again.detector.params()));
}

TEST(DetectorTraining, ConstantMapsAreSeparatedWithinFiveEpochs) {
    DetectorConfig c = small_config();
    c.epochs = 5;
    DetectorBatch b;
    std::vector<Tensor> rgb, lat;
    for (int i = 0; i < 32; ++i) {
        const double v = i % 2 ? 0.0 : 1.0;  // fake maps all zeros, real maps all ones
        rgb.emplace_back(Shape{3, 16, 16}, v);
        lat.emplace_back(Shape{4, 4, 4}, v);
        b.labels.push_back(i % 2);
    }
    b.rgb = stack(rgb);
    b.latent = stack(lat);
    const DetectorTrainResult r = train_detector(b, c);
    double best = 0.0;
    for (const auto& e : r.log) best = std::max(best, e.accuracy);
    EXPECT_EQ(best, 1.0);
    const std::vector<double> s = r.detector.scores(b);
    for (int i = 0; i < 32; ++i) EXPECT_EQ(s[static_cast<std::size_t>(i)] >= 0.5, i % 2 == 1);
}

TEST(DetectorTraining, RejectsSingleClassData) {
    DetectorBatch b = random_batch(4, small_config(), 17);
    b.labels.assign(4, 1);
    EXPECT_THROW(train_detector(b, small_config()), ValidationError);
}

TEST(Detector, SaveLoadPreservesScores) {
    DetectorConfig c = small_config();
    c.epochs = 1;
    const DetectorBatch b = random_batch(8, c, 18);
    const Detector det = train_detector(b, c).detector;
    const auto dir = temp_dir("save");
    det.save(dir / "d.ckpt", {{"note", 1}});
    const Detector back = Detector::load(dir / "d.ckpt");
    EXPECT_EQ(back.scores(b), det.scores(b));
    EXPECT_EQ(nlohmann::json(back.config()), nlohmann::json(det.config()));
    EXPECT_EQ(back.rgb_norm.mean.storage(), det.rgb_norm.mean.storage());
}

TEST(Detector, DecisionRule) {
    const DetectionResult r = make_result("a", 0.5, 0.5);
    EXPECT_TRUE(r.fake);
    EXPECT_FALSE(make_result("b", 0.49, 0.5).fake);
    EXPECT_THROW(make_result("c", 1.5, 0.5), ValidationError);
}

TEST(Detector, PrecomputedAndOnTheFlyFeaturesAgree) {
    Rng rng(19);
    const ModelBundle bundle{.vae = Vae({3, 4, 4}, &rng), .predictor = NoisePredictor({4, 4, 0, 8}, &rng), .discriminator = std::nullopt};
    const auto root = temp_dir("paths");
    fs::create_directories(root / "images");
    DatasetManifest m;
    for (int i = 0; i < 10; ++i) {
        const std::string id = "x" + std::to_string(i);
        m.entries.push_back({.id = id,
                             .path = "images/" + id + ".png",
                             .label = i % 2 ? "fake" : "real",
                             .generator_family = i % 2 ? "latentdm" : "none",
                             .method_name = i % 2 ? "latentdm_a" : "procedural",
                             .split = "in_test",
                             .hash = "0"});
        write_png(root / m.entries.back().path, rng.uniform_tensor({3, 16, 16}, -1.0, 1.0));
    }
    const BiasOptions opts{.t_steps = 3};
    const BiasIndex index = batch_compute_bias(m, root, bundle, opts, root / "bias");
    for (DetectorMode mode : {DetectorMode::two_stream, DetectorMode::raw_residual}) {
        const Detector det(small_config(mode), &rng);
        const auto pre = predict_batch(det, index);
        const auto fly = predict_batch(det, m, root, bundle, opts);
        ASSERT_EQ(pre.size(), 10u);
        ASSERT_EQ(fly.size(), 10u);
        for (std::size_t i = 0; i < 10; ++i) {
            EXPECT_EQ(pre[i].id, fly[i].id);
            EXPECT_EQ(pre[i].score, fly[i].score) << to_string(mode) << " item " << i;
        }
    }
    m.entries[4].path = "images/missing.png";
    const Detector det(small_config(), &rng);
    const auto fly = predict_batch(det, m, root, bundle, opts);
    EXPECT_FALSE(fly[4].ok());
    EXPECT_TRUE(fly[5].ok());
}
