#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/models.hpp"
#include "r2bd/residual_bias.hpp"

/// Two-stream classifier over residual-bias maps with cross-attention fusion.
namespace r2bd {

enum class DetectorMode { two_stream, rgb_only, latent_only, raw_residual };

std::string to_string(DetectorMode m);
DetectorMode parse_detector_mode(const std::string& s);

struct DetectorConfig {
    int epochs = 20;
    double learning_rate = 1e-4;
    int heads = 2;
    /// Base channel width; streams use width and 2 * width channels, attention runs at 2 * width.
    int width = 8;
    int head_hidden = 32;
    int fusion_blocks = 1;
    /// Kernel size of the convolutions inside residual blocks (odd).
    int kernel = 3;
    int batch_size = 32;
    double threshold = 0.5;
    std::uint64_t seed = 0;
    DetectorMode mode = DetectorMode::two_stream;
    int image_channels = 3;
    int image_size = 32;
    int latent_channels = 4;
    int latent_size = 8;

    bool uses_rgb() const { return mode != DetectorMode::latent_only; }
    bool uses_latent() const { return mode == DetectorMode::two_stream || mode == DetectorMode::latent_only; }
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);
void validate_detector_config(const DetectorConfig& c);

/// Batched detector input. In raw_residual mode `rgb` holds the signed measured residual; an
/// ignored stream may be left empty.
struct DetectorBatch {
    Tensor rgb;     // (N, 3, H, W)
    Tensor latent;  // (N, C, h, w)
    std::vector<int> labels;  // 1 = fake; may be empty at inference
    std::vector<std::string> ids;

    int size() const;
};

/// Per-channel affine normalization fitted on training inputs.
struct Standardizer {
    Tensor mean;
    Tensor inv_std;

    static Standardizer fit(const Tensor& batch);
    static Standardizer identity(int channels);
    Tensor apply(const Tensor& batch) const;
};

struct AttentionHead {
    nn::Linear q, k, v;
};

/// One direction of cross-attention: queries from one token set, keys/values from the other.
struct CrossAttention {
    std::vector<AttentionHead> heads;
    nn::Linear out;

    /// query (N, Lq, D), context (N, Lc, D) -> attended update (N, Lq, D), without the residual add.
    Var operator()(const Var& query, const Var& context) const;
};

CrossAttention make_cross_attention(nn::ParamSet& ps, const std::string& name, int dim, int heads, Rng* rng);

struct ResidualBlock {
    nn::Conv2d conv1, conv2;
    std::optional<nn::Conv2d> shortcut;

    Var operator()(const Var& x) const;
};

class Detector {
public:
    explicit Detector(DetectorConfig cfg = {}, Rng* rng = nullptr);
    Detector(const Detector& other);
    Detector& operator=(const Detector& other);
    Detector(Detector&&) noexcept = default;
    Detector& operator=(Detector&&) noexcept = default;

    /// Logits (N, 1). Inputs are standardized internally; ignored streams are not read.
    Var logits(const DetectorBatch& batch) const;
    /// sigmoid(logit) per row, no graph recorded.
    std::vector<double> scores(const DetectorBatch& batch) const;
    /// Sets the final head layer to zero so every score is 0.5.
    void zero_head();

    const DetectorConfig& config() const { return cfg_; }
    DetectorConfig& mutable_config() { return cfg_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    /// Parameter names belonging to each stream (for ablation checks).
    std::vector<std::string> stream_parameter_names(const std::string& stream) const;

    Standardizer rgb_norm;
    Standardizer latent_norm;

    void save(const std::filesystem::path& path, const nlohmann::json& resolved = nlohmann::json::object()) const;
    static Detector load(const std::filesystem::path& path);

private:
    void build(Rng* rng);
    Var stream_front(const Var& x, const nn::Conv2d& stem, const std::vector<ResidualBlock>& blocks) const;

    DetectorConfig cfg_;
    nn::ParamSet params_;
    nn::Conv2d rgb_stem_, latent_stem_;
    std::vector<ResidualBlock> rgb_blocks_, latent_blocks_;
    std::vector<CrossAttention> rgb_from_latent_, latent_from_rgb_;
    nn::Linear head1_, head2_;
};

struct DetectionResult {
    std::string id;
    double score = 0.0;
    double threshold = 0.5;
    bool fake = false;
    std::string error;  // non-empty when the item could not be scored

    bool ok() const { return error.empty(); }
};

DetectionResult make_result(std::string id, double score, double threshold);

/// Binary cross-entropy with logits, averaged over the batch.
Var bce_with_logits(const Var& logits, const std::vector<int>& labels);

struct DetectorEpochLog {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct DetectorTrainResult {
    Detector detector;
    std::vector<DetectorEpochLog> log;
};

/// Minimizes BCE over `train`. Fits input standardization first; shuffles with the config seed.
DetectorTrainResult train_detector(const DetectorBatch& train, const DetectorConfig& cfg,
                                   const Detector* init = nullptr);

/// Loads detector inputs for index entries with status "ok" (float32 arrays as stored).
DetectorBatch load_detector_batch(const BiasIndex& index, DetectorMode mode);
/// Converts freshly computed bias pairs to detector inputs, rounding through float32 exactly as
/// the on-disk path does.
DetectorBatch make_detector_batch(const std::vector<ResidualBiasPair>& pairs, DetectorMode mode,
                                  std::vector<std::string> ids = {}, std::vector<int> labels = {});

/// Scores precomputed features, order preserving.
std::vector<DetectionResult> predict_batch(const Detector& det, const BiasIndex& index);
using ImageTransform = std::function<Tensor(const Tensor& image, const ManifestEntry& entry)>;

/// Scores images (computing features on the fly), order preserving. `transform`, when set, is
/// applied to each decoded image first. Unreadable images yield a result with `error` set.
std::vector<DetectionResult> predict_batch(const Detector& det, const DatasetManifest& manifest,
                                           const std::filesystem::path& image_root, const ModelBundle& bundle,
                                           const BiasOptions& opts, const ImageTransform& transform = {});

}  // namespace r2bd
