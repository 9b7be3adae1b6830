#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/forgers.hpp"
#include "r2bd/manifest.hpp"

/// Procedural "real" images, toy forgeries, and train / in-dataset / cross-dataset splits.
namespace r2bd {

struct RealImageConfig {
    int size = 32;
    int min_shapes = 2;
    int max_shapes = 4;
    /// Per-pixel sensor noise standard deviation range on the [-1, 1] scale.
    double noise_min = 0.03;
    double noise_max = 0.06;
};

/// One procedural image: gradient background, textured shapes, low-frequency shading, and
/// per-pixel sensor noise. Deterministic given the generator state.
Tensor procedural_real_image(Rng& rng, const RealImageConfig& cfg);

/// Writes `n` procedural images under `root/images/real/` and returns their manifest entries
/// (split unassigned). Image i draws from derive_seed(seed, i).
DatasetManifest generate_real(int n, std::uint64_t seed, const std::filesystem::path& root,
                              const RealImageConfig& cfg = {}, int workers = 1);

/// Writes `n` samples of `forger` under `root/images/<method>/`.
DatasetManifest generate_fakes(const Forger& forger, int n, std::uint64_t seed, const std::filesystem::path& root,
                               int workers = 1);

/// Mean spectral power per pixel outside the central low-frequency band (|k| > size / 4 on
/// either axis), averaged over channels. Measures fine-grained noise content.
double high_frequency_power(const Tensor& image);

/// Relative split sizes. Fakes of held-out methods all go to cross_test.
struct SplitRatios {
    double real_train = 4000;
    double real_in_test = 800;
    double real_cross_test = 800;
    double fake_train = 4000;
    double fake_in_test = 800;
};

/// The split assignment build_splits gives to real entries, computed from the reals alone.
DatasetManifest assign_real_splits(const DatasetManifest& reals, std::uint64_t seed, const SplitRatios& ratios = {});

/// Assigns splits. Every method named in `holdout_methods` goes to cross_test; all other fake
/// methods are shared between train and in_test. Throws ValidationError when no fake method is left
/// for training or when train and cross_test would share a method.
DatasetManifest build_splits(const std::vector<DatasetManifest>& fragments,
                             const std::vector<std::string>& holdout_methods, std::uint64_t seed,
                             const SplitRatios& ratios = {});

/// Throws ValidationError if any method appears in both train and cross_test.
void check_split_disjointness(const DatasetManifest& m);

struct CorpusConfig {
    RealImageConfig real;
    int train_real = 4000;
    int train_fake = 4000;
    int in_test_real = 800;
    int in_test_fake = 800;
    int cross_test_real = 800;
    int cross_test_per_method = 800;
    /// Real training images used to fit the forgers.
    int forger_train_images = 1000;
    std::vector<ForgerConfig> forgers;
    std::vector<std::string> holdout_methods{"gan_b", "pixeldm_b", "latentdm_b"};

    /// Six toy methods, two per family; the "_b" variants differ in seed and hyperparameters.
    static std::vector<ForgerConfig> default_forgers();
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

using ProgressFn = std::function<void(const std::string&)>;

/// Full corpus: reals, forger training (checkpoints under root/forgers/), fakes, and splits.
/// Writes root/manifest.jsonl and returns the manifest.
DatasetManifest synthesize_corpus(const CorpusConfig& cfg, std::uint64_t seed, const std::filesystem::path& root,
                                  int workers = 1, const ProgressFn& progress = {});

/// Reads every image of `m` into a batch (N, 3, H, W).
Tensor load_images(const DatasetManifest& m, const std::filesystem::path& root);

}  // namespace r2bd
