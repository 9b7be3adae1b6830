#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/tensor.hpp"

/// Image degradations for the robustness sweep. Images are (3, H, W) in [-1, 1]; intensities are
/// expressed on the [0, 1] pixel scale.
namespace r2bd {

enum class PerturbationKind { jpeg, gaussian_noise, gaussian_blur, contrast, saturation };

inline constexpr PerturbationKind kAllPerturbations[] = {PerturbationKind::jpeg, PerturbationKind::gaussian_noise,
                                                        PerturbationKind::gaussian_blur, PerturbationKind::contrast,
                                                        PerturbationKind::saturation};

std::string to_string(PerturbationKind k);
PerturbationKind parse_perturbation_kind(const std::string& s);

/// Intensity for levels 1..5 of each kind.
struct PerturbationLevels {
    std::vector<double> jpeg_quality{90, 70, 50, 30, 10};
    std::vector<double> noise_sigma{0.01, 0.02, 0.05, 0.1, 0.2};
    std::vector<double> blur_sigma{0.5, 1, 2, 3, 4};
    std::vector<double> contrast_factor{0.9, 0.8, 0.7, 0.6, 0.5};
    std::vector<double> saturation_factor{0.9, 0.8, 0.7, 0.6, 0.5};

    double intensity(PerturbationKind kind, int level) const;
};

void to_json(nlohmann::json& j, const PerturbationLevels& l);
void from_json(const nlohmann::json& j, PerturbationLevels& l);

struct PerturbationSpec {
    PerturbationKind kind = PerturbationKind::jpeg;
    int level = 1;
    std::uint64_t seed = 0;
};

/// Parses "kind:level", e.g. "jpeg:3".
PerturbationSpec parse_perturbation(const std::string& text, std::uint64_t seed = 0);
std::string to_string(const PerturbationSpec& spec);

/// Applies `spec` at the intensity configured in `levels`; output clamped to [-1, 1].
Tensor apply_perturbation(const Tensor& image, const PerturbationSpec& spec, const PerturbationLevels& levels = {});
/// Applies `kind` at an explicit intensity (quality, sigma, or factor).
Tensor apply_perturbation_at(const Tensor& image, PerturbationKind kind, double intensity, std::uint64_t seed);

/// Encode/decode round trip through the JPEG codec at `quality` (1..100).
Tensor jpeg_round_trip(const Tensor& image, int quality);
/// Separable Gaussian blur with kernel size 2 * ceil(3 sigma) + 1 and replicated borders.
Tensor gaussian_blur(const Tensor& image, double sigma);
/// Identifies the JPEG codec build used for round trips.
std::string jpeg_codec_version();

}  // namespace r2bd
