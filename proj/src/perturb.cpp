#include "r2bd/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <csetjmp>

#include <jpeglib.h>

#include "r2bd/error.hpp"
#include "r2bd/image_io.hpp"
#include "r2bd/rng.hpp"

namespace r2bd {

std::string to_string(PerturbationKind k) {
    switch (k) {
        case PerturbationKind::jpeg: return "jpeg";
        case PerturbationKind::gaussian_noise: return "gaussian_noise";
        case PerturbationKind::gaussian_blur: return "gaussian_blur";
        case PerturbationKind::contrast: return "contrast";
        case PerturbationKind::saturation: return "saturation";
    }
    return "jpeg";
}

PerturbationKind parse_perturbation_kind(const std::string& s) {
    for (PerturbationKind k : kAllPerturbations)
        if (to_string(k) == s) return k;
    throw ValidationError("unknown perturbation kind '" + s + "'");
}

double PerturbationLevels::intensity(PerturbationKind kind, int level) const {
    const std::vector<double>* table = nullptr;
    switch (kind) {
        case PerturbationKind::jpeg: table = &jpeg_quality; break;
        case PerturbationKind::gaussian_noise: table = &noise_sigma; break;
        case PerturbationKind::gaussian_blur: table = &blur_sigma; break;
        case PerturbationKind::contrast: table = &contrast_factor; break;
        case PerturbationKind::saturation: table = &saturation_factor; break;
    }
    require(level >= 1 && level <= static_cast<int>(table->size()),
            "perturbation level " + std::to_string(level) + " outside 1.." + std::to_string(table->size()));
    return (*table)[static_cast<std::size_t>(level - 1)];
}

void to_json(nlohmann::json& j, const PerturbationLevels& l) {
    j = {{"jpeg", l.jpeg_quality},
         {"gaussian_noise", l.noise_sigma},
         {"gaussian_blur", l.blur_sigma},
         {"contrast", l.contrast_factor},
         {"saturation", l.saturation_factor}};
}

void from_json(const nlohmann::json& j, PerturbationLevels& l) {
    l.jpeg_quality = j.value("jpeg", l.jpeg_quality);
    l.noise_sigma = j.value("gaussian_noise", l.noise_sigma);
    l.blur_sigma = j.value("gaussian_blur", l.blur_sigma);
    l.contrast_factor = j.value("contrast", l.contrast_factor);
    l.saturation_factor = j.value("saturation", l.saturation_factor);
}

PerturbationSpec parse_perturbation(const std::string& text, std::uint64_t seed) {
    const auto colon = text.find(':');
    require(colon != std::string::npos, "perturbation must be written kind:level, got '" + text + "'");
    PerturbationSpec spec;
    spec.kind = parse_perturbation_kind(text.substr(0, colon));
    const std::string level = text.substr(colon + 1);
    require(!level.empty() && std::all_of(level.begin(), level.end(), ::isdigit), "invalid perturbation level '" + level + "'");
    spec.level = std::stoi(level);
    require(spec.level >= 1 && spec.level <= 5, "perturbation level must be in 1..5");
    spec.seed = seed;
    return spec;
}

std::string to_string(const PerturbationSpec& spec) { return to_string(spec.kind) + ":" + std::to_string(spec.level); }

namespace {

void check_image(const Tensor& image) {
    require(image.ndim() == 3 && image.dim(0) == 3, "perturbations expect a (3, H, W) image");
}

Tensor clamp_unit(Tensor t) {
    for (double& v : t.values()) v = std::clamp(v, -1.0, 1.0);
    return t;
}

struct JpegError {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void on_jpeg_error(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegError*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

}  // namespace

std::string jpeg_codec_version() {
#ifdef LIBJPEG_TURBO_VERSION
#define R2BD_STR2(x) #x
#define R2BD_STR(x) R2BD_STR2(x)
    return std::string("libjpeg-turbo ") + R2BD_STR(LIBJPEG_TURBO_VERSION) + " (jpeglib " +
           std::to_string(JPEG_LIB_VERSION) + ")";
#else
    return "libjpeg " + std::to_string(JPEG_LIB_VERSION);
#endif
}

Tensor jpeg_round_trip(const Tensor& image, int quality) {
    check_image(image);
    require(quality >= 1 && quality <= 100, "JPEG quality must be in 1..100");
    const Rgb8 raster = to_rgb8(image);

    unsigned char* buffer = nullptr;
    unsigned long size = 0;
    {
        jpeg_compress_struct cinfo{};
        JpegError err{};
        cinfo.err = jpeg_std_error(&err.mgr);
        err.mgr.error_exit = on_jpeg_error;
        if (setjmp(err.jump)) {
            jpeg_destroy_compress(&cinfo);
            std::free(buffer);
            throw ValidationError(std::string("JPEG encode failed: ") + err.message);
        }
        jpeg_create_compress(&cinfo);
        jpeg_mem_dest(&cinfo, &buffer, &size);
        cinfo.image_width = static_cast<JDIMENSION>(raster.width);
        cinfo.image_height = static_cast<JDIMENSION>(raster.height);
        cinfo.input_components = 3;
        cinfo.in_color_space = JCS_RGB;
        jpeg_set_defaults(&cinfo);
        jpeg_set_quality(&cinfo, quality, TRUE);
        jpeg_start_compress(&cinfo, TRUE);
        while (cinfo.next_scanline < cinfo.image_height) {
            JSAMPROW row = const_cast<JSAMPROW>(raster.pixels.data() + static_cast<std::size_t>(cinfo.next_scanline) * raster.width * 3);
            jpeg_write_scanlines(&cinfo, &row, 1);
        }
        jpeg_finish_compress(&cinfo);
        jpeg_destroy_compress(&cinfo);
    }

    Rgb8 decoded{raster.width, raster.height, std::vector<std::uint8_t>(raster.pixels.size())};
    {
        jpeg_decompress_struct dinfo{};
        JpegError err{};
        dinfo.err = jpeg_std_error(&err.mgr);
        err.mgr.error_exit = on_jpeg_error;
        if (setjmp(err.jump)) {
            jpeg_destroy_decompress(&dinfo);
            std::free(buffer);
            throw ValidationError(std::string("JPEG decode failed: ") + err.message);
        }
        jpeg_create_decompress(&dinfo);
        jpeg_mem_src(&dinfo, buffer, size);
        jpeg_read_header(&dinfo, TRUE);
        dinfo.out_color_space = JCS_RGB;
        jpeg_start_decompress(&dinfo);
        while (dinfo.output_scanline < dinfo.output_height) {
            JSAMPROW row = decoded.pixels.data() + static_cast<std::size_t>(dinfo.output_scanline) * decoded.width * 3;
            jpeg_read_scanlines(&dinfo, &row, 1);
        }
        jpeg_finish_decompress(&dinfo);
        jpeg_destroy_decompress(&dinfo);
    }
    std::free(buffer);
    return from_rgb8(decoded);
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
    check_image(image);
    require(sigma >= 0.0, "blur sigma must be nonnegative");
    if (sigma == 0.0) return image;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
        total += kernel[static_cast<std::size_t>(k + radius)];
    }
    for (double& v : kernel) v /= total;

    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor tmp(image.shape()), out(image.shape());
    auto at = [&](const Tensor& t, int ch, int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return t[(static_cast<std::size_t>(ch) * h + y) * w + x];
    };
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int k = -radius; k <= radius; ++k) s += kernel[static_cast<std::size_t>(k + radius)] * at(image, ch, y, x + k);
                tmp[(static_cast<std::size_t>(ch) * h + y) * w + x] = s;
            }
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int k = -radius; k <= radius; ++k) s += kernel[static_cast<std::size_t>(k + radius)] * at(tmp, ch, y + k, x);
                out[(static_cast<std::size_t>(ch) * h + y) * w + x] = s;
            }
    return out;
}

Tensor apply_perturbation_at(const Tensor& image, PerturbationKind kind, double intensity, std::uint64_t seed) {
    check_image(image);
    const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
    // Work on the [0, 1] scale.
    Tensor x = image;
    for (double& v : x.values()) v = (v + 1.0) / 2.0;
    switch (kind) {
        case PerturbationKind::jpeg:
            return clamp_unit(jpeg_round_trip(image, static_cast<int>(std::lround(intensity))));
        case PerturbationKind::gaussian_blur:
            return clamp_unit(gaussian_blur(image, intensity));
        case PerturbationKind::gaussian_noise: {
            require(intensity >= 0.0, "noise sigma must be nonnegative");
            if (intensity == 0.0) return clamp_unit(image);
            Rng rng(seed, "perturb.noise");
            for (double& v : x.values()) v += rng.normal(0.0, intensity);
            break;
        }
        case PerturbationKind::contrast: {
            require(intensity >= 0.0, "contrast factor must be nonnegative");
            double mean = 0.0;
            for (std::size_t i = 0; i < plane; ++i) mean += 0.299 * x[i] + 0.587 * x[plane + i] + 0.114 * x[2 * plane + i];
            mean /= static_cast<double>(plane);
            for (double& v : x.values()) v = intensity * v + (1.0 - intensity) * mean;
            break;
        }
        case PerturbationKind::saturation: {
            require(intensity >= 0.0, "saturation factor must be nonnegative");
            for (std::size_t i = 0; i < plane; ++i) {
                const double gray = 0.299 * x[i] + 0.587 * x[plane + i] + 0.114 * x[2 * plane + i];
                for (int ch = 0; ch < 3; ++ch) {
                    double& v = x[static_cast<std::size_t>(ch) * plane + i];
                    v = intensity * v + (1.0 - intensity) * gray;
                }
            }
            break;
        }
    }
    for (double& v : x.values()) v = std::clamp(v * 2.0 - 1.0, -1.0, 1.0);
    return x;
}

Tensor apply_perturbation(const Tensor& image, const PerturbationSpec& spec, const PerturbationLevels& levels) {
    return apply_perturbation_at(image, spec.kind, levels.intensity(spec.kind, spec.level), spec.seed);
}

}  // namespace r2bd
