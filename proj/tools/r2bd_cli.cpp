#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "r2bd/config.hpp"
#include "r2bd/error.hpp"
#include "r2bd/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace r2bd;

namespace {

constexpr const char* kPrecedence =
    "Configuration precedence (highest first): command-line flags, then R2BD_OUTPUT_ROOT (output root only), "
    "then the --config file, then built-in defaults. Relative paths resolve against the output root.";

struct CommonOptions {
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string output_root;
    std::optional<int> workers;
    bool quiet = false;

    // Flag-level overrides collected by each subcommand, applied after --set.
    std::vector<std::pair<std::string, json>> extra;
};

void add_common(CLI::App* app, CommonOptions& o) {
    app->add_option("-c,--config", o.config_file, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--set", o.sets, "Override one config value, KEY=VALUE with a dotted key (repeatable)");
    app->add_option("--seed", o.seed, "Global seed; every stage derives its own stream from it");
    app->add_option("-o,--output-root", o.output_root, "Directory for all artifacts");
    app->add_option("-w,--workers", o.workers, "Intra-stage worker threads (results do not depend on it)")
        ->check(CLI::PositiveNumber);
    app->add_flag("-q,--quiet", o.quiet, "Suppress progress messages");
    app->footer(kPrecedence);
}

RunConfig resolve(const CommonOptions& o) {
    ConfigSources src;
    if (!o.config_file.empty()) src.file = o.config_file;
    for (const auto& s : o.sets) src.overrides.push_back(parse_override(s));
    if (o.seed) src.overrides.emplace_back("seed", *o.seed);
    if (!o.output_root.empty()) src.overrides.emplace_back("output_root", o.output_root);
    if (o.workers) src.overrides.emplace_back("workers", *o.workers);
    for (const auto& kv : o.extra) src.overrides.push_back(kv);
    return resolve_config(src);
}

LogFn logger(const CommonOptions& o) {
    if (o.quiet) return {};
    return [](const std::string& msg) { std::cerr << "[r2bd] " << msg << std::endl; };
}

fs::path pick(const RunConfig& cfg, const std::string& given, const fs::path& fallback) {
    return given.empty() ? fallback : resolve_path(cfg, given);
}

int report_error(const std::string& command, const std::string& type, const std::string& message,
                 const std::string& root) {
    const json record = {{"error", {{"command", command}, {"type", type}, {"message", message}}}};
    std::cerr << record.dump() << std::endl;
    if (!root.empty() && fs::is_directory(root)) {
        std::ofstream out(fs::path(root) / "error.json");
        out << record.dump(2) << '\n';
    }
    if (type == "validation") return 2;
    if (type == "training") return 3;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Residual-bias fake image detection: data synthesis, reconstruction model training, "
                 "feature extraction, detector training and evaluation."};
    app.require_subcommand(1);
    app.footer(kPrecedence);

    CommonOptions opts;
    std::string command;
    std::function<void(const RunConfig&, const LogFn&)> action;

    auto* synth = app.add_subcommand("synth-data", "Generate the procedural corpus, train the toy forgers, write the manifest");
    add_common(synth, opts);
    synth->callback([&] {
        command = "synth-data";
        action = [](const RunConfig& cfg, const LogFn& log) {
            run_single_stage(cfg, "synth_data", [&] { run_synth_data(cfg, log); }, log);
        };
    });

    bool no_adversarial = false;
    bool reuse_base = false;
    auto* gldm = app.add_subcommand("train-gldm", "Pretrain the autoencoder and base predictor, then fine-tune with the critic");
    add_common(gldm, opts);
    gldm->add_flag("--no-adversarial", no_adversarial, "Plain diffusion fine-tuning (sets gldm.adversarial=false)");
    gldm->add_flag("--reuse-base", reuse_base, "Skip pretraining when models/base.ckpt already exists");
    gldm->callback([&] {
        command = "train-gldm";
        if (no_adversarial) opts.extra.emplace_back("gldm.adversarial", false);
        action = [&](const RunConfig& cfg, const LogFn& log) {
            if (!(reuse_base && fs::exists(layout_for(cfg).base_bundle())))
                run_single_stage(cfg, "pretrain", [&] { run_pretrain(cfg, log); }, log);
            run_single_stage(cfg, "train_gldm", [&] { run_train_gldm(cfg, log); }, log);
        };
    });

    std::string bias_manifest, bias_bundle, bias_out, bias_split;
    auto* bias = app.add_subcommand("compute-bias", "Compute residual-bias features and write the feature index");
    add_common(bias, opts);
    bias->add_option("--manifest", bias_manifest, "Manifest to process (default: data/manifest.jsonl)");
    bias->add_option("--bundle", bias_bundle, "Reconstruction bundle (default: models/gldm.ckpt)");
    bias->add_option("--out", bias_out, "Output directory (default: bias)");
    bias->add_option("--split", bias_split, "Only entries of this split (default: every entry)");
    std::optional<int> t_steps;
    bias->add_option("--t-steps", t_steps, "Inversion steps (sets bias.t_steps)");
    bias->callback([&] {
        command = "compute-bias";
        if (t_steps) opts.extra.emplace_back("bias.t_steps", *t_steps);
        action = [&](const RunConfig& cfg, const LogFn& log) {
            const RunLayout l = layout_for(cfg);
            auto body = [&] {
                run_compute_bias(cfg, pick(cfg, bias_manifest, l.manifest()), pick(cfg, bias_bundle, l.gldm_bundle()),
                                 pick(cfg, bias_out, l.bias_dir()), bias_split, log);
            };
            if (bias_manifest.empty() && bias_bundle.empty() && bias_out.empty())
                run_single_stage(cfg, "compute_bias", body, log);
            else
                body();
        };
    });

    std::string det_bias, det_out, det_mode;
    std::optional<int> det_epochs;
    auto* det = app.add_subcommand("train-detector", "Train the classifier on the training split of a feature index");
    add_common(det, opts);
    det->add_option("--bias-dir", det_bias, "Feature index directory (default: bias)");
    det->add_option("--out", det_out, "Checkpoint path (default: detector/detector.ckpt)");
    det->add_option("--mode", det_mode, "two_stream, rgb_only, latent_only or raw_residual (sets detector.mode)")
        ->check(CLI::IsMember({"two_stream", "rgb_only", "latent_only", "raw_residual"}));
    det->add_option("--epochs", det_epochs, "Training epochs (sets detector.epochs)");
    det->callback([&] {
        command = "train-detector";
        if (!det_mode.empty()) opts.extra.emplace_back("detector.mode", det_mode);
        if (det_epochs) opts.extra.emplace_back("detector.epochs", *det_epochs);
        action = [&](const RunConfig& cfg, const LogFn& log) {
            const RunLayout l = layout_for(cfg);
            auto body = [&] { run_train_detector(cfg, pick(cfg, det_bias, l.bias_dir()), pick(cfg, det_out, l.detector()), log); };
            if (det_bias.empty() && det_out.empty())
                run_single_stage(cfg, "train_detector", body, log);
            else
                body();
        };
    });

    std::string ev_detector, ev_bundle, ev_manifest, ev_out;
    std::vector<std::string> ev_splits, ev_perturb;
    std::optional<double> ev_base_rate, ev_threshold;
    std::optional<int> ev_cap;
    auto* ev = app.add_subcommand("evaluate", "Score images through the full pipeline and write metric reports");
    add_common(ev, opts);
    ev->add_option("--detector", ev_detector, "Detector checkpoint (default: detector/detector.ckpt)");
    ev->add_option("--bundle", ev_bundle, "Reconstruction bundle (default: models/gldm.ckpt)");
    ev->add_option("--manifest", ev_manifest, "Manifest (default: data/manifest.jsonl)");
    ev->add_option("--out", ev_out, "Report directory (default: reports)");
    ev->add_option("--split", ev_splits, "Split to score on clean images (repeatable; default in_test and cross_test)");
    ev->add_option("--base-rate", ev_base_rate, "Fake base rate for BDR on every split (defaults 0.6 in-dataset, 0.722 cross-dataset)")
        ->check(CLI::Range(0.0, 1.0));
    ev->add_option("--threshold", ev_threshold, "Decision threshold on the fake probability (default: the detector's)")
        ->check(CLI::Range(0.0, 1.0));
    ev->add_option("--perturb", ev_perturb,
                   "Perturbation cell kind:level on in_test, one report per cell (repeatable; \"all\" = 5 kinds x 5 levels). "
                   "Kinds: jpeg, gaussian_noise, gaussian_blur, contrast, saturation; levels 1-5");
    ev->add_option("--perturb-max-per-class", ev_cap, "Images per class for perturbed cells (0 = all)");
    ev->callback([&] {
        command = "evaluate";
        if (ev_base_rate) {
            opts.extra.emplace_back("evaluate.in_test_base_rate", *ev_base_rate);
            opts.extra.emplace_back("evaluate.cross_test_base_rate", *ev_base_rate);
        }
        if (ev_threshold) opts.extra.emplace_back("evaluate.threshold", *ev_threshold);
        if (!ev_perturb.empty()) opts.extra.emplace_back("evaluate.perturbations", ev_perturb);
        if (ev_cap) opts.extra.emplace_back("evaluate.perturb_max_per_class", *ev_cap);
        action = [&](const RunConfig& cfg, const LogFn& log) {
            const RunLayout l = layout_for(cfg);
            EvaluateInputs in = default_evaluate_inputs(cfg);
            in.detector = pick(cfg, ev_detector, in.detector);
            in.bundle = pick(cfg, ev_bundle, in.bundle);
            in.manifest = pick(cfg, ev_manifest, in.manifest);
            in.out_dir = pick(cfg, ev_out, in.out_dir);
            if (!ev_splits.empty()) in.splits = ev_splits;
            std::vector<fs::path> written;
            auto body = [&] { written = run_evaluate(cfg, in, log); };
            const bool defaults = ev_detector.empty() && ev_bundle.empty() && ev_manifest.empty() && ev_out.empty();
            if (defaults)
                run_single_stage(cfg, "evaluate", body, log);
            else
                body();
            for (const auto& p : written) std::cout << p.string() << '\n';
        };
    });

    auto* pipe = app.add_subcommand("pipeline", "Run all six stages in order, resuming completed ones");
    add_common(pipe, opts);
    pipe->callback([&] {
        command = "pipeline";
        action = [](const RunConfig& cfg, const LogFn& log) {
            const PipelineOutcome out = run_pipeline(cfg, log);
            std::cout << json{{"ran", out.ran}, {"skipped", out.skipped}}.dump() << '\n';
        };
    });

    auto* show = app.add_subcommand("show-config", "Print the resolved configuration and per-stage hashes");
    add_common(show, opts);
    show->callback([&] {
        command = "show-config";
        action = [](const RunConfig& cfg, const LogFn&) {
            json hashes = json::object();
            for (const auto& s : stage_names()) hashes[s] = stage_hash(cfg, s);
            std::cout << json{{"config", cfg.resolved}, {"stage_hashes", hashes}}.dump(2) << '\n';
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    std::string root;
    try {
        const RunConfig cfg = resolve(opts);
        root = cfg.output_root;
        action(cfg, logger(opts));
        return 0;
    } catch (const ValidationError& e) {
        return report_error(command, "validation", e.what(), root);
    } catch (const TrainingError& e) {
        return report_error(command, "training", e.what(), root);
    } catch (const std::exception& e) {
        return report_error(command, "runtime", e.what(), root);
    }
}
