#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/bundle.hpp"
#include "r2bd/config.hpp"
#include "r2bd/evaluate.hpp"

/// The six end-to-end stages and their on-disk layout under the output root.
namespace r2bd {

inline constexpr const char* kStageStatusFile = "stage_status.json";

/// In execution order: synth_data, pretrain, train_gldm, compute_bias, train_detector, evaluate.
const std::vector<std::string>& stage_names();

struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path data_dir() const { return root / "data"; }
    std::filesystem::path manifest() const { return data_dir() / "manifest.jsonl"; }
    std::filesystem::path base_bundle() const { return root / "models" / "base.ckpt"; }
    std::filesystem::path gldm_bundle() const { return root / "models" / "gldm.ckpt"; }
    std::filesystem::path gldm_log() const { return root / "models" / "gldm_log.jsonl"; }
    std::filesystem::path pretrain_log() const { return root / "models" / "pretrain_log.json"; }
    std::filesystem::path bias_dir() const { return root / "bias"; }
    std::filesystem::path detector() const { return root / "detector" / "detector.ckpt"; }
    std::filesystem::path detector_log() const { return root / "detector" / "train_log.jsonl"; }
    std::filesystem::path reports_dir() const { return root / "reports"; }
    std::filesystem::path status_file() const { return root / kStageStatusFile; }
};

RunLayout layout_for(const RunConfig& cfg);

/// The part of the resolved config a stage (and every stage before it) depends on. Output root
/// and worker count are excluded: they do not change results.
nlohmann::json stage_config(const RunConfig& cfg, const std::string& stage);
std::string stage_hash(const RunConfig& cfg, const std::string& stage);

/// Expected outputs of a stage; a stage counts as complete only if all exist.
std::vector<std::filesystem::path> stage_outputs(const RunLayout& layout, const std::string& stage);

/// Machine-readable progress record: per stage, its status, config hash and timing.
class StageStatus {
public:
    static StageStatus load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    /// Recorded hash, empty when the stage never completed.
    std::string hash(const std::string& stage) const;
    void mark_done(const std::string& stage, const std::string& hash, double seconds);
    void mark_failed(const std::string& stage, const std::string& hash, const std::string& error);
    /// Drops the record of `stage` and every later stage.
    void invalidate_from(const std::string& stage);
    const nlohmann::json& document() const { return doc_; }

private:
    nlohmann::json doc_ = {{"stages", nlohmann::json::object()}};
};

using LogFn = std::function<void(const std::string&)>;

/// Stage bodies. Inputs default to the layout of the output root.
DatasetManifest run_synth_data(const RunConfig& cfg, const LogFn& log = {});
void run_pretrain(const RunConfig& cfg, const LogFn& log = {});
ModelBundle run_train_gldm(const RunConfig& cfg, const LogFn& log = {});
/// `split` empty means every entry.
BiasIndex run_compute_bias(const RunConfig& cfg, const std::filesystem::path& manifest_path,
                           const std::filesystem::path& bundle_path, const std::filesystem::path& out_dir,
                           const std::string& split, const LogFn& log = {});
Detector run_train_detector(const RunConfig& cfg, const std::filesystem::path& bias_dir,
                            const std::filesystem::path& out_path, const LogFn& log = {});

struct EvaluateInputs {
    std::filesystem::path detector;
    std::filesystem::path bundle;
    std::filesystem::path manifest;
    std::filesystem::path out_dir;
    /// Splits scored on clean images; "cross_test" also yields one report per held-out method.
    std::vector<std::string> splits{"in_test", "cross_test"};
};

/// Writes reports/<split>.json, reports/cross_test_<method>.json and, for each configured
/// perturbation cell, reports/perturb/<kind>_<level>.json plus robustness_summary.json.
/// Returns the paths written.
std::vector<std::filesystem::path> run_evaluate(const RunConfig& cfg, const EvaluateInputs& in, const LogFn& log = {});
EvaluateInputs default_evaluate_inputs(const RunConfig& cfg);

/// Resolved config plus seed, as echoed into reports and sidecar files.
nlohmann::json config_echo(const RunConfig& cfg);

struct PipelineOutcome {
    std::vector<std::string> ran;
    std::vector<std::string> skipped;
};

/// Runs every stage in order, skipping stages whose recorded hash matches and whose outputs exist.
/// Throws ValidationError when a completed stage was produced under a different configuration.
PipelineOutcome run_pipeline(const RunConfig& cfg, const LogFn& log = {});

/// Runs one stage with status bookkeeping (used by the single-stage subcommands).
void run_single_stage(const RunConfig& cfg, const std::string& stage, const std::function<void()>& body,
                      const LogFn& log = {});

}  // namespace r2bd
