#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "r2bd/error.hpp"
#include "r2bd/pipeline.hpp"

using namespace r2bd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("r2bd_pipe_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path write_json(const fs::path& p, const json& j) {
    std::ofstream(p) << j.dump(1);
    return p;
}

// Smallest configuration that still exercises every stage: two forgers, one held out.
json tiny_config(const fs::path& root) {
    json forgers = json::array();
    forgers.push_back({{"method_name", "gan_a"}, {"family", "gan"}, {"seed", 1}, {"train_steps", 3}, {"width", 2}, {"noise_dim", 4}});
    forgers.push_back({{"method_name", "pixeldm_b"}, {"family", "pixeldm"}, {"seed", 2}, {"train_steps", 3}, {"width", 2}, {"sample_steps", 2}});
    return {{"seed", 3},
            {"output_root", root.string()},
            {"corpus",
             {{"image_size", 16},
              {"train_real", 16},
              {"train_fake", 16},
              {"in_test_real", 6},
              {"in_test_fake", 6},
              {"cross_test_real", 6},
              {"cross_test_per_method", 6},
              {"forger_train_images", 16},
              {"holdout_methods", {"pixeldm_b"}},
              {"forgers", forgers}}},
            {"pretrain",
             {{"vae", {{"width", 2}}},
              {"vae_steps", 4},
              {"max_reconstruction_error", 10.0},
              {"predictor", {{"width", 2}, {"time_dim", 4}}},
              {"diffusion_epochs", 1}}},
            {"gldm", {{"epochs", 1}, {"gen_iters_per_cycle", 2}, {"disc_iters_per_cycle", 1}}},
            {"bias", {{"t_steps", 2}}},
            {"detector", {{"epochs", 1}, {"width", 2}, {"head_hidden", 4}}}};
}

RunConfig tiny_run(const fs::path& root, const std::vector<std::pair<std::string, json>>& overrides = {}) {
    return resolve_config(
        ConfigSources{write_json(root.parent_path() / (root.filename().string() + ".json"), tiny_config(root)), overrides});
}

int run_cli(const std::string& args) {
    const int rc = std::system((std::string(R2BD_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, DefaultsResolveAndValidate) {
    const RunConfig c = resolve_config({});
    EXPECT_EQ(c.resolved, [] {
        json d = default_config_json();
        if (const char* env = std::getenv("R2BD_OUTPUT_ROOT")) d["output_root"] = env;
        return d;
    }());
    EXPECT_EQ(c.corpus.forgers.size(), 6u);
    EXPECT_EQ(c.detector.mode, DetectorMode::two_stream);
}

TEST(Config, UnknownKeysAreRejectedWithTheirPath) {
    const auto dir = temp_dir("unknown");
    json doc = {{"detector", {{"widht", 4}}}};
    try {
        resolve_config(ConfigSources{write_json(dir / "c.json", doc), {}});
        FAIL() << "unknown key accepted";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("detector.widht"), std::string::npos) << e.what();
    }
    EXPECT_THROW(resolve_config(ConfigSources{std::nullopt, {parse_override("gldm.nope=1")}}), ValidationError);
    json bad_forger = {{"corpus", {{"forgers", {{{"method_name", "x"}, {"family", "gan"}, {"colour", 1}}}}}}};
    EXPECT_THROW(resolve_config(ConfigSources{write_json(dir / "f.json", bad_forger), {}}), ValidationError);
    EXPECT_THROW(resolve_config(ConfigSources{std::nullopt, {parse_override("detector.epochs=-1")}}), ValidationError);
}

TEST(Config, OverridesParseAsJsonOrString) {
    EXPECT_EQ(parse_override("a.b=3").second, json(3));
    EXPECT_EQ(parse_override("a.b=true").second, json(true));
    EXPECT_EQ(parse_override("a.b=two_stream").second, json("two_stream"));
    EXPECT_EQ(parse_override("a.b=[1,2]").second, json({1, 2}));
    EXPECT_EQ(parse_override("x.y.z=1").first, "x.y.z");
    EXPECT_THROW(parse_override("novalue"), ValidationError);
}

TEST(Config, PrecedenceFlagsThenEnvThenFileThenDefaults) {
    const auto dir = temp_dir("precedence");
    const fs::path file = write_json(dir / "c.json", {{"output_root", "from_file"}, {"detector", {{"epochs", 7}, {"width", 3}}}});
    ::unsetenv("R2BD_OUTPUT_ROOT");
    RunConfig c = resolve_config(ConfigSources{file, {}});
    EXPECT_EQ(c.output_root, "from_file");
    EXPECT_EQ(c.detector.epochs, 7);
    EXPECT_EQ(c.detector.heads, DetectorConfig{}.heads);

    ::setenv("R2BD_OUTPUT_ROOT", "from_env", 1);
    c = resolve_config(ConfigSources{file, {}});
    EXPECT_EQ(c.output_root, "from_env");
    c = resolve_config(ConfigSources{file, {parse_override("output_root=from_flag"), parse_override("detector.epochs=2")}});
    EXPECT_EQ(c.output_root, "from_flag");
    EXPECT_EQ(c.detector.epochs, 2);
    EXPECT_EQ(c.detector.width, 3);
    ::unsetenv("R2BD_OUTPUT_ROOT");
}

TEST(Config, StageHashesFollowDependencies) {
    const RunConfig base = resolve_config({});
    const RunConfig det = resolve_config(ConfigSources{std::nullopt, {parse_override("detector.epochs=3")}});
    const RunConfig moved = resolve_config(ConfigSources{std::nullopt, {parse_override("output_root=/elsewhere"), parse_override("workers=4")}});
    for (const auto& s : stage_names()) EXPECT_EQ(stage_hash(base, s), stage_hash(moved, s)) << s;
    EXPECT_EQ(stage_hash(base, "synth_data"), stage_hash(det, "synth_data"));
    EXPECT_EQ(stage_hash(base, "compute_bias"), stage_hash(det, "compute_bias"));
    EXPECT_NE(stage_hash(base, "train_detector"), stage_hash(det, "train_detector"));
    EXPECT_NE(stage_hash(base, "evaluate"), stage_hash(det, "evaluate"));
    const RunConfig seeded = resolve_config(ConfigSources{std::nullopt, {parse_override("seed=9")}});
    EXPECT_NE(stage_hash(base, "synth_data"), stage_hash(seeded, "synth_data"));
    EXPECT_EQ(json_hash(json{{"a", 1}}), json_hash(json{{"a", 1}}));
    EXPECT_NE(json_hash(json{{"a", 1}}), json_hash(json{{"a", 2}}));
}

TEST(Cli, EverySubcommandDocumentsItself) {
    for (const char* sub : {"synth-data", "train-gldm", "compute-bias", "train-detector", "evaluate", "pipeline", "show-config"})
        EXPECT_EQ(run_cli(std::string(sub) + " --help"), 0) << sub;
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_NE(run_cli("no-such-command"), 0);
    EXPECT_EQ(run_cli("show-config --set detector.bogus=1"), 2);
}

TEST(Pipeline, RunsResumesAndRefusesForeignArtifacts) {
    const auto base = temp_dir("run");
    const fs::path root = base / "a";
    const RunConfig cfg = tiny_run(root);
    const PipelineOutcome first = run_pipeline(cfg);
    EXPECT_EQ(first.ran, stage_names());
    EXPECT_TRUE(first.skipped.empty());
    const RunLayout l = layout_for(cfg);
    for (const auto& s : stage_names())
        for (const auto& p : stage_outputs(l, s)) EXPECT_TRUE(fs::exists(p)) << p;
    const json status = json::parse(slurp(l.status_file()));
    for (const auto& s : stage_names()) EXPECT_EQ(status["stages"][s]["config_hash"], stage_hash(cfg, s)) << s;

    const std::string report = slurp(l.reports_dir() / "in_test.json");
    const auto stamp = fs::last_write_time(l.reports_dir() / "in_test.json");
    const PipelineOutcome second = run_pipeline(cfg);
    EXPECT_TRUE(second.ran.empty());
    EXPECT_EQ(second.skipped, stage_names());
    EXPECT_EQ(fs::last_write_time(l.reports_dir() / "in_test.json"), stamp);

    // A removed output reruns that stage and everything after it.
    fs::remove(l.detector());
    const PipelineOutcome third = run_pipeline(cfg);
    EXPECT_EQ(third.ran, (std::vector<std::string>{"train_detector", "evaluate"}));
    EXPECT_EQ(slurp(l.reports_dir() / "in_test.json"), report);

    const RunConfig changed = tiny_run(root, {parse_override("detector.epochs=2")});
    EXPECT_THROW(run_pipeline(changed), ValidationError);
    const fs::path file = base / "a.json";
    EXPECT_EQ(run_cli("pipeline -q -c " + file.string() + " --set detector.epochs=2"), 2);
    EXPECT_TRUE(fs::exists(root / "error.json"));
    EXPECT_EQ(run_cli("pipeline -q -c " + file.string()), 0);

    // Same configuration in a fresh root with more workers: byte-identical reports.
    const RunConfig other = tiny_run(base / "b", {parse_override("workers=2")});
    run_pipeline(other);
    for (const auto& entry : fs::directory_iterator(l.reports_dir())) {
        if (!entry.is_regular_file()) continue;
        // The config echo names the output root and worker count; everything else must match.
        json a = json::parse(slurp(entry.path()));
        json b = json::parse(slurp(layout_for(other).reports_dir() / entry.path().filename()));
        a.erase("config");
        b.erase("config");
        EXPECT_EQ(a.dump(), b.dump()) << entry.path().filename();
    }
    EXPECT_EQ(slurp(l.manifest()), slurp(layout_for(other).manifest()));
}
