#include "r2bd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "r2bd/error.hpp"
#include "r2bd/rng.hpp"

namespace r2bd {

namespace {

using nlohmann::json;

// Keys that are derived rather than configured.
void erase_keys(json& j, std::initializer_list<const char*> keys) {
    for (const char* k : keys) j.erase(k);
}

json bias_json(const BiasOptions& b) {
    return {{"t_steps", b.t_steps},
            {"latent_form", b.latent_form == LatentBiasForm::expanded ? "expanded" : "encoded_difference"}};
}

BiasOptions bias_from_json(const json& j) {
    BiasOptions b;
    b.t_steps = j.at("t_steps").get<int>();
    const auto form = j.at("latent_form").get<std::string>();
    if (form == "expanded")
        b.latent_form = LatentBiasForm::expanded;
    else if (form == "encoded_difference")
        b.latent_form = LatentBiasForm::encoded_difference;
    else
        throw ValidationError("bias.latent_form must be \"expanded\" or \"encoded_difference\", got \"" + form + "\"");
    return b;
}

json& at_path(json& doc, const std::string& dotted, bool create) {
    json* node = &doc;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw ValidationError("malformed config key \"" + dotted + "\"");
        if (!node->is_object()) throw ValidationError("config key \"" + dotted + "\" does not name a value");
        if (!node->contains(part)) {
            if (!create) throw ValidationError("unknown config key \"" + dotted + "\"");
            (*node)[part] = json::object();
        }
        node = &(*node)[part];
    }
    return *node;
}

}  // namespace

json default_config_json() {
    const RunConfig d;
    json corpus = d.corpus;
    corpus["forgers"] = CorpusConfig::default_forgers();

    json gldm = d.gldm;
    erase_keys(gldm, {"seed"});
    json detector = d.detector;
    erase_keys(detector, {"seed", "image_channels", "image_size", "latent_channels", "latent_size"});

    const PretrainConfig& p = d.pretrain;
    json predictor = p.predictor;
    erase_keys(predictor, {"channels"});
    json pre = {{"vae", p.vae},
                {"vae_steps", p.vae_train.steps},
                {"vae_batch_size", p.vae_train.batch_size},
                {"vae_learning_rate", p.vae_train.learning_rate},
                {"vae_kl_weight", p.vae_train.kl_weight},
                {"max_reconstruction_error", p.max_reconstruction_error},
                {"predictor", predictor},
                {"diffusion_epochs", p.diffusion.epochs},
                {"diffusion_batch_size", p.diffusion.batch_size},
                {"diffusion_learning_rate", p.diffusion.learning_rate},
                {"cond_dropout", p.diffusion.cond_dropout}};

    const EvalConfig& e = d.evaluate;
    json eval = {{"in_test_base_rate", e.in_test_base_rate},
                 {"cross_test_base_rate", e.cross_test_base_rate},
                 {"threshold", nullptr},
                 {"perturbations", json::array()},
                 {"levels", e.levels},
                 {"perturb_max_per_class", e.perturb_max_per_class}};

    return {{"seed", d.seed},         {"output_root", d.output_root}, {"workers", d.workers},
            {"corpus", corpus},       {"pretrain", pre},              {"gldm", gldm},
            {"bias", bias_json(d.bias)}, {"detector", detector},       {"evaluate", eval}};
}

void check_known_keys(const json& doc, const json& defaults, const std::string& path) {
    if (!doc.is_object() || !defaults.is_object()) return;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!defaults.contains(it.key())) throw ValidationError("unknown config key \"" + key + "\"");
        const json& def = defaults.at(it.key());
        if (def.is_object()) {
            if (!it->is_object()) throw ValidationError("config key \"" + key + "\" must be an object");
            check_known_keys(*it, def, key);
        } else if (key == "corpus.forgers") {
            if (!it->is_array()) throw ValidationError("corpus.forgers must be an array");
            const json item_keys = json(ForgerConfig{});
            for (std::size_t i = 0; i < it->size(); ++i) {
                const json& item = (*it)[i];
                if (!item.is_object()) throw ValidationError("corpus.forgers[" + std::to_string(i) + "] must be an object");
                check_known_keys(item, item_keys, key + "[" + std::to_string(i) + "]");
            }
        }
    }
}

std::pair<std::string, json> parse_override(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("override \"" + text + "\" is not of the form key=value");
    const std::string key = text.substr(0, eq);
    const std::string raw = text.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    return {key, value};
}

RunConfig resolve_config(const ConfigSources& sources) {
    const json defaults = default_config_json();
    json doc = defaults;
    if (sources.file) {
        std::ifstream in(*sources.file);
        if (!in) throw ValidationError("cannot read config file " + sources.file->string());
        json file = json::parse(in, nullptr, false);
        if (file.is_discarded() || !file.is_object())
            throw ValidationError("config file " + sources.file->string() + " is not a JSON object");
        check_known_keys(file, defaults);
        doc.merge_patch(file);
    }
    if (const char* env = std::getenv("R2BD_OUTPUT_ROOT"); env != nullptr && *env != '\0') doc["output_root"] = env;
    for (const auto& [key, value] : sources.overrides) {
        json& slot = at_path(doc, key, false);
        if (slot.is_object()) throw ValidationError("config key \"" + key + "\" names a section, not a value");
        slot = value;
    }
    check_known_keys(doc, defaults);
    return config_from_json(doc);
}

RunConfig config_from_json(const json& doc) {
    check_known_keys(doc, default_config_json());
    RunConfig c;
    try {
        c.seed = doc.at("seed").get<std::uint64_t>();
        c.output_root = doc.at("output_root").get<std::string>();
        c.workers = doc.at("workers").get<int>();
        c.corpus = doc.at("corpus").get<CorpusConfig>();

        const json& p = doc.at("pretrain");
        c.pretrain.vae = p.at("vae").get<VaeConfig>();
        c.pretrain.vae_train.steps = p.at("vae_steps").get<int>();
        c.pretrain.vae_train.batch_size = p.at("vae_batch_size").get<int>();
        c.pretrain.vae_train.learning_rate = p.at("vae_learning_rate").get<double>();
        c.pretrain.vae_train.kl_weight = p.at("vae_kl_weight").get<double>();
        c.pretrain.max_reconstruction_error = p.at("max_reconstruction_error").get<double>();
        c.pretrain.predictor = p.at("predictor").get<UNetConfig>();  // channels follow the VAE
        c.pretrain.diffusion.epochs = p.at("diffusion_epochs").get<int>();
        c.pretrain.diffusion.batch_size = p.at("diffusion_batch_size").get<int>();
        c.pretrain.diffusion.learning_rate = p.at("diffusion_learning_rate").get<double>();
        c.pretrain.diffusion.cond_dropout = p.at("cond_dropout").get<double>();

        c.gldm = doc.at("gldm").get<GldmConfig>();
        c.bias = bias_from_json(doc.at("bias"));
        c.detector = doc.at("detector").get<DetectorConfig>();

        const json& e = doc.at("evaluate");
        c.evaluate.in_test_base_rate = e.at("in_test_base_rate").get<double>();
        c.evaluate.cross_test_base_rate = e.at("cross_test_base_rate").get<double>();
        // A JSON merge patch drops null members, so a missing threshold also means "unset".
        if (e.contains("threshold") && !e.at("threshold").is_null())
            c.evaluate.threshold = e.at("threshold").get<double>();
        c.evaluate.perturbations = e.at("perturbations").get<std::vector<std::string>>();
        c.evaluate.levels = e.at("levels").get<PerturbationLevels>();
        c.evaluate.perturb_max_per_class = e.at("perturb_max_per_class").get<int>();
    } catch (const json::exception& ex) {
        throw ValidationError(std::string("invalid config value: ") + ex.what());
    }

    // Module seeds are named substreams of the global seed.
    c.pretrain.vae_train.seed = derive_seed(c.seed, "stage.pretrain.vae");
    c.pretrain.diffusion.seed = derive_seed(c.seed, "stage.pretrain.diffusion");
    c.gldm.seed = derive_seed(c.seed, "stage.train_gldm");
    c.detector.seed = derive_seed(c.seed, "stage.train_detector");

    // Geometry follows the corpus and the autoencoder.
    c.detector.image_channels = c.pretrain.vae.image_channels;
    c.detector.image_size = c.corpus.real.size;
    c.detector.latent_channels = c.pretrain.vae.latent_channels;
    c.detector.latent_size = c.corpus.real.size / 4;
    c.pretrain.predictor.channels = c.pretrain.vae.latent_channels;

    require(c.workers >= 1, "workers must be at least 1");
    require(!c.output_root.empty(), "output_root must not be empty");
    require(c.corpus.real.size >= 8 && c.corpus.real.size % 8 == 0, "corpus.image_size must be a positive multiple of 8");
    require(c.pretrain.vae_train.steps >= 0 && c.pretrain.vae_train.batch_size >= 1, "invalid VAE training sizes");
    require(c.pretrain.diffusion.epochs >= 0 && c.pretrain.diffusion.batch_size >= 1,
            "invalid diffusion pretraining sizes");
    require(c.bias.t_steps >= 1 && c.bias.t_steps <= c.gldm.T, "bias.t_steps must be in [1, gldm.T]");
    require(c.evaluate.perturb_max_per_class >= 0, "evaluate.perturb_max_per_class must be >= 0");
    require(c.evaluate.in_test_base_rate > 0 && c.evaluate.in_test_base_rate < 1 &&
                c.evaluate.cross_test_base_rate > 0 && c.evaluate.cross_test_base_rate < 1,
            "base rates must be in (0, 1)");
    for (const auto& p : c.evaluate.perturbations)
        if (p != "all") parse_perturbation(p, 0);
    validate_gldm_config(c.gldm);
    validate_detector_config(c.detector);

    c.resolved = doc;
    if (!c.resolved["evaluate"].contains("threshold")) c.resolved["evaluate"]["threshold"] = nullptr;
    return c;
}

std::string json_hash(const json& value) {
    const std::string text = value.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

std::filesystem::path output_root(const RunConfig& cfg) { return std::filesystem::path(cfg.output_root); }

std::filesystem::path resolve_path(const RunConfig& cfg, const std::filesystem::path& p) {
    return p.is_absolute() ? p : output_root(cfg) / p;
}

}  // namespace r2bd
