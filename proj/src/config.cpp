#include "nerfca/config.hpp"

#include <fstream>

#include "nerfca/errors.hpp"

namespace nerfca {

namespace {

const nlohmann::json& section(const nlohmann::json& j, const char* name) {
    static const nlohmann::json empty = nlohmann::json::object();
    if (!j.contains(name)) return empty;
    const auto& s = j.at(name);
    if (!s.is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
    return s;
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("configuration root must be an object");
    for (const auto& [key, value] : j.items())
        if (key != "scanner" && key != "phantom" && key != "dataset" && key != "train" && key != "eval")
            throw ConfigError("unknown config section '" + key + "'");
    RunConfig c;
    try {
        c.scanner = ScannerConfig::from_json(section(j, "scanner"));
        c.phantom = PhantomConfig::from_json(section(j, "phantom"));
        c.dataset = DatasetConfig::from_json(section(j, "dataset"));
        c.train = TrainConfig::from_json(section(j, "train"));
        c.eval = EvalConfig::from_json(section(j, "eval"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid configuration value: ") + e.what());
    } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
    }
    return c;
}

nlohmann::json RunConfig::to_json() const {
    return {{"scanner", scanner.to_json()},
            {"phantom", phantom.to_json()},
            {"dataset", dataset.to_json()},
            {"train", train.to_json()},
            {"eval", eval.to_json()}};
}

nlohmann::json merge_config_files(const std::vector<std::filesystem::path>& files) {
    nlohmann::json merged = nlohmann::json::object();
    for (const auto& f : files) {
        std::ifstream is(f);
        if (!is) throw ConfigError("cannot read config file " + f.string());
        nlohmann::json layer;
        try {
            is >> layer;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("malformed config file " + f.string() + ": " + e.what());
        }
        if (!layer.is_object()) throw ConfigError("config file " + f.string() + " must hold an object");
        merged.merge_patch(layer);
    }
    return merged;
}

void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides) {
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "' is not key=value");
        const std::string key = item.substr(0, eq);
        const std::string text = item.substr(eq + 1);
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception&) {
            value = text;
        }
        nlohmann::json::json_pointer ptr;
        std::size_t start = 0;
        while (true) {
            const auto dot = key.find('.', start);
            ptr /= key.substr(start, dot - start);
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        config[ptr] = value;
    }
}

RunConfig resolve_config(const std::vector<std::filesystem::path>& files, const std::vector<std::string>& overrides) {
    nlohmann::json j = merge_config_files(files);
    apply_overrides(j, overrides);
    return RunConfig::from_json(j);
}

}  // namespace nerfca
