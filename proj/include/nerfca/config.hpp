#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "nerfca/dataset.hpp"
#include "nerfca/evaluator.hpp"
#include "nerfca/geometry.hpp"
#include "nerfca/phantom.hpp"
#include "nerfca/trainer.hpp"

namespace nerfca {

/// Every tunable of a run, grouped by section: scanner, phantom, dataset, train, eval.
struct RunConfig {
    ScannerConfig scanner;
    PhantomConfig phantom;
    DatasetConfig dataset;
    TrainConfig train;
    EvalConfig eval;

    static RunConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Merges JSON files left to right (later files win, objects merge recursively).
nlohmann::json merge_config_files(const std::vector<std::filesystem::path>& files);

/// Applies "section.key=value" overrides; values are parsed as JSON, falling back to strings.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides);

RunConfig resolve_config(const std::vector<std::filesystem::path>& files, const std::vector<std::string>& overrides);

}  // namespace nerfca
