#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nerfca/dataset.hpp"
#include "nerfca/raster.hpp"
#include "nerfca/trainer.hpp"

namespace nerfca {

/// Density of one channel at a batch of points (3 x N) -> 1 x N.
using DensityBatchFn = std::function<Eigen::RowVectorXd(const Eigen::MatrixXd&)>;

/// Per-pixel maximum of `density` over `samples` midpoint positions of each detector ray.
Raster mip_project(const DensityBatchFn& density, const CameraPose& pose, int samples, int threads = 1);
Raster mip_project(const DensityField& field, const CameraPose& pose, int phase, int samples, int threads = 1);

std::vector<std::uint8_t> threshold_mask(const Raster& image, double threshold);

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
double dice(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth);

inline constexpr double kPsnrCap = 99.0;
double psnr(const Raster& predicted, const Raster& truth, double peak = 1.0);
/// Gaussian-window SSIM (11 x 11, sigma 1.5) over the valid region, luminance range `peak`.
double ssim(const Raster& a, const Raster& b, double peak = 1.0);

struct EvalConfig {
    int samples_per_ray = 500;
    double dice_fraction = 0.5;  ///< MIP threshold as a fraction of the vessel attenuation
    int chunk_rays = 256;
    int threads = 1;
    bool training_views = false;  ///< evaluate training instead of validation views
    bool write_images = false;

    static EvalConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Model renders for one (pose, phase).
struct ChannelImages {
    Raster static_intensity;
    Raster dynamic_intensity;
    Raster composite;
    Raster mip;  ///< max sigma_d, or max composite sigma for per-phase static models
    Raster dynamic_depth;  ///< accumulated dynamic density per ray
};

ChannelImages render_channels(const FieldModel& model, const CameraPose& pose, int phase, double iteration,
                              double i0, int samples, int chunk_rays = 256, int threads = 1);

/// Renders every phase of one pose, evaluating the static network only once.
std::vector<ChannelImages> render_all_phases(const FieldModel& model, const CameraPose& pose, double iteration,
                                             double i0, int samples, int chunk_rays = 256, int threads = 1);

struct EvalCell {
    int view = 0;
    int phase = 1;
    double dice = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<EvalCell> cells;
    double mip_threshold = 0.0;
    double mean_dice = 0.0;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    std::vector<double> phase_dice;  ///< mean over views, index phase - 1
    std::vector<std::pair<int, double>> view_dice;
    double phase_dice_std = 0.0;  ///< population standard deviation of phase_dice

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

EvalReport evaluate(const FieldModel& model, const AngiogramDataset& dataset, double iteration,
                    const EvalConfig& config, const std::optional<std::filesystem::path>& image_dir = {});

void write_eval_csv(const EvalReport& report, const std::filesystem::path& path);
void write_phase_csv(const EvalReport& report, const std::filesystem::path& path);
std::string eval_markdown(const EvalReport& report, const std::string& title);

// --- ablations ---------------------------------------------------------------------------

enum class AblationSuite { WeightedSampling, EntropyOcclusionGrid, VariantComparison, PhaseConsistency };

AblationSuite suite_from_string(const std::string& s);
std::string to_string(AblationSuite s);

struct AblationCell {
    std::string name;
    TrainConfig train;
};

struct AblationOptions {
    std::vector<double> entropy_weights{0.0, 1e-12, 1e-10, 1e-8};    ///< lambda_e end values
    std::vector<double> occlusion_weights{0.0, 1e-8, 1e-5, 1e-3};    ///< lambda_o end values
    std::function<void(const std::string&)> progress;
};

std::vector<AblationCell> ablation_cells(AblationSuite suite, const TrainConfig& base,
                                         const AblationOptions& options = {});

struct AblationRow {
    std::string name;
    nlohmann::json settings;
    EvalReport report;
};

/// Trains (or resumes) one cell in `dir` and evaluates it; a finished cell is read back from
/// dir/metrics.json, which must match the cell and evaluation settings.
AblationRow run_cell(const AblationCell& cell, const AngiogramDataset& dataset, const EvalConfig& eval,
                     const std::filesystem::path& dir, const std::function<void(const std::string&)>& progress = {});

/// Trains and evaluates each cell under out_dir/cells/<name>. Finished cells (metrics.json
/// present) are reused, partially trained ones resume from their checkpoint.
std::vector<AblationRow> run_ablation(AblationSuite suite, const AngiogramDataset& dataset,
                                      const TrainConfig& base, const EvalConfig& eval,
                                      const std::filesystem::path& out_dir, const AblationOptions& options = {});

}  // namespace nerfca
