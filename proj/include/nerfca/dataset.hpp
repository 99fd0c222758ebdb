#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "nerfca/geometry.hpp"
#include "nerfca/phantom.hpp"
#include "nerfca/raster.hpp"

namespace nerfca {

/// One detector frame I(r, tau_i) of one view at one cardiac phase.
struct AngiogramFrame {
    int view = 0;
    int phase = 1;
    CameraPose pose;
    Raster image;  ///< intensities in (0, I0], representable as 32-bit floats
};

/// Pixel sampling weights derived from temporal variance of one view.
struct ProbabilityMap {
    int view = 0;
    Raster weights;                          ///< non-negative, sums to 1
    std::vector<std::uint8_t> high_variance; ///< 1 where the pixel is in the high-variance set
};

struct ViewRecord {
    int id = 0;
    bool training = true;
    CameraPose pose;
};

struct DatasetConfig {
    int training_views = 4;
    int gt_samples = 2000;          ///< quadrature for ground truth (4x the 500-sample default)
    double i0 = 1.0;
    double mask_quantile = 0.90;
    double variance_floor = 1e-6;   ///< fraction of the maximum variance added to every pixel
    double vessel_depth_threshold = 1e-3;
    std::uint64_t seed = 0;

    static DatasetConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct AngiogramDataset {
    int phases = 10;
    double i0 = 1.0;
    int width = 0;
    int height = 0;
    double vessel_attenuation = 0.0;
    std::vector<ViewRecord> views;
    /// View-major, phase-minor: frames[v * phases + (i - 1)].
    std::vector<AngiogramFrame> frames;
    /// One per view, same order as `views`.
    std::vector<ProbabilityMap> maps;
    /// Ground-truth vessel masks, same indexing as `frames`.
    std::vector<std::vector<std::uint8_t>> vessel_masks;
    nlohmann::json generation;  ///< configuration snapshot that produced the data

    const AngiogramFrame& frame(std::size_t view_index, int phase) const;
    const std::vector<std::uint8_t>& vessel_mask(std::size_t view_index, int phase) const;
    std::vector<std::size_t> training_view_indices() const;
    std::vector<std::size_t> validation_view_indices() const;
};

/// Beer-Lambert projection of `field` with midpoint quadrature; values rounded to float.
AngiogramFrame render_ground_truth(const CameraPose& pose, const DensityField& field, int phase,
                                   int samples_per_ray, double i0 = 1.0, int threads = 1);

/// Population variance over the frames of one view, turned into sampling weights.
ProbabilityMap variance_map(std::span<const AngiogramFrame> frames, double mask_quantile,
                            double floor_fraction);
/// Per-pixel population variance (exposed for diagnostics and tests).
Raster pixel_variance(std::span<const AngiogramFrame> frames);

/// Renders every (view, phase) frame of a view plan, the vessel masks and probability maps.
AngiogramDataset generate_dataset(const Phantom& phantom, const ViewPlan& plan,
                                  const DatasetConfig& config, int threads = 1);

void save_dataset(const AngiogramDataset& dataset, const std::filesystem::path& dir);
AngiogramDataset load_dataset(const std::filesystem::path& dir);

}  // namespace nerfca
