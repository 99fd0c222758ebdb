#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "nerfca/dataset.hpp"
#include "nerfca/encoding.hpp"
#include "nerfca/losses.hpp"
#include "nerfca/mlp.hpp"

namespace nerfca {

/// Training hyperparameters. Iteration counts are given at full scale and multiplied by
/// `scale` (iterations, encoding horizon, schedule delays and ramps, learning-rate decay).
struct TrainConfig {
    Variant variant = Variant::Full;
    double iterations = 200000;
    int batch_rays = 1024;
    int samples_per_ray = 500;
    double weighted_fraction = 0.5;  ///< V
    double scale = 0.05;
    std::uint64_t seed = 0;
    bool jitter = true;

    MlpShape network{0, 4, 128};  ///< input_dim is derived from the encoding
    int latent_dim = 8;
    double dynamic_output_bias = 0.0;  ///< initial pre-softplus output of the dynamic network
    int encoding_bands = 12;       ///< L
    double encoding_horizon = 150000;  ///< N
    int encoding_start_band = 1;

    double lr_start = 1e-3;
    double lr_end = 1e-5;
    double lr_decay = 150000;

    double horizon = 150000;  ///< schedules reach their end value here
    WeightSchedule lambda_b{1e-12, 1e-10, 40000, 0};
    WeightSchedule lambda_e{1e-12, 1e-10, 0, 0};
    WeightSchedule lambda_o{1e-8, 1e-5, 40000, 0};
    LossGuards guards;
    double entropy_min_density = 1e-4;
    double occlusion_distance = 0.2;  ///< D

    int chunk_rays = 64;
    int threads = 1;
    long long checkpoint_every = 1000;

    void validate() const;
    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    long long total_iterations() const;
    EncodingConfig encoding() const;
    LearningRateSchedule learning_rate() const;
    /// Schedules in scaled iterations; a zero ramp means "until the scaled horizon".
    LossSchedules schedules() const;
};

/// Static and dynamic networks plus the phase latents (or, for the sparse variant, one static
/// network per phase). Parameter order is fixed and used for checkpoints and the optimizer.
class FieldModel {
public:
    FieldModel(const TrainConfig& config, int phases);

    Variant variant() const { return variant_; }
    int phases() const { return phases_; }
    const EncodingConfig& encoding() const { return encoding_; }

    Mlp& static_net() { return static_net_; }
    Mlp& dynamic_net() { return dynamic_net_; }
    PhaseLatentTable& latents() { return latents_; }
    Mlp& phase_net(int phase) { return phase_nets_.at(static_cast<std::size_t>(phase - 1)); }

    std::vector<ad::Parameter*> parameters();
    std::vector<const ad::Parameter*> parameters() const;

    /// Tape-free density queries at an encoding iteration; points are 3 x N.
    Eigen::RowVectorXd static_density(const Eigen::MatrixXd& points, int phase, double iteration) const;
    Eigen::RowVectorXd dynamic_density(const Eigen::MatrixXd& points, int phase, double iteration) const;

private:
    Variant variant_;
    int phases_;
    EncodingConfig encoding_;
    Mlp static_net_;
    Mlp dynamic_net_;
    PhaseLatentTable latents_;
    std::vector<Mlp> phase_nets_;
};

struct TrainingRay {
    std::size_t view_index = 0;
    int phase = 1;
    int u = 0;
    int v = 0;
    double target = 1.0;
    bool vessel_likely = false;
    bool weighted = false;  ///< drawn from the high-variance set
};

/// Draws training pixels: floor(V * B) from the high-variance sets weighted by the maps, the
/// rest uniformly. Frames are chosen uniformly over all training views and phases.
class BatchSampler {
public:
    BatchSampler(const AngiogramDataset& dataset, double weighted_fraction);

    std::vector<TrainingRay> sample(int batch_rays, std::mt19937_64& rng) const;
    /// A single draw from one view's high-variance set (uniform when that set is empty).
    int draw_weighted_pixel(std::size_t view_index, std::mt19937_64& rng) const;
    /// Probabilities used by draw_weighted_pixel, normalized over the pixel grid.
    std::vector<double> weighted_pixel_probabilities(std::size_t view_index) const;
    int weighted_count(int batch_rays) const;

private:
    const AngiogramDataset& dataset_;
    double fraction_;
    std::vector<std::size_t> views_;
    std::vector<std::vector<int>> masked_pixels_;
    std::vector<std::vector<double>> masked_weights_;
};

struct TrainState {
    long long iteration = 0;
    std::unique_ptr<FieldModel> model;
    Adam optimizer;
    std::mt19937_64 rng;
};

TrainState initial_state(const TrainConfig& config, int phases);

/// Evaluates the variant objective on a batch. When `apply_update` is set, gradients are
/// reduced in chunk order and one Adam step is taken.
LossBundle train_step(TrainState& state, const AngiogramDataset& dataset,
                      const std::vector<TrainingRay>& batch, const TrainConfig& config,
                      bool apply_update = true);

/// Same objective as train_step with precomputed sample positions; returns the scalar loss and
/// leaves gradients in the model parameters. Used by gradient checks.
double evaluate_objective(FieldModel& model, const AngiogramDataset& dataset,
                          const std::vector<TrainingRay>& batch, const std::vector<RaySampleSet>& samples,
                          const TrainConfig& config, double iteration, bool backward,
                          LossBundle* bundle = nullptr);

/// Stratified sample positions for every ray of a batch, consuming `rng` in ray order.
std::vector<RaySampleSet> sample_batch_positions(const AngiogramDataset& dataset,
                                                 const std::vector<TrainingRay>& batch,
                                                 const TrainConfig& config, std::mt19937_64& rng);

void save_checkpoint(const TrainState& state, const TrainConfig& config,
                     const std::filesystem::path& path);
/// Restores a checkpoint; the stored config is returned through `config`.
TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig& config);

struct TrainingOptions {
    bool resume = false;
    std::optional<long long> stop_at;  ///< stop (and checkpoint) after this iteration
    std::function<void(long long, const LossBundle&)> on_step;
};

/// Runs (or resumes) training into `out_dir`: checkpoint.bin and loss.csv.
TrainState run_training(const AngiogramDataset& dataset, const TrainConfig& config,
                        const std::filesystem::path& out_dir, const TrainingOptions& options = {});

std::string loss_csv_header();
std::string loss_csv_row(long long iteration, const LossBundle& bundle, double learning_rate);

}  // namespace nerfca
