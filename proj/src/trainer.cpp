#include "nerfca/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "nerfca/binary_io.hpp"
#include "nerfca/errors.hpp"
#include "nerfca/parallel.hpp"
#include "nerfca/renderer.hpp"

namespace nerfca {

namespace fs = std::filesystem;

// --- configuration -----------------------------------------------------------------------

namespace {

nlohmann::json schedule_json(const WeightSchedule& s) {
    return {{"start", s.start}, {"end", s.end}, {"delay", s.delay}, {"ramp", s.ramp}};
}

WeightSchedule schedule_from(const nlohmann::json& j, WeightSchedule s) {
    s.start = j.value("start", s.start);
    s.end = j.value("end", s.end);
    s.delay = j.value("delay", s.delay);
    s.ramp = j.value("ramp", s.ramp);
    return s;
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_rays < 1) throw ConfigError("train.batch_rays must be >= 1");
    if (samples_per_ray < 2) throw ConfigError("train.S must be >= 2");
    if (!(weighted_fraction >= 0.0 && weighted_fraction <= 1.0))
        throw ConfigError("train.V must lie in [0, 1]");
    if (!(scale > 0.0)) throw ConfigError("train.scale must be positive");
    if (!(iterations >= 0.0)) throw ConfigError("train.iterations must be >= 0");
    if (network.hidden_layers < 0 || network.width < 1) throw ConfigError("train network shape invalid");
    if (latent_dim < 1) throw ConfigError("train.latent_dim must be >= 1");
    if (!std::isfinite(dynamic_output_bias)) throw ConfigError("train.dynamic_output_bias must be finite");
    if (!(lr_start > 0.0) || !(lr_end > 0.0) || !(lr_decay > 0.0))
        throw ConfigError("train learning-rate settings must be positive");
    if (!(horizon > 0.0)) throw ConfigError("train.horizon must be positive");
    if (chunk_rays < 1) throw ConfigError("train.chunk_rays must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
    if (occlusion_distance < 0.0) throw ConfigError("train.D must be >= 0");
    encoding().validate();
    const LossSchedules s = schedules();
    s.factorization.validate("lambda_b");
    s.entropy.validate("lambda_e");
    s.occlusion.validate("lambda_o");
}

long long TrainConfig::total_iterations() const { return std::llround(iterations * scale); }

EncodingConfig TrainConfig::encoding() const {
    return EncodingConfig{encoding_bands, encoding_horizon * scale, encoding_start_band};
}

LearningRateSchedule TrainConfig::learning_rate() const {
    return LearningRateSchedule{lr_start, lr_end, lr_decay * scale};
}

LossSchedules TrainConfig::schedules() const {
    auto scaled = [&](WeightSchedule s) {
        const double ramp = s.ramp > 0.0 ? s.ramp : horizon - s.delay;
        s.delay *= scale;
        s.ramp = ramp * scale;
        return s;
    };
    return {scaled(lambda_b), scaled(lambda_e), scaled(lambda_o)};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
        c.iterations = j.value("iterations", c.iterations);
        c.batch_rays = j.value("batch_rays", c.batch_rays);
        c.samples_per_ray = j.value("S", c.samples_per_ray);
        c.weighted_fraction = j.value("V", c.weighted_fraction);
        c.scale = j.value("scale", c.scale);
        c.seed = j.value("seed", c.seed);
        c.jitter = j.value("jitter", c.jitter);
        c.network.hidden_layers = j.value("hidden_layers", c.network.hidden_layers);
        c.network.width = j.value("width", c.network.width);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.dynamic_output_bias = j.value("dynamic_output_bias", c.dynamic_output_bias);
        c.encoding_bands = j.value("L", c.encoding_bands);
        c.encoding_horizon = j.value("N", c.encoding_horizon);
        c.encoding_start_band = j.value("start_band", c.encoding_start_band);
        c.lr_start = j.value("lr_start", c.lr_start);
        c.lr_end = j.value("lr_end", c.lr_end);
        c.lr_decay = j.value("lr_decay", c.lr_decay);
        c.horizon = j.value("horizon", c.horizon);
        if (j.contains("lambda_b")) c.lambda_b = schedule_from(j.at("lambda_b"), c.lambda_b);
        if (j.contains("lambda_e")) c.lambda_e = schedule_from(j.at("lambda_e"), c.lambda_e);
        if (j.contains("lambda_o")) c.lambda_o = schedule_from(j.at("lambda_o"), c.lambda_o);
        c.guards.ratio_epsilon = j.value("eps_w", c.guards.ratio_epsilon);
        c.guards.density_epsilon = j.value("eps_p", c.guards.density_epsilon);
        c.guards.entropy_clamp = j.value("eps_h", c.guards.entropy_clamp);
        c.entropy_min_density = j.value("entropy_min_density", c.entropy_min_density);
        c.occlusion_distance = j.value("D", c.occlusion_distance);
        c.chunk_rays = j.value("chunk_rays", c.chunk_rays);
        c.threads = j.value("threads", c.threads);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train section: ") + e.what());
    } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"variant", to_string(variant)},
            {"iterations", iterations},
            {"batch_rays", batch_rays},
            {"S", samples_per_ray},
            {"V", weighted_fraction},
            {"scale", scale},
            {"seed", seed},
            {"jitter", jitter},
            {"hidden_layers", network.hidden_layers},
            {"width", network.width},
            {"latent_dim", latent_dim},
            {"dynamic_output_bias", dynamic_output_bias},
            {"L", encoding_bands},
            {"N", encoding_horizon},
            {"start_band", encoding_start_band},
            {"lr_start", lr_start},
            {"lr_end", lr_end},
            {"lr_decay", lr_decay},
            {"horizon", horizon},
            {"lambda_b", schedule_json(lambda_b)},
            {"lambda_e", schedule_json(lambda_e)},
            {"lambda_o", schedule_json(lambda_o)},
            {"eps_w", guards.ratio_epsilon},
            {"eps_p", guards.density_epsilon},
            {"eps_h", guards.entropy_clamp},
            {"entropy_min_density", entropy_min_density},
            {"D", occlusion_distance},
            {"chunk_rays", chunk_rays},
            {"threads", threads},
            {"checkpoint_every", checkpoint_every}};
}

// --- model -------------------------------------------------------------------------------

FieldModel::FieldModel(const TrainConfig& config, int phases)
    : variant_(config.variant), phases_(phases), encoding_(config.encoding()) {
    if (phases < 1) throw ArgumentError("model needs at least one phase");
    std::seed_seq seq{config.seed, std::uint64_t{0}};
    std::mt19937_64 rng(seq);
    MlpShape shape = config.network;
    shape.input_dim = encoding_.output_dim();
    if (variant_ == Variant::Sparse) {
        for (int i = 1; i <= phases; ++i)
            phase_nets_.emplace_back("phase" + std::to_string(i), ad::ParamRole::StaticNet, shape, rng);
        return;
    }
    static_net_ = Mlp("static", ad::ParamRole::StaticNet, shape, rng);
    MlpShape dyn = shape;
    dyn.input_dim += config.latent_dim;
    dynamic_net_ = Mlp("dynamic", ad::ParamRole::DynamicNet, dyn, rng);
    dynamic_net_.set_output_bias(config.dynamic_output_bias);
    latents_ = PhaseLatentTable(config.latent_dim, phases, rng);
}

std::vector<ad::Parameter*> FieldModel::parameters() {
    std::vector<ad::Parameter*> out;
    if (variant_ == Variant::Sparse) {
        for (auto& net : phase_nets_)
            for (auto* p : net.parameters()) out.push_back(p);
        return out;
    }
    out = static_net_.parameters();
    for (auto* p : dynamic_net_.parameters()) out.push_back(p);
    out.push_back(&latents_.parameter());
    return out;
}

std::vector<const ad::Parameter*> FieldModel::parameters() const {
    std::vector<const ad::Parameter*> out;
    for (auto* p : const_cast<FieldModel*>(this)->parameters()) out.push_back(p);
    return out;
}

Eigen::RowVectorXd FieldModel::static_density(const Eigen::MatrixXd& points, int phase,
                                              double iteration) const {
    Eigen::MatrixXd enc;
    encode_batch(points, iteration, encoding_, enc);
    if (variant_ == Variant::Sparse) {
        if (phase < 1 || phase > phases_) throw ArgumentError("phase out of range");
        return phase_nets_[static_cast<std::size_t>(phase - 1)].evaluate(enc);
    }
    return static_net_.evaluate(enc);
}

Eigen::RowVectorXd FieldModel::dynamic_density(const Eigen::MatrixXd& points, int phase,
                                               double iteration) const {
    if (variant_ == Variant::Sparse) return Eigen::RowVectorXd::Zero(points.cols());
    Eigen::MatrixXd enc;
    encode_batch(points, iteration, encoding_, enc);
    const Eigen::VectorXd code = latents_.code(phase);
    Eigen::MatrixXd input(enc.rows() + code.size(), enc.cols());
    input.topRows(enc.rows()) = enc;
    input.bottomRows(code.size()) = code.replicate(1, enc.cols());
    return dynamic_net_.evaluate(input);
}

// --- batch sampling ----------------------------------------------------------------------

BatchSampler::BatchSampler(const AngiogramDataset& dataset, double weighted_fraction)
    : dataset_(dataset), fraction_(weighted_fraction), views_(dataset.training_view_indices()) {
    if (views_.empty() || dataset.phases < 1) throw ArgumentError("dataset has no training frames");
    if (!(weighted_fraction >= 0.0 && weighted_fraction <= 1.0))
        throw ArgumentError("weighted fraction must lie in [0, 1]");
    masked_pixels_.resize(dataset.views.size());
    masked_weights_.resize(dataset.views.size());
    for (std::size_t v : views_) {
        const auto& map = dataset.maps.at(v);
        for (std::size_t p = 0; p < map.high_variance.size(); ++p)
            if (map.high_variance[p] && map.weights.pixels[p] > 0.0) {
                masked_pixels_[v].push_back(static_cast<int>(p));
                masked_weights_[v].push_back(map.weights.pixels[p]);
            }
    }
}

int BatchSampler::weighted_count(int batch_rays) const {
    return static_cast<int>(std::floor(fraction_ * batch_rays));
}

int BatchSampler::draw_weighted_pixel(std::size_t view_index, std::mt19937_64& rng) const {
    const auto& pixels = masked_pixels_.at(view_index);
    if (pixels.empty()) {
        std::uniform_int_distribution<int> any(0, dataset_.width * dataset_.height - 1);
        return any(rng);
    }
    const auto& w = masked_weights_[view_index];
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    return pixels[pick(rng)];
}

std::vector<double> BatchSampler::weighted_pixel_probabilities(std::size_t view_index) const {
    const std::size_t n = static_cast<std::size_t>(dataset_.width) * dataset_.height;
    std::vector<double> probs(n, 0.0);
    const auto& pixels = masked_pixels_.at(view_index);
    if (pixels.empty()) {
        std::fill(probs.begin(), probs.end(), 1.0 / static_cast<double>(n));
        return probs;
    }
    const auto& w = masked_weights_[view_index];
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t k = 0; k < pixels.size(); ++k) probs[static_cast<std::size_t>(pixels[k])] = w[k] / total;
    return probs;
}

std::vector<TrainingRay> BatchSampler::sample(int batch_rays, std::mt19937_64& rng) const {
    if (batch_rays < 1) throw ArgumentError("batch needs at least one ray");
    const int frames = static_cast<int>(views_.size()) * dataset_.phases;
    std::uniform_int_distribution<int> frame_pick(0, frames - 1);
    std::uniform_int_distribution<int> pixel_pick(0, dataset_.width * dataset_.height - 1);
    const int weighted = weighted_count(batch_rays);
    std::vector<TrainingRay> batch;
    batch.reserve(static_cast<std::size_t>(batch_rays));
    for (int k = 0; k < batch_rays; ++k) {
        const int f = frame_pick(rng);
        TrainingRay ray;
        ray.view_index = views_[static_cast<std::size_t>(f / dataset_.phases)];
        ray.phase = f % dataset_.phases + 1;
        ray.weighted = k < weighted;
        const int pixel = ray.weighted ? draw_weighted_pixel(ray.view_index, rng) : pixel_pick(rng);
        ray.u = pixel % dataset_.width;
        ray.v = pixel / dataset_.width;
        ray.target = dataset_.frame(ray.view_index, ray.phase).image.pixels[static_cast<std::size_t>(pixel)];
        ray.vessel_likely = dataset_.maps[ray.view_index].high_variance[static_cast<std::size_t>(pixel)] != 0;
        batch.push_back(ray);
    }
    return batch;
}

// --- objective ---------------------------------------------------------------------------

TrainState initial_state(const TrainConfig& config, int phases) {
    config.validate();
    TrainState s;
    s.model = std::make_unique<FieldModel>(config, phases);
    std::seed_seq seq{config.seed, std::uint64_t{1}};
    s.rng.seed(seq);
    return s;
}

std::vector<RaySampleSet> sample_batch_positions(const AngiogramDataset& dataset,
                                                 const std::vector<TrainingRay>& batch,
                                                 const TrainConfig& config, std::mt19937_64& rng) {
    std::vector<RaySampleSet> out;
    out.reserve(batch.size());
    for (const auto& r : batch) {
        const Ray ray = generate_ray(dataset.views.at(r.view_index).pose, r.u, r.v);
        out.push_back(sample_ray(ray, config.samples_per_ray, config.jitter, rng));
    }
    return out;
}

namespace {

struct ChunkResult {
    std::vector<std::pair<int, ad::Matrix>> grads;  ///< (parameter index, gradient)
    double photometric = 0.0, factorization = 0.0, entropy = 0.0, occlusion = 0.0, total = 0.0;
    int masked = 0;
};

std::string describe_rays(const std::vector<TrainingRay>& batch, const std::vector<std::size_t>& rays,
                          const Eigen::MatrixXd& predicted) {
    std::ostringstream os;
    for (std::size_t k = 0; k < rays.size(); ++k) {
        const auto& r = batch[rays[k]];
        if (std::isfinite(predicted(static_cast<Eigen::Index>(k), 0))) continue;
        os << "\n  ray " << rays[k] << ": view " << r.view_index << " phase " << r.phase << " pixel (" << r.u
           << ", " << r.v << ") target " << r.target << " predicted " << predicted(static_cast<Eigen::Index>(k), 0);
    }
    return os.str();
}

}  // namespace

double evaluate_objective(FieldModel& model, const AngiogramDataset& dataset,
                          const std::vector<TrainingRay>& batch, const std::vector<RaySampleSet>& samples,
                          const TrainConfig& config, double iteration, bool backward, LossBundle* bundle) {
    if (batch.empty()) throw ArgumentError("empty training batch");
    if (samples.size() != batch.size()) throw ArgumentError("sample sets do not match the batch");
    const int S = config.samples_per_ray;
    for (const auto& s : samples)
        if (static_cast<int>(s.size()) != S) throw ArgumentError("sample count differs from config");
    const double B = static_cast<double>(batch.size());
    const Variant variant = model.variant();
    const LossWeights weights = config.schedules().at(iteration);
    const auto params = model.parameters();
    std::map<const ad::Parameter*, int> param_index;
    for (std::size_t k = 0; k < params.size(); ++k) param_index[params[k]] = static_cast<int>(k);

    // Fixed chunking: consecutive rays, or consecutive rays of one phase for per-phase nets.
    std::vector<std::vector<std::size_t>> chunks;
    auto cut = [&](const std::vector<std::size_t>& order) {
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.chunk_rays))
            chunks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                                order.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                    order.size(), b + static_cast<std::size_t>(config.chunk_rays))));
    };
    if (variant == Variant::Sparse) {
        for (int i = 1; i <= model.phases(); ++i) {
            std::vector<std::size_t> group;
            for (std::size_t r = 0; r < batch.size(); ++r)
                if (batch[r].phase == i) group.push_back(r);
            cut(group);
        }
    } else {
        std::vector<std::size_t> all(batch.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        cut(all);
    }

    std::vector<ChunkResult> results(chunks.size());
    parallel_for(chunks.size(), config.threads, [&](std::size_t c) {
        const auto& rays = chunks[c];
        const auto R = static_cast<Eigen::Index>(rays.size());
        Eigen::MatrixXd points(3, R * S);
        Eigen::VectorXd dt(R), target(R);
        Eigen::MatrixXd occlusion_weights(R, S);
        std::vector<int> latent_index(static_cast<std::size_t>(R * S));
        std::vector<bool> likely(static_cast<std::size_t>(R));
        for (Eigen::Index r = 0; r < R; ++r) {
            const auto& tr = batch[rays[static_cast<std::size_t>(r)]];
            const auto& smp = samples[rays[static_cast<std::size_t>(r)]];
            const Ray ray = generate_ray(dataset.views.at(tr.view_index).pose, tr.u, tr.v);
            dt(r) = smp.dt.empty() ? 0.0 : smp.dt[0];
            target(r) = tr.target;
            likely[static_cast<std::size_t>(r)] = tr.vessel_likely;
            for (int s = 0; s < S; ++s) {
                const double t = smp.t[static_cast<std::size_t>(s)];
                points.col(r + R * s) = ray.at(t);
                latent_index[static_cast<std::size_t>(r + R * s)] = tr.phase - 1;
                occlusion_weights(r, s) = (t - smp.t_near) < config.occlusion_distance ? smp.dt[static_cast<std::size_t>(s)] : 0.0;
            }
        }
        Eigen::MatrixXd encoded;
        encode_batch(points, iteration, model.encoding(), encoded);

        ad::Tape tape;
        ad::Var enc = tape.constant(std::move(encoded));
        ad::Var dt_var = tape.constant(dt);
        ChunkResult& out = results[c];
        ad::Var objective;
        ad::Var predicted;
        if (variant == Variant::Sparse) {
            const int phase = batch[rays.front()].phase;
            ad::Var sigma = ad::reshape(model.phase_net(phase).forward(tape, enc), R, S);
            predicted = render_intensity(sigma, dt_var, dataset.i0);
            LossTerms terms{photometric_loss(predicted, target), {}, {}, {}, 0};
            objective = combine_losses(terms, weights, variant);
            out.photometric = terms.photometric.value()(0, 0);
        } else {
            ad::Var sigma_s = ad::reshape(model.static_net().forward(tape, enc), R, S);
            ad::Var codes = ad::gather_cols(tape.parameter(model.latents().parameter()), latent_index);
            ad::Var sigma_d = ad::reshape(model.dynamic_net().forward(tape, ad::concat_rows(enc, codes)), R, S);
            predicted = render_intensity(sigma_s, sigma_d, dt_var, dataset.i0);
            LossTerms terms;
            terms.photometric = photometric_loss(predicted, target);
            terms.factorization = factorization_loss(sigma_s, sigma_d, config.guards);
            terms.entropy = entropy_loss(sigma_d, dt, likely, config.entropy_min_density, config.guards,
                                         terms.masked_rays);
            terms.occlusion = occlusion_loss(sigma_d, occlusion_weights);
            objective = combine_losses(terms, weights, variant);
            out.photometric = terms.photometric.value()(0, 0);
            out.factorization = terms.factorization->value()(0, 0);
            out.entropy = terms.entropy->value()(0, 0);
            out.occlusion = terms.occlusion->value()(0, 0);
            out.masked = terms.masked_rays;
        }
        const double share = static_cast<double>(R) / B;
        ad::Var scaled = ad::scale(objective, share);
        out.total = scaled.value()(0, 0);
        if (!std::isfinite(out.total))
            throw NumericalError("non-finite loss in training batch" + describe_rays(batch, rays, predicted.value()));
        out.photometric *= share;
        out.factorization *= share;
        out.entropy *= share;
        out.occlusion *= share;
        if (!backward) return;
        tape.backward(scaled, false);
        for (const auto& [param, grad] : tape.parameter_gradients())
            out.grads.emplace_back(param_index.at(param), *grad);
    });

    LossBundle lb;
    lb.weights = weights;
    lb.rays = static_cast<int>(batch.size());
    double total = 0.0;
    if (backward)
        for (auto* p : params) p->zero_grad();
    for (const auto& r : results) {
        lb.photometric += r.photometric;
        lb.factorization += r.factorization;
        lb.entropy += r.entropy;
        lb.occlusion += r.occlusion;
        lb.masked_rays += r.masked;
        total += r.total;
        for (const auto& [k, g] : r.grads) params[static_cast<std::size_t>(k)]->grad += g;
    }
    lb.total = total;
    if (bundle) *bundle = lb;
    return total;
}

LossBundle train_step(TrainState& state, const AngiogramDataset& dataset,
                      const std::vector<TrainingRay>& batch, const TrainConfig& config, bool apply_update) {
    const auto samples = sample_batch_positions(dataset, batch, config, state.rng);
    LossBundle bundle;
    evaluate_objective(*state.model, dataset, batch, samples, config, static_cast<double>(state.iteration),
                       apply_update, &bundle);
    if (apply_update) {
        const double lr = config.learning_rate()(static_cast<double>(state.iteration));
        state.optimizer.step(state.model->parameters(), lr);
        ++state.iteration;
    }
    return bundle;
}

// --- checkpoints -------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'N', 'C', 'A', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_matrix(std::ostream& os, const ad::Matrix& m) {
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

ad::Matrix read_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
    const auto r = binio::read<std::uint32_t>(is, "checkpoint");
    const auto c = binio::read<std::uint32_t>(is, "checkpoint");
    if (r != rows || c != cols) throw FormatError("checkpoint shape mismatch for " + what);
    ad::Matrix m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!is) throw FormatError("truncated checkpoint while reading " + what);
    return m;
}

}  // namespace

void save_checkpoint(const TrainState& state, const TrainConfig& config, const fs::path& path) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write checkpoint " + tmp.string());
        os.write(kCheckpointMagic, sizeof kCheckpointMagic);
        binio::write<std::uint32_t>(os, kCheckpointVersion);
        binio::write_string(os, config.to_json().dump());
        binio::write<std::int32_t>(os, state.model->phases());
        binio::write<std::int64_t>(os, state.iteration);
        std::ostringstream rng_text;
        rng_text << state.rng;
        binio::write_string(os, rng_text.str());
        const auto params = state.model->parameters();
        binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
        for (const auto* p : params) {
            binio::write_string(os, p->name);
            binio::write<std::uint8_t>(os, static_cast<std::uint8_t>(p->role));
            write_matrix(os, p->value);
        }
        binio::write<std::int64_t>(os, state.optimizer.steps_taken());
        const auto& m = state.optimizer.first_moments();
        const auto& v = state.optimizer.second_moments();
        binio::write<std::uint8_t>(os, m.empty() ? 0 : 1);
        for (std::size_t k = 0; k < m.size(); ++k) {
            write_matrix(os, m[k]);
            write_matrix(os, v[k]);
        }
        if (!os) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

TrainState load_checkpoint(const fs::path& path, TrainConfig& config) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint missing: " + path.string());
    char magic[8] = {};
    is.read(magic, sizeof magic);
    if (!is || !std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError("not a checkpoint: " + path.string());
    try {
        if (binio::read<std::uint32_t>(is, "checkpoint") != kCheckpointVersion)
            throw FormatError("unsupported checkpoint version in " + path.string());
        config = TrainConfig::from_json(nlohmann::json::parse(binio::read_string(is, "checkpoint")));
        const int phases = binio::read<std::int32_t>(is, "checkpoint");
        TrainState state = initial_state(config, phases);
        state.iteration = binio::read<std::int64_t>(is, "checkpoint");
        std::istringstream rng_text(binio::read_string(is, "checkpoint"));
        rng_text >> state.rng;
        if (!rng_text) throw FormatError("corrupt RNG state in checkpoint");
        auto params = state.model->parameters();
        if (binio::read<std::uint32_t>(is, "checkpoint") != params.size())
            throw FormatError("checkpoint parameter count differs from the model");
        for (auto* p : params) {
            const std::string name = binio::read_string(is, "checkpoint");
            if (name != p->name) throw FormatError("checkpoint parameter " + name + " where " + p->name + " expected");
            if (binio::read<std::uint8_t>(is, "checkpoint") != static_cast<std::uint8_t>(p->role))
                throw FormatError("checkpoint role mismatch for " + name);
            p->value = read_matrix(is, p->value.rows(), p->value.cols(), name);
            p->zero_grad();
        }
        state.optimizer.set_steps_taken(binio::read<std::int64_t>(is, "checkpoint"));
        if (binio::read<std::uint8_t>(is, "checkpoint")) {
            auto& m = state.optimizer.first_moments();
            auto& v = state.optimizer.second_moments();
            for (auto* p : params) {
                m.push_back(read_matrix(is, p->value.rows(), p->value.cols(), p->name + " moment"));
                v.push_back(read_matrix(is, p->value.rows(), p->value.cols(), p->name + " moment"));
            }
        }
        if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in checkpoint");
        return state;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("corrupt checkpoint config: " + std::string(e.what()));
    } catch (const std::ios_base::failure&) {
        throw FormatError("truncated checkpoint " + path.string());
    }
}

// --- training loop -----------------------------------------------------------------------

std::string loss_csv_header() {
    return "n,L_p,L_b,L_e,L_o,L_total,lambda_b,lambda_e,lambda_o,masked_rays,rays,lr";
}

std::string loss_csv_row(long long n, const LossBundle& b, double lr) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%.17g", n,
                  b.photometric, b.factorization, b.entropy, b.occlusion, b.total, b.weights.lambda_b,
                  b.weights.lambda_e, b.weights.lambda_o, b.masked_rays, b.rays, lr);
    return buf;
}

namespace {

void truncate_log(const fs::path& csv, long long keep_before) {
    std::vector<std::string> kept;
    {
        std::ifstream is(csv);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            if (kept.empty()) {
                kept.push_back(line);
                continue;
            }
            if (std::stoll(line.substr(0, line.find(','))) < keep_before) kept.push_back(line);
        }
    }
    if (kept.empty()) kept.push_back(loss_csv_header());
    std::ofstream os(csv, std::ios::trunc);
    for (const auto& l : kept) os << l << '\n';
}

}  // namespace

TrainState run_training(const AngiogramDataset& dataset, const TrainConfig& config, const fs::path& out_dir,
                        const TrainingOptions& options) {
    config.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    const fs::path ckpt = out_dir / "checkpoint.bin";
    const fs::path csv = out_dir / "loss.csv";

    TrainConfig active = config;
    TrainState state;
    if (options.resume && fs::exists(ckpt)) {
        TrainConfig stored;
        state = load_checkpoint(ckpt, stored);
        stored.threads = config.threads;
        if (stored.to_json() != active.to_json())
            throw ConfigError("resume: configuration differs from the checkpoint in " + out_dir.string());
        if (state.model->phases() != dataset.phases) throw ConfigError("resume: dataset phase count differs");
        truncate_log(csv, state.iteration);
    } else {
        state = initial_state(active, dataset.phases);
        std::ofstream os(csv, std::ios::trunc);
        if (!os) throw IoError("cannot write " + csv.string());
        os << loss_csv_header() << '\n';
    }

    BatchSampler sampler(dataset, active.weighted_fraction);
    const auto lr = active.learning_rate();
    const long long total = active.total_iterations();
    const long long stop = options.stop_at ? std::min(total, *options.stop_at) : total;
    std::ofstream log(csv, std::ios::app);
    if (!log) throw IoError("cannot append to " + csv.string());
    while (state.iteration < stop) {
        const long long n = state.iteration;
        const auto batch = sampler.sample(active.batch_rays, state.rng);
        const LossBundle bundle = train_step(state, dataset, batch, active);
        log << loss_csv_row(n, bundle, lr(static_cast<double>(n))) << '\n';
        if (options.on_step) options.on_step(n, bundle);
        if (state.iteration % active.checkpoint_every == 0 && state.iteration < stop) {
            log.flush();
            save_checkpoint(state, active, ckpt);
        }
    }
    log.flush();
    save_checkpoint(state, active, ckpt);
    return state;
}

}  // namespace nerfca
