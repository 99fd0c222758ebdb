#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>

#include "doctest.h"
#include "nerfca/errors.hpp"
#include "nerfca/trainer.hpp"
#include "oracles.hpp"

using namespace nerfca;
namespace fs = std::filesystem;

namespace {

ScannerConfig small_scanner() {
    ScannerConfig sc;
    sc.detector_width = 16;
    sc.detector_height = 16;
    sc.pixel_pitch = 0.144;
    return sc;
}

const AngiogramDataset& tiny_dataset() {
    static const AngiogramDataset ds = [] {
        PhantomConfig pc;
        pc.phases = 3;
        DatasetConfig dc;
        dc.gt_samples = 64;
        return generate_dataset(Phantom(pc), make_view_plan(4, small_scanner(), 0), dc);
    }();
    return ds;
}

// Every frame fully transparent: targets equal I0.
AngiogramDataset blank_dataset() {
    AngiogramDataset ds = tiny_dataset();
    for (auto& f : ds.frames) std::fill(f.image.pixels.begin(), f.image.pixels.end(), ds.i0);
    return ds;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.iterations = 40;
    c.scale = 1.0;
    c.batch_rays = 16;
    c.samples_per_ray = 8;
    c.network = {0, 2, 16};
    c.latent_dim = 4;
    c.encoding_bands = 3;
    c.encoding_horizon = 40;
    c.lr_decay = 40;
    c.horizon = 40;
    c.lambda_b = {1e-12, 1e-10, 10, 0};
    c.lambda_e = {1e-12, 1e-10, 0, 0};
    c.lambda_o = {1e-8, 1e-5, 10, 0};
    c.chunk_rays = 5;
    c.checkpoint_every = 7;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("nerfca_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("weighted share of a batch") {
    const auto& ds = tiny_dataset();
    std::mt19937_64 rng(5);
    const BatchSampler none(ds, 0.0);
    CHECK(none.weighted_count(1024) == 0);
    for (const auto& r : none.sample(300, rng)) CHECK_FALSE(r.weighted);

    const BatchSampler half(ds, 0.5);
    CHECK(half.weighted_count(1024) == 512);
    CHECK(half.weighted_count(7) == 3);
    const auto batch = half.sample(1024, rng);
    CHECK(std::count_if(batch.begin(), batch.end(), [](const TrainingRay& r) { return r.weighted; }) == 512);
    const auto training = ds.training_view_indices();
    for (const auto& r : batch) {
        CHECK(std::find(training.begin(), training.end(), r.view_index) != training.end());
        CHECK(r.target == ds.frame(r.view_index, r.phase).image.at(r.u, r.v));
        if (r.weighted) CHECK(ds.maps[r.view_index].high_variance[static_cast<std::size_t>(r.v * ds.width + r.u)] == 1);
    }
}

TEST_CASE("weighted pixel draws follow the probability map") {
    const auto& ds = tiny_dataset();
    const BatchSampler sampler(ds, 0.5);
    const std::size_t view = ds.training_view_indices()[1];
    const auto prob = sampler.weighted_pixel_probabilities(view);
    // Independent oracle: the map weights renormalized over the high-variance set.
    const auto& map = ds.maps[view];
    double mass = 0.0;
    for (std::size_t p = 0; p < prob.size(); ++p) mass += map.high_variance[p] ? map.weights.pixels[p] : 0.0;
    for (std::size_t p = 0; p < prob.size(); ++p)
        CHECK(prob[p] == doctest::Approx(map.high_variance[p] ? map.weights.pixels[p] / mass : 0.0).epsilon(1e-12));

    const int draws = 1000000;
    std::vector<int> counts(prob.size(), 0);
    std::mt19937_64 rng(11);
    for (int k = 0; k < draws; ++k) ++counts[static_cast<std::size_t>(sampler.draw_weighted_pixel(view, rng))];
    for (std::size_t p = 0; p < prob.size(); ++p) {
        const double expected = draws * prob[p];
        CHECK(std::abs(counts[p] - expected) <= 3.0 * std::sqrt(expected * (1.0 - prob[p])) + 1e-9);
    }
}

TEST_CASE("schedule weights at the first iteration") {
    TrainConfig c;
    const LossWeights w = c.schedules().at(0);
    CHECK(w.lambda_b == 1e-12);
    CHECK(w.lambda_e == 1e-12);
    CHECK(w.lambda_o == 1e-8);
    const LossWeights end = c.schedules().at(c.horizon * c.scale);
    CHECK(end.lambda_b == 1e-10);
    CHECK(end.lambda_e == 1e-10);
    CHECK(end.lambda_o == 1e-5);
    CHECK(c.total_iterations() == 10000);
}

TEST_CASE("objective assembly matches a direct evaluation") {
    const auto& ds = tiny_dataset();
    TrainConfig cfg = tiny_config();
    TrainState state = initial_state(cfg, ds.phases);
    std::mt19937_64 rng(2);
    const auto batch = BatchSampler(ds, 0.5).sample(11, rng);
    const auto samples = sample_batch_positions(ds, batch, cfg, rng);
    LossBundle bundle;
    evaluate_objective(*state.model, ds, batch, samples, cfg, 3.0, false, &bundle);

    double lp = 0.0, lo = 0.0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const Ray ray = generate_ray(ds.views[batch[r].view_index].pose, batch[r].u, batch[r].v);
        Eigen::MatrixXd pts(3, cfg.samples_per_ray);
        for (int s = 0; s < cfg.samples_per_ray; ++s) pts.col(s) = ray.at(samples[r].t[static_cast<std::size_t>(s)]);
        const auto ss = state.model->static_density(pts, batch[r].phase, 3.0);
        const auto sd = state.model->dynamic_density(pts, batch[r].phase, 3.0);
        const double pred = ds.i0 * std::exp(-(ss.sum() + sd.sum()) * samples[r].dt[0]);
        lp += (pred - batch[r].target) * (pred - batch[r].target);
        for (int s = 0; s < cfg.samples_per_ray; ++s)
            if (samples[r].t[static_cast<std::size_t>(s)] - samples[r].t_near < cfg.occlusion_distance)
                lo += sd(s) * samples[r].dt[0];
    }
    CHECK(bundle.photometric == doctest::Approx(lp / batch.size()).epsilon(1e-12));
    CHECK(bundle.occlusion == doctest::Approx(lo / batch.size()).epsilon(1e-12));
    CHECK(bundle.rays == 11);
}

TEST_CASE("end-to-end gradients match finite differences") {
    const auto& ds = tiny_dataset();
    for (const Variant variant : {Variant::Full, Variant::Sparse}) {
        CAPTURE(to_string(variant));
        TrainConfig cfg = tiny_config();
        cfg.variant = variant;
        cfg.samples_per_ray = 8;
        // Large weights so every regularizer shows up in the gradient.
        cfg.lambda_b = {0.3, 0.3, 0, 0};
        cfg.lambda_e = {0.2, 0.2, 0, 0};
        cfg.lambda_o = {0.5, 0.5, 0, 0};
        TrainState state = initial_state(cfg, ds.phases);
        std::mt19937_64 rng(9);
        auto batch = BatchSampler(ds, 0.5).sample(2, rng);
        for (auto& r : batch) r.vessel_likely = true;
        const auto samples = sample_batch_positions(ds, batch, cfg, rng);
        evaluate_objective(*state.model, ds, batch, samples, cfg, 5.0, true);
        for (auto* p : state.model->parameters()) {
            CAPTURE(p->name);
            const Eigen::MatrixXd analytic = p->grad;
            const Eigen::MatrixXd keep = p->value;
            const auto numeric = central_difference(
                [&](const Eigen::MatrixXd& v) {
                    p->value = v;
                    const double out = evaluate_objective(*state.model, ds, batch, samples, cfg, 5.0, false);
                    p->value = keep;
                    return out;
                },
                keep, 1e-6);
            CHECK(max_relative_error(analytic, numeric, 1e-4) < 1e-4);
        }
    }
}

TEST_CASE("photometric loss falls on a transparent scene") {
    const AngiogramDataset ds = blank_dataset();
    TrainConfig cfg = tiny_config();
    cfg.iterations = 150;
    cfg.lr_start = cfg.lr_end = 1e-2;
    TrainState state = initial_state(cfg, ds.phases);
    const BatchSampler sampler(ds, cfg.weighted_fraction);
    double first = 0.0, last = 0.0;
    for (int n = 0; n < 150; ++n) {
        const auto batch = sampler.sample(cfg.batch_rays, state.rng);
        const LossBundle b = train_step(state, ds, batch, cfg);
        if (n < 10) first += b.photometric;
        if (n >= 140) last += b.photometric;
    }
    CHECK(last < 0.5 * first);
}

TEST_CASE("zero-initialized networks fit a transparent scene monotonically") {
    const AngiogramDataset ds = blank_dataset();
    TrainConfig cfg = tiny_config();
    cfg.iterations = 100;
    TrainState state = initial_state(cfg, ds.phases);
    for (auto* p : state.model->parameters()) p->value.setZero();
    std::mt19937_64 rng(6);
    const auto batch = BatchSampler(ds, cfg.weighted_fraction).sample(cfg.batch_rays, rng);
    double previous = std::numeric_limits<double>::infinity();
    for (int n = 0; n < 100; ++n) {
        const LossBundle b = train_step(state, ds, batch, cfg);
        CHECK(b.photometric < previous);
        previous = b.photometric;
    }
}

TEST_CASE("training is deterministic and resumes exactly") {
    const auto& ds = tiny_dataset();
    TrainConfig cfg = tiny_config();
    cfg.iterations = 12;
    const fs::path a = fresh_dir("train_a"), b = fresh_dir("train_b"), c = fresh_dir("train_c");
    run_training(ds, cfg, a);
    TrainConfig threaded = cfg;
    threaded.threads = 3;
    run_training(ds, threaded, b);

    TrainingOptions stop;
    stop.stop_at = 5;
    run_training(ds, cfg, c, stop);
    TrainConfig read_back;
    CHECK(load_checkpoint(c / "checkpoint.bin", read_back).iteration == 5);
    TrainingOptions resume;
    resume.resume = true;
    run_training(ds, cfg, c, resume);

    CHECK(slurp(a / "loss.csv") == slurp(c / "loss.csv"));
    CHECK(slurp(a / "checkpoint.bin") == slurp(c / "checkpoint.bin"));
    CHECK(slurp(a / "loss.csv") == slurp(b / "loss.csv"));

    TrainConfig other = cfg;
    other.seed = 99;
    CHECK_THROWS_AS(run_training(ds, other, c, resume), ConfigError);
    for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST_CASE("checkpoints round trip") {
    const auto& ds = tiny_dataset();
    TrainConfig cfg = tiny_config();
    TrainState state = initial_state(cfg, ds.phases);
    const BatchSampler sampler(ds, 0.5);
    for (int n = 0; n < 3; ++n) {
        train_step(state, ds, sampler.sample(cfg.batch_rays, state.rng), cfg);
    }
    const fs::path dir = fresh_dir("ckpt");
    fs::create_directories(dir);
    save_checkpoint(state, cfg, dir / "one.bin");
    TrainConfig loaded_cfg;
    TrainState loaded = load_checkpoint(dir / "one.bin", loaded_cfg);
    CHECK(loaded.iteration == 3);
    CHECK(loaded_cfg.to_json() == cfg.to_json());
    CHECK(loaded.rng == state.rng);
    const auto pa = state.model->parameters();
    const auto pb = loaded.model->parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k) {
        CHECK(pa[k]->name == pb[k]->name);
        CHECK(pa[k]->value == pb[k]->value);
    }
    save_checkpoint(loaded, loaded_cfg, dir / "two.bin");
    CHECK(slurp(dir / "one.bin") == slurp(dir / "two.bin"));

    {
        std::ofstream tail(dir / "two.bin", std::ios::binary | std::ios::app);
        tail << 'x';
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "two.bin", loaded_cfg), FormatError);
    {
        std::ofstream junk(dir / "three.bin", std::ios::binary);
        junk << "NOTACKPT";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "three.bin", loaded_cfg), FormatError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin", loaded_cfg), IoError);
    fs::remove_all(dir);
}

TEST_CASE("trainer config validation") {
    TrainConfig c;
    c.weighted_fraction = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"variant", "dense"}}), ConfigError);
    const TrainConfig round = TrainConfig::from_json(tiny_config().to_json());
    CHECK(round.to_json() == tiny_config().to_json());
}
