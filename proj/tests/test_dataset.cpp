#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "doctest.h"
#include "nerfca/dataset.hpp"
#include "nerfca/errors.hpp"

using namespace nerfca;
namespace fs = std::filesystem;

namespace {

const AngiogramDataset& shared_dataset() {
    static const AngiogramDataset ds = [] {
        DatasetConfig cfg;
        cfg.gt_samples = 400;
        const Phantom phantom(PhantomConfig{});
        return generate_dataset(phantom, make_view_plan(4, ScannerConfig{}, 0), cfg);
    }();
    return ds;
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

TEST_CASE("empty field renders the unattenuated intensity") {
    ScannerConfig sc;
    sc.detector_width = 8;
    sc.detector_height = 6;
    const BackgroundModel nothing;
    const auto frame = render_ground_truth(pose_from_euler(20, -10, sc), nothing, 1, 50, 0.8);
    CHECK(frame.image.width == 8);
    CHECK(frame.image.height == 6);
    for (double v : frame.image.pixels) CHECK(v == static_cast<double>(0.8f));
}

TEST_CASE("sphere frames follow Beer-Lambert within half a percent") {
    ScannerConfig sc;
    sc.detector_width = 16;
    sc.detector_height = 16;
    sc.pixel_pitch = 0.144;
    const Sphere sphere{Vec3(0.05, -0.1, 0.0), 0.55, 1.7};
    const BackgroundModel field(std::vector<Primitive>{sphere});
    const CameraPose pose = pose_from_euler(35, 15, sc);
    const auto frame = render_ground_truth(pose, field, 1, 2000);
    for (int v = 0; v < 16; ++v)
        for (int u = 0; u < 16; ++u) {
            const double expected = std::exp(-analytic_line_integral(generate_ray(pose, u, v), sphere));
            CHECK(std::abs(frame.image.at(u, v) / expected - 1.0) < 0.005);
        }
}

TEST_CASE("population variance of two frames") {
    AngiogramFrame a, b;
    a.image = Raster{2, 1, {0.2, 0.9}};
    b.image = Raster{2, 1, {0.6, 0.9}};
    const std::vector<AngiogramFrame> frames{a, b};
    const Raster var = pixel_variance(frames);
    CHECK(var.pixels[0] == doctest::Approx((0.2 - 0.6) * (0.2 - 0.6) / 4).epsilon(1e-12));
    CHECK(var.pixels[1] == 0.0);

    const ProbabilityMap map = variance_map(frames, 0.5, 1e-3);
    const double vmax = var.pixels[0];
    CHECK(map.weights.pixels[1] == doctest::Approx(1e-3 * vmax / (vmax + 2e-3 * vmax)).epsilon(1e-12));
    CHECK(map.high_variance[0] == 1);
    CHECK(map.high_variance[1] == 0);
}

TEST_CASE("constant frames give uniform weights") {
    AngiogramFrame a;
    a.image = Raster{3, 2, std::vector<double>(6, 0.5)};
    const std::vector<AngiogramFrame> frames{a, a, a};
    const ProbabilityMap map = variance_map(frames, 0.9, 1e-6);
    for (double w : map.weights.pixels) CHECK(w == doctest::Approx(1.0 / 6));
}

TEST_CASE("generated dataset layout") {
    const auto& ds = shared_dataset();
    CHECK(ds.phases == 10);
    CHECK(ds.training_view_indices().size() == 4);
    CHECK(ds.validation_view_indices().size() == 4);
    CHECK(ds.frames.size() == 80);
    std::size_t training_frames = 0;
    for (std::size_t v : ds.training_view_indices())
        for (int i = 1; i <= ds.phases; ++i) {
            const auto& f = ds.frame(v, i);
            CHECK(f.phase == i);
            CHECK(f.view == ds.views[v].id);
            ++training_frames;
        }
    CHECK(training_frames == 40);
    for (const auto& f : ds.frames)
        for (double x : f.image.pixels) {
            CHECK(x > 0.0);
            CHECK(x <= ds.i0);
            CHECK(static_cast<double>(static_cast<float>(x)) == x);
        }
    for (const auto& m : ds.maps) {
        const double sum = std::accumulate(m.weights.pixels.begin(), m.weights.pixels.end(), 0.0);
        CHECK(std::abs(sum - 1.0) <= 1e-9);
        CHECK(*std::min_element(m.weights.pixels.begin(), m.weights.pixels.end()) > 0.0);
    }
}

TEST_CASE("only vessel pixels change between phases") {
    const auto& ds = shared_dataset();
    for (std::size_t v = 0; v < ds.views.size(); ++v) {
        const std::size_t n = ds.frame(v, 1).image.pixels.size();
        std::vector<std::uint8_t> any(n, 0);
        for (int i = 1; i <= ds.phases; ++i)
            for (std::size_t p = 0; p < n; ++p) any[p] |= ds.vessel_mask(v, i)[p];
        for (std::size_t p = 0; p < n; ++p) {
            if (any[p]) continue;
            for (int i = 2; i <= ds.phases; ++i)
                CHECK(std::abs(ds.frame(v, i).image.pixels[p] - ds.frame(v, 1).image.pixels[p]) < 1e-6);
        }
    }
}

TEST_CASE("high-variance set covers the vessels") {
    const auto& ds = shared_dataset();
    for (std::size_t v : ds.training_view_indices()) {
        const auto& mask = ds.maps[v].high_variance;
        std::size_t vessel = 0, covered = 0;
        for (int i = 1; i <= ds.phases; ++i)
            for (std::size_t p = 0; p < mask.size(); ++p)
                if (ds.vessel_mask(v, i)[p]) {
                    ++vessel;
                    covered += mask[p];
                }
        REQUIRE(vessel > 0);
        CHECK(static_cast<double>(covered) / static_cast<double>(vessel) >= 0.95);
    }
}

TEST_CASE("dataset files round trip byte for byte") {
    const auto& ds = shared_dataset();
    const fs::path a = fresh_dir("ds_a"), b = fresh_dir("ds_b");
    save_dataset(ds, a);
    const AngiogramDataset loaded = load_dataset(a);
    CHECK(loaded.frames.size() == ds.frames.size());
    for (std::size_t k = 0; k < ds.frames.size(); ++k) {
        CHECK(loaded.frames[k].image.pixels == ds.frames[k].image.pixels);
        CHECK(loaded.frames[k].pose == ds.frames[k].pose);
        CHECK(loaded.vessel_masks[k] == ds.vessel_masks[k]);
    }
    for (std::size_t v = 0; v < ds.maps.size(); ++v) {
        CHECK(loaded.maps[v].weights.pixels == ds.maps[v].weights.pixels);
        CHECK(loaded.maps[v].high_variance == ds.maps[v].high_variance);
    }
    save_dataset(loaded, b);
    std::size_t files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), a);
        CAPTURE(rel.string());
        REQUIRE(fs::exists(b / rel));
        CHECK(slurp(entry.path()) == slurp(b / rel));
        ++files;
    }
    CHECK(files > 80);

    fs::remove(a / "frames" / "view2_phase7.pfm");
    try {
        load_dataset(a);
        FAIL("expected a format error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("view2_phase7.pfm") != std::string::npos);
    }
    fs::remove_all(a);
    fs::remove_all(b);
    CHECK_THROWS_AS(load_dataset(a), IoError);
}
