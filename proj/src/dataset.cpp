#include "nerfca/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nerfca/errors.hpp"
#include "nerfca/parallel.hpp"
#include "nerfca/renderer.hpp"

namespace nerfca {

namespace fs = std::filesystem;

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
    DatasetConfig c;
    c.training_views = j.value("views", c.training_views);
    c.gt_samples = j.value("gt_samples", c.gt_samples);
    c.i0 = j.value("I0", c.i0);
    c.mask_quantile = j.value("mask_quantile", c.mask_quantile);
    c.variance_floor = j.value("variance_floor", c.variance_floor);
    c.vessel_depth_threshold = j.value("vessel_depth_threshold", c.vessel_depth_threshold);
    c.seed = j.value("seed", c.seed);
    if (c.training_views < 1) throw ConfigError("dataset.views must be >= 1");
    if (c.gt_samples < 2) throw ConfigError("dataset.gt_samples must be >= 2");
    if (!(c.i0 > 0.0)) throw ConfigError("dataset.I0 must be positive");
    if (c.mask_quantile < 0.0 || c.mask_quantile > 1.0)
        throw ConfigError("dataset.mask_quantile must lie in [0, 1]");
    if (c.variance_floor < 0.0) throw ConfigError("dataset.variance_floor must be >= 0");
    return c;
}

nlohmann::json DatasetConfig::to_json() const {
    return {{"views", training_views},
            {"gt_samples", gt_samples},
            {"I0", i0},
            {"mask_quantile", mask_quantile},
            {"variance_floor", variance_floor},
            {"vessel_depth_threshold", vessel_depth_threshold},
            {"seed", seed}};
}

const AngiogramFrame& AngiogramDataset::frame(std::size_t view_index, int phase) const {
    if (phase < 1 || phase > phases) throw ArgumentError("phase out of range");
    return frames.at(view_index * static_cast<std::size_t>(phases) + static_cast<std::size_t>(phase - 1));
}

const std::vector<std::uint8_t>& AngiogramDataset::vessel_mask(std::size_t view_index, int phase) const {
    if (phase < 1 || phase > phases) throw ArgumentError("phase out of range");
    return vessel_masks.at(view_index * static_cast<std::size_t>(phases) +
                           static_cast<std::size_t>(phase - 1));
}

std::vector<std::size_t> AngiogramDataset::training_view_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < views.size(); ++v)
        if (views[v].training) out.push_back(v);
    return out;
}

std::vector<std::size_t> AngiogramDataset::validation_view_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < views.size(); ++v)
        if (!views[v].training) out.push_back(v);
    return out;
}

AngiogramFrame render_ground_truth(const CameraPose& pose, const DensityField& field, int phase,
                                   int samples_per_ray, double i0, int threads) {
    if (samples_per_ray < 2) throw ArgumentError("ground truth needs at least two samples per ray");
    AngiogramFrame f;
    f.phase = phase;
    f.pose = pose;
    f.image = Raster{pose.detector_width, pose.detector_height,
                     std::vector<double>(static_cast<std::size_t>(pose.detector_width) * pose.detector_height)};
    parallel_for(static_cast<std::size_t>(pose.detector_height), threads, [&](std::size_t v) {
        for (int u = 0; u < pose.detector_width; ++u) {
            const Ray ray = generate_ray(pose, u, static_cast<int>(v));
            const double depth = project_optical_depth(field, ray, phase, samples_per_ray);
            const double intensity = i0 * std::exp(-std::min(depth, kMaxOpticalDepth));
            f.image.at(u, static_cast<int>(v)) = static_cast<double>(static_cast<float>(intensity));
        }
    });
    return f;
}

Raster pixel_variance(std::span<const AngiogramFrame> frames) {
    if (frames.size() < 2) throw ArgumentError("variance needs at least two frames");
    const int w = frames[0].image.width, h = frames[0].image.height;
    for (const auto& f : frames)
        if (f.image.width != w || f.image.height != h)
            throw ArgumentError("variance_map: frame dimensions differ");
    Raster var{w, h, std::vector<double>(static_cast<std::size_t>(w) * h, 0.0)};
    const double n = static_cast<double>(frames.size());
    for (std::size_t p = 0; p < var.pixels.size(); ++p) {
        double mean = 0.0;
        for (const auto& f : frames) mean += f.image.pixels[p];
        mean /= n;
        double acc = 0.0;
        for (const auto& f : frames) {
            const double d = f.image.pixels[p] - mean;
            acc += d * d;
        }
        var.pixels[p] = acc / n;
    }
    return var;
}

ProbabilityMap variance_map(std::span<const AngiogramFrame> frames, double mask_quantile,
                            double floor_fraction) {
    const Raster var = pixel_variance(frames);
    ProbabilityMap map;
    map.view = frames[0].view;
    map.weights = Raster{var.width, var.height, std::vector<double>(var.pixels.size())};
    map.high_variance.assign(var.pixels.size(), 0);

    const double vmax = *std::max_element(var.pixels.begin(), var.pixels.end());
    const double floor = floor_fraction * vmax;
    double total = 0.0;
    for (double v : var.pixels) total += v + floor;
    if (total > 0.0) {
        for (std::size_t p = 0; p < var.pixels.size(); ++p)
            map.weights.pixels[p] = (var.pixels[p] + floor) / total;
    } else {
        std::fill(map.weights.pixels.begin(), map.weights.pixels.end(),
                  1.0 / static_cast<double>(var.pixels.size()));
    }

    std::vector<double> sorted = var.pixels;
    std::sort(sorted.begin(), sorted.end());
    const auto rank = static_cast<std::size_t>(
        std::floor(std::clamp(mask_quantile, 0.0, 1.0) * static_cast<double>(sorted.size() - 1)));
    const double threshold = sorted[rank];
    for (std::size_t p = 0; p < var.pixels.size(); ++p)
        map.high_variance[p] = var.pixels[p] > threshold && map.weights.pixels[p] > 0.0 ? 1 : 0;
    return map;
}

AngiogramDataset generate_dataset(const Phantom& phantom, const ViewPlan& plan,
                                  const DatasetConfig& config, int threads) {
    AngiogramDataset ds;
    ds.phases = phantom.period();
    ds.i0 = config.i0;
    ds.vessel_attenuation = phantom.vessel_attenuation();
    int id = 0;
    for (const auto& p : plan.training_poses) ds.views.push_back({id++, true, p});
    for (const auto& p : plan.validation_poses) ds.views.push_back({id++, false, p});
    if (ds.views.empty()) throw ArgumentError("view plan is empty");
    ds.width = ds.views[0].pose.detector_width;
    ds.height = ds.views[0].pose.detector_height;

    const std::size_t nframes = ds.views.size() * static_cast<std::size_t>(ds.phases);
    ds.frames.resize(nframes);
    ds.vessel_masks.resize(nframes);
    parallel_for(nframes, threads, [&](std::size_t idx) {
        const std::size_t v = idx / static_cast<std::size_t>(ds.phases);
        const int phase = static_cast<int>(idx % static_cast<std::size_t>(ds.phases)) + 1;
        const auto& pose = ds.views[v].pose;
        AngiogramFrame f = render_ground_truth(pose, phantom, phase, config.gt_samples, config.i0);
        f.view = ds.views[v].id;
        std::vector<std::uint8_t> mask(f.image.pixels.size(), 0);
        for (int y = 0; y < pose.detector_height; ++y)
            for (int x = 0; x < pose.detector_width; ++x) {
                const double depth = project_optical_depth(phantom.vessels(), generate_ray(pose, x, y),
                                                           phase, config.gt_samples);
                mask[static_cast<std::size_t>(y) * pose.detector_width + x] =
                    depth > config.vessel_depth_threshold ? 1 : 0;
            }
        ds.frames[idx] = std::move(f);
        ds.vessel_masks[idx] = std::move(mask);
    });

    for (std::size_t v = 0; v < ds.views.size(); ++v) {
        std::span<const AngiogramFrame> seq(ds.frames.data() + v * static_cast<std::size_t>(ds.phases),
                                            static_cast<std::size_t>(ds.phases));
        if (ds.phases >= 2) {
            ds.maps.push_back(variance_map(seq, config.mask_quantile, config.variance_floor));
        } else {
            ProbabilityMap m;
            m.weights = Raster{ds.width, ds.height,
                               std::vector<double>(static_cast<std::size_t>(ds.width) * ds.height,
                                                   1.0 / (ds.width * ds.height))};
            m.high_variance.assign(m.weights.pixels.size(), 0);
            ds.maps.push_back(std::move(m));
        }
        ds.maps.back().view = ds.views[v].id;
    }
    return ds;
}

// --- persistence -----------------------------------------------------------------------

namespace {

std::string frame_name(int view, int phase) {
    return "frames/view" + std::to_string(view) + "_phase" + std::to_string(phase) + ".pfm";
}

std::string mask_name(int view, int phase) {
    return "vessels/view" + std::to_string(view) + "_phase" + std::to_string(phase) + ".pgm";
}

std::vector<std::uint8_t> to_graymap(const std::vector<std::uint8_t>& mask) {
    std::vector<std::uint8_t> out(mask.size());
    std::transform(mask.begin(), mask.end(), out.begin(), [](std::uint8_t m) { return m ? 255 : 0; });
    return out;
}

std::vector<std::uint8_t> load_mask(const fs::path& path, int width, int height) {
    int w = 0, h = 0;
    auto px = read_pgm(path, w, h);
    if (w != width || h != height) throw FormatError("mask size mismatch in " + path.string());
    for (auto& p : px) {
        if (p != 0 && p != 255) throw FormatError("non-binary mask " + path.string());
        p = p ? 1 : 0;
    }
    return px;
}

}  // namespace

void save_dataset(const AngiogramDataset& ds, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "frames", ec);
    fs::create_directories(dir / "maps", ec);
    fs::create_directories(dir / "vessels", ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

    nlohmann::json manifest;
    manifest["format"] = "nerfca-dataset";
    manifest["version"] = 1;
    manifest["T"] = ds.phases;
    manifest["I0"] = ds.i0;
    manifest["width"] = ds.width;
    manifest["height"] = ds.height;
    manifest["vessel_attenuation"] = ds.vessel_attenuation;
    manifest["generation"] = ds.generation;
    auto views = nlohmann::json::array();
    for (std::size_t v = 0; v < ds.views.size(); ++v) {
        const auto& rec = ds.views[v];
        const std::string wname = "maps/view" + std::to_string(rec.id) + "_weights.pdm";
        const std::string mname = "maps/view" + std::to_string(rec.id) + "_mask.pgm";
        write_pdm(dir / wname, ds.maps.at(v).weights);
        write_pgm(dir / mname, ds.width, ds.height, to_graymap(ds.maps.at(v).high_variance));
        auto frames = nlohmann::json::array();
        for (int i = 1; i <= ds.phases; ++i) {
            write_pfm(dir / frame_name(rec.id, i), ds.frame(v, i).image);
            write_pgm(dir / mask_name(rec.id, i), ds.width, ds.height, to_graymap(ds.vessel_mask(v, i)));
            frames.push_back({{"phase", i}, {"image", frame_name(rec.id, i)}, {"vessel_mask", mask_name(rec.id, i)}});
        }
        views.push_back({{"id", rec.id},
                         {"training", rec.training},
                         {"pose", pose_to_json(rec.pose)},
                         {"weights", wname},
                         {"high_variance_mask", mname},
                         {"frames", frames}});
    }
    manifest["views"] = views;
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
}

AngiogramDataset load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    std::ifstream is(dir / "manifest.json");
    if (!is) throw FormatError("dataset manifest missing: " + (dir / "manifest.json").string());
    nlohmann::json m;
    try {
        is >> m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("corrupt dataset manifest: " + std::string(e.what()));
    }
    AngiogramDataset ds;
    try {
        if (m.at("format") != "nerfca-dataset" || m.at("version") != 1)
            throw FormatError("unsupported dataset format in " + dir.string());
        ds.phases = m.at("T").get<int>();
        ds.i0 = m.at("I0").get<double>();
        ds.width = m.at("width").get<int>();
        ds.height = m.at("height").get<int>();
        ds.vessel_attenuation = m.at("vessel_attenuation").get<double>();
        ds.generation = m.at("generation");
        for (const auto& jv : m.at("views")) {
            ViewRecord rec{jv.at("id").get<int>(), jv.at("training").get<bool>(),
                           pose_from_json(jv.at("pose"))};
            if (rec.pose.detector_width != ds.width || rec.pose.detector_height != ds.height)
                throw FormatError("view " + std::to_string(rec.id) + " detector size differs from dataset");
            ds.views.push_back(rec);
            ProbabilityMap map;
            map.view = rec.id;
            map.weights = read_pdm(dir / jv.at("weights").get<std::string>());
            map.high_variance = load_mask(dir / jv.at("high_variance_mask").get<std::string>(), ds.width, ds.height);
            ds.maps.push_back(std::move(map));
            const auto& frames = jv.at("frames");
            if (static_cast<int>(frames.size()) != ds.phases)
                throw FormatError("view " + std::to_string(rec.id) + " lists " + std::to_string(frames.size()) +
                                  " frames, expected " + std::to_string(ds.phases));
            for (const auto& jf : frames) {
                AngiogramFrame f;
                f.view = rec.id;
                f.phase = jf.at("phase").get<int>();
                f.pose = rec.pose;
                const std::string name = jf.at("image").get<std::string>();
                if (!fs::exists(dir / name)) throw FormatError("missing frame file " + name);
                f.image = read_pfm(dir / name);
                if (f.image.width != ds.width || f.image.height != ds.height)
                    throw FormatError("frame " + name + " has the wrong size");
                ds.frames.push_back(std::move(f));
                ds.vessel_masks.push_back(load_mask(dir / jf.at("vessel_mask").get<std::string>(), ds.width, ds.height));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed dataset manifest: " + std::string(e.what()));
    }
    return ds;
}

}  // namespace nerfca
