#include "nerfca/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nerfca/errors.hpp"
#include "nerfca/parallel.hpp"
#include "nerfca/renderer.hpp"

namespace nerfca {

namespace fs = std::filesystem;

namespace {

Raster blank(const CameraPose& pose, double value = 0.0) {
    return Raster{pose.detector_width, pose.detector_height,
                  std::vector<double>(static_cast<std::size_t>(pose.detector_width) * pose.detector_height, value)};
}

// Midpoint sample positions for the rays [first, first + count) of a pose, column p = r + R * s.
Eigen::MatrixXd chunk_points(const CameraPose& pose, int first, int count, int samples, Eigen::VectorXd& dt) {
    Eigen::MatrixXd points(3, static_cast<Eigen::Index>(count) * samples);
    dt.resize(count);
    for (int r = 0; r < count; ++r) {
        const int pixel = first + r;
        const Ray ray = generate_ray(pose, pixel % pose.detector_width, pixel / pose.detector_width);
        const double h = std::max(0.0, ray.t_far - ray.t_near) / samples;
        dt(r) = h;
        for (int s = 0; s < samples; ++s)
            points.col(r + static_cast<Eigen::Index>(count) * s) = ray.at(ray.t_near + (s + 0.5) * h);
    }
    return points;
}

}  // namespace

Raster mip_project(const DensityBatchFn& density, const CameraPose& pose, int samples, int threads) {
    if (samples < 1) throw ArgumentError("MIP needs at least one sample per ray");
    Raster out = blank(pose);
    const int pixels = pose.detector_width * pose.detector_height;
    const int chunk = 256;
    const int chunks = (pixels + chunk - 1) / chunk;
    parallel_for(static_cast<std::size_t>(chunks), threads, [&](std::size_t c) {
        const int first = static_cast<int>(c) * chunk;
        const int count = std::min(chunk, pixels - first);
        Eigen::VectorXd dt;
        const Eigen::MatrixXd points = chunk_points(pose, first, count, samples, dt);
        const Eigen::RowVectorXd sigma = density(points);
        for (int r = 0; r < count; ++r) {
            double m = 0.0;
            if (dt(r) > 0.0)
                for (int s = 0; s < samples; ++s) m = std::max(m, sigma(r + count * s));
            out.pixels[static_cast<std::size_t>(first + r)] = m;
        }
    });
    return out;
}

Raster mip_project(const DensityField& field, const CameraPose& pose, int phase, int samples, int threads) {
    return mip_project(
        [&](const Eigen::MatrixXd& pts) {
            Eigen::RowVectorXd out(pts.cols());
            for (Eigen::Index k = 0; k < pts.cols(); ++k) out(k) = field.density(pts.col(k), phase);
            return out;
        },
        pose, samples, threads);
}

std::vector<std::uint8_t> threshold_mask(const Raster& image, double threshold) {
    std::vector<std::uint8_t> mask(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), mask.begin(),
                   [&](double v) { return v >= threshold ? 1 : 0; });
    return mask;
}

double dice(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& truth) {
    if (predicted.size() != truth.size()) throw ArgumentError("dice: mask sizes differ");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t k = 0; k < predicted.size(); ++k) {
        const bool p = predicted[k] != 0, t = truth[k] != 0;
        a += p;
        b += t;
        both += p && t;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double psnr(const Raster& predicted, const Raster& truth, double peak) {
    if (predicted.width != truth.width || predicted.height != truth.height)
        throw ArgumentError("psnr: image sizes differ");
    double mse = 0.0;
    for (std::size_t k = 0; k < truth.pixels.size(); ++k) {
        const double d = predicted.pixels[k] - truth.pixels[k];
        mse += d * d;
    }
    mse /= static_cast<double>(truth.pixels.size());
    if (mse < 1e-12) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Raster& a, const Raster& b, double peak) {
    if (a.width != b.width || a.height != b.height) throw ArgumentError("ssim: image sizes differ");
    constexpr int kWindow = 11;
    constexpr double kSigma = 1.5;
    if (a.width < kWindow || a.height < kWindow) throw ArgumentError("ssim: image smaller than the window");
    double kernel[kWindow][kWindow];
    double ksum = 0.0;
    for (int y = 0; y < kWindow; ++y)
        for (int x = 0; x < kWindow; ++x) {
            const double dx = x - kWindow / 2, dy = y - kWindow / 2;
            kernel[y][x] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
            ksum += kernel[y][x];
        }
    for (auto& row : kernel)
        for (double& k : row) k /= ksum;
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    double total = 0.0;
    int windows = 0;
    for (int y0 = 0; y0 + kWindow <= a.height; ++y0)
        for (int x0 = 0; x0 + kWindow <= a.width; ++x0) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int y = 0; y < kWindow; ++y)
                for (int x = 0; x < kWindow; ++x) {
                    const double w = kernel[y][x];
                    const double va = a.at(x0 + x, y0 + y), vb = b.at(x0 + x, y0 + y);
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            ++windows;
        }
    return std::clamp(total / windows, 0.0, 1.0);
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    EvalConfig c;
    c.samples_per_ray = j.value("S", c.samples_per_ray);
    c.dice_fraction = j.value("dice_fraction", c.dice_fraction);
    c.chunk_rays = j.value("chunk_rays", c.chunk_rays);
    c.threads = j.value("threads", c.threads);
    c.training_views = j.value("training_views", c.training_views);
    c.write_images = j.value("write_images", c.write_images);
    if (c.samples_per_ray < 2) throw ConfigError("eval.S must be >= 2");
    if (!(c.dice_fraction > 0.0)) throw ConfigError("eval.dice_fraction must be positive");
    if (c.chunk_rays < 1) throw ConfigError("eval.chunk_rays must be >= 1");
    return c;
}

nlohmann::json EvalConfig::to_json() const {
    return {{"S", samples_per_ray},           {"dice_fraction", dice_fraction},
            {"chunk_rays", chunk_rays},       {"threads", threads},
            {"training_views", training_views}, {"write_images", write_images}};
}

namespace {

// Renders phases [lo, hi]; out[k] holds phase lo + k.
std::vector<ChannelImages> render_phase_range(const FieldModel& model, const CameraPose& pose, double iteration,
                                              double i0, int samples, int chunk_rays, int threads, int lo, int hi) {
    if (samples < 2) throw ArgumentError("rendering needs at least two samples per ray");
    if (chunk_rays < 1) throw ArgumentError("chunk size must be positive");
    std::vector<ChannelImages> out(static_cast<std::size_t>(hi - lo + 1));
    for (auto& c : out) {
        c.static_intensity = blank(pose);
        c.dynamic_intensity = blank(pose);
        c.composite = blank(pose);
        c.mip = blank(pose);
        c.dynamic_depth = blank(pose);
    }
    const bool per_phase = model.variant() == Variant::Sparse;
    const int pixels = pose.detector_width * pose.detector_height;
    const int chunks = (pixels + chunk_rays - 1) / chunk_rays;
    parallel_for(static_cast<std::size_t>(chunks), threads, [&](std::size_t c) {
        const int first = static_cast<int>(c) * chunk_rays;
        const int count = std::min(chunk_rays, pixels - first);
        Eigen::VectorXd dt;
        const Eigen::MatrixXd points = chunk_points(pose, first, count, samples, dt);
        Eigen::RowVectorXd shared_static;
        if (!per_phase) shared_static = model.static_density(points, 1, iteration);
        for (int i = lo; i <= hi; ++i) {
            const Eigen::RowVectorXd sigma_s = per_phase ? model.static_density(points, i, iteration) : shared_static;
            const Eigen::RowVectorXd sigma_d = model.dynamic_density(points, i, iteration);
            auto& img = out[static_cast<std::size_t>(i - lo)];
            for (int r = 0; r < count; ++r) {
                double ds = 0.0, dd = 0.0, mip = 0.0;
                for (int s = 0; s < samples; ++s) {
                    const Eigen::Index k = r + static_cast<Eigen::Index>(count) * s;
                    ds += sigma_s(k);
                    dd += sigma_d(k);
                    mip = std::max(mip, per_phase ? sigma_s(k) + sigma_d(k) : sigma_d(k));
                }
                ds *= dt(r);
                dd *= dt(r);
                if (!(dt(r) > 0.0)) mip = 0.0;
                const auto p = static_cast<std::size_t>(first + r);
                img.static_intensity.pixels[p] = i0 * std::exp(-std::min(ds, kMaxOpticalDepth));
                img.dynamic_intensity.pixels[p] = i0 * std::exp(-std::min(dd, kMaxOpticalDepth));
                img.composite.pixels[p] = i0 * std::exp(-std::min(ds + dd, kMaxOpticalDepth));
                img.mip.pixels[p] = mip;
                img.dynamic_depth.pixels[p] = dd;
            }
        }
    });
    return out;
}

}  // namespace

std::vector<ChannelImages> render_all_phases(const FieldModel& model, const CameraPose& pose, double iteration,
                                             double i0, int samples, int chunk_rays, int threads) {
    return render_phase_range(model, pose, iteration, i0, samples, chunk_rays, threads, 1, model.phases());
}

ChannelImages render_channels(const FieldModel& model, const CameraPose& pose, int phase, double iteration,
                              double i0, int samples, int chunk_rays, int threads) {
    if (phase < 1 || phase > model.phases()) throw ArgumentError("phase out of range");
    auto one = render_phase_range(model, pose, iteration, i0, samples, chunk_rays, threads, phase, phase);
    return std::move(one.front());
}

nlohmann::json EvalReport::to_json() const {
    auto cells_json = nlohmann::json::array();
    for (const auto& c : cells)
        cells_json.push_back({{"view", c.view}, {"phase", c.phase}, {"dice", c.dice}, {"psnr", c.psnr}, {"ssim", c.ssim}});
    auto views = nlohmann::json::array();
    for (const auto& [v, d] : view_dice) views.push_back({{"view", v}, {"dice", d}});
    return {{"cells", cells_json},     {"mip_threshold", mip_threshold}, {"mean_dice", mean_dice},
            {"mean_psnr", mean_psnr},  {"mean_ssim", mean_ssim},         {"phase_dice", phase_dice},
            {"view_dice", views},      {"phase_dice_std", phase_dice_std}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        for (const auto& c : j.at("cells"))
            r.cells.push_back({c.at("view").get<int>(), c.at("phase").get<int>(), c.at("dice").get<double>(),
                               c.at("psnr").get<double>(), c.at("ssim").get<double>()});
        r.mip_threshold = j.at("mip_threshold").get<double>();
        r.mean_dice = j.at("mean_dice").get<double>();
        r.mean_psnr = j.at("mean_psnr").get<double>();
        r.mean_ssim = j.at("mean_ssim").get<double>();
        r.phase_dice = j.at("phase_dice").get<std::vector<double>>();
        for (const auto& v : j.at("view_dice")) r.view_dice.emplace_back(v.at("view").get<int>(), v.at("dice").get<double>());
        r.phase_dice_std = j.at("phase_dice_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed metrics file: ") + e.what());
    }
    return r;
}

EvalReport evaluate(const FieldModel& model, const AngiogramDataset& dataset, double iteration,
                    const EvalConfig& config, const std::optional<fs::path>& image_dir) {
    if (model.phases() != dataset.phases) throw ArgumentError("model and dataset phase counts differ");
    const auto views = config.training_views ? dataset.training_view_indices() : dataset.validation_view_indices();
    if (views.empty()) throw ArgumentError("no views to evaluate");
    EvalReport report;
    report.mip_threshold = config.dice_fraction * dataset.vessel_attenuation;
    if (image_dir) {
        std::error_code ec;
        fs::create_directories(*image_dir, ec);
        if (ec) throw IoError("cannot create " + image_dir->string());
    }
    const int T = dataset.phases;
    report.phase_dice.assign(static_cast<std::size_t>(T), 0.0);
    for (std::size_t v : views) {
        const auto& pose = dataset.views[v].pose;
        const auto images = render_all_phases(model, pose, iteration, dataset.i0, config.samples_per_ray,
                                              config.chunk_rays, config.threads);
        double view_total = 0.0;
        for (int i = 1; i <= T; ++i) {
            const auto& img = images[static_cast<std::size_t>(i - 1)];
            const auto predicted = threshold_mask(img.mip, report.mip_threshold);
            const auto& truth = dataset.vessel_mask(v, i);
            const auto& frame = dataset.frame(v, i).image;
            EvalCell cell{dataset.views[v].id, i, dice(predicted, truth), psnr(img.composite, frame, dataset.i0),
                          ssim(img.composite, frame, dataset.i0)};
            report.cells.push_back(cell);
            report.phase_dice[static_cast<std::size_t>(i - 1)] += cell.dice;
            view_total += cell.dice;
            if (image_dir) {
                const std::string stem = "view" + std::to_string(cell.view) + "_phase" + std::to_string(i);
                const fs::path& d = *image_dir;
                write_pfm(d / (stem + "_static.pfm"), img.static_intensity);
                write_pfm(d / (stem + "_dynamic.pfm"), img.dynamic_intensity);
                write_pfm(d / (stem + "_composite.pfm"), img.composite);
                write_pfm(d / (stem + "_mip.pfm"), img.mip);
                write_pfm(d / (stem + "_truth.pfm"), frame);
                std::vector<std::uint8_t> pm(predicted.size()), tm(truth.size());
                for (std::size_t k = 0; k < pm.size(); ++k) {
                    pm[k] = predicted[k] ? 255 : 0;
                    tm[k] = truth[k] ? 255 : 0;
                }
                write_pgm(d / (stem + "_mask.pgm"), frame.width, frame.height, pm);
                write_pgm(d / (stem + "_truth_mask.pgm"), frame.width, frame.height, tm);
            }
        }
        report.view_dice.emplace_back(dataset.views[v].id, view_total / T);
    }
    const double n = static_cast<double>(report.cells.size());
    for (const auto& c : report.cells) {
        report.mean_dice += c.dice / n;
        report.mean_psnr += c.psnr / n;
        report.mean_ssim += c.ssim / n;
    }
    for (double& d : report.phase_dice) d /= static_cast<double>(views.size());
    const double mean_phase = std::accumulate(report.phase_dice.begin(), report.phase_dice.end(), 0.0) / T;
    double var = 0.0;
    for (double d : report.phase_dice) var += (d - mean_phase) * (d - mean_phase);
    report.phase_dice_std = std::sqrt(var / T);
    return report;
}

void write_eval_csv(const EvalReport& report, const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "view,phase,dice,psnr,ssim\n";
    char buf[160];
    for (const auto& c : report.cells) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g\n", c.view, c.phase, c.dice, c.psnr, c.ssim);
        os << buf;
    }
}

void write_phase_csv(const EvalReport& report, const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "phase,mean_dice\n";
    char buf[64];
    for (std::size_t i = 0; i < report.phase_dice.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, report.phase_dice[i]);
        os << buf;
    }
}

std::string eval_markdown(const EvalReport& report, const std::string& title) {
    std::ostringstream os;
    char buf[160];
    os << "# " << title << "\n\n";
    std::snprintf(buf, sizeof buf, "| mean Dice | mean PSNR | mean SSIM | phase Dice std |\n|---|---|---|---|\n| %.4f | %.2f | %.4f | %.4f |\n\n",
                  report.mean_dice, report.mean_psnr, report.mean_ssim, report.phase_dice_std);
    os << buf;
    os << "MIP threshold: " << report.mip_threshold << "\n\n| view | phase | Dice | PSNR | SSIM |\n|---|---|---|---|---|\n";
    for (const auto& c : report.cells) {
        std::snprintf(buf, sizeof buf, "| %d | %d | %.4f | %.2f | %.4f |\n", c.view, c.phase, c.dice, c.psnr, c.ssim);
        os << buf;
    }
    return os.str();
}

// --- ablations ---------------------------------------------------------------------------

AblationSuite suite_from_string(const std::string& s) {
    if (s == "wps") return AblationSuite::WeightedSampling;
    if (s == "entropy-occlusion-grid") return AblationSuite::EntropyOcclusionGrid;
    if (s == "variant-comparison") return AblationSuite::VariantComparison;
    if (s == "phase-consistency") return AblationSuite::PhaseConsistency;
    throw ArgumentError("unknown ablation suite '" + s + "'");
}

std::string to_string(AblationSuite s) {
    switch (s) {
        case AblationSuite::WeightedSampling: return "wps";
        case AblationSuite::EntropyOcclusionGrid: return "entropy-occlusion-grid";
        case AblationSuite::VariantComparison: return "variant-comparison";
        case AblationSuite::PhaseConsistency: return "phase-consistency";
    }
    return "unknown";
}

namespace {

std::string weight_label(double w) {
    if (w == 0.0) return "0";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.0e", w);
    return buf;
}

}  // namespace

std::vector<AblationCell> ablation_cells(AblationSuite suite, const TrainConfig& base, const AblationOptions& options) {
    std::vector<AblationCell> cells;
    switch (suite) {
        case AblationSuite::WeightedSampling: {
            TrainConfig full = base, plain = base;
            full.variant = plain.variant = Variant::Full;
            plain.weighted_fraction = 0.0;
            cells.push_back({"full", full});
            cells.push_back({"wo_wps", plain});
            break;
        }
        case AblationSuite::EntropyOcclusionGrid:
            for (double le : options.entropy_weights)
                for (double lo : options.occlusion_weights) {
                    TrainConfig c = base;
                    c.variant = Variant::Full;
                    c.lambda_e.end = le;
                    c.lambda_e.start = std::min(c.lambda_e.start, le);
                    c.lambda_o.end = lo;
                    c.lambda_o.start = std::min(c.lambda_o.start, lo);
                    cells.push_back({"le_" + weight_label(le) + "_lo_" + weight_label(lo), c});
                }
            break;
        case AblationSuite::VariantComparison:
            for (Variant v : {Variant::Full, Variant::Dynamic, Variant::Sparse}) {
                TrainConfig c = base;
                c.variant = v;
                cells.push_back({to_string(v), c});
            }
            break;
        case AblationSuite::PhaseConsistency: {
            TrainConfig c = base;
            c.variant = Variant::Full;
            cells.push_back({"full", c});
            break;
        }
    }
    return cells;
}

AblationRow run_cell(const AblationCell& cell, const AngiogramDataset& dataset, const EvalConfig& eval,
                     const fs::path& dir, const std::function<void(const std::string&)>& progress) {
    const fs::path metrics = dir / "metrics.json";
    AblationRow row{cell.name, cell.train.to_json(), {}};
    if (fs::exists(metrics)) {
        std::ifstream is(metrics);
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("corrupt " + metrics.string() + ": " + e.what());
        }
        if (j.value("train", nlohmann::json{}) != row.settings || j.value("eval", nlohmann::json{}) != eval.to_json())
            throw ConfigError("cell " + cell.name + " was produced with a different configuration");
        row.report = EvalReport::from_json(j.at("report"));
        if (progress) progress("reused " + cell.name);
        return row;
    }
    if (progress) progress("training " + cell.name);
    TrainingOptions topt;
    topt.resume = true;
    const TrainState state = run_training(dataset, cell.train, dir, topt);
    row.report = evaluate(*state.model, dataset, static_cast<double>(state.iteration), eval);
    write_eval_csv(row.report, dir / "eval.csv");
    std::ofstream os(metrics);
    if (!os) throw IoError("cannot write " + metrics.string());
    os << nlohmann::json{{"train", row.settings}, {"eval", eval.to_json()}, {"report", row.report.to_json()}}.dump(2)
       << "\n";
    return row;
}

std::vector<AblationRow> run_ablation(AblationSuite suite, const AngiogramDataset& dataset, const TrainConfig& base,
                                      const EvalConfig& eval, const fs::path& out_dir, const AblationOptions& options) {
    std::vector<AblationRow> rows;
    for (const auto& cell : ablation_cells(suite, base, options))
        rows.push_back(run_cell(cell, dataset, eval, out_dir / "cells" / cell.name, options.progress));

    std::ofstream table(out_dir / "table.csv");
    std::ofstream phases(out_dir / "phase_dice.csv");
    std::ofstream md(out_dir / "report.md");
    if (!table || !phases || !md) throw IoError("cannot write ablation tables in " + out_dir.string());
    table << "cell,mean_dice,mean_psnr,mean_ssim,phase_dice_std\n";
    md << "# Ablation: " << to_string(suite) << "\n\n| cell | mean Dice | mean PSNR | mean SSIM | phase Dice std |\n"
       << "|---|---|---|---|---|\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g\n", r.name.c_str(), r.report.mean_dice,
                      r.report.mean_psnr, r.report.mean_ssim, r.report.phase_dice_std);
        table << buf;
        std::snprintf(buf, sizeof buf, "| %s | %.4f | %.2f | %.4f | %.4f |\n", r.name.c_str(), r.report.mean_dice,
                      r.report.mean_psnr, r.report.mean_ssim, r.report.phase_dice_std);
        md << buf;
    }
    phases << "phase";
    for (const auto& r : rows) phases << ',' << r.name;
    phases << '\n';
    md << "\n## Dice per phase\n\n| phase |";
    for (const auto& r : rows) md << ' ' << r.name << " |";
    md << "\n|---|";
    for (std::size_t k = 0; k < rows.size(); ++k) md << "---|";
    md << '\n';
    for (int i = 0; i < dataset.phases; ++i) {
        phases << i + 1;
        md << "| " << i + 1 << " |";
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, ",%.17g", r.report.phase_dice.at(static_cast<std::size_t>(i)));
            phases << buf;
            std::snprintf(buf, sizeof buf, " %.4f |", r.report.phase_dice.at(static_cast<std::size_t>(i)));
            md << buf;
        }
        phases << '\n';
        md << '\n';
    }
    return rows;
}

}  // namespace nerfca
