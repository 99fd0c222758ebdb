// Command-line entry point: generate-data, train, eval, render, ablate.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nerfca/config.hpp"
#include "nerfca/errors.hpp"
#include "nerfca/evaluator.hpp"
#include "nerfca/parallel.hpp"
#include "nerfca/runtime.hpp"
#include "nerfca/trainer.hpp"

namespace fs = std::filesystem;
using namespace nerfca;

namespace {

constexpr const char* kVersion = "1.0.0";

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kConfigFailure = 2,
    kIoFailure = 3,
    kNumericalFailure = 4,
};

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

struct Common {
    std::vector<std::string> config_files;
    std::vector<std::string> overrides;
    std::optional<int> threads;
    std::optional<std::uint64_t> seed;
};

class ManifestWriter {
public:
    ManifestWriter(std::string command, fs::path dir) : command_(std::move(command)), dir_(std::move(dir)) {
        started_ = timestamp();
    }
    void set_config(nlohmann::json c) { config_ = std::move(c); }
    void set_seed(std::uint64_t s) { seed_ = s; }
    void add_artifact(const std::string& a) { artifacts_.push_back(a); }
    void add_input(const std::string& key, const std::string& value) { inputs_[key] = value; }
    void write() const {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        std::ofstream os(dir_ / "run_manifest.json");
        if (!os) throw IoError("cannot write run manifest in " + dir_.string());
        os << nlohmann::json{{"command", command_},
                             {"tool_version", kVersion},
                             {"seed", seed_},
                             {"inputs", inputs_},
                             {"config", config_},
                             {"artifacts", artifacts_},
                             {"started", started_},
                             {"finished", timestamp()}}
                  .dump(2)
           << "\n";
    }

private:
    std::string command_;
    fs::path dir_;
    std::string started_;
    nlohmann::json config_ = nlohmann::json::object();
    nlohmann::json inputs_ = nlohmann::json::object();
    std::uint64_t seed_ = 0;
    std::vector<std::string> artifacts_;
};

int resolve_threads(const Common& c, const nlohmann::json& raw, const char* section) {
    if (c.threads) {
        if (*c.threads < 1) throw ConfigError("--threads must be >= 1");
        return *c.threads;
    }
    if (raw.contains(section) && raw[section].contains("threads")) return raw[section]["threads"].get<int>();
    return default_thread_count();
}

RunConfig load_run_config(const Common& c, nlohmann::json& raw) {
    std::vector<fs::path> files(c.config_files.begin(), c.config_files.end());
    raw = merge_config_files(files);
    apply_overrides(raw, c.overrides);
    RunConfig rc = RunConfig::from_json(raw);
    if (c.seed) {
        rc.train.seed = *c.seed;
        rc.dataset.seed = *c.seed;
    }
    rc.train.threads = resolve_threads(c, raw, "train");
    rc.eval.threads = resolve_threads(c, raw, "eval");
    return rc;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

int cmd_generate(const Common& common, const fs::path& out, std::optional<int> views) {
    nlohmann::json raw;
    RunConfig rc = load_run_config(common, raw);
    if (views) rc.dataset.training_views = *views;
    const int threads = resolve_threads(common, raw, "dataset");
    const Phantom phantom(rc.phantom);
    const ViewPlan plan = make_view_plan(rc.dataset.training_views, rc.scanner, rc.dataset.seed);
    AngiogramDataset ds = generate_dataset(phantom, plan, rc.dataset, threads);
    ds.generation = {{"scanner", rc.scanner.to_json()}, {"phantom", rc.phantom.to_json()}, {"dataset", rc.dataset.to_json()}};
    save_dataset(ds, out);
    ManifestWriter m("generate-data", out);
    m.set_config(rc.to_json());
    m.set_seed(rc.dataset.seed);
    m.add_artifact("manifest.json");
    m.write();
    std::printf("wrote %zu views x %d phases = %zu frames to %s\n", ds.views.size(), ds.phases, ds.frames.size(),
                out.string().c_str());
    return kOk;
}

int cmd_train(const Common& common, const fs::path& data, const fs::path& out, std::optional<std::string> variant,
              std::optional<double> scale, bool resume, std::optional<long long> stop_at, bool quiet) {
    nlohmann::json raw;
    RunConfig rc = load_run_config(common, raw);
    if (variant) rc.train.variant = variant_from_string(*variant);
    if (scale) rc.train.scale = *scale;
    rc.train.validate();
    const AngiogramDataset ds = load_dataset(data);
    TrainingOptions opt;
    opt.resume = resume;
    opt.stop_at = stop_at;
    const long long total = rc.train.total_iterations();
    const auto start = std::chrono::steady_clock::now();
    if (!quiet)
        opt.on_step = [&](long long n, const LossBundle& b) {
            if ((n + 1) % 100 != 0 && n + 1 != total) return;
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            char buf[200];
            std::snprintf(buf, sizeof buf, "iter %lld/%lld  L_p %.3e  L_total %.3e  masked %d  (%.0fs)", n + 1, total,
                          b.photometric, b.total, b.masked_rays, secs);
            log_line(buf);
        };
    const TrainState state = run_training(ds, rc.train, out, opt);
    ManifestWriter m("train", out);
    m.set_config(rc.to_json());
    m.set_seed(rc.train.seed);
    m.add_input("dataset", data.string());
    m.add_artifact("checkpoint.bin");
    m.add_artifact("loss.csv");
    m.write();
    std::printf("trained %s to iteration %lld -> %s\n", to_string(rc.train.variant).c_str(), state.iteration,
                (out / "checkpoint.bin").string().c_str());
    return kOk;
}

int cmd_eval(const Common& common, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
             bool training_views, bool images) {
    nlohmann::json raw;
    RunConfig rc = load_run_config(common, raw);
    rc.eval.training_views = rc.eval.training_views || training_views;
    rc.eval.write_images = rc.eval.write_images || images;
    TrainConfig stored;
    const TrainState state = load_checkpoint(checkpoint, stored);
    const AngiogramDataset ds = load_dataset(data);
    std::optional<fs::path> image_dir;
    if (rc.eval.write_images) image_dir = out / "images";
    const EvalReport report = evaluate(*state.model, ds, static_cast<double>(state.iteration), rc.eval, image_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    write_eval_csv(report, out / "metrics.csv");
    write_phase_csv(report, out / "phase_dice.csv");
    {
        std::ofstream md(out / "report.md");
        md << eval_markdown(report, "Evaluation of " + checkpoint.string());
        std::ofstream js(out / "report.json");
        js << report.to_json().dump(2) << "\n";
    }
    ManifestWriter m("eval", out);
    nlohmann::json cfg = rc.to_json();
    cfg["train"] = stored.to_json();
    m.set_config(cfg);
    m.set_seed(stored.seed);
    m.add_input("checkpoint", checkpoint.string());
    m.add_input("dataset", data.string());
    for (const char* a : {"metrics.csv", "phase_dice.csv", "report.md", "report.json"}) m.add_artifact(a);
    if (image_dir) m.add_artifact("images/");
    m.write();
    std::printf("mean dice %.4f  psnr %.2f  ssim %.4f  phase dice std %.4f\n", report.mean_dice, report.mean_psnr,
                report.mean_ssim, report.phase_dice_std);
    return kOk;
}

int cmd_render(const Common& common, const fs::path& checkpoint, double theta, double phi, int phase, const fs::path& out) {
    nlohmann::json raw;
    RunConfig rc = load_run_config(common, raw);
    TrainConfig stored;
    const TrainState state = load_checkpoint(checkpoint, stored);
    const CameraPose pose = pose_from_euler(theta, phi, rc.scanner);
    const ChannelImages img = render_channels(*state.model, pose, phase, static_cast<double>(state.iteration), 1.0,
                                              rc.eval.samples_per_ray, rc.eval.chunk_rays, rc.eval.threads);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string());
    write_pfm(out / "static.pfm", img.static_intensity);
    write_pfm(out / "dynamic.pfm", img.dynamic_intensity);
    write_pfm(out / "composite.pfm", img.composite);
    write_pfm(out / "mip.pfm", img.mip);
    write_pgm_scaled(out / "static.pgm", img.static_intensity, 0.0, 1.0);
    write_pgm_scaled(out / "dynamic.pgm", img.dynamic_intensity, 0.0, 1.0);
    write_pgm_scaled(out / "composite.pgm", img.composite, 0.0, 1.0);
    ManifestWriter m("render", out);
    m.set_config({{"scanner", rc.scanner.to_json()}, {"eval", rc.eval.to_json()}, {"train", stored.to_json()},
                  {"pose", pose_to_json(pose)}, {"phase", phase}});
    m.set_seed(stored.seed);
    m.add_input("checkpoint", checkpoint.string());
    for (const char* a : {"static.pfm", "dynamic.pfm", "composite.pfm", "mip.pfm", "static.pgm", "dynamic.pgm",
                          "composite.pgm"})
        m.add_artifact(a);
    m.write();
    std::printf("rendered phase %d at theta %.2f phi %.2f -> %s\n", phase, theta, phi, out.string().c_str());
    return kOk;
}

int cmd_ablate(const Common& common, const std::string& suite_name, const fs::path& data, const fs::path& out) {
    nlohmann::json raw;
    RunConfig rc = load_run_config(common, raw);
    const AblationSuite suite = suite_from_string(suite_name);
    const AngiogramDataset ds = load_dataset(data);
    AblationOptions opt;
    opt.progress = log_line;
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string());
    const auto rows = run_ablation(suite, ds, rc.train, rc.eval, out, opt);
    ManifestWriter m("ablate", out);
    m.set_config(rc.to_json());
    m.set_seed(rc.train.seed);
    m.add_input("suite", suite_name);
    m.add_input("dataset", data.string());
    for (const char* a : {"table.csv", "phase_dice.csv", "report.md"}) m.add_artifact(a);
    for (const auto& r : rows) m.add_artifact("cells/" + r.name + "/");
    m.write();
    for (const auto& r : rows) std::printf("%-24s dice %.4f  psnr %.2f  ssim %.4f\n", r.name.c_str(), r.report.mean_dice,
                                           r.report.mean_psnr, r.report.mean_ssim);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Static/dynamic neural attenuation fields for sparse-view angiography"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", common.config_files, "JSON config layers, later files win")->check(CLI::ExistingFile);
        sub->add_option("--set", common.overrides, "override a key, e.g. --set train.V=0");
        sub->add_option("--threads", common.threads, "worker threads (default: NERFCA_THREADS or 1)");
        sub->add_option("--seed", common.seed, "seed for data generation and training");
    };

    std::string out, data, checkpoint, suite;
    std::optional<int> views;
    std::optional<std::string> variant;
    std::optional<double> scale;
    std::optional<long long> stop_at;
    bool resume = false, quiet = false, training_views = false, images = false;
    double theta = 0.0, phi = 0.0;
    int phase = 1;

    auto* gen = app.add_subcommand("generate-data", "render a phantom dataset");
    add_common(gen);
    gen->add_option("-o,--out", out, "output directory")->required();
    gen->add_option("--views", views, "number of training views");

    auto* train = app.add_subcommand("train", "fit a model to a dataset");
    add_common(train);
    train->add_option("-d,--data", data, "dataset directory")->required();
    train->add_option("-o,--out", out, "run directory")->required();
    train->add_option("--variant", variant, "full | dynamic | sparse");
    train->add_option("--scale", scale, "multiplier for every iteration horizon");
    train->add_flag("--resume", resume, "continue from the run directory's checkpoint");
    train->add_option("--stop-at", stop_at, "stop after this iteration");
    train->add_flag("-q,--quiet", quiet, "no progress output");

    auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
    add_common(eval);
    eval->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("-d,--data", data, "dataset directory")->required();
    eval->add_option("-o,--out", out, "output directory")->required();
    eval->add_flag("--training-views", training_views, "score the training views instead of validation views");
    eval->add_flag("--images", images, "write per-cell rasters");

    auto* render = app.add_subcommand("render", "render a checkpoint from any angle");
    add_common(render);
    render->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
    render->add_option("--theta", theta, "primary angle in degrees");
    render->add_option("--phi", phi, "secondary angle in degrees");
    render->add_option("--phase", phase, "cardiac phase (1-based)");
    render->add_option("-o,--out", out, "output directory")->required();

    auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
    add_common(ablate);
    ablate->add_option("--suite", suite, "wps | entropy-occlusion-grid | variant-comparison | phase-consistency")->required();
    ablate->add_option("-d,--data", data, "dataset directory")->required();
    ablate->add_option("-o,--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigFailure;
    }

    try {
        if (gen->parsed()) return cmd_generate(common, out, views);
        if (train->parsed()) return cmd_train(common, data, out, variant, scale, resume, stop_at, quiet);
        if (eval->parsed()) return cmd_eval(common, checkpoint, data, out, training_views, images);
        if (render->parsed()) return cmd_render(common, checkpoint, theta, phi, phase, out);
        if (ablate->parsed()) return cmd_ablate(common, suite, data, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigFailure;
    } catch (const ArgumentError& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return kConfigFailure;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumericalFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
