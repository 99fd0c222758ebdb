#include "nerfca/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "json.hpp"

#include "nerfca/errors.hpp"

namespace nerfca {

namespace {

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

void check_system(double soi, double sdd, double pitch, int w, int h) {
    if (!(soi > 0.0) || !(sdd > 0.0))
        throw ConfigError("scanner distances must be positive");
    if (!(sdd > soi))
        throw ConfigError("source_to_detector must exceed source_to_isocenter");
    if (!(pitch > 0.0)) throw ConfigError("pixel_pitch must be positive");
    if (w < 1 || h < 1) throw ConfigError("detector size must be at least 1x1");
}

std::vector<AnglePair> angles_from_json(const nlohmann::json& j) {
    std::vector<AnglePair> out;
    for (const auto& a : j) out.push_back({a.at(0).get<double>(), a.at(1).get<double>()});
    return out;
}

nlohmann::json angles_to_json(const std::vector<AnglePair>& angles) {
    auto out = nlohmann::json::array();
    for (const auto& a : angles) out.push_back({a.theta, a.phi});
    return out;
}

}  // namespace

void ScannerConfig::validate() const {
    check_system(source_to_isocenter, source_to_detector, pixel_pitch, detector_width,
                 detector_height);
    if (training_angles.size() != 4 || validation_angles.size() != 4)
        throw ConfigError("scanner config needs exactly 4 training and 4 validation angles");
    for (const auto& t : training_angles)
        for (const auto& v : validation_angles)
            if (t == v) throw ConfigError("training and validation angles must be disjoint");
    if (!(angle_range > 0.0)) throw ConfigError("angle_range must be positive");
}

ScannerConfig ScannerConfig::from_json(const nlohmann::json& j) {
    ScannerConfig c;
    c.source_to_isocenter = j.value("source_to_isocenter", c.source_to_isocenter);
    c.source_to_detector = j.value("source_to_detector", c.source_to_detector);
    c.detector_width = j.value("detector_width", c.detector_width);
    c.detector_height = j.value("detector_height", c.detector_height);
    c.pixel_pitch = j.value("pixel_pitch", c.pixel_pitch);
    if (j.contains("training_angles")) c.training_angles = angles_from_json(j["training_angles"]);
    if (j.contains("validation_angles"))
        c.validation_angles = angles_from_json(j["validation_angles"]);
    if (j.contains("range_center"))
        c.range_center = {j["range_center"].at(0).get<double>(),
                          j["range_center"].at(1).get<double>()};
    c.angle_range = j.value("angle_range", c.angle_range);
    c.validate();
    return c;
}

nlohmann::json ScannerConfig::to_json() const {
    return {{"source_to_isocenter", source_to_isocenter},
            {"source_to_detector", source_to_detector},
            {"detector_width", detector_width},
            {"detector_height", detector_height},
            {"pixel_pitch", pixel_pitch},
            {"training_angles", angles_to_json(training_angles)},
            {"validation_angles", angles_to_json(validation_angles)},
            {"range_center", {range_center.theta, range_center.phi}},
            {"angle_range", angle_range}};
}

Mat3 euler_rotation(double theta_deg, double phi_deg) {
    const double t = radians(theta_deg);
    const double p = radians(phi_deg);
    Mat3 ry;
    ry << std::cos(t), 0, std::sin(t),
          0, 1, 0,
          -std::sin(t), 0, std::cos(t);
    Mat3 rx;
    rx << 1, 0, 0,
          0, std::cos(p), -std::sin(p),
          0, std::sin(p), std::cos(p);
    return rx * ry;
}

Mat3 CameraPose::rotation() const { return euler_rotation(theta, phi); }

Vec3 CameraPose::source() const { return rotation() * Vec3(0, 0, -source_to_isocenter); }

Vec3 CameraPose::detector_center() const {
    return rotation() * Vec3(0, 0, source_to_detector - source_to_isocenter);
}

Vec3 CameraPose::pixel_center(double u, double v) const {
    const Mat3 r = rotation();
    const double du = (u - 0.5 * (detector_width - 1)) * pixel_pitch;
    const double dv = (v - 0.5 * (detector_height - 1)) * pixel_pitch;
    return detector_center() + du * r.col(0) + dv * r.col(1);
}

CameraPose pose_from_euler(double theta, double phi, const ScannerConfig& system) {
    if (!std::isfinite(theta) || !std::isfinite(phi))
        throw ArgumentError("pose angles must be finite");
    check_system(system.source_to_isocenter, system.source_to_detector, system.pixel_pitch,
                 system.detector_width, system.detector_height);
    CameraPose pose;
    pose.theta = theta;
    pose.phi = phi;
    pose.source_to_isocenter = system.source_to_isocenter;
    pose.source_to_detector = system.source_to_detector;
    pose.detector_width = system.detector_width;
    pose.detector_height = system.detector_height;
    pose.pixel_pitch = system.pixel_pitch;
    return pose;
}

bool intersect_box(const Vec3& origin, const Vec3& direction, const Vec3& lo, const Vec3& hi,
                   double& t_near, double& t_far) {
    double tn = 0.0;
    double tf = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (direction[a] == 0.0) {
            if (origin[a] < lo[a] || origin[a] > hi[a]) return false;
            continue;
        }
        double t0 = (lo[a] - origin[a]) / direction[a];
        double t1 = (hi[a] - origin[a]) / direction[a];
        if (t0 > t1) std::swap(t0, t1);
        tn = std::max(tn, t0);
        tf = std::min(tf, t1);
    }
    if (!(tf > tn)) return false;
    t_near = tn;
    t_far = tf;
    return true;
}

Ray generate_ray(const CameraPose& pose, int u, int v) {
    if (u < 0 || u >= pose.detector_width || v < 0 || v >= pose.detector_height)
        throw ArgumentError("pixel (" + std::to_string(u) + ", " + std::to_string(v) +
                            ") outside the detector");
    Ray ray;
    ray.origin = pose.source();
    ray.direction = (pose.pixel_center(u, v) - ray.origin).normalized();
    const Vec3 lo = Vec3::Constant(-kSceneHalfExtent);
    const Vec3 hi = Vec3::Constant(kSceneHalfExtent);
    double tn = 0.0;
    double tf = 0.0;
    if (intersect_box(ray.origin, ray.direction, lo, hi, tn, tf)) {
        ray.t_near = tn;
        ray.t_far = tf;
    }
    return ray;
}

std::vector<Ray> generate_rays(const CameraPose& pose) {
    std::vector<Ray> rays;
    rays.reserve(static_cast<std::size_t>(pose.detector_width) * pose.detector_height);
    for (int v = 0; v < pose.detector_height; ++v)
        for (int u = 0; u < pose.detector_width; ++u) rays.push_back(generate_ray(pose, u, v));
    return rays;
}

ViewPlan make_view_plan(int k, const ScannerConfig& config, std::uint64_t seed) {
    if (k < 1) throw ArgumentError("view plan needs at least one training view");
    config.validate();
    ViewPlan plan;
    plan.angle_range = config.angle_range;
    for (const auto& a : config.validation_angles)
        plan.validation_poses.push_back(pose_from_euler(a.theta, a.phi, config));

    if (k <= 4) {
        for (int i = 0; i < k; ++i) {
            const auto& a = config.training_angles[static_cast<std::size_t>(i)];
            plan.training_poses.push_back(pose_from_euler(a.theta, a.phi, config));
        }
        return plan;
    }

    std::mt19937_64 rng(seed);
    const double half = 0.5 * config.angle_range;
    std::uniform_real_distribution<double> offset(-half, half);
    while (static_cast<int>(plan.training_poses.size()) < k) {
        const double theta = config.range_center.theta + offset(rng);
        const double phi = config.range_center.phi + offset(rng);
        const bool clashes = std::any_of(
            config.validation_angles.begin(), config.validation_angles.end(),
            [&](const AnglePair& a) {
                return std::abs(a.theta - theta) < 1e-9 && std::abs(a.phi - phi) < 1e-9;
            });
        if (!clashes) plan.training_poses.push_back(pose_from_euler(theta, phi, config));
    }
    return plan;
}

nlohmann::json pose_to_json(const CameraPose& pose) {
    return {{"theta", pose.theta},
            {"phi", pose.phi},
            {"source_to_isocenter", pose.source_to_isocenter},
            {"source_to_detector", pose.source_to_detector},
            {"detector_width", pose.detector_width},
            {"detector_height", pose.detector_height},
            {"pixel_pitch", pose.pixel_pitch}};
}

CameraPose pose_from_json(const nlohmann::json& j) {
    CameraPose p;
    p.theta = j.at("theta").get<double>();
    p.phi = j.at("phi").get<double>();
    p.source_to_isocenter = j.at("source_to_isocenter").get<double>();
    p.source_to_detector = j.at("source_to_detector").get<double>();
    p.detector_width = j.at("detector_width").get<int>();
    p.detector_height = j.at("detector_height").get<int>();
    p.pixel_pitch = j.at("pixel_pitch").get<double>();
    return p;
}

}  // namespace nerfca
