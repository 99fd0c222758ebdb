#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "json.hpp"

namespace nerfca {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Half extent of the scene bounding box; the scene is [-1, 1]^3.
inline constexpr double kSceneHalfExtent = 1.0;

struct AnglePair {
    double theta = 0.0;  ///< degrees, rotation about the patient vertical axis (LAO > 0, RAO < 0)
    double phi = 0.0;    ///< degrees, rotation about the lateral axis (cranial > 0, caudal < 0)

    bool operator==(const AnglePair&) const = default;
};

/// C-arm system description shared by every pose of a run.
struct ScannerConfig {
    double source_to_isocenter = 4.0;
    double source_to_detector = 6.0;
    int detector_width = 64;
    int detector_height = 64;
    double pixel_pitch = 0.036;

    std::vector<AnglePair> training_angles = {{-30, -25}, {45, -30}, {-30, 30}, {50, 20}};
    std::vector<AnglePair> validation_angles = {{0, -30}, {0, 40}, {70, 0}, {-45, 10}};

    /// Window from which extra training views are drawn when more than four are requested.
    AnglePair range_center = {10, 0};
    double angle_range = 60.0;

    void validate() const;

    static ScannerConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct CameraPose {
    double theta = 0.0;
    double phi = 0.0;
    double source_to_isocenter = 4.0;
    double source_to_detector = 6.0;
    int detector_width = 64;
    int detector_height = 64;
    double pixel_pitch = 0.036;

    Mat3 rotation() const;
    Vec3 source() const;
    Vec3 detector_center() const;
    /// World-space center of detector pixel (u, v); u runs along the detector's first axis.
    Vec3 pixel_center(double u, double v) const;

    bool operator==(const CameraPose&) const = default;
};

/// r(t) = origin + t * direction, restricted to [t_near, t_far].
struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();
    double t_near = 0.0;
    double t_far = 0.0;

    Vec3 at(double t) const { return origin + t * direction; }
    double length() const { return t_far - t_near; }
    /// True when the ray misses the scene box.
    bool empty() const { return !(t_far > t_near); }
};

struct ViewPlan {
    std::vector<CameraPose> training_poses;
    std::vector<CameraPose> validation_poses;
    double angle_range = 60.0;
};

/// Rotation for the documented convention: theta about +y first, then phi about +x.
Mat3 euler_rotation(double theta_deg, double phi_deg);

CameraPose pose_from_euler(double theta, double phi, const ScannerConfig& system);

/// Slab intersection with an axis-aligned box; returns false on a miss.
bool intersect_box(const Vec3& origin, const Vec3& direction, const Vec3& lo, const Vec3& hi,
                   double& t_near, double& t_far);

Ray generate_ray(const CameraPose& pose, int u, int v);

/// All rays of a pose in row-major order (index = v * width + u).
std::vector<Ray> generate_rays(const CameraPose& pose);

ViewPlan make_view_plan(int k, const ScannerConfig& config, std::uint64_t seed);

nlohmann::json pose_to_json(const CameraPose& pose);
CameraPose pose_from_json(const nlohmann::json& j);

}  // namespace nerfca
