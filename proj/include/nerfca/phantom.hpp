#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <variant>
#include <vector>

#include "json.hpp"
#include "nerfca/geometry.hpp"

namespace nerfca {

/// Queryable attenuation (inverse scene units). Static fields ignore the phase.
class DensityField {
public:
    virtual ~DensityField() = default;

    /// Phase indices are 1-based and taken modulo the period.
    virtual double density(const Vec3& x, int phase) const = 0;

    /// Density at ray.at(ts[k]) for every k. Implementations may cull per ray.
    virtual void sample_along(const Ray& ray, std::span<const double> ts, int phase,
                              std::span<double> out) const;
};

/// Maps a 1-based phase (any integer) into {1..period}.
int wrap_phase(int phase, int period);

// --- analytic primitives ---------------------------------------------------

struct Sphere {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
    double mu = 0.0;
};

struct Ellipsoid {
    Vec3 center = Vec3::Zero();
    Vec3 semi_axes = Vec3::Ones();
    double mu = 0.0;
};

/// Capped cylinder; an infinite half_length makes it unbounded along its axis.
struct Cylinder {
    Vec3 center = Vec3::Zero();
    Vec3 axis = Vec3::UnitY();
    double radius = 1.0;
    double half_length = 1.0;
    double mu = 0.0;
};

using Primitive = std::variant<Sphere, Ellipsoid, Cylinder>;

bool contains(const Primitive& p, const Vec3& x);
double attenuation_of(const Primitive& p);

/// mu times the chord of the ray inside the primitive, restricted to [t_near, t_far].
/// Supports spheres and infinite cylinders; anything else throws CapabilityError.
double analytic_line_integral(const Ray& ray, const Primitive& p);

class BackgroundModel final : public DensityField {
public:
    BackgroundModel() = default;
    explicit BackgroundModel(std::vector<Primitive> primitives);

    double density(const Vec3& x, int phase = 1) const override;
    const std::vector<Primitive>& primitives() const { return primitives_; }

private:
    std::vector<Primitive> primitives_;
};

// --- vessel tree -------------------------------------------------------------

struct VesselBranch {
    std::array<Vec3, 4> control_points;  ///< cubic Bezier control points at the reference phase
    double radius_start = 0.03;
    double radius_end = 0.01;
    int generation = 1;
};

/// Smooth periodic cardiac motion applied to vessel control points.
/// The displacement vanishes at phase 1 and repeats with period T.
struct CardiacDeformation {
    Vec3 center = Vec3::Zero();
    double radial = 0.025;
    double twist = 0.015;
    double longitudinal = 0.01;
    int period = 10;

    double weight(int phase) const;
    Vec3 displacement(const Vec3& p, int phase) const;
    /// Upper bound on |displacement| over all points and phases.
    double max_displacement() const { return radial + twist + longitudinal; }
};

struct VesselSegment {
    Vec3 a;
    Vec3 b;
    double radius_a;
    double radius_b;
    Vec3 box_lo;
    Vec3 box_hi;
};

class VesselTree final : public DensityField {
public:
    VesselTree(std::vector<VesselBranch> branches, double mu, CardiacDeformation deformation,
               int segments_per_branch = 24);

    double density(const Vec3& x, int phase) const override;
    void sample_along(const Ray& ray, std::span<const double> ts, int phase,
                      std::span<double> out) const override;

    double attenuation() const { return mu_; }
    int period() const { return deformation_.period; }
    const std::vector<VesselBranch>& branches() const { return branches_; }
    const CardiacDeformation& deformation() const { return deformation_; }
    /// Deformed centerline polyline of one branch at a phase.
    std::vector<Vec3> centerline(std::size_t branch, int phase) const;
    const std::vector<VesselSegment>& segments(int phase) const;

private:
    std::vector<VesselBranch> branches_;
    double mu_;
    CardiacDeformation deformation_;
    int segments_per_branch_;
    std::vector<std::vector<VesselSegment>> per_phase_;  // index phase - 1
};

/// Closest distance from x to segment [a, b]; s receives the clamped segment parameter.
double point_segment_distance(const Vec3& x, const Vec3& a, const Vec3& b, double& s);

// --- voxel grids ---------------------------------------------------------------

/// Phase-major attenuation volume centered on the isocenter.
struct VoxelGrid4D {
    int nx = 0, ny = 0, nz = 0, phases = 0;
    double spacing = 1.0;
    std::vector<float> values;  ///< index ((phase * nz + z) * ny + y) * nx + x

    float& at(int x, int y, int z, int phase);
    float at(int x, int y, int z, int phase) const;
    /// World position of a voxel center.
    Vec3 voxel_center(int x, int y, int z) const;
};

VoxelGrid4D load_voxel_grid(const std::filesystem::path& path);
void save_voxel_grid(const VoxelGrid4D& grid, const std::filesystem::path& path);
/// Trilinear interpolation within the (wrapped) phase volume; zero outside the grid.
double sample_voxel_grid(const VoxelGrid4D& grid, const Vec3& x, int phase);

class VoxelGridField final : public DensityField {
public:
    explicit VoxelGridField(VoxelGrid4D grid) : grid_(std::move(grid)) {}
    double density(const Vec3& x, int phase) const override {
        return sample_voxel_grid(grid_, x, phase);
    }
    const VoxelGrid4D& grid() const { return grid_; }

private:
    VoxelGrid4D grid_;
};

// --- full phantom --------------------------------------------------------------

struct PhantomConfig {
    int phases = 10;                   ///< T
    double vessel_attenuation = 3.0;   ///< mu_v
    double radius_root = 0.03;
    double radius_tip = 0.01;
    double motion_amplitude = 0.05;    ///< bound on vessel displacement
    double heart_motion = 0.0;         ///< relative heart scaling per cycle; 0 keeps the heart static
    std::uint64_t seed = 7;
    double torso_attenuation = 0.3;
    double spine_attenuation = 0.8;
    double heart_attenuation = 0.5;
    std::string voxel_grid;            ///< optional external dynamic volume replacing the tree

    static PhantomConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Background plus phase-dependent vessels (and optionally a beating heart).
class Phantom final : public DensityField {
public:
    explicit Phantom(const PhantomConfig& config);

    double density(const Vec3& x, int phase) const override;
    void sample_along(const Ray& ray, std::span<const double> ts, int phase,
                      std::span<double> out) const override;

    const DensityField& vessels() const { return *vessels_; }
    const DensityField& static_background() const { return background_; }
    const VesselTree* vessel_tree() const { return tree_; }
    int period() const { return config_.phases; }
    /// Ground-truth attenuation used when binarising projections.
    double vessel_attenuation() const;
    const PhantomConfig& config() const { return config_; }

private:
    double heart_density(const Vec3& x, int phase) const;

    PhantomConfig config_;
    BackgroundModel background_;
    std::unique_ptr<DensityField> vessels_;
    const VesselTree* tree_ = nullptr;
    Ellipsoid heart_;
    float grid_max_ = 0.0f;
};

/// The procedural left-coronary-like tree (7 branches, 3 generations).
std::vector<VesselBranch> default_vessel_branches(const PhantomConfig& config,
                                                  const Ellipsoid& heart);
Ellipsoid default_heart(double mu);

}  // namespace nerfca
