#include "nerfca/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>

#include "nerfca/binary_io.hpp"
#include "nerfca/errors.hpp"

namespace nerfca {

void DensityField::sample_along(const Ray& ray, std::span<const double> ts, int phase,
                                std::span<double> out) const {
    for (std::size_t k = 0; k < ts.size(); ++k) out[k] = density(ray.at(ts[k]), phase);
}

int wrap_phase(int phase, int period) {
    const int m = (phase - 1) % period;
    return (m < 0 ? m + period : m) + 1;
}

// --- primitives ------------------------------------------------------------------

bool contains(const Primitive& p, const Vec3& x) {
    return std::visit(
        [&](const auto& s) -> bool {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, Sphere>) {
                return (x - s.center).squaredNorm() <= s.radius * s.radius;
            } else if constexpr (std::is_same_v<S, Ellipsoid>) {
                return (x - s.center).cwiseQuotient(s.semi_axes).squaredNorm() <= 1.0;
            } else {
                const Vec3 r = x - s.center;
                const double along = r.dot(s.axis);
                if (std::abs(along) > s.half_length) return false;
                return (r - along * s.axis).squaredNorm() <= s.radius * s.radius;
            }
        },
        p);
}

double attenuation_of(const Primitive& p) {
    return std::visit([](const auto& s) { return s.mu; }, p);
}

namespace {

double clipped_chord(double t0, double t1, const Ray& ray) {
    const double a = std::max(t0, ray.t_near);
    const double b = std::min(t1, ray.t_far);
    return std::max(0.0, b - a);
}

}  // namespace

double analytic_line_integral(const Ray& ray, const Primitive& p) {
    if (const auto* s = std::get_if<Sphere>(&p)) {
        const Vec3 oc = ray.origin - s->center;
        const double b = oc.dot(ray.direction);
        const double disc = b * b - (oc.squaredNorm() - s->radius * s->radius);
        if (disc <= 0.0) return 0.0;
        const double root = std::sqrt(disc);
        return s->mu * clipped_chord(-b - root, -b + root, ray);
    }
    if (const auto* c = std::get_if<Cylinder>(&p); c && std::isinf(c->half_length)) {
        const Vec3 oc = ray.origin - c->center;
        const Vec3 o_perp = oc - oc.dot(c->axis) * c->axis;
        const Vec3 d_perp = ray.direction - ray.direction.dot(c->axis) * c->axis;
        const double a = d_perp.squaredNorm();
        const double cc = o_perp.squaredNorm() - c->radius * c->radius;
        if (a < 1e-300) return cc < 0.0 ? c->mu * ray.length() : 0.0;
        const double b = o_perp.dot(d_perp);
        const double disc = b * b - a * cc;
        if (disc <= 0.0) return 0.0;
        const double root = std::sqrt(disc);
        return c->mu * clipped_chord((-b - root) / a, (-b + root) / a, ray);
    }
    throw CapabilityError("analytic line integral supports spheres and infinite cylinders only");
}

BackgroundModel::BackgroundModel(std::vector<Primitive> primitives)
    : primitives_(std::move(primitives)) {
    for (const auto& p : primitives_)
        if (!(attenuation_of(p) >= 0.0))
            throw ConfigError("background attenuation must be non-negative");
}

double BackgroundModel::density(const Vec3& x, int) const {
    double sum = 0.0;
    for (const auto& p : primitives_)
        if (contains(p, x)) sum += attenuation_of(p);
    return sum;
}

// --- vessels ---------------------------------------------------------------------

double CardiacDeformation::weight(int phase) const {
    const int i = wrap_phase(phase, period);
    return 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * (i - 1) / period));
}

Vec3 CardiacDeformation::displacement(const Vec3& p, int phase) const {
    const double w = weight(phase);
    if (w == 0.0) return Vec3::Zero();
    const Vec3 r = p - center;
    const double n = r.norm();
    Vec3 d = -longitudinal * Vec3::UnitY();
    if (n > 1e-12) {
        d -= radial * r / n;
        const Vec3 t = Vec3::UnitY().cross(r);
        const double tn = t.norm();
        if (tn > 1e-12) d += twist * t / tn;
    }
    return w * d;
}

double point_segment_distance(const Vec3& x, const Vec3& a, const Vec3& b, double& s) {
    const Vec3 ab = b - a;
    const double len2 = ab.squaredNorm();
    s = len2 > 0.0 ? std::clamp((x - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    return (x - (a + s * ab)).norm();
}

namespace {

Vec3 bezier(const std::array<Vec3, 4>& c, double s) {
    const double u = 1.0 - s;
    return u * u * u * c[0] + 3 * u * u * s * c[1] + 3 * u * s * s * c[2] + s * s * s * c[3];
}

}  // namespace

VesselTree::VesselTree(std::vector<VesselBranch> branches, double mu,
                       CardiacDeformation deformation, int segments_per_branch)
    : branches_(std::move(branches)),
      mu_(mu),
      deformation_(deformation),
      segments_per_branch_(segments_per_branch) {
    if (!(mu_ > 0.0)) throw ConfigError("vessel attenuation must be positive");
    if (deformation_.period < 1) throw ConfigError("cardiac period must be at least 1");
    if (segments_per_branch_ < 1) throw ConfigError("segments_per_branch must be positive");
    for (const auto& b : branches_)
        if (!(b.radius_start > 0.0) || !(b.radius_end > 0.0))
            throw ConfigError("vessel radii must be positive");

    per_phase_.resize(static_cast<std::size_t>(deformation_.period));
    for (int phase = 1; phase <= deformation_.period; ++phase) {
        auto& segs = per_phase_[static_cast<std::size_t>(phase - 1)];
        for (std::size_t bi = 0; bi < branches_.size(); ++bi) {
            const auto line = centerline(bi, phase);
            const auto& br = branches_[bi];
            const int n = segments_per_branch_;
            for (int k = 0; k < n; ++k) {
                VesselSegment s;
                s.a = line[static_cast<std::size_t>(k)];
                s.b = line[static_cast<std::size_t>(k + 1)];
                s.radius_a = br.radius_start + (br.radius_end - br.radius_start) * k / n;
                s.radius_b = br.radius_start + (br.radius_end - br.radius_start) * (k + 1) / n;
                const double r = std::max(s.radius_a, s.radius_b);
                s.box_lo = s.a.cwiseMin(s.b) - Vec3::Constant(r);
                s.box_hi = s.a.cwiseMax(s.b) + Vec3::Constant(r);
                segs.push_back(s);
            }
        }
    }
}

std::vector<Vec3> VesselTree::centerline(std::size_t branch, int phase) const {
    auto control = branches_.at(branch).control_points;
    for (auto& c : control) c += deformation_.displacement(c, phase);
    std::vector<Vec3> line;
    for (int k = 0; k <= segments_per_branch_; ++k)
        line.push_back(bezier(control, static_cast<double>(k) / segments_per_branch_));
    return line;
}

const std::vector<VesselSegment>& VesselTree::segments(int phase) const {
    return per_phase_[static_cast<std::size_t>(wrap_phase(phase, deformation_.period) - 1)];
}

namespace {

bool inside_segment(const VesselSegment& s, const Vec3& x) {
    if ((x.array() < s.box_lo.array()).any() || (x.array() > s.box_hi.array()).any())
        return false;
    double t = 0.0;
    const double d = point_segment_distance(x, s.a, s.b, t);
    return d <= s.radius_a + t * (s.radius_b - s.radius_a);
}

}  // namespace

double VesselTree::density(const Vec3& x, int phase) const {
    for (const auto& s : segments(phase))
        if (inside_segment(s, x)) return mu_;
    return 0.0;
}

void VesselTree::sample_along(const Ray& ray, std::span<const double> ts, int phase,
                              std::span<double> out) const {
    struct Candidate {
        const VesselSegment* seg;
        double t0, t1;
    };
    std::vector<Candidate> candidates;
    for (const auto& s : segments(phase)) {
        double t0 = 0.0, t1 = 0.0;
        if (intersect_box(ray.origin, ray.direction, s.box_lo, s.box_hi, t0, t1))
            candidates.push_back({&s, t0, t1});
    }
    for (std::size_t k = 0; k < ts.size(); ++k) {
        out[k] = 0.0;
        if (candidates.empty()) continue;
        const Vec3 x = ray.at(ts[k]);
        for (const auto& c : candidates) {
            if (ts[k] < c.t0 || ts[k] > c.t1) continue;
            if (inside_segment(*c.seg, x)) {
                out[k] = mu_;
                break;
            }
        }
    }
}

// --- voxel grids ---------------------------------------------------------------------

namespace {
constexpr char kVoxelMagic[8] = {'N', 'C', 'A', 'V', 'O', 'X', '0', '1'};
}

float& VoxelGrid4D::at(int x, int y, int z, int phase) {
    return values[((static_cast<std::size_t>(phase) * nz + z) * ny + y) * nx + x];
}

float VoxelGrid4D::at(int x, int y, int z, int phase) const {
    return values[((static_cast<std::size_t>(phase) * nz + z) * ny + y) * nx + x];
}

Vec3 VoxelGrid4D::voxel_center(int x, int y, int z) const {
    return {(x - 0.5 * (nx - 1)) * spacing, (y - 0.5 * (ny - 1)) * spacing,
            (z - 0.5 * (nz - 1)) * spacing};
}

void save_voxel_grid(const VoxelGrid4D& grid, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write voxel grid " + path.string());
    os.write(kVoxelMagic, sizeof(kVoxelMagic));
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(grid.nx));
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(grid.ny));
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(grid.nz));
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(grid.phases));
    binio::write<double>(os, grid.spacing);
    os.write(reinterpret_cast<const char*>(grid.values.data()),
             static_cast<std::streamsize>(grid.values.size() * sizeof(float)));
}

VoxelGrid4D load_voxel_grid(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open voxel grid " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kVoxelMagic))
        throw FormatError("bad voxel grid header in " + path.string());
    VoxelGrid4D g;
    g.nx = static_cast<int>(binio::read<std::uint32_t>(is, "voxel grid dims"));
    g.ny = static_cast<int>(binio::read<std::uint32_t>(is, "voxel grid dims"));
    g.nz = static_cast<int>(binio::read<std::uint32_t>(is, "voxel grid dims"));
    g.phases = static_cast<int>(binio::read<std::uint32_t>(is, "voxel grid phases"));
    g.spacing = binio::read<double>(is, "voxel grid spacing");
    if (g.nx < 1 || g.ny < 1 || g.nz < 1 || g.phases < 1 || !(g.spacing > 0.0))
        throw FormatError("invalid voxel grid header in " + path.string());
    const std::size_t count =
        static_cast<std::size_t>(g.nx) * g.ny * g.nz * static_cast<std::size_t>(g.phases);
    g.values.resize(count);
    if (!is.read(reinterpret_cast<char*>(g.values.data()),
                 static_cast<std::streamsize>(count * sizeof(float))))
        throw FormatError("voxel payload shorter than its header dimensions in " + path.string());
    if (is.peek() != std::char_traits<char>::eof())
        throw FormatError("voxel payload longer than its header dimensions in " + path.string());
    for (float v : g.values)
        if (!(v >= 0.0f)) throw FormatError("negative or non-finite voxel in " + path.string());
    return g;
}

double sample_voxel_grid(const VoxelGrid4D& grid, const Vec3& x, int phase) {
    const int p = wrap_phase(phase, grid.phases) - 1;
    const std::array<int, 3> n = {grid.nx, grid.ny, grid.nz};
    std::array<int, 3> i0{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
        const double c = x[a] / grid.spacing + 0.5 * (n[a] - 1);
        if (c < 0.0 || c > n[a] - 1) return 0.0;
        if (n[a] == 1) {
            i0[a] = 0;
            f[a] = 0.0;
            continue;
        }
        i0[a] = std::min(static_cast<int>(std::floor(c)), n[a] - 2);
        f[a] = c - i0[a];
    }
    double sum = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) *
                                 (dz ? f[2] : 1 - f[2]);
                if (w == 0.0) continue;
                sum += w * grid.at(std::min(i0[0] + dx, n[0] - 1), std::min(i0[1] + dy, n[1] - 1),
                                   std::min(i0[2] + dz, n[2] - 1), p);
            }
    return sum;
}

// --- phantom ---------------------------------------------------------------------------

PhantomConfig PhantomConfig::from_json(const nlohmann::json& j) {
    PhantomConfig c;
    c.phases = j.value("T", c.phases);
    c.vessel_attenuation = j.value("vessel_attenuation", c.vessel_attenuation);
    c.radius_root = j.value("radius_root", c.radius_root);
    c.radius_tip = j.value("radius_tip", c.radius_tip);
    c.motion_amplitude = j.value("motion_amplitude", c.motion_amplitude);
    c.heart_motion = j.value("heart_motion", c.heart_motion);
    c.seed = j.value("seed", c.seed);
    c.torso_attenuation = j.value("torso_attenuation", c.torso_attenuation);
    c.spine_attenuation = j.value("spine_attenuation", c.spine_attenuation);
    c.heart_attenuation = j.value("heart_attenuation", c.heart_attenuation);
    c.voxel_grid = j.value("voxel_grid", c.voxel_grid);
    if (c.phases < 1) throw ConfigError("phantom.T must be at least 1");
    if (!(c.vessel_attenuation > 0.0)) throw ConfigError("vessel_attenuation must be positive");
    if (!(c.radius_root > 0.0) || !(c.radius_tip > 0.0)) throw ConfigError("radii must be positive");
    if (c.motion_amplitude < 0.0 || c.motion_amplitude > 0.05)
        throw ConfigError("motion_amplitude must lie in [0, 0.05]");
    if (c.torso_attenuation < 0 || c.spine_attenuation < 0 || c.heart_attenuation < 0)
        throw ConfigError("background attenuations must be non-negative");
    return c;
}

nlohmann::json PhantomConfig::to_json() const {
    return {{"T", phases},
            {"vessel_attenuation", vessel_attenuation},
            {"radius_root", radius_root},
            {"radius_tip", radius_tip},
            {"motion_amplitude", motion_amplitude},
            {"heart_motion", heart_motion},
            {"seed", seed},
            {"torso_attenuation", torso_attenuation},
            {"spine_attenuation", spine_attenuation},
            {"heart_attenuation", heart_attenuation},
            {"voxel_grid", voxel_grid}};
}

Ellipsoid default_heart(double mu) { return {Vec3(0.05, 0.0, 0.05), Vec3(0.42, 0.38, 0.36), mu}; }

std::vector<VesselBranch> default_vessel_branches(const PhantomConfig& config,
                                                  const Ellipsoid& heart) {
    // Directions from the heart center; +x patient left, +y cranial, +z anterior.
    struct Spec {
        Vec3 from, to;
        int generation;
    };
    const std::vector<Spec> specs = {
        {{-0.25, 0.80, 0.55}, {0.25, 0.55, 0.80}, 1},    // main stem
        {{0.25, 0.55, 0.80}, {0.10, -0.65, 0.75}, 2},    // anterior descending
        {{0.25, 0.55, 0.80}, {0.90, 0.30, -0.30}, 2},    // circumflex
        {{0.10, -0.65, 0.75}, {-0.15, -0.95, 0.25}, 3},  // distal anterior descending
        {{0.10, -0.65, 0.75}, {0.70, -0.60, 0.40}, 3},   // diagonal
        {{0.90, 0.30, -0.30}, {0.55, -0.45, -0.70}, 3},  // distal circumflex
        {{0.90, 0.30, -0.30}, {0.85, -0.45, 0.25}, 3},   // obtuse marginal
    };
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> jitter(0.0, 0.06);
    auto surface = [&](const Vec3& dir) {
        return Vec3(heart.center + 1.04 * heart.semi_axes.cwiseProduct(dir.normalized()));
    };
    auto radius_at = [&](int level) {
        return config.radius_root * std::pow(config.radius_tip / config.radius_root, level / 3.0);
    };
    std::vector<VesselBranch> out;
    for (const auto& s : specs) {
        VesselBranch b;
        const Vec3 a = s.from.normalized();
        const Vec3 z = s.to.normalized();
        for (int k = 0; k < 4; ++k) {
            Vec3 d = (1.0 - k / 3.0) * a + (k / 3.0) * z;
            if (k == 1 || k == 2) d += Vec3(jitter(rng), jitter(rng), jitter(rng));
            b.control_points[static_cast<std::size_t>(k)] = surface(d);
        }
        b.generation = s.generation;
        b.radius_start = radius_at(s.generation - 1);
        b.radius_end = radius_at(s.generation);
        out.push_back(b);
    }
    return out;
}

Phantom::Phantom(const PhantomConfig& config) : config_(config) {
    heart_ = default_heart(config.heart_attenuation);
    std::vector<Primitive> prims = {
        Ellipsoid{Vec3::Zero(), Vec3(0.95, 0.97, 0.72), config.torso_attenuation},
        Cylinder{Vec3(0.0, 0.0, -0.5), Vec3::UnitY(), 0.1, 0.95, config.spine_attenuation},
    };
    if (config.heart_motion == 0.0) prims.push_back(heart_);
    background_ = BackgroundModel(std::move(prims));

    if (!config.voxel_grid.empty()) {
        auto grid = load_voxel_grid(config.voxel_grid);
        if (grid.phases != config.phases)
            throw FormatError("voxel grid phase count " + std::to_string(grid.phases) +
                              " does not match T = " + std::to_string(config.phases));
        grid_max_ = grid.values.empty() ? 0.0f
                                        : *std::max_element(grid.values.begin(), grid.values.end());
        vessels_ = std::make_unique<VoxelGridField>(std::move(grid));
    } else {
        CardiacDeformation deformation;
        deformation.center = heart_.center;
        deformation.radial = 0.5 * config.motion_amplitude;
        deformation.twist = 0.3 * config.motion_amplitude;
        deformation.longitudinal = 0.2 * config.motion_amplitude;
        deformation.period = config.phases;
        auto tree = std::make_unique<VesselTree>(default_vessel_branches(config, heart_),
                                                 config.vessel_attenuation, deformation);
        tree_ = tree.get();
        vessels_ = std::move(tree);
    }
}

double Phantom::vessel_attenuation() const {
    return tree_ ? tree_->attenuation() : static_cast<double>(grid_max_);
}

double Phantom::heart_density(const Vec3& x, int phase) const {
    if (config_.heart_motion == 0.0) return 0.0;
    const double w = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi *
                                           (wrap_phase(phase, config_.phases) - 1) /
                                           config_.phases));
    Ellipsoid h = heart_;
    h.semi_axes *= 1.0 - config_.heart_motion * w;
    return contains(h, x) ? h.mu : 0.0;
}

double Phantom::density(const Vec3& x, int phase) const {
    return background_.density(x) + vessels_->density(x, phase) + heart_density(x, phase);
}

void Phantom::sample_along(const Ray& ray, std::span<const double> ts, int phase,
                           std::span<double> out) const {
    vessels_->sample_along(ray, ts, phase, out);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const Vec3 x = ray.at(ts[k]);
        out[k] += background_.density(x) + heart_density(x, phase);
    }
}

}  // namespace nerfca
