#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "nerfca/geometry.hpp"
#include "nerfca/phantom.hpp"
#include "nerfca/tape.hpp"

namespace nerfca {

/// Upper bound on the optical depth fed to exp(); keeps intensities strictly positive.
inline constexpr double kMaxOpticalDepth = 80.0;

/// Quadrature nodes along one ray with their per-sample densities.
struct RaySampleSet {
    double t_near = 0.0;
    double t_far = 0.0;
    std::vector<double> t;
    std::vector<double> dt;
    std::vector<double> sigma_static;
    std::vector<double> sigma_dynamic;

    std::size_t size() const { return t.size(); }
};

enum class Channel { Static, Dynamic, Composite };

/// Stratified positions in [t_near, t_far]: the stratum midpoints without jitter, one uniform
/// draw per stratum with jitter. Every sample gets dt = (t_far - t_near) / count.
RaySampleSet sample_ray(const Ray& ray, int count, bool jitter, std::mt19937_64& rng);
RaySampleSet sample_ray(const Ray& ray, int count, bool jitter, std::uint64_t seed);

/// I0 * exp(-sum_k (sigma_s + sigma_d) dt), exponent clamped at kMaxOpticalDepth.
double render_intensity(const RaySampleSet& samples, double i0 = 1.0);

double accumulated_density(const RaySampleSet& samples, Channel channel);

/// Midpoint-quadrature optical depth of a field along a ray.
double project_optical_depth(const DensityField& field, const Ray& ray, int phase, int samples);

/// Differentiable rendering of a ray batch. sigma_static and sigma_dynamic are rays x samples,
/// dt is rays x 1; returns rays x 1 intensities.
ad::Var render_intensity(ad::Var sigma_static, ad::Var sigma_dynamic, ad::Var dt, double i0);

/// Same, for a single density channel (used by the per-phase static baselines).
ad::Var render_intensity(ad::Var sigma, ad::Var dt, double i0);

}  // namespace nerfca
