#include "nerfca/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "nerfca/errors.hpp"

namespace nerfca {

RaySampleSet sample_ray(const Ray& ray, int count, bool jitter, std::mt19937_64& rng) {
    if (count < 2) throw ArgumentError("a ray needs at least two samples");
    RaySampleSet s;
    s.t_near = ray.t_near;
    s.t_far = ray.t_far;
    const double h = std::max(0.0, ray.t_far - ray.t_near) / count;
    s.t.resize(static_cast<std::size_t>(count));
    s.dt.assign(static_cast<std::size_t>(count), h);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < count; ++k) {
        const double offset = jitter ? u(rng) : 0.5;
        s.t[static_cast<std::size_t>(k)] = ray.t_near + (k + offset) * h;
    }
    s.sigma_static.assign(s.t.size(), 0.0);
    s.sigma_dynamic.assign(s.t.size(), 0.0);
    return s;
}

RaySampleSet sample_ray(const Ray& ray, int count, bool jitter, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_ray(ray, count, jitter, rng);
}

double accumulated_density(const RaySampleSet& samples, Channel channel) {
    double depth = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
        double sigma = 0.0;
        switch (channel) {
            case Channel::Static: sigma = samples.sigma_static[k]; break;
            case Channel::Dynamic: sigma = samples.sigma_dynamic[k]; break;
            case Channel::Composite:
                sigma = samples.sigma_static[k] + samples.sigma_dynamic[k];
                break;
        }
        depth += sigma * samples.dt[k];
    }
    return depth;
}

double render_intensity(const RaySampleSet& samples, double i0) {
    const double depth = accumulated_density(samples, Channel::Composite);
    return i0 * std::exp(-std::min(depth, kMaxOpticalDepth));
}

double project_optical_depth(const DensityField& field, const Ray& ray, int phase, int samples) {
    if (samples < 2) throw ArgumentError("projection needs at least two samples");
    if (ray.empty()) return 0.0;
    const double h = ray.length() / samples;
    std::vector<double> ts(static_cast<std::size_t>(samples));
    for (int k = 0; k < samples; ++k) ts[static_cast<std::size_t>(k)] = ray.t_near + (k + 0.5) * h;
    std::vector<double> sigma(ts.size());
    field.sample_along(ray, ts, phase, sigma);
    double depth = 0.0;
    for (double s : sigma) depth += s;
    return depth * h;
}

ad::Var render_intensity(ad::Var sigma, ad::Var dt, double i0) {
    ad::Var depth = ad::row_sum(ad::mul_colwise(sigma, dt));
    return ad::scale(ad::exp(ad::scale(ad::clamp(depth, 0.0, kMaxOpticalDepth), -1.0)), i0);
}

ad::Var render_intensity(ad::Var sigma_static, ad::Var sigma_dynamic, ad::Var dt, double i0) {
    return render_intensity(ad::add(sigma_static, sigma_dynamic), dt, i0);
}

}  // namespace nerfca
