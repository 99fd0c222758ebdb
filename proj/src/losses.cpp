#include "nerfca/losses.hpp"

#include <algorithm>
#include <cmath>

#include "nerfca/errors.hpp"

namespace nerfca {

double WeightSchedule::operator()(double iteration) const {
    if (iteration <= delay) return start;
    if (iteration >= delay + ramp) return end;
    return start + (end - start) * ((iteration - delay) / ramp);
}

void WeightSchedule::validate(const char* name) const {
    if (!(start >= 0.0) || !(end >= 0.0))
        throw ConfigError(std::string(name) + ": schedule values must be non-negative");
    if (delay < 0.0 || !(ramp > 0.0))
        throw ConfigError(std::string(name) + ": delay must be >= 0 and ramp > 0");
}

LossWeights LossSchedules::at(double iteration) const {
    return {factorization(iteration), entropy(iteration), occlusion(iteration)};
}

Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::Full;
    if (s == "dynamic") return Variant::Dynamic;
    if (s == "sparse") return Variant::Sparse;
    throw ConfigError("unknown variant '" + s + "' (expected full, dynamic or sparse)");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::Dynamic: return "dynamic";
        case Variant::Sparse: return "sparse";
    }
    return "full";
}

double photometric(double predicted, double target) {
    const double d = predicted - target;
    return d * d;
}

double photometric(std::span<const double> predicted, std::span<const double> target) {
    if (predicted.size() != target.size() || predicted.empty())
        throw ArgumentError("photometric: batches must be non-empty and of equal size");
    double sum = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) sum += photometric(predicted[i], target[i]);
    return sum / static_cast<double>(predicted.size());
}

double binary_entropy(double x, double clamp_epsilon) {
    const double c = std::clamp(x, clamp_epsilon, 1.0 - clamp_epsilon);
    return -(c * std::log(c) + (1.0 - c) * std::log(1.0 - c));
}

double factorization(const RaySampleSet& samples, const LossGuards& guards) {
    if (samples.size() == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const double sd = samples.sigma_dynamic[k];
        const double w = sd / (sd + samples.sigma_static[k] + guards.ratio_epsilon);
        sum += binary_entropy(w, guards.entropy_clamp);
    }
    return sum / static_cast<double>(samples.size());
}

std::optional<double> dynamic_entropy(const RaySampleSet& samples, bool is_vessel_likely,
                                      double min_density, const LossGuards& guards) {
    if (!is_vessel_likely && accumulated_density(samples, Channel::Dynamic) < min_density)
        return std::nullopt;
    double total = 0.0;
    for (double s : samples.sigma_dynamic) total += s;
    total += guards.density_epsilon;
    double h = 0.0;
    for (double s : samples.sigma_dynamic) {
        const double p = s / total;
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

double dynamic_occlusion(const RaySampleSet& samples, double distance) {
    if (distance < 0.0) throw ArgumentError("occlusion distance must be non-negative");
    double sum = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k)
        if (samples.t[k] - samples.t_near < distance) sum += samples.sigma_dynamic[k] * samples.dt[k];
    return sum;
}

ad::Var photometric_loss(ad::Var predicted, const Eigen::VectorXd& target) {
    if (predicted.cols() != 1 || predicted.rows() != target.size())
        throw ArgumentError("photometric_loss: prediction/target size mismatch");
    ad::Tape& tape = *predicted.tape();
    return ad::mean(ad::square(ad::sub(predicted, tape.constant(target))));
}

ad::Var factorization_loss(ad::Var sigma_static, ad::Var sigma_dynamic, const LossGuards& guards) {
    ad::Var denom = ad::add_scalar(ad::add(sigma_dynamic, sigma_static), guards.ratio_epsilon);
    ad::Var w = ad::clamp(ad::div(sigma_dynamic, denom), guards.entropy_clamp, 1.0 - guards.entropy_clamp);
    ad::Var one_minus = ad::add_scalar(ad::scale(w, -1.0), 1.0);
    ad::Var h = ad::scale(ad::add(ad::xlogx(w), ad::xlogx(one_minus)), -1.0);
    return ad::mean(h);
}

ad::Var entropy_loss(ad::Var sigma_dynamic, const Eigen::VectorXd& dt,
                     const std::vector<bool>& vessel_likely, double min_density,
                     const LossGuards& guards, int& masked) {
    const auto& sd = sigma_dynamic.value();
    const Eigen::Index rays = sd.rows();
    if (dt.size() != rays || static_cast<Eigen::Index>(vessel_likely.size()) != rays)
        throw ArgumentError("entropy_loss: per-ray inputs do not match the batch");
    ad::Tape& tape = *sigma_dynamic.tape();
    Eigen::VectorXd active(rays);
    masked = 0;
    for (Eigen::Index r = 0; r < rays; ++r) {
        const double acc = sd.row(r).sum() * dt(r);
        const bool keep = vessel_likely[static_cast<std::size_t>(r)] || acc >= min_density;
        active(r) = keep ? 1.0 : 0.0;
        if (!keep) ++masked;
    }
    ad::Var total = ad::add_scalar(ad::row_sum(sigma_dynamic), guards.density_epsilon);
    ad::Var p = ad::div_colwise(sigma_dynamic, total);
    ad::Var per_ray = ad::scale(ad::row_sum(ad::xlogx(p)), -1.0);
    return ad::scale(ad::sum(ad::mul(per_ray, tape.constant(active))), 1.0 / static_cast<double>(rays));
}

ad::Var occlusion_loss(ad::Var sigma_dynamic, const Eigen::MatrixXd& occlusion_weights) {
    ad::Tape& tape = *sigma_dynamic.tape();
    ad::Var per_ray = ad::row_sum(ad::mul(sigma_dynamic, tape.constant(occlusion_weights)));
    return ad::mean(per_ray);
}

ad::Var combine_losses(const LossTerms& terms, const LossWeights& weights, Variant variant) {
    ad::Var total = terms.photometric;
    if (variant == Variant::Sparse) return total;
    if (terms.factorization) total = ad::add(total, ad::scale(*terms.factorization, weights.lambda_b));
    if (terms.entropy) total = ad::add(total, ad::scale(*terms.entropy, weights.lambda_e));
    if (variant == Variant::Full && terms.occlusion)
        total = ad::add(total, ad::scale(*terms.occlusion, weights.lambda_o));
    return total;
}

}  // namespace nerfca
