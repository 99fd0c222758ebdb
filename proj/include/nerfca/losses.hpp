#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "nerfca/renderer.hpp"
#include "nerfca/tape.hpp"

namespace nerfca {

/// Guards against the 0/0 and log(0) singularities of the regularizers.
struct LossGuards {
    double ratio_epsilon = 1e-10;     ///< eps_w, denominator of w = sd / (sd + ss)
    double density_epsilon = 1e-10;   ///< eps_p, denominator of the ray density p
    double entropy_clamp = 1e-7;      ///< eps_h, H_b argument clamp
};

/// Linear ramp: `start` until `delay`, then linear to `end` over `ramp` iterations.
struct WeightSchedule {
    double start = 0.0;
    double end = 0.0;
    double delay = 0.0;
    double ramp = 1.0;

    double operator()(double iteration) const;
    void validate(const char* name) const;
};

enum class Variant { Full, Dynamic, Sparse };

Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);

struct LossWeights {
    double lambda_b = 0.0;
    double lambda_e = 0.0;
    double lambda_o = 0.0;
};

struct LossSchedules {
    WeightSchedule factorization;  ///< lambda_b
    WeightSchedule entropy;        ///< lambda_e
    WeightSchedule occlusion;      ///< lambda_o

    LossWeights at(double iteration) const;
};

/// Per-batch summary of one objective evaluation.
struct LossBundle {
    double photometric = 0.0;     ///< L_p
    double factorization = 0.0;   ///< L_b
    double entropy = 0.0;         ///< L_e
    double occlusion = 0.0;       ///< L_o
    double total = 0.0;           ///< L_f (or the variant's subset)
    LossWeights weights;
    int masked_rays = 0;          ///< rays skipped by the entropy density test
    int rays = 0;
};

// --- scalar forms (single ray / plain arrays) -------------------------------------------------

double photometric(double predicted, double target);
double photometric(std::span<const double> predicted, std::span<const double> target);
double binary_entropy(double x, double clamp_epsilon);
double factorization(const RaySampleSet& samples, const LossGuards& guards = {});
/// Ray entropy of the dynamic channel, or nullopt when the ray is skipped: its accumulated
/// dynamic density is below `min_density` and it is not flagged as likely to hit a vessel.
std::optional<double> dynamic_entropy(const RaySampleSet& samples, bool is_vessel_likely,
                                      double min_density = 1e-4, const LossGuards& guards = {});
/// sum_k sigma_d,k * M(t_k) * dt_k with M = 1 within `distance` of the ray's entry point.
double dynamic_occlusion(const RaySampleSet& samples, double distance);

// --- differentiable batch forms (rays x samples layouts) -------------------------------------

ad::Var photometric_loss(ad::Var predicted, const Eigen::VectorXd& target);
ad::Var factorization_loss(ad::Var sigma_static, ad::Var sigma_dynamic, const LossGuards& guards);
/// Mean over all rays; skipped rays contribute zero and are counted in `masked`.
ad::Var entropy_loss(ad::Var sigma_dynamic, const Eigen::VectorXd& dt,
                     const std::vector<bool>& vessel_likely, double min_density,
                     const LossGuards& guards, int& masked);
/// occlusion_weights holds M(t_k) * dt_k per sample (rays x samples).
ad::Var occlusion_loss(ad::Var sigma_dynamic, const Eigen::MatrixXd& occlusion_weights);

struct LossTerms {
    ad::Var photometric;
    std::optional<ad::Var> factorization;
    std::optional<ad::Var> entropy;
    std::optional<ad::Var> occlusion;
    int masked_rays = 0;
};

/// L_f = L_p + lambda_b L_b + lambda_e L_e + lambda_o L_o; the dynamic variant drops the
/// occlusion term and the sparse variant keeps only L_p.
ad::Var combine_losses(const LossTerms& terms, const LossWeights& weights, Variant variant);

}  // namespace nerfca
