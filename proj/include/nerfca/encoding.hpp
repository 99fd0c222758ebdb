#pragma once

#include <Eigen/Dense>

#include "nerfca/geometry.hpp"

namespace nerfca {

/// Coarse-to-fine sinusoidal encoding. Band l carries sin/cos(2^l * pi * x) and opens
/// linearly: w_l(n) = clamp(start_band + n * bands / full_after - l, 0, 1).
struct EncodingConfig {
    int bands = 12;              ///< L
    double full_after = 150000;  ///< N, iterations until every band is open
    int start_band = 1;          ///< bands fully open at n = 0

    void validate() const;
    int output_dim() const { return 3 + 6 * bands; }
};

double band_weight(const EncodingConfig& config, int band, double iteration);

Eigen::VectorXd encode(const Vec3& x, double iteration, const EncodingConfig& config);

/// Encodes each column of `points` (3 x N) into `out` ((3 + 6L) x N).
void encode_batch(const Eigen::MatrixXd& points, double iteration, const EncodingConfig& config,
                  Eigen::MatrixXd& out);

}  // namespace nerfca
