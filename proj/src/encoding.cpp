#include "nerfca/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "nerfca/errors.hpp"

namespace nerfca {

void EncodingConfig::validate() const {
    if (bands < 1) throw ConfigError("encoding needs at least one band (L >= 1)");
    if (!(full_after >= 1.0)) throw ConfigError("encoding window N must be >= 1");
    if (start_band < 0 || start_band > bands) throw ConfigError("start_band must lie in [0, L]");
}

double band_weight(const EncodingConfig& config, int band, double iteration) {
    const double ramp = config.start_band + iteration * config.bands / config.full_after - band;
    return std::clamp(ramp, 0.0, 1.0);
}

Eigen::VectorXd encode(const Vec3& x, double iteration, const EncodingConfig& config) {
    Eigen::MatrixXd out;
    encode_batch(x, iteration, config, out);
    return out.col(0);
}

void encode_batch(const Eigen::MatrixXd& points, double iteration, const EncodingConfig& config,
                  Eigen::MatrixXd& out) {
    config.validate();
    if (points.rows() != 3) throw ArgumentError("encode_batch expects 3 x N points");
    if (iteration < 0) throw ArgumentError("encoding iteration must be non-negative");
    const Eigen::Index n = points.cols();
    out.resize(config.output_dim(), n);
    out.topRows(3) = points;
    std::vector<double> w(static_cast<std::size_t>(config.bands));
    for (int l = 0; l < config.bands; ++l) w[static_cast<std::size_t>(l)] = band_weight(config, l, iteration);
    for (Eigen::Index j = 0; j < n; ++j) {
        for (int l = 0; l < config.bands; ++l) {
            const double wl = w[static_cast<std::size_t>(l)];
            const double freq = std::ldexp(std::numbers::pi, l);
            const Eigen::Index row = 3 + 6 * l;
            for (int a = 0; a < 3; ++a) {
                if (wl == 0.0) {
                    out(row + a, j) = 0.0;
                    out(row + 3 + a, j) = 0.0;
                    continue;
                }
                const double arg = freq * points(a, j);
                out(row + a, j) = wl * std::sin(arg);
                out(row + 3 + a, j) = wl * std::cos(arg);
            }
        }
    }
}

}  // namespace nerfca
