#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>

// Central finite differences of a scalar function of a matrix.
inline Eigen::MatrixXd central_difference(const std::function<double(const Eigen::MatrixXd&)>& f,
                                          const Eigen::MatrixXd& at, double h) {
    Eigen::MatrixXd grad(at.rows(), at.cols());
    Eigen::MatrixXd x = at;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double keep = x(k);
        x(k) = keep + h;
        const double up = f(x);
        x(k) = keep - h;
        const double down = f(x);
        x(k) = keep;
        grad(k) = (up - down) / (2.0 * h);
    }
    return grad;
}

// Largest |a - b| / max(|b|, floor) over all entries.
inline double max_relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor) {
    double worst = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k)
        worst = std::max(worst, std::abs(a(k) - b(k)) / std::max(std::abs(b(k)), floor));
    return worst;
}
