#include <cmath>
#include <random>

#include "doctest.h"
#include "nerfca/errors.hpp"
#include "nerfca/losses.hpp"
#include "oracles.hpp"

using namespace nerfca;

namespace {

RaySampleSet make_samples(std::vector<double> ss, std::vector<double> sd, double length = 1.0) {
    RaySampleSet s;
    s.t_near = 0.0;
    s.t_far = length;
    const double dt = length / static_cast<double>(sd.size());
    for (std::size_t k = 0; k < sd.size(); ++k) {
        s.t.push_back((static_cast<double>(k) + 0.5) * dt);
        s.dt.push_back(dt);
    }
    s.sigma_static = std::move(ss);
    s.sigma_dynamic = std::move(sd);
    return s;
}

}  // namespace

TEST_CASE("photometric examples") {
    CHECK(photometric(0.7, 0.4) == doctest::Approx(0.09).epsilon(1e-12));
    const std::vector<double> a{0.5, 1.0}, b{0.5, 0.0};
    CHECK(photometric(a, b) == doctest::Approx(0.5));
    CHECK_THROWS_AS(photometric(std::vector<double>{}, std::vector<double>{}), ArgumentError);
}

TEST_CASE("factorization extremes") {
    const auto even = make_samples({1, 1, 1, 1}, {1, 1, 1, 1});
    CHECK(factorization(even) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    const auto pure_static = make_samples({2, 3}, {0, 0});
    CHECK(factorization(pure_static) < 2e-6);
    const auto empty = make_samples({0, 0}, {0, 0});
    CHECK(std::isfinite(factorization(empty)));
    CHECK(binary_entropy(0.0, 1e-7) == binary_entropy(1e-7, 1e-7));
}

TEST_CASE("ray entropy") {
    const int s = 64;
    const auto uniform = make_samples(std::vector<double>(s, 0.0), std::vector<double>(s, 1.0));
    CHECK(*dynamic_entropy(uniform, false) == doctest::Approx(std::log(64.0)).epsilon(1e-9));
    std::vector<double> spike(s, 0.0);
    spike[10] = 1.0;
    const auto one = make_samples(std::vector<double>(s, 0.0), spike);
    CHECK(std::abs(*dynamic_entropy(one, false)) < 1e-9);

    // Accumulated density 5e-5 is below the 1e-4 floor.
    const auto faint = make_samples(std::vector<double>(4, 0.0), std::vector<double>(4, 5e-5));
    CHECK_FALSE(dynamic_entropy(faint, false).has_value());
    CHECK(dynamic_entropy(faint, true).has_value());
}

TEST_CASE("occlusion term") {
    const auto s = make_samples(std::vector<double>(10, 0.0), {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 1.0);
    // Samples at 0.05 and 0.15 fall within 0.2 of the entry point.
    CHECK(dynamic_occlusion(s, 0.2) == doctest::Approx((1 + 2) * 0.1));
    CHECK(dynamic_occlusion(s, 0.0) == 0.0);
    CHECK(dynamic_occlusion(s, 2.0) == doctest::Approx(5.5));
    CHECK_THROWS_AS(dynamic_occlusion(s, -1.0), ArgumentError);
}

TEST_CASE("batch forms agree with scalar forms and finite differences") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.05, 2.0);
    const int rays = 3, n = 6;
    Eigen::MatrixXd ss(rays, n), sd(rays, n);
    for (Eigen::Index k = 0; k < ss.size(); ++k) {
        ss(k) = u(rng);
        sd(k) = u(rng);
    }
    Eigen::VectorXd dt = Eigen::VectorXd::Constant(rays, 1.0 / n);
    const LossGuards guards;
    const std::vector<bool> likely{false, true, false};

    auto batch = [&](int term, const Eigen::MatrixXd& s_static, const Eigen::MatrixXd& s_dyn,
                     Eigen::MatrixXd* grad_dyn) {
        ad::Tape tape;
        ad::Var a = tape.variable(s_static), b = tape.variable(s_dyn);
        int masked = 0;
        ad::Var out;
        if (term == 0) out = factorization_loss(a, b, guards);
        if (term == 1) out = entropy_loss(b, dt, likely, 1e-4, guards, masked);
        if (term == 2) out = occlusion_loss(b, Eigen::MatrixXd::Constant(rays, n, 0.1));
        if (term == 3) out = photometric_loss(render_intensity(a, b, tape.constant(dt), 1.0),
                                              Eigen::Vector3d(0.2, 0.5, 0.9));
        if (grad_dyn) {
            tape.backward(out);
            *grad_dyn = b.grad();
        }
        return out.value()(0, 0);
    };

    double fac = 0.0, ent = 0.0;
    for (int r = 0; r < rays; ++r) {
        RaySampleSet rs;
        for (int k = 0; k < n; ++k) {
            rs.sigma_static.push_back(ss(r, k));
            rs.sigma_dynamic.push_back(sd(r, k));
            rs.t.push_back((k + 0.5) / n);
            rs.dt.push_back(1.0 / n);
        }
        rs.t_far = 1.0;
        fac += factorization(rs, guards);
        ent += *dynamic_entropy(rs, likely[static_cast<std::size_t>(r)], 1e-4, guards);
    }
    CHECK(batch(0, ss, sd, nullptr) == doctest::Approx(fac / rays).epsilon(1e-12));
    CHECK(batch(1, ss, sd, nullptr) == doctest::Approx(ent / rays).epsilon(1e-12));

    for (int term = 0; term < 4; ++term) {
        CAPTURE(term);
        Eigen::MatrixXd analytic;
        batch(term, ss, sd, &analytic);
        const Eigen::MatrixXd numeric = central_difference(
            [&](const Eigen::MatrixXd& x) { return batch(term, ss, x, nullptr); }, sd, 1e-6);
        CHECK(max_relative_error(analytic, numeric, 1e-3) < 1e-4);
    }
}

TEST_CASE("weight schedules") {
    const WeightSchedule occ{1e-8, 1e-5, 40000, 110000};
    CHECK(occ(0) == 1e-8);
    CHECK(occ(40000) == 1e-8);
    CHECK(occ(150000) == 1e-5);
    CHECK(occ(95000) == doctest::Approx(0.5 * (1e-8 + 1e-5)).epsilon(1e-12));
    CHECK(occ(1e9) == 1e-5);
    const WeightSchedule ent{1e-12, 1e-10, 0, 150000};
    CHECK(ent(75000) == doctest::Approx(0.5 * (1e-12 + 1e-10)).epsilon(1e-12));
    CHECK_THROWS_AS((WeightSchedule{-1, 0, 0, 1}.validate("x")), ConfigError);
    CHECK_THROWS_AS((WeightSchedule{0, 0, 0, 0}.validate("x")), ConfigError);
}

TEST_CASE("variants select terms") {
    ad::Tape tape;
    LossTerms terms;
    terms.photometric = tape.constant(Eigen::MatrixXd::Constant(1, 1, 1.0));
    terms.factorization = tape.constant(Eigen::MatrixXd::Constant(1, 1, 10.0));
    terms.entropy = tape.constant(Eigen::MatrixXd::Constant(1, 1, 100.0));
    terms.occlusion = tape.constant(Eigen::MatrixXd::Constant(1, 1, 1000.0));
    const LossWeights w{1.0, 1.0, 1.0};
    CHECK(combine_losses(terms, w, Variant::Full).value()(0, 0) == 1111.0);
    CHECK(combine_losses(terms, w, Variant::Dynamic).value()(0, 0) == 111.0);
    CHECK(combine_losses(terms, w, Variant::Sparse).value()(0, 0) == 1.0);
    CHECK(variant_from_string("dynamic") == Variant::Dynamic);
    CHECK_THROWS_AS(variant_from_string("dense"), ConfigError);
}

TEST_CASE("regularizers are bounded") {
    std::mt19937_64 rng(12);
    std::exponential_distribution<double> e(1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> ss(32), sd(32);
        for (auto& v : ss) v = trial % 3 == 0 ? 0.0 : e(rng);
        for (auto& v : sd) v = trial % 5 == 0 ? 0.0 : e(rng);
        const auto s = make_samples(ss, sd);
        const double f = factorization(s);
        CHECK(f >= 0.0);
        CHECK(f <= std::log(2.0) + 1e-12);
        if (auto h = dynamic_entropy(s, true)) {
            CHECK(*h >= -1e-12);
            CHECK(*h <= std::log(32.0) + 1e-9);
        }
        CHECK(dynamic_occlusion(s, 0.2) >= 0.0);
    }
}
