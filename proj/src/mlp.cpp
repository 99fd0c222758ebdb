#include "nerfca/mlp.hpp"

#include <algorithm>
#include <cmath>

#include "nerfca/errors.hpp"

namespace nerfca {

Mlp::Mlp(std::string name, ad::ParamRole role, MlpShape shape, std::mt19937_64& rng)
    : shape_(shape) {
    if (shape.input_dim < 1 || shape.hidden_layers < 0 || shape.width < 1)
        throw ConfigError("invalid MLP shape for " + name);
    int fan_in = shape.input_dim;
    const int layers = shape.hidden_layers + 1;
    for (int l = 0; l < layers; ++l) {
        const int fan_out = l + 1 == layers ? 1 : shape.width;
        const double bound = std::sqrt(1.0 / fan_in);
        std::uniform_real_distribution<double> u(-bound, bound);
        ad::Matrix w(fan_out, fan_in);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
        ad::Matrix b(fan_out, 1);
        for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, 0) = u(rng);
        weights_.emplace_back(name + ".w" + std::to_string(l), role, std::move(w));
        biases_.emplace_back(name + ".b" + std::to_string(l), role, std::move(b));
        fan_in = fan_out;
    }
}

void Mlp::check_input(Eigen::Index rows) const {
    if (rows != shape_.input_dim)
        throw ArgumentError("MLP expects input dimension " + std::to_string(shape_.input_dim) +
                            ", got " + std::to_string(rows));
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var input) {
    check_input(input.rows());
    ad::Var h = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        h = ad::add_bias(ad::matmul(tape.parameter(weights_[l]), h), tape.parameter(biases_[l]));
        h = l + 1 == weights_.size() ? ad::softplus(h) : ad::relu(h);
    }
    return h;
}

Eigen::RowVectorXd Mlp::evaluate(const ad::Matrix& input) const {
    check_input(input.rows());
    ad::Matrix h = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        ad::Matrix z = weights_[l].value * h;
        z.colwise() += biases_[l].value.col(0);
        if (l + 1 == weights_.size())
            h = z.unaryExpr([](double x) { return ad::softplus_value(x); });
        else
            h = z.cwiseMax(0.0);
    }
    return h.row(0);
}

std::vector<ad::Parameter*> Mlp::parameters() {
    std::vector<ad::Parameter*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        out.push_back(&weights_[l]);
        out.push_back(&biases_[l]);
    }
    return out;
}

std::vector<const ad::Parameter*> Mlp::parameters() const {
    std::vector<const ad::Parameter*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        out.push_back(&weights_[l]);
        out.push_back(&biases_[l]);
    }
    return out;
}

PhaseLatentTable::PhaseLatentTable(int dim, int phases, std::mt19937_64& rng) {
    if (dim < 1 || phases < 1) throw ConfigError("latent table needs positive dim and phase count");
    std::normal_distribution<double> n(0.0, 0.01);
    ad::Matrix codes(dim, phases);
    for (Eigen::Index j = 0; j < codes.cols(); ++j)
        for (Eigen::Index i = 0; i < codes.rows(); ++i) codes(i, j) = n(rng);
    codes_ = ad::Parameter("latent.codes", ad::ParamRole::Latent, std::move(codes));
}

Eigen::VectorXd PhaseLatentTable::code(int phase) const {
    if (phase < 1 || phase > phases()) throw ArgumentError("phase out of range for latent table");
    return codes_.value.col(phase - 1);
}

double LearningRateSchedule::operator()(double step) const {
    if (step <= 0.0) return start;
    if (step >= decay_steps) return end;
    return start + (end - start) * (step / decay_steps);
}

void Adam::step(const std::vector<ad::Parameter*>& params, double learning_rate) {
    if (m_.empty()) {
        for (const auto* p : params) {
            m_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (m_.size() != params.size()) throw UsageError("Adam parameter list changed between steps");
    for (const auto* p : params)
        if (!p->grad.allFinite())
            throw NumericalError("non-finite gradient in parameter " + p->name + " (" +
                                 ad::role_name(p->role) + ")");
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * p.grad;
        v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= learning_rate * (m_[k].array() / c1) /
                           ((v_[k].array() / c2).sqrt() + epsilon_);
        if (!p.value.allFinite())
            throw NumericalError("non-finite value after update in parameter " + p.name);
    }
}

}  // namespace nerfca
