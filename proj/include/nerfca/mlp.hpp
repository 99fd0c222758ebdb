#pragma once

#include <random>
#include <string>
#include <vector>

#include "nerfca/tape.hpp"

namespace nerfca {

struct MlpShape {
    int input_dim = 3;
    int hidden_layers = 4;
    int width = 128;
};

/// Fully connected field network: ReLU hidden layers and a Softplus attenuation output.
/// Inputs are column batches (input_dim x N); the output is 1 x N.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::string name, ad::ParamRole role, MlpShape shape, std::mt19937_64& rng);

    ad::Var forward(ad::Tape& tape, ad::Var input);
    Eigen::RowVectorXd evaluate(const ad::Matrix& input) const;

    const MlpShape& shape() const { return shape_; }
    /// Sets the bias of the output unit; softplus(bias) is the field value far from any signal.
    void set_output_bias(double bias) { biases_.back().value.setConstant(bias); }
    std::vector<ad::Parameter*> parameters();
    std::vector<const ad::Parameter*> parameters() const;

private:
    void check_input(Eigen::Index rows) const;

    MlpShape shape_;
    std::vector<ad::Parameter> weights_;
    std::vector<ad::Parameter> biases_;
};

/// One learned latent code per cardiac phase, stored as columns of a dim x T matrix.
class PhaseLatentTable {
public:
    PhaseLatentTable() = default;
    PhaseLatentTable(int dim, int phases, std::mt19937_64& rng);

    int dim() const { return static_cast<int>(codes_.value.rows()); }
    int phases() const { return static_cast<int>(codes_.value.cols()); }
    /// Code for a 1-based phase.
    Eigen::VectorXd code(int phase) const;
    ad::Parameter& parameter() { return codes_; }
    const ad::Parameter& parameter() const { return codes_; }

private:
    ad::Parameter codes_;
};

/// Linear decay from `start` at step 0 to `end` at `decay_steps`, constant afterwards.
struct LearningRateSchedule {
    double start = 1e-3;
    double end = 1e-5;
    double decay_steps = 150000;

    double operator()(double step) const;
};

class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
        : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

    /// One update using the parameters' current gradients. Parameters must be passed in the
    /// same order on every call. Throws NumericalError naming a parameter with a non-finite
    /// gradient before touching any value.
    void step(const std::vector<ad::Parameter*>& params, double learning_rate);

    long long steps_taken() const { return steps_; }
    std::vector<ad::Matrix>& first_moments() { return m_; }
    std::vector<ad::Matrix>& second_moments() { return v_; }
    const std::vector<ad::Matrix>& first_moments() const { return m_; }
    const std::vector<ad::Matrix>& second_moments() const { return v_; }
    void set_steps_taken(long long n) { steps_ = n; }

private:
    double beta1_, beta2_, epsilon_;
    long long steps_ = 0;
    std::vector<ad::Matrix> m_, v_;
};

}  // namespace nerfca
