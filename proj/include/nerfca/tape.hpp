#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace nerfca::ad {

using Matrix = Eigen::MatrixXd;

enum class ParamRole { StaticNet, DynamicNet, Latent };

const char* role_name(ParamRole role);

/// A learnable array with its accumulated gradient.
struct Parameter {
    std::string name;
    ParamRole role = ParamRole::StaticNet;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, ParamRole r, Matrix v)
        : name(std::move(n)), role(r), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape is alive and not cleared.
class Var {
public:
    Var() = default;

    int id() const { return id_; }
    Tape* tape() const { return tape_; }
    const Matrix& value() const;
    /// Gradient of the last backward() objective with respect to this node.
    const Matrix& grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }

private:
    friend class Tape;
    Var(Tape* t, int id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode record of matrix-valued operations for one scalar objective.
///
/// Nodes are appended in evaluation order, so a single reverse sweep visits each node
/// once. Parameter leaves either add their gradient into Parameter::grad or leave it on
/// the tape for the caller to reduce (used when several tapes run in parallel).
class Tape {
public:
    using Backward = std::function<void(Tape&, int self)>;

    Var constant(Matrix value);
    /// Differentiable leaf not bound to a Parameter.
    Var variable(Matrix value);
    Var parameter(Parameter& p);

    /// Appends a node. `backward` reads grad(self) and calls accumulate() on its inputs.
    Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);

    void backward(Var objective, bool accumulate_into_parameters = true);

    /// Gradients of parameter leaves from the last backward(), in recording order.
    std::vector<std::pair<Parameter*, const Matrix*>> parameter_gradients() const;

    const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Matrix& grad(int id) const;
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }

    template <typename Expr>
    void accumulate(int id, const Expr& contribution) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = contribution;
        else
            n.grad += contribution;
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
    Matrix empty_;
};

// Elementwise and structural operations. Shapes must agree as documented; mismatches throw
// ArgumentError.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
/// a (r x c) plus column vector b (r x 1) broadcast over columns.
Var add_bias(Var a, Var b);
/// a (r x c) scaled row-wise by column vector v (r x 1).
Var mul_colwise(Var a, Var v);
Var div_colwise(Var a, Var v);
Var relu(Var a);
/// log(1 + e^a) in the overflow-safe form.
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
/// x log x with the convention 0 log 0 = 0.
Var xlogx(Var a);
/// Clamps elementwise; gradient passes only where lo <= a <= hi.
Var clamp(Var a, double lo, double hi);
Var sum(Var a);
Var mean(Var a);
/// Sum across columns: (r x c) -> (r x 1).
Var row_sum(Var a);
/// Column-major reinterpretation.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var concat_rows(Var a, Var b);
/// out.col(j) = a.col(index[j]).
Var gather_cols(Var a, std::vector<int> index);

double softplus_value(double x);
double sigmoid_value(double x);

}  // namespace nerfca::ad
