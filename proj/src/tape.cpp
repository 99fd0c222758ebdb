#include "nerfca/tape.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "nerfca/errors.hpp"

namespace nerfca::ad {

const char* role_name(ParamRole role) {
    switch (role) {
        case ParamRole::StaticNet: return "static-net";
        case ParamRole::DynamicNet: return "dynamic-net";
        case ParamRole::Latent: return "latent";
    }
    return "unknown";
}

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

const Matrix& Tape::grad(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    return n.grad.size() > 0 ? n.grad : empty_;
}

Var Tape::constant(Matrix value) {
    nodes_.push_back({std::move(value), {}, {}, nullptr, false});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Matrix value) {
    nodes_.push_back({std::move(value), {}, {}, nullptr, true});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& p) {
    nodes_.push_back({p.value, {}, {}, &p, true});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& v : inputs) {
        if (v.tape() != this) throw UsageError("operands recorded on a different tape");
        needs = needs || requires_grad(v.id());
    }
    nodes_.push_back({std::move(value), {}, needs ? std::move(backward) : Backward{}, nullptr, needs});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var objective, bool accumulate_into_parameters) {
    if (objective.tape() != this) throw UsageError("objective belongs to another tape");
    const auto& v = value(objective.id());
    if (v.rows() != 1 || v.cols() != 1)
        throw UsageError("backward requires a scalar objective, got " + std::to_string(v.rows()) +
                         "x" + std::to_string(v.cols()));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!requires_grad(objective.id())) return;
    nodes_[static_cast<std::size_t>(objective.id())].grad = Matrix::Ones(1, 1);
    for (int id = objective.id(); id >= 0; --id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, id);
    }
    if (!accumulate_into_parameters) return;
    for (auto& n : nodes_)
        if (n.param && n.grad.size() > 0) n.param->grad += n.grad;
}

std::vector<std::pair<Parameter*, const Matrix*>> Tape::parameter_gradients() const {
    std::vector<std::pair<Parameter*, const Matrix*>> out;
    for (const auto& n : nodes_)
        if (n.param && n.grad.size() > 0) out.emplace_back(n.param, &n.grad);
    return out;
}

namespace {

void same_shape(Var a, Var b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ArgumentError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
}

void column_operand(Var a, Var v, const char* op) {
    if (v.cols() != 1 || v.rows() != a.rows())
        throw ArgumentError(std::string(op) + ": expected a column vector with " +
                            std::to_string(a.rows()) + " rows");
}

}  // namespace

double softplus_value(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Var matmul(Var a, Var b) {
    if (a.cols() != b.rows())
        throw ArgumentError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                            std::to_string(b.rows()) + " differ");
    Tape& t = *a.tape();
    Matrix v = a.value() * b.value();
    const int ia = a.id(), ib = b.id();
    return t.record(std::move(v), {a, b}, [ia, ib](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
        if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
    });
}

Var add(Var a, Var b) {
    same_shape(a, b, "add");
    const int ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() + b.value(), {a, b}, [ia, ib](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(self));
        tp.accumulate(ib, tp.grad(self));
    });
}

Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    const int ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() - b.value(), {a, b}, [ia, ib](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(self));
        tp.accumulate(ib, -tp.grad(self));
    });
}

Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    const int ia = a.id(), ib = b.id();
    Matrix v = a.value().cwiseProduct(b.value());
    return a.tape()->record(std::move(v), {a, b}, [ia, ib](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
    });
}

Var div(Var a, Var b) {
    same_shape(a, b, "div");
    const int ia = a.id(), ib = b.id();
    Matrix v = a.value().cwiseQuotient(b.value());
    return a.tape()->record(std::move(v), {a, b}, [ia, ib](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        const Matrix& bv = tp.value(ib);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseQuotient(bv));
        if (tp.requires_grad(ib))
            tp.accumulate(ib, -(g.array() * tp.value(ia).array() / bv.array().square()).matrix());
    });
}

Var scale(Var a, double c) {
    const int ia = a.id();
    return a.tape()->record(a.value() * c, {a},
                            [ia, c](Tape& tp, int self) { tp.accumulate(ia, tp.grad(self) * c); });
}

Var add_scalar(Var a, double c) {
    const int ia = a.id();
    Matrix v = (a.value().array() + c).matrix();
    return a.tape()->record(std::move(v), {a},
                            [ia](Tape& tp, int self) { tp.accumulate(ia, tp.grad(self)); });
}

Var add_bias(Var a, Var b) {
    column_operand(a, b, "add_bias");
    const int ia = a.id(), ib = b.id();
    Matrix v = a.value().colwise() + b.value().col(0);
    return a.tape()->record(std::move(v), {a, b}, [ia, ib](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        tp.accumulate(ia, g);
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.rowwise().sum());
    });
}

Var mul_colwise(Var a, Var v) {
    column_operand(a, v, "mul_colwise");
    const int ia = a.id(), iv = v.id();
    Matrix out = (a.value().array().colwise() * v.value().col(0).array()).matrix();
    return a.tape()->record(std::move(out), {a, v}, [ia, iv](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia))
            tp.accumulate(ia, (g.array().colwise() * tp.value(iv).col(0).array()).matrix());
        if (tp.requires_grad(iv))
            tp.accumulate(iv, g.cwiseProduct(tp.value(ia)).rowwise().sum());
    });
}

Var div_colwise(Var a, Var v) {
    column_operand(a, v, "div_colwise");
    const int ia = a.id(), iv = v.id();
    Matrix out = (a.value().array().colwise() / v.value().col(0).array()).matrix();
    return a.tape()->record(std::move(out), {a, v}, [ia, iv](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        const auto d = tp.value(iv).col(0).array();
        if (tp.requires_grad(ia)) tp.accumulate(ia, (g.array().colwise() / d).matrix());
        if (tp.requires_grad(iv)) {
            Eigen::VectorXd s = g.cwiseProduct(tp.value(ia)).rowwise().sum();
            tp.accumulate(iv, (-s.array() / d.square()).matrix());
        }
    });
}

Var relu(Var a) {
    const int ia = a.id();
    Matrix v = a.value().cwiseMax(0.0);
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        tp.accumulate(ia, (tp.value(ia).array() > 0.0).select(tp.grad(self), 0.0).matrix());
    });
}

Var softplus(Var a) {
    const int ia = a.id();
    Matrix v = a.value().unaryExpr([](double x) { return softplus_value(x); });
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(self).cwiseProduct(
                              tp.value(ia).unaryExpr([](double x) { return sigmoid_value(x); })));
    });
}

Var exp(Var a) {
    const int ia = a.id();
    Matrix v = a.value().array().exp().matrix();
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(self).cwiseProduct(tp.value(self)));
    });
}

Var log(Var a) {
    const int ia = a.id();
    Matrix v = a.value().array().log().matrix();
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(self).cwiseQuotient(tp.value(ia)));
    });
}

Var square(Var a) {
    const int ia = a.id();
    Matrix v = a.value().array().square().matrix();
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        tp.accumulate(ia, 2.0 * tp.grad(self).cwiseProduct(tp.value(ia)));
    });
}

Var xlogx(Var a) {
    const int ia = a.id();
    Matrix v = a.value().unaryExpr([](double x) { return x > 0.0 ? x * std::log(x) : 0.0; });
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        const Matrix slope = tp.value(ia).unaryExpr([](double x) {
            return std::log(std::max(x, std::numeric_limits<double>::min())) + 1.0;
        });
        tp.accumulate(ia, tp.grad(self).cwiseProduct(slope));
    });
}

Var clamp(Var a, double lo, double hi) {
    const int ia = a.id();
    Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
    return a.tape()->record(std::move(v), {a}, [ia, lo, hi](Tape& tp, int self) {
        const auto x = tp.value(ia).array();
        tp.accumulate(ia, ((x >= lo) && (x <= hi)).select(tp.grad(self).array(), 0.0).matrix());
    });
}

Var sum(Var a) {
    const int ia = a.id();
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        const auto& x = tp.value(ia);
        tp.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), tp.grad(self)(0, 0)));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw ArgumentError("mean of an empty matrix");
    return scale(sum(a), 1.0 / n);
}

Var row_sum(Var a) {
    const int ia = a.id();
    Matrix v = a.value().rowwise().sum();
    return a.tape()->record(std::move(v), {a}, [ia](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(self).replicate(1, tp.value(ia).cols()));
    });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != a.value().size()) throw ArgumentError("reshape: element count changes");
    const int ia = a.id();
    const Eigen::Index r0 = a.rows(), c0 = a.cols();
    Matrix v = a.value().reshaped(rows, cols);
    return a.tape()->record(std::move(v), {a}, [ia, r0, c0](Tape& tp, int self) {
        tp.accumulate(ia, tp.grad(self).reshaped(r0, c0));
    });
}

Var concat_rows(Var a, Var b) {
    if (a.cols() != b.cols()) throw ArgumentError("concat_rows: column counts differ");
    const int ia = a.id(), ib = b.id();
    const Eigen::Index ra = a.rows(), rb = b.rows();
    Matrix v(ra + rb, a.cols());
    v.topRows(ra) = a.value();
    v.bottomRows(rb) = b.value();
    return a.tape()->record(std::move(v), {a, b}, [ia, ib, ra, rb](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g.topRows(ra));
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.bottomRows(rb));
    });
}

Var gather_cols(Var a, std::vector<int> index) {
    const auto& av = a.value();
    Matrix v(av.rows(), static_cast<Eigen::Index>(index.size()));
    for (std::size_t j = 0; j < index.size(); ++j) {
        if (index[j] < 0 || index[j] >= av.cols()) throw ArgumentError("gather_cols: index out of range");
        v.col(static_cast<Eigen::Index>(j)) = av.col(index[j]);
    }
    const int ia = a.id();
    return a.tape()->record(std::move(v), {a}, [ia, index = std::move(index)](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        Matrix acc = Matrix::Zero(tp.value(ia).rows(), tp.value(ia).cols());
        for (std::size_t j = 0; j < index.size(); ++j)
            acc.col(index[j]) += g.col(static_cast<Eigen::Index>(j));
        tp.accumulate(ia, acc);
    });
}

}  // namespace nerfca::ad
