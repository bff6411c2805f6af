#include "rndlm/graph.hpp"

#include <cmath>
#include <cstdio>

#include "rndlm/errors.hpp"

namespace rndlm {

const char* Graph::op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::GatherRows: return "gather_rows";
        case Op::MatMul: return "matmul";
        case Op::MatMulBT: return "matmul_bt";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::AddRowVec: return "add_rowvec";
        case Op::MulColVec: return "mul_colvec";
        case Op::Col: return "col";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::LeakyRelu: return "leaky_relu";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::LayerNorm: return "layer_norm";
        case Op::PickPerRow: return "pick_per_row";
        case Op::ConcatCols: return "concat_cols";
        case Op::SumAll: return "sum_all";
        case Op::MeanAll: return "mean_all";
        case Op::Scale: return "scale";
        case Op::Affine: return "affine";
        case Op::SqDiffMean: return "sq_diff_mean";
    }
    return "?";
}

void Graph::check_valid(ValueRef v) const {
    if (!v.valid() || v.idx >= static_cast<int>(nodes_.size())) {
        throw Error("invalid graph value reference");
    }
}

const Graph::Node& Graph::node(ValueRef v) const {
    check_valid(v);
    return nodes_[v.idx];
}

Graph::Node& Graph::node_mut(ValueRef v) {
    check_valid(v);
    return nodes_[v.idx];
}

const std::string& Graph::node_name(ValueRef v) const { return node(v).name; }

int Graph::push(Node n) {
    if (n.name.empty()) {
        n.name = std::string(op_name(n.op)) + "#" + std::to_string(nodes_.size());
    }
    for (int in : n.inputs) {
        if (nodes_[in].needs_grad) {
            n.needs_grad = true;
            break;
        }
    }
    if (n.op == Op::Param) n.needs_grad = true;
    if (!n.value.all_finite()) {
        throw NumericError("non-finite value produced at node '" + n.name + "' (" +
                           op_name(n.op) + ")");
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

ValueRef Graph::input(Tensor value, std::string name) {
    Node n;
    n.op = Op::Input;
    n.value = std::move(value);
    n.name = std::move(name);
    return {push(std::move(n))};
}

ValueRef Graph::param(const std::string& name) {
    if (!store_) throw Error("graph has no parameter store");
    // one node per parameter: adjoints from all uses accumulate there
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return {it->second};
    Node n;
    n.op = Op::Param;
    n.value = store_->get(name);
    n.name = name;
    int idx = push(std::move(n));
    param_nodes_.emplace(name, idx);
    return {idx};
}

static void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() > 2) throw ShapeError(std::string(what) + " expects rank <= 2, got " + shape_str(t.shape()));
}

ValueRef Graph::gather_rows(ValueRef table, std::vector<int> ids) {
    const Tensor& tv = node(table).value;
    if (tv.rank() != 2) {
        throw ShapeError("gather_rows table must be rank 2, got " + shape_str(tv.shape()));
    }
    const std::size_t rows = ids.size(), cols = tv.cols();
    Tensor out({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) {
        int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= tv.rows()) {
            throw DataError("gather_rows id " + std::to_string(id) + " out of range [0," +
                            std::to_string(tv.rows()) + ")");
        }
        out.mat().row(i) = tv.mat().row(id);
    }
    Node n;
    n.op = Op::GatherRows;
    n.inputs = {table.idx};
    n.ids = std::move(ids);
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::matmul(ValueRef a, ValueRef b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require_rank2(av, "matmul");
    require_rank2(bv, "matmul");
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul shape mismatch: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
    }
    Tensor out({av.rows(), bv.cols()});
    out.mat().noalias() = av.mat() * bv.mat();
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a.idx, b.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::matmul_bt(ValueRef a, ValueRef b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require_rank2(av, "matmul_bt");
    require_rank2(bv, "matmul_bt");
    if (av.cols() != bv.cols()) {
        throw ShapeError("matmul_bt shape mismatch: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()) + "^T");
    }
    Tensor out({av.rows(), bv.rows()});
    out.mat().noalias() = av.mat() * bv.mat().transpose();
    Node n;
    n.op = Op::MatMulBT;
    n.inputs = {a.idx, b.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + " shape mismatch: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

ValueRef Graph::add(ValueRef a, ValueRef b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require_same_shape(av, bv, "add");
    Tensor out(av.shape());
    out.vec() = av.vec() + bv.vec();
    Node n;
    n.op = Op::Add;
    n.inputs = {a.idx, b.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::sub(ValueRef a, ValueRef b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require_same_shape(av, bv, "sub");
    Tensor out(av.shape());
    out.vec() = av.vec() - bv.vec();
    Node n;
    n.op = Op::Sub;
    n.inputs = {a.idx, b.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::mul(ValueRef a, ValueRef b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require_same_shape(av, bv, "mul");
    Tensor out(av.shape());
    out.vec() = av.vec().cwiseProduct(bv.vec());
    Node n;
    n.op = Op::Mul;
    n.inputs = {a.idx, b.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::add_rowvec(ValueRef x, ValueRef v) {
    const Tensor& xv = node(x).value;
    const Tensor& vv = node(v).value;
    if (vv.numel() != xv.cols()) {
        throw ShapeError("add_rowvec shape mismatch: " + shape_str(xv.shape()) + " + " +
                         shape_str(vv.shape()));
    }
    Tensor out(xv.shape());
    out.mat() = xv.mat().rowwise() + vv.vec().transpose();
    Node n;
    n.op = Op::AddRowVec;
    n.inputs = {x.idx, v.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::mul_colvec(ValueRef x, ValueRef c) {
    const Tensor& xv = node(x).value;
    const Tensor& cv = node(c).value;
    if (cv.numel() != xv.rows()) {
        throw ShapeError("mul_colvec shape mismatch: " + shape_str(xv.shape()) + " * " +
                         shape_str(cv.shape()));
    }
    Tensor out(xv.shape());
    out.mat() = xv.mat().array().colwise() * cv.vec().array();
    Node n;
    n.op = Op::MulColVec;
    n.inputs = {x.idx, c.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::col(ValueRef x, int j) {
    const Tensor& xv = node(x).value;
    if (j < 0 || static_cast<std::size_t>(j) >= xv.cols()) {
        throw ShapeError("col index " + std::to_string(j) + " out of range for " +
                         shape_str(xv.shape()));
    }
    Tensor out({xv.rows(), 1});
    out.mat().col(0) = xv.mat().col(j);
    Node n;
    n.op = Op::Col;
    n.inputs = {x.idx};
    n.ids = {j};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::sigmoid(ValueRef x) {
    const Tensor& xv = node(x).value;
    Tensor out(xv.shape());
    out.vec() = 1.0 / (1.0 + (-xv.vec().array()).exp());
    Node n;
    n.op = Op::Sigmoid;
    n.inputs = {x.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::tanh(ValueRef x) {
    const Tensor& xv = node(x).value;
    Tensor out(xv.shape());
    out.vec() = xv.vec().array().tanh();
    Node n;
    n.op = Op::Tanh;
    n.inputs = {x.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::leaky_relu(ValueRef x, double negative_slope) {
    const Tensor& xv = node(x).value;
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        double v = xv[i];
        out[i] = v > 0.0 ? v : negative_slope * v;
    }
    Node n;
    n.op = Op::LeakyRelu;
    n.inputs = {x.idx};
    n.a = negative_slope;
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::exp(ValueRef x) {
    const Tensor& xv = node(x).value;
    Tensor out(xv.shape());
    out.vec() = xv.vec().array().exp();
    Node n;
    n.op = Op::Exp;
    n.inputs = {x.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::log(ValueRef x) {
    const Tensor& xv = node(x).value;
    Tensor out(xv.shape());
    out.vec() = xv.vec().array().log();
    Node n;
    n.op = Op::Log;
    n.inputs = {x.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::softmax_rows(ValueRef x) {
    const Tensor& xv = node(x).value;
    require_rank2(xv, "softmax_rows");
    Tensor out(xv.shape());
    auto m = xv.mat();
    auto o = out.mat();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        o.row(i) = (m.row(i).array() - mx).exp();
        o.row(i) /= o.row(i).sum();
    }
    Node n;
    n.op = Op::SoftmaxRows;
    n.inputs = {x.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::layer_norm_rows(ValueRef x, ValueRef gain, ValueRef bias, double eps) {
    const Tensor& xv = node(x).value;
    const Tensor& gv = node(gain).value;
    const Tensor& bv = node(bias).value;
    require_rank2(xv, "layer_norm");
    if (gv.numel() != xv.cols() || bv.numel() != xv.cols()) {
        throw ShapeError("layer_norm affine shape mismatch: x " + shape_str(xv.shape()) +
                         ", gain " + shape_str(gv.shape()) + ", bias " + shape_str(bv.shape()));
    }
    const std::size_t cols = xv.cols();
    Tensor out(xv.shape());
    Tensor normalized(xv.shape());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        auto row = xv.mat().row(i);
        const double mean = row.mean();
        const double var = (row.array() - mean).square().sum() / static_cast<double>(cols);
        const double inv_std = 1.0 / std::sqrt(var + eps);
        normalized.mat().row(i) = (row.array() - mean) * inv_std;
        out.mat().row(i) = normalized.mat().row(i).array() * gv.vec().transpose().array() +
                           bv.vec().transpose().array();
    }
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {x.idx, gain.idx, bias.idx};
    n.a = eps;
    n.saved = std::move(normalized);
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::pick_per_row(ValueRef x, std::vector<int> ids) {
    const Tensor& xv = node(x).value;
    require_rank2(xv, "pick_per_row");
    if (ids.size() != xv.rows()) {
        throw ShapeError("pick_per_row needs one index per row: " + std::to_string(ids.size()) +
                         " ids for " + shape_str(xv.shape()));
    }
    Tensor out({xv.rows(), 1});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= xv.cols()) {
            throw DataError("pick_per_row id " + std::to_string(id) + " out of range [0," +
                            std::to_string(xv.cols()) + ")");
        }
        out[i] = xv.at(i, id);
    }
    Node n;
    n.op = Op::PickPerRow;
    n.inputs = {x.idx};
    n.ids = std::move(ids);
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::concat_cols(ValueRef a, ValueRef b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require_rank2(av, "concat_cols");
    require_rank2(bv, "concat_cols");
    if (av.rows() != bv.rows()) {
        throw ShapeError("concat_cols row mismatch: " + shape_str(av.shape()) + " | " +
                         shape_str(bv.shape()));
    }
    Tensor out({av.rows(), av.cols() + bv.cols()});
    out.mat().leftCols(av.cols()) = av.mat();
    out.mat().rightCols(bv.cols()) = bv.mat();
    Node n;
    n.op = Op::ConcatCols;
    n.inputs = {a.idx, b.idx};
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::sum_all(ValueRef x) {
    const Tensor& xv = node(x).value;
    Node n;
    n.op = Op::SumAll;
    n.inputs = {x.idx};
    n.value = Tensor::scalar(xv.vec().sum());
    return {push(std::move(n))};
}

ValueRef Graph::mean_all(ValueRef x) {
    const Tensor& xv = node(x).value;
    if (xv.numel() == 0) throw ShapeError("mean_all of empty tensor");
    Node n;
    n.op = Op::MeanAll;
    n.inputs = {x.idx};
    n.value = Tensor::scalar(xv.vec().mean());
    return {push(std::move(n))};
}

ValueRef Graph::scale(ValueRef x, double c) { return affine(x, c, 0.0); }

ValueRef Graph::affine(ValueRef x, double mul, double add) {
    const Tensor& xv = node(x).value;
    Tensor out(xv.shape());
    out.vec() = xv.vec().array() * mul + add;
    Node n;
    n.op = Op::Affine;
    n.inputs = {x.idx};
    n.a = mul;
    n.b = add;
    n.value = std::move(out);
    return {push(std::move(n))};
}

ValueRef Graph::sq_diff_mean(ValueRef a, ValueRef b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    require_same_shape(av, bv, "sq_diff_mean");
    if (av.numel() == 0) throw ShapeError("sq_diff_mean of empty tensor");
    Node n;
    n.op = Op::SqDiffMean;
    n.inputs = {a.idx, b.idx};
    n.value = Tensor::scalar((av.vec() - bv.vec()).squaredNorm() /
                             static_cast<double>(av.numel()));
    return {push(std::move(n))};
}

const Tensor& Graph::value(ValueRef v) const { return node(v).value; }

const Tensor& Graph::grad(ValueRef v) const {
    const Node& n = node(v);
    if (n.grad.numel() == 0 && n.value.numel() != 0) {
        throw Error("no gradient at node '" + n.name + "'; run backward first");
    }
    return n.grad;
}

double Graph::scalar_value(ValueRef v) const {
    const Tensor& t = node(v).value;
    if (t.numel() != 1) throw ShapeError("expected scalar, got " + shape_str(t.shape()));
    return t[0];
}

void Graph::accum(int idx, const Tensor& g) {
    Node& n = nodes_[idx];
    if (!n.needs_grad) return;
    if (n.grad.numel() == 0) {
        n.grad = Tensor(n.value.shape());
    }
    n.grad.vec() += g.vec();
}

void Graph::backward(ValueRef loss) {
    Node& ln = node_mut(loss);
    if (ln.value.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got " + shape_str(ln.value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    ln.grad = Tensor(ln.value.shape());
    ln.grad[0] = 1.0;
    for (int i = loss.idx; i >= 0; --i) {
        if (nodes_[i].grad.numel() != 0 && nodes_[i].needs_grad) backward_node(i);
    }
}

void Graph::backward_node(int idx) {
    Node& n = nodes_[idx];
    const Tensor& gy = n.grad;
    auto in_val = [&](int k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    auto in_needs = [&](int k) { return nodes_[n.inputs[k]].needs_grad; };

    switch (n.op) {
        case Op::Input:
        case Op::Param:
            break;
        case Op::GatherRows: {
            if (!in_needs(0)) break;
            const Tensor& table = in_val(0);
            Tensor g(table.shape());
            for (std::size_t i = 0; i < n.ids.size(); ++i) {
                g.mat().row(n.ids[i]) += gy.mat().row(i);
            }
            accum(n.inputs[0], g);
            break;
        }
        case Op::MatMul: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            if (in_needs(0)) {
                Tensor ga(a.shape());
                ga.mat().noalias() = gy.mat() * b.mat().transpose();
                accum(n.inputs[0], ga);
            }
            if (in_needs(1)) {
                Tensor gb(b.shape());
                gb.mat().noalias() = a.mat().transpose() * gy.mat();
                accum(n.inputs[1], gb);
            }
            break;
        }
        case Op::MatMulBT: {
            // y = a * b^T
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            if (in_needs(0)) {
                Tensor ga(a.shape());
                ga.mat().noalias() = gy.mat() * b.mat();
                accum(n.inputs[0], ga);
            }
            if (in_needs(1)) {
                Tensor gb(b.shape());
                gb.mat().noalias() = gy.mat().transpose() * a.mat();
                accum(n.inputs[1], gb);
            }
            break;
        }
        case Op::Add: {
            if (in_needs(0)) accum(n.inputs[0], gy);
            if (in_needs(1)) accum(n.inputs[1], gy);
            break;
        }
        case Op::Sub: {
            if (in_needs(0)) accum(n.inputs[0], gy);
            if (in_needs(1)) {
                Tensor g(gy.shape());
                g.vec() = -gy.vec();
                accum(n.inputs[1], g);
            }
            break;
        }
        case Op::Mul: {
            if (in_needs(0)) {
                Tensor g(gy.shape());
                g.vec() = gy.vec().cwiseProduct(in_val(1).vec());
                accum(n.inputs[0], g);
            }
            if (in_needs(1)) {
                Tensor g(gy.shape());
                g.vec() = gy.vec().cwiseProduct(in_val(0).vec());
                accum(n.inputs[1], g);
            }
            break;
        }
        case Op::AddRowVec: {
            if (in_needs(0)) accum(n.inputs[0], gy);
            if (in_needs(1)) {
                const Tensor& v = in_val(1);
                Tensor g(v.shape());
                g.vec() = gy.mat().colwise().sum().transpose();
                accum(n.inputs[1], g);
            }
            break;
        }
        case Op::MulColVec: {
            const Tensor& x = in_val(0);
            const Tensor& c = in_val(1);
            if (in_needs(0)) {
                Tensor g(x.shape());
                g.mat() = gy.mat().array().colwise() * c.vec().array();
                accum(n.inputs[0], g);
            }
            if (in_needs(1)) {
                Tensor g(c.shape());
                g.vec() = (gy.mat().array() * x.mat().array()).rowwise().sum();
                accum(n.inputs[1], g);
            }
            break;
        }
        case Op::Col: {
            if (!in_needs(0)) break;
            const Tensor& x = in_val(0);
            Tensor g(x.shape());
            g.mat().col(n.ids[0]) = gy.mat().col(0);
            accum(n.inputs[0], g);
            break;
        }
        case Op::Sigmoid: {
            if (!in_needs(0)) break;
            Tensor g(gy.shape());
            g.vec() = gy.vec().array() * n.value.vec().array() *
                      (1.0 - n.value.vec().array());
            accum(n.inputs[0], g);
            break;
        }
        case Op::Tanh: {
            if (!in_needs(0)) break;
            Tensor g(gy.shape());
            g.vec() = gy.vec().array() * (1.0 - n.value.vec().array().square());
            accum(n.inputs[0], g);
            break;
        }
        case Op::LeakyRelu: {
            if (!in_needs(0)) break;
            const Tensor& x = in_val(0);
            Tensor g(gy.shape());
            for (std::size_t i = 0; i < x.numel(); ++i) {
                g[i] = gy[i] * (x[i] > 0.0 ? 1.0 : n.a);
            }
            accum(n.inputs[0], g);
            break;
        }
        case Op::Exp: {
            if (!in_needs(0)) break;
            Tensor g(gy.shape());
            g.vec() = gy.vec().cwiseProduct(n.value.vec());
            accum(n.inputs[0], g);
            break;
        }
        case Op::Log: {
            if (!in_needs(0)) break;
            Tensor g(gy.shape());
            g.vec() = gy.vec().cwiseQuotient(in_val(0).vec());
            accum(n.inputs[0], g);
            break;
        }
        case Op::SoftmaxRows: {
            if (!in_needs(0)) break;
            Tensor g(gy.shape());
            auto y = n.value.mat();
            auto dy = gy.mat();
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                const double dot = dy.row(i).dot(y.row(i));
                g.mat().row(i) = y.row(i).array() * (dy.row(i).array() - dot);
            }
            accum(n.inputs[0], g);
            break;
        }
        case Op::LayerNorm: {
            const Tensor& x = in_val(0);
            const Tensor& gain = in_val(1);
            const std::size_t cols = x.cols();
            if (in_needs(1)) {
                Tensor gg(gain.shape());
                gg.vec() = (gy.mat().array() * n.saved.mat().array())
                               .colwise().sum().transpose();
                accum(n.inputs[1], gg);
            }
            if (in_needs(2)) {
                Tensor gb(in_val(2).shape());
                gb.vec() = gy.mat().colwise().sum().transpose();
                accum(n.inputs[2], gb);
            }
            if (in_needs(0)) {
                Tensor gx(x.shape());
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    auto row = x.mat().row(i);
                    const double mean = row.mean();
                    const double var = (row.array() - mean).square().sum() /
                                       static_cast<double>(cols);
                    const double inv_std = 1.0 / std::sqrt(var + n.a);
                    Eigen::RowVectorXd dxhat =
                        gy.mat().row(i).array() * gain.vec().transpose().array();
                    const double m1 = dxhat.mean();
                    const double m2 =
                        (dxhat.array() * n.saved.mat().row(i).array()).mean();
                    gx.mat().row(i) =
                        (dxhat.array() - m1 - n.saved.mat().row(i).array() * m2) * inv_std;
                }
                accum(n.inputs[0], gx);
            }
            break;
        }
        case Op::PickPerRow: {
            if (!in_needs(0)) break;
            const Tensor& x = in_val(0);
            Tensor g(x.shape());
            for (std::size_t i = 0; i < n.ids.size(); ++i) {
                g.at(i, n.ids[i]) += gy[i];
            }
            accum(n.inputs[0], g);
            break;
        }
        case Op::ConcatCols: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            if (in_needs(0)) {
                Tensor g(a.shape());
                g.mat() = gy.mat().leftCols(a.cols());
                accum(n.inputs[0], g);
            }
            if (in_needs(1)) {
                Tensor g(b.shape());
                g.mat() = gy.mat().rightCols(b.cols());
                accum(n.inputs[1], g);
            }
            break;
        }
        case Op::SumAll: {
            if (!in_needs(0)) break;
            Tensor g(in_val(0).shape());
            g.vec().setConstant(gy[0]);
            accum(n.inputs[0], g);
            break;
        }
        case Op::MeanAll: {
            if (!in_needs(0)) break;
            const Tensor& x = in_val(0);
            Tensor g(x.shape());
            g.vec().setConstant(gy[0] / static_cast<double>(x.numel()));
            accum(n.inputs[0], g);
            break;
        }
        case Op::Affine: {
            if (!in_needs(0)) break;
            Tensor g(gy.shape());
            g.vec() = gy.vec() * n.a;
            accum(n.inputs[0], g);
            break;
        }
        case Op::SqDiffMean: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            const double c = 2.0 * gy[0] / static_cast<double>(a.numel());
            if (in_needs(0)) {
                Tensor g(a.shape());
                g.vec() = (a.vec() - b.vec()) * c;
                accum(n.inputs[0], g);
            }
            if (in_needs(1)) {
                Tensor g(b.shape());
                g.vec() = (b.vec() - a.vec()) * c;
                accum(n.inputs[1], g);
            }
            break;
        }
    }
}

std::map<std::string, Tensor> Graph::param_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, idx] : param_nodes_) {
        const Node& n = nodes_[idx];
        if (n.grad.numel() != 0) {
            out.emplace(name, n.grad);
        } else {
            out.emplace(name, Tensor(n.value.shape()));  // zero: param unused by the loss
        }
    }
    return out;
}

GradCheckResult grad_check(ParameterStore& store,
                           const std::function<ValueRef(Graph&)>& build_loss,
                           double step) {
    if (!(step > 0.0)) throw Error("grad_check step must be positive");

    Graph g(&store);
    ValueRef loss = build_loss(g);
    g.backward(loss);
    auto grads = g.param_grads();

    auto loss_at = [&]() {
        Graph fg(&store);
        return fg.scalar_value(build_loss(fg));
    };

    GradCheckResult result;
    for (const auto& [name, grad] : grads) {
        Tensor& p = store.get(name);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double orig = p[i];
            p[i] = orig + step;
            const double up = loss_at();
            p[i] = orig - step;
            const double down = loss_at();
            p[i] = orig;
            const double diff = (up - down) / (2.0 * step);
            const double analytic = grad[i];
            const double dev = std::abs(analytic - diff) /
                               (std::abs(analytic) + std::abs(diff) + step);
            if (dev > result.max_rel_dev) {
                result.max_rel_dev = dev;
                result.worst_param = name;
                result.worst_index = i;
            }
        }
    }
    return result;
}

}  // namespace rndlm
