#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "rndlm/params.hpp"
#include "rndlm/tensor.hpp"

namespace rndlm {

struct ValueRef {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Define-by-run tape with exact reverse-mode adjoints. Forward values are
// computed eagerly at node creation; any non-finite output aborts the step
// with the offending node named. Single-writer per instance; tensors are
// never mutated once produced.
class Graph {
public:
    explicit Graph(ParameterStore* store = nullptr) : store_(store) {}

    // leaves
    ValueRef input(Tensor value, std::string name = "");
    ValueRef param(const std::string& name);  // trainable leaf pulled from the store

    // primitives
    ValueRef gather_rows(ValueRef table, std::vector<int> ids);
    ValueRef matmul(ValueRef a, ValueRef b);
    ValueRef matmul_bt(ValueRef a, ValueRef b);  // a * b^T
    ValueRef add(ValueRef a, ValueRef b);
    ValueRef sub(ValueRef a, ValueRef b);
    ValueRef mul(ValueRef a, ValueRef b);
    ValueRef add_rowvec(ValueRef x, ValueRef v);   // v broadcast over rows
    ValueRef mul_colvec(ValueRef x, ValueRef c);   // row i scaled by c[i]
    ValueRef col(ValueRef x, int j);               // one column as [m,1]
    ValueRef sigmoid(ValueRef x);
    ValueRef tanh(ValueRef x);
    ValueRef leaky_relu(ValueRef x, double negative_slope = 0.01);
    ValueRef exp(ValueRef x);
    ValueRef log(ValueRef x);
    ValueRef softmax_rows(ValueRef x);
    ValueRef layer_norm_rows(ValueRef x, ValueRef gain, ValueRef bias, double eps = 1e-5);
    ValueRef pick_per_row(ValueRef x, std::vector<int> ids);  // x[i, ids[i]] as [m,1]
    ValueRef concat_cols(ValueRef a, ValueRef b);
    ValueRef sum_all(ValueRef x);
    ValueRef mean_all(ValueRef x);
    ValueRef scale(ValueRef x, double c);
    ValueRef affine(ValueRef x, double mul, double add);  // mul*x + add
    ValueRef sq_diff_mean(ValueRef a, ValueRef b);        // mean((a-b)^2)

    const Tensor& value(ValueRef v) const;
    const Tensor& grad(ValueRef v) const;  // valid after backward()
    double scalar_value(ValueRef v) const;

    // Reverse pass from a scalar loss. Adjoints of shared nodes accumulate
    // additively. Rejects non-scalar losses.
    void backward(ValueRef loss);

    // gradients of every parameter referenced by this graph, keyed by name
    std::map<std::string, Tensor> param_grads() const;

    std::size_t node_count() const { return nodes_.size(); }
    const std::string& node_name(ValueRef v) const;

private:
    enum class Op {
        Input, Param, GatherRows, MatMul, MatMulBT, Add, Sub, Mul, AddRowVec,
        MulColVec, Col, Sigmoid, Tanh, LeakyRelu, Exp, Log, SoftmaxRows,
        LayerNorm, PickPerRow, ConcatCols, SumAll, MeanAll, Scale, Affine,
        SqDiffMean
    };

    struct Node {
        Op op;
        std::vector<int> inputs;
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::string name;
        // op-specific payload
        std::vector<int> ids;   // GatherRows, PickPerRow
        double a = 0.0, b = 0.0;  // slope / eps / scale coefficients
        Tensor saved;           // LayerNorm keeps normalized rows
    };

    static const char* op_name(Op op);
    int push(Node n);
    const Node& node(ValueRef v) const;
    Node& node_mut(ValueRef v);
    void check_valid(ValueRef v) const;
    void backward_node(int idx);
    void accum(int idx, const Tensor& g);

    std::vector<Node> nodes_;
    ParameterStore* store_;
    std::unordered_map<std::string, int> param_nodes_;
};

// Max over every parameter element of
//   |analytic - central difference| / (|analytic| + |difference| + step).
struct GradCheckResult {
    double max_rel_dev = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
};

GradCheckResult grad_check(ParameterStore& store,
                           const std::function<ValueRef(Graph&)>& build_loss,
                           double step);

}  // namespace rndlm
