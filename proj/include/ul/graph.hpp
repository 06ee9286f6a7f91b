#pragma once

#include <functional>
#include <vector>

#include "ul/tensor.hpp"

namespace ul {

using Ref = int32_t;

// Reverse-mode tape over Tensor values. A fresh graph is built per training
// step; backward() runs the recorded closures in reverse creation order.
// All arithmetic is double precision, reductions in creation order, so a
// given (params, inputs) pair reproduces bit-identical results.
class Graph {
public:
    Ref input(Tensor value, bool needs_grad = false);

    const Tensor& val(Ref r) const { return nodes_[static_cast<size_t>(r)].value; }
    const Tensor& grad(Ref r) const;
    bool grad_ready(Ref r) const { return !nodes_[static_cast<size_t>(r)].grad.data.empty(); }

    // elementwise
    Ref add(Ref a, Ref b);
    Ref sub(Ref a, Ref b);
    Ref mul(Ref a, Ref b);
    Ref scale(Ref a, double c);
    Ref add_scalar(Ref a, double c);
    Ref silu(Ref a);
    Ref sigmoid(Ref a);
    Ref exp(Ref a);
    Ref log(Ref a);
    Ref softplus(Ref a);

    // linear maps
    Ref matmul(Ref a, Ref b);         // [..., K] x [K, M] -> [..., M]
    Ref add_bias(Ref x, Ref b);       // b [C] broadcast over leading dims
    Ref conv2d(Ref x, Ref w, Ref b);  // x [N,H,W,Ci], w [k,k,Ci,Co], stride 1, same padding

    // layout
    Ref reshape(Ref a, std::vector<int> shape);
    Ref transpose_12(Ref a);  // [N,A,B] -> [N,B,A]
    Ref space_to_depth(Ref a, int p);
    Ref depth_to_space(Ref a, int p);
    Ref upsample_nearest(Ref a, int f);
    Ref concat_last(Ref a, Ref b);
    Ref slice_last(Ref a, int c0, int c1);

    // normalization / conditioning
    Ref layer_norm(Ref x, Ref gamma, Ref beta);  // over last dim
    Ref add_bcast_mid(Ref x, Ref v);             // x [N,...,C], v [N,C]

    // reductions
    Ref sum_per_sample(Ref x);                         // [N, ...] -> [N]
    Ref weighted_mean(Ref x, std::vector<double> w);   // [N] -> [1], sum_n w_n x_n / N
    Ref sum_all(Ref x);

    Ref stop_grad(Ref a);

    void backward(Ref root);

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily during backward
        bool needs_grad = false;
        std::function<void()> back;
    };

    std::vector<Node> nodes_;

    Ref push(Tensor value, bool needs_grad, std::function<void()> back);
    bool wants(Ref r) const { return nodes_[static_cast<size_t>(r)].needs_grad; }
    Tensor& g(Ref r);  // grad buffer, allocated on first touch
};

}  // namespace ul
