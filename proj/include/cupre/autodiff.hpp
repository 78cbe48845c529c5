#pragma once

#include <functional>
#include <vector>

#include "cupre/tensor.hpp"

namespace cupre::ad {

using VarId = int;

// Reverse-mode tape over dense double tensors. One tape per forward pass;
// ops append nodes, backward() walks them in reverse. Key-encoder values
// and training targets enter as constants, so they never receive grads.
class Tape {
public:
    VarId put(Tensor t);  // leaf (parameters, inputs, constants)

    const Tensor& val(VarId id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    const Tensor& grad(VarId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    // Seeds d(root)/d(root) = 1 and accumulates grads for every node.
    // root must be a scalar (numel == 1).
    void backward(VarId root);

    std::size_t size() const { return nodes_.size(); }

    // --- elementwise / structural ops ---
    VarId add(VarId a, VarId b);          // same shape
    VarId scale(VarId a, double k);
    VarId add_const(VarId a, double k);
    VarId relu(VarId a);
    VarId softplus(VarId a);              // log(1+e^x), stable

    // --- conv / spatial ops (CHW) ---
    VarId conv2d(VarId x, VarId w, VarId b, int stride, int pad);
    VarId upsample2x(VarId x);            // nearest neighbor, exact 2x
    VarId global_avg_pool(VarId x);       // [C,H,W] -> [C]

    // --- dense ops (vectors) ---
    VarId linear(VarId x, VarId w, VarId b);   // w: [out,in], x: [in]
    VarId l2_normalize(VarId x, double eps);   // x / (||x|| + eps)

    // dot of x with each row of a constant matrix -> vector [rows]
    VarId dots_with_consts(VarId x, const std::vector<std::vector<double>>& rows);

    // -x[0] + logsumexp(x) over a vector; the InfoNCE shape with the
    // positive logit in slot 0.
    VarId nll_first(VarId logits);

    // logsumexp over slots [1..n) only (denominator without the positive).
    VarId nll_first_strict(VarId logits);

    // --- dense loss reductions ---
    // Softmax cross-entropy summed over all H*W locations of [C,H,W]
    // logits; labels are channel indices, row-major over (y, x).
    VarId softmax_ce_sum(VarId logits, std::vector<int> labels);

    // Smooth-L1 (beta = 1) between pred [K,H,W] and a constant target,
    // summed over the K channels of locations where pos != 0.
    VarId smooth_l1_sum(VarId pred, Tensor target, std::vector<unsigned char> pos);

    // Binary cross-entropy with logits summed over M*M patches gathered at
    // (ys[i], xs[i]) from a [M*M,H,W] map; targets[i] has M*M entries.
    VarId bce_patches_sum(VarId logits, std::vector<int> ys, std::vector<int> xs,
                          std::vector<std::vector<double>> targets);

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&, VarId)> back;  // null for leaves
    };

    VarId push(Tensor val, std::function<void(Tape&, VarId)> back);
    Tensor& grad_mut(VarId id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    std::vector<Node> nodes_;

    friend struct TapeOps;
};

}  // namespace cupre::ad
