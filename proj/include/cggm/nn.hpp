// SPDX-License-Identifier: Apache-2.0

/// \file nn.hpp
/// Layers and losses composed from the autodiff primitives: affine maps,
/// gelu MLP stacks, a multi-head self-attention block that views a feature
/// vector as a short token sequence, and the two task losses with their
/// closed-form output-side residuals.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cggm/tensor.hpp"

namespace cggm {

enum class TaskKind : std::uint8_t { classification = 0, regression = 1 };

class UnsupportedLossError : public Error {
public:
    using Error::Error;
};

/// y = x.W + b with W: in x out, b: out (broadcast over rows).
struct Affine {
    Tensor weight;
    Tensor bias;

    static Affine init(std::size_t in, std::size_t out, std::uint64_t seed) {
        Affine a;
        a.weight = Tensor::parameter({in, out}, Init::uniform_fan_in, seed);
        a.bias = Tensor::parameter({out}, Init::zeros, 0);
        return a;
    }

    Tensor forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

    std::vector<Tensor> params() const { return {weight, bias}; }
};

/// Stack of affine+gelu layers; the first layer maps in -> hidden.
struct Mlp {
    std::vector<Affine> layers;

    static Mlp init(std::size_t in, std::size_t hidden, std::size_t depth, std::uint64_t seed) {
        Mlp m;
        std::size_t d_in = in;
        for (std::size_t l = 0; l < depth; ++l) {
            m.layers.push_back(Affine::init(d_in, hidden, mix_seed(seed, l)));
            d_in = hidden;
        }
        return m;
    }

    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (const auto& layer : layers) h = gelu(layer.forward(h));
        return h;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (const auto& l : layers)
            for (const auto& p : l.params()) out.push_back(p);
        return out;
    }
};

/// One pre-norm-free multi-head self-attention layer over a token view of a
/// feature vector: a batch x d input is read as `tokens` tokens of width
/// d / tokens, attended per sample, projected, and layer-normalized with a
/// residual connection. Output shape equals input shape.
struct AttentionBlock {
    std::size_t dim = 0;     // full feature width d
    std::size_t tokens = 1;  // tokens per sample
    std::size_t heads = 1;
    Affine wq, wk, wv, wo;

    static AttentionBlock init(std::size_t dim, std::size_t tokens, std::size_t heads,
                               std::uint64_t seed) {
        if (tokens == 0 || dim % tokens != 0)
            throw ShapeError("attention tokens must divide the feature width");
        std::size_t tok_dim = dim / tokens;
        if (heads == 0 || tok_dim % heads != 0)
            throw ShapeError("attention heads must divide the token width");
        AttentionBlock b;
        b.dim = dim;
        b.tokens = tokens;
        b.heads = heads;
        b.wq = Affine::init(tok_dim, tok_dim, mix_seed(seed, 0));
        b.wk = Affine::init(tok_dim, tok_dim, mix_seed(seed, 1));
        b.wv = Affine::init(tok_dim, tok_dim, mix_seed(seed, 2));
        b.wo = Affine::init(tok_dim, tok_dim, mix_seed(seed, 3));
        return b;
    }

    Tensor forward(const Tensor& x) const {
        std::size_t batch = x.shape()[0];
        std::size_t tok_dim = dim / tokens;
        std::size_t head_dim = tok_dim / heads;
        Tensor xt = reshape(x, {batch * tokens, tok_dim});
        Tensor q = wq.forward(xt);
        Tensor k = wk.forward(xt);
        Tensor v = wv.forward(xt);
        auto split_heads = [&](const Tensor& t) {
            // (batch*tokens) x tok_dim -> (batch*heads) x tokens x head_dim
            return reshape(permute_0213(reshape(t, {batch, tokens, heads, head_dim})),
                           {batch * heads, tokens, head_dim});
        };
        Tensor qh = split_heads(q);
        Tensor kh = split_heads(k);
        Tensor vh = split_heads(v);
        double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
        Tensor scores = scale(bmm(qh, kh, /*transpose_b=*/true), inv_scale);
        Tensor attn = softmax_last(scores);
        Tensor ctx = bmm(attn, vh);
        Tensor merged = reshape(permute_0213(reshape(ctx, {batch, heads, tokens, head_dim})),
                                {batch * tokens, tok_dim});
        Tensor projected = wo.forward(merged);
        Tensor normed = layernorm_last(add(xt, projected));
        return reshape(normed, {batch, dim});
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (const auto* a : {&wq, &wk, &wv, &wo})
            for (const auto& p : a->params()) out.push_back(p);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Losses and output-side residuals.
// ---------------------------------------------------------------------------

inline Tensor one_hot(const std::vector<std::size_t>& targets, std::size_t classes) {
    std::vector<double> values(targets.size() * classes, 0.0);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] >= classes)
            throw ShapeError("target " + std::to_string(targets[i]) + " out of range [0, " +
                             std::to_string(classes) + ")");
        values[i * classes + targets[i]] = 1.0;
    }
    return Tensor::from_values({targets.size(), classes}, std::move(values));
}

/// Mean cross-entropy over the batch from raw logits.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
    std::size_t batch = logits.shape()[0];
    std::size_t classes = logits.shape()[1];
    if (targets.size() != batch) throw ShapeError("cross_entropy: target count != batch size");
    Tensor picked = mul(log_softmax_last(logits), one_hot(targets, classes));
    return scale(sum(picked), -1.0 / static_cast<double>(batch));
}

/// Mean absolute error against a batch x 1 prediction column.
inline Tensor l1_loss(const Tensor& pred, const std::vector<double>& targets) {
    if (pred.numel() != targets.size()) throw ShapeError("l1_loss: target count != batch size");
    Tensor t = Tensor::from_values(pred.shape(), std::vector<double>(targets));
    return mean(abs(sub(pred, t)));
}

/// dL/dy for mean cross-entropy: (softmax(y) - onehot) / batch, as a graph
/// expression of the logits.
inline Tensor cross_entropy_residual(const Tensor& logits, const std::vector<std::size_t>& targets) {
    std::size_t batch = logits.shape()[0];
    std::size_t classes = logits.shape()[1];
    if (targets.size() != batch)
        throw ShapeError("cross_entropy_residual: target count != batch size");
    return scale(sub(softmax_last(logits), one_hot(targets, classes)),
                 1.0 / static_cast<double>(batch));
}

/// dL/dy for mean absolute error: sign(y - t) / batch. sign carries no
/// gradient, so the residual is a constant with respect to the predictions.
inline Tensor l1_residual(const Tensor& pred, const std::vector<double>& targets) {
    if (pred.numel() != targets.size())
        throw ShapeError("l1_residual: target count != batch size");
    Tensor t = Tensor::from_values(pred.shape(), std::vector<double>(targets));
    return scale(sign(sub(pred, t)), 1.0 / static_cast<double>(pred.shape()[0]));
}

}  // namespace cggm
