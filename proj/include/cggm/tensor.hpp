// SPDX-License-Identifier: Apache-2.0

/// \file tensor.hpp
/// Reverse-mode automatic differentiation on dense 64-bit tensors.
///
/// The graph is the implicit DAG formed by parent links; every node carries a
/// monotonically increasing creation index, so creation order is a valid
/// topological order and backward visits each node exactly once. Tensors are
/// immutable after creation except for gradient buffers (and leaf values,
/// which an optimizer may update between graph constructions).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cggm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or incompatible tensor shapes (bad dimensions, mismatched operands,
/// out-of-bounds slices, empty concat lists).
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Violations of the engine's usage contract (non-scalar backward, mutating a
/// non-leaf, reading a gradient that was never produced).
class GraphError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid user-facing configuration (specs, model/optimizer settings,
/// experiment files).
class ConfigError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    std::vector<double> grad;  // empty until backward touches this node
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;
    bool requires_grad = false;
    std::uint64_t order = 0;
};

inline std::uint64_t next_order() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

// Debug statistic used by tests to assert "backward exactly once" contracts.
inline std::uint64_t& backward_call_count() {
    thread_local std::uint64_t count = 0;
    return count;
}

inline void ensure_grad(Node& node) {
    if (node.grad.empty()) node.grad.assign(numel(node.shape), 0.0);
}

}  // namespace detail

/// Parameter initialization rules.
enum class Init { uniform_fan_in, zeros, ones };

/// Value-semantic handle to a graph node.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        check_shape(shape);
        if (cggm::numel(shape) != values.size())
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->values = std::make_shared<std::vector<double>>(std::move(values));
        node->requires_grad = requires_grad;
        node->order = detail::next_order();
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v) { return from_values({1}, {v}); }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        check_shape(shape);
        std::size_t n = cggm::numel(shape);
        return from_values(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor ones(Shape shape, bool requires_grad = false) {
        check_shape(shape);
        std::size_t n = cggm::numel(shape);
        return from_values(std::move(shape), std::vector<double>(n, 1.0), requires_grad);
    }

    /// Trainable parameter with a named init rule. uniform_fan_in draws from
    /// U(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in is the product of all
    /// dimensions but the last (the leading dimension for vectors).
    static Tensor parameter(Shape shape, Init init, std::uint64_t seed);

    /// Trainable parameter from explicit values.
    static Tensor parameter(Shape shape, std::vector<double> values) {
        return from_values(std::move(shape), std::move(values), true);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return cggm::numel(node_->shape); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& values() const { return *node_->values; }

    double value() const {
        if (numel() != 1) throw GraphError("value() requires a single-element tensor");
        return (*node_->values)[0];
    }

    bool has_grad() const { return !node_->grad.empty(); }

    const std::vector<double>& grad() const {
        if (node_->grad.empty()) throw GraphError("gradient has not been computed");
        return node_->grad;
    }

    /// Leaf-only mutable access; optimizers update parameter values in place
    /// between graph constructions.
    std::vector<double>& mutable_values() {
        if (!node_->parents.empty() || node_->backprop)
            throw GraphError("only leaf tensors may be mutated");
        return *node_->values;
    }

    /// Mutable gradient buffer. Throws if no gradient is present.
    std::vector<double>& mutable_grad() {
        if (node_->grad.empty()) throw GraphError("gradient has not been computed");
        return node_->grad;
    }

    void clear_grad() { node_->grad.clear(); }

    /// Materializes a zero gradient buffer if none is present (parameters on
    /// paths a loss never touched still satisfy the optimizer's contract).
    void ensure_grad() { detail::ensure_grad(*node_); }

    /// Value-sharing copy with no graph linkage; gradients never flow through.
    Tensor detach() const {
        auto node = std::make_shared<detail::Node>();
        node->shape = node_->shape;
        node->values = node_->values;
        node->requires_grad = false;
        node->order = detail::next_order();
        return Tensor(std::move(node));
    }

    detail::NodePtr node() const { return node_; }

    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("shape must be nonempty");
        for (std::size_t d : shape)
            if (d == 0) throw ShapeError("invalid shape " + shape_str(shape) + ": zero dimension");
    }

private:
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
    detail::NodePtr node_;

    friend Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> backprop);
};

/// Builds a non-leaf node. Parents and the backprop closure are dropped when
/// no parent requires a gradient, so constant subgraphs carry no linkage.
inline Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backprop) {
    Tensor::check_shape(shape);
    if (numel(shape) != values.size())
        throw ShapeError("internal: op output value count does not match shape");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::make_shared<std::vector<double>>(std::move(values));
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    node->requires_grad = rg;
    if (rg) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backprop = std::move(backprop);
    }
    node->order = detail::next_order();
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Deterministic RNG helpers (portable across standard libraries).
// ---------------------------------------------------------------------------

/// splitmix64; used to derive independent sub-seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// xoshiro256** stream with hand-rolled uniform/gaussian mappings so that
/// identical seeds give bit-identical draws on any platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        for (int i = 0; i < 4; ++i) state_[i] = mix_seed(seed, static_cast<std::uint64_t>(i));
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::size_t below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

private:
    std::uint64_t state_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline Tensor Tensor::parameter(Shape shape, Init init, std::uint64_t seed) {
    check_shape(shape);
    std::size_t n = cggm::numel(shape);
    std::vector<double> values(n, 0.0);
    switch (init) {
        case Init::zeros:
            break;
        case Init::ones:
            values.assign(n, 1.0);
            break;
        case Init::uniform_fan_in: {
            std::size_t fan_in = shape.size() >= 2
                                     ? cggm::numel(Shape(shape.begin(), shape.end() - 1))
                                     : shape[0];
            double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Rng rng(seed);
            for (auto& v : values) v = rng.uniform(-bound, bound);
            break;
        }
    }
    return from_values(std::move(shape), std::move(values), true);
}

// ---------------------------------------------------------------------------
// Broadcasting (scalar and trailing-dimension only).
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct BroadcastPlan {
    Shape out_shape;
    std::size_t n;        // output elements
    std::size_t mod_a;    // a index = i % mod_a
    std::size_t mod_b;
};

inline BroadcastPlan broadcast_plan(const Tensor& a, const Tensor& b, const char* op) {
    std::size_t na = a.numel(), nb = b.numel();
    if (a.shape() == b.shape()) return {a.shape(), na, na, nb};
    if (nb == 1) return {a.shape(), na, na, 1};
    if (na == 1) return {b.shape(), nb, 1, nb};
    if (is_suffix(b.shape(), a.shape())) return {a.shape(), na, na, nb};
    if (is_suffix(a.shape(), b.shape())) return {b.shape(), nb, na, nb};
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not broadcast-compatible");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto plan = detail::broadcast_plan(a, b, "add");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(plan.n);
    for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i % plan.mod_a] + bv[i % plan.mod_b];
    return make_op(plan.out_shape, std::move(out), {a, b}, [plan](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            detail::ensure_grad(pa);
            for (std::size_t i = 0; i < plan.n; ++i) pa.grad[i % plan.mod_a] += self.grad[i];
        }
        if (pb.requires_grad) {
            detail::ensure_grad(pb);
            for (std::size_t i = 0; i < plan.n; ++i) pb.grad[i % plan.mod_b] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto plan = detail::broadcast_plan(a, b, "sub");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(plan.n);
    for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i % plan.mod_a] - bv[i % plan.mod_b];
    return make_op(plan.out_shape, std::move(out), {a, b}, [plan](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            detail::ensure_grad(pa);
            for (std::size_t i = 0; i < plan.n; ++i) pa.grad[i % plan.mod_a] += self.grad[i];
        }
        if (pb.requires_grad) {
            detail::ensure_grad(pb);
            for (std::size_t i = 0; i < plan.n; ++i) pb.grad[i % plan.mod_b] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto plan = detail::broadcast_plan(a, b, "mul");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(plan.n);
    for (std::size_t i = 0; i < plan.n; ++i) out[i] = av[i % plan.mod_a] * bv[i % plan.mod_b];
    return make_op(plan.out_shape, std::move(out), {a, b}, [plan](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& av2 = *pa.values;
        const auto& bv2 = *pb.values;
        if (pa.requires_grad) {
            detail::ensure_grad(pa);
            for (std::size_t i = 0; i < plan.n; ++i)
                pa.grad[i % plan.mod_a] += self.grad[i] * bv2[i % plan.mod_b];
        }
        if (pb.requires_grad) {
            detail::ensure_grad(pb);
            for (std::size_t i = 0; i < plan.n; ++i)
                pb.grad[i % plan.mod_b] += self.grad[i] * av2[i % plan.mod_a];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = c * av[i];
    return make_op(a.shape(), std::move(out), {a}, [c](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += c * self.grad[i];
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        const auto& av2 = *pa.values;
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (av2[i] > 0.0) pa.grad[i] += self.grad[i];
    });
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
    return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        const auto& av2 = *pa.values;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double x = av2[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            pa.grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

/// sign(0) = 0; derivative is zero everywhere, so the result carries no graph
/// linkage and backward contributes nothing upstream.
inline Tensor sign(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
    return Tensor::from_values(a.shape(), std::move(out), false);
}

inline Tensor abs(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::fabs(av[i]);
    return make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        const auto& av2 = *pa.values;
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double s = av2[i] > 0.0 ? 1.0 : (av2[i] < 0.0 ? -1.0 : 0.0);
            pa.grad[i] += self.grad[i] * s;
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix operations.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    std::size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            double aval = av[i * k + l];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aval * bv[l * n + j];
        }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& av2 = *pa.values;
        const auto& bv2 = *pb.values;
        if (pa.requires_grad) {
            detail::ensure_grad(pa);
            // dA = g . B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t l = 0; l < k; ++l) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += self.grad[i * n + j] * bv2[l * n + j];
                    pa.grad[i * k + l] += acc;
                }
        }
        if (pb.requires_grad) {
            detail::ensure_grad(pb);
            // dB = A^T . g
            for (std::size_t l = 0; l < k; ++l)
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < m; ++i)
                        acc += av2[i * k + l] * self.grad[i * n + j];
                    pb.grad[l * n + j] += acc;
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a rank-2 tensor");
    std::size_t m = a.shape()[0], n = a.shape()[1];
    const auto& av = a.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return make_op({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pa.grad[i * n + j] += self.grad[j * m + i];
    });
}

/// Batched matmul on rank-3 tensors: [B,m,k] x [B,k,n] -> [B,m,n].
/// With transpose_b, the second operand is [B,n,k] and is transposed per batch.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3)
        throw ShapeError("bmm expects rank-3 operands");
    std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
    std::size_t bb = b.shape()[0];
    std::size_t bk = transpose_b ? b.shape()[2] : b.shape()[1];
    std::size_t n = transpose_b ? b.shape()[1] : b.shape()[2];
    if (bb != batch || bk != k)
        throw ShapeError("bmm shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(batch * m * n, 0.0);
    auto bidx = [n, k, transpose_b](std::size_t t, std::size_t r, std::size_t c) {
        return transpose_b ? t * n * k + c * k + r : t * k * n + r * n + c;
    };
    for (std::size_t t = 0; t < batch; ++t)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t l = 0; l < k; ++l)
                    acc += av[t * m * k + i * k + l] * bv[bidx(t, l, j)];
                out[t * m * n + i * n + j] = acc;
            }
    return make_op({batch, m, n}, std::move(out), {a, b},
                   [batch, m, k, n, transpose_b, bidx](detail::Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const auto& av2 = *pa.values;
                       const auto& bv2 = *pb.values;
                       if (pa.requires_grad) {
                           detail::ensure_grad(pa);
                           for (std::size_t t = 0; t < batch; ++t)
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t l = 0; l < k; ++l) {
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < n; ++j)
                                           acc += self.grad[t * m * n + i * n + j] *
                                                  bv2[bidx(t, l, j)];
                                       pa.grad[t * m * k + i * k + l] += acc;
                                   }
                       }
                       if (pb.requires_grad) {
                           detail::ensure_grad(pb);
                           for (std::size_t t = 0; t < batch; ++t)
                               for (std::size_t l = 0; l < k; ++l)
                                   for (std::size_t j = 0; j < n; ++j) {
                                       double acc = 0.0;
                                       for (std::size_t i = 0; i < m; ++i)
                                           acc += av2[t * m * k + i * k + l] *
                                                  self.grad[t * m * n + i * n + j];
                                       pb.grad[bidx(t, l, j)] += acc;
                                   }
                       }
                   });
}

/// Swaps axes 1 and 2 of a rank-4 tensor: [d0,d1,d2,d3] -> [d0,d2,d1,d3].
inline Tensor permute_0213(const Tensor& a) {
    if (a.rank() != 4) throw ShapeError("permute_0213 expects a rank-4 tensor");
    std::size_t d0 = a.shape()[0], d1 = a.shape()[1], d2 = a.shape()[2], d3 = a.shape()[3];
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i0 = 0; i0 < d0; ++i0)
        for (std::size_t i1 = 0; i1 < d1; ++i1)
            for (std::size_t i2 = 0; i2 < d2; ++i2)
                for (std::size_t i3 = 0; i3 < d3; ++i3)
                    out[((i0 * d2 + i2) * d1 + i1) * d3 + i3] =
                        av[((i0 * d1 + i1) * d2 + i2) * d3 + i3];
    return make_op({d0, d2, d1, d3}, std::move(out), {a}, [d0, d1, d2, d3](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        for (std::size_t i0 = 0; i0 < d0; ++i0)
            for (std::size_t i1 = 0; i1 < d1; ++i1)
                for (std::size_t i2 = 0; i2 < d2; ++i2)
                    for (std::size_t i3 = 0; i3 < d3; ++i3)
                        pa.grad[((i0 * d1 + i1) * d2 + i2) * d3 + i3] +=
                            self.grad[((i0 * d2 + i2) * d1 + i1) * d3 + i3];
    });
}

// ---------------------------------------------------------------------------
// Reductions and shape operations.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    Tensor::check_shape(shape);
    if (numel(shape) != a.numel())
        throw ShapeError("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    // row-major reinterpretation; values are shared, gradient passes through flat
    std::vector<double> out = a.values();
    return make_op(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    });
}

inline Tensor flatten(const Tensor& a) { return reshape(a, {a.numel()}); }

inline Tensor sum(const Tensor& a) {
    const auto& av = a.values();
    double acc = 0.0;
    for (double v : av) acc += v;
    return make_op({1}, {acc}, {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        for (auto& g : pa.grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    const auto& av = a.values();
    double acc = 0.0;
    for (double v : av) acc += v;
    double inv_n = 1.0 / static_cast<double>(av.size());
    return make_op({1}, {acc * inv_n}, {a}, [inv_n](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        for (auto& g : pa.grad) g += self.grad[0] * inv_n;
    });
}

/// Concatenation along the last dimension; all leading dimensions must match.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat requires at least one tensor");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::size_t rows = numel(lead);  // empty lead = rank-1 inputs = one row
    std::size_t total_last = 0;
    std::vector<std::size_t> lasts;
    for (const auto& p : parts) {
        Shape plead(p.shape().begin(), p.shape().end() - 1);
        if (plead != lead)
            throw ShapeError("concat-last-dim: leading dimensions differ");
        lasts.push_back(p.shape().back());
        total_last += p.shape().back();
    }
    Shape out_shape = lead;
    out_shape.push_back(total_last);
    std::vector<double> out(rows * total_last);
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& pv = parts[pi].values();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < lasts[pi]; ++c)
                out[r * total_last + offset + c] = pv[r * lasts[pi] + c];
        offset += lasts[pi];
    }
    return make_op(std::move(out_shape), std::move(out), parts,
                   [rows, total_last, lasts](detail::Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                           auto& pp = *self.parents[pi];
                           if (pp.requires_grad) {
                               detail::ensure_grad(pp);
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < lasts[pi]; ++c)
                                       pp.grad[r * lasts[pi] + c] +=
                                           self.grad[r * total_last + offset + c];
                           }
                           offset += lasts[pi];
                       }
                   });
}

/// Contiguous slice along axis 0.
inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    if (count == 0 || start + count > a.shape()[0])
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of bounds for axis-0 size " + std::to_string(a.shape()[0]));
    std::size_t row = a.numel() / a.shape()[0];
    Shape out_shape = a.shape();
    out_shape[0] = count;
    const auto& av = a.values();
    std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(start * row),
                            av.begin() + static_cast<std::ptrdiff_t>((start + count) * row));
    return make_op(std::move(out_shape), std::move(out), {a}, [start, row](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[start * row + i] += self.grad[i];
    });
}

namespace detail {

// Applies fn to each contiguous last-dimension row.
template <typename Fn>
void for_each_last_row(const Shape& shape, Fn&& fn) {
    std::size_t last = shape.back();
    std::size_t rows = numel(shape) / last;
    for (std::size_t r = 0; r < rows; ++r) fn(r * last, last);
}

}  // namespace detail

inline Tensor softmax_last(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    detail::for_each_last_row(a.shape(), [&](std::size_t base, std::size_t n) {
        double mx = av[base];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, av[base + i]);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            out[base + i] = std::exp(av[base + i] - mx);
            s += out[base + i];
        }
        double inv = 1.0 / s;
        for (std::size_t i = 0; i < n; ++i) out[base + i] *= inv;
    });
    Shape shape = a.shape();
    return make_op(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        const auto& y = *self.values;
        detail::for_each_last_row(self.shape, [&](std::size_t base, std::size_t n) {
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += self.grad[base + i] * y[base + i];
            for (std::size_t i = 0; i < n; ++i)
                pa.grad[base + i] += y[base + i] * (self.grad[base + i] - dot);
        });
    });
}

inline Tensor log_softmax_last(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    detail::for_each_last_row(a.shape(), [&](std::size_t base, std::size_t n) {
        double mx = av[base];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, av[base + i]);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::exp(av[base + i] - mx);
        double lse = mx + std::log(s);
        for (std::size_t i = 0; i < n; ++i) out[base + i] = av[base + i] - lse;
    });
    Shape shape = a.shape();
    return make_op(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        const auto& y = *self.values;  // log-softmax values
        detail::for_each_last_row(self.shape, [&](std::size_t base, std::size_t n) {
            double gsum = 0.0;
            for (std::size_t i = 0; i < n; ++i) gsum += self.grad[base + i];
            for (std::size_t i = 0; i < n; ++i)
                pa.grad[base + i] += self.grad[base + i] - std::exp(y[base + i]) * gsum;
        });
    });
}

/// Normalizes each last-dimension row to zero mean and unit variance
/// (epsilon 1e-5 inside the square root; no learned affine).
inline Tensor layernorm_last(const Tensor& a) {
    constexpr double eps = 1e-5;
    const auto& av = a.values();
    std::vector<double> out(av.size());
    std::size_t last = a.shape().back();
    std::size_t rows = av.size() / last;
    std::vector<double> inv_std(rows);
    detail::for_each_last_row(a.shape(), [&](std::size_t base, std::size_t n) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += av[base + i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = av[base + i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[base / n] = inv;
        for (std::size_t i = 0; i < n; ++i) out[base + i] = (av[base + i] - mu) * inv;
    });
    Shape shape = a.shape();
    return make_op(std::move(shape), std::move(out), {a}, [inv_std](detail::Node& self) {
        auto& pa = *self.parents[0];
        detail::ensure_grad(pa);
        const auto& y = *self.values;  // normalized values
        detail::for_each_last_row(self.shape, [&](std::size_t base, std::size_t n) {
            double inv = inv_std[base / n];
            double gmean = 0.0, gymean = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                gmean += self.grad[base + i];
                gymean += self.grad[base + i] * y[base + i];
            }
            gmean /= static_cast<double>(n);
            gymean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                pa.grad[base + i] += inv * (self.grad[base + i] - gmean - y[base + i] * gymean);
        });
    });
}

/// Cosine similarity of the flattened inputs; each norm is guarded by a
/// 1e-12 epsilon so the value stays finite for zero vectors.
inline Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
    constexpr double eps = 1e-12;
    if (u.numel() != v.numel())
        throw ShapeError("cosine_similarity: element counts differ (" +
                         std::to_string(u.numel()) + " vs " + std::to_string(v.numel()) + ")");
    const auto& uv = u.values();
    const auto& vv = v.values();
    std::size_t n = uv.size();
    double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += uv[i] * vv[i];
        nu2 += uv[i] * uv[i];
        nv2 += vv[i] * vv[i];
    }
    double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
    double denom = (nu + eps) * (nv + eps);
    double s = dot / denom;
    return make_op({1}, {s}, {u, v}, [n, nu, nv, denom, s](detail::Node& self) {
        auto& pu = *self.parents[0];
        auto& pv = *self.parents[1];
        const auto& uv2 = *pu.values;
        const auto& vv2 = *pv.values;
        double g = self.grad[0];
        if (pu.requires_grad) {
            detail::ensure_grad(pu);
            for (std::size_t i = 0; i < n; ++i) {
                double d = vv2[i] / denom;
                if (nu > 0.0) d -= s * uv2[i] / (nu * (nu + eps));
                pu.grad[i] += g * d;
            }
        }
        if (pv.requires_grad) {
            detail::ensure_grad(pv);
            for (std::size_t i = 0; i < n; ++i) {
                double d = uv2[i] / denom;
                if (nv > 0.0) d -= s * vv2[i] / (nv * (nv + eps));
                pv.grad[i] += g * d;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
/// additively across repeated calls until cleared; interior buffers are
/// transient and reset at the start of every sweep.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw GraphError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    ++detail::backward_call_count();
    auto root = loss.node();
    if (!root->requires_grad) {
        detail::ensure_grad(*root);
        root->grad[0] += 1.0;
        return;
    }

    // Reachable grad-requiring nodes, deduplicated; creation order is a
    // topological order, so a descending sort yields children-before-parents.
    std::vector<detail::Node*> nodes;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        detail::Node* cur = stack.back();
        stack.pop_back();
        nodes.push_back(cur);
        for (const auto& p : cur->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->order > b->order; });
    for (detail::Node* nd : nodes)
        if (nd->backprop) nd->grad.assign(numel(nd->shape), 0.0);
    detail::ensure_grad(*root);
    root->grad[0] += 1.0;
    for (detail::Node* nd : nodes) {
        if (nd->backprop) {
            detail::ensure_grad(*nd);
            nd->backprop(*nd);
        }
    }
}

inline std::uint64_t backward_invocations() { return detail::backward_call_count(); }

}  // namespace cggm
