#pragma once

// Reverse-mode gradient tape over row-major Eigen matrices.
//
// Every op appends a node holding its value and a closure that pushes the
// node's gradient into its inputs. backward() runs the closures in reverse
// creation order, so gradients accumulate in a fixed order.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "rswm/common/errors.hpp"

namespace rswm::model {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
class Tape {
public:
    using M = Matrix<S>;
    using Id = int;

    Id leaf(M value, bool needs_grad) { return push(std::move(value), needs_grad, {}); }

    const M& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    /// Gradient of a node; zero-sized when the node does not need one or backward has not reached it.
    const M& grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    M& grad_mut(Id id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(Id root) {
        auto& r = nodes_[static_cast<std::size_t>(root)];
        require(r.value.size() == 1, "backward: root must be a scalar");
        r.grad = M::Ones(1, 1);
        for (Id i = root; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && n.grad.size() > 0) n.backward();
        }
    }

    /// rows of `table` selected by ids.
    Id gather(Id table, std::span<const int> ids) {
        const M& t = value(table);
        M out(static_cast<Eigen::Index>(ids.size()), t.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            require(ids[i] >= 0 && ids[i] < t.rows(), "gather: index out of range");
            out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
        }
        std::vector<int> idx(ids.begin(), ids.end());
        return unary(table, std::move(out), [this, table, idx](const M& g) {
            M& gt = accum(table);
            for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        });
    }

    /// Contiguous row block.
    Id rows(Id x, Eigen::Index begin, Eigen::Index count) {
        const M& v = value(x);
        require(begin >= 0 && count >= 0 && begin + count <= v.rows(), "rows: block out of range");
        M out = v.middleRows(begin, count);
        return unary(x, std::move(out), [this, x, begin, count](const M& g) { accum(x).middleRows(begin, count) += g; });
    }

    Id matmul(Id a, Id b) {
        require(value(a).cols() == value(b).rows(), "matmul: shape mismatch");
        M out = value(a) * value(b);
        return binary(a, b, std::move(out), [this, a, b](const M& g) {
            if (wants(a)) accum(a).noalias() += g * value(b).transpose();
            if (wants(b)) accum(b).noalias() += value(a).transpose() * g;
        });
    }

    Id add(Id a, Id b) {
        require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add: shape mismatch");
        M out = value(a) + value(b);
        return binary(a, b, std::move(out), [this, a, b](const M& g) {
            if (wants(a)) accum(a) += g;
            if (wants(b)) accum(b) += g;
        });
    }

    /// x + row vector b broadcast over rows.
    Id add_row(Id x, Id b) {
        require(value(b).rows() == 1 && value(b).cols() == value(x).cols(), "add_row: shape mismatch");
        M out = value(x).rowwise() + value(b).row(0);
        return binary(x, b, std::move(out), [this, x, b](const M& g) {
            if (wants(x)) accum(x) += g;
            if (wants(b)) accum(b) += g.colwise().sum();
        });
    }

    Id scale(Id x, S factor) {
        M out = value(x) * factor;
        return unary(x, std::move(out), [this, x, factor](const M& g) { accum(x) += g * factor; });
    }

    /// Row-wise layer normalization with gain and bias rows.
    Id layernorm(Id x, Id gain, Id bias, S eps = S(1e-5)) {
        const M& v = value(x);
        const Eigen::Index n = v.cols();
        require(value(gain).cols() == n && value(bias).cols() == n, "layernorm: shape mismatch");
        M xhat(v.rows(), n);
        std::vector<S> inv_std(static_cast<std::size_t>(v.rows()));
        for (Eigen::Index r = 0; r < v.rows(); ++r) {
            const S mean = v.row(r).mean();
            const S var = (v.row(r).array() - mean).square().mean();
            inv_std[static_cast<std::size_t>(r)] = S(1) / std::sqrt(var + eps);
            xhat.row(r) = (v.row(r).array() - mean) * inv_std[static_cast<std::size_t>(r)];
        }
        M out = (xhat.array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
        const Id id = push(std::move(out), wants(x) || wants(gain) || wants(bias), {});
        node(id).backward = [this, id, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
            const M& g = node(id).grad;
            if (wants(gain)) accum(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
            if (wants(bias)) accum(bias) += g.colwise().sum();
            if (!wants(x)) return;
            M dxhat = g.array().rowwise() * value(gain).row(0).array();
            M& gx = accum(x);
            const S inv_n = S(1) / static_cast<S>(xhat.cols());
            for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                const S m1 = dxhat.row(r).sum() * inv_n;
                const S m2 = dxhat.row(r).dot(xhat.row(r)) * inv_n;
                gx.row(r).array() += inv_std[static_cast<std::size_t>(r)] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
            }
        };
        return id;
    }

    /// GELU, tanh approximation.
    Id gelu(Id x) {
        const M& v = value(x);
        constexpr S c = S(0.7978845608028654); // sqrt(2 / pi)
        M out(v.rows(), v.cols());
        M deriv(v.rows(), v.cols());
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            const S a = v.data()[i];
            const S u = c * (a + S(0.044715) * a * a * a);
            const S t = std::tanh(u);
            out.data()[i] = S(0.5) * a * (S(1) + t);
            deriv.data()[i] = S(0.5) * (S(1) + t) + S(0.5) * a * (S(1) - t * t) * c * (S(1) + S(3 * 0.044715) * a * a);
        }
        return unary(x, std::move(out), [this, x, deriv = std::move(deriv)](const M& g) { accum(x).array() += g.array() * deriv.array(); });
    }

    /// Causal multi-head self-attention on a packed [Q | K | V] input (T x 3d); output T x d.
    Id causal_attention(Id qkv, int heads) {
        const M& v = value(qkv);
        require(v.cols() % (3 * heads) == 0, "attention: width not divisible by heads");
        const Eigen::Index T = v.rows(), d = v.cols() / 3, dh = d / heads;
        const S inv = S(1) / std::sqrt(static_cast<S>(dh));
        M out(T, d);
        std::vector<M> probs(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            const auto Q = v.middleCols(h * dh, dh);
            const auto K = v.middleCols(d + h * dh, dh);
            const auto V = v.middleCols(2 * d + h * dh, dh);
            M P = (Q * K.transpose()) * inv;
            for (Eigen::Index r = 0; r < T; ++r) {
                const S mx = P.row(r).head(r + 1).maxCoeff();
                S sum = 0;
                for (Eigen::Index c = 0; c <= r; ++c) {
                    P(r, c) = std::exp(P(r, c) - mx);
                    sum += P(r, c);
                }
                P.row(r).head(r + 1) /= sum;
                P.row(r).tail(T - r - 1).setZero();
            }
            out.middleCols(h * dh, dh).noalias() = P * V;
            probs[static_cast<std::size_t>(h)] = std::move(P);
        }
        return unary(qkv, std::move(out), [this, qkv, heads, d, dh, inv, probs = std::move(probs)](const M& g) {
            const M& v = value(qkv);
            M& gq = accum(qkv);
            for (int h = 0; h < heads; ++h) {
                const M& P = probs[static_cast<std::size_t>(h)];
                const auto Q = v.middleCols(h * dh, dh);
                const auto K = v.middleCols(d + h * dh, dh);
                const auto V = v.middleCols(2 * d + h * dh, dh);
                const auto dO = g.middleCols(h * dh, dh);
                gq.middleCols(2 * d + h * dh, dh).noalias() += P.transpose() * dO;
                M dP = dO * V.transpose();
                M dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
                dS *= inv;
                gq.middleCols(h * dh, dh).noalias() += dS * K;
                gq.middleCols(d + h * dh, dh).noalias() += dS.transpose() * Q;
            }
        });
    }

    /// Scalar sum_i nll_coef[i] * -log p_i(target[i]) + kl_coef[i] * KL(p_i || q_i),
    /// with p_i = softmax(logits row i) and q_i = exp(ref_logp row i). ref_logp may be empty when all kl_coef are 0.
    Id token_objective(Id logits, std::span<const int> targets, std::span<const S> nll_coef, const M& ref_logp = M(),
                       std::span<const S> kl_coef = {}) {
        const M& z = value(logits);
        const Eigen::Index n = z.rows(), V = z.cols();
        require(static_cast<Eigen::Index>(targets.size()) == n && static_cast<Eigen::Index>(nll_coef.size()) == n,
                "token_objective: one target and coefficient per row");
        const bool use_kl = !kl_coef.empty();
        if (use_kl) {
            require(static_cast<Eigen::Index>(kl_coef.size()) == n, "token_objective: one KL coefficient per row");
            require(ref_logp.rows() == n && ref_logp.cols() == V, "token_objective: reference shape mismatch");
        }
        M dz(n, V);
        S total = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            require(targets[static_cast<std::size_t>(i)] >= 0 && targets[static_cast<std::size_t>(i)] < V, "token_objective: target out of range");
            const S mx = z.row(i).maxCoeff();
            const S lse = mx + std::log((z.row(i).array() - mx).exp().sum());
            const auto logp = z.row(i).array() - lse;
            const auto p = logp.exp();
            const S c = nll_coef[static_cast<std::size_t>(i)];
            total -= c * logp(targets[static_cast<std::size_t>(i)]);
            dz.row(i) = c * p;
            dz(i, targets[static_cast<std::size_t>(i)]) -= c;
            if (use_kl && kl_coef[static_cast<std::size_t>(i)] != S(0)) {
                const S k = kl_coef[static_cast<std::size_t>(i)];
                const auto diff = logp - ref_logp.row(i).array();
                const S kl = (p * diff).sum();
                total += k * kl;
                dz.row(i).array() += k * p * (diff - kl);
            }
        }
        M out(1, 1);
        out(0, 0) = total;
        return unary(logits, std::move(out), [this, logits, dz = std::move(dz)](const M& g) { accum(logits) += g(0, 0) * dz; });
    }

    /// Each row scaled to unit Euclidean norm.
    Id normalize_rows(Id x) {
        const M& v = value(x);
        std::vector<S> norms(static_cast<std::size_t>(v.rows()));
        M out(v.rows(), v.cols());
        for (Eigen::Index r = 0; r < v.rows(); ++r) {
            const S n = v.row(r).norm();
            require(n > S(0), "normalize_rows: zero row");
            norms[static_cast<std::size_t>(r)] = n;
            out.row(r) = v.row(r) / n;
        }
        M y = out;
        return unary(x, std::move(out), [this, x, y = std::move(y), norms = std::move(norms)](const M& g) {
            M& gx = accum(x);
            for (Eigen::Index r = 0; r < y.rows(); ++r)
                gx.row(r) += (g.row(r) - y.row(r) * y.row(r).dot(g.row(r))) / norms[static_cast<std::size_t>(r)];
        });
    }

    /// Symmetric InfoNCE between matched rows of a and b (both N x d): the mean of the
    /// row-wise and column-wise cross-entropies of a b^T / temperature against the diagonal.
    Id contrastive_loss(Id a, Id b, S temperature) {
        const M& A = value(a);
        const M& B = value(b);
        require(A.rows() == B.rows() && A.cols() == B.cols() && A.rows() > 0, "contrastive_loss: shape mismatch");
        const Eigen::Index n = A.rows();
        const M L = (A * B.transpose()) / temperature;
        M pr = L, pc = L;
        S loss = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const S mx = pr.row(i).maxCoeff();
            pr.row(i) = (pr.row(i).array() - mx).exp().matrix();
            const S sum = pr.row(i).sum();
            pr.row(i) /= sum;
            loss -= std::log(pr(i, i));
            const S mc = pc.col(i).maxCoeff();
            pc.col(i) = (pc.col(i).array() - mc).exp().matrix();
            const S sc = pc.col(i).sum();
            pc.col(i) /= sc;
            loss -= std::log(pc(i, i));
        }
        loss /= S(2) * static_cast<S>(n);
        M dL = (pr + pc - S(2) * M::Identity(n, n)) / (S(2) * static_cast<S>(n) * temperature);
        M out(1, 1);
        out(0, 0) = loss;
        return binary(a, b, std::move(out), [this, a, b, dL = std::move(dL)](const M& g) {
            if (wants(a)) accum(a).noalias() += g(0, 0) * (dL * value(b));
            if (wants(b)) accum(b).noalias() += g(0, 0) * (dL.transpose() * value(a));
        });
    }

private:
    struct Node {
        M value;
        M grad;
        std::function<void()> backward;
        bool needs_grad = false;
    };

    Node& node(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
    bool wants(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    M& accum(Id id) {
        Node& n = node(id);
        if (n.grad.size() == 0) n.grad = M::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    Id push(M value, bool needs_grad, std::function<void()> backward) {
        nodes_.push_back({std::move(value), M(), std::move(backward), needs_grad});
        return static_cast<Id>(nodes_.size() - 1);
    }

    template <typename F>
    Id unary(Id x, M out, F&& f) {
        const Id id = push(std::move(out), wants(x), {});
        if (wants(x)) node(id).backward = [this, id, f = std::forward<F>(f)]() { f(node(id).grad); };
        return id;
    }

    template <typename F>
    Id binary(Id a, Id b, M out, F&& f) {
        const bool need = wants(a) || wants(b);
        const Id id = push(std::move(out), need, {});
        if (need) node(id).backward = [this, id, f = std::forward<F>(f)]() { f(node(id).grad); };
        return id;
    }

    std::vector<Node> nodes_;
};

} // namespace rswm::model
