#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// Conventions:
//  - row-major storage, ranks 0..2 in practice (rank 0 = scalar, size 1)
//  - ops are methods on Tape; results carry the tape node id of their output
//  - broadcasting is restricted to scalar operands and a 1-D operand whose
//    length equals the other operand's trailing dimension
//  - tensors that participate in a tape are never mutated in place; every op
//    produces a fresh value
//  - every op checks its output for NaN/Inf and throws instead of propagating

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace clab {

class Tensor {
public:
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    int node = -1; // tape node id, -1 when detached from any tape

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(numel(t.shape), 0.0);
        return t;
    }
    static Tensor full(std::vector<std::size_t> s, double v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) {
        Tensor t;
        t.data = {v};
        return t;
    }
    static Tensor vec(std::vector<double> v) {
        Tensor t;
        t.shape = {v.size()};
        t.data = std::move(v);
        return t;
    }
    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
        if (v.size() != r * c) throw std::invalid_argument("matrix: data size does not match shape");
        Tensor t;
        t.shape = {r, c};
        t.data = std::move(v);
        return t;
    }

    static std::size_t numel(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : shape.back(); }

    double item() const {
        if (size() != 1) throw std::invalid_argument("item: tensor is not a scalar");
        return data[0];
    }
    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::domain_error(std::string(op) + ": produced a non-finite value");
        }
    }
}

// c[m,n] = a[m,k] * b[k,n]
inline void matmul_nn(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,k] = a[m,n] * b[k,n]^T
inline void matmul_nt(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        for (std::size_t j = 0; j < k; ++j) {
            const double* brow = b + j * n;
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
            c[i * k + j] = acc;
        }
    }
}

// c[k,n] = a[m,k]^T * b[m,n]
inline void matmul_tn(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    std::fill(c, c + k * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

enum class Bcast { Same, LeftScalar, RightScalar, LeftRow, RightRow };

inline Bcast broadcast_kind(const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) return Bcast::Same;
    if (a.size() == 1) return Bcast::LeftScalar;
    if (b.size() == 1) return Bcast::RightScalar;
    if (a.rank() == 1 && b.rank() == 2 && a.shape[0] == b.shape[1]) return Bcast::LeftRow;
    if (b.rank() == 1 && a.rank() == 2 && b.shape[0] == a.shape[1]) return Bcast::RightRow;
    throw std::invalid_argument("binary op: shapes are not broadcast-compatible");
}

// Fold a full-shape gradient back onto a broadcast operand's shape.
inline std::vector<double> reduce_broadcast(const std::vector<double>& g,
                                            std::size_t out_cols,
                                            std::size_t operand_size,
                                            bool is_scalar) {
    if (is_scalar) {
        double s = 0.0;
        for (double x : g) s += x;
        return {s};
    }
    std::vector<double> r(operand_size, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) r[i % out_cols] += g[i];
    return r;
}

} // namespace detail

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ---------------------------------------------------------

    Tensor watch(const Tensor& t) {
        Tensor out = t;
        out.requires_grad = true;
        out.node = push_node(out.shape, {}, nullptr, /*leaf=*/true);
        return out;
    }

    std::size_t node_count() const { return nodes_.size(); }

    // ---- binary elementwise ---------------------------------------------

    Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Op::Add); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Op::Sub); }
    Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Op::Mul); }
    Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, Op::Div); }

    // ---- unary ----------------------------------------------------------

    Tensor neg(const Tensor& a) { return scale(a, -1.0); }

    Tensor scale(const Tensor& a, double c) {
        Tensor out = a_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * c;
        detail::check_finite(out.data, "scale");
        if (tracked(a)) {
            const int ia = a.node;
            out.node = push_node(out.shape, {ia}, [ia, c](Tape& t, const std::vector<double>& g) {
                std::vector<double> da(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * c;
                t.accumulate(ia, da);
            });
        }
        return out;
    }

    Tensor relu(const Tensor& a) {
        return unary(a, "relu",
                     [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    }

    Tensor gelu_tanh(const Tensor& a) {
        constexpr double kC = 0.7978845608028654; // sqrt(2/pi)
        constexpr double kA = 0.044715;
        return unary(a, "gelu_tanh",
            [](double x) {
                const double u = kC * (x + kA * x * x * x);
                return 0.5 * x * (1.0 + std::tanh(u));
            },
            [](double x) {
                const double u = kC * (x + kA * x * x * x);
                const double th = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * x * x);
                return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
            });
    }

    Tensor exp_(const Tensor& a) {
        return unary(a, "exp",
                     [](double x) { return std::exp(x); },
                     [](double x) { return std::exp(x); });
    }

    Tensor log_(const Tensor& a) {
        for (double x : a.data) {
            if (x <= 0.0) throw std::domain_error("log: non-positive input");
        }
        return unary(a, "log",
                     [](double x) { return std::log(x); },
                     [](double x) { return 1.0 / x; });
    }

    Tensor sqrt_(const Tensor& a) {
        for (double x : a.data) {
            if (x < 0.0) throw std::domain_error("sqrt: negative input");
        }
        return unary(a, "sqrt",
                     [](double x) { return std::sqrt(x); },
                     [](double x) { return 0.5 / std::sqrt(x); });
    }

    // ---- linear algebra --------------------------------------------------

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: operands must be rank 2");
        if (a.shape[1] != b.shape[0]) {
            throw std::invalid_argument("matmul: inner dimensions disagree (" +
                                        std::to_string(a.shape[1]) + " vs " + std::to_string(b.shape[0]) + ")");
        }
        const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
        Tensor out = Tensor::zeros({m, n});
        detail::matmul_nn(a.data.data(), b.data.data(), out.data.data(), m, k, n);
        detail::check_finite(out.data, "matmul");
        if (tracked(a) || tracked(b)) {
            const int ia = a.node, ib = b.node;
            auto ad = a.data;
            auto bd = b.data;
            out.node = push_node(out.shape, {ia, ib},
                [ia, ib, ad, bd, m, k, n](Tape& t, const std::vector<double>& g) {
                    if (ia >= 0) {
                        std::vector<double> da(m * k);
                        detail::matmul_nt(g.data(), bd.data(), da.data(), m, n, k);
                        t.accumulate(ia, da);
                    }
                    if (ib >= 0) {
                        std::vector<double> db(k * n);
                        detail::matmul_tn(ad.data(), g.data(), db.data(), m, k, n);
                        t.accumulate(ib, db);
                    }
                });
        }
        return out;
    }

    Tensor transpose(const Tensor& a) {
        if (a.rank() != 2) throw std::invalid_argument("transpose: operand must be rank 2");
        const std::size_t m = a.shape[0], n = a.shape[1];
        Tensor out = Tensor::zeros({n, m});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
        if (tracked(a)) {
            const int ia = a.node;
            out.node = push_node(out.shape, {ia}, [ia, m, n](Tape& t, const std::vector<double>& g) {
                std::vector<double> da(m * n);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) da[j * n + i] = g[i * m + j];
                t.accumulate(ia, da);
            });
        }
        return out;
    }

    // ---- reductions / reshaping -----------------------------------------

    Tensor sum_all(const Tensor& a) {
        Tensor out = Tensor::scalar(std::accumulate(a.data.begin(), a.data.end(), 0.0));
        detail::check_finite(out.data, "sum_all");
        if (tracked(a)) {
            const int ia = a.node;
            const std::size_t n = a.size();
            out.node = push_node(out.shape, {ia}, [ia, n](Tape& t, const std::vector<double>& g) {
                t.accumulate(ia, std::vector<double>(n, g[0]));
            });
        }
        return out;
    }

    Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

    Tensor dot(const Tensor& a, const Tensor& b) { return sum_all(mul(a, b)); }

    Tensor row(const Tensor& a, std::size_t i) {
        if (a.rank() != 2) throw std::invalid_argument("row: operand must be rank 2");
        if (i >= a.shape[0]) throw std::out_of_range("row: index out of range");
        const std::size_t n = a.shape[1];
        Tensor out = Tensor::zeros({n});
        std::copy_n(a.data.begin() + static_cast<std::ptrdiff_t>(i * n), n, out.data.begin());
        if (tracked(a)) {
            const int ia = a.node;
            const std::size_t rows = a.shape[0];
            out.node = push_node(out.shape, {ia}, [ia, i, n, rows](Tape& t, const std::vector<double>& g) {
                std::vector<double> da(rows * n, 0.0);
                std::copy(g.begin(), g.end(), da.begin() + static_cast<std::ptrdiff_t>(i * n));
                t.accumulate(ia, da);
            });
        }
        return out;
    }

    Tensor gather(const Tensor& a, const std::vector<std::size_t>& idx) {
        if (a.rank() != 1) throw std::invalid_argument("gather: operand must be rank 1");
        Tensor out = Tensor::zeros({idx.size()});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= a.size()) throw std::out_of_range("gather: index out of range");
            out.data[i] = a.data[idx[i]];
        }
        if (tracked(a)) {
            const int ia = a.node;
            const std::size_t n = a.size();
            out.node = push_node(out.shape, {ia}, [ia, idx, n](Tape& t, const std::vector<double>& g) {
                std::vector<double> da(n, 0.0);
                for (std::size_t i = 0; i < idx.size(); ++i) da[idx[i]] += g[i];
                t.accumulate(ia, da);
            });
        }
        return out;
    }

    Tensor stack_scalars(const std::vector<Tensor>& ts) {
        if (ts.empty()) throw std::invalid_argument("stack_scalars: empty input");
        Tensor out = Tensor::zeros({ts.size()});
        std::vector<int> ids(ts.size(), -1);
        bool any = false;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (ts[i].size() != 1) throw std::invalid_argument("stack_scalars: inputs must be scalars");
            out.data[i] = ts[i].data[0];
            ids[i] = ts[i].node;
            any = any || tracked(ts[i]);
        }
        if (any) {
            out.node = push_node(out.shape, ids, [ids](Tape& t, const std::vector<double>& g) {
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    if (ids[i] >= 0) t.accumulate(ids[i], {g[i]});
                }
            });
        }
        return out;
    }

    // Rows of the embedding table selected by token id.
    Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
        if (table.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
        const std::size_t v = table.shape[0], d = table.shape[1];
        Tensor out = Tensor::zeros({ids.size(), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
                throw std::out_of_range("embedding: token id out of vocabulary");
            std::copy_n(table.data.begin() + ids[i] * static_cast<std::ptrdiff_t>(d), d,
                        out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
        if (tracked(table)) {
            const int it = table.node;
            out.node = push_node(out.shape, {it}, [it, ids, v, d](Tape& t, const std::vector<double>& g) {
                std::vector<double> dt(v * d, 0.0);
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    for (std::size_t j = 0; j < d; ++j)
                        dt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
                }
                t.accumulate(it, dt);
            });
        }
        return out;
    }

    // ---- normalization / losses -----------------------------------------

    // Per-row y = gain * x / sqrt(mean(x^2) + eps).
    Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
        if (x.rank() != 2 || gain.rank() != 1 || gain.shape[0] != x.shape[1])
            throw std::invalid_argument("rms_norm: expected (rows,d) input and (d,) gain");
        const std::size_t rows = x.shape[0], d = x.shape[1];
        Tensor out = Tensor::zeros(x.shape);
        std::vector<double> inv_r(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            double ss = 0.0;
            for (std::size_t j = 0; j < d; ++j) ss += x.at(i, j) * x.at(i, j);
            inv_r[i] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
            for (std::size_t j = 0; j < d; ++j) out.at(i, j) = gain.data[j] * x.at(i, j) * inv_r[i];
        }
        detail::check_finite(out.data, "rms_norm");
        if (tracked(x) || tracked(gain)) {
            const int ix = x.node, ig = gain.node;
            auto xd = x.data;
            auto gd = gain.data;
            out.node = push_node(out.shape, {ix, ig},
                [ix, ig, xd, gd, inv_r, rows, d](Tape& t, const std::vector<double>& g) {
                    if (ix >= 0) {
                        std::vector<double> dx(rows * d);
                        for (std::size_t i = 0; i < rows; ++i) {
                            double s = 0.0;
                            for (std::size_t j = 0; j < d; ++j)
                                s += g[i * d + j] * gd[j] * xd[i * d + j];
                            const double k = s * inv_r[i] * inv_r[i] * inv_r[i] / static_cast<double>(d);
                            for (std::size_t j = 0; j < d; ++j)
                                dx[i * d + j] = g[i * d + j] * gd[j] * inv_r[i] - xd[i * d + j] * k;
                        }
                        t.accumulate(ix, dx);
                    }
                    if (ig >= 0) {
                        std::vector<double> dg(d, 0.0);
                        for (std::size_t i = 0; i < rows; ++i)
                            for (std::size_t j = 0; j < d; ++j)
                                dg[j] += g[i * d + j] * xd[i * d + j] * inv_r[i];
                        t.accumulate(ig, dg);
                    }
                });
        }
        return out;
    }

    Tensor softmax_rows(const Tensor& x) { return softmax_impl(x, /*log_form=*/false); }
    Tensor log_softmax_rows(const Tensor& x) { return softmax_impl(x, /*log_form=*/true); }

    // -log_softmax(logits)[target], logits rank 1.
    Tensor cross_entropy(const Tensor& logits, std::size_t target) {
        if (logits.rank() != 1) throw std::invalid_argument("cross_entropy: logits must be rank 1");
        if (logits.size() < 1) throw std::invalid_argument("cross_entropy: empty logits");
        if (target >= logits.size()) throw std::out_of_range("cross_entropy: target index out of range");
        const std::size_t n = logits.size();
        const double mx = *std::max_element(logits.data.begin(), logits.data.end());
        double z = 0.0;
        for (double v : logits.data) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        Tensor out = Tensor::scalar(lse - logits.data[target]);
        detail::check_finite(out.data, "cross_entropy");
        if (tracked(logits)) {
            const int il = logits.node;
            std::vector<double> p(n);
            for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(logits.data[i] - lse);
            out.node = push_node(out.shape, {il}, [il, p, target](Tape& t, const std::vector<double>& g) {
                std::vector<double> dl(p.size());
                for (std::size_t i = 0; i < p.size(); ++i)
                    dl[i] = g[0] * (p[i] - (i == target ? 1.0 : 0.0));
                t.accumulate(il, dl);
            });
        }
        return out;
    }

    // KL(p || q) for rank-1 simplex vectors. q entries below 1e-12 are
    // clamped up before the log; clamped entries are treated as constants.
    Tensor kl_divergence(const Tensor& p, const Tensor& q) {
        if (p.rank() != 1 || q.rank() != 1 || p.size() != q.size())
            throw std::invalid_argument("kl_divergence: expected two rank-1 tensors of equal length");
        check_simplex(p, "kl_divergence: p");
        check_simplex(q, "kl_divergence: q");
        constexpr double kClamp = 1e-12;
        const std::size_t n = p.size();
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (p.data[i] > 0.0) {
                v += p.data[i] * (std::log(p.data[i]) - std::log(std::max(q.data[i], kClamp)));
            }
        }
        Tensor out = Tensor::scalar(v);
        detail::check_finite(out.data, "kl_divergence");
        if (tracked(p) || tracked(q)) {
            const int ip = p.node, iq = q.node;
            auto pd = p.data;
            auto qd = q.data;
            out.node = push_node(out.shape, {ip, iq},
                [ip, iq, pd, qd, n](Tape& t, const std::vector<double>& g) {
                    if (ip >= 0) {
                        std::vector<double> dp(n, 0.0);
                        for (std::size_t i = 0; i < n; ++i) {
                            if (pd[i] > 0.0)
                                dp[i] = g[0] * (std::log(pd[i]) - std::log(std::max(qd[i], kClamp)) + 1.0);
                        }
                        t.accumulate(ip, dp);
                    }
                    if (iq >= 0) {
                        std::vector<double> dq(n, 0.0);
                        for (std::size_t i = 0; i < n; ++i) {
                            if (pd[i] > 0.0 && qd[i] > kClamp) dq[i] = -g[0] * pd[i] / qd[i];
                        }
                        t.accumulate(iq, dq);
                    }
                });
        }
        return out;
    }

    // ---- backward --------------------------------------------------------

    void backward(const Tensor& root) {
        if (root.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
        if (root.node < 0) throw std::invalid_argument("backward: root is not on this tape");
        if (consumed_) throw std::logic_error("backward: tape already consumed; rebuild the graph");
        consumed_ = true;
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<std::size_t>(root.node)] = {1.0};
        for (int id = root.node; id >= 0; --id) {
            auto& g = grads_[static_cast<std::size_t>(id)];
            if (g.empty()) continue;
            const Node& nd = nodes_[static_cast<std::size_t>(id)];
            if (nd.back) nd.back(*this, g);
            if (!nd.leaf) {
                std::vector<double>().swap(g); // free intermediate grads as we go
            }
        }
    }

    bool has_grad(const Tensor& t) const {
        return t.node >= 0 && static_cast<std::size_t>(t.node) < grads_.size() &&
               !grads_[static_cast<std::size_t>(t.node)].empty();
    }

    // Gradient of the last backward() root w.r.t. a watched leaf (zeros if
    // the leaf was unreachable from the root).
    Tensor grad(const Tensor& leaf) const {
        if (leaf.node < 0) throw std::invalid_argument("grad: tensor is not on this tape");
        if (!consumed_) throw std::logic_error("grad: backward has not run");
        Tensor g = Tensor::zeros(leaf.shape);
        const auto& stored = grads_[static_cast<std::size_t>(leaf.node)];
        if (!stored.empty()) g.data = stored;
        return g;
    }

private:
    enum class Op { Add, Sub, Mul, Div };

    struct Node {
        std::vector<std::size_t> shape;
        std::vector<int> inputs;
        std::function<void(Tape&, const std::vector<double>&)> back;
        bool leaf = false;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool consumed_ = false;

    static bool tracked(const Tensor& t) { return t.node >= 0; }

    static Tensor a_like(const Tensor& a) {
        Tensor out;
        out.shape = a.shape;
        out.data.resize(a.size());
        return out;
    }

    static void check_simplex(const Tensor& t, const char* who) {
        double s = 0.0;
        for (double x : t.data) {
            if (x < -1e-12) throw std::invalid_argument(std::string(who) + ": negative entry");
            s += x;
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw std::invalid_argument(std::string(who) + ": entries do not sum to 1");
    }

    int push_node(const std::vector<std::size_t>& shape, std::vector<int> inputs,
                  std::function<void(Tape&, const std::vector<double>&)> back, bool leaf = false) {
        if (consumed_) throw std::logic_error("tape already consumed; build ops on a fresh tape");
        Node n;
        n.shape = shape;
        n.inputs = std::move(inputs);
        n.back = std::move(back);
        n.leaf = leaf;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void accumulate(int id, const std::vector<double>& contribution) {
        detail::check_finite(contribution, "backward");
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) {
            g = contribution;
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
        }
    }

    Tensor unary(const Tensor& a, const char* name, double (*f)(double), double (*df)(double)) {
        Tensor out = a_like(a);
        for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
        detail::check_finite(out.data, name);
        if (tracked(a)) {
            const int ia = a.node;
            auto ad = a.data;
            out.node = push_node(out.shape, {ia}, [ia, ad, df](Tape& t, const std::vector<double>& g) {
                std::vector<double> da(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * df(ad[i]);
                t.accumulate(ia, da);
            });
        }
        return out;
    }

    Tensor binary(const Tensor& a, const Tensor& b, Op op) {
        using detail::Bcast;
        const Bcast bc = detail::broadcast_kind(a, b);
        const Tensor& big = (bc == Bcast::LeftScalar || bc == Bcast::LeftRow) ? b : a;
        const std::size_t cols = big.cols();
        Tensor out = Tensor::zeros(big.shape);
        auto pick = [cols](const Tensor& t, std::size_t i, bool scalar, bool rowb) {
            if (scalar) return t.data[0];
            if (rowb) return t.data[i % cols];
            return t.data[i];
        };
        const bool a_scalar = bc == Bcast::LeftScalar, a_row = bc == Bcast::LeftRow;
        const bool b_scalar = bc == Bcast::RightScalar, b_row = bc == Bcast::RightRow;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double av = pick(a, i, a_scalar, a_row);
            const double bv = pick(b, i, b_scalar, b_row);
            switch (op) {
                case Op::Add: out.data[i] = av + bv; break;
                case Op::Sub: out.data[i] = av - bv; break;
                case Op::Mul: out.data[i] = av * bv; break;
                case Op::Div: out.data[i] = av / bv; break;
            }
        }
        detail::check_finite(out.data, "elementwise");
        if (tracked(a) || tracked(b)) {
            const int ia = a.node, ib = b.node;
            auto ad = a.data;
            auto bd = b.data;
            const std::size_t asz = a.size(), bsz = b.size();
            out.node = push_node(out.shape, {ia, ib},
                [=](Tape& t, const std::vector<double>& g) {
                    auto pickc = [cols](const std::vector<double>& d, std::size_t i, bool scalar, bool rowb) {
                        if (scalar) return d[0];
                        if (rowb) return d[i % cols];
                        return d[i];
                    };
                    if (ia >= 0) {
                        std::vector<double> da(g.size());
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            const double bv = pickc(bd, i, b_scalar, b_row);
                            switch (op) {
                                case Op::Add: da[i] = g[i]; break;
                                case Op::Sub: da[i] = g[i]; break;
                                case Op::Mul: da[i] = g[i] * bv; break;
                                case Op::Div: da[i] = g[i] / bv; break;
                            }
                        }
                        if (a_scalar || a_row)
                            t.accumulate(ia, detail::reduce_broadcast(da, cols, asz, a_scalar));
                        else
                            t.accumulate(ia, da);
                    }
                    if (ib >= 0) {
                        std::vector<double> db(g.size());
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            const double av = pickc(ad, i, a_scalar, a_row);
                            const double bv = pickc(bd, i, b_scalar, b_row);
                            switch (op) {
                                case Op::Add: db[i] = g[i]; break;
                                case Op::Sub: db[i] = -g[i]; break;
                                case Op::Mul: db[i] = g[i] * av; break;
                                case Op::Div: db[i] = -g[i] * av / (bv * bv); break;
                            }
                        }
                        if (b_scalar || b_row)
                            t.accumulate(ib, detail::reduce_broadcast(db, cols, bsz, b_scalar));
                        else
                            t.accumulate(ib, db);
                    }
                });
        }
        return out;
    }

    Tensor softmax_impl(const Tensor& x, bool log_form) {
        if (x.rank() < 1 || x.rank() > 2) throw std::invalid_argument("softmax: rank must be 1 or 2");
        if (x.cols() < 1) throw std::invalid_argument("softmax: empty rows");
        const std::size_t rows = x.rank() == 2 ? x.shape[0] : 1;
        const std::size_t n = x.cols();
        Tensor out = Tensor::zeros(x.shape);
        for (std::size_t i = 0; i < rows; ++i) {
            const double* xr = x.data.data() + i * n;
            double* yr = out.data.data() + i * n;
            const double mx = *std::max_element(xr, xr + n);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
            if (log_form) {
                const double lse = mx + std::log(z);
                for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] - lse;
            } else {
                for (std::size_t j = 0; j < n; ++j) yr[j] = std::exp(xr[j] - mx) / z;
            }
        }
        detail::check_finite(out.data, log_form ? "log_softmax_rows" : "softmax_rows");
        if (tracked(x)) {
            const int ix = x.node;
            auto yd = out.data;
            out.node = push_node(out.shape, {ix},
                [ix, yd, rows, n, log_form](Tape& t, const std::vector<double>& g) {
                    std::vector<double> dx(rows * n);
                    for (std::size_t i = 0; i < rows; ++i) {
                        const double* yr = yd.data() + i * n;
                        const double* gr = g.data() + i * n;
                        double s = 0.0;
                        if (log_form) {
                            for (std::size_t j = 0; j < n; ++j) s += gr[j];
                            for (std::size_t j = 0; j < n; ++j)
                                dx[i * n + j] = gr[j] - std::exp(yr[j]) * s;
                        } else {
                            for (std::size_t j = 0; j < n; ++j) s += gr[j] * yr[j];
                            for (std::size_t j = 0; j < n; ++j)
                                dx[i * n + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    t.accumulate(ix, dx);
                });
        }
        return out;
    }
};

} // namespace clab
