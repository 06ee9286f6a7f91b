#include "ul/graph.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

namespace ul {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Ref Graph::push(Tensor value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Ref>(nodes_.size() - 1);
}

Ref Graph::input(Tensor value, bool needs_grad) {
    if (!value.all_finite()) {
        throw std::invalid_argument("Graph::input: non-finite values");
    }
    return push(std::move(value), needs_grad, nullptr);
}

const Tensor& Graph::grad(Ref r) const {
    const Node& n = nodes_[static_cast<size_t>(r)];
    if (n.grad.data.empty()) {
        throw std::logic_error("Graph::grad: no gradient at node " + std::to_string(r) +
                               " (not reached by backward, or needs_grad is false)");
    }
    return n.grad;
}

Tensor& Graph::g(Ref r) {
    Node& n = nodes_[static_cast<size_t>(r)];
    if (n.grad.data.empty()) {
        n.grad = Tensor::zeros(n.value.shape);
    }
    return n.grad;
}

void Graph::backward(Ref root) {
    const Node& rn = nodes_[static_cast<size_t>(root)];
    if (rn.value.data.size() != 1) {
        throw std::invalid_argument("Graph::backward: root must be a scalar, got shape " +
                                    shape_str(rn.value.shape));
    }
    g(root).data[0] = 1.0;
    for (Ref r = root; r >= 0; --r) {
        Node& n = nodes_[static_cast<size_t>(r)];
        if (n.back && !n.grad.data.empty()) {
            n.back();
        }
    }
}

// ---- elementwise ----

Ref Graph::add(Ref a, Ref b) {
    require_same_shape(val(a), val(b), "Graph::add");
    Tensor out = val(a);
    const size_t n = out.data.size();
    for (size_t i = 0; i < n; ++i) out.data[i] += val(b).data[i];
    const bool ng = wants(a) || wants(b);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, b, r] {
            const Tensor& go = grad(r);
            if (wants(a)) {
                Tensor& ga = g(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (wants(b)) {
                Tensor& gb = g(b);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
            }
        };
    }
    return r;
}

Ref Graph::sub(Ref a, Ref b) {
    require_same_shape(val(a), val(b), "Graph::sub");
    Tensor out = val(a);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= val(b).data[i];
    const bool ng = wants(a) || wants(b);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, b, r] {
            const Tensor& go = grad(r);
            if (wants(a)) {
                Tensor& ga = g(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (wants(b)) {
                Tensor& gb = g(b);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] -= go.data[i];
            }
        };
    }
    return r;
}

Ref Graph::mul(Ref a, Ref b) {
    require_same_shape(val(a), val(b), "Graph::mul");
    Tensor out = val(a);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= val(b).data[i];
    const bool ng = wants(a) || wants(b);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, b, r] {
            const Tensor& go = grad(r);
            if (wants(a)) {
                Tensor& ga = g(a);
                const Tensor& vb = val(b);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * vb.data[i];
            }
            if (wants(b)) {
                Tensor& gb = g(b);
                const Tensor& va = val(a);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i] * va.data[i];
            }
        };
    }
    return r;
}

Ref Graph::scale(Ref a, double c) {
    if (!std::isfinite(c)) {
        throw std::invalid_argument("Graph::scale: non-finite factor");
    }
    Tensor out = val(a);
    for (double& v : out.data) v *= c;
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, c, r] {
            const Tensor& go = grad(r);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += c * go.data[i];
        };
    }
    return r;
}

Ref Graph::add_scalar(Ref a, double c) {
    if (!std::isfinite(c)) {
        throw std::invalid_argument("Graph::add_scalar: non-finite addend");
    }
    Tensor out = val(a);
    for (double& v : out.data) v += c;
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r] {
            const Tensor& go = grad(r);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        };
    }
    return r;
}

Ref Graph::silu(Ref a) {
    Tensor out = val(a);
    for (double& v : out.data) v *= stable_sigmoid(v);
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r] {
            const Tensor& go = grad(r);
            const Tensor& va = val(a);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) {
                const double s = stable_sigmoid(va.data[i]);
                ga.data[i] += go.data[i] * s * (1.0 + va.data[i] * (1.0 - s));
            }
        };
    }
    return r;
}

Ref Graph::sigmoid(Ref a) {
    Tensor out = val(a);
    for (double& v : out.data) v = stable_sigmoid(v);
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r] {
            const Tensor& go = grad(r);
            const Tensor& vo = val(r);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) {
                ga.data[i] += go.data[i] * vo.data[i] * (1.0 - vo.data[i]);
            }
        };
    }
    return r;
}

Ref Graph::exp(Ref a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::exp(v);
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r] {
            const Tensor& go = grad(r);
            const Tensor& vo = val(r);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * vo.data[i];
        };
    }
    return r;
}

Ref Graph::log(Ref a) {
    Tensor out = val(a);
    for (double& v : out.data) {
        if (!(v > 0.0)) {
            throw std::invalid_argument("Graph::log: input must be strictly positive");
        }
        v = std::log(v);
    }
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r] {
            const Tensor& go = grad(r);
            const Tensor& va = val(a);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] / va.data[i];
        };
    }
    return r;
}

Ref Graph::softplus(Ref a) {
    Tensor out = val(a);
    for (double& v : out.data) {
        // log(1 + e^x), computed from the non-positive side so exp never overflows
        v = (v > 0.0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r] {
            const Tensor& go = grad(r);
            const Tensor& va = val(a);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) {
                ga.data[i] += go.data[i] * stable_sigmoid(va.data[i]);
            }
        };
    }
    return r;
}

// ---- linear maps ----

Ref Graph::matmul(Ref a, Ref b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (B.ndim() != 2) {
        throw std::invalid_argument("Graph::matmul: rhs must be 2-d, got " + shape_str(B.shape));
    }
    const int K = B.shape[0];
    const int M = B.shape[1];
    if (A.ndim() < 1 || A.shape.back() != K) {
        throw std::invalid_argument("Graph::matmul: inner dims disagree, " + shape_str(A.shape) +
                                    " x " + shape_str(B.shape));
    }
    const size_t R = A.data.size() / static_cast<size_t>(K);
    std::vector<int> oshape = A.shape;
    oshape.back() = M;
    Tensor out = Tensor::zeros(oshape);
    for (size_t r = 0; r < R; ++r) {
        const double* arow = A.data.data() + r * static_cast<size_t>(K);
        double* orow = out.data.data() + r * static_cast<size_t>(M);
        for (int k = 0; k < K; ++k) {
            const double av = arow[k];
            const double* brow = B.data.data() + static_cast<size_t>(k) * M;
            for (int m = 0; m < M; ++m) orow[m] += av * brow[m];
        }
    }
    const bool ng = wants(a) || wants(b);
    Ref rr = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, b, rr, R, K, M] {
            const Tensor& GO = grad(rr);
            if (wants(a)) {
                Tensor& GA = g(a);
                const Tensor& B2 = val(b);
                for (size_t r = 0; r < R; ++r) {
                    double* garow = GA.data.data() + r * static_cast<size_t>(K);
                    const double* gorow = GO.data.data() + r * static_cast<size_t>(M);
                    for (int k = 0; k < K; ++k) {
                        const double* brow = B2.data.data() + static_cast<size_t>(k) * M;
                        double acc = 0.0;
                        for (int m = 0; m < M; ++m) acc += gorow[m] * brow[m];
                        garow[k] += acc;
                    }
                }
            }
            if (wants(b)) {
                Tensor& GB = g(b);
                const Tensor& A2 = val(a);
                for (size_t r = 0; r < R; ++r) {
                    const double* arow = A2.data.data() + r * static_cast<size_t>(K);
                    const double* gorow = GO.data.data() + r * static_cast<size_t>(M);
                    for (int k = 0; k < K; ++k) {
                        const double av = arow[k];
                        double* gbrow = GB.data.data() + static_cast<size_t>(k) * M;
                        for (int m = 0; m < M; ++m) gbrow[m] += av * gorow[m];
                    }
                }
            }
        };
    }
    return rr;
}

Ref Graph::add_bias(Ref x, Ref b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (B.ndim() != 1 || X.ndim() < 1 || X.shape.back() != B.shape[0]) {
        throw std::invalid_argument("Graph::add_bias: bias [C] must match last dim of " +
                                    shape_str(X.shape) + ", got " + shape_str(B.shape));
    }
    const int C = B.shape[0];
    const size_t R = X.data.size() / static_cast<size_t>(C);
    Tensor out = X;
    for (size_t r = 0; r < R; ++r) {
        double* row = out.data.data() + r * static_cast<size_t>(C);
        for (int c = 0; c < C; ++c) row[c] += B.data[static_cast<size_t>(c)];
    }
    const bool ng = wants(x) || wants(b);
    Ref rr = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, x, b, rr, R, C] {
            const Tensor& GO = grad(rr);
            if (wants(x)) {
                Tensor& GX = g(x);
                for (size_t i = 0; i < GO.data.size(); ++i) GX.data[i] += GO.data[i];
            }
            if (wants(b)) {
                Tensor& GB = g(b);
                for (size_t r = 0; r < R; ++r) {
                    const double* row = GO.data.data() + r * static_cast<size_t>(C);
                    for (int c = 0; c < C; ++c) GB.data[static_cast<size_t>(c)] += row[c];
                }
            }
        };
    }
    return rr;
}

Ref Graph::conv2d(Ref x, Ref w, Ref b) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    const Tensor& B = val(b);
    if (X.ndim() != 4) {
        throw std::invalid_argument("Graph::conv2d: input must be [N,H,W,C], got " +
                                    shape_str(X.shape));
    }
    if (W.ndim() != 4 || W.shape[0] != W.shape[1] || W.shape[0] % 2 != 1) {
        throw std::invalid_argument("Graph::conv2d: kernel must be [k,k,Ci,Co] with odd k, got " +
                                    shape_str(W.shape));
    }
    const int N = X.shape[0], H = X.shape[1], Wd = X.shape[2], Ci = X.shape[3];
    const int K = W.shape[0], Co = W.shape[3];
    if (W.shape[2] != Ci) {
        throw std::invalid_argument("Graph::conv2d: kernel expects " +
                                    std::to_string(W.shape[2]) + " input channels, image has " +
                                    std::to_string(Ci));
    }
    if (B.ndim() != 1 || B.shape[0] != Co) {
        throw std::invalid_argument("Graph::conv2d: bias must be [Co], got " + shape_str(B.shape));
    }
    const int pad = K / 2;
    Tensor out = Tensor::zeros({N, H, Wd, Co});
    const auto xat = [&](int n, int y, int xx) {
        return X.data.data() + ((static_cast<size_t>(n) * H + y) * Wd + xx) * Ci;
    };
    const auto wat = [&](int ky, int kx) {
        return W.data.data() + ((static_cast<size_t>(ky) * K + kx) * Ci) * Co;
    };
    for (int n = 0; n < N; ++n) {
        for (int oy = 0; oy < H; ++oy) {
            for (int ox = 0; ox < Wd; ++ox) {
                double* orow = out.data.data() + ((static_cast<size_t>(n) * H + oy) * Wd + ox) * Co;
                for (int c = 0; c < Co; ++c) orow[c] = B.data[static_cast<size_t>(c)];
                for (int ky = 0; ky < K; ++ky) {
                    const int iy = oy + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < K; ++kx) {
                        const int ix = ox + kx - pad;
                        if (ix < 0 || ix >= Wd) continue;
                        const double* xrow = xat(n, iy, ix);
                        const double* wmat = wat(ky, kx);
                        for (int ci = 0; ci < Ci; ++ci) {
                            const double xv = xrow[ci];
                            const double* wrow = wmat + static_cast<size_t>(ci) * Co;
                            for (int c = 0; c < Co; ++c) orow[c] += xv * wrow[c];
                        }
                    }
                }
            }
        }
    }
    const bool ng = wants(x) || wants(w) || wants(b);
    Ref rr = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, x, w, b, rr, N, H, Wd, Ci, K, Co, pad] {
            const Tensor& GO = grad(rr);
            const Tensor& X2 = val(x);
            const Tensor& W2 = val(w);
            const bool wx = wants(x), ww = wants(w), wb = wants(b);
            Tensor* GX = wx ? &g(x) : nullptr;
            Tensor* GW = ww ? &g(w) : nullptr;
            Tensor* GB = wb ? &g(b) : nullptr;
            for (int n = 0; n < N; ++n) {
                for (int oy = 0; oy < H; ++oy) {
                    for (int ox = 0; ox < Wd; ++ox) {
                        const double* gorow =
                            GO.data.data() + ((static_cast<size_t>(n) * H + oy) * Wd + ox) * Co;
                        if (wb) {
                            for (int c = 0; c < Co; ++c) GB->data[static_cast<size_t>(c)] += gorow[c];
                        }
                        for (int ky = 0; ky < K; ++ky) {
                            const int iy = oy + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < K; ++kx) {
                                const int ix = ox + kx - pad;
                                if (ix < 0 || ix >= Wd) continue;
                                const size_t xoff =
                                    ((static_cast<size_t>(n) * H + iy) * Wd + ix) * Ci;
                                const size_t woff = ((static_cast<size_t>(ky) * K + kx) * Ci) * Co;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const double* wrow =
                                        W2.data.data() + woff + static_cast<size_t>(ci) * Co;
                                    if (wx) {
                                        double acc = 0.0;
                                        for (int c = 0; c < Co; ++c) acc += gorow[c] * wrow[c];
                                        GX->data[xoff + static_cast<size_t>(ci)] += acc;
                                    }
                                    if (ww) {
                                        const double xv = X2.data[xoff + static_cast<size_t>(ci)];
                                        double* gwrow =
                                            GW->data.data() + woff + static_cast<size_t>(ci) * Co;
                                        for (int c = 0; c < Co; ++c) gwrow[c] += xv * gorow[c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return rr;
}

// ---- layout ----

Ref Graph::reshape(Ref a, std::vector<int> shape) {
    const Tensor& A = val(a);
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("Graph::reshape: dims must be positive");
        n *= static_cast<size_t>(d);
    }
    if (n != A.data.size()) {
        throw std::invalid_argument("Graph::reshape: cannot view " + shape_str(A.shape) + " as " +
                                    shape_str(shape));
    }
    Tensor out = A;
    out.shape = shape;
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r] {
            const Tensor& go = grad(r);
            Tensor& ga = g(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        };
    }
    return r;
}

Ref Graph::transpose_12(Ref a) {
    const Tensor& A = val(a);
    if (A.ndim() != 3) {
        throw std::invalid_argument("Graph::transpose_12: expects [N,A,B], got " +
                                    shape_str(A.shape));
    }
    const int N = A.shape[0], P = A.shape[1], Q = A.shape[2];
    Tensor out = Tensor::zeros({N, Q, P});
    for (int n = 0; n < N; ++n) {
        for (int p = 0; p < P; ++p) {
            for (int q = 0; q < Q; ++q) {
                out.data[(static_cast<size_t>(n) * Q + q) * P + p] =
                    A.data[(static_cast<size_t>(n) * P + p) * Q + q];
            }
        }
    }
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r, N, P, Q] {
            const Tensor& go = grad(r);
            Tensor& ga = g(a);
            for (int n = 0; n < N; ++n) {
                for (int p = 0; p < P; ++p) {
                    for (int q = 0; q < Q; ++q) {
                        ga.data[(static_cast<size_t>(n) * P + p) * Q + q] +=
                            go.data[(static_cast<size_t>(n) * Q + q) * P + p];
                    }
                }
            }
        };
    }
    return r;
}

// Index map shared by space_to_depth (forward) and depth_to_space (inverse):
// [N, H, W, C] <-> [N, H/p, W/p, p*p*C], block offset (dy*p + dx)*C + c.
namespace {
struct BlockMap {
    int N, H, W, C, p;
    size_t fine(int n, int y, int x, int c) const {
        return ((static_cast<size_t>(n) * H + y) * W + x) * C + c;
    }
    size_t coarse(int n, int y, int x, int c) const {
        const int Hc = H / p, Wc = W / p, Cc = C * p * p;
        const int cy = y / p, cx = x / p;
        const int off = ((y % p) * p + (x % p)) * C + c;
        return ((static_cast<size_t>(n) * Hc + cy) * Wc + cx) * Cc + off;
    }
};
}  // namespace

Ref Graph::space_to_depth(Ref a, int p) {
    const Tensor& A = val(a);
    if (A.ndim() != 4 || p <= 0 || A.shape[1] % p != 0 || A.shape[2] % p != 0) {
        throw std::invalid_argument("Graph::space_to_depth: need [N,H,W,C] with H,W divisible by " +
                                    std::to_string(p) + ", got " + shape_str(A.shape));
    }
    BlockMap m{A.shape[0], A.shape[1], A.shape[2], A.shape[3], p};
    Tensor out = Tensor::zeros({m.N, m.H / p, m.W / p, m.C * p * p});
    for (int n = 0; n < m.N; ++n)
        for (int y = 0; y < m.H; ++y)
            for (int x = 0; x < m.W; ++x)
                for (int c = 0; c < m.C; ++c)
                    out.data[m.coarse(n, y, x, c)] = A.data[m.fine(n, y, x, c)];
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r, m] {
            const Tensor& go = grad(r);
            Tensor& ga = g(a);
            for (int n = 0; n < m.N; ++n)
                for (int y = 0; y < m.H; ++y)
                    for (int x = 0; x < m.W; ++x)
                        for (int c = 0; c < m.C; ++c)
                            ga.data[m.fine(n, y, x, c)] += go.data[m.coarse(n, y, x, c)];
        };
    }
    return r;
}

Ref Graph::depth_to_space(Ref a, int p) {
    const Tensor& A = val(a);
    if (A.ndim() != 4 || p <= 0 || A.shape[3] % (p * p) != 0) {
        throw std::invalid_argument(
            "Graph::depth_to_space: need [N,H,W,C] with C divisible by p*p, got " +
            shape_str(A.shape));
    }
    const int C = A.shape[3] / (p * p);
    BlockMap m{A.shape[0], A.shape[1] * p, A.shape[2] * p, C, p};
    Tensor out = Tensor::zeros({m.N, m.H, m.W, m.C});
    for (int n = 0; n < m.N; ++n)
        for (int y = 0; y < m.H; ++y)
            for (int x = 0; x < m.W; ++x)
                for (int c = 0; c < m.C; ++c)
                    out.data[m.fine(n, y, x, c)] = A.data[m.coarse(n, y, x, c)];
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r, m] {
            const Tensor& go = grad(r);
            Tensor& ga = g(a);
            for (int n = 0; n < m.N; ++n)
                for (int y = 0; y < m.H; ++y)
                    for (int x = 0; x < m.W; ++x)
                        for (int c = 0; c < m.C; ++c)
                            ga.data[m.coarse(n, y, x, c)] += go.data[m.fine(n, y, x, c)];
        };
    }
    return r;
}

Ref Graph::upsample_nearest(Ref a, int f) {
    const Tensor& A = val(a);
    if (A.ndim() != 4 || f <= 0) {
        throw std::invalid_argument("Graph::upsample_nearest: need [N,H,W,C] and f > 0, got " +
                                    shape_str(A.shape));
    }
    const int N = A.shape[0], H = A.shape[1], W = A.shape[2], C = A.shape[3];
    Tensor out = Tensor::zeros({N, H * f, W * f, C});
    for (int n = 0; n < N; ++n) {
        for (int y = 0; y < H * f; ++y) {
            for (int x = 0; x < W * f; ++x) {
                const double* src =
                    A.data.data() + ((static_cast<size_t>(n) * H + y / f) * W + x / f) * C;
                double* dst =
                    out.data.data() + ((static_cast<size_t>(n) * (H * f) + y) * (W * f) + x) * C;
                std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(C));
            }
        }
    }
    const bool ng = wants(a);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, r, N, H, W, C, f] {
            const Tensor& go = grad(r);
            Tensor& ga = g(a);
            for (int n = 0; n < N; ++n) {
                for (int y = 0; y < H * f; ++y) {
                    for (int x = 0; x < W * f; ++x) {
                        double* dst =
                            ga.data.data() + ((static_cast<size_t>(n) * H + y / f) * W + x / f) * C;
                        const double* src =
                            go.data.data() +
                            ((static_cast<size_t>(n) * (H * f) + y) * (W * f) + x) * C;
                        for (int c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
        };
    }
    return r;
}

Ref Graph::concat_last(Ref a, Ref b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.ndim() != B.ndim() || A.ndim() < 1) {
        throw std::invalid_argument("Graph::concat_last: rank mismatch, " + shape_str(A.shape) +
                                    " vs " + shape_str(B.shape));
    }
    for (size_t i = 0; i + 1 < A.shape.size(); ++i) {
        if (A.shape[i] != B.shape[i]) {
            throw std::invalid_argument("Graph::concat_last: leading dims differ, " +
                                        shape_str(A.shape) + " vs " + shape_str(B.shape));
        }
    }
    const int Ca = A.shape.back(), Cb = B.shape.back();
    std::vector<int> oshape = A.shape;
    oshape.back() = Ca + Cb;
    const size_t R = A.data.size() / static_cast<size_t>(Ca);
    Tensor out = Tensor::zeros(oshape);
    for (size_t r = 0; r < R; ++r) {
        double* row = out.data.data() + r * static_cast<size_t>(Ca + Cb);
        std::memcpy(row, A.data.data() + r * static_cast<size_t>(Ca), sizeof(double) * Ca);
        std::memcpy(row + Ca, B.data.data() + r * static_cast<size_t>(Cb), sizeof(double) * Cb);
    }
    const bool ng = wants(a) || wants(b);
    Ref rr = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, b, rr, R, Ca, Cb] {
            const Tensor& go = grad(rr);
            for (size_t r = 0; r < R; ++r) {
                const double* row = go.data.data() + r * static_cast<size_t>(Ca + Cb);
                if (wants(a)) {
                    double* ga = g(a).data.data() + r * static_cast<size_t>(Ca);
                    for (int c = 0; c < Ca; ++c) ga[c] += row[c];
                }
                if (wants(b)) {
                    double* gb = g(b).data.data() + r * static_cast<size_t>(Cb);
                    for (int c = 0; c < Cb; ++c) gb[c] += row[Ca + c];
                }
            }
        };
    }
    return rr;
}

Ref Graph::slice_last(Ref a, int c0, int c1) {
    const Tensor& A = val(a);
    const int C = A.shape.back();
    if (A.ndim() < 1 || c0 < 0 || c1 <= c0 || c1 > C) {
        throw std::invalid_argument("Graph::slice_last: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for " + shape_str(A.shape));
    }
    std::vector<int> oshape = A.shape;
    oshape.back() = c1 - c0;
    const size_t R = A.data.size() / static_cast<size_t>(C);
    Tensor out = Tensor::zeros(oshape);
    for (size_t r = 0; r < R; ++r) {
        std::memcpy(out.data.data() + r * static_cast<size_t>(c1 - c0),
                    A.data.data() + r * static_cast<size_t>(C) + c0,
                    sizeof(double) * static_cast<size_t>(c1 - c0));
    }
    const bool ng = wants(a);
    Ref rr = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, a, rr, R, C, c0, c1] {
            const Tensor& go = grad(rr);
            Tensor& ga = g(a);
            for (size_t r = 0; r < R; ++r) {
                const double* row = go.data.data() + r * static_cast<size_t>(c1 - c0);
                double* garow = ga.data.data() + r * static_cast<size_t>(C) + c0;
                for (int c = 0; c < c1 - c0; ++c) garow[c] += row[c];
            }
        };
    }
    return rr;
}

// ---- normalization / conditioning ----

Ref Graph::layer_norm(Ref x, Ref gamma, Ref beta) {
    const Tensor& X = val(x);
    const Tensor& G = val(gamma);
    const Tensor& B = val(beta);
    const int C = X.shape.back();
    if (X.ndim() < 1 || G.ndim() != 1 || G.shape[0] != C || B.ndim() != 1 || B.shape[0] != C) {
        throw std::invalid_argument("Graph::layer_norm: gamma/beta must be [C] for x " +
                                    shape_str(X.shape));
    }
    constexpr double kEps = 1e-6;
    const size_t R = X.data.size() / static_cast<size_t>(C);
    Tensor out = Tensor::zeros(X.shape);
    // cached per-row statistics for backward
    auto mean = std::make_shared<std::vector<double>>(R);
    auto istd = std::make_shared<std::vector<double>>(R);
    for (size_t r = 0; r < R; ++r) {
        const double* row = X.data.data() + r * static_cast<size_t>(C);
        double m = 0.0;
        for (int c = 0; c < C; ++c) m += row[c];
        m /= C;
        double v = 0.0;
        for (int c = 0; c < C; ++c) v += (row[c] - m) * (row[c] - m);
        v /= C;
        const double is = 1.0 / std::sqrt(v + kEps);
        (*mean)[r] = m;
        (*istd)[r] = is;
        double* orow = out.data.data() + r * static_cast<size_t>(C);
        for (int c = 0; c < C; ++c) {
            orow[c] = (row[c] - m) * is * G.data[static_cast<size_t>(c)] +
                      B.data[static_cast<size_t>(c)];
        }
    }
    const bool ng = wants(x) || wants(gamma) || wants(beta);
    Ref rr = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, x, gamma, beta, rr, R, C, mean, istd] {
            const Tensor& GO = grad(rr);
            const Tensor& X2 = val(x);
            const Tensor& G2 = val(gamma);
            for (size_t r = 0; r < R; ++r) {
                const double* xrow = X2.data.data() + r * static_cast<size_t>(C);
                const double* gorow = GO.data.data() + r * static_cast<size_t>(C);
                const double m = (*mean)[r], is = (*istd)[r];
                if (wants(gamma) || wants(beta)) {
                    for (int c = 0; c < C; ++c) {
                        const double xhat = (xrow[c] - m) * is;
                        if (wants(gamma)) g(gamma).data[static_cast<size_t>(c)] += gorow[c] * xhat;
                        if (wants(beta)) g(beta).data[static_cast<size_t>(c)] += gorow[c];
                    }
                }
                if (wants(x)) {
                    // d xhat_c = is * (dy_c*g_c - mean_k(dy g) - xhat_c * mean_k(dy g xhat))
                    double s1 = 0.0, s2 = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const double dyg = gorow[c] * G2.data[static_cast<size_t>(c)];
                        const double xhat = (xrow[c] - m) * is;
                        s1 += dyg;
                        s2 += dyg * xhat;
                    }
                    s1 /= C;
                    s2 /= C;
                    double* gxrow = g(x).data.data() + r * static_cast<size_t>(C);
                    for (int c = 0; c < C; ++c) {
                        const double dyg = gorow[c] * G2.data[static_cast<size_t>(c)];
                        const double xhat = (xrow[c] - m) * is;
                        gxrow[c] += is * (dyg - s1 - xhat * s2);
                    }
                }
            }
        };
    }
    return rr;
}

Ref Graph::add_bcast_mid(Ref x, Ref v) {
    const Tensor& X = val(x);
    const Tensor& V = val(v);
    if (X.ndim() < 2 || V.ndim() != 2 || V.shape[0] != X.shape[0] ||
        V.shape[1] != X.shape.back()) {
        throw std::invalid_argument("Graph::add_bcast_mid: x " + shape_str(X.shape) +
                                    " needs v [N,C] matching first/last dims, got " +
                                    shape_str(V.shape));
    }
    const int N = X.shape[0];
    const int C = X.shape.back();
    const size_t M = X.data.size() / (static_cast<size_t>(N) * C);
    Tensor out = X;
    for (int n = 0; n < N; ++n) {
        const double* vrow = V.data.data() + static_cast<size_t>(n) * C;
        for (size_t m = 0; m < M; ++m) {
            double* row = out.data.data() + (static_cast<size_t>(n) * M + m) * C;
            for (int c = 0; c < C; ++c) row[c] += vrow[c];
        }
    }
    const bool ng = wants(x) || wants(v);
    Ref rr = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, x, v, rr, N, M, C] {
            const Tensor& GO = grad(rr);
            if (wants(x)) {
                Tensor& GX = g(x);
                for (size_t i = 0; i < GO.data.size(); ++i) GX.data[i] += GO.data[i];
            }
            if (wants(v)) {
                Tensor& GV = g(v);
                for (int n = 0; n < N; ++n) {
                    double* gvrow = GV.data.data() + static_cast<size_t>(n) * C;
                    for (size_t m = 0; m < M; ++m) {
                        const double* row = GO.data.data() + (static_cast<size_t>(n) * M + m) * C;
                        for (int c = 0; c < C; ++c) gvrow[c] += row[c];
                    }
                }
            }
        };
    }
    return rr;
}

// ---- reductions ----

Ref Graph::sum_per_sample(Ref x) {
    const Tensor& X = val(x);
    if (X.ndim() < 1) {
        throw std::invalid_argument("Graph::sum_per_sample: needs at least 1-d input");
    }
    const int N = X.shape[0];
    const size_t M = X.data.size() / static_cast<size_t>(N);
    Tensor out = Tensor::zeros({N});
    for (int n = 0; n < N; ++n) {
        const double* row = X.data.data() + static_cast<size_t>(n) * M;
        double acc = 0.0;
        for (size_t m = 0; m < M; ++m) acc += row[m];
        out.data[static_cast<size_t>(n)] = acc;
    }
    const bool ng = wants(x);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, x, r, N, M] {
            const Tensor& go = grad(r);
            Tensor& gx = g(x);
            for (int n = 0; n < N; ++n) {
                const double gn = go.data[static_cast<size_t>(n)];
                double* row = gx.data.data() + static_cast<size_t>(n) * M;
                for (size_t m = 0; m < M; ++m) row[m] += gn;
            }
        };
    }
    return r;
}

Ref Graph::weighted_mean(Ref x, std::vector<double> w) {
    const Tensor& X = val(x);
    if (X.ndim() != 1 || static_cast<size_t>(X.shape[0]) != w.size()) {
        throw std::invalid_argument("Graph::weighted_mean: x must be [N] with one weight each");
    }
    const int N = X.shape[0];
    double acc = 0.0;
    for (int n = 0; n < N; ++n) acc += w[static_cast<size_t>(n)] * X.data[static_cast<size_t>(n)];
    Tensor out = Tensor::scalar(acc / N);
    const bool ng = wants(x);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, x, r, N, w = std::move(w)] {
            const double go = grad(r).data[0];
            Tensor& gx = g(x);
            for (int n = 0; n < N; ++n) {
                gx.data[static_cast<size_t>(n)] += go * w[static_cast<size_t>(n)] / N;
            }
        };
    }
    return r;
}

Ref Graph::sum_all(Ref x) {
    const Tensor& X = val(x);
    double acc = 0.0;
    for (double v : X.data) acc += v;
    Tensor out = Tensor::scalar(acc);
    const bool ng = wants(x);
    Ref r = push(std::move(out), ng, nullptr);
    if (ng) {
        nodes_.back().back = [this, x, r] {
            const double go = grad(r).data[0];
            Tensor& gx = g(x);
            for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += go;
        };
    }
    return r;
}

Ref Graph::stop_grad(Ref a) {
    return push(val(a), /*needs_grad=*/false, nullptr);
}

}  // namespace ul
