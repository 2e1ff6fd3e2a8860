#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <vector>

#include "ctf/error.hpp"
#include "ctf/gemm.hpp"
#include "ctf/tensor.hpp"

namespace ctf {

enum class OpKind : uint8_t {
    leaf,
    matmul,
    add,
    sub,
    mul,
    add_bias,
    scale,
    gelu,
    rmsnorm,
    embed,
    attention,
    softmax_rows,
    cross_entropy,
    sum_all,
    mean_all,
    concat_rows,
    slice_rows,
};

constexpr double kRmsNormEps = 1e-5;

// Reverse-mode tape. Nodes are appended in forward order, which is a valid
// topological order, so backward() is a single reverse sweep.
template <typename S>
class TapeT {
public:
    struct Node {
        OpKind op = OpKind::leaf;
        int in0 = -1, in1 = -1;
        TensorT<S> t0, t1;        // input value snapshots
        TensorT<S> t_v;           // third input (attention values)
        TensorT<S> out;           // output values
        TensorT<S> saved;         // op-specific (softmax probs, attention probs, ...)
        std::vector<int32_t> idx; // embedding indices / loss targets
        S sval = S(0);
        int64_t p0 = 0, p1 = 0, p2 = 0;
    };

    explicit TapeT(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    size_t size() const { return nodes_.size(); }

    // Registers a gradient leaf. The tensor is tracked by this tape from here on.
    void watch(TensorT<S>& t) {
        if (!recording_) return;
        t.requires_grad = true;
        Node n;
        n.op = OpKind::leaf;
        n.out = t;
        t.node = push(std::move(n));
    }

    int push(Node&& n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Node& node(int i) { return nodes_[static_cast<size_t>(i)]; }

    // Computes d(loss)/d(node) for every node; loss must be a tracked scalar.
    void backward(const TensorT<S>& loss) {
        check(loss.numel() == 1, ErrKind::shape, "backward requires a scalar loss");
        check(loss.node >= 0, ErrKind::param, "backward requires a tape-tracked loss");
        grads_.assign(nodes_.size(), {});
        for (size_t i = 0; i < nodes_.size(); ++i) {
            grads_[i].assign(static_cast<size_t>(nodes_[i].out.numel()), S(0));
        }
        grads_[static_cast<size_t>(loss.node)][0] = S(1);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            step_backward(i);
        }
    }

    std::span<const S> grad(const TensorT<S>& t) const {
        check(t.node >= 0 && static_cast<size_t>(t.node) < grads_.size(), ErrKind::param,
              "tensor has no gradient on this tape");
        return grads_[static_cast<size_t>(t.node)];
    }

    std::vector<S>& grad_mut(int node) { return grads_[static_cast<size_t>(node)]; }

private:
    void step_backward(int i);

    std::vector<Node> nodes_;
    std::vector<std::vector<S>> grads_;
    bool recording_ = true;
};

using Tape = TapeT<float>;

namespace detail {

template <typename S>
S gelu_fwd(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865476)));
}

template <typename S>
S gelu_grad(S x) {
    const S phi_cdf = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865476)));
    const S phi_pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
    return phi_cdf + x * phi_pdf;
}

// softmax along the final axis of an [rows x n] buffer with max subtraction
template <typename S>
void softmax_rows_fwd(const S* x, S* y, int64_t rows, int64_t n, S inv_temp) {
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * n;
        S* yr = y + r * n;
        S mx = xr[0] * inv_temp;
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j] * inv_temp);
        S denom = S(0);
        for (int64_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] * inv_temp - mx);
            denom += yr[j];
        }
        const S inv = S(1) / denom;
        for (int64_t j = 0; j < n; ++j) yr[j] *= inv;
    }
}

}  // namespace detail

// ---------------------------------------------------------------- forward ops

template <typename S>
TensorT<S> matmul(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    check(a.rank() == 2 && b.rank() == 2, ErrKind::shape, "matmul expects rank-2 tensors");
    check(a.dim(1) == b.dim(0), ErrKind::shape,
          "matmul inner dimensions disagree: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<S> out({m, n});
    gemm(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    if (tape.recording() && (a.node >= 0 || b.node >= 0)) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::matmul;
        nd.in0 = a.node;
        nd.in1 = b.node;
        nd.t0 = a;
        nd.t1 = b;
        nd.out = out;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> binary_elementwise(TapeT<S>& tape, OpKind op, const TensorT<S>& a, const TensorT<S>& b) {
    check(a.same_shape(b), ErrKind::shape,
          "elementwise op needs equal shapes: " + a.shape_str() + " vs " + b.shape_str());
    TensorT<S> out(a.shape);
    const int64_t n = a.numel();
    const S* pa = a.ptr();
    const S* pb = b.ptr();
    S* po = out.ptr();
    switch (op) {
        case OpKind::add:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case OpKind::sub:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
            break;
        case OpKind::mul:
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        default:
            fail(ErrKind::param, "not an elementwise op");
    }
    if (tape.recording() && (a.node >= 0 || b.node >= 0)) {
        typename TapeT<S>::Node nd;
        nd.op = op;
        nd.in0 = a.node;
        nd.in1 = b.node;
        nd.t0 = a;
        nd.t1 = b;
        nd.out = out;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> add(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    return binary_elementwise(tape, OpKind::add, a, b);
}
template <typename S>
TensorT<S> sub(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    return binary_elementwise(tape, OpKind::sub, a, b);
}
template <typename S>
TensorT<S> mul(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    return binary_elementwise(tape, OpKind::mul, a, b);
}

// x[m,n] + row vector b[n]
template <typename S>
TensorT<S> add_bias(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& b) {
    check(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0), ErrKind::shape,
          "add_bias expects [m,n] plus [n]");
    TensorT<S> out(x.shape);
    const int64_t m = x.dim(0), n = x.dim(1);
    for (int64_t i = 0; i < m; ++i) {
        const S* xi = x.ptr() + i * n;
        S* oi = out.ptr() + i * n;
        for (int64_t j = 0; j < n; ++j) oi[j] = xi[j] + b[j];
    }
    if (tape.recording() && (x.node >= 0 || b.node >= 0)) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::add_bias;
        nd.in0 = x.node;
        nd.in1 = b.node;
        nd.t0 = x;
        nd.t1 = b;
        nd.out = out;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> scale(TapeT<S>& tape, const TensorT<S>& x, S c) {
    TensorT<S> out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
    if (tape.recording() && x.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::scale;
        nd.in0 = x.node;
        nd.t0 = x;
        nd.out = out;
        nd.sval = c;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> gelu(TapeT<S>& tape, const TensorT<S>& x) {
    TensorT<S> out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = detail::gelu_fwd(x[i]);
    if (tape.recording() && x.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::gelu;
        nd.in0 = x.node;
        nd.t0 = x;
        nd.out = out;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

// row-wise x / rms(x) * gain
template <typename S>
TensorT<S> rmsnorm(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& gain) {
    check(x.rank() == 2 && gain.rank() == 1 && x.dim(1) == gain.dim(0), ErrKind::shape,
          "rmsnorm expects [m,n] plus gain [n]");
    const int64_t m = x.dim(0), n = x.dim(1);
    TensorT<S> out(x.shape);
    TensorT<S> inv_rms({m});
    for (int64_t i = 0; i < m; ++i) {
        const S* xi = x.ptr() + i * n;
        S ms = S(0);
        for (int64_t j = 0; j < n; ++j) ms += xi[j] * xi[j];
        const S r = S(1) / std::sqrt(ms / static_cast<S>(n) + static_cast<S>(kRmsNormEps));
        inv_rms[i] = r;
        S* oi = out.ptr() + i * n;
        for (int64_t j = 0; j < n; ++j) oi[j] = xi[j] * r * gain[j];
    }
    if (tape.recording() && (x.node >= 0 || gain.node >= 0)) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::rmsnorm;
        nd.in0 = x.node;
        nd.in1 = gain.node;
        nd.t0 = x;
        nd.t1 = gain;
        nd.out = out;
        nd.saved = inv_rms;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

// gathers rows of table; out[i,:] = table[idx[i],:]
template <typename S>
TensorT<S> embed(TapeT<S>& tape, const TensorT<S>& table, const std::vector<int32_t>& idx) {
    check(table.rank() == 2, ErrKind::shape, "embed expects a rank-2 table");
    const int64_t v = table.dim(0), d = table.dim(1);
    const int64_t m = static_cast<int64_t>(idx.size());
    check(m > 0, ErrKind::shape, "embed needs at least one index");
    TensorT<S> out({m, d});
    for (int64_t i = 0; i < m; ++i) {
        check(idx[static_cast<size_t>(i)] >= 0 && idx[static_cast<size_t>(i)] < v, ErrKind::index,
              "embedding index out of range: " + std::to_string(idx[static_cast<size_t>(i)]) +
                  " for table of " + std::to_string(v));
        std::memcpy(out.ptr() + i * d, table.ptr() + static_cast<int64_t>(idx[static_cast<size_t>(i)]) * d,
                    static_cast<size_t>(d) * sizeof(S));
    }
    if (tape.recording() && table.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::embed;
        nd.in0 = table.node;
        nd.t0 = table;
        nd.out = out;
        nd.idx = idx;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

// multi-head scaled dot-product attention over already-projected q/k/v [t, dim];
// heads split the feature axis; causal masks j > i
template <typename S>
TensorT<S> attention(TapeT<S>& tape, const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                     int64_t heads, bool causal) {
    check(q.rank() == 2 && q.same_shape(k) && q.same_shape(v), ErrKind::shape,
          "attention expects equal [t,dim] q/k/v");
    const int64_t t = q.dim(0), dim = q.dim(1);
    check(dim % heads == 0, ErrKind::shape, "attention: dim must divide by heads");
    const int64_t hd = dim / heads;
    const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));

    TensorT<S> probs({heads, t, t});
    TensorT<S> out({t, dim});
    std::vector<S> scores(static_cast<size_t>(t));
    for (int64_t h = 0; h < heads; ++h) {
        const int64_t off = h * hd;
        S* ph = probs.ptr() + h * t * t;
        for (int64_t i = 0; i < t; ++i) {
            const S* qi = q.ptr() + i * dim + off;
            const int64_t jmax = causal ? i + 1 : t;
            S mx = -std::numeric_limits<S>::infinity();
            for (int64_t j = 0; j < jmax; ++j) {
                const S* kj = k.ptr() + j * dim + off;
                S acc = S(0);
                for (int64_t c = 0; c < hd; ++c) acc += qi[c] * kj[c];
                acc *= att_scale;
                scores[static_cast<size_t>(j)] = acc;
                mx = std::max(mx, acc);
            }
            S denom = S(0);
            S* pi = ph + i * t;
            for (int64_t j = 0; j < jmax; ++j) {
                pi[j] = std::exp(scores[static_cast<size_t>(j)] - mx);
                denom += pi[j];
            }
            const S inv = S(1) / denom;
            for (int64_t j = 0; j < jmax; ++j) pi[j] *= inv;
            for (int64_t j = jmax; j < t; ++j) pi[j] = S(0);
            S* oi = out.ptr() + i * dim + off;
            for (int64_t c = 0; c < hd; ++c) oi[c] = S(0);
            for (int64_t j = 0; j < jmax; ++j) {
                const S w = pi[j];
                const S* vj = v.ptr() + j * dim + off;
                for (int64_t c = 0; c < hd; ++c) oi[c] += w * vj[c];
            }
        }
    }
    if (tape.recording() && (q.node >= 0 || k.node >= 0 || v.node >= 0)) {
        check(q.node >= 0 && k.node >= 0 && v.node >= 0, ErrKind::param,
              "attention requires q/k/v all tracked or all untracked");
        typename TapeT<S>::Node nd;
        nd.op = OpKind::attention;
        nd.in0 = q.node;
        nd.in1 = k.node;
        nd.p0 = v.node;
        nd.t0 = q;
        nd.t1 = k;
        nd.saved = probs;
        nd.out = out;
        nd.p1 = heads;
        nd.p2 = causal ? 1 : 0;
        nd.t_v = v;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

// softmax with temperature along rows; rank-1 input treated as a single row
template <typename S>
TensorT<S> softmax_rows(TapeT<S>& tape, const TensorT<S>& x, S temperature) {
    check(temperature > S(0), ErrKind::param, "softmax temperature must be positive");
    const int64_t n = x.rank() == 1 ? x.dim(0) : x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / n;
    TensorT<S> out(x.shape);
    detail::softmax_rows_fwd(x.ptr(), out.ptr(), rows, n, S(1) / temperature);
    if (tape.recording() && x.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::softmax_rows;
        nd.in0 = x.node;
        nd.t0 = x;
        nd.out = out;
        nd.saved = out;
        nd.sval = S(1) / temperature;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

// mean over non-ignored rows of -log softmax(logits)[target]
template <typename S>
TensorT<S> cross_entropy(TapeT<S>& tape, const TensorT<S>& logits,
                         const std::vector<int32_t>& targets, int64_t ignore_index = -1) {
    check(logits.rank() == 2, ErrKind::shape, "cross_entropy expects [rows, vocab] logits");
    const int64_t rows = logits.dim(0), vocab = logits.dim(1);
    check(static_cast<int64_t>(targets.size()) == rows, ErrKind::shape,
          "cross_entropy: one target per row required");
    TensorT<S> probs(logits.shape);
    detail::softmax_rows_fwd(logits.ptr(), probs.ptr(), rows, vocab, S(1));
    S total = S(0);
    int64_t counted = 0;
    for (int64_t r = 0; r < rows; ++r) {
        const int32_t tgt = targets[static_cast<size_t>(r)];
        if (ignore_index >= 0 && tgt == ignore_index) continue;
        check(tgt >= 0 && tgt < vocab, ErrKind::index,
              "cross_entropy target out of range: " + std::to_string(tgt));
        total -= std::log(probs.at(r, tgt));
        ++counted;
    }
    TensorT<S> out = TensorT<S>::scalar(counted > 0 ? total / static_cast<S>(counted) : S(0));
    if (tape.recording() && logits.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::cross_entropy;
        nd.in0 = logits.node;
        nd.t0 = logits;
        nd.out = out;
        nd.saved = probs;
        nd.idx = targets;
        nd.p0 = ignore_index;
        nd.p1 = counted;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> sum_all(TapeT<S>& tape, const TensorT<S>& x) {
    S total = S(0);
    for (int64_t i = 0; i < x.numel(); ++i) total += x[i];
    TensorT<S> out = TensorT<S>::scalar(total);
    if (tape.recording() && x.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::sum_all;
        nd.in0 = x.node;
        nd.t0 = x;
        nd.out = out;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> mean_all(TapeT<S>& tape, const TensorT<S>& x) {
    S total = S(0);
    for (int64_t i = 0; i < x.numel(); ++i) total += x[i];
    TensorT<S> out = TensorT<S>::scalar(total / static_cast<S>(x.numel()));
    if (tape.recording() && x.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::mean_all;
        nd.in0 = x.node;
        nd.t0 = x;
        nd.out = out;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> concat_rows(TapeT<S>& tape, const TensorT<S>& a, const TensorT<S>& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrKind::shape,
          "concat_rows expects matching column counts");
    const int64_t ma = a.dim(0), mb = b.dim(0), n = a.dim(1);
    TensorT<S> out({ma + mb, n});
    std::memcpy(out.ptr(), a.ptr(), static_cast<size_t>(ma * n) * sizeof(S));
    std::memcpy(out.ptr() + ma * n, b.ptr(), static_cast<size_t>(mb * n) * sizeof(S));
    if (tape.recording() && (a.node >= 0 || b.node >= 0)) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::concat_rows;
        nd.in0 = a.node;
        nd.in1 = b.node;
        nd.t0 = a;
        nd.t1 = b;
        nd.out = out;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

template <typename S>
TensorT<S> slice_rows(TapeT<S>& tape, const TensorT<S>& x, int64_t start, int64_t len) {
    check(x.rank() == 2, ErrKind::shape, "slice_rows expects a rank-2 tensor");
    check(start >= 0 && len > 0 && start + len <= x.dim(0), ErrKind::index,
          "slice_rows range out of bounds");
    const int64_t n = x.dim(1);
    TensorT<S> out({len, n});
    std::memcpy(out.ptr(), x.ptr() + start * n, static_cast<size_t>(len * n) * sizeof(S));
    if (tape.recording() && x.node >= 0) {
        typename TapeT<S>::Node nd;
        nd.op = OpKind::slice_rows;
        nd.in0 = x.node;
        nd.t0 = x;
        nd.out = out;
        nd.p0 = start;
        nd.p1 = len;
        out.node = tape.push(std::move(nd));
    }
    return out;
}

// ---------------------------------------------------------------- backward

template <typename S>
void TapeT<S>::step_backward(int i) {
    Node& nd = nodes_[static_cast<size_t>(i)];
    const std::vector<S>& go = grads_[static_cast<size_t>(i)];
    auto acc = [&](int target, auto&& fn) {
        if (target >= 0) fn(grads_[static_cast<size_t>(target)]);
    };
    switch (nd.op) {
        case OpKind::leaf:
            break;
        case OpKind::matmul: {
            const int64_t m = nd.t0.dim(0), k = nd.t0.dim(1), n = nd.t1.dim(1);
            acc(nd.in0, [&](std::vector<S>& ga) {
                gemm_nt_acc(go.data(), nd.t1.ptr(), ga.data(), m, n, k);
            });
            acc(nd.in1, [&](std::vector<S>& gb) {
                gemm_tn_acc(nd.t0.ptr(), go.data(), gb.data(), m, k, n);
            });
            break;
        }
        case OpKind::add:
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[j];
            });
            acc(nd.in1, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[j];
            });
            break;
        case OpKind::sub:
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[j];
            });
            acc(nd.in1, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] -= go[j];
            });
            break;
        case OpKind::mul:
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[j] * nd.t1[static_cast<int64_t>(j)];
            });
            acc(nd.in1, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[j] * nd.t0[static_cast<int64_t>(j)];
            });
            break;
        case OpKind::add_bias: {
            const int64_t m = nd.t0.dim(0), n = nd.t0.dim(1);
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[j];
            });
            acc(nd.in1, [&](std::vector<S>& g) {
                for (int64_t r = 0; r < m; ++r)
                    for (int64_t j = 0; j < n; ++j) g[static_cast<size_t>(j)] += go[static_cast<size_t>(r * n + j)];
            });
            break;
        }
        case OpKind::scale:
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[j] * nd.sval;
            });
            break;
        case OpKind::gelu:
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j)
                    g[j] += go[j] * detail::gelu_grad(nd.t0[static_cast<int64_t>(j)]);
            });
            break;
        case OpKind::rmsnorm: {
            const int64_t m = nd.t0.dim(0), n = nd.t0.dim(1);
            acc(nd.in0, [&](std::vector<S>& g) {
                for (int64_t r = 0; r < m; ++r) {
                    const S* xr = nd.t0.ptr() + r * n;
                    const S* gor = go.data() + r * n;
                    const S inv_r = nd.saved[r];
                    S dot = S(0);
                    for (int64_t j = 0; j < n; ++j) dot += gor[j] * nd.t1[j] * xr[j];
                    const S coef = dot * inv_r * inv_r * inv_r / static_cast<S>(n);
                    S* gr = g.data() + r * n;
                    for (int64_t j = 0; j < n; ++j) gr[j] += gor[j] * nd.t1[j] * inv_r - xr[j] * coef;
                }
            });
            acc(nd.in1, [&](std::vector<S>& g) {
                for (int64_t r = 0; r < m; ++r) {
                    const S* xr = nd.t0.ptr() + r * n;
                    const S* gor = go.data() + r * n;
                    const S inv_r = nd.saved[r];
                    for (int64_t j = 0; j < n; ++j) g[static_cast<size_t>(j)] += gor[j] * xr[j] * inv_r;
                }
            });
            break;
        }
        case OpKind::embed: {
            const int64_t d = nd.t0.dim(1);
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t r = 0; r < nd.idx.size(); ++r) {
                    S* dst = g.data() + static_cast<size_t>(nd.idx[r]) * static_cast<size_t>(d);
                    const S* src = go.data() + r * static_cast<size_t>(d);
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            });
            break;
        }
        case OpKind::attention: {
            const int64_t t = nd.t0.dim(0), dim = nd.t0.dim(1);
            const int64_t heads = nd.p1, hd = dim / heads;
            const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));
            const TensorT<S>& q = nd.t0;
            const TensorT<S>& k = nd.t1;
            const TensorT<S>& v = nd.t_v;
            std::vector<S>& gq = grads_[static_cast<size_t>(nd.in0)];
            std::vector<S>& gk = grads_[static_cast<size_t>(nd.in1)];
            std::vector<S>& gv = grads_[static_cast<size_t>(nd.p0)];
            std::vector<S> dp(static_cast<size_t>(t));
            for (int64_t h = 0; h < heads; ++h) {
                const int64_t off = h * hd;
                const S* ph = nd.saved.ptr() + h * t * t;
                for (int64_t i2 = 0; i2 < t; ++i2) {
                    const S* go_i = go.data() + i2 * dim + off;
                    const S* pi = ph + i2 * t;
                    // dP[i,j] = dO_i . V_j ; dV_j += P[i,j] * dO_i
                    S pdsum = S(0);
                    for (int64_t j = 0; j < t; ++j) {
                        if (pi[j] == S(0)) {
                            dp[static_cast<size_t>(j)] = S(0);
                            continue;
                        }
                        const S* vj = v.ptr() + j * dim + off;
                        S acc2 = S(0);
                        for (int64_t c = 0; c < hd; ++c) acc2 += go_i[c] * vj[c];
                        dp[static_cast<size_t>(j)] = acc2;
                        pdsum += acc2 * pi[j];
                        S* gvj = gv.data() + j * dim + off;
                        for (int64_t c = 0; c < hd; ++c) gvj[c] += pi[j] * go_i[c];
                    }
                    // dS = P o (dP - sum(dP o P)); dQ_i += dS . K ; dK_j += dS * Q_i
                    const S* qi = q.ptr() + i2 * dim + off;
                    S* gqi = gq.data() + i2 * dim + off;
                    for (int64_t j = 0; j < t; ++j) {
                        if (pi[j] == S(0)) continue;
                        const S ds = pi[j] * (dp[static_cast<size_t>(j)] - pdsum) * att_scale;
                        const S* kj = k.ptr() + j * dim + off;
                        S* gkj = gk.data() + j * dim + off;
                        for (int64_t c = 0; c < hd; ++c) {
                            gqi[c] += ds * kj[c];
                            gkj[c] += ds * qi[c];
                        }
                    }
                }
            }
            break;
        }
        case OpKind::softmax_rows: {
            const int64_t n = nd.t0.rank() == 1 ? nd.t0.dim(0) : nd.t0.dim(nd.t0.rank() - 1);
            const int64_t rows = nd.t0.numel() / n;
            acc(nd.in0, [&](std::vector<S>& g) {
                for (int64_t r = 0; r < rows; ++r) {
                    const S* yr = nd.saved.ptr() + r * n;
                    const S* gor = go.data() + r * n;
                    S dot = S(0);
                    for (int64_t j = 0; j < n; ++j) dot += gor[j] * yr[j];
                    S* gr = g.data() + r * n;
                    for (int64_t j = 0; j < n; ++j) gr[j] += yr[j] * (gor[j] - dot) * nd.sval;
                }
            });
            break;
        }
        case OpKind::cross_entropy: {
            const int64_t rows = nd.t0.dim(0), vocab = nd.t0.dim(1);
            const S upstream = go[0];
            if (nd.p1 == 0) break;
            const S inv_count = S(1) / static_cast<S>(nd.p1);
            acc(nd.in0, [&](std::vector<S>& g) {
                for (int64_t r = 0; r < rows; ++r) {
                    const int32_t tgt = nd.idx[static_cast<size_t>(r)];
                    if (nd.p0 >= 0 && tgt == nd.p0) continue;
                    const S* pr = nd.saved.ptr() + r * vocab;
                    S* gr = g.data() + r * vocab;
                    for (int64_t j = 0; j < vocab; ++j) {
                        const S one_hot = (j == tgt) ? S(1) : S(0);
                        gr[j] += upstream * (pr[j] - one_hot) * inv_count;
                    }
                }
            });
            break;
        }
        case OpKind::sum_all:
            acc(nd.in0, [&](std::vector<S>& g) {
                for (S& gj : g) gj += go[0];
            });
            break;
        case OpKind::mean_all:
            acc(nd.in0, [&](std::vector<S>& g) {
                const S w = go[0] / static_cast<S>(nd.t0.numel());
                for (S& gj : g) gj += w;
            });
            break;
        case OpKind::concat_rows: {
            const size_t na = static_cast<size_t>(nd.t0.numel());
            acc(nd.in0, [&](std::vector<S>& g) {
                for (size_t j = 0; j < na; ++j) g[j] += go[j];
            });
            acc(nd.in1, [&](std::vector<S>& g) {
                for (size_t j = 0; j < g.size(); ++j) g[j] += go[na + j];
            });
            break;
        }
        case OpKind::slice_rows: {
            const int64_t n = nd.t0.dim(1);
            acc(nd.in0, [&](std::vector<S>& g) {
                const size_t base = static_cast<size_t>(nd.p0 * n);
                for (size_t j = 0; j < static_cast<size_t>(nd.p1 * n); ++j) g[base + j] += go[j];
            });
            break;
        }
    }
}

}  // namespace ctf
