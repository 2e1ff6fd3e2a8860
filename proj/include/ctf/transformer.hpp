#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctf/autograd.hpp"
#include "ctf/clustering.hpp"
#include "ctf/error.hpp"
#include "ctf/rng.hpp"
#include "ctf/tensor.hpp"

namespace ctf {

enum class AttentionKind { causal, full };

// One trunk serves three roles: a causal model over the coarse vocabulary, a
// full-attention fine predictor, and a causal baseline over the fine
// vocabulary. Roles differ only in vocabulary sizes and attention kind.
struct TransformerConfig {
    int64_t input_vocab = 64;  // embedded token ids
    int64_t vocab = 64;        // head outputs
    int64_t seq_len = 64;
    int64_t dim = 128;
    int64_t layers = 4;
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    AttentionKind attention = AttentionKind::causal;
    int64_t class_count = 10;
    bool class_token = true;  // prepend a class embedding row

    int64_t null_class() const { return class_count; }  // reserved unconditional row

    void validate() const {
        check(vocab >= 2 && input_vocab >= 2, ErrKind::config, "vocabulary must be >= 2");
        check(dim % heads == 0, ErrKind::config, "embed dim must divide by head count");
        check(seq_len >= 1 && layers >= 1 && class_count >= 1, ErrKind::config,
              "seq_len, layers and class_count must be positive");
    }
};

template <typename S>
struct TransformerParamsT {
    TransformerConfig config;

    TensorT<S> tok_embed;    // [input_vocab, dim]
    TensorT<S> class_embed;  // [class_count + 1, dim]; last row = null class
    TensorT<S> pos_embed;    // [seq_len + 1, dim]

    struct Layer {
        TensorT<S> att_norm, wq, wk, wv, wo;
        TensorT<S> mlp_norm, w1, b1, w2, b2;
    };
    std::vector<Layer> layers;
    TensorT<S> final_norm;
    TensorT<S> head;  // [dim, vocab]

    static TransformerParamsT init(const TransformerConfig& cfg, Rng& rng) {
        cfg.validate();
        const S wstd = S(0.02);
        TransformerParamsT p;
        p.config = cfg;
        p.tok_embed = TensorT<S>::randn({cfg.input_vocab, cfg.dim}, rng, wstd);
        p.class_embed = TensorT<S>::randn({cfg.class_count + 1, cfg.dim}, rng, wstd);
        p.pos_embed = TensorT<S>::randn({cfg.seq_len + 1, cfg.dim}, rng, wstd);
        p.layers.resize(static_cast<size_t>(cfg.layers));
        const int64_t hidden = cfg.mlp_ratio * cfg.dim;
        for (auto& l : p.layers) {
            l.att_norm = TensorT<S>::full({cfg.dim}, S(1));
            l.wq = TensorT<S>::randn({cfg.dim, cfg.dim}, rng, wstd);
            l.wk = TensorT<S>::randn({cfg.dim, cfg.dim}, rng, wstd);
            l.wv = TensorT<S>::randn({cfg.dim, cfg.dim}, rng, wstd);
            l.wo = TensorT<S>::randn({cfg.dim, cfg.dim}, rng, wstd);
            l.mlp_norm = TensorT<S>::full({cfg.dim}, S(1));
            l.w1 = TensorT<S>::randn({cfg.dim, hidden}, rng, wstd);
            l.b1 = TensorT<S>::zeros({hidden});
            l.w2 = TensorT<S>::randn({hidden, cfg.dim}, rng, wstd);
            l.b2 = TensorT<S>::zeros({cfg.dim});
        }
        p.final_norm = TensorT<S>::full({cfg.dim}, S(1));
        p.head = TensorT<S>::randn({cfg.dim, cfg.vocab}, rng, wstd);
        return p;
    }

    std::vector<std::pair<std::string, TensorT<S>*>> named_params() {
        std::vector<std::pair<std::string, TensorT<S>*>> out = {
            {"tok_embed", &tok_embed},
            {"class_embed", &class_embed},
            {"pos_embed", &pos_embed},
        };
        for (size_t i = 0; i < layers.size(); ++i) {
            const std::string prefix = "layer" + std::to_string(i) + ".";
            out.emplace_back(prefix + "att_norm", &layers[i].att_norm);
            out.emplace_back(prefix + "wq", &layers[i].wq);
            out.emplace_back(prefix + "wk", &layers[i].wk);
            out.emplace_back(prefix + "wv", &layers[i].wv);
            out.emplace_back(prefix + "wo", &layers[i].wo);
            out.emplace_back(prefix + "mlp_norm", &layers[i].mlp_norm);
            out.emplace_back(prefix + "w1", &layers[i].w1);
            out.emplace_back(prefix + "b1", &layers[i].b1);
            out.emplace_back(prefix + "w2", &layers[i].w2);
            out.emplace_back(prefix + "b2", &layers[i].b2);
        }
        out.emplace_back("final_norm", &final_norm);
        out.emplace_back("head", &head);
        return out;
    }

    std::vector<TensorT<S>*> param_list() {
        std::vector<TensorT<S>*> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }
};

using TransformerParams = TransformerParamsT<float>;

template <typename S>
int64_t count_params(TransformerParamsT<S>& params) {
    int64_t total = 0;
    for (auto& [name, t] : params.named_params()) total += t->numel();
    return total;
}

// ---------------------------------------------------------------- full forward

template <typename S>
TensorT<S> trunk_forward(TapeT<S>& tape, TransformerParamsT<S>& p, TensorT<S> x, bool causal) {
    for (auto& l : p.layers) {
        TensorT<S> h = rmsnorm(tape, x, l.att_norm);
        TensorT<S> q = matmul(tape, h, l.wq);
        TensorT<S> k = matmul(tape, h, l.wk);
        TensorT<S> v = matmul(tape, h, l.wv);
        TensorT<S> att = attention(tape, q, k, v, p.config.heads, causal);
        x = add(tape, x, matmul(tape, att, l.wo));
        TensorT<S> h2 = rmsnorm(tape, x, l.mlp_norm);
        TensorT<S> m = gelu(tape, add_bias(tape, matmul(tape, h2, l.w1), l.b1));
        x = add(tape, x, add_bias(tape, matmul(tape, m, l.w2), l.b2));
    }
    return rmsnorm(tape, x, p.final_norm);
}

// Embeds [class?, tokens...] with positions and runs the trunk; returns the
// hidden rows (seq rows + optional leading class row).
template <typename S>
TensorT<S> sequence_hidden(TapeT<S>& tape, TransformerParamsT<S>& p,
                           const std::vector<int32_t>& tokens, int64_t class_index) {
    const TransformerConfig& cfg = p.config;
    for (int32_t t : tokens) {
        check(t >= 0 && t < cfg.input_vocab, ErrKind::index,
              "token " + std::to_string(t) + " outside input vocabulary of " +
                  std::to_string(cfg.input_vocab));
    }
    TensorT<S> rows;
    if (cfg.class_token) {
        check(class_index >= 0 && class_index <= cfg.class_count, ErrKind::index,
              "class index out of range (null class is " + std::to_string(cfg.class_count) + ")");
        TensorT<S> cls = embed(tape, p.class_embed, {static_cast<int32_t>(class_index)});
        if (tokens.empty()) {
            rows = cls;
        } else {
            rows = concat_rows(tape, cls, embed(tape, p.tok_embed, tokens));
        }
    } else {
        check(!tokens.empty(), ErrKind::shape, "class-free input needs at least one token");
        rows = embed(tape, p.tok_embed, tokens);
    }
    const int64_t t = rows.dim(0);
    check(t <= cfg.seq_len + 1, ErrKind::shape, "sequence longer than the configured length");
    TensorT<S> pos = slice_rows(tape, p.pos_embed, 0, t);
    TensorT<S> x = add(tape, rows, pos);
    return trunk_forward(tape, p, x, cfg.attention == AttentionKind::causal);
}

// Next-token logits for every prefix position: row i of the result predicts
// tokens[i] given the class row and tokens[0..i).
template <typename S>
TensorT<S> ar_prediction_logits(TapeT<S>& tape, TransformerParamsT<S>& p,
                                const std::vector<int32_t>& tokens, int64_t class_index) {
    check(p.config.class_token, ErrKind::config, "causal decoding requires the class row");
    TensorT<S> hidden = sequence_hidden(tape, p, tokens, class_index);
    TensorT<S> ctx = slice_rows(tape, hidden, 0, static_cast<int64_t>(tokens.size()));
    return matmul(tape, ctx, p.head);
}

// Full-recompute logits for the next position after a prefix.
template <typename S>
std::vector<S> ar_next_logits(TransformerParamsT<S>& p, const std::vector<int32_t>& prefix,
                              int64_t class_index) {
    check(static_cast<int64_t>(prefix.size()) < p.config.seq_len, ErrKind::shape,
          "prefix already fills the sequence");
    TapeT<S> tape(false);
    TensorT<S> hidden = sequence_hidden(tape, p, prefix, class_index);
    TensorT<S> last = slice_rows(tape, hidden, hidden.dim(0) - 1, 1);
    TensorT<S> logits = matmul(tape, last, p.head);
    return std::vector<S>(logits.ptr(), logits.ptr() + logits.numel());
}

// Per-position logits over the fine vocabulary given the whole coarse grid
// (bidirectional attention, one pass).
template <typename S>
TensorT<S> fine_prediction_logits(TapeT<S>& tape, TransformerParamsT<S>& p,
                                  const std::vector<int32_t>& coarse, int64_t class_index) {
    check(p.config.attention == AttentionKind::full, ErrKind::config,
          "fine predictor must use full attention");
    TensorT<S> hidden = sequence_hidden(tape, p, coarse, class_index);
    const int64_t start = p.config.class_token ? 1 : 0;
    TensorT<S> ctx = slice_rows(tape, hidden, start, static_cast<int64_t>(coarse.size()));
    return matmul(tape, ctx, p.head);
}

// ---------------------------------------------------------------- losses

template <typename S>
struct SequenceExample {
    std::vector<int32_t> tokens;  // length seq_len, row-major grid flattening
    int32_t class_index = 0;
};

// Mean next-token NLL over every position of every sequence (the class row is
// a condition, not a target).
template <typename S>
TensorT<S> ar_loss(TapeT<S>& tape, TransformerParamsT<S>& p,
                   const std::vector<SequenceExample<S>>& batch) {
    check(!batch.empty(), ErrKind::shape, "ar_loss: empty batch");
    TensorT<S> all_logits;
    std::vector<int32_t> all_targets;
    for (const auto& ex : batch) {
        check(static_cast<int64_t>(ex.tokens.size()) == p.config.seq_len, ErrKind::shape,
              "ar_loss: sequence length mismatch");
        TensorT<S> logits = ar_prediction_logits(tape, p, ex.tokens, ex.class_index);
        all_logits = all_logits.numel() == 0 ? logits : concat_rows(tape, all_logits, logits);
        all_targets.insert(all_targets.end(), ex.tokens.begin(), ex.tokens.end());
    }
    return cross_entropy(tape, all_logits, all_targets);
}

// Mean fine-token NLL given teacher-forced coarse labels. In restricted mode
// the softmax is renormalized over the members of each position's cluster.
template <typename S>
TensorT<S> fine_loss(TapeT<S>& tape, TransformerParamsT<S>& p,
                     const std::vector<SequenceExample<S>>& batch, const ClusterMap& map,
                     bool cluster_restricted) {
    check(!batch.empty(), ErrKind::shape, "fine_loss: empty batch");
    constexpr S kMaskOff = S(-1e30);
    TensorT<S> all_logits;
    std::vector<int32_t> all_targets;
    for (const auto& ex : batch) {
        check(static_cast<int64_t>(ex.tokens.size()) == p.config.seq_len, ErrKind::shape,
              "fine_loss: sequence length mismatch");
        std::vector<int32_t> coarse(ex.tokens.size());
        for (size_t i = 0; i < ex.tokens.size(); ++i) coarse[i] = map.phi(ex.tokens[i]);
        TensorT<S> logits = fine_prediction_logits(tape, p, coarse, ex.class_index);
        if (cluster_restricted) {
            TensorT<S> mask(logits.shape);
            for (int64_t r = 0; r < logits.dim(0); ++r) {
                S* mrow = mask.ptr() + r * logits.dim(1);
                for (int64_t j = 0; j < logits.dim(1); ++j) mrow[j] = kMaskOff;
                for (int32_t member : map.members(coarse[static_cast<size_t>(r)])) {
                    mrow[member] = S(0);
                }
            }
            logits = add(tape, logits, mask);
        }
        all_logits = all_logits.numel() == 0 ? logits : concat_rows(tape, all_logits, logits);
        all_targets.insert(all_targets.end(), ex.tokens.begin(), ex.tokens.end());
    }
    return cross_entropy(tape, all_logits, all_targets);
}

// ---------------------------------------------------------------- incremental decode

template <typename S>
struct KVCacheT {
    int64_t layers = 0, dim = 0, capacity = 0;
    int64_t len = 0;
    std::vector<std::vector<S>> keys;    // per layer, [capacity * dim]
    std::vector<std::vector<S>> values;  // per layer, [capacity * dim]

    static KVCacheT make(const TransformerConfig& cfg) {
        KVCacheT c;
        c.layers = cfg.layers;
        c.dim = cfg.dim;
        c.capacity = cfg.seq_len + 1;
        c.keys.assign(static_cast<size_t>(cfg.layers),
                      std::vector<S>(static_cast<size_t>(c.capacity * cfg.dim), S(0)));
        c.values = c.keys;
        return c;
    }

    void reset() { len = 0; }
};

using KVCache = KVCacheT<float>;

namespace detail {

template <typename S>
void rmsnorm_row(const S* x, const S* gain, S* out, int64_t n) {
    S ms = S(0);
    for (int64_t j = 0; j < n; ++j) ms += x[j] * x[j];
    const S r = S(1) / std::sqrt(ms / static_cast<S>(n) + static_cast<S>(kRmsNormEps));
    for (int64_t j = 0; j < n; ++j) out[j] = x[j] * r * gain[j];
}

}  // namespace detail

// Runs one position through the trunk with cached attention state, appending
// this position's keys/values. Input ids: class row when cache is empty and
// the model uses one, token ids after.
template <typename S>
std::vector<S> decode_step(TransformerParamsT<S>& p, KVCacheT<S>& cache, int32_t token_or_class,
                           bool is_class) {
    const TransformerConfig& cfg = p.config;
    check(cache.len < cache.capacity, ErrKind::shape, "decode past the sequence capacity");
    const int64_t dim = cfg.dim, heads = cfg.heads, hd = dim / heads;
    const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));

    std::vector<S> x(static_cast<size_t>(dim));
    if (is_class) {
        check(token_or_class >= 0 && token_or_class <= cfg.class_count, ErrKind::index,
              "class index out of range");
        const S* row = p.class_embed.ptr() + static_cast<int64_t>(token_or_class) * dim;
        std::copy(row, row + dim, x.begin());
    } else {
        check(token_or_class >= 0 && token_or_class < cfg.input_vocab, ErrKind::index,
              "token outside input vocabulary");
        const S* row = p.tok_embed.ptr() + static_cast<int64_t>(token_or_class) * dim;
        std::copy(row, row + dim, x.begin());
    }
    const S* pos = p.pos_embed.ptr() + cache.len * dim;
    for (int64_t j = 0; j < dim; ++j) x[static_cast<size_t>(j)] += pos[j];

    std::vector<S> h(static_cast<size_t>(dim));
    std::vector<S> q(static_cast<size_t>(dim));
    std::vector<S> att(static_cast<size_t>(dim));
    std::vector<S> scores(static_cast<size_t>(cache.len + 1));
    std::vector<S> hidden(static_cast<size_t>(cfg.mlp_ratio * dim));
    std::vector<S> delta(static_cast<size_t>(dim));

    for (int64_t li = 0; li < cfg.layers; ++li) {
        auto& l = p.layers[static_cast<size_t>(li)];
        detail::rmsnorm_row(x.data(), l.att_norm.ptr(), h.data(), dim);
        S* krow = cache.keys[static_cast<size_t>(li)].data() + cache.len * dim;
        S* vrow = cache.values[static_cast<size_t>(li)].data() + cache.len * dim;
        gemv(h.data(), l.wq.ptr(), q.data(), dim, dim);
        gemv(h.data(), l.wk.ptr(), krow, dim, dim);
        gemv(h.data(), l.wv.ptr(), vrow, dim, dim);

        const int64_t t = cache.len + 1;
        const S* keys = cache.keys[static_cast<size_t>(li)].data();
        const S* vals = cache.values[static_cast<size_t>(li)].data();
        for (int64_t hh = 0; hh < heads; ++hh) {
            const int64_t off = hh * hd;
            S mx = -std::numeric_limits<S>::infinity();
            for (int64_t j = 0; j < t; ++j) {
                S acc = S(0);
                const S* kj = keys + j * dim + off;
                for (int64_t c = 0; c < hd; ++c) acc += q[static_cast<size_t>(off + c)] * kj[c];
                acc *= att_scale;
                scores[static_cast<size_t>(j)] = acc;
                mx = std::max(mx, acc);
            }
            S denom = S(0);
            for (int64_t j = 0; j < t; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                denom += scores[static_cast<size_t>(j)];
            }
            const S inv = S(1) / denom;
            for (int64_t c = 0; c < hd; ++c) att[static_cast<size_t>(off + c)] = S(0);
            for (int64_t j = 0; j < t; ++j) {
                const S w = scores[static_cast<size_t>(j)] * inv;
                const S* vj = vals + j * dim + off;
                for (int64_t c = 0; c < hd; ++c) att[static_cast<size_t>(off + c)] += w * vj[c];
            }
        }
        gemv(att.data(), l.wo.ptr(), delta.data(), dim, dim);
        for (int64_t j = 0; j < dim; ++j) x[static_cast<size_t>(j)] += delta[static_cast<size_t>(j)];

        detail::rmsnorm_row(x.data(), l.mlp_norm.ptr(), h.data(), dim);
        gemv(h.data(), l.w1.ptr(), hidden.data(), dim, cfg.mlp_ratio * dim);
        for (int64_t j = 0; j < cfg.mlp_ratio * dim; ++j) {
            hidden[static_cast<size_t>(j)] =
                detail::gelu_fwd(hidden[static_cast<size_t>(j)] + l.b1[j]);
        }
        gemv(hidden.data(), l.w2.ptr(), delta.data(), cfg.mlp_ratio * dim, dim);
        for (int64_t j = 0; j < dim; ++j) {
            x[static_cast<size_t>(j)] += delta[static_cast<size_t>(j)] + l.b2[j];
        }
    }
    detail::rmsnorm_row(x.data(), p.final_norm.ptr(), h.data(), dim);
    std::vector<S> logits(static_cast<size_t>(p.config.vocab));
    gemv(h.data(), p.head.ptr(), logits.data(), dim, p.config.vocab);
    cache.len += 1;
    return logits;
}

}  // namespace ctf
