#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ctf/clustering.hpp"
#include "ctf/error.hpp"
#include "ctf/image.hpp"
#include "ctf/optim.hpp"
#include "ctf/rng.hpp"
#include "ctf/synth.hpp"
#include "ctf/tokenizer.hpp"
#include "ctf/transformer.hpp"

namespace ctf {

enum class ModelKind { stage1, stage2, baseline };

inline const char* model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::stage1:   return "stage1";
        case ModelKind::stage2:   return "stage2";
        case ModelKind::baseline: return "baseline";
    }
    return "unknown";
}

struct TrainConfig {
    int64_t epochs = 30;
    int64_t batch = 16;
    double lr_init = 1e-4;
    double lr_final = 1e-5;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float weight_decay = 0.05f;
    float clip_norm = 1.0f;
    float cfg_dropout = 0.1f;  // class row replaced by the null class
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;  // steps between snapshots; 0 = none
    int64_t max_steps = 0;         // 0 = run all epochs
    double stop_below_loss = 0.0;  // early exit once the loss drops below; 0 = off
    bool stage2_restricted = false;

    void validate() const {
        check(batch >= 1, ErrKind::config, "batch size must be at least 1");
        check(cfg_dropout >= 0.0f && cfg_dropout < 1.0f, ErrKind::config,
              "cfg_dropout must lie in [0, 1)");
        check(epochs >= 0, ErrKind::config, "epochs must be non-negative");
    }
};

struct SamplerConfig {
    float cfg_scale = 2.0f;
    float temp_stage1 = 1.1f;
    float temp_stage2 = 1.1f;
    int64_t top_k = 0;  // 0 = unrestricted
    bool cluster_mask = false;
    bool cfg_stage1 = true;
    bool cfg_stage2 = true;
    uint64_t seed = 0;

    void validate() const {
        check(temp_stage1 > 0.0f && temp_stage2 > 0.0f, ErrKind::config,
              "temperatures must be positive");
        check(top_k >= 0, ErrKind::config, "top_k must be 0 (unrestricted) or positive");
    }
};

struct LossCurvePoint {
    int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<LossCurvePoint> curve;
    int64_t steps = 0;
    double final_loss = 0.0;
};

// invoked after each finished epoch (1-based), e.g. for convergence tracking
using EpochCallback = std::function<void(int64_t epoch, TransformerParams& params)>;

// ---------------------------------------------------------------- training

// Tokenizes the dataset once, then optimizes the chosen model role with
// cosine-annealed AdamW and classifier-free-guidance dropout on the class row.
inline TrainResult train_model(ModelKind kind, const LabeledDataset& dataset,
                               const TokenizerParams& tokenizer, const ClusterMap* map,
                               const TrainConfig& cfg, TransformerParams& params,
                               const EpochCallback& on_epoch = {}) {
    cfg.validate();
    check(kind == ModelKind::baseline || map != nullptr, ErrKind::config,
          std::string(model_kind_name(kind)) + " training requires a cluster map");
    check(!dataset.images.empty(), ErrKind::config, "training dataset is empty");

    // fixed token targets for the whole run
    std::vector<SequenceExample<float>> examples;
    examples.reserve(dataset.images.size());
    for (size_t i = 0; i < dataset.images.size(); ++i) {
        TokenGrid fine = tokenize(dataset.images[i], tokenizer);
        check(static_cast<int64_t>(fine.tokens.size()) == params.config.seq_len, ErrKind::config,
              "token grid does not match the model sequence length");
        SequenceExample<float> ex;
        ex.class_index = dataset.labels[i];
        if (kind == ModelKind::stage1) {
            ex.tokens = coarsen(fine, *map).tokens;
        } else {
            ex.tokens = fine.tokens;
        }
        examples.push_back(std::move(ex));
    }

    auto plist = params.param_list();
    AdamWState opt;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.weight_decay = cfg.weight_decay;
    opt.max_grad_norm = cfg.clip_norm;
    opt.init(plist);

    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng root = Rng(cfg.seed).split(0x7A);

    const int64_t batches_per_epoch =
        std::max<int64_t>(1, static_cast<int64_t>(examples.size()) / cfg.batch);
    int64_t total_steps = cfg.epochs * batches_per_epoch;
    if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

    TrainResult result;
    int64_t step = 0;
    bool done = total_steps == 0;
    for (int64_t epoch = 0; !done && epoch < cfg.epochs; ++epoch) {
        Rng erng = root.split(static_cast<uint64_t>(epoch));
        erng.shuffle(order.begin(), order.end());
        for (int64_t b = 0; !done && b < batches_per_epoch; ++b) {
            std::vector<SequenceExample<float>> batch;
            batch.reserve(static_cast<size_t>(cfg.batch));
            for (int64_t i = 0; i < cfg.batch; ++i) {
                const size_t idx = order[static_cast<size_t>((b * cfg.batch + i) %
                                                             static_cast<int64_t>(order.size()))];
                batch.push_back(examples[idx]);
                if (cfg.cfg_dropout > 0.0f &&
                    erng.uniform() < static_cast<double>(cfg.cfg_dropout)) {
                    batch.back().class_index =
                        static_cast<int32_t>(params.config.null_class());
                }
            }

            Tape tape;
            for (Tensor* p : plist) tape.watch(*p);
            Tensor loss = kind == ModelKind::stage2
                              ? fine_loss(tape, params, batch, *map, cfg.stage2_restricted)
                              : ar_loss(tape, params, batch);
            if (!std::isfinite(loss.item())) {
                fail(ErrKind::train, std::string(model_kind_name(kind)) +
                                         " training hit a non-finite loss at step " +
                                         std::to_string(step));
            }
            tape.backward(loss);
            std::vector<std::vector<float>> grads;
            grads.reserve(plist.size());
            for (Tensor* p : plist) {
                auto g = tape.grad(*p);
                grads.emplace_back(g.begin(), g.end());
            }
            const double lr = cosine_lr(step, std::max<int64_t>(1, total_steps), cfg.lr_init,
                                        cfg.lr_final);
            adamw_step(plist, grads, opt, static_cast<float>(lr));

            result.curve.push_back({step, lr, static_cast<double>(loss.item())});
            result.final_loss = static_cast<double>(loss.item());
            ++step;
            done = step >= total_steps ||
                   (cfg.stop_below_loss > 0.0 &&
                    result.final_loss < cfg.stop_below_loss);
        }
    }
    result.steps = step;
    return result;
}

// ---------------------------------------------------------------- sampling

// guided = uncond + scale * (cond - uncond); the endpoints return their
// input bit-for-bit
inline std::vector<float> cfg_combine(const std::vector<float>& cond,
                                      const std::vector<float>& uncond, float scale) {
    check(cond.size() == uncond.size(), ErrKind::shape, "cfg_combine: shape mismatch");
    if (scale == 1.0f) return cond;
    if (scale == 0.0f) return uncond;
    std::vector<float> out(cond.size());
    for (size_t i = 0; i < cond.size(); ++i) {
        out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
    }
    return out;
}

// Top-k mask (ties keep the lowest index), temperature softmax, inverse-CDF
// draw. top_k = 0 samples the full distribution.
inline int64_t sample_categorical(std::span<const float> logits, float temperature, int64_t top_k,
                                  Rng& rng) {
    check(temperature > 0.0f, ErrKind::param, "sampling temperature must be positive");
    const int64_t n = static_cast<int64_t>(logits.size());
    check(n > 0, ErrKind::param, "sample_categorical: empty logits");
    check(top_k >= 0 && top_k <= n, ErrKind::param, "top_k outside {0} U [1, vocab]");

    std::vector<int64_t> keep;
    if (top_k >= 1 && top_k < n) {
        std::vector<int64_t> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), int64_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
            if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)]) {
                return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
            }
            return a < b;
        });
        keep.assign(idx.begin(), idx.begin() + top_k);
        std::sort(keep.begin(), keep.end());
    } else {
        keep.resize(static_cast<size_t>(n));
        std::iota(keep.begin(), keep.end(), int64_t{0});
    }

    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t i : keep) {
        const double v = static_cast<double>(logits[static_cast<size_t>(i)]);
        if (std::isfinite(v)) mx = std::max(mx, v / static_cast<double>(temperature));
    }
    check(std::isfinite(mx), ErrKind::sample, "no finite logits remain after masking");

    std::vector<double> probs(keep.size());
    double total = 0.0;
    for (size_t i = 0; i < keep.size(); ++i) {
        const double v = static_cast<double>(logits[static_cast<size_t>(keep[i])]);
        probs[i] = std::isfinite(v) ? std::exp(v / static_cast<double>(temperature) - mx) : 0.0;
        total += probs[i];
    }
    check(total > 0.0, ErrKind::sample, "sampling distribution has zero mass");

    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < keep.size(); ++i) {
        acc += probs[i];
        if (u < acc) return keep[i];
    }
    return keep.back();
}

// Autoregressive decode of a full coarse grid with paired conditional and
// unconditional caches for guidance.
inline CoarseGrid sample_coarse(int64_t class_index, TransformerParams& stage1,
                                const ClusterMap& map, const SamplerConfig& cfg, int64_t grid_h,
                                int64_t grid_w, Rng& rng) {
    cfg.validate();
    check(stage1.config.seq_len == grid_h * grid_w, ErrKind::config,
          "coarse model sequence length does not match the grid");
    check(stage1.config.vocab == map.clusters, ErrKind::config,
          "coarse model vocabulary does not match the cluster count");
    const bool guided = cfg.cfg_stage1 && stage1.config.class_token;

    KVCache cond_cache = KVCache::make(stage1.config);
    KVCache uncond_cache = KVCache::make(stage1.config);
    std::vector<float> cond = decode_step(stage1, cond_cache, static_cast<int32_t>(class_index), true);
    std::vector<float> uncond;
    if (guided) {
        uncond = decode_step(stage1, uncond_cache,
                             static_cast<int32_t>(stage1.config.null_class()), true);
    }

    CoarseGrid out;
    out.h = grid_h;
    out.w = grid_w;
    out.tokens.reserve(static_cast<size_t>(grid_h * grid_w));
    for (int64_t i = 0; i < grid_h * grid_w; ++i) {
        const std::vector<float> logits =
            guided ? cfg_combine(cond, uncond, cfg.cfg_scale) : cond;
        const int64_t label = sample_categorical(logits, cfg.temp_stage1, cfg.top_k, rng);
        out.tokens.push_back(static_cast<int32_t>(label));
        if (i + 1 < grid_h * grid_w) {
            cond = decode_step(stage1, cond_cache, static_cast<int32_t>(label), false);
            if (guided) {
                uncond = decode_step(stage1, uncond_cache, static_cast<int32_t>(label), false);
            }
        }
    }
    return out;
}

// One full-attention pass, then an independent draw per position; cluster
// masking restricts each position to the members of its coarse label.
inline TokenGrid sample_fine(const CoarseGrid& coarse, int64_t class_index,
                             TransformerParams& stage2, const ClusterMap& map,
                             const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    check(stage2.config.attention == AttentionKind::full, ErrKind::config,
          "fine sampling requires the full-attention model");
    const bool guided = cfg.cfg_stage2 && stage2.config.class_token;

    Tape tape(false);
    Tensor cond = fine_prediction_logits(tape, stage2, coarse.tokens, class_index);
    Tensor uncond;
    if (guided) {
        uncond = fine_prediction_logits(tape, stage2, coarse.tokens, stage2.config.null_class());
    }

    TokenGrid out;
    out.h = coarse.h;
    out.w = coarse.w;
    out.tokens.reserve(coarse.tokens.size());
    const int64_t vocab = stage2.config.vocab;
    for (int64_t i = 0; i < static_cast<int64_t>(coarse.tokens.size()); ++i) {
        std::vector<float> row(cond.ptr() + i * vocab, cond.ptr() + (i + 1) * vocab);
        if (guided) {
            std::vector<float> uncond_row(uncond.ptr() + i * vocab,
                                          uncond.ptr() + (i + 1) * vocab);
            row = cfg_combine(row, uncond_row, cfg.cfg_scale);
        }
        if (cfg.cluster_mask) {
            std::vector<float> masked(static_cast<size_t>(vocab),
                                      -std::numeric_limits<float>::infinity());
            for (int32_t member : map.members(coarse.tokens[static_cast<size_t>(i)])) {
                masked[static_cast<size_t>(member)] = row[static_cast<size_t>(member)];
            }
            row.swap(masked);
        }
        out.tokens.push_back(
            static_cast<int32_t>(sample_categorical(row, cfg.temp_stage2, cfg.top_k, rng)));
    }
    return out;
}

struct GenerateResult {
    Image image;
    CoarseGrid coarse;
    TokenGrid tokens;
    int64_t stage1_steps = 0;  // sequential model invocations
    int64_t stage2_steps = 0;  // parallel passes
};

// Full two-stage generation: N sequential coarse steps, one fine pass, then
// the decoder.
inline GenerateResult generate(int64_t class_index, TransformerParams& stage1,
                               TransformerParams& stage2, const ClusterMap& map,
                               const TokenizerParams& tokenizer, const SamplerConfig& cfg,
                               int64_t grid_h, int64_t grid_w) {
    Rng root(cfg.seed);
    Rng coarse_rng = root.split(0xA1);
    Rng fine_rng = root.split(0xA2);
    GenerateResult result;
    result.coarse = sample_coarse(class_index, stage1, map, cfg, grid_h, grid_w, coarse_rng);
    result.tokens = sample_fine(result.coarse, class_index, stage2, map, cfg, fine_rng);
    result.image = decode_tokens(result.tokens, tokenizer);
    result.stage1_steps = grid_h * grid_w;
    result.stage2_steps = 1;
    return result;
}

}  // namespace ctf
