#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ctf/autograd.hpp"
#include "ctf/error.hpp"
#include "ctf/image.hpp"
#include "ctf/optim.hpp"
#include "ctf/rng.hpp"
#include "ctf/synth.hpp"
#include "ctf/tensor.hpp"

namespace ctf {

struct Codebook {
    Tensor entries;  // [K, d]

    Codebook() = default;
    explicit Codebook(Tensor e) : entries(std::move(e)) { validate(); }

    int64_t size() const { return entries.dim(0); }
    int64_t dim() const { return entries.dim(1); }

    void validate() const {
        check(entries.rank() == 2, ErrKind::shape, "codebook must be a K x d matrix");
        check(entries.dim(0) >= 2, ErrKind::param, "codebook needs at least 2 entries");
        check(!has_nonfinite(entries), ErrKind::param, "codebook contains non-finite values");
    }
};

// h x w grid of d-dim latents, stored as a [h*w, d] matrix
struct LatentGrid {
    int64_t h = 0, w = 0;
    Tensor values;
};

// h x w grid of codebook indices, flattened row-major
struct TokenGrid {
    int64_t h = 0, w = 0;
    std::vector<int32_t> tokens;

    int64_t size() const { return h * w; }
};

struct TokenizerParams {
    int64_t patch = 4;
    Tensor enc_w;  // [patch*patch*3, d]
    Tensor enc_b;  // [d]
    Tensor dec_w;  // [d, patch*patch*3]
    Tensor dec_b;  // [patch*patch*3]
    Codebook codebook;

    int64_t latent_dim() const { return enc_w.dim(1); }

    std::vector<std::pair<std::string, Tensor*>> named_params() {
        return {{"enc_w", &enc_w},
                {"enc_b", &enc_b},
                {"dec_w", &dec_w},
                {"dec_b", &dec_b},
                {"codebook", &codebook.entries}};
    }

    static TokenizerParams init(int64_t codebook_size, int64_t latent_dim, int64_t patch,
                                Rng& rng) {
        check(codebook_size >= 2, ErrKind::param, "codebook size must be >= 2");
        TokenizerParams p;
        p.patch = patch;
        const int64_t pv = patch * patch * 3;
        p.enc_w = Tensor::randn({pv, latent_dim}, rng,
                                1.0f / std::sqrt(static_cast<float>(pv)));
        p.enc_b = Tensor::zeros({latent_dim});
        p.dec_w = Tensor::randn({latent_dim, pv}, rng,
                                1.0f / std::sqrt(static_cast<float>(latent_dim)));
        p.dec_b = Tensor::zeros({pv});
        p.codebook = Codebook(Tensor::randn({codebook_size, latent_dim}, rng,
                                            1.0f / std::sqrt(static_cast<float>(latent_dim))));
        return p;
    }
};

// ------------------------------------------------------------------ patching

inline Tensor patchify(const Image& img, int64_t patch) {
    check(patch > 0 && img.height % patch == 0 && img.width % patch == 0, ErrKind::param,
          "image dimensions must divide by the patch size");
    const int64_t gh = img.height / patch, gw = img.width / patch;
    Tensor out({gh * gw, patch * patch * 3});
    int64_t row = 0;
    for (int64_t py = 0; py < gh; ++py) {
        for (int64_t px = 0; px < gw; ++px, ++row) {
            float* dst = out.ptr() + row * out.dim(1);
            for (int64_t y = 0; y < patch; ++y) {
                for (int64_t x = 0; x < patch; ++x) {
                    for (int64_t c = 0; c < 3; ++c) {
                        *dst++ = img.at(py * patch + y, px * patch + x, c);
                    }
                }
            }
        }
    }
    return out;
}

inline Image unpatchify(const Tensor& patches, int64_t gh, int64_t gw, int64_t patch) {
    check(patches.rank() == 2 && patches.dim(0) == gh * gw &&
              patches.dim(1) == patch * patch * 3,
          ErrKind::shape, "unpatchify: patch matrix has wrong shape");
    Image img(gh * patch, gw * patch);
    int64_t row = 0;
    for (int64_t py = 0; py < gh; ++py) {
        for (int64_t px = 0; px < gw; ++px, ++row) {
            const float* src = patches.ptr() + row * patches.dim(1);
            for (int64_t y = 0; y < patch; ++y) {
                for (int64_t x = 0; x < patch; ++x) {
                    for (int64_t c = 0; c < 3; ++c) {
                        img.at(py * patch + y, px * patch + x, c) = *src++;
                    }
                }
            }
        }
    }
    return img;
}

// ------------------------------------------------------------------ encode / quantize / decode

inline LatentGrid encode(const Image& img, const TokenizerParams& params) {
    Tensor patches = patchify(img, params.patch);
    Tape tape(false);
    LatentGrid latent;
    latent.h = img.height / params.patch;
    latent.w = img.width / params.patch;
    latent.values = add_bias(tape, matmul(tape, patches, params.enc_w), params.enc_b);
    return latent;
}

// nearest codeword per cell; ties break to the lowest index
inline std::pair<TokenGrid, LatentGrid> quantize(const LatentGrid& latent,
                                                 const Codebook& codebook) {
    check(codebook.size() >= 2, ErrKind::param, "quantize: empty or degenerate codebook");
    check(latent.values.dim(1) == codebook.dim(), ErrKind::shape,
          "quantize: latent dim does not match codebook dim");
    const int64_t n = latent.values.dim(0), d = codebook.dim(), k = codebook.size();
    TokenGrid tokens;
    tokens.h = latent.h;
    tokens.w = latent.w;
    tokens.tokens.resize(static_cast<size_t>(n));
    LatentGrid quantized;
    quantized.h = latent.h;
    quantized.w = latent.w;
    quantized.values = Tensor({n, d});
    for (int64_t i = 0; i < n; ++i) {
        const float* z = latent.values.ptr() + i * d;
        float best = std::numeric_limits<float>::infinity();
        int64_t best_k = 0;
        for (int64_t c = 0; c < k; ++c) {
            const float* e = codebook.entries.ptr() + c * d;
            float dist = 0.f;
            for (int64_t j = 0; j < d; ++j) {
                const float diff = z[j] - e[j];
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                best_k = c;
            }
        }
        tokens.tokens[static_cast<size_t>(i)] = static_cast<int32_t>(best_k);
        std::memcpy(quantized.values.ptr() + i * d, codebook.entries.ptr() + best_k * d,
                    static_cast<size_t>(d) * sizeof(float));
    }
    return {tokens, quantized};
}

inline Image decode_tokens(const TokenGrid& tokens, const TokenizerParams& params) {
    const int64_t k = params.codebook.size();
    for (int32_t t : tokens.tokens) {
        check(t >= 0 && t < k, ErrKind::index,
              "decode_tokens: token " + std::to_string(t) + " outside codebook of " +
                  std::to_string(k));
    }
    Tape tape(false);
    Tensor codes = embed(tape, params.codebook.entries, tokens.tokens);
    Tensor patches = add_bias(tape, matmul(tape, codes, params.dec_w), params.dec_b);
    Image img = unpatchify(patches, tokens.h, tokens.w, params.patch);
    img.clamp01();
    return img;
}

inline TokenGrid tokenize(const Image& img, const TokenizerParams& params) {
    return quantize(encode(img, params), params.codebook).first;
}

// ------------------------------------------------------------------ training

struct TokenizerTrainConfig {
    int64_t codebook_size = 64;
    int64_t latent_dim = 16;
    int64_t patch = 4;
    int64_t epochs = 80;
    int64_t batch_images = 32;
    double lr_init = 8e-3;
    double lr_final = 4e-4;
    float commitment_beta = 0.25f;
    uint64_t seed = 0;
};

struct TokenizerTrainReport {
    std::vector<double> loss_curve;  // one entry per step
    double final_recon_mse = 0.0;    // per pixel channel, via full encode/decode
    double codebook_usage = 0.0;     // fraction of entries used on the training set
    int64_t steps = 0;
};

// Reconstruction + codebook + commitment objective with a straight-through
// gradient across the quantizer.
inline TokenizerTrainReport train_tokenizer(const LabeledDataset& dataset,
                                            const TokenizerTrainConfig& cfg,
                                            TokenizerParams& params) {
    check(!dataset.images.empty(), ErrKind::param, "train_tokenizer: empty dataset");
    Rng rng = Rng(cfg.seed).split(17);

    // all patches of the dataset, gathered once
    std::vector<Tensor> patch_mats;
    patch_mats.reserve(dataset.images.size());
    for (const Image& img : dataset.images) patch_mats.push_back(patchify(img, cfg.patch));

    std::vector<size_t> order(dataset.images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto named = params.named_params();
    std::vector<Tensor*> plist;
    for (auto& [name, t] : named) plist.push_back(t);
    AdamWState opt;
    opt.weight_decay = 0.f;  // decay would drag codewords toward the origin
    opt.init(plist);

    const int64_t batches_per_epoch =
        std::max<int64_t>(1, static_cast<int64_t>(dataset.images.size()) / cfg.batch_images);
    const int64_t total_steps = std::max<int64_t>(1, cfg.epochs * batches_per_epoch);

    TokenizerTrainReport report;
    int64_t step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.split(static_cast<uint64_t>(epoch));
        erng.shuffle(order.begin(), order.end());
        for (int64_t b = 0; b < batches_per_epoch; ++b, ++step) {
            // assemble the patch rows of this batch
            std::vector<const Tensor*> batch;
            for (int64_t i = 0; i < cfg.batch_images; ++i) {
                batch.push_back(
                    &patch_mats[order[static_cast<size_t>((b * cfg.batch_images + i) %
                                                          static_cast<int64_t>(order.size()))]]);
            }
            const int64_t rows_per = batch[0]->dim(0), pv = batch[0]->dim(1);
            Tensor patches({static_cast<int64_t>(batch.size()) * rows_per, pv});
            for (size_t i = 0; i < batch.size(); ++i) {
                std::memcpy(patches.ptr() + static_cast<int64_t>(i) * rows_per * pv,
                            batch[i]->ptr(), static_cast<size_t>(rows_per * pv) * sizeof(float));
            }

            Tape tape;
            tape.watch(params.enc_w);
            tape.watch(params.enc_b);
            tape.watch(params.dec_w);
            tape.watch(params.dec_b);
            tape.watch(params.codebook.entries);

            Tensor z = add_bias(tape, matmul(tape, patches, params.enc_w), params.enc_b);

            LatentGrid zg{1, z.dim(0), z};
            auto [tok, zq] = quantize(zg, params.codebook);

            // straight-through: z + const(zq - z) carries decoder gradients to the encoder
            Tensor st_delta(z.shape);
            for (int64_t i = 0; i < z.numel(); ++i) st_delta[i] = zq.values[i] - z[i];
            Tensor z_st = add(tape, z, st_delta);

            Tensor recon = add_bias(tape, matmul(tape, z_st, params.dec_w), params.dec_b);
            Tensor err = sub(tape, recon, patches);
            Tensor loss_recon = mean_all(tape, mul(tape, err, err));

            Tensor z_const(z.shape, std::vector<float>(z.ptr(), z.ptr() + z.numel()));
            Tensor selected = embed(tape, params.codebook.entries, tok.tokens);
            Tensor cb_err = sub(tape, selected, z_const);
            Tensor loss_codebook = mean_all(tape, mul(tape, cb_err, cb_err));

            Tensor commit_err = sub(tape, z, zq.values);
            Tensor loss_commit = mean_all(tape, mul(tape, commit_err, commit_err));

            Tensor loss = add(tape, add(tape, loss_recon, loss_codebook),
                              scale(tape, loss_commit, cfg.commitment_beta));
            if (!std::isfinite(loss.item())) {
                fail(ErrKind::train,
                     "tokenizer training diverged (non-finite loss) at step " +
                         std::to_string(step));
            }
            tape.backward(loss);

            std::vector<std::vector<float>> grads;
            for (Tensor* p : plist) {
                auto g = tape.grad(*p);
                grads.emplace_back(g.begin(), g.end());
            }
            const float lr = static_cast<float>(
                cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_final));
            adamw_step(plist, grads, opt, lr);
            report.loss_curve.push_back(static_cast<double>(loss.item()));
        }
    }
    report.steps = step;

    // reconstruction quality and codebook usage over the whole dataset
    std::vector<uint8_t> used(static_cast<size_t>(params.codebook.size()), 0);
    double mse_acc = 0.0;
    for (const Image& img : dataset.images) {
        TokenGrid tg = tokenize(img, params);
        for (int32_t t : tg.tokens) used[static_cast<size_t>(t)] = 1;
        mse_acc += mean_squared_error(decode_tokens(tg, params), img);
    }
    report.final_recon_mse = mse_acc / static_cast<double>(dataset.images.size());
    int64_t used_count = 0;
    for (uint8_t u : used) used_count += u;
    report.codebook_usage =
        static_cast<double>(used_count) / static_cast<double>(params.codebook.size());
    return report;
}

// ------------------------------------------------------------------ CBK1 file format

// magic "CBK1", u32 K, u32 d, then K*d little-endian f32 row-major
inline void export_codebook(const Codebook& codebook, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), ErrKind::io, "cannot open for writing: " + path);
    out.write("CBK1", 4);
    const uint32_t k = static_cast<uint32_t>(codebook.size());
    const uint32_t d = static_cast<uint32_t>(codebook.dim());
    out.write(reinterpret_cast<const char*>(&k), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(codebook.entries.ptr()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(k) * d));
    check(out.good(), ErrKind::io, "short write: " + path);
}

inline Codebook import_codebook(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), ErrKind::io, "cannot open for reading: " + path);
    char magic[4] = {};
    in.read(magic, 4);
    check(in.gcount() == 4 && std::string(magic, 4) == "CBK1", ErrKind::format,
          "bad codebook magic at byte 0 in " + path);
    uint32_t k = 0, d = 0;
    in.read(reinterpret_cast<char*>(&k), 4);
    in.read(reinterpret_cast<char*>(&d), 4);
    check(in.good(), ErrKind::format, "truncated codebook header in " + path);
    check(k >= 2, ErrKind::format, "codebook entry count " + std::to_string(k) +
                                       " below minimum of 2 in " + path);
    check(d >= 1, ErrKind::format, "codebook dimension must be positive in " + path);
    Tensor entries({static_cast<int64_t>(k), static_cast<int64_t>(d)});
    in.read(reinterpret_cast<char*>(entries.ptr()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(k) * d));
    check(in.gcount() == static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(k) * d),
          ErrKind::format, "truncated codebook payload in " + path);
    return Codebook(entries);
}

}  // namespace ctf
