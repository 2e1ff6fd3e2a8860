#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ctf/tokenizer.hpp"

using ctf::Codebook;
using ctf::Image;
using ctf::LatentGrid;
using ctf::Tensor;
using ctf::TokenGrid;
using ctf::TokenizerParams;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "ctf_tok_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

TokenizerParams tiny_params(uint64_t seed = 1) {
    ctf::Rng rng(seed);
    return TokenizerParams::init(8, 4, 4, rng);
}

}  // namespace

TEST_CASE("encode of a zero image with zero bias is a zero latent grid") {
    TokenizerParams p = tiny_params();
    for (int64_t i = 0; i < p.enc_b.numel(); ++i) p.enc_b[i] = 0.f;
    Image img(32, 32);
    LatentGrid z = ctf::encode(img, p);
    REQUIRE(z.h == 8);
    REQUIRE(z.w == 8);
    for (int64_t i = 0; i < z.values.numel(); ++i) REQUIRE(z.values[i] == 0.0f);
}

TEST_CASE("encode of a single patch matches the affine map by hand") {
    TokenizerParams p = tiny_params(3);
    ctf::Rng rng(5);
    Image img(4, 4);
    for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
    LatentGrid z = ctf::encode(img, p);
    REQUIRE(z.values.dim(0) == 1);

    Tensor patch = ctf::patchify(img, 4);
    for (int64_t j = 0; j < p.latent_dim(); ++j) {
        double acc = static_cast<double>(p.enc_b[j]);
        for (int64_t i = 0; i < patch.dim(1); ++i) {
            acc += static_cast<double>(patch[i]) * static_cast<double>(p.enc_w.at(i, j));
        }
        REQUIRE(std::abs(acc - static_cast<double>(z.values[j])) < 1e-6);
    }
}

TEST_CASE("encode rejects images that do not divide into patches") {
    TokenizerParams p = tiny_params();
    Image img(30, 32);
    REQUIRE_THROWS_AS(ctf::encode(img, p), ctf::Error);
}

TEST_CASE("quantize picks exact matches and nearest codewords") {
    Tensor entries({4, 2}, {0.f, 0.f, 1.f, 1.f, 2.f, 2.f, 5.f, 5.f});
    Codebook cb(entries);
    LatentGrid z;
    z.h = 1;
    z.w = 1;
    z.values = Tensor({1, 2}, {2.f, 2.f});
    auto [tokens, zq] = ctf::quantize(z, cb);
    REQUIRE(tokens.tokens[0] == 2);
    REQUIRE(zq.values[0] == 2.f);
    REQUIRE(zq.values[1] == 2.f);
}

TEST_CASE("quantize distance arithmetic in one dimension") {
    // codewords {0, 10}: z=4 is closer to 0 (16 < 36)
    Codebook cb(Tensor({2, 1}, {0.f, 10.f}));
    LatentGrid z;
    z.h = 1;
    z.w = 1;
    z.values = Tensor({1, 1}, {4.f});
    auto [tokens, zq] = ctf::quantize(z, cb);
    REQUIRE(tokens.tokens[0] == 0);
}

TEST_CASE("quantize breaks ties toward the lowest index") {
    Codebook cb(Tensor({2, 1}, {-1.f, 1.f}));
    LatentGrid z;
    z.h = 1;
    z.w = 1;
    z.values = Tensor({1, 1}, {0.f});
    auto [tokens, zq] = ctf::quantize(z, cb);
    REQUIRE(tokens.tokens[0] == 0);
}

TEST_CASE("quantize is idempotent and dominates every other codeword") {
    ctf::Rng rng(13);
    Codebook cb(Tensor::randn({16, 4}, rng));
    LatentGrid z;
    z.h = 4;
    z.w = 4;
    z.values = Tensor::randn({16, 4}, rng);
    auto [tokens, zq] = ctf::quantize(z, cb);
    auto [tokens2, zq2] = ctf::quantize(zq, cb);
    REQUIRE(tokens.tokens == tokens2.tokens);

    for (int64_t i = 0; i < 16; ++i) {
        const float* zp = z.values.ptr() + i * 4;
        double chosen = 0.0;
        const float* e = cb.entries.ptr() + tokens.tokens[static_cast<size_t>(i)] * 4;
        for (int64_t j = 0; j < 4; ++j) chosen += (zp[j] - e[j]) * (zp[j] - e[j]);
        for (int64_t c = 0; c < 16; ++c) {
            const float* ec = cb.entries.ptr() + c * 4;
            double dist = 0.0;
            for (int64_t j = 0; j < 4; ++j) dist += (zp[j] - ec[j]) * (zp[j] - ec[j]);
            REQUIRE(chosen <= dist + 1e-12);
        }
    }
}

TEST_CASE("decode_tokens validates indices and is a pure function") {
    TokenizerParams p = tiny_params(7);
    TokenGrid tg;
    tg.h = 2;
    tg.w = 2;
    tg.tokens = {0, 1, 2, 9};
    REQUIRE_THROWS_AS(ctf::decode_tokens(tg, p), ctf::Error);
    tg.tokens = {0, 1, 2, 3};
    Image a = ctf::decode_tokens(tg, p);
    Image b = ctf::decode_tokens(tg, p);
    REQUIRE(a.pixels == b.pixels);
}

TEST_CASE("uniform token grid decodes to repeated identical patches") {
    TokenizerParams p = tiny_params(11);
    TokenGrid tg;
    tg.h = 3;
    tg.w = 3;
    tg.tokens.assign(9, 5);
    Image img = ctf::decode_tokens(tg, p);
    for (int64_t py = 0; py < 3; ++py) {
        for (int64_t px = 0; px < 3; ++px) {
            for (int64_t y = 0; y < 4; ++y) {
                for (int64_t x = 0; x < 4; ++x) {
                    for (int64_t c = 0; c < 3; ++c) {
                        REQUIRE(img.at(py * 4 + y, px * 4 + x, c) == img.at(y, x, c));
                    }
                }
            }
        }
    }
}

TEST_CASE("identity-style construction reconstructs exactly up to clamping") {
    // d = patch*patch*3 with identity encoder/decoder and the observed patch
    // vectors as codewords reproduces the image
    const int64_t patch = 4, pv = patch * patch * 3;
    auto ds = ctf::generate_dataset(2, 1, 8, 8, 21);
    const Image& img = ds.images[0];
    Tensor patches = ctf::patchify(img, patch);

    TokenizerParams p;
    p.patch = patch;
    p.enc_w = Tensor::zeros({pv, pv});
    for (int64_t i = 0; i < pv; ++i) p.enc_w.at(i, i) = 1.f;
    p.enc_b = Tensor::zeros({pv});
    p.dec_w = p.enc_w;
    p.dec_b = Tensor::zeros({pv});
    p.codebook = Codebook(patches);

    TokenGrid tg = ctf::tokenize(img, p);
    Image back = ctf::decode_tokens(tg, p);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        REQUIRE(back.pixels[i] == Catch::Approx(img.pixels[i]).margin(1e-6));
    }
}

TEST_CASE("zero training epochs leave parameters at initialization") {
    auto ds = ctf::generate_dataset(2, 2, 32, 32, 4);
    ctf::Rng rng(2);
    TokenizerParams p = TokenizerParams::init(16, 8, 4, rng);
    TokenizerParams copy = p;
    std::vector<float> before(p.enc_w.ptr(), p.enc_w.ptr() + p.enc_w.numel());
    ctf::TokenizerTrainConfig cfg;
    cfg.codebook_size = 16;
    cfg.latent_dim = 8;
    cfg.epochs = 0;
    ctf::train_tokenizer(ds, cfg, p);
    for (int64_t i = 0; i < p.enc_w.numel(); ++i) {
        REQUIRE(p.enc_w[i] == before[static_cast<size_t>(i)]);
    }
}

TEST_CASE("tokenizer overfits a single image to tiny reconstruction error") {
    auto ds = ctf::generate_dataset(2, 1, 32, 32, 6);
    ds.images.resize(1);
    ds.labels.resize(1);
    ctf::Rng rng(8);
    TokenizerParams p = TokenizerParams::init(64, 16, 4, rng);
    ctf::TokenizerTrainConfig cfg;
    cfg.codebook_size = 64;
    cfg.latent_dim = 16;
    cfg.epochs = 1200;
    cfg.batch_images = 1;
    cfg.lr_init = 1e-2;
    cfg.lr_final = 2e-4;
    cfg.seed = 8;
    auto report = ctf::train_tokenizer(ds, cfg, p);
    REQUIRE(report.final_recon_mse < 1e-3);
}

TEST_CASE("tokenizer training is deterministic for a fixed seed") {
    auto ds = ctf::generate_dataset(3, 4, 32, 32, 14);
    ctf::TokenizerTrainConfig cfg;
    cfg.codebook_size = 16;
    cfg.latent_dim = 8;
    cfg.epochs = 3;
    cfg.batch_images = 4;
    cfg.seed = 5;
    ctf::Rng r1(1), r2(1);
    TokenizerParams p1 = TokenizerParams::init(16, 8, 4, r1);
    TokenizerParams p2 = TokenizerParams::init(16, 8, 4, r2);
    auto rep1 = ctf::train_tokenizer(ds, cfg, p1);
    auto rep2 = ctf::train_tokenizer(ds, cfg, p2);
    REQUIRE(rep1.loss_curve == rep2.loss_curve);
    REQUIRE(ctf::bitwise_equal(p1.enc_w, p2.enc_w));
    REQUIRE(ctf::bitwise_equal(p1.codebook.entries, p2.codebook.entries));
}

TEST_CASE("codebook file round trip is bit exact") {
    ctf::Rng rng(19);
    Codebook cb(Tensor::randn({64, 16}, rng));
    const auto path = temp_file("cb.cbk1");
    ctf::export_codebook(cb, path.string());
    Codebook back = ctf::import_codebook(path.string());
    REQUIRE(ctf::bitwise_equal(cb.entries, back.entries));
}

TEST_CASE("codebook import validates header and shape") {
    const auto path = temp_file("bad.cbk1");
    {
        std::ofstream out(path, std::ios::binary);
        out.write("CBK1", 4);
        const uint32_t k = 0, d = 4;
        out.write(reinterpret_cast<const char*>(&k), 4);
        out.write(reinterpret_cast<const char*>(&d), 4);
    }
    REQUIRE_THROWS_AS(ctf::import_codebook(path.string()), ctf::Error);

    // a 16384 x 8 codebook imports with the right shape
    const auto big = temp_file("big.cbk1");
    {
        std::ofstream out(big, std::ios::binary);
        out.write("CBK1", 4);
        const uint32_t k = 16384, d = 8;
        out.write(reinterpret_cast<const char*>(&k), 4);
        out.write(reinterpret_cast<const char*>(&d), 4);
        std::vector<float> payload(static_cast<size_t>(k) * d, 0.5f);
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size() * sizeof(float)));
    }
    Codebook cb = ctf::import_codebook(big.string());
    REQUIRE(cb.size() == 16384);
    REQUIRE(cb.dim() == 8);
}
