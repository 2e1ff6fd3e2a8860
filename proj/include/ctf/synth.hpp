#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ctf/error.hpp"
#include "ctf/image.hpp"
#include "ctf/rng.hpp"

namespace ctf {

struct LabeledDataset {
    std::vector<Image> images;
    std::vector<int32_t> labels;
    int32_t class_count = 0;
    std::string split = "train";
    uint64_t seed = 0;

    size_t size() const { return images.size(); }
};

namespace synth_detail {

struct Rgb {
    float r, g, b;
};

// hue jitter over a small discrete ladder: varied palettes without an
// unquantizable color continuum (one shared brightness step per draw)
inline Rgb jitter(Rgb base, Rng& rng, double amount = 0.05) {
    const double tick = amount / 2.0;
    const double steps = std::floor(rng.uniform_range(-2.0, 3.0));  // -2..2
    auto j = [&](float v) {
        const float out = v + static_cast<float>(steps * tick);
        return std::min(1.0f, std::max(0.0f, out));
    };
    return {j(base.r), j(base.g), j(base.b)};
}

// one palette per family; fg/bg picked far apart so families stay separable
inline std::pair<Rgb, Rgb> family_palette(int family) {
    static const std::array<std::pair<Rgb, Rgb>, 10> palettes = {{
        {{0.92f, 0.25f, 0.20f}, {0.10f, 0.12f, 0.35f}},  // circle
        {{0.15f, 0.75f, 0.30f}, {0.90f, 0.90f, 0.85f}},  // rectangle
        {{0.95f, 0.80f, 0.10f}, {0.25f, 0.10f, 0.45f}},  // diagonal stripes
        {{0.95f, 0.95f, 0.95f}, {0.70f, 0.15f, 0.15f}},  // radial gradient
        {{0.05f, 0.05f, 0.08f}, {0.85f, 0.60f, 0.25f}},  // checkerboard
        {{0.20f, 0.55f, 0.85f}, {0.95f, 0.45f, 0.10f}},  // horizontal stripes
        {{0.85f, 0.20f, 0.75f}, {0.12f, 0.30f, 0.15f}},  // ring
        {{0.98f, 0.98f, 0.30f}, {0.20f, 0.20f, 0.20f}},  // cross
        {{0.10f, 0.80f, 0.80f}, {0.45f, 0.15f, 0.05f}},  // diagonal split
        {{0.90f, 0.30f, 0.50f}, {0.15f, 0.45f, 0.60f}},  // vertical gradient
    }};
    return palettes[static_cast<size_t>(family % 10)];
}

inline Image render_family(int family, int64_t h, int64_t w, Rng& rng) {
    auto [fg_base, bg_base] = family_palette(family);
    const Rgb fg = jitter(fg_base, rng);
    const Rgb bg = jitter(bg_base, rng);
    // geometry jitter snapped to a coarse lattice keeps the patch vocabulary
    // compact enough for small codebooks
    const double cx = 0.375 + 0.0625 * static_cast<double>(rng.below(5));  // 0.375..0.625
    const double cy = 0.375 + 0.0625 * static_cast<double>(rng.below(5));
    const double r0 = 0.1875 + 0.0625 * static_cast<double>(rng.below(3));
    const double phase = 0.5 * static_cast<double>(rng.below(2));
    const int bands = 2 << rng.below(2);  // 2 or 4 cells per unit

    Image img(h, w);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
            const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
            const double dx = u - cx, dy = v - cy;
            const double dist = std::sqrt(dx * dx + dy * dy);
            bool inside = false;
            double t = -1.0;  // when >= 0, blend fg/bg by t instead
            switch (family % 10) {
                case 0:  // filled circle
                    inside = dist < r0;
                    break;
                case 1:  // filled rectangle
                    inside = std::abs(dx) < r0 + 0.0625 && std::abs(dy) < r0 - 0.0625;
                    break;
                case 2:  // diagonal stripes
                    inside = std::fmod((u + v) * bands + phase, 1.0) < 0.5;
                    break;
                case 3:  // radial gradient, banded
                    t = std::floor(std::min(1.0, dist / 0.7) * 6.0) / 6.0;
                    break;
                case 4:  // checkerboard
                    inside = ((static_cast<int>(u * bands + phase) +
                               static_cast<int>(v * bands + phase)) % 2) == 0;
                    break;
                case 5:  // horizontal stripes
                    inside = std::fmod(v * bands + phase, 1.0) < 0.5;
                    break;
                case 6:  // ring
                    inside = dist > r0 * 0.55 && dist < r0 * 1.15;
                    break;
                case 7:  // cross
                    inside = std::abs(dx) < 0.0625 * (1.0 + static_cast<double>(bands == 4)) ||
                             std::abs(dy) < 0.0625 * (1.0 + static_cast<double>(bands == 4));
                    break;
                case 8:  // diagonal half plane
                    inside = u + v < 0.75 + 0.5 * phase;
                    break;
                case 9:  // vertical gradient, banded
                    t = std::floor(v * 6.0) / 6.0;
                    break;
            }
            Rgb c;
            if (t >= 0.0) {
                const float tf = static_cast<float>(t);
                c = {fg.r + (bg.r - fg.r) * tf, fg.g + (bg.g - fg.g) * tf,
                     fg.b + (bg.b - fg.b) * tf};
            } else {
                c = inside ? fg : bg;
            }
            img.at(y, x, 0) = c.r;
            img.at(y, x, 1) = c.g;
            img.at(y, x, 2) = c.b;
        }
    }
    return img;
}

}  // namespace synth_detail

// Deterministic class-conditional image families. Every image draws from its
// own split-off stream, so the dataset is a pure function of the arguments.
inline LabeledDataset generate_dataset(int32_t class_count, int64_t per_class, int64_t height,
                                       int64_t width, uint64_t seed,
                                       const std::string& split = "train") {
    check(class_count >= 2, ErrKind::param, "generate_dataset: need at least 2 classes");
    check(per_class >= 1, ErrKind::param, "generate_dataset: per_class must be positive");
    LabeledDataset ds;
    ds.class_count = class_count;
    ds.split = split;
    ds.seed = seed;
    uint64_t split_tag = 0;
    for (char ch : split) split_tag = split_tag * 131 + static_cast<unsigned char>(ch);
    Rng root = Rng(seed).split(split_tag);
    for (int32_t c = 0; c < class_count; ++c) {
        Rng class_rng = root.split(static_cast<uint64_t>(c));
        for (int64_t i = 0; i < per_class; ++i) {
            Rng img_rng = class_rng.split(static_cast<uint64_t>(i));
            ds.images.push_back(synth_detail::render_family(c, height, width, img_rng));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

// Pixel-space nearest-class-mean classifier accuracy; a learnability floor
// check for the generated families.
inline double nearest_mean_accuracy(const LabeledDataset& train, const LabeledDataset& eval) {
    check(train.class_count == eval.class_count, ErrKind::param, "class count mismatch");
    const size_t dim = train.images.at(0).pixels.size();
    std::vector<std::vector<double>> means(static_cast<size_t>(train.class_count),
                                           std::vector<double>(dim, 0.0));
    std::vector<int64_t> counts(static_cast<size_t>(train.class_count), 0);
    for (size_t i = 0; i < train.size(); ++i) {
        auto& m = means[static_cast<size_t>(train.labels[i])];
        for (size_t j = 0; j < dim; ++j) m[j] += train.images[i].pixels[j];
        counts[static_cast<size_t>(train.labels[i])]++;
    }
    for (size_t c = 0; c < means.size(); ++c) {
        for (double& v : means[c]) v /= static_cast<double>(std::max<int64_t>(1, counts[c]));
    }
    int64_t correct = 0;
    for (size_t i = 0; i < eval.size(); ++i) {
        double best = 1e300;
        int32_t best_c = 0;
        for (size_t c = 0; c < means.size(); ++c) {
            double d2 = 0.0;
            for (size_t j = 0; j < dim; ++j) {
                const double d = means[c][j] - static_cast<double>(eval.images[i].pixels[j]);
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                best_c = static_cast<int32_t>(c);
            }
        }
        if (best_c == eval.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(eval.size());
}

}  // namespace ctf
