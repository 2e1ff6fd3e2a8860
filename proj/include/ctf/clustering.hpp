#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctf/error.hpp"
#include "ctf/rng.hpp"
#include "ctf/tensor.hpp"
#include "ctf/tokenizer.hpp"

namespace ctf {

enum class ClusterProvenance { kmeans, random };

inline const char* provenance_name(ClusterProvenance p) {
    return p == ClusterProvenance::kmeans ? "kmeans" : "random";
}

// Partition of the codebook into coarse groups plus the fine->coarse lookup.
struct ClusterMap {
    int64_t codebook_size = 0;  // number of fine entries
    int64_t clusters = 0;       // number of coarse groups
    std::vector<int32_t> assignment;
    Tensor centroids;  // [clusters, d]
    ClusterProvenance provenance = ClusterProvenance::kmeans;
    uint64_t seed = 0;
    int64_t iterations = 0;
    double sse = 0.0;
    std::vector<std::vector<int32_t>> member_lists;

    int32_t phi(int64_t fine_index) const {
        check(fine_index >= 0 && fine_index < codebook_size, ErrKind::index,
              "phi: fine index " + std::to_string(fine_index) + " outside [0, " +
                  std::to_string(codebook_size) + ")");
        return assignment[static_cast<size_t>(fine_index)];
    }

    const std::vector<int32_t>& members(int64_t coarse_index) const {
        check(coarse_index >= 0 && coarse_index < clusters, ErrKind::index,
              "members: coarse index " + std::to_string(coarse_index) + " outside [0, " +
                  std::to_string(clusters) + ")");
        return member_lists[static_cast<size_t>(coarse_index)];
    }

    void rebuild_members() {
        member_lists.assign(static_cast<size_t>(clusters), {});
        for (int64_t k = 0; k < codebook_size; ++k) {
            member_lists[static_cast<size_t>(assignment[static_cast<size_t>(k)])].push_back(
                static_cast<int32_t>(k));
        }
        for (size_t m = 0; m < member_lists.size(); ++m) {
            check(!member_lists[m].empty(), ErrKind::param,
                  "cluster " + std::to_string(m) + " is empty");
        }
    }
};

using CoarseGrid = TokenGrid;

inline CoarseGrid coarsen(const TokenGrid& tokens, const ClusterMap& map) {
    CoarseGrid out;
    out.h = tokens.h;
    out.w = tokens.w;
    out.tokens.reserve(tokens.tokens.size());
    for (int32_t t : tokens.tokens) out.tokens.push_back(map.phi(t));
    return out;
}

namespace cluster_detail {

inline double sq_dist(const float* a, const float* b, int64_t d) {
    double acc = 0.0;
    for (int64_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
        acc += diff * diff;
    }
    return acc;
}

// nearest centroid per point, lowest index on ties
inline void assign_nearest(const Tensor& points, const Tensor& centroids,
                           std::vector<int32_t>& assignment, std::vector<double>& dists) {
    const int64_t n = points.dim(0), d = points.dim(1), m = centroids.dim(0);
    assignment.resize(static_cast<size_t>(n));
    dists.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int32_t best_m = 0;
        for (int64_t c = 0; c < m; ++c) {
            const double dist = sq_dist(points.ptr() + i * d, centroids.ptr() + c * d, d);
            if (dist < best) {
                best = dist;
                best_m = static_cast<int32_t>(c);
            }
        }
        assignment[static_cast<size_t>(i)] = best_m;
        dists[static_cast<size_t>(i)] = best;
    }
}

inline Tensor centroid_means(const Tensor& points, const std::vector<int32_t>& assignment,
                             int64_t m) {
    const int64_t n = points.dim(0), d = points.dim(1);
    std::vector<double> sums(static_cast<size_t>(m * d), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(m), 0);
    for (int64_t i = 0; i < n; ++i) {
        const int32_t c = assignment[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j) {
            sums[static_cast<size_t>(c * d + j)] += static_cast<double>(points.ptr()[i * d + j]);
        }
        counts[static_cast<size_t>(c)]++;
    }
    Tensor centroids({m, d});
    for (int64_t c = 0; c < m; ++c) {
        const int64_t cnt = std::max<int64_t>(1, counts[static_cast<size_t>(c)]);
        for (int64_t j = 0; j < d; ++j) {
            centroids.at(c, j) = static_cast<float>(sums[static_cast<size_t>(c * d + j)] /
                                                    static_cast<double>(cnt));
        }
    }
    return centroids;
}

// moves the point farthest from the centroid of the largest cluster into each
// empty cluster
inline bool repair_empty(const Tensor& points, const Tensor& centroids,
                         std::vector<int32_t>& assignment, int64_t m) {
    const int64_t n = points.dim(0), d = points.dim(1);
    std::vector<int64_t> counts(static_cast<size_t>(m), 0);
    for (int32_t a : assignment) counts[static_cast<size_t>(a)]++;
    bool repaired = false;
    for (int64_t c = 0; c < m; ++c) {
        if (counts[static_cast<size_t>(c)] > 0) continue;
        int64_t largest = 0;
        for (int64_t o = 1; o < m; ++o) {
            if (counts[static_cast<size_t>(o)] > counts[static_cast<size_t>(largest)]) largest = o;
        }
        check(counts[static_cast<size_t>(largest)] > 1, ErrKind::param,
              "cannot repair empty cluster: no donor with more than one point");
        double worst = -1.0;
        int64_t steal = -1;
        for (int64_t i = 0; i < n; ++i) {
            if (assignment[static_cast<size_t>(i)] != largest) continue;
            const double dist = sq_dist(points.ptr() + i * d, centroids.ptr() + largest * d, d);
            if (dist > worst) {
                worst = dist;
                steal = i;
            }
        }
        assignment[static_cast<size_t>(steal)] = static_cast<int32_t>(c);
        counts[static_cast<size_t>(largest)]--;
        counts[static_cast<size_t>(c)]++;
        repaired = true;
    }
    return repaired;
}

inline double total_sse(const Tensor& points, const Tensor& centroids,
                        const std::vector<int32_t>& assignment) {
    const int64_t n = points.dim(0), d = points.dim(1);
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        acc += sq_dist(points.ptr() + i * d,
                       centroids.ptr() + assignment[static_cast<size_t>(i)] * d, d);
    }
    return acc;
}

inline Tensor kmeans_pp_init(const Tensor& points, int64_t m, Rng& rng) {
    const int64_t n = points.dim(0), d = points.dim(1);
    Tensor centroids({m, d});
    const int64_t first = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
    std::memcpy(centroids.ptr(), points.ptr() + first * d, static_cast<size_t>(d) * sizeof(float));
    std::vector<double> dist(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        dist[static_cast<size_t>(i)] = sq_dist(points.ptr() + i * d, centroids.ptr(), d);
    }
    for (int64_t c = 1; c < m; ++c) {
        double total = 0.0;
        for (double v : dist) total += v;
        int64_t chosen;
        if (total <= 0.0) {
            chosen = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
        } else {
            double r = rng.uniform() * total;
            chosen = n - 1;
            for (int64_t i = 0; i < n; ++i) {
                r -= dist[static_cast<size_t>(i)];
                if (r <= 0.0) {
                    chosen = i;
                    break;
                }
            }
        }
        std::memcpy(centroids.ptr() + c * d, points.ptr() + chosen * d,
                    static_cast<size_t>(d) * sizeof(float));
        for (int64_t i = 0; i < n; ++i) {
            const double nd = sq_dist(points.ptr() + i * d, centroids.ptr() + c * d, d);
            dist[static_cast<size_t>(i)] = std::min(dist[static_cast<size_t>(i)], nd);
        }
    }
    return centroids;
}

}  // namespace cluster_detail

// Lloyd iterations over codewords with k-means++ seeding. Stops when the
// assignment is stable, the relative SSE improvement drops below tol, or
// max_iters is reached; the returned assignment is always nearest-centroid
// consistent and every cluster is nonempty.
inline ClusterMap kmeans_cluster(const Codebook& codebook, int64_t clusters, uint64_t seed,
                                 int64_t max_iters = 100, double tol = 1e-6) {
    const int64_t k = codebook.size();
    check(clusters >= 2, ErrKind::param, "kmeans: need at least 2 clusters");
    check(clusters <= k, ErrKind::param,
          "kmeans: clusters (" + std::to_string(clusters) + ") exceed codebook entries (" +
              std::to_string(k) + ")");
    const Tensor& points = codebook.entries;
    Rng rng = Rng(seed).split(0xC1);

    ClusterMap map;
    map.codebook_size = k;
    map.clusters = clusters;
    map.provenance = ClusterProvenance::kmeans;
    map.seed = seed;
    map.centroids = cluster_detail::kmeans_pp_init(points, clusters, rng);

    std::vector<int32_t> prev_assignment;
    std::vector<double> dists;
    double prev_sse = std::numeric_limits<double>::infinity();
    int64_t iter = 0;
    for (; iter < max_iters; ++iter) {
        cluster_detail::assign_nearest(points, map.centroids, map.assignment, dists);
        const bool repaired =
            cluster_detail::repair_empty(points, map.centroids, map.assignment, clusters);
        const bool stable = !repaired && map.assignment == prev_assignment;
        if (stable) break;
        map.centroids = cluster_detail::centroid_means(points, map.assignment, clusters);
        const double sse = cluster_detail::total_sse(points, map.centroids, map.assignment);
        check(sse <= prev_sse * (1.0 + 1e-9) + 1e-12, ErrKind::param,
              "kmeans objective increased between iterations");
        const bool tiny_gain = std::isfinite(prev_sse) && prev_sse - sse <= tol * prev_sse;
        prev_assignment = map.assignment;
        prev_sse = sse;
        if (tiny_gain) {
            // one more nearest pass so the published assignment matches the
            // published centroids
            cluster_detail::assign_nearest(points, map.centroids, map.assignment, dists);
            if (cluster_detail::repair_empty(points, map.centroids, map.assignment, clusters)) {
                continue;  // a repair re-opens the loop
            }
            ++iter;
            break;
        }
    }
    if (iter >= max_iters) {
        // cap reached mid-flight: publish a nearest-consistent assignment
        for (int extra = 0; extra < 8; ++extra) {
            cluster_detail::assign_nearest(points, map.centroids, map.assignment, dists);
            if (!cluster_detail::repair_empty(points, map.centroids, map.assignment, clusters)) {
                break;
            }
            map.centroids = cluster_detail::centroid_means(points, map.assignment, clusters);
        }
    }
    map.iterations = iter;
    map.sse = cluster_detail::total_sse(points, map.centroids, map.assignment);
    map.rebuild_members();
    return map;
}

// Balanced random partition (cluster sizes differ by at most one); centroids
// are member means so SSE comparisons against k-means are meaningful.
inline ClusterMap random_clustering(const Codebook& codebook, int64_t clusters, uint64_t seed) {
    const int64_t k = codebook.size();
    check(clusters >= 1 && clusters <= k, ErrKind::param,
          "random_clustering: clusters must lie in [1, codebook size]");
    Rng rng = Rng(seed).split(0xC2);
    std::vector<int32_t> shuffled(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) shuffled[static_cast<size_t>(i)] = static_cast<int32_t>(i);
    rng.shuffle(shuffled.begin(), shuffled.end());

    ClusterMap map;
    map.codebook_size = k;
    map.clusters = clusters;
    map.provenance = ClusterProvenance::random;
    map.seed = seed;
    map.assignment.assign(static_cast<size_t>(k), 0);
    for (int64_t i = 0; i < k; ++i) {
        map.assignment[static_cast<size_t>(shuffled[static_cast<size_t>(i)])] =
            static_cast<int32_t>(i % clusters);
    }
    map.centroids = cluster_detail::centroid_means(codebook.entries, map.assignment, clusters);
    map.iterations = 0;
    map.sse = cluster_detail::total_sse(codebook.entries, map.centroids, map.assignment);
    map.rebuild_members();
    return map;
}

// ------------------------------------------------------------------ CLM1 file

// one line of JSON metadata, then "CLM1", K u32 assignments, M*d f32 centroids
inline void save_clustermap(const ClusterMap& map, const std::string& path) {
    nlohmann::json meta = {
        {"kind", "clustermap"},
        {"codebook_size", map.codebook_size},
        {"clusters", map.clusters},
        {"dim", map.centroids.dim(1)},
        {"provenance", provenance_name(map.provenance)},
        {"seed", map.seed},
        {"iterations", map.iterations},
        {"sse", map.sse},
    };
    std::ofstream out(path, std::ios::binary);
    check(out.good(), ErrKind::io, "cannot open for writing: " + path);
    out << meta.dump() << "\n";
    out.write("CLM1", 4);
    out.write(reinterpret_cast<const char*>(map.assignment.data()),
              static_cast<std::streamsize>(map.assignment.size() * sizeof(int32_t)));
    out.write(reinterpret_cast<const char*>(map.centroids.ptr()),
              static_cast<std::streamsize>(sizeof(float) *
                                           static_cast<size_t>(map.centroids.numel())));
    check(out.good(), ErrKind::io, "short write: " + path);
}

inline ClusterMap load_clustermap(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), ErrKind::io, "cannot open for reading: " + path);
    std::string header;
    std::getline(in, header);
    nlohmann::json meta = nlohmann::json::parse(header, nullptr, false);
    check(!meta.is_discarded() && meta.value("kind", "") == "clustermap", ErrKind::format,
          "bad clustermap header in " + path);
    ClusterMap map;
    map.codebook_size = meta.at("codebook_size").get<int64_t>();
    map.clusters = meta.at("clusters").get<int64_t>();
    const int64_t d = meta.at("dim").get<int64_t>();
    map.provenance = meta.at("provenance").get<std::string>() == "kmeans"
                         ? ClusterProvenance::kmeans
                         : ClusterProvenance::random;
    map.seed = meta.at("seed").get<uint64_t>();
    map.iterations = meta.at("iterations").get<int64_t>();
    map.sse = meta.at("sse").get<double>();

    char magic[4] = {};
    in.read(magic, 4);
    check(in.gcount() == 4 && std::string(magic, 4) == "CLM1", ErrKind::format,
          "bad clustermap magic in " + path);
    map.assignment.resize(static_cast<size_t>(map.codebook_size));
    in.read(reinterpret_cast<char*>(map.assignment.data()),
            static_cast<std::streamsize>(map.assignment.size() * sizeof(int32_t)));
    map.centroids = Tensor({map.clusters, d});
    in.read(reinterpret_cast<char*>(map.centroids.ptr()),
            static_cast<std::streamsize>(sizeof(float) *
                                         static_cast<size_t>(map.centroids.numel())));
    check(in.good(), ErrKind::format, "truncated clustermap payload in " + path);
    for (int32_t a : map.assignment) {
        check(a >= 0 && a < map.clusters, ErrKind::format,
              "clustermap assignment out of range in " + path);
    }
    map.rebuild_members();
    return map;
}

// fingerprint used to tie checkpoints to the clustering they were trained with
inline uint64_t fingerprint_bytes(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fingerprint(const ClusterMap& map) {
    uint64_t h = fingerprint_bytes(map.assignment.data(), map.assignment.size() * sizeof(int32_t));
    h = fingerprint_bytes(map.centroids.ptr(),
                          static_cast<size_t>(map.centroids.numel()) * sizeof(float), h);
    return h;
}

inline uint64_t fingerprint(const Codebook& cb) {
    return fingerprint_bytes(cb.entries.ptr(),
                             static_cast<size_t>(cb.entries.numel()) * sizeof(float));
}

}  // namespace ctf
