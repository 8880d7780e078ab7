#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sprompts/rng.hpp"

namespace sprompts::router {

struct RouterError : std::runtime_error {
    explicit RouterError(const std::string& msg) : std::runtime_error(msg) {}
};

inline double squared_l2(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s;
}

inline double l1_distance(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += std::abs(static_cast<double>(a[i]) - b[i]);
    return s;
}

struct KMeansResult {
    std::vector<std::vector<float>> centroids; // k rows
    std::vector<std::int64_t> assignment;      // nearest centroid per point
    double inertia = 0.0;                      // sum of squared distances
    int iterations = 0;
};

// Lloyd's algorithm with distance-weighted seeding. Clustering runs on
// squared euclidean distance; identification below deliberately uses a
// different metric. All tie-breaks resolve toward the lowest index, and every
// reduction is sequential, so a (points, k, seed) triple pins the result.
inline KMeansResult kmeans_fit(const std::vector<std::vector<float>>& points,
                               int k, std::uint64_t seed, int max_iters = 100,
                               double rel_tol = 1e-6) {
    const std::int64_t n = static_cast<std::int64_t>(points.size());
    if (k <= 0) throw RouterError("kmeans_fit: k must be positive");
    if (n < k)
        throw RouterError("kmeans_fit: " + std::to_string(n) + " points cannot fill " +
                          std::to_string(k) + " clusters");
    const std::size_t dim = points[0].size();
    for (const auto& p : points)
        if (p.size() != dim) throw RouterError("kmeans_fit: inconsistent point dims");

    Rng rng(seed);
    KMeansResult res;
    res.centroids.reserve(k);

    // Seeding: first center uniform, the rest proportional to squared
    // distance from the nearest chosen center.
    std::vector<double> dist2(n, 0.0);
    res.centroids.push_back(points[rng.next_below(static_cast<std::uint64_t>(n))]);
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            double best = squared_l2(points[i], res.centroids[0]);
            for (std::size_t j = 1; j < res.centroids.size(); ++j)
                best = std::min(best, squared_l2(points[i], res.centroids[j]));
            dist2[i] = best;
            total += best;
        }
        std::int64_t pick = -1;
        if (total > 0.0) {
            const double r = rng.next_unit() * total;
            double acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                acc += dist2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
            if (pick < 0) pick = n - 1;
        } else {
            // All points coincide with chosen centers; duplicate deterministically.
            pick = c % n;
        }
        res.centroids.push_back(points[pick]);
    }

    res.assignment.assign(n, 0);
    double prev_inertia = -1.0;
    for (int iter = 0; iter < max_iters; ++iter) {
        res.iterations = iter + 1;
        double inertia = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            std::int64_t best = 0;
            double best_d = squared_l2(points[i], res.centroids[0]);
            for (int c = 1; c < k; ++c) {
                const double d = squared_l2(points[i], res.centroids[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            res.assignment[i] = best;
            inertia += best_d;
        }

        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<std::int64_t> counts(k, 0);
        for (std::int64_t i = 0; i < n; ++i) {
            auto& s = sums[res.assignment[i]];
            for (std::size_t j = 0; j < dim; ++j) s[j] += points[i][j];
            counts[res.assignment[i]]++;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // Revive an empty cluster at the point farthest from its
                // assigned centroid (lowest index on ties).
                std::int64_t far = 0;
                double far_d = -1.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    const double d = squared_l2(points[i], res.centroids[res.assignment[i]]);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                res.centroids[c] = points[far];
                res.assignment[far] = c;
            } else {
                for (std::size_t j = 0; j < dim; ++j)
                    res.centroids[c][j] = static_cast<float>(sums[c][j] / counts[c]);
            }
        }

        res.inertia = inertia;
        if (prev_inertia >= 0.0) {
            const double denom = std::max(prev_inertia, 1e-30);
            if (std::abs(prev_inertia - inertia) / denom < rel_tol) break;
        }
        prev_inertia = inertia;
    }
    return res;
}

// Centroids from all sessions so far, each row tagged with the session that
// produced it. Append-only: rows from earlier sessions are never touched.
struct CentroidTable {
    std::size_t dim = 0;
    std::vector<std::vector<float>> rows;
    std::vector<std::int64_t> domain_of;

    void append(std::int64_t domain, const std::vector<std::vector<float>>& centroids) {
        for (const auto& c : centroids) {
            if (rows.empty() && dim == 0) dim = c.size();
            if (c.size() != dim)
                throw RouterError("CentroidTable: centroid dim " +
                                  std::to_string(c.size()) + " != table dim " +
                                  std::to_string(dim));
            rows.push_back(c);
            domain_of.push_back(domain);
        }
    }

    std::size_t size() const { return rows.size(); }
};

// Nearest-centroid domain identification. Candidates are ordered by
// (L1 distance, centroid index); the first knn_k vote by majority. A vote
// tie falls to the label with the smaller summed distance, then to the
// smaller label.
inline std::int64_t identify_domain(const std::vector<float>& feature,
                                    const CentroidTable& table, int knn_k) {
    if (table.rows.empty()) throw RouterError("identify_domain: empty centroid table");
    if (feature.size() != table.dim)
        throw RouterError("identify_domain: feature dim " +
                          std::to_string(feature.size()) + " != table dim " +
                          std::to_string(table.dim));
    if (knn_k <= 0) throw RouterError("identify_domain: knn_k must be positive");
    const std::size_t m = table.rows.size();
    std::vector<std::pair<double, std::size_t>> order(m);
    for (std::size_t i = 0; i < m; ++i)
        order[i] = {l1_distance(feature, table.rows[i]), i};
    std::sort(order.begin(), order.end());
    const std::size_t k = std::min<std::size_t>(knn_k, m);

    std::vector<std::int64_t> votes;
    std::vector<double> dist_sum;
    std::vector<std::int64_t> label_of;
    for (std::size_t i = 0; i < k; ++i) {
        const std::int64_t label = table.domain_of[order[i].second];
        std::size_t slot = 0;
        for (; slot < label_of.size(); ++slot)
            if (label_of[slot] == label) break;
        if (slot == label_of.size()) {
            label_of.push_back(label);
            votes.push_back(0);
            dist_sum.push_back(0.0);
        }
        votes[slot]++;
        dist_sum[slot] += order[i].first;
    }

    std::size_t best = 0;
    for (std::size_t s = 1; s < label_of.size(); ++s) {
        if (votes[s] > votes[best] ||
            (votes[s] == votes[best] &&
             (dist_sum[s] < dist_sum[best] ||
              (dist_sum[s] == dist_sum[best] && label_of[s] < label_of[best]))))
            best = s;
    }
    return label_of[best];
}

} // namespace sprompts::router
