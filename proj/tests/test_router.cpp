#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "sprompts/rng.hpp"
#include "sprompts/router.hpp"

using namespace sprompts;
using namespace sprompts::router;

namespace {

// Independent oracle: linear scan, explicit comparisons, no shared code with
// identify_domain. Nearest centroid by L1 distance, lower index on ties.
std::int64_t nearest_centroid_label(const std::vector<float>& feature,
                                    const CentroidTable& table) {
    std::size_t best = 0;
    double best_d = l1_distance(feature, table.rows[0]);
    for (std::size_t i = 1; i < table.rows.size(); ++i) {
        const double d = l1_distance(feature, table.rows[i]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return table.domain_of[best];
}

std::vector<float> grid_point(Rng& rng, std::size_t dim) {
    std::vector<float> p(dim);
    for (auto& v : p)
        v = static_cast<float>(static_cast<std::int64_t>(rng.next_below(17)) - 8) * 0.25f;
    return p;
}

} // namespace

TEST_CASE("three-neighbour vote matches the worked example", "[router]") {
    CentroidTable table;
    table.append(0, {{0.0f, 0.0f}, {0.0f, 1.0f}});
    table.append(1, {{0.0f, 2.0f}});
    const std::vector<float> feature{0.0f, 0.9f};
    REQUIRE(identify_domain(feature, table, 3) == 0);
    REQUIRE(identify_domain(feature, table, 1) == 0);
}

TEST_CASE("identification validates its inputs", "[router]") {
    CentroidTable table;
    REQUIRE_THROWS_AS(identify_domain({1.0f}, table, 1), RouterError);
    table.append(0, {{0.0f, 0.0f}});
    REQUIRE_THROWS_AS(identify_domain({1.0f}, table, 1), RouterError);
    REQUIRE_THROWS_AS(identify_domain({1.0f, 2.0f}, table, 0), RouterError);
    REQUIRE_THROWS_AS(table.append(1, {{1.0f}}), RouterError);
}

TEST_CASE("single-neighbour identification equals the brute-force oracle",
          "[router][oracle]") {
    Rng rng(derive_seed(2024, "router-oracle"));
    int exact_ties = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t dim = 1 + rng.next_below(8);
        const std::size_t rows = 1 + rng.next_below(12);
        CentroidTable table;
        for (std::size_t r = 0; r < rows; ++r)
            table.append(static_cast<std::int64_t>(rng.next_below(4)),
                         {grid_point(rng, dim)});
        // Occasionally duplicate an existing centroid under another label to
        // force an exact distance tie resolved by centroid index.
        if (rows >= 2 && trial % 3 == 0) {
            table.append(static_cast<std::int64_t>(rng.next_below(4)),
                         {table.rows[rng.next_below(rows)]});
        }
        const std::vector<float> feature = grid_point(rng, dim);
        double best = l1_distance(feature, table.rows[0]);
        int at_best = 1;
        for (std::size_t i = 1; i < table.size(); ++i) {
            const double d = l1_distance(feature, table.rows[i]);
            if (d == best) ++at_best;
            if (d < best) {
                best = d;
                at_best = 1;
            }
        }
        if (at_best > 1) ++exact_ties;
        REQUIRE(identify_domain(feature, table, 1) ==
                nearest_centroid_label(feature, table));
    }
    REQUIRE(exact_ties > 10); // the instance generator must actually exercise ties
}

TEST_CASE("vote ties fall to smaller summed distance then smaller label",
          "[router]") {
    CentroidTable table;
    table.append(3, {{0.0f}, {2.0f}});
    table.append(1, {{0.5f}, {1.25f}});
    // feature 0.75: distances 0.75, 1.25 (label 3) and 0.25, 0.5 (label 1).
    // 2-2 vote; label 1 wins on summed distance.
    REQUIRE(identify_domain({0.75f}, table, 4) == 1);

    CentroidTable sym;
    sym.append(2, {{0.0f}});
    sym.append(1, {{2.0f}});
    // feature 1.0: exact 1-1 vote with equal distances; smaller label wins.
    REQUIRE(identify_domain({1.0f}, sym, 2) == 1);
}

TEST_CASE("kmeans recovers the optimal two-cluster partition", "[router][oracle]") {
    Rng rng(derive_seed(2024, "kmeans-oracle"));
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::vector<float>> pts;
        for (int i = 0; i < 4; ++i)
            pts.push_back({static_cast<float>(rng.uniform(-0.5, 0.5)),
                           static_cast<float>(rng.uniform(-0.5, 0.5))});
        for (int i = 0; i < 4; ++i)
            pts.push_back({static_cast<float>(10.0 + rng.uniform(-0.5, 0.5)),
                           static_cast<float>(10.0 + rng.uniform(-0.5, 0.5))});
        const std::size_t n = pts.size();

        // Exhaustive oracle over every bipartition.
        double best_inertia = 1e300;
        std::vector<std::vector<double>> best_means;
        for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
            std::vector<std::vector<double>> means(2, std::vector<double>(2, 0.0));
            std::vector<int> counts(2, 0);
            for (std::size_t i = 0; i < n; ++i) {
                const int side = (mask >> i) & 1;
                means[side][0] += pts[i][0];
                means[side][1] += pts[i][1];
                counts[side]++;
            }
            for (int s = 0; s < 2; ++s)
                for (int j = 0; j < 2; ++j) means[s][j] /= counts[s];
            double inertia = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const int side = (mask >> i) & 1;
                for (int j = 0; j < 2; ++j) {
                    const double d = pts[i][j] - means[side][j];
                    inertia += d * d;
                }
            }
            if (inertia < best_inertia) {
                best_inertia = inertia;
                best_means = means;
            }
        }

        auto res = kmeans_fit(pts, 2, derive_seed(7, "fit", trial));
        REQUIRE_THAT(res.inertia, Catch::Matchers::WithinAbs(best_inertia, 1e-6));
        // Match centroids to oracle means irrespective of cluster order.
        for (const auto& c : res.centroids) {
            double d0 = std::abs(c[0] - best_means[0][0]) + std::abs(c[1] - best_means[0][1]);
            double d1 = std::abs(c[0] - best_means[1][0]) + std::abs(c[1] - best_means[1][1]);
            REQUIRE(std::min(d0, d1) < 1e-6);
        }
    }
}

TEST_CASE("kmeans invariants hold at convergence", "[router][property]") {
    Rng rng(derive_seed(11, "kmeans-prop"));
    for (int trial = 0; trial < 20; ++trial) {
        const int k = 2 + static_cast<int>(rng.next_below(4));
        const std::size_t dim = 2 + rng.next_below(5);
        std::vector<std::vector<float>> pts;
        const std::size_t n = static_cast<std::size_t>(k) * (3 + rng.next_below(6));
        for (std::size_t i = 0; i < n; ++i) pts.push_back(grid_point(rng, dim));
        auto res = kmeans_fit(pts, k, derive_seed(13, "fit", trial));

        REQUIRE(res.centroids.size() == static_cast<std::size_t>(k));
        // Every point sits with its nearest centroid.
        for (std::size_t i = 0; i < n; ++i) {
            double assigned = squared_l2(pts[i], res.centroids[res.assignment[i]]);
            for (int c = 0; c < k; ++c)
                REQUIRE(assigned <= squared_l2(pts[i], res.centroids[c]) + 1e-9);
        }
        // Every centroid is the mean of its members (no cluster left empty).
        for (int c = 0; c < k; ++c) {
            std::vector<double> mean(dim, 0.0);
            int count = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (res.assignment[i] == c) {
                    for (std::size_t j = 0; j < dim; ++j) mean[j] += pts[i][j];
                    ++count;
                }
            REQUIRE(count > 0);
            for (std::size_t j = 0; j < dim; ++j)
                REQUIRE_THAT(res.centroids[c][j],
                             Catch::Matchers::WithinAbs(mean[j] / count, 1e-5));
        }
        // Same seed reproduces the fit exactly.
        auto again = kmeans_fit(pts, k, derive_seed(13, "fit", trial));
        REQUIRE(again.centroids == res.centroids);
        REQUIRE(again.assignment == res.assignment);
    }
}

TEST_CASE("kmeans handles degenerate inputs deterministically", "[router]") {
    std::vector<std::vector<float>> same(5, {1.0f, 2.0f});
    auto res = kmeans_fit(same, 2, 99);
    REQUIRE(res.centroids.size() == 2);
    REQUIRE(res.inertia == 0.0);
    REQUIRE_THROWS_AS(kmeans_fit(same, 6, 1), RouterError);
    REQUIRE_THROWS_AS(kmeans_fit(same, 0, 1), RouterError);
}
