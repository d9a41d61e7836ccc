#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <omp.h>

#include <cmath>
#include <vector>

#include "cotprobe/kernels.hpp"
#include "cotprobe/rng.hpp"

using namespace cotprobe;
using namespace cotprobe::kernels;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

}  // namespace

TEST_CASE("blocked gemm agrees with the reference on awkward shapes") {
    Rng rng(1);
    const int shapes[][3] = {{1, 1, 1}, {7, 33, 5}, {6, 32, 256}, {97, 65, 300}, {13, 200, 3}, {200, 17, 129}};
    for (const auto& s : shapes) {
        const int m = s[0], n = s[1], k = s[2];
        CAPTURE(m);
        CAPTURE(n);
        CAPTURE(k);
        const auto a = random_vec(rng, static_cast<std::size_t>(m) * k);
        const auto b = random_vec(rng, static_cast<std::size_t>(k) * n);
        const auto c0 = random_vec(rng, static_cast<std::size_t>(m) * n);
        for (const bool acc : {false, true}) {
            // A stored k x m and read transposed; B stored n x k and read transposed.
            std::vector<float> at(static_cast<std::size_t>(k) * m), bt(static_cast<std::size_t>(n) * k);
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
            for (int p = 0; p < k; ++p)
                for (int j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];

            std::vector<double> ad(a.begin(), a.end()), bd(b.begin(), b.end()), want(c0.begin(), c0.end());
            gemm_ref<double>(m, n, k, row_major(ad.data(), k), row_major(bd.data(), n), want.data(), n, acc);

            std::vector<float> got = c0;
            gemm_blocked(m, n, k, row_major(a.data(), k), row_major(b.data(), n), got.data(), n, acc, true);
            std::vector<float> got_t = c0;
            gemm_blocked(m, n, k, transposed(at.data(), m), transposed(bt.data(), k), got_t.data(), n, acc, true);
            for (std::size_t i = 0; i < got.size(); ++i) {
                CHECK(std::abs(got[i] - want[i]) <= 1e-4 * (1.0 + std::sqrt(static_cast<double>(k))));
                CHECK(got_t[i] == got[i]);
            }
        }
    }
}

TEST_CASE("blocked gemm is bitwise independent of the thread count") {
    Rng rng(2);
    const int m = 301, n = 77, k = 513;
    const auto a = random_vec(rng, static_cast<std::size_t>(m) * k);
    const auto b = random_vec(rng, static_cast<std::size_t>(k) * n);
    std::vector<float> serial(static_cast<std::size_t>(m) * n), threaded(serial.size());
    gemm_blocked(m, n, k, row_major(a.data(), k), row_major(b.data(), n), serial.data(), n, false, false);
    const int before = omp_get_max_threads();
    omp_set_num_threads(4);
    gemm_blocked(m, n, k, row_major(a.data(), k), row_major(b.data(), n), threaded.data(), n, false, true);
    omp_set_num_threads(before);
    CHECK(serial == threaded);
}

TEST_CASE("packed probe gradient matches the reference") {
    Rng rng(3);
    for (const int n : {1, 5, 256, 1001, 2100}) {
        for (const int classes : {2, 10, 13, 16}) {
            const int d = 37;
            const auto x = random_vec(rng, static_cast<std::size_t>(n) * d);
            std::vector<float> counts(static_cast<std::size_t>(n) * classes, 0.0f);
            double total = 0;
            for (int r = 0; r < n; ++r) {
                const int reps = 1 + static_cast<int>(rng.below(3));
                for (int i = 0; i < reps; ++i) counts[r * classes + rng.below(classes)] += 1.0f;
                total += reps;
            }
            const ProbeBatch batch{x.data(), counts.data(), n, d, classes, classes, total};
            const auto w = random_vec(rng, static_cast<std::size_t>(d) * classes);
            const auto bias = random_vec(rng, classes);
            std::vector<float> gw(w.size()), gb(classes);
            const double loss = probe_grad_ref(batch, w.data(), bias.data(), gw.data(), gb.data());

            const PackedProbeBatch packed = pack_probe_batch(batch);
            std::vector<float> gwp(w.size()), gbp(classes);
            const double loss_packed =
                probe_grad_packed(packed, w.data(), bias.data(), gwp.data(), gbp.data(), true);
            CHECK(loss_packed == doctest::Approx(loss).epsilon(1e-4));
            for (std::size_t i = 0; i < gw.size(); ++i) {
                CHECK(gwp[i] == doctest::Approx(gw[i]).epsilon(1e-3).scale(1e-3));
            }
            for (int c = 0; c < classes; ++c) CHECK(gbp[c] == doctest::Approx(gb[c]).epsilon(1e-3).scale(1e-3));
            std::vector<float> gw2(w.size()), gb2(classes);
            CHECK(probe_grad_packed(packed, w.data(), bias.data(), gw2.data(), gb2.data(), true, false) == 0.0);
            CHECK(gw2 == gwp);
        }
    }
}

TEST_CASE("packed probe gradient is bitwise independent of the thread count") {
    Rng rng(4);
    const int n = 3000, d = 64, classes = 10;
    const auto x = random_vec(rng, static_cast<std::size_t>(n) * d);
    std::vector<float> counts(static_cast<std::size_t>(n) * classes, 0.0f);
    for (int r = 0; r < n; ++r) counts[r * classes + rng.below(classes)] = 1.0f;
    const PackedProbeBatch batch =
        pack_probe_batch({x.data(), counts.data(), n, d, classes, classes, static_cast<double>(n)});
    const auto w = random_vec(rng, static_cast<std::size_t>(d) * classes);
    const std::vector<float> b(classes, 0.5f);
    std::vector<float> g1(w.size()), g2(w.size()), b1(classes), b2(classes);
    probe_grad_packed(batch, w.data(), b.data(), g1.data(), b1.data(), false);
    const int before = omp_get_max_threads();
    omp_set_num_threads(3);
    probe_grad_packed(batch, w.data(), b.data(), g2.data(), b2.data(), true);
    omp_set_num_threads(before);
    CHECK(g1 == g2);
    CHECK(b1 == b2);
}
