// Times the serial reference kernels against the blocked/fused OpenMP ones.
#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "CLI11.hpp"
#include "cotprobe/kernels.hpp"
#include "cotprobe/model.hpp"
#include "cotprobe/rng.hpp"

using namespace cotprobe;
using namespace cotprobe::kernels;

namespace {

double seconds(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / reps;
}

std::vector<float> random_vec(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kernel benchmark"};
    int m = 3136, n = 512, k = 128;
    int rows = 10000, dim = 128;
    int batch_rows = 64;
    bool skip_ref = false;
    app.add_option("--m", m);
    app.add_option("--n", n);
    app.add_option("--k", k);
    app.add_option("--rows", rows, "probe rows");
    app.add_option("--dim", dim, "probe state width");
    app.add_option("--batch", batch_rows, "sequences per model batch");
    app.add_flag("--skip-ref", skip_ref, "skip the slow reference kernels");
    CLI11_PARSE(app, argc, argv);

    Rng rng(0);
    std::printf("threads: %d\n", omp_get_max_threads());

    const auto a = random_vec(rng, static_cast<std::size_t>(m) * k);
    const auto b = random_vec(rng, static_cast<std::size_t>(k) * n);
    std::vector<float> c(static_cast<std::size_t>(m) * n);
    const double flops = 2.0 * m * n * k;
    auto report = [&](const char* name, double s, double work) {
        std::printf("%-28s %10.3f ms %8.2f GFLOP/s\n", name, s * 1e3, work / s * 1e-9);
    };
    if (!skip_ref) {
        report("gemm reference", seconds([&] {
            gemm_ref<float>(m, n, k, row_major(a.data(), k), row_major(b.data(), n), c.data(), n, false);
        }, 1), flops);
    }
    report("gemm blocked serial", seconds([&] {
        gemm_blocked(m, n, k, row_major(a.data(), k), row_major(b.data(), n), c.data(), n, false, false);
    }, 5), flops);
    report("gemm blocked parallel", seconds([&] {
        gemm_blocked(m, n, k, row_major(a.data(), k), row_major(b.data(), n), c.data(), n, false, true);
    }, 5), flops);
    // Weight-gradient shape: A read transposed.
    std::vector<float> g(static_cast<std::size_t>(k) * n);
    const auto dy = random_vec(rng, static_cast<std::size_t>(m) * n);
    report("gemm blocked tn parallel", seconds([&] {
        gemm_blocked(k, n, m, transposed(a.data(), k), row_major(dy.data(), n), g.data(), n, false, true);
    }, 5), flops);

    const int classes = 10;
    const auto x = random_vec(rng, static_cast<std::size_t>(rows) * dim);
    std::vector<float> counts(static_cast<std::size_t>(rows) * classes, 0.0f);
    for (int r = 0; r < rows; ++r) counts[r * classes + rng.below(classes)] = 1.0f;
    const ProbeBatch batch{x.data(), counts.data(), rows, dim, classes, classes,
                           static_cast<double>(rows)};
    const PackedProbeBatch packed = pack_probe_batch(batch);
    const auto w = random_vec(rng, static_cast<std::size_t>(dim) * classes);
    const std::vector<float> bias(classes, 0.0f);
    std::vector<float> gw(w.size()), gb(classes);
    const double probe_flops = 4.0 * rows * dim * classes;
    if (!skip_ref) {
        report("probe epoch reference", seconds([&] {
            probe_grad_ref(batch, w.data(), bias.data(), gw.data(), gb.data());
        }, 3), probe_flops);
    }
    report("probe epoch packed serial", seconds([&] {
        probe_grad_packed(packed, w.data(), bias.data(), gw.data(), gb.data(), false, false);
    }, 20), probe_flops);
    report("probe epoch packed parallel", seconds([&] {
        probe_grad_packed(packed, w.data(), bias.data(), gw.data(), gb.data(), true, false);
    }, 20), probe_flops);

    // Whole reference model on a Level 3 batch.
    std::vector<SequenceLayout> seqs;
    for (int i = 0; i < batch_rows; ++i) {
        const Instance inst = generate_instance(3, rng);
        seqs.push_back(layout_record(inst, build_gold_chain(inst)));
    }
    const Batch mb = make_batch(seqs);
    const ModelConfig mc;
    const double tokens = static_cast<double>(mb.size) * mb.length;
    const auto token_rate = [&](const char* name, double s) {
        std::printf("%-28s %10.3f ms %8.0f tokens/s\n", name, s * 1e3, tokens / s);
    };
    for (const Exec exec : {Exec::Serial, Exec::Parallel}) {
        const Model model(mc, exec);
        const bool par = exec == Exec::Parallel;
        const int reps = par ? 3 : 1;  // the reference path is slow
        token_rate(par ? "model forward parallel" : "model forward serial", seconds([&] { model.logits(mb); }, reps));
        std::vector<float> grad;
        token_rate(par ? "model train step parallel" : "model train step serial",
                   seconds([&] { model.loss_and_grad(mb, grad); }, reps));
    }
    return 0;
}
