#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cotprobe/errors.hpp"
#include "cotprobe/probelab.hpp"

using namespace cotprobe;
namespace fs = std::filesystem;

namespace {

std::vector<float> gaussian(int n, int d, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> x(static_cast<std::size_t>(n) * d);
    for (float& v : x) v = static_cast<float>(rng.normal());
    return x;
}

std::vector<int> random_labels(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int& v : y) v = static_cast<int>(rng.below(kDigitClasses));
    return y;
}

// Class k sits at 3 * e_k plus small noise.
void clusters(int n, int d, std::uint64_t seed, std::vector<float>& x, std::vector<int>& y) {
    x = gaussian(n, d, seed);
    y = random_labels(n, seed + 1);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(i * d + j)] *= 0.1f;
        x[static_cast<std::size_t>(i * d + y[static_cast<std::size_t>(i)])] += 3.0f;
    }
}

ProbeTrainConfig fast(int epochs = 300) {
    ProbeTrainConfig c;
    c.lr = 0.5;
    c.epochs = epochs;
    return c;
}

Model tiny_model() {
    ModelConfig c;
    c.layers = 2;
    c.width = 16;
    c.heads = 2;
    c.context = 96;
    c.seed = 4;
    return Model(c);
}

DatasetSplit small_split(int level) {
    GenConfig g;
    g.level = level;
    g.n_train = 200;
    g.n_test = 100;
    g.seed = 9;
    return generate_split(g);
}

}  // namespace

TEST_CASE("separable clusters are probed perfectly") {
    std::vector<float> x, xt;
    std::vector<int> y, yt;
    clusters(500, 12, 1, x, y);
    clusters(300, 12, 7, xt, yt);
    const Probe p = train_probe(x.data(), 500, 12, y, fast());
    CHECK(eval_probe(p, xt.data(), 300, yt) == 1.0);
}

TEST_CASE("random labels stay near chance") {
    const int d = 16;
    const auto x = gaussian(2000, d, 3);
    const auto y = random_labels(2000, 4);
    const auto xt = gaussian(2000, d, 5);
    const auto yt = random_labels(2000, 6);
    const Probe p = train_probe(x.data(), 2000, d, y, fast(200));
    const double acc = eval_probe(p, xt.data(), 2000, yt);
    CHECK(acc == doctest::Approx(0.1).epsilon(0.3));  // 0.07 .. 0.13
}

TEST_CASE("merging duplicate rows matches the plain full-batch trainer") {
    // 40 distinct rows, each repeated with varying labels
    const int d = 8;
    const auto base = gaussian(40, d, 10);
    std::vector<float> x;
    std::vector<int> y;
    Rng rng(11);
    for (int rep = 0; rep < 6; ++rep) {
        for (int i = 0; i < 40; ++i) {
            x.insert(x.end(), base.begin() + i * d, base.begin() + (i + 1) * d);
            y.push_back(rep < 4 ? i % 10 : static_cast<int>(rng.below(10)));
        }
    }
    const int n = static_cast<int>(y.size());
    for (bool standardize : {false, true}) {
        ProbeTrainConfig c = fast(150);
        c.standardize = standardize;
        const Probe a = train_probe(x.data(), n, d, y, c);
        const Probe b = train_probe_reference(x.data(), n, d, y, c);
        REQUIRE(a.w.size() == b.w.size());
        for (std::size_t i = 0; i < a.w.size(); ++i) CHECK(a.w[i] == doctest::Approx(b.w[i]).epsilon(1e-3).scale(1e-3));
        for (std::size_t i = 0; i < a.b.size(); ++i) CHECK(a.b[i] == doctest::Approx(b.b[i]).epsilon(1e-3).scale(1e-3));
        CHECK(a.final_loss == doctest::Approx(b.final_loss).epsilon(1e-4));
    }
}

TEST_CASE("probe training is deterministic and validates input") {
    std::vector<float> x;
    std::vector<int> y;
    clusters(300, 10, 2, x, y);
    for (int batch : {10000, 64}) {
        ProbeTrainConfig c = fast(20);
        c.batch_size = batch;
        c.seed = 5;
        const Probe a = train_probe(x.data(), 300, 10, y, c);
        const Probe b = train_probe(x.data(), 300, 10, y, c);
        CHECK(std::memcmp(a.w.data(), b.w.data(), a.w.size() * sizeof(float)) == 0);
        c.exec = kernels::Exec::Serial;
        const Probe s = train_probe(x.data(), 300, 10, y, c);
        for (std::size_t i = 0; i < a.w.size(); ++i) CHECK(a.w[i] == doctest::Approx(s.w[i]).epsilon(1e-4).scale(1e-4));
    }
    const std::vector<int> same(300, 4);
    CHECK_THROWS_AS(train_probe(x.data(), 300, 10, same, fast()), DegenerateLabels);
    std::vector<int> bad = y;
    bad[0] = 10;
    CHECK_THROWS_AS(train_probe(x.data(), 300, 10, bad, fast()), ConfigError);
    ProbeTrainConfig zero = fast();
    zero.lr = 0;
    CHECK_THROWS_AS(train_probe(x.data(), 300, 10, y, zero), ConfigError);
    ProbeTrainConfig mini = fast();
    mini.batch_size = 10;
    CHECK_THROWS_AS(train_probe_reference(x.data(), 300, 10, y, mini), ConfigError);
}

TEST_CASE("labels and geometry") {
    const DatasetSplit split = small_split(3);
    const LevelGeometry g = level_geometry(split);
    CHECK(g.level == 3);
    CHECK(g.variables == 2);
    CHECK(g.t_min() == -g.t0);
    const auto labels = variable_labels(split.test, 1);
    for (std::size_t i = 0; i < split.test.size(); ++i) {
        const Record& r = split.test[i];
        CHECK(labels[i] == substitute_values(r.instance).at(r.instance.var_order[0]));
    }
    // v1 is the queried variable, so its label is the answer
    CHECK(labels[0] == split.test[0].chain.answer);
    CHECK_THROWS_AS(variable_labels(split.test, 3), UnknownVariable);
    CHECK_THROWS_AS(variable_labels(split.test, 0), UnknownVariable);

    DatasetSplit mixed = split;
    mixed.test.push_back(small_split(2).test[0]);
    CHECK_THROWS_AS(level_geometry(mixed), MisalignedPositions);
}

TEST_CASE("grid files round trip") {
    const DatasetSplit split = small_split(2);
    const LevelGeometry g = level_geometry(split);
    AccuracyGrid grid(g, 3);
    Rng rng(1);
    for (int t = grid.t_min; t <= grid.t_max; t += 2) {
        for (int l = 0; l < 3; ++l) {
            for (int v = 1; v <= grid.variables; ++v) grid.set(t, l, v, rng.uniform(), 100);
        }
    }
    const fs::path dir = fs::temp_directory_path() / "cotprobe_test_probelab";
    fs::remove_all(dir);
    write_grid_csv(grid, dir / "grid.csv");
    const AccuracyGrid back = read_grid_csv(dir / "grid.csv");
    CHECK(back.level == grid.level);
    CHECK(back.t_min == grid.t_min);
    CHECK(back.t_max == grid.t_max);
    CHECK(back.eq_map == grid.eq_map);
    for (std::size_t i = 0; i < grid.acc.size(); ++i) {
        if (std::isnan(grid.acc[i])) {
            CHECK(std::isnan(back.acc[i]));
        } else {
            CHECK(back.acc[i] == doctest::Approx(grid.acc[i]).epsilon(1e-6));
        }
    }
    CHECK(grid.eq_of(-1) == -1);
    CHECK(grid.eq_of(0) == 0);
    CHECK_THROWS_AS(grid.at(grid.t_max + 1, 0, 1), OutOfRange);
    CHECK_THROWS_AS(grid.at(0, 3, 1), OutOfRange);
    CHECK_THROWS_AS(grid.at(0, 0, 9), UnknownVariable);

    CHECK_THROWS_AS(read_grid_csv(dir / "missing.csv"), MissingArtifact);
    std::ofstream(dir / "bad.csv") << "#schema=other/9\n";
    CHECK_THROWS_AS(read_grid_csv(dir / "bad.csv"), SchemaError);
    std::ofstream(dir / "empty.csv") << "";
    CHECK_THROWS_AS(read_grid_csv(dir / "empty.csv"), SchemaError);
    fs::remove_all(dir);
}

TEST_CASE("probe store appends, reopens and drops a torn tail") {
    const fs::path dir = fs::temp_directory_path() / "cotprobe_test_store";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path path = dir / "probes.bin";
    StoredProbe rec;
    rec.level = 2;
    rec.t = -3;
    rec.l = 1;
    rec.variable = 2;
    rec.seed = 7;
    rec.accuracy = 0.5;
    rec.n_test = 10;
    rec.probe.d = 4;
    rec.probe.w.assign(40, 0.25f);
    rec.probe.b.assign(10, -1.0f);
    {
        ProbeStore store(path, "tag-a");
        store.append(rec);
        rec.t = 2;
        rec.permuted = true;
        store.append(rec);
    }
    {
        ProbeStore store(path, "tag-a");
        REQUIRE(store.records().size() == 2);
        const StoredProbe* hit = store.find(2, -3, 1, 2, 7, false);
        REQUIRE(hit != nullptr);
        CHECK(hit->probe.w == rec.probe.w);
        CHECK(hit->probe.b == rec.probe.b);
        CHECK(store.find(2, 2, 1, 2, 7, false) == nullptr);
        CHECK(store.find(2, 2, 1, 2, 7, true) != nullptr);
    }
    fs::resize_file(path, fs::file_size(path) - 5);
    {
        ProbeStore store(path, "tag-a");
        CHECK(store.records().size() == 1);
        store.append(rec);
    }
    CHECK(ProbeStore(path, "tag-a").records().size() == 2);
    CHECK_THROWS_AS(ProbeStore(path, "tag-b"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("sweep fills the selected cells and resumes from the store") {
    const Model model = tiny_model();
    LocalBackend backend(model);
    const DatasetSplit split = small_split(2);
    SweepConfig cfg;
    cfg.probe = fast(50);
    cfg.ts = {-3, -1, 0, 4};
    cfg.layers = {0, 2};
    cfg.position_chunk = 3;
    const fs::path dir = fs::temp_directory_path() / "cotprobe_test_sweep";
    fs::remove_all(dir);
    cfg.store = dir / "store.bin";
    cfg.store_tag = "tiny";
    int last = 0;
    cfg.progress = [&](int done, int total) {
        CHECK(done <= total);
        last = done;
    };
    const AccuracyGrid a = sweep(backend, split, cfg);
    CHECK(last == 4 * 2 * 2);
    for (int t = a.t_min; t <= a.t_max; ++t) {
        for (int l = 0; l < 3; ++l) {
            for (int v = 1; v <= 2; ++v) {
                const bool chosen = (t == -3 || t == -1 || t == 0 || t == 4) && l != 1;
                const double acc = a.at(t, l, v);
                CHECK(std::isnan(acc) != chosen);
                if (chosen) CHECK((acc >= 0.0 && acc <= 1.0));
            }
        }
    }
    const AccuracyGrid b = sweep(backend, split, cfg);  // served from the store
    for (std::size_t i = 0; i < a.acc.size(); ++i) {
        CHECK((std::isnan(a.acc[i]) ? std::isnan(b.acc[i]) : a.acc[i] == b.acc[i]));
    }
    fs::remove_all(dir);
    cfg.store.clear();
    const AccuracyGrid c = sweep(backend, split, cfg);
    for (std::size_t i = 0; i < a.acc.size(); ++i) {
        CHECK((std::isnan(a.acc[i]) ? std::isnan(c.acc[i]) : a.acc[i] == c.acc[i]));
    }

    cfg.ts = {a.t_max + 1};
    CHECK_THROWS_AS(sweep(backend, split, cfg), OutOfRange);
    cfg.ts = {0};
    cfg.variables = {3};
    CHECK_THROWS_AS(sweep(backend, split, cfg), UnknownVariable);
}
