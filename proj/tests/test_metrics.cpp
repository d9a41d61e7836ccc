#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cotprobe/errors.hpp"
#include "cotprobe/metrics.hpp"

using namespace cotprobe;
namespace fs = std::filesystem;

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

Instance sample(int level, std::uint64_t seed = 1) {
    Rng rng(seed);
    return generate_instance(level, rng);
}

LevelGeometry geometry_of(const Instance& inst) {
    const SequenceLayout s = layout_record(inst, build_gold_chain(inst));
    return {inst.level, s.length(), s.t0, static_cast<int>(inst.var_order.size()), s.eq_pos};
}

AccuracyGrid filled(const Instance& inst, int layer_rows, double value) {
    AccuracyGrid g(geometry_of(inst), layer_rows);
    for (int v = 1; v <= g.variables; ++v) {
        for (int t = g.t_min; t <= g.t_max; ++t) {
            for (int l = 0; l < layer_rows; ++l) g.set(t, l, v, value, 100);
        }
    }
    return g;
}

// Straight scan used as the oracle for first_hit.
std::optional<int> scan(const AccuracyGrid& g, int v, double tau) {
    for (int t = g.t_min; t <= g.t_max; ++t) {
        for (int l = 0; l < g.layers; ++l) {
            const double a = g.at(t, l, v);
            if (!std::isnan(a) && a > tau) return t;
        }
    }
    return std::nullopt;
}

}  // namespace

TEST_CASE("first hit on a constructed grid") {
    const Instance inst = sample(3);
    AccuracyGrid g = filled(inst, 5, 0.5);
    g.set(-7, 2, 1, 0.95, 100);
    g.set(3, 4, 1, 0.95, 100);
    CHECK(first_hit(g, 1, 0.90) == -7);
    CHECK_FALSE(first_hit(g, 1, 0.96).has_value());
    CHECK(max_over_layers(g, -7, 1) == 0.95);
    CHECK(to_equation_index(g, -7) == g.eq_of(-7));
    CHECK(to_equation_index(g, 3) == 0);  // inside "A=1+B,"
    CHECK(to_equation_index(g, 6) == 1);

    // the threshold itself does not count
    g.set(-7, 2, 1, 0.90, 100);
    CHECK(first_hit(g, 1, 0.90) == 3);
    g.set(-7, 2, 1, std::nextafter(0.90, 1.0), 100);
    CHECK(first_hit(g, 1, 0.90) == -7);

    // untrained cells are skipped
    g.set(-7, 2, 1, kNaN, 0);
    CHECK(first_hit(g, 1, 0.90) == 3);
    CHECK(first_hit(g, 2, 0.4) == g.t_min);
    CHECK_THROWS_AS(first_hit(g, 3, 0.9), UnknownVariable);
    CHECK_THROWS_AS(to_equation_index(g, g.t_max + 1), OutOfRange);
}

TEST_CASE("first hit moves later as tau rises") {
    const Instance inst = sample(5);
    Rng rng(77);
    for (int trial = 0; trial < 1000; ++trial) {
        AccuracyGrid g(geometry_of(inst), 3);
        for (double& a : g.acc) a = rng.uniform() < 0.1 ? kNaN : rng.uniform();
        const double lo = rng.uniform();
        const double hi = lo + (1.0 - lo) * rng.uniform();
        for (int v = 1; v <= g.variables; ++v) {
            const auto a = first_hit(g, v, lo);
            const auto b = first_hit(g, v, hi);
            CHECK(a == scan(g, v, lo));
            if (b) {
                REQUIRE(a.has_value());
                CHECK(*a <= *b);
            }
        }
    }
}

TEST_CASE("pre and post accuracies split at the first chain token") {
    const Instance inst = sample(2);
    Rng rng(5);
    AccuracyGrid g(geometry_of(inst), 4);
    for (double& a : g.acc) a = rng.uniform();
    for (int v = 1; v <= g.variables; ++v) {
        double pre = -1, post = -1;
        for (int t = g.t_min; t <= g.t_max; ++t) {
            for (int l = 0; l < 4; ++l) (t < 0 ? pre : post) = std::max(t < 0 ? pre : post, g.at(t, l, v));
        }
        const auto [a, b] = acc_pre_post(g, v);
        CHECK(a == pre);
        CHECK(b == post);
    }
    AccuracyGrid empty(geometry_of(inst), 4);
    CHECK(std::isnan(acc_pre_post(empty, 1).first));
}

TEST_CASE("timeline lower bounds and step counts match the published table") {
    // level -> (#steps, lower bound) per variable
    const std::vector<std::vector<std::pair<int, int>>> table = {
        {{1, -2}, {0, -2}},
        {{1, -3}, {2, -2}},
        {{2, -2}, {1, -2}},
        {{2, -3}, {1, -3}, {1, -2}},
        {{3, -2}, {2, -2}, {1, -2}},
    };
    const auto fixture = read_timeline_csv(fs::path(COTPROBE_SOURCE_DIR) / "fixtures" / "published_timeline.csv");
    CHECK(fixture.size() == 12);
    for (int level = 1; level <= 5; ++level) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const Instance inst = sample(level, seed);
            const ResolutionTimeline tl = timeline(filled(inst, 5, 0.0), inst, kDefaultTau);
            const auto& want = table[static_cast<std::size_t>(level - 1)];
            REQUIRE(tl.variables.size() == want.size());
            for (std::size_t v = 0; v < want.size(); ++v) {
                CHECK(tl.variables[v].steps == want[v].first);
                CHECK(tl.variables[v].t_dagger_eq == want[v].second);
                CHECK(tl.variables[v].distractor == (level == 4 && v == 2));
                CHECK(tl.variables[v].resolution ==
                      (tl.variables[v].distractor ? Resolution::DistractorUnresolved : Resolution::Unresolved));
            }
        }
        for (const TimelineRow& row : fixture) {
            if (row.level != level) continue;
            const auto& want = table[static_cast<std::size_t>(level - 1)][static_cast<std::size_t>(row.variable - 1)];
            CHECK(row.steps == want.first);
            CHECK(row.t_dagger_eq == want.second);
        }
    }
}

TEST_CASE("timeline classification and flags") {
    const Instance inst = sample(1);
    AccuracyGrid g = filled(inst, 5, 0.2);
    g.set(-4, 0, 2, 0.99, 100);  // v2 readable in the Input
    g.set(2, 3, 1, 0.99, 100);   // v1 only inside the chain
    const ResolutionTimeline tl = timeline(g, inst, 0.9);
    CHECK(tl.variables[0].resolution == Resolution::DuringCoT);
    CHECK(tl.variables[0].t_star == 2);
    CHECK(tl.variables[0].t_star_eq == 0);
    CHECK_FALSE(tl.variables[0].below_lower_bound);
    CHECK(tl.variables[1].resolution == Resolution::PreCoT);
    CHECK(tl.variables[1].acc_pre == 0.99);
    CHECK(tl.variables[1].acc_post == 0.2);
    CHECK(std::string(resolution_name(Resolution::PreCoT)) == "pre-cot");

    g.set(g.t_min, 0, 1, 0.99, 100);  // BOS: earlier than any logical bound
    CHECK(timeline(g, inst, 0.9).variables[0].below_lower_bound);

    CHECK_THROWS_AS(timeline(g, inst, 1.0), ConfigError);
    CHECK_THROWS_AS(timeline(g, inst, 0.0), ConfigError);
    CHECK_THROWS_AS(timeline(g, sample(2), 0.9), ConfigError);
}

TEST_CASE("timeline files round trip") {
    const Instance inst = sample(4);
    AccuracyGrid g = filled(inst, 3, 0.3);
    g.set(5, 1, 1, 0.97, 100);
    std::vector<ResolutionTimeline> tls;
    for (double tau : {0.85, 0.90, 0.95}) tls.push_back(timeline(g, inst, tau));
    const fs::path dir = fs::temp_directory_path() / "cotprobe_test_metrics";
    fs::remove_all(dir);
    write_timeline_csv(tls, dir / "timeline.csv");
    const auto rows = read_timeline_csv(dir / "timeline.csv");
    REQUIRE(rows.size() == 9);
    CHECK(rows[0].t_star == 5);
    CHECK(rows[0].tau == 0.85);
    CHECK_FALSE(rows[1].t_star.has_value());
    CHECK(rows[8].tau == 0.95);
    CHECK(rows[2].t_dagger_eq == -2);

    std::ofstream(dir / "bad.csv") << "#schema=cotprobe-timeline/2\n";
    CHECK_THROWS_AS(read_timeline_csv(dir / "bad.csv"), SchemaError);
    CHECK_THROWS_AS(read_timeline_csv(dir / "none.csv"), MissingArtifact);
    fs::remove_all(dir);
}
