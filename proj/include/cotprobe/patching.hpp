#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cotprobe/backend.hpp"
#include "cotprobe/probelab.hpp"
#include "cotprobe/rng.hpp"
#include "cotprobe/taskgen.hpp"

namespace cotprobe {

// Receiver and source share a template (hence token geometry) and differ in
// their final answers.
struct InterventionPair {
    Record receiver;
    Record source;
};

// Throws GeometryMismatch when the two records cannot be paired.
InterventionPair make_pair(const Record& receiver, const Record& source);

// n pairs: receivers drawn without replacement from pool (cycling when n
// exceeds it), each with a random source whose answer differs.
std::vector<InterventionPair> make_pairs(std::span<const Record> pool, int n, Rng& rng);

// Pairs stored as text: receiver and source Input lines, '#' comments.
std::vector<InterventionPair> read_pairs_file(const std::filesystem::path& path);

// One equation's token span crossed with one band of layers.
struct Grid {
    int id = 0;
    int eq = 0;           // equation position
    int band = 0;
    int first_index = 0;  // absolute, inclusive
    int last_index = 0;
    std::vector<int> layers;
};

// Bands of band_stride blocks: band b holds layers b*stride+1 .. (b+1)*stride.
// The embedding layer 0 joins band 0, or forms its own leading band when
// embedding_in_first_band is false.
std::vector<Grid> partition_grids(const LevelGeometry& geometry, int layer_count, int band_stride = 4,
                                  bool embedding_in_first_band = true);

// A token whose greedy prediction is scored. The prediction is made at index - 1.
struct Target {
    std::string name;
    int index = 0;
};

// "eq:K" is the last token of Output equation K, "answer" the final answer.
Target resolve_target(const LevelGeometry& geometry, const std::string& name);
std::vector<Target> default_targets(const LevelGeometry& geometry);  // eq:2, eq:4, answer (those present)

enum class Outcome { Success, Unchanged, Other };

// Clean runs of a pair, cached once and reused for every grid.
struct PairRun {
    std::vector<int> receiver_tokens;
    std::vector<int> source_tokens;
    Capture<float> source_states;    // all indices, all layers
    std::vector<int> receiver_pred;  // greedy prediction at every index
    std::vector<int> source_pred;
};

PairRun clean_runs(ModelBackend& backend, const InterventionPair& pair);

// The patched request for one grid: the receiver forced-decoded with the
// grid's states taken from the source run.
PatchedRequest grid_request(const PairRun& run, const Grid& grid, std::span<const Target> targets);

// Success when the patched prediction is the source run's token, Unchanged
// when it is the receiver run's; Unchanged wins when both agree.
Outcome classify(const PairRun& run, const Target& target, std::span<const float> logits);

Outcome run_grid_intervention(ModelBackend& backend, const PairRun& run, const Grid& grid, const Target& target);

struct CellCounts {
    int success = 0;
    int unchanged = 0;
    int n = 0;
    double success_rate() const { return n ? static_cast<double>(success) / n : 0.0; }
    double unchanged_rate() const { return n ? static_cast<double>(unchanged) / n : 0.0; }
};

struct InterventionReport {
    int level = 0;
    std::vector<Grid> grids;
    std::vector<Target> targets;
    std::vector<CellCounts> cells;  // [target][grid]
    CellCounts& at(std::size_t target, std::size_t grid) { return cells[target * grids.size() + grid]; }
    const CellCounts& at(std::size_t target, std::size_t grid) const { return cells[target * grids.size() + grid]; }
    // Per target and equation, the best success rate over bands.
    std::vector<std::pair<int, double>> pooled(std::size_t target) const;
};

InterventionReport empty_report(int level, std::vector<Grid> grids, std::vector<Target> targets);
void add_outcome(InterventionReport& report, std::size_t target, std::size_t grid, Outcome outcome);
// Sums reports over the same geometry (pairs split across runs).
InterventionReport aggregate(const std::vector<InterventionReport>& parts);

struct InterventionConfig {
    int band_stride = 4;
    bool embedding_in_first_band = true;
    std::vector<std::string> targets;  // empty = defaults
    std::filesystem::path progress;    // resume file; empty disables
    std::string progress_tag;
    int chunk = 50;                    // pairs between progress saves
    std::function<void(int done, int total)> on_progress;
};

InterventionReport run_interventions(ModelBackend& backend, std::span<const InterventionPair> pairs,
                                     const InterventionConfig& config);

// level,target,grid_eq,grid_band,success_rate,unchanged_rate,n
void write_report_csv(const InterventionReport& report, const std::filesystem::path& path);

struct ReportRow {
    int level = 0;
    std::string target;
    int grid_eq = 0;
    int grid_band = 0;
    double success_rate = 0;
    double unchanged_rate = 0;
    int n = 0;
};
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);

}  // namespace cotprobe
