#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cotprobe/backend.hpp"
#include "cotprobe/kernels.hpp"
#include "cotprobe/taskgen.hpp"

namespace cotprobe {

inline constexpr int kDigitClasses = 10;

struct ProbeTrainConfig {
    double lr = 1e-3;
    int epochs = 10000;
    int batch_size = 10000;  // >= rows means full batch
    std::uint64_t seed = 0;
    bool standardize = false;
    kernels::Exec exec = kernels::Exec::Parallel;

    void validate() const;
};

// Affine classifier over one cell's states. w is d x classes, row-major.
struct Probe {
    int d = 0;
    int classes = kDigitClasses;
    std::vector<float> w;
    std::vector<float> b;
    std::vector<float> mean;   // standardisation, empty when off
    std::vector<float> scale;
    double final_loss = 0;

    int predict(const float* x) const;
};

// Trains on n rows of x (n x d). Identical rows are merged with their label
// counts, which leaves the full-batch objective unchanged. Throws
// DegenerateLabels when every label is the same.
Probe train_probe(const float* x, int n, int d, std::span<const int> labels, const ProbeTrainConfig& config);

// Plain loops over the raw rows; kept as the oracle for train_probe.
Probe train_probe_reference(const float* x, int n, int d, std::span<const int> labels,
                            const ProbeTrainConfig& config);

double eval_probe(const Probe& probe, const float* x, int n, std::span<const int> labels);

// ---- states ---------------------------------------------------------------------

// Token geometry shared by every record of one level.
struct LevelGeometry {
    int level = 0;
    int length = 0;
    int t0 = 0;
    int variables = 0;
    std::vector<int> eq_pos;  // per absolute index
    int t_min() const { return -t0; }
    int t_max() const { return length - 1 - t0; }
};

// Throws MisalignedPositions if any record deviates from the first one.
LevelGeometry level_geometry(const DatasetSplit& split);

// Value of v_i (1-based, first-appearance order) for each record.
std::vector<int> variable_labels(std::span<const Record> records, int variable);

// Forced-decoding token sequences (Input, SEP, gold chain, ';').
std::vector<std::vector<int>> record_sequences(std::span<const Record> records);

// Row-major n x width matrix of the states at capture slot (i, l).
std::vector<float> cell_matrix(const Capture<float>& capture, int rows, int i, int l);

// ---- grid -----------------------------------------------------------------------

// Accuracy per (t, l, v_i); NaN marks a cell that was not trained.
struct AccuracyGrid {
    int level = 0;
    int t_min = 0;
    int t_max = -1;
    int layers = 0;     // number of layer rows, L + 1
    int variables = 0;
    std::vector<int> eq_map;  // indexed by t - t_min
    std::vector<double> acc;  // [v][t][l]
    std::vector<int> n_test;

    AccuracyGrid() = default;
    AccuracyGrid(const LevelGeometry& geometry, int layer_rows);
    int positions() const { return t_max - t_min + 1; }
    std::size_t slot(int t, int l, int v) const;  // v is 1-based; throws OutOfRange
    double at(int t, int l, int v) const { return acc[slot(t, l, v)]; }
    void set(int t, int l, int v, double value, int n) {
        const auto s = slot(t, l, v);
        acc[s] = value;
        n_test[s] = n;
    }
    int eq_of(int t) const;  // throws OutOfRange
};

void write_grid_csv(const AccuracyGrid& grid, const std::filesystem::path& path);
AccuracyGrid read_grid_csv(const std::filesystem::path& path);  // MissingArtifact, SchemaError

// ---- sweep ----------------------------------------------------------------------

struct SweepConfig {
    ProbeTrainConfig probe;
    std::vector<int> variables;  // 1-based; empty = all
    std::vector<int> ts;         // relative positions; empty = all
    std::vector<int> layers;     // empty = all
    bool permute_labels = false; // chance-level control
    int position_chunk = 8;      // positions captured per forward sweep
    int max_train = 10000;
    int max_test = 2000;
    std::filesystem::path store; // probe store; existing cells are reused
    std::string store_tag;       // identifies model + data; must match to reuse
    std::function<void(int done, int total)> progress;
};

AccuracyGrid sweep(ModelBackend& backend, const DatasetSplit& split, const SweepConfig& config);

// Probe store: append-only binary records keyed by (level, t, l, v_i, seed).
struct StoredProbe {
    int level = 0;
    int t = 0;
    int l = 0;
    int variable = 0;
    std::uint64_t seed = 0;
    bool permuted = false;
    double accuracy = 0;
    int n_test = 0;
    Probe probe;
};

class ProbeStore {
public:
    // Opens or creates; a file written under a different tag is rejected with
    // ConfigError. A torn final record is dropped.
    ProbeStore(const std::filesystem::path& path, const std::string& tag);
    const std::vector<StoredProbe>& records() const { return records_; }
    const StoredProbe* find(int level, int t, int l, int variable, std::uint64_t seed, bool permuted) const;
    void append(const StoredProbe& record);

private:
    std::filesystem::path path_;
    std::vector<StoredProbe> records_;
};

}  // namespace cotprobe
