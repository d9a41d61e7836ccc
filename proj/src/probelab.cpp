#include "cotprobe/probelab.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "cotprobe/rng.hpp"

namespace cotprobe {

void ProbeTrainConfig::validate() const {
    if (!(lr > 0) || epochs <= 0 || batch_size <= 0) {
        throw ConfigError("probe learning rate, epochs and batch size must be positive");
    }
}

int Probe::predict(const float* x) const {
    std::vector<float> buf;
    const float* in = x;
    if (!mean.empty()) {
        buf.resize(static_cast<std::size_t>(d));
        for (int p = 0; p < d; ++p) buf[p] = (x[p] - mean[p]) * scale[p];
        in = buf.data();
    }
    int best = 0;
    double best_z = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) {
        double z = b[c];
        for (int p = 0; p < d; ++p) z += static_cast<double>(in[p]) * w[static_cast<std::size_t>(p) * classes + c];
        if (z > best_z) {
            best_z = z;
            best = c;
        }
    }
    return best;
}

namespace {

void check_labels(std::span<const int> labels, int n) {
    if (static_cast<int>(labels.size()) != n) throw ConfigError("label count differs from row count");
    for (const int y : labels) {
        if (y < 0 || y >= kDigitClasses) throw ConfigError("label outside 0..9");
    }
    if (std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels.front(); })) {
        throw DegenerateLabels("all labels equal " + std::to_string(labels.front()));
    }
}

// Copies x, optionally standardised with statistics stored in the probe.
std::vector<float> prepared_rows(const float* x, int n, int d, bool standardize, Probe& probe) {
    std::vector<float> out(x, x + static_cast<std::ptrdiff_t>(n) * d);
    if (!standardize) return out;
    probe.mean.assign(static_cast<std::size_t>(d), 0.0f);
    probe.scale.assign(static_cast<std::size_t>(d), 1.0f);
    for (int p = 0; p < d; ++p) {
        double s = 0;
        double s2 = 0;
        for (int r = 0; r < n; ++r) {
            const double v = x[static_cast<std::ptrdiff_t>(r) * d + p];
            s += v;
            s2 += v * v;
        }
        const double mu = s / n;
        const double sd = std::sqrt(std::max(0.0, s2 / n - mu * mu));
        probe.mean[p] = static_cast<float>(mu);
        probe.scale[p] = sd > 1e-6 ? static_cast<float>(1.0 / sd) : 1.0f;
    }
    for (int r = 0; r < n; ++r) {
        for (int p = 0; p < d; ++p) {
            float& v = out[static_cast<std::size_t>(r) * d + p];
            v = (v - probe.mean[p]) * probe.scale[p];
        }
    }
    return out;
}

struct Dedup {
    std::vector<float> x;
    std::vector<float> counts;  // [row][class]
    int n = 0;
};

Dedup dedup_rows(const std::vector<float>& x, int n, int d, std::span<const int> labels, std::span<const int> order) {
    Dedup out;
    std::unordered_map<std::string, int> seen;
    seen.reserve(order.size() * 2);
    const std::size_t row_bytes = static_cast<std::size_t>(d) * sizeof(float);
    (void)n;
    for (const int r : order) {
        const float* row = x.data() + static_cast<std::ptrdiff_t>(r) * d;
        std::string key(reinterpret_cast<const char*>(row), row_bytes);
        auto [it, fresh] = seen.try_emplace(std::move(key), out.n);
        if (fresh) {
            out.x.insert(out.x.end(), row, row + d);
            out.counts.resize(out.counts.size() + kDigitClasses, 0.0f);
            ++out.n;
        }
        out.counts[static_cast<std::size_t>(it->second) * kDigitClasses + labels[r]] += 1.0f;
    }
    return out;
}

void sgd_step(std::vector<float>& w, std::vector<float>& b, const std::vector<float>& gw, const std::vector<float>& gb,
              double lr) {
    const auto s = static_cast<float>(lr);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= s * gw[i];
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= s * gb[i];
}

}  // namespace

Probe train_probe(const float* x, int n, int d, std::span<const int> labels, const ProbeTrainConfig& config) {
    config.validate();
    if (n <= 0 || d <= 0) throw ConfigError("probe needs at least one row");
    check_labels(labels, n);
    Probe probe;
    probe.d = d;
    probe.w.assign(static_cast<std::size_t>(d) * kDigitClasses, 0.0f);
    probe.b.assign(kDigitClasses, 0.0f);
    const std::vector<float> rows = prepared_rows(x, n, d, config.standardize, probe);
    std::vector<float> gw(probe.w.size());
    std::vector<float> gb(probe.b.size());
    const bool parallel = config.exec == kernels::Exec::Parallel;

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    if (config.batch_size >= n) {
        const Dedup u = dedup_rows(rows, n, d, labels, order);
        const kernels::ProbeBatch batch{u.x.data(), u.counts.data(), u.n, d, kDigitClasses, kDigitClasses,
                                        static_cast<double>(n)};
        const kernels::PackedProbeBatch packed = kernels::pack_probe_batch(batch);
        for (int e = 0; e < config.epochs; ++e) {
            const bool last = e + 1 == config.epochs;
            const double loss =
                kernels::probe_grad_packed(packed, probe.w.data(), probe.b.data(), gw.data(), gb.data(), parallel, last);
            if (last) probe.final_loss = loss;
            sgd_step(probe.w, probe.b, gw, gb, config.lr);
        }
        return probe;
    }

    // Mini-batches in a seeded shuffled order, one sample per row.
    Rng rng(config.seed);
    for (int e = 0; e < config.epochs; ++e) {
        rng.shuffle(std::span(order));
        double loss = 0;
        for (int start = 0; start < n; start += config.batch_size) {
            const int end = std::min(n, start + config.batch_size);
            std::vector<float> bx;
            std::vector<float> bc(static_cast<std::size_t>(end - start) * kDigitClasses, 0.0f);
            bx.reserve(static_cast<std::size_t>(end - start) * d);
            for (int k = start; k < end; ++k) {
                const float* row = rows.data() + static_cast<std::ptrdiff_t>(order[k]) * d;
                bx.insert(bx.end(), row, row + d);
                bc[static_cast<std::size_t>(k - start) * kDigitClasses + labels[order[k]]] = 1.0f;
            }
            const kernels::ProbeBatch batch{bx.data(), bc.data(), end - start, d, kDigitClasses, kDigitClasses,
                                            static_cast<double>(end - start)};
            loss += kernels::probe_grad_packed(kernels::pack_probe_batch(batch), probe.w.data(), probe.b.data(),
                                               gw.data(), gb.data(), parallel, true) *
                    (end - start);
            sgd_step(probe.w, probe.b, gw, gb, config.lr);
        }
        probe.final_loss = loss / n;
    }
    return probe;
}

Probe train_probe_reference(const float* x, int n, int d, std::span<const int> labels,
                            const ProbeTrainConfig& config) {
    config.validate();
    if (n <= 0 || d <= 0) throw ConfigError("probe needs at least one row");
    check_labels(labels, n);
    if (config.batch_size < n) throw ConfigError("the reference trainer is full-batch only");
    Probe probe;
    probe.d = d;
    probe.w.assign(static_cast<std::size_t>(d) * kDigitClasses, 0.0f);
    probe.b.assign(kDigitClasses, 0.0f);
    const std::vector<float> rows = prepared_rows(x, n, d, config.standardize, probe);
    std::vector<float> counts(static_cast<std::size_t>(n) * kDigitClasses, 0.0f);
    for (int r = 0; r < n; ++r) counts[static_cast<std::size_t>(r) * kDigitClasses + labels[r]] = 1.0f;
    const kernels::ProbeBatch batch{rows.data(), counts.data(), n, d, kDigitClasses, kDigitClasses, static_cast<double>(n)};
    std::vector<float> gw(probe.w.size());
    std::vector<float> gb(probe.b.size());
    for (int e = 0; e < config.epochs; ++e) {
        probe.final_loss = kernels::probe_grad_ref(batch, probe.w.data(), probe.b.data(), gw.data(), gb.data());
        sgd_step(probe.w, probe.b, gw, gb, config.lr);
    }
    return probe;
}

double eval_probe(const Probe& probe, const float* x, int n, std::span<const int> labels) {
    if (n <= 0) return 0.0;
    if (static_cast<int>(labels.size()) != n) throw ConfigError("label count differs from row count");
    int hits = 0;
    for (int r = 0; r < n; ++r) hits += probe.predict(x + static_cast<std::ptrdiff_t>(r) * probe.d) == labels[r];
    return static_cast<double>(hits) / n;
}

// ---- states ---------------------------------------------------------------------

LevelGeometry level_geometry(const DatasetSplit& split) {
    LevelGeometry g;
    g.level = split.config.level;
    bool first = true;
    auto check = [&](const Record& r) {
        const SequenceLayout s = layout_record(r.instance, r.chain);
        const int vars = static_cast<int>(r.instance.var_order.size());
        if (r.instance.level != g.level) {
            throw MisalignedPositions("instance '" + render(r.instance) + "' is not a level " +
                                      std::to_string(g.level) + " instance");
        }
        if (first) {
            g.length = s.length();
            g.t0 = s.t0;
            g.eq_pos = s.eq_pos;
            g.variables = vars;
            first = false;
        } else if (s.length() != g.length || s.t0 != g.t0 || s.eq_pos != g.eq_pos || vars != g.variables) {
            throw MisalignedPositions("instance '" + render(r.instance) + "' deviates from the level template");
        }
    };
    for (const Record& r : split.train) check(r);
    for (const Record& r : split.test) check(r);
    if (first) throw ConfigError("split has no records");
    return g;
}

std::vector<int> variable_labels(std::span<const Record> records, int variable) {
    std::vector<int> out;
    out.reserve(records.size());
    for (const Record& r : records) {
        if (variable < 1 || variable > static_cast<int>(r.instance.var_order.size())) {
            throw UnknownVariable("v" + std::to_string(variable) + " does not exist at this level");
        }
        const Var v = r.instance.var_order[static_cast<std::size_t>(variable - 1)];
        out.push_back(resolve_greedy(r.instance).values.at(v));
    }
    return out;
}

std::vector<std::vector<int>> record_sequences(std::span<const Record> records) {
    std::vector<std::vector<int>> out;
    out.reserve(records.size());
    for (const Record& r : records) out.push_back(layout_record(r.instance, r.chain).tokens);
    return out;
}

std::vector<float> cell_matrix(const Capture<float>& capture, int rows, int i, int l) {
    std::vector<float> out(static_cast<std::size_t>(rows) * capture.width);
    for (int r = 0; r < rows; ++r) {
        const float* src = capture.at(r, i, l);
        std::copy(src, src + capture.width, out.begin() + static_cast<std::ptrdiff_t>(r) * capture.width);
    }
    return out;
}

// ---- grid -----------------------------------------------------------------------

AccuracyGrid::AccuracyGrid(const LevelGeometry& geometry, int layer_rows)
    : level(geometry.level),
      t_min(geometry.t_min()),
      t_max(geometry.t_max()),
      layers(layer_rows),
      variables(geometry.variables),
      eq_map(geometry.eq_pos) {
    const std::size_t cells = static_cast<std::size_t>(variables) * positions() * layers;
    acc.assign(cells, std::numeric_limits<double>::quiet_NaN());
    n_test.assign(cells, 0);
}

std::size_t AccuracyGrid::slot(int t, int l, int v) const {
    if (v < 1 || v > variables) throw UnknownVariable("v" + std::to_string(v) + " is not in the grid");
    if (t < t_min || t > t_max || l < 0 || l >= layers) {
        throw OutOfRange("cell (t=" + std::to_string(t) + ", l=" + std::to_string(l) + ") outside the grid");
    }
    return (static_cast<std::size_t>(v - 1) * positions() + static_cast<std::size_t>(t - t_min)) * layers +
           static_cast<std::size_t>(l);
}

int AccuracyGrid::eq_of(int t) const {
    if (t < t_min || t > t_max) throw OutOfRange("t=" + std::to_string(t) + " outside the grid");
    return eq_map[static_cast<std::size_t>(t - t_min)];
}

namespace {

constexpr const char* kGridSchema = "#schema=cotprobe-grid/1";
constexpr const char* kGridHeader = "level,t,t_eq,l,variable,accuracy,n_test";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream in(line);
    std::string field;
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

int to_int(const std::string& s, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw SchemaError("bad integer '" + s + "' in " + path.string());
    }
}

}  // namespace

void write_grid_csv(const AccuracyGrid& grid, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingArtifact("cannot write " + path.string());
    out << kGridSchema << '\n' << kGridHeader << '\n';
    char buf[160];
    for (int v = 1; v <= grid.variables; ++v) {
        for (int t = grid.t_min; t <= grid.t_max; ++t) {
            for (int l = 0; l < grid.layers; ++l) {
                const double a = grid.at(t, l, v);
                const auto s = grid.slot(t, l, v);
                if (std::isnan(a)) {
                    std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,v%d,NA,%d\n", grid.level, t, grid.eq_of(t), l, v,
                                  grid.n_test[s]);
                } else {
                    std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,v%d,%.6f,%d\n", grid.level, t, grid.eq_of(t), l, v, a,
                                  grid.n_test[s]);
                }
                out << buf;
            }
        }
    }
}

AccuracyGrid read_grid_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("grid file not found: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kGridSchema) {
        throw SchemaError("unsupported grid schema in " + path.string() + ": '" + line + "'");
    }
    if (!std::getline(in, line) || line != kGridHeader) throw SchemaError("unexpected grid header in " + path.string());
    struct Row {
        int level, t, t_eq, l, v, n;
        double acc;
    };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv(line);
        if (f.size() != 7 || f[4].size() < 2 || f[4][0] != 'v') throw SchemaError("malformed grid row: " + line);
        Row r{to_int(f[0], path), to_int(f[1], path), to_int(f[2], path), to_int(f[3], path),
              to_int(f[4].substr(1), path), to_int(f[6], path), std::numeric_limits<double>::quiet_NaN()};
        if (f[5] != "NA") {
            try {
                r.acc = std::stod(f[5]);
            } catch (const std::exception&) {
                throw SchemaError("bad accuracy '" + f[5] + "' in " + path.string());
            }
            if (!(r.acc >= 0.0 && r.acc <= 1.0)) throw SchemaError("accuracy outside [0,1] in " + path.string());
        }
        rows.push_back(r);
    }
    if (rows.empty()) throw SchemaError("grid file has no cells: " + path.string());
    AccuracyGrid g;
    g.level = rows.front().level;
    g.t_min = g.t_max = rows.front().t;
    for (const Row& r : rows) {
        if (r.level != g.level) throw SchemaError("mixed levels in " + path.string());
        if (r.l < 0 || r.v < 1) throw SchemaError("negative layer or variable index in " + path.string());
        g.t_min = std::min(g.t_min, r.t);
        g.t_max = std::max(g.t_max, r.t);
        g.layers = std::max(g.layers, r.l + 1);
        g.variables = std::max(g.variables, r.v);
    }
    const std::size_t cells = static_cast<std::size_t>(g.variables) * g.positions() * g.layers;
    g.acc.assign(cells, std::numeric_limits<double>::quiet_NaN());
    g.n_test.assign(cells, 0);
    g.eq_map.assign(static_cast<std::size_t>(g.positions()), std::numeric_limits<int>::min());
    for (const Row& r : rows) {
        auto& eq = g.eq_map[static_cast<std::size_t>(r.t - g.t_min)];
        if (eq != std::numeric_limits<int>::min() && eq != r.t_eq) {
            throw SchemaError("inconsistent t_eq for t=" + std::to_string(r.t) + " in " + path.string());
        }
        eq = r.t_eq;
        g.set(r.t, r.l, r.v, r.acc, r.n);
    }
    if (std::find(g.eq_map.begin(), g.eq_map.end(), std::numeric_limits<int>::min()) != g.eq_map.end()) {
        throw SchemaError("grid file skips token positions: " + path.string());
    }
    return g;
}

// ---- probe store ------------------------------------------------------------------

namespace {

constexpr char kStoreMagic[8] = {'C', 'P', 'S', 'T', 'O', 'R', 'E', '1'};
constexpr std::uint32_t kRecordMagic = 0x50524f42;

template <class V>
void put(std::string& out, V v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
bool get(std::istream& in, V& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    return static_cast<bool>(in);
}

bool get_floats(std::istream& in, std::vector<float>& v, std::size_t n) {
    v.resize(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    return static_cast<bool>(in);
}

std::string encode(const StoredProbe& r) {
    std::string out;
    put<std::uint32_t>(out, kRecordMagic);
    put<std::int32_t>(out, r.level);
    put<std::int32_t>(out, r.t);
    put<std::int32_t>(out, r.l);
    put<std::int32_t>(out, r.variable);
    put<std::uint64_t>(out, r.seed);
    put<std::uint8_t>(out, r.permuted ? 1 : 0);
    put<double>(out, r.accuracy);
    put<std::int32_t>(out, r.n_test);
    put<std::int32_t>(out, r.probe.d);
    put<std::int32_t>(out, r.probe.classes);
    put<double>(out, r.probe.final_loss);
    put<std::uint8_t>(out, r.probe.mean.empty() ? 0 : 1);
    auto floats = [&](const std::vector<float>& v) {
        out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    };
    floats(r.probe.w);
    floats(r.probe.b);
    if (!r.probe.mean.empty()) {
        floats(r.probe.mean);
        floats(r.probe.scale);
    }
    return out;
}

bool decode(std::istream& in, StoredProbe& r) {
    std::uint32_t magic = 0;
    std::uint8_t permuted = 0;
    std::uint8_t has_std = 0;
    if (!get(in, magic) || magic != kRecordMagic) return false;
    if (!get(in, r.level) || !get(in, r.t) || !get(in, r.l) || !get(in, r.variable) || !get(in, r.seed) ||
        !get(in, permuted) || !get(in, r.accuracy) || !get(in, r.n_test) || !get(in, r.probe.d) ||
        !get(in, r.probe.classes) || !get(in, r.probe.final_loss) || !get(in, has_std)) {
        return false;
    }
    if (r.probe.d <= 0 || r.probe.d > (1 << 20) || r.probe.classes != kDigitClasses) return false;
    r.permuted = permuted != 0;
    const auto d = static_cast<std::size_t>(r.probe.d);
    if (!get_floats(in, r.probe.w, d * kDigitClasses) || !get_floats(in, r.probe.b, kDigitClasses)) return false;
    r.probe.mean.clear();
    r.probe.scale.clear();
    if (has_std && (!get_floats(in, r.probe.mean, d) || !get_floats(in, r.probe.scale, d))) return false;
    return true;
}

}  // namespace

ProbeStore::ProbeStore(const std::filesystem::path& path, const std::string& tag) : path_(path) {
    if (std::filesystem::exists(path)) {
        std::ifstream in(path, std::ios::binary);
        char magic[sizeof kStoreMagic];
        std::uint32_t len = 0;
        in.read(magic, sizeof magic);
        if (!in || std::memcmp(magic, kStoreMagic, sizeof magic) != 0 || !get(in, len) || len > (1u << 16)) {
            throw ConfigError("not a probe store: " + path.string());
        }
        std::string stored(len, '\0');
        in.read(stored.data(), len);
        if (stored != tag) throw ConfigError("probe store " + path.string() + " belongs to a different run");
        std::streamoff good = in.tellg();
        StoredProbe r;
        while (decode(in, r)) {
            records_.push_back(r);
            good = in.tellg();
        }
        in.close();
        if (static_cast<std::uintmax_t>(good) != std::filesystem::file_size(path)) {
            std::filesystem::resize_file(path, static_cast<std::uintmax_t>(good));
        }
        return;
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingArtifact("cannot create probe store " + path.string());
    std::string header(kStoreMagic, sizeof kStoreMagic);
    put<std::uint32_t>(header, static_cast<std::uint32_t>(tag.size()));
    header += tag;
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
}

const StoredProbe* ProbeStore::find(int level, int t, int l, int variable, std::uint64_t seed, bool permuted) const {
    for (const StoredProbe& r : records_) {
        if (r.level == level && r.t == t && r.l == l && r.variable == variable && r.seed == seed &&
            r.permuted == permuted) {
            return &r;
        }
    }
    return nullptr;
}

void ProbeStore::append(const StoredProbe& record) {
    const std::string bytes = encode(record);
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw MissingArtifact("cannot append to probe store " + path_.string());
    records_.push_back(record);
}

// ---- sweep ----------------------------------------------------------------------

AccuracyGrid sweep(ModelBackend& backend, const DatasetSplit& split, const SweepConfig& config) {
    config.probe.validate();
    if (config.position_chunk <= 0) throw ConfigError("position chunk must be positive");
    const LevelGeometry geom = level_geometry(split);
    const BackendInfo info = backend.info();
    const int layer_rows = info.layers + 1;
    AccuracyGrid grid(geom, layer_rows);

    std::vector<int> vars = config.variables;
    if (vars.empty()) {
        for (int v = 1; v <= geom.variables; ++v) vars.push_back(v);
    }
    for (const int v : vars) {
        if (v < 1 || v > geom.variables) throw UnknownVariable("v" + std::to_string(v) + " does not exist at this level");
    }
    std::vector<int> ts = config.ts;
    if (ts.empty()) {
        for (int t = geom.t_min(); t <= geom.t_max(); ++t) ts.push_back(t);
    }
    for (const int t : ts) {
        if (t < geom.t_min() || t > geom.t_max()) throw OutOfRange("t=" + std::to_string(t) + " outside the level");
    }
    std::vector<int> layers = config.layers;
    if (layers.empty()) {
        for (int l = 0; l < layer_rows; ++l) layers.push_back(l);
    }
    for (const int l : layers) {
        if (l < 0 || l >= layer_rows) throw OutOfRange("layer " + std::to_string(l) + " outside the model");
    }

    const std::span<const Record> train(split.train.data(),
                                        std::min(split.train.size(), static_cast<std::size_t>(config.max_train)));
    const std::span<const Record> test(split.test.data(),
                                       std::min(split.test.size(), static_cast<std::size_t>(config.max_test)));
    const auto train_seqs = record_sequences(train);
    const auto test_seqs = record_sequences(test);
    const int n_train = static_cast<int>(train.size());
    const int n_test = static_cast<int>(test.size());

    std::vector<std::vector<int>> train_labels(static_cast<std::size_t>(geom.variables) + 1);
    std::vector<std::vector<int>> test_labels(static_cast<std::size_t>(geom.variables) + 1);
    for (const int v : vars) {
        train_labels[v] = variable_labels(train, v);
        test_labels[v] = variable_labels(test, v);
        if (config.permute_labels) {
            Rng rng(mix_seed(config.probe.seed, 0x9e37 + static_cast<std::uint64_t>(v)));
            rng.shuffle(std::span(train_labels[v]));
            rng.shuffle(std::span(test_labels[v]));
        }
    }

    std::unique_ptr<ProbeStore> store;
    if (!config.store.empty()) store = std::make_unique<ProbeStore>(config.store, config.store_tag);

    const int total = static_cast<int>(ts.size() * layers.size() * vars.size());
    int done = 0;
    const std::uint64_t seed = config.probe.seed;
    for (std::size_t c0 = 0; c0 < ts.size(); c0 += static_cast<std::size_t>(config.position_chunk)) {
        const std::size_t c1 = std::min(ts.size(), c0 + static_cast<std::size_t>(config.position_chunk));
        bool needed = false;
        for (std::size_t k = c0; k < c1 && !needed; ++k) {
            for (const int l : layers) {
                for (const int v : vars) {
                    const StoredProbe* hit =
                        store ? store->find(geom.level, ts[k], l, v, seed, config.permute_labels) : nullptr;
                    if (hit) grid.set(ts[k], l, v, hit->accuracy, hit->n_test);
                    else needed = true;
                }
            }
        }
        if (!needed) {
            done += static_cast<int>((c1 - c0) * layers.size() * vars.size());
            if (config.progress) config.progress(done, total);
            continue;
        }
        CaptureSpec spec;
        for (std::size_t k = c0; k < c1; ++k) spec.indices.push_back(ts[k] + geom.t0);
        spec.layers = layers;
        const Capture<float> cap_train = backend.capture(train_seqs, spec);
        const Capture<float> cap_test = backend.capture(test_seqs, spec);
        for (std::size_t k = c0; k < c1; ++k) {
            const int ii = static_cast<int>(k - c0);
            for (std::size_t li = 0; li < layers.size(); ++li) {
                const int l = layers[li];
                std::vector<float> x_train;
                std::vector<float> x_test;
                for (const int v : vars) {
                    ++done;
                    if (store && store->find(geom.level, ts[k], l, v, seed, config.permute_labels)) continue;
                    if (x_train.empty()) {
                        x_train = cell_matrix(cap_train, n_train, ii, static_cast<int>(li));
                        x_test = cell_matrix(cap_test, n_test, ii, static_cast<int>(li));
                    }
                    try {
                        StoredProbe rec;
                        rec.probe = train_probe(x_train.data(), n_train, info.width, train_labels[v], config.probe);
                        rec.accuracy = eval_probe(rec.probe, x_test.data(), n_test, test_labels[v]);
                        rec.level = geom.level;
                        rec.t = ts[k];
                        rec.l = l;
                        rec.variable = v;
                        rec.seed = seed;
                        rec.permuted = config.permute_labels;
                        rec.n_test = n_test;
                        grid.set(ts[k], l, v, rec.accuracy, n_test);
                        if (store) store->append(rec);
                    } catch (const DegenerateLabels&) {
                        // stays untrained
                    }
                    if (config.progress) config.progress(done, total);
                }
            }
        }
    }
    return grid;
}

}  // namespace cotprobe
