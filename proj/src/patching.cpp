#include "cotprobe/patching.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "cotprobe/errors.hpp"

namespace cotprobe {

namespace {

LevelGeometry record_geometry(const Record& r) {
    const SequenceLayout lay = layout_record(r.instance, r.chain);
    LevelGeometry g;
    g.level = r.instance.level;
    g.length = lay.length();
    g.t0 = lay.t0;
    g.variables = static_cast<int>(r.instance.var_order.size());
    g.eq_pos = lay.eq_pos;
    return g;
}

bool same_geometry(const LevelGeometry& a, const LevelGeometry& b) {
    return a.level == b.level && a.length == b.length && a.t0 == b.t0 && a.eq_pos == b.eq_pos;
}

int argmax(std::span<const float> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

InterventionPair make_pair(const Record& receiver, const Record& source) {
    if (!same_geometry(record_geometry(receiver), record_geometry(source))) {
        throw GeometryMismatch("receiver '" + render(receiver.instance) + "' and source '" + render(source.instance) +
                               "' do not share a token layout");
    }
    if (receiver.chain.answer == source.chain.answer) {
        throw GeometryMismatch("receiver and source have the same answer " + std::to_string(receiver.chain.answer));
    }
    return {receiver, source};
}

std::vector<InterventionPair> make_pairs(std::span<const Record> pool, int n, Rng& rng) {
    if (n < 0) throw ConfigError("pair count must be non-negative");
    std::vector<InterventionPair> out;
    if (n == 0) return out;
    if (pool.size() < 2) throw ExhaustedSampleSpace("need at least two records to form pairs");
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t next = order.size();
    out.reserve(static_cast<std::size_t>(n));
    while (static_cast<int>(out.size()) < n) {
        if (next == order.size()) {
            rng.shuffle(std::span<std::size_t>(order));
            next = 0;
        }
        const Record& receiver = pool[order[next++]];
        bool found = false;
        for (int attempt = 0; attempt < 1000 && !found; ++attempt) {
            const Record& source = pool[rng.below(pool.size())];
            if (source.chain.answer == receiver.chain.answer) continue;
            out.push_back(make_pair(receiver, source));
            found = true;
        }
        if (!found) throw ExhaustedSampleSpace("no source with a different answer for '" + render(receiver.instance) + "'");
    }
    return out;
}

std::vector<InterventionPair> read_pairs_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("pairs file not found: " + path.string());
    std::vector<Record> records;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        Record r;
        r.instance = parse_instance(line);
        r.chain = build_gold_chain(r.instance);
        records.push_back(std::move(r));
    }
    if (records.empty() || records.size() % 2 != 0) {
        throw SchemaError("pairs file needs receiver/source lines in twos: " + path.string());
    }
    std::vector<InterventionPair> out;
    for (std::size_t i = 0; i < records.size(); i += 2) out.push_back(make_pair(records[i], records[i + 1]));
    return out;
}

std::vector<Grid> partition_grids(const LevelGeometry& geometry, int layer_count, int band_stride,
                                  bool embedding_in_first_band) {
    if (layer_count < 1) throw ConfigError("layer count must be positive");
    if (band_stride < 1) throw ConfigError("band stride must be positive");
    if (geometry.eq_pos.empty()) throw GeometryMismatch("empty geometry");

    std::vector<std::vector<int>> bands;
    if (!embedding_in_first_band) bands.push_back({0});
    for (int lo = 1; lo <= layer_count; lo += band_stride) {
        std::vector<int> band;
        if (lo == 1 && embedding_in_first_band) band.push_back(0);
        for (int l = lo; l < lo + band_stride && l <= layer_count; ++l) band.push_back(l);
        bands.push_back(std::move(band));
    }

    std::vector<Grid> grids;
    const int n = static_cast<int>(geometry.eq_pos.size());
    int i = 0;
    while (i < n) {
        const int eq = geometry.eq_pos[static_cast<std::size_t>(i)];
        int j = i;
        while (j + 1 < n && geometry.eq_pos[static_cast<std::size_t>(j + 1)] == eq) ++j;
        for (std::size_t b = 0; b < bands.size(); ++b) {
            Grid g;
            g.id = static_cast<int>(grids.size());
            g.eq = eq;
            g.band = static_cast<int>(b);
            g.first_index = i;
            g.last_index = j;
            g.layers = bands[b];
            grids.push_back(std::move(g));
        }
        i = j + 1;
    }
    return grids;
}

Target resolve_target(const LevelGeometry& geometry, const std::string& name) {
    const int n = static_cast<int>(geometry.eq_pos.size());
    if (name == "answer") return {name, n - 2};  // the digit before the closing ';'
    if (name.rfind("eq:", 0) == 0) {
        int k = -1;
        try {
            k = std::stoi(name.substr(3));
        } catch (const std::exception&) {
            throw ConfigError("bad target '" + name + "'");
        }
        int last = -1;
        for (int i = geometry.t0; i < n; ++i) {
            if (geometry.eq_pos[static_cast<std::size_t>(i)] == k) last = i;
        }
        if (k < 0 || last < 0) throw ConfigError("target '" + name + "' has no Output equation");
        return {name, last - 1};  // skip the separator
    }
    throw ConfigError("unknown target '" + name + "' (use eq:K or answer)");
}

std::vector<Target> default_targets(const LevelGeometry& geometry) {
    std::vector<Target> out;
    const int max_eq = geometry.eq_pos.empty() ? -1 : geometry.eq_pos.back();
    for (int k : {2, 4}) {
        if (k <= max_eq) out.push_back(resolve_target(geometry, "eq:" + std::to_string(k)));
    }
    out.push_back(resolve_target(geometry, "answer"));
    return out;
}

PairRun clean_runs(ModelBackend& backend, const InterventionPair& pair) {
    PairRun run;
    run.receiver_tokens = layout_record(pair.receiver.instance, pair.receiver.chain).tokens;
    run.source_tokens = layout_record(pair.source.instance, pair.source.chain).tokens;
    if (run.receiver_tokens.size() != run.source_tokens.size()) {
        throw GeometryMismatch("receiver and source lengths differ");
    }
    run.source_states = backend.capture({run.source_tokens}, CaptureSpec{});
    const int vocab = backend.info().vocab;
    auto predictions = [&](const std::vector<int>& tokens) {
        const std::vector<float> logits = backend.logits(tokens);
        std::vector<int> pred(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            pred[i] = argmax(std::span<const float>(logits).subspan(i * static_cast<std::size_t>(vocab),
                                                                    static_cast<std::size_t>(vocab)));
        }
        return pred;
    };
    run.receiver_pred = predictions(run.receiver_tokens);
    run.source_pred = predictions(run.source_tokens);
    return run;
}

PatchedRequest grid_request(const PairRun& run, const Grid& grid, std::span<const Target> targets) {
    const Capture<float>& cap = run.source_states;
    PatchedRequest req;
    req.tokens = run.receiver_tokens;
    for (int i = grid.first_index; i <= grid.last_index; ++i) {
        for (int l : grid.layers) {
            const auto ii = std::find(cap.indices.begin(), cap.indices.end(), i);
            const auto ll = std::find(cap.layers.begin(), cap.layers.end(), l);
            if (ii == cap.indices.end() || ll == cap.layers.end()) {
                throw GeometryMismatch("source states lack index " + std::to_string(i) + " layer " +
                                       std::to_string(l));
            }
            const float* v = cap.at(0, static_cast<int>(ii - cap.indices.begin()),
                                    static_cast<int>(ll - cap.layers.begin()));
            req.patches.push_back({i, l, std::vector<float>(v, v + cap.width)});
        }
    }
    for (const Target& t : targets) req.targets.push_back(t.index - 1);
    return req;
}

Outcome classify(const PairRun& run, const Target& target, std::span<const float> logits) {
    const int pred = argmax(logits);
    const auto p = static_cast<std::size_t>(target.index - 1);
    if (pred == run.receiver_pred.at(p)) return Outcome::Unchanged;
    if (pred == run.source_pred.at(p)) return Outcome::Success;
    return Outcome::Other;
}

Outcome run_grid_intervention(ModelBackend& backend, const PairRun& run, const Grid& grid, const Target& target) {
    const std::vector<std::vector<float>> out = backend.patched({grid_request(run, grid, std::span(&target, 1))});
    return classify(run, target, out.at(0));
}

std::vector<std::pair<int, double>> InterventionReport::pooled(std::size_t target) const {
    std::vector<std::pair<int, double>> out;
    for (std::size_t g = 0; g < grids.size(); ++g) {
        const double rate = at(target, g).success_rate();
        if (out.empty() || out.back().first != grids[g].eq) {
            out.emplace_back(grids[g].eq, rate);
        } else {
            out.back().second = std::max(out.back().second, rate);
        }
    }
    return out;
}

InterventionReport empty_report(int level, std::vector<Grid> grids, std::vector<Target> targets) {
    InterventionReport r;
    r.level = level;
    r.grids = std::move(grids);
    r.targets = std::move(targets);
    r.cells.assign(r.grids.size() * r.targets.size(), CellCounts{});
    return r;
}

void add_outcome(InterventionReport& report, std::size_t target, std::size_t grid, Outcome outcome) {
    CellCounts& c = report.at(target, grid);
    ++c.n;
    if (outcome == Outcome::Success) ++c.success;
    if (outcome == Outcome::Unchanged) ++c.unchanged;
}

InterventionReport aggregate(const std::vector<InterventionReport>& parts) {
    if (parts.empty()) return InterventionReport{};
    InterventionReport out = parts.front();
    for (std::size_t p = 1; p < parts.size(); ++p) {
        const InterventionReport& r = parts[p];
        bool same = r.level == out.level && r.grids.size() == out.grids.size() && r.targets.size() == out.targets.size();
        for (std::size_t t = 0; same && t < r.targets.size(); ++t) {
            same = r.targets[t].name == out.targets[t].name && r.targets[t].index == out.targets[t].index;
        }
        for (std::size_t g = 0; same && g < r.grids.size(); ++g) {
            same = r.grids[g].first_index == out.grids[g].first_index && r.grids[g].layers == out.grids[g].layers;
        }
        if (!same) throw GeometryMismatch("reports cover different grids or targets");
        for (std::size_t c = 0; c < out.cells.size(); ++c) {
            out.cells[c].success += r.cells[c].success;
            out.cells[c].unchanged += r.cells[c].unchanged;
            out.cells[c].n += r.cells[c].n;
        }
    }
    return out;
}

namespace {

constexpr const char* kProgressSchema = "#schema=cotprobe-patch-progress/1";

int load_progress(const std::filesystem::path& path, const std::string& tag, InterventionReport& report) {
    std::ifstream in(path);
    if (!in) return 0;
    std::string line;
    std::getline(in, line);
    if (line != kProgressSchema) throw SchemaError("unsupported progress file " + path.string());
    std::getline(in, line);
    if (line != "tag=" + tag) throw ConfigError("progress file " + path.string() + " belongs to another run");
    int done = 0;
    std::size_t cells = 0;
    in >> done >> cells;
    if (!in || cells != report.cells.size()) throw ConfigError("progress file " + path.string() + " has another shape");
    for (CellCounts& c : report.cells) in >> c.success >> c.unchanged >> c.n;
    if (!in) return 0;  // torn write: start over
    return done;
}

void save_progress(const std::filesystem::path& path, const std::string& tag, int done,
                   const InterventionReport& report) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << kProgressSchema << "\ntag=" << tag << '\n' << done << ' ' << report.cells.size() << '\n';
        for (const CellCounts& c : report.cells) out << c.success << ' ' << c.unchanged << ' ' << c.n << '\n';
        if (!out) throw MissingArtifact("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

InterventionReport run_interventions(ModelBackend& backend, std::span<const InterventionPair> pairs,
                                     const InterventionConfig& config) {
    if (pairs.empty()) throw ConfigError("no intervention pairs");
    if (config.chunk < 1) throw ConfigError("chunk must be positive");
    const LevelGeometry geometry = record_geometry(pairs.front().receiver);
    for (const InterventionPair& p : pairs) {
        if (!same_geometry(record_geometry(p.receiver), geometry)) {
            throw GeometryMismatch("pairs mix token layouts");
        }
    }
    const BackendInfo info = backend.info();
    if (geometry.length > info.context) throw GeometryMismatch("sequences exceed the backend context");

    std::vector<Target> targets;
    if (config.targets.empty()) {
        targets = default_targets(geometry);
    } else {
        for (const std::string& name : config.targets) targets.push_back(resolve_target(geometry, name));
    }
    InterventionReport report = empty_report(
        geometry.level, partition_grids(geometry, info.layers, config.band_stride, config.embedding_in_first_band),
        targets);

    const int total = static_cast<int>(pairs.size());
    int done = config.progress.empty() ? 0 : load_progress(config.progress, config.progress_tag, report);
    while (done < total) {
        const int end = std::min(total, done + config.chunk);
        std::vector<PairRun> runs;
        std::vector<PatchedRequest> requests;
        for (int p = done; p < end; ++p) {
            runs.push_back(clean_runs(backend, pairs[static_cast<std::size_t>(p)]));
            for (const Grid& g : report.grids) requests.push_back(grid_request(runs.back(), g, report.targets));
        }
        const std::vector<std::vector<float>> logits = backend.patched(requests);
        const auto vocab = static_cast<std::size_t>(info.vocab);
        std::size_t r = 0;
        for (const PairRun& run : runs) {
            for (std::size_t g = 0; g < report.grids.size(); ++g, ++r) {
                const std::vector<float>& rows = logits.at(r);
                for (std::size_t t = 0; t < report.targets.size(); ++t) {
                    add_outcome(report, t, g,
                                classify(run, report.targets[t], std::span(rows).subspan(t * vocab, vocab)));
                }
            }
        }
        done = end;
        if (!config.progress.empty()) save_progress(config.progress, config.progress_tag, done, report);
        if (config.on_progress) config.on_progress(done, total);
    }
    return report;
}

namespace {

constexpr const char* kReportSchema = "#schema=cotprobe-patch/1";
constexpr const char* kReportHeader = "level,target,grid_eq,grid_band,success_rate,unchanged_rate,n";

}  // namespace

void write_report_csv(const InterventionReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingArtifact("cannot write " + path.string());
    out << kReportSchema << '\n' << kReportHeader << '\n';
    char buf[128];
    for (std::size_t t = 0; t < report.targets.size(); ++t) {
        for (std::size_t g = 0; g < report.grids.size(); ++g) {
            const CellCounts& c = report.at(t, g);
            std::snprintf(buf, sizeof buf, "%d,%s,%d,%d,%.6f,%.6f,%d\n", report.level, report.targets[t].name.c_str(),
                          report.grids[g].eq, report.grids[g].band, c.success_rate(), c.unchanged_rate(), c.n);
            out << buf;
        }
    }
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("patching report not found: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kReportSchema) throw SchemaError("unsupported patching schema in " + path.string());
    if (!std::getline(in, line) || line != kReportHeader) throw SchemaError("unexpected patching header in " + path.string());
    std::vector<ReportRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != 7) throw SchemaError("malformed patching row: " + line);
        try {
            rows.push_back({std::stoi(f[0]), f[1], std::stoi(f[2]), std::stoi(f[3]), std::stod(f[4]), std::stod(f[5]),
                            std::stoi(f[6])});
        } catch (const std::logic_error&) {
            throw SchemaError("malformed patching row: " + line);
        }
    }
    return rows;
}

}  // namespace cotprobe
