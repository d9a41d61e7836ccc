// Command-line driver: gen | train | eval | probe | metrics | patch | report | serve.
//
// Artifacts live under <root>/L<level>/ (root from --root, $COTPROBE_ROOT, or
// ./runs). Every command writes <output>.manifest next to its main output.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "cotprobe/backend.hpp"
#include "cotprobe/errors.hpp"
#include "cotprobe/hashing.hpp"
#include "cotprobe/metrics.hpp"
#include "cotprobe/patching.hpp"
#include "cotprobe/report.hpp"

namespace fs = std::filesystem;
using namespace cotprobe;

namespace {

struct Options {
    std::string root;
    int level = 1;
    std::uint64_t seed = 0;
    std::string out;
    std::string adapter_url;
    std::vector<double> taus = {0.85, 0.90, 0.95};

    int n_train = 10000;
    int n_test = 2000;
    std::string operators = "+-";
    bool symmetric_leak = false;

    int layers = 4;
    int width = 128;
    int heads = 4;
    int context = 96;
    int max_steps = 3000;
    int batch_size = 64;
    double lr = 2e-3;
    int warmup = 100;
    int eval_every = 100;
    double time_budget = 0;

    double probe_lr = 1e-3;
    int probe_epochs = 10000;
    int probe_batch = 10000;
    std::vector<int> positions;
    std::vector<int> probe_layers;
    std::vector<int> variables;
    bool permute = false;
    int max_train = 10000;
    int max_test = 2000;

    int pairs = 2000;
    int band_stride = 4;
    bool no_embed_band = false;
    std::vector<std::string> targets;
    std::string pairs_file;

    std::string published;
    std::string host = "127.0.0.1";
    int port = 8080;
    bool quiet = false;

    fs::path level_dir() const { return fs::path(root) / ("L" + std::to_string(level)); }
};

template <class T>
std::string join(const std::vector<T>& v) {
    std::ostringstream s;
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
}

class Manifest {
public:
    explicit Manifest(std::string command) { set("command", std::move(command)); }
    template <class T>
    void set(const std::string& key, const T& value) {
        std::ostringstream s;
        s.precision(17);
        s << value;
        entries_[key] = s.str();
    }
    void input(const std::string& name, const fs::path& path) {
        set("input." + name, path.string() + "@" + file_fingerprint(path));
    }
    void output(const std::string& name, const fs::path& path) {
        set("output." + name, path.string() + "@" + file_fingerprint(path));
    }
    void write(const fs::path& main_output) const {
        fs::path path = main_output;
        path += ".manifest";
        std::ofstream out(path, std::ios::binary);
        out << "#schema=cotprobe-manifest/1\n";
        for (const auto& [k, v] : entries_) out << k << '=' << v << '\n';
        if (!out) throw MissingArtifact("cannot write " + path.string());
    }

private:
    std::map<std::string, std::string> entries_;
};

void log(const Options& o, const std::string& msg) {
    if (!o.quiet) std::cerr << msg << '\n';
}

fs::path data_dir(const Options& o) { return o.level_dir() / "data"; }
fs::path model_path(const Options& o) { return o.level_dir() / "model.bin"; }
fs::path grid_path(const Options& o, bool permuted) {
    return o.level_dir() / "probe" / (permuted ? "grid_permuted.csv" : "grid.csv");
}
fs::path out_or(const Options& o, const fs::path& fallback) { return o.out.empty() ? fallback : fs::path(o.out); }

DatasetSplit load_split(const Options& o) {
    const fs::path dir = data_dir(o);
    if (!fs::exists(dir / "train.jsonl") || !fs::exists(dir / "test.jsonl")) {
        throw MissingArtifact("no dataset under " + dir.string() + " (run gen first)");
    }
    DatasetSplit split = read_split(dir);
    if (split.config.level != o.level) throw ConfigError("dataset under " + dir.string() + " is not level " + std::to_string(o.level));
    return split;
}

Model load_model(const Options& o) {
    if (!fs::exists(model_path(o))) throw MissingArtifact("no model at " + model_path(o).string() + " (run train first)");
    return load_checkpoint(model_path(o));
}

void model_settings(Manifest& m, const Options& o) {
    m.set("layers", o.layers);
    m.set("width", o.width);
    m.set("heads", o.heads);
    m.set("context", o.context);
}

int cmd_gen(const Options& o) {
    GenConfig g;
    g.level = o.level;
    g.n_train = o.n_train;
    g.n_test = o.n_test;
    g.seed = o.seed;
    g.operators = o.operators;
    g.symmetric_leak = o.symmetric_leak;
    g.validate();
    const DatasetSplit split = generate_split(g);
    const VerificationReport report = verify_split(split);
    if (!report.empty()) {
        for (const Finding& f : report.findings) std::cerr << to_string(f.kind) << ": " << f.detail << '\n';
        throw Error("generated split failed verification");
    }
    const fs::path dir = o.out.empty() ? data_dir(o) : fs::path(o.out);
    write_split(split, dir);
    Manifest m("gen");
    m.set("config", g.canonical());
    m.set("fingerprint", split.fingerprint);
    m.output("train", dir / "train.jsonl");
    m.output("test", dir / "test.jsonl");
    m.write(dir / "test.jsonl");
    std::cout << "level " << o.level << ": " << split.train.size() << " train, " << split.test.size()
              << " test instances -> " << dir.string() << '\n';
    return 0;
}

int cmd_train(const Options& o) {
    const DatasetSplit split = load_split(o);
    ModelConfig mc;
    mc.layers = o.layers;
    mc.width = o.width;
    mc.heads = o.heads;
    mc.context = o.context;
    mc.seed = o.seed;
    mc.validate();
    TrainConfig tc;
    tc.max_steps = o.max_steps;
    tc.batch_size = o.batch_size;
    tc.lr = o.lr;
    tc.warmup = o.warmup;
    tc.eval_every = o.eval_every;
    tc.time_budget_s = o.time_budget;
    tc.seed = o.seed;
    Model model(mc);
    const TrainResult result = train_model(model, split, tc);
    const fs::path out = out_or(o, model_path(o));
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_checkpoint(model, out);

    fs::path curve = out;
    curve.replace_extension(".curve.csv");
    {
        std::ofstream c(curve, std::ios::binary);
        c << "#schema=cotprobe-curve/1\nstep,loss,val_accuracy\n";
        char buf[96];
        for (const CurvePoint& p : result.curve) {
            std::snprintf(buf, sizeof buf, "%d,%.6f,%s\n", p.step, p.loss,
                          p.val_accuracy < 0 ? "NA" : std::to_string(p.val_accuracy).c_str());
            c << buf;
        }
    }
    Manifest m("train");
    model_settings(m, o);
    m.set("seed", o.seed);
    m.set("max_steps", o.max_steps);
    m.set("batch_size", o.batch_size);
    m.set("lr", o.lr);
    m.set("warmup", o.warmup);
    m.set("eval_every", o.eval_every);
    m.set("time_budget", o.time_budget);
    m.set("steps_run", result.steps);
    m.input("train", data_dir(o) / "train.jsonl");
    m.input("test", data_dir(o) / "test.jsonl");
    m.output("model", out);
    m.output("curve", curve);
    m.write(out);
    std::cout << "trained " << result.steps << " steps" << (result.stopped_early ? " (early stop)" : "") << " -> "
              << out.string() << '\n';
    return 0;
}

int cmd_eval(const Options& o) {
    const DatasetSplit split = load_split(o);
    const Model model = load_model(o);
    const double acc = evaluate_exact_match(model, split.test);
    const fs::path out = out_or(o, o.level_dir() / "eval.csv");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    {
        std::ofstream f(out, std::ios::binary);
        char buf[96];
        std::snprintf(buf, sizeof buf, "%d,%zu,%.6f\n", o.level, split.test.size(), acc);
        f << "#schema=cotprobe-eval/1\nlevel,n_test,exact_match\n" << buf;
    }
    Manifest m("eval");
    m.input("model", model_path(o));
    m.input("test", data_dir(o) / "test.jsonl");
    m.output("eval", out);
    m.write(out);
    std::printf("level %d exact match %.4f on %zu test instances\n", o.level, acc, split.test.size());
    return 0;
}

struct BackendHandle {
    std::unique_ptr<Model> model;
    std::unique_ptr<ModelBackend> backend;
    std::string identity;
};

BackendHandle open_backend(const Options& o) {
    BackendHandle h;
    if (!o.adapter_url.empty()) {
        h.backend = std::make_unique<HttpBackend>(o.adapter_url);
        const BackendInfo i = h.backend->info();
        h.identity = o.adapter_url + "#" + std::to_string(i.layers) + "x" + std::to_string(i.width);
    } else {
        h.model = std::make_unique<Model>(load_model(o));
        h.backend = std::make_unique<LocalBackend>(*h.model);
        h.identity = file_fingerprint(model_path(o));
    }
    return h;
}

int cmd_probe(const Options& o) {
    const DatasetSplit split = load_split(o);
    BackendHandle h = open_backend(o);
    SweepConfig sc;
    sc.probe.lr = o.probe_lr;
    sc.probe.epochs = o.probe_epochs;
    sc.probe.batch_size = o.probe_batch;
    sc.probe.seed = o.seed;
    sc.variables = o.variables;
    sc.ts = o.positions;
    sc.layers = o.probe_layers;
    sc.permute_labels = o.permute;
    sc.max_train = o.max_train;
    sc.max_test = o.max_test;
    const fs::path out = out_or(o, grid_path(o, o.permute));
    sc.store_tag = fingerprint(h.identity + "|" + split.fingerprint + "|" + std::to_string(o.probe_lr) + "|" +
                               std::to_string(o.probe_epochs) + "|" + std::to_string(o.probe_batch) + "|" +
                               std::to_string(o.max_train) + "|" + std::to_string(o.max_test));
    sc.store = out.parent_path() / ("probes-" + sc.store_tag + ".store");
    int last_pct = -1;
    sc.progress = [&](int done, int total) {
        const int pct = total ? done * 100 / total : 100;
        if (pct / 5 != last_pct / 5) log(o, "probe: " + std::to_string(done) + "/" + std::to_string(total) + " cells");
        last_pct = pct;
    };
    const AccuracyGrid grid = sweep(*h.backend, split, sc);
    write_grid_csv(grid, out);
    Manifest m("probe");
    m.set("model", h.identity);
    m.set("seed", o.seed);
    m.set("probe_lr", o.probe_lr);
    m.set("probe_epochs", o.probe_epochs);
    m.set("probe_batch", o.probe_batch);
    m.set("positions", join(o.positions));
    m.set("probe_layers", join(o.probe_layers));
    m.set("variables", join(o.variables));
    m.set("permute", o.permute);
    m.set("max_train", o.max_train);
    m.set("max_test", o.max_test);
    m.input("train", data_dir(o) / "train.jsonl");
    m.input("test", data_dir(o) / "test.jsonl");
    m.output("grid", out);
    m.write(out);
    std::cout << "grid -> " << out.string() << '\n';
    return 0;
}

int cmd_metrics(const Options& o) {
    const fs::path in = grid_path(o, false);
    const AccuracyGrid grid = read_grid_csv(in);
    if (grid.level != o.level) throw ConfigError("grid " + in.string() + " is not level " + std::to_string(o.level));
    Rng rng(o.seed);
    const Instance templ = generate_instance(o.level, rng);
    const fs::path dir = o.out.empty() ? o.level_dir() / "metrics" : fs::path(o.out);
    for (double tau : o.taus) {
        const ResolutionTimeline tl = timeline(grid, templ, tau);
        char name[64];
        std::snprintf(name, sizeof name, "timeline_tau%.2f.csv", tau);
        const fs::path out = dir / name;
        write_timeline_csv({tl}, out);
        Manifest m("metrics");
        m.set("tau", tau);
        m.input("grid", in);
        m.output("timeline", out);
        m.write(out);
        std::printf("tau %.2f -> %s\n", tau, out.string().c_str());
        for (const VariableTimeline& v : tl.variables) {
            std::printf("  v%d (%c): steps %d  t*_eq %s  t_dagger_eq %d  pre %.2f  post %.2f  %s\n", v.variable, v.name,
                        v.steps, v.t_star_eq ? std::to_string(*v.t_star_eq).c_str() : "N/A", v.t_dagger_eq, v.acc_pre,
                        v.acc_post, resolution_name(v.resolution));
        }
    }
    return 0;
}

int cmd_patch(const Options& o) {
    BackendHandle h = open_backend(o);
    std::vector<InterventionPair> pairs;
    Manifest m("patch");
    if (!o.pairs_file.empty()) {
        pairs = read_pairs_file(o.pairs_file);
        m.input("pairs", o.pairs_file);
    } else {
        const DatasetSplit split = load_split(o);
        Rng rng(mix_seed(o.seed, 0x9a17));
        pairs = make_pairs(split.test, o.pairs, rng);
        m.input("test", data_dir(o) / "test.jsonl");
    }
    const fs::path out = out_or(o, o.level_dir() / "patch" / "report.csv");
    InterventionConfig ic;
    ic.band_stride = o.band_stride;
    ic.embedding_in_first_band = !o.no_embed_band;
    ic.targets = o.targets;
    ic.progress = out.parent_path() / (out.stem().string() + ".progress");
    ic.progress_tag = fingerprint(h.identity + "|" + std::to_string(o.seed) + "|" + std::to_string(pairs.size()) + "|" +
                                  std::to_string(o.band_stride) + "|" + join(o.targets) + "|" + o.pairs_file);
    ic.on_progress = [&](int done, int total) {
        log(o, "patch: " + std::to_string(done) + "/" + std::to_string(total) + " pairs");
    };
    const InterventionReport report = run_interventions(*h.backend, pairs, ic);
    write_report_csv(report, out);
    m.set("model", h.identity);
    m.set("seed", o.seed);
    m.set("pairs", pairs.size());
    m.set("band_stride", o.band_stride);
    m.set("embedding_in_first_band", !o.no_embed_band);
    m.set("targets", join(o.targets));
    m.output("report", out);
    m.write(out);
    for (std::size_t t = 0; t < report.targets.size(); ++t) {
        std::printf("%s:", report.targets[t].name.c_str());
        for (const auto& [eq, rate] : report.pooled(t)) std::printf(" %d:%.2f", eq, rate);
        std::printf("\n");
    }
    std::cout << "report -> " << out.string() << '\n';
    return 0;
}

int cmd_report(const Options& o) {
    std::vector<fs::path> inputs;
    const fs::path grid = grid_path(o, false);
    if (fs::exists(grid)) inputs.push_back(grid);
    const fs::path metrics = o.level_dir() / "metrics";
    if (fs::exists(metrics)) {
        std::vector<fs::path> found;
        for (const auto& e : fs::directory_iterator(metrics)) {
            if (e.path().extension() == ".csv") found.push_back(e.path());
        }
        std::sort(found.begin(), found.end());
        inputs.insert(inputs.end(), found.begin(), found.end());
    }
    const fs::path patch = o.level_dir() / "patch" / "report.csv";
    if (fs::exists(patch)) inputs.push_back(patch);
    if (inputs.empty()) throw MissingArtifact("nothing to report under " + o.level_dir().string());
    fs::path published = o.published;
    if (published.empty()) {
        const fs::path fixture = fs::path(COTPROBE_SOURCE_DIR) / "fixtures" / "published_timeline.csv";
        if (fs::exists(fixture)) published = fixture;
    }
    const fs::path dir = o.out.empty() ? o.level_dir() / "report" : fs::path(o.out);
    const double tau = o.taus.size() == 1 ? o.taus.front() : kDefaultTau;
    for (const fs::path& p : emit_report(inputs, published, dir, tau)) std::cout << p.string() << '\n';
    return 0;
}

int cmd_serve(const Options& o) {
    const Model model = load_model(o);
    LocalBackend backend(model);
    AdapterServer server(backend);
    const int port = server.bind(o.host, o.port);
    std::cout << "serving " << model_path(o).string() << " on http://" << o.host << ':' << port << std::endl;
    server.serve();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cotprobe: probing and patching toolkit for chain-of-thought arithmetic tasks"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value file; keys are long option names");
    Options o;
    const char* env_root = std::getenv("COTPROBE_ROOT");
    o.root = env_root && *env_root ? env_root : "runs";

    app.add_option("--root", o.root, "artifact root (default $COTPROBE_ROOT or ./runs)");
    app.add_option("--level", o.level, "task level 1-5")->check(CLI::Range(1, 5));
    app.add_option("--seed", o.seed, "seed for the command's randomness");
    app.add_option("--out", o.out, "override the command's output path");
    app.add_option("--adapter-url", o.adapter_url, "use an external model served over HTTP");
    app.add_option("--tau", o.taus, "thresholds for metrics")->delimiter(',');
    app.add_flag("--quiet", o.quiet, "no progress output");

    app.add_option("--n-train", o.n_train);
    app.add_option("--n-test", o.n_test);
    app.add_option("--operators", o.operators);
    app.add_flag("--symmetric-leak", o.symmetric_leak);

    app.add_option("--layers", o.layers);
    app.add_option("--width", o.width);
    app.add_option("--heads", o.heads);
    app.add_option("--context", o.context);
    app.add_option("--max-steps", o.max_steps);
    app.add_option("--batch-size", o.batch_size);
    app.add_option("--lr", o.lr);
    app.add_option("--warmup", o.warmup);
    app.add_option("--eval-every", o.eval_every);
    app.add_option("--time-budget", o.time_budget, "seconds; 0 = none (a budget makes training timing-dependent)");

    app.add_option("--probe-lr", o.probe_lr);
    app.add_option("--probe-epochs", o.probe_epochs);
    app.add_option("--probe-batch", o.probe_batch);
    app.add_option("--positions", o.positions, "relative token positions t to probe (default all)")->delimiter(',');
    app.add_option("--probe-layers", o.probe_layers, "layers to probe (default all)")->delimiter(',');
    app.add_option("--variables", o.variables, "1-based variable indices (default all)")->delimiter(',');
    app.add_flag("--permute", o.permute, "permuted-label control probes");
    app.add_option("--max-train", o.max_train);
    app.add_option("--max-test", o.max_test);

    app.add_option("--pairs", o.pairs, "number of intervention pairs");
    app.add_option("--band-stride", o.band_stride);
    app.add_flag("--no-embed-band", o.no_embed_band, "give the embedding layer its own band");
    app.add_option("--targets", o.targets, "eq:K or answer")->delimiter(',');
    app.add_option("--pairs-file", o.pairs_file, "receiver/source Input lines instead of sampled pairs");

    app.add_option("--published", o.published, "published timeline to compare against");
    app.add_option("--host", o.host);
    app.add_option("--port", o.port);

    std::map<std::string, int (*)(const Options&)> commands = {
        {"gen", cmd_gen},         {"train", cmd_train}, {"eval", cmd_eval},     {"probe", cmd_probe},
        {"metrics", cmd_metrics}, {"patch", cmd_patch}, {"report", cmd_report}, {"serve", cmd_serve},
    };
    const std::map<std::string, std::string> help = {
        {"gen", "generate the train/test split"},
        {"train", "train the reference transformer"},
        {"eval", "exact-match accuracy on the test split"},
        {"probe", "probe sweep over (t, layer, variable)"},
        {"metrics", "resolution timelines for each tau"},
        {"patch", "grid activation patching"},
        {"report", "SVG figures and comparison note"},
        {"serve", "serve the trained model over HTTP"},
    };
    for (const auto& [name, fn] : commands) app.add_subcommand(name, help.at(name))->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    try {
        for (const auto& [name, fn] : commands) {
            if (app.got_subcommand(name)) return fn(o);
        }
        return 1;
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
}
