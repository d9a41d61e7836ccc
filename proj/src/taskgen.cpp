#include "cotprobe/taskgen.hpp"

#include <algorithm>
#include <array>
#include <optional>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "cotprobe/hashing.hpp"
#include "json.hpp"

namespace cotprobe {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kDatasetSchema = "cotprobe-dataset/1";

bool values_in_range(const Instance& inst) {
    for (const auto& [v, value] : substitute_values(inst)) {
        if (value < 0 || value > 9) return false;
    }
    return true;
}

std::vector<Op> parse_ops(std::string_view operators) {
    std::vector<Op> ops;
    for (const char c : operators) {
        if (c != '+' && c != '-') {
            throw ConfigError(std::string("unsupported operator '") + c + "'");
        }
        if (std::find(ops.begin(), ops.end(), static_cast<Op>(c)) == ops.end()) {
            ops.push_back(static_cast<Op>(c));
        }
    }
    if (ops.empty()) throw ConfigError("operator set is empty");
    return ops;
}

std::uint64_t permutations(int n, int k) {
    std::uint64_t out = 1;
    for (int i = 0; i < k; ++i) out *= static_cast<std::uint64_t>(n - i);
    return out;
}

// Partition of all single-digit literal expressions into train and test keys,
// stratified by result value so both sides see every value equally often.
struct ExpressionPartition {
    std::set<std::string> test_keys;
    bool symmetric = false;

    bool is_test(const std::string& expr) const {
        return test_keys.contains(expression_key(expr, symmetric));
    }
};

ExpressionPartition partition_expressions(const GenConfig& config) {
    ExpressionPartition part;
    part.symmetric = config.symmetric_leak;
    const std::vector<Op> ops = parse_ops(config.operators);
    std::map<int, std::vector<std::string>> by_value;
    std::set<std::string> seen;
    for (const Op op : ops) {
        for (int a = 0; a <= 9; ++a) {
            for (int b = 0; b <= 9; ++b) {
                const int v = apply(a, op, b);
                if (v < 0 || v > 9) continue;
                const std::string key = expression_key(
                    std::string{static_cast<char>('0' + a), static_cast<char>(op),
                                static_cast<char>('0' + b)},
                    config.symmetric_leak);
                if (seen.insert(key).second) by_value[v].push_back(key);
            }
        }
    }
    const double frac =
        static_cast<double>(config.n_test) / static_cast<double>(config.n_train + config.n_test);
    Rng rng(mix_seed(config.seed, 0x5eed));
    for (auto& [value, keys] : by_value) {
        rng.shuffle(std::span(keys));
        const auto n_test = static_cast<std::size_t>(std::lround(frac * static_cast<double>(keys.size())));
        for (std::size_t i = 0; i < n_test && i < keys.size(); ++i) part.test_keys.insert(keys[i]);
    }
    return part;
}

ordered_json record_json(const Record& rec) {
    ordered_json j;
    j["level"] = rec.instance.level;
    j["input"] = render(rec.instance);
    j["chain"] = render(rec.chain);
    j["answer"] = rec.chain.answer;
    ordered_json bounds = ordered_json::object();
    for (const auto& [v, pos] : resolve_greedy(rec.instance).lower_bound_eq) {
        bounds[std::string(1, v)] = pos;
    }
    j["t_eq_bounds"] = bounds;
    const ComplexityProfile c = complexity(rec.instance);
    j["complexity"] = {c.steps, c.stack, c.distractors};
    return j;
}

ordered_json config_json(const GenConfig& c) {
    ordered_json j;
    j["level"] = c.level;
    j["n_train"] = c.n_train;
    j["n_test"] = c.n_test;
    j["seed"] = c.seed;
    j["operators"] = c.operators;
    j["symmetric_leak"] = c.symmetric_leak;
    return j;
}

std::vector<Record> read_jsonl(const std::filesystem::path& path, ordered_json& header) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("cannot open dataset file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("empty dataset file " + path.string());
    header = ordered_json::parse(line);
    if (header.value("schema", "") != kDatasetSchema) {
        throw SchemaError("unsupported dataset schema in " + path.string());
    }
    std::vector<Record> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const ordered_json j = ordered_json::parse(line);
        Record rec{parse_instance(j.at("input").get<std::string>()),
                   parse_chain(j.at("chain").get<std::string>())};
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace

void GenConfig::validate() const {
    if (level < kMinLevel || level > kMaxLevel) throw ConfigError("level must be in 1..5");
    if (n_train <= 0 || n_test <= 0) throw ConfigError("n_train and n_test must be positive");
    parse_ops(operators);
}

std::string GenConfig::canonical() const {
    std::ostringstream out;
    out << "level=" << level << ";n_train=" << n_train << ";n_test=" << n_test << ";seed=" << seed
        << ";operators=" << operators << ";symmetric_leak=" << (symmetric_leak ? 1 : 0);
    return out.str();
}

std::string GenConfig::fingerprint() const { return cotprobe::fingerprint(canonical()); }

int template_variables(int level) { return level >= 4 ? 3 : 2; }

int template_digit_slots(int level) {
    static constexpr int slots[] = {0, 2, 3, 3, 5, 4};
    return slots[level];
}

int template_op_slots(int level) {
    static constexpr int slots[] = {0, 1, 2, 2, 3, 3};
    return slots[level];
}

Instance instantiate_template(int level, std::span<const Var> n, std::span<const int> d,
                              std::span<const Op> o) {
    if (level < kMinLevel || level > kMaxLevel) throw ConfigError("level must be in 1..5");
    Instance inst;
    auto eq = [](Var lhs, Rhs rhs) { return Equation{lhs, rhs, 0}; };
    switch (level) {
        case 1:
            inst.equations = {eq(n[0], BinVar{d[0], o[0], n[1]}), eq(n[1], Literal{d[1]})};
            inst.query = n[0];
            break;
        case 2:
            inst.equations = {eq(n[0], BinLit{d[0], o[0], d[1]}), eq(n[1], BinVar{d[2], o[1], n[0]})};
            inst.query = n[1];
            break;
        case 3:
            inst.equations = {eq(n[0], BinVar{d[0], o[0], n[1]}), eq(n[1], BinLit{d[1], o[1], d[2]})};
            inst.query = n[0];
            break;
        case 4:
            inst.equations = {eq(n[0], BinVar{d[0], o[0], n[1]}), eq(n[1], BinLit{d[1], o[1], d[2]}),
                              eq(n[2], BinLit{d[3], o[2], d[4]})};
            inst.query = n[0];
            break;
        case 5:
            inst.equations = {eq(n[0], BinVar{d[0], o[0], n[1]}), eq(n[1], BinVar{d[1], o[1], n[2]}),
                              eq(n[2], BinLit{d[2], o[2], d[3]})};
            inst.query = n[0];
            break;
    }
    const int count = static_cast<int>(inst.equations.size());
    for (int i = 0; i < count; ++i) inst.equations[i].eq_pos = -(count + 1) + i;
    inst.var_order.assign(n.begin(), n.begin() + template_variables(level));
    inst.level = level;
    return inst;
}

namespace {

// P(a | b) for "a = d op b": Sinkhorn scaling of the feasibility counts so
// that a uniform b yields a uniform a. Every feasible cell keeps positive mass.
using Transition = std::array<std::array<double, 10>, 10>;

Transition balanced_transition(const std::vector<Op>& ops) {
    Transition m{};
    for (int a = 0; a <= 9; ++a) {
        for (int b = 0; b <= 9; ++b) {
            for (const Op op : ops) {
                const int d = op == Op::Add ? a - b : a + b;
                if (d >= 0 && d <= 9) m[a][b] += 1.0;
            }
        }
    }
    for (int iter = 0; iter < 2000; ++iter) {
        for (int b = 0; b <= 9; ++b) {
            double col = 0.0;
            for (int a = 0; a <= 9; ++a) col += m[a][b];
            for (int a = 0; a <= 9; ++a) m[a][b] /= col;
        }
        for (int a = 0; a <= 9; ++a) {
            double row = 0.0;
            for (int b = 0; b <= 9; ++b) row += m[a][b];
            for (int b = 0; b <= 9; ++b) m[a][b] /= row;
        }
    }
    return m;
}

int sample_weighted(Rng& rng, const double* w, int n) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += w[i];
    double u = rng.uniform() * total;
    for (int i = 0; i < n; ++i) {
        if (u < w[i]) return i;
        u -= w[i];
    }
    return n - 1;
}

class ValueSampler {
public:
    ValueSampler(const std::vector<Op>& ops, Rng& rng) : ops_(ops), rng_(rng) {
        static const Transition both = balanced_transition({Op::Add, Op::Sub});
        m_ = ops.size() == 2 ? both : balanced_transition(ops);
    }

    int uniform_value() { return rng_.uniform_int(0, 9); }

    int dependent_value(int b) {
        double col[10];
        for (int a = 0; a <= 9; ++a) col[a] = m_[a][b];
        return sample_weighted(rng_, col, 10);
    }

    // "d op b" evaluating to a; op uniform over the feasible ones.
    void dependent_expr(int a, int b, std::vector<int>& digits, std::vector<Op>& ops) {
        std::vector<Op> feasible;
        for (const Op op : ops_) {
            const int d = op == Op::Add ? a - b : a + b;
            if (d >= 0 && d <= 9) feasible.push_back(op);
        }
        const Op op = feasible[rng_.below(feasible.size())];
        digits.push_back(op == Op::Add ? a - b : a + b);
        ops.push_back(op);
    }

    // "d op d" evaluating to v, uniform over all such expressions.
    void literal_expr(int v, std::vector<int>& digits, std::vector<Op>& ops) {
        std::vector<std::pair<int, Op>> options;
        for (const Op op : ops_) {
            for (int d = 0; d <= 9; ++d) {
                const int e = op == Op::Add ? v - d : d - v;
                if (e >= 0 && e <= 9) options.emplace_back(d, op);
            }
        }
        const auto [d, op] = options[rng_.below(options.size())];
        digits.push_back(d);
        digits.push_back(op == Op::Add ? v - d : d - v);
        ops.push_back(op);
    }

private:
    std::vector<Op> ops_;
    Rng& rng_;
    Transition m_;
};

}  // namespace

Instance generate_instance(int level, Rng& rng, std::string_view operators,
                           std::span<const int> forced_digits,
                           const std::function<bool(const Instance&)>& accept) {
    if (level < kMinLevel || level > kMaxLevel) throw ConfigError("level must be in 1..5");
    const std::vector<Op> ops = parse_ops(operators);
    const int k = template_variables(level);
    const int nd = template_digit_slots(level);
    const int no = template_op_slots(level);
    if (!forced_digits.empty() && static_cast<int>(forced_digits.size()) != nd) {
        throw ConfigError("forced digits do not match the level's digit slots");
    }
    // With a single operator the balanced transition degenerates (for "+" it
    // collapses onto a = b), so those sets sample slots uniformly instead.
    const bool balanced = forced_digits.empty() && ops.size() == 2;
    std::optional<ValueSampler> values;
    if (balanced) values.emplace(ops, rng);

    std::vector<Var> letters(26);
    std::vector<int> digits;
    std::vector<Op> chosen;
    constexpr int kMaxAttempts = 100000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        for (int i = 0; i < 26; ++i) letters[i] = static_cast<Var>('a' + i);
        // Partial Fisher-Yates: first k letters, sampled without replacement.
        for (int i = 0; i < k; ++i) {
            const int j = i + static_cast<int>(rng.below(26 - i));
            std::swap(letters[i], letters[j]);
        }
        digits.clear();
        chosen.clear();
        if (balanced) {
            ValueSampler& vs = *values;
            switch (level) {
                case 1: {
                    const int b = vs.uniform_value();
                    vs.dependent_expr(vs.dependent_value(b), b, digits, chosen);
                    digits.push_back(b);
                    break;
                }
                case 2: {
                    const int a = vs.uniform_value();
                    vs.literal_expr(a, digits, chosen);
                    vs.dependent_expr(vs.dependent_value(a), a, digits, chosen);
                    break;
                }
                case 3:
                case 4: {
                    const int b = vs.uniform_value();
                    vs.dependent_expr(vs.dependent_value(b), b, digits, chosen);
                    vs.literal_expr(b, digits, chosen);
                    if (level == 4) vs.literal_expr(vs.uniform_value(), digits, chosen);
                    break;
                }
                case 5: {
                    const int c = vs.uniform_value();
                    const int b = vs.dependent_value(c);
                    vs.dependent_expr(vs.dependent_value(b), b, digits, chosen);
                    vs.dependent_expr(b, c, digits, chosen);
                    vs.literal_expr(c, digits, chosen);
                    break;
                }
            }
        } else {
            for (int i = 0; i < nd; ++i) {
                digits.push_back(forced_digits.empty() ? rng.uniform_int(0, 9) : forced_digits[i]);
            }
            for (int i = 0; i < no; ++i) chosen.push_back(ops[rng.below(ops.size())]);
        }
        Instance inst = instantiate_template(level, letters, digits, chosen);
        if (!values_in_range(inst)) continue;
        if (accept && !accept(inst)) continue;
        return inst;
    }
    throw ExhaustedSampleSpace("no instance satisfies the constraints at level " +
                               std::to_string(level));
}

std::string expression_key(std::string_view expr, bool symmetric) {
    std::string key(expr);
    if (symmetric && key.size() == 3 && key[1] == '+' && key[0] > key[2]) {
        std::swap(key[0], key[2]);
    }
    return key;
}

std::uint64_t count_instances(int level, std::string_view operators,
                              const std::function<bool(const std::string&)>& accept_expression) {
    const std::vector<Op> ops = parse_ops(operators);
    const int nd = template_digit_slots(level);
    const int no = template_op_slots(level);
    const std::vector<Var> names = {'a', 'b', 'c'};
    std::vector<int> digits(nd, 0);
    std::vector<int> op_index(no, 0);
    std::vector<Op> chosen(no);
    std::uint64_t shapes = 0;
    std::uint64_t total = 1;
    for (int i = 0; i < nd; ++i) total *= 10;
    for (int i = 0; i < no; ++i) total *= ops.size();
    for (std::uint64_t code = 0; code < total; ++code) {
        std::uint64_t c = code;
        for (int i = 0; i < nd; ++i) {
            digits[i] = static_cast<int>(c % 10);
            c /= 10;
        }
        for (int i = 0; i < no; ++i) {
            chosen[i] = ops[c % ops.size()];
            c /= ops.size();
        }
        const Instance inst = instantiate_template(level, names, digits, chosen);
        if (!values_in_range(inst)) continue;
        if (accept_expression) {
            const auto exprs = literal_expressions(inst);
            if (!std::all_of(exprs.begin(), exprs.end(), accept_expression)) continue;
        }
        ++shapes;
    }
    return shapes * permutations(26, template_variables(level));
}

DatasetSplit generate_split(const GenConfig& config) {
    config.validate();
    const ExpressionPartition part = partition_expressions(config);
    auto train_expr = [&](const std::string& e) { return !part.is_test(e); };
    auto test_expr = [&](const std::string& e) { return part.is_test(e); };
    auto either_expr = [&](const std::string& e) { return train_expr(e) || test_expr(e); };

    // Level 1 has no literal expressions, so both partitions draw from one pool.
    const std::uint64_t cap_train = count_instances(config.level, config.operators, train_expr);
    const std::uint64_t cap_test = count_instances(config.level, config.operators, test_expr);
    const std::uint64_t cap_union = count_instances(config.level, config.operators, either_expr);
    const auto n_train = static_cast<std::uint64_t>(config.n_train);
    const auto n_test = static_cast<std::uint64_t>(config.n_test);
    if (n_train > cap_train || n_test > cap_test || n_train + n_test > cap_union) {
        throw ExhaustedSampleSpace("level " + std::to_string(config.level) + " admits only " +
                                   std::to_string(cap_train) + " train / " +
                                   std::to_string(cap_test) + " test instances");
    }

    DatasetSplit split;
    split.config = config;
    split.fingerprint = config.fingerprint();
    Rng rng(config.seed);
    std::unordered_set<std::string> seen;

    auto fill = [&](std::vector<Record>& out, int wanted, bool test) {
        auto accept = [&](const Instance& inst) {
            const auto exprs = literal_expressions(inst);
            return std::all_of(exprs.begin(), exprs.end(), [&](const std::string& e) {
                return test ? test_expr(e) : train_expr(e);
            });
        };
        const std::uint64_t budget = 200ULL * static_cast<std::uint64_t>(wanted) + 100000ULL;
        std::uint64_t attempts = 0;
        while (static_cast<int>(out.size()) < wanted) {
            if (++attempts > budget) {
                throw ExhaustedSampleSpace("could not find enough unique instances at level " +
                                           std::to_string(config.level));
            }
            Instance inst = generate_instance(config.level, rng, config.operators, {}, accept);
            if (!seen.insert(render(inst)).second) continue;
            CotChain chain = build_gold_chain(inst);
            out.push_back(Record{std::move(inst), std::move(chain)});
        }
    };
    if (config.level == 1) {
        // No literal expressions: one shared pool, drawn jointly and then dealt
        // out, so the test partition is not left with the depleted cells.
        std::vector<Record> pool;
        fill(pool, config.n_train + config.n_test, false);
        rng.shuffle(std::span(pool));
        split.train.assign(pool.begin(), pool.begin() + config.n_train);
        split.test.assign(pool.begin() + config.n_train, pool.end());
    } else {
        fill(split.train, config.n_train, false);
        fill(split.test, config.n_test, true);
    }
    const std::size_t n_ex = std::min<std::size_t>(3, split.train.size());
    split.exemplars.assign(split.train.begin(), split.train.begin() + static_cast<long>(n_ex));
    return split;
}

std::string_view to_string(FindingKind kind) {
    switch (kind) {
        case FindingKind::DuplicateInstance: return "duplicate-instance";
        case FindingKind::ExpressionLeak: return "expression-leak";
        case FindingKind::ValueOutOfRange: return "value-out-of-range";
        case FindingKind::InconsistentAssignment: return "inconsistent-assignment";
        case FindingKind::ChainMismatch: return "chain-mismatch";
    }
    return "unknown";
}

std::size_t VerificationReport::count(FindingKind kind) const {
    return static_cast<std::size_t>(std::count_if(
        findings.begin(), findings.end(), [&](const Finding& f) { return f.kind == kind; }));
}

VerificationReport verify_split(const DatasetSplit& split) {
    VerificationReport report;
    const bool symmetric = split.config.symmetric_leak;
    std::set<std::string> seen;
    std::set<std::string> train_exprs;
    std::set<std::string> test_exprs;

    auto check = [&](const Record& rec, std::set<std::string>& exprs) {
        const std::string text = render(rec.instance);
        if (!seen.insert(text).second) {
            report.findings.push_back({FindingKind::DuplicateInstance, text});
        }
        for (const auto& e : literal_expressions(rec.instance)) exprs.insert(expression_key(e, symmetric));

        bool sound = true;
        for (const auto& [v, value] : substitute_values(rec.instance)) {
            if (value < 0 || value > 9) {
                report.findings.push_back({FindingKind::ValueOutOfRange,
                                           text + ": " + v + "=" + std::to_string(value)});
                sound = false;
            }
        }
        for (const Var v : conflicting_assignments(rec.instance)) {
            report.findings.push_back({FindingKind::InconsistentAssignment, text + ": " + v});
            sound = false;
        }
        if (!sound) return;
        try {
            if (!(build_gold_chain(rec.instance) == rec.chain)) {
                report.findings.push_back({FindingKind::ChainMismatch, text});
            }
        } catch (const Error& e) {
            report.findings.push_back({FindingKind::ChainMismatch, text + ": " + e.what()});
        }
    };
    for (const Record& rec : split.train) check(rec, train_exprs);
    for (const Record& rec : split.test) check(rec, test_exprs);
    for (const auto& e : train_exprs) {
        if (test_exprs.contains(e)) report.findings.push_back({FindingKind::ExpressionLeak, e});
    }
    return report;
}

std::string to_jsonl(const DatasetSplit& split, bool test_partition) {
    ordered_json header;
    header["schema"] = kDatasetSchema;
    header["partition"] = test_partition ? "test" : "train";
    header["config"] = config_json(split.config);
    header["fingerprint"] = split.fingerprint;
    ordered_json exemplars = ordered_json::array();
    for (const Record& rec : split.exemplars) {
        exemplars.push_back({{"input", render(rec.instance)}, {"chain", render(rec.chain)}});
    }
    header["exemplars"] = exemplars;

    std::string out = header.dump() + "\n";
    for (const Record& rec : test_partition ? split.test : split.train) {
        out += record_json(rec).dump() + "\n";
    }
    return out;
}

void write_split(const DatasetSplit& split, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const bool test : {false, true}) {
        std::ofstream out(dir / (test ? "test.jsonl" : "train.jsonl"), std::ios::binary);
        out << to_jsonl(split, test);
        if (!out) throw Error("failed to write dataset under " + dir.string());
    }
}

DatasetSplit read_split(const std::filesystem::path& dir) {
    DatasetSplit split;
    ordered_json train_header;
    ordered_json test_header;
    split.train = read_jsonl(dir / "train.jsonl", train_header);
    split.test = read_jsonl(dir / "test.jsonl", test_header);
    const ordered_json& c = train_header.at("config");
    split.config.level = c.at("level").get<int>();
    split.config.n_train = c.at("n_train").get<int>();
    split.config.n_test = c.at("n_test").get<int>();
    split.config.seed = c.at("seed").get<std::uint64_t>();
    split.config.operators = c.at("operators").get<std::string>();
    split.config.symmetric_leak = c.at("symmetric_leak").get<bool>();
    split.fingerprint = train_header.at("fingerprint").get<std::string>();
    for (const auto& ex : train_header.at("exemplars")) {
        split.exemplars.push_back(Record{parse_instance(ex.at("input").get<std::string>()),
                                         parse_chain(ex.at("chain").get<std::string>())});
    }
    return split;
}

}  // namespace cotprobe
