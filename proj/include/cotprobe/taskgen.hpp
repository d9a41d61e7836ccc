#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cotprobe/eqdsl.hpp"
#include "cotprobe/rng.hpp"

namespace cotprobe {

struct GenConfig {
    int level = 1;
    int n_train = 10000;
    int n_test = 2000;
    std::uint64_t seed = 0;
    std::string operators = "+-";
    // Treat "1+2" and "2+1" as the same expression for leak checks.
    bool symmetric_leak = false;

    void validate() const;
    std::string canonical() const;  // stable key=value serialization
    std::string fingerprint() const;
};

struct Record {
    Instance instance;
    CotChain chain;
};

struct DatasetSplit {
    GenConfig config;
    std::vector<Record> train;
    std::vector<Record> test;
    std::vector<Record> exemplars;  // few-shot demonstrations, drawn from train
    std::string fingerprint;
};

// Number of variables in a level's template.
int template_variables(int level);

// Builds an instance from a level template. digits/ops are in template slot
// order (left to right). Values are not range-checked here.
Instance instantiate_template(int level, std::span<const Var> names, std::span<const int> digits,
                              std::span<const Op> ops);
int template_digit_slots(int level);
int template_op_slots(int level);

// Samples one instance of the level. With both operators, values are drawn
// first (innermost uniform, each dependent value from a balanced transition)
// so every variable's value is close to uniform; any valid instance can still
// occur. forced_digits, when non-empty, pins every digit slot and falls back
// to uniform slot sampling. accept filters candidates (rejection).
Instance generate_instance(int level, Rng& rng, std::string_view operators = "+-",
                           std::span<const int> forced_digits = {},
                           const std::function<bool(const Instance&)>& accept = {});

// Normalized key of a literal expression, e.g. "1+2"; "2+1" maps to "1+2" when
// symmetric is set.
std::string expression_key(std::string_view expr, bool symmetric);

// Exact number of distinct instances of the level whose literal expressions
// all pass accept_expression.
std::uint64_t count_instances(int level, std::string_view operators,
                              const std::function<bool(const std::string&)>& accept_expression = {});

DatasetSplit generate_split(const GenConfig& config);

enum class FindingKind {
    DuplicateInstance,
    ExpressionLeak,
    ValueOutOfRange,
    InconsistentAssignment,
    ChainMismatch,
};

std::string_view to_string(FindingKind kind);

struct Finding {
    FindingKind kind;
    std::string detail;
};

struct VerificationReport {
    std::vector<Finding> findings;
    bool empty() const { return findings.empty(); }
    std::size_t count(FindingKind kind) const;
};

VerificationReport verify_split(const DatasetSplit& split);

// JSONL dataset files: a header line followed by one record per line.
std::string to_jsonl(const DatasetSplit& split, bool test_partition);
void write_split(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit read_split(const std::filesystem::path& dir);

}  // namespace cotprobe
