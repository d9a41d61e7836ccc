#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cotprobe/errors.hpp"

namespace cotprobe {

// Variables are single letters. Generated data uses lowercase only; uppercase
// is accepted so that hand-written examples ("A=1+B") parse as well.
using Var = char;

enum class Op : char { Add = '+', Sub = '-' };

inline int apply(int lhs, Op op, int rhs) { return op == Op::Add ? lhs + rhs : lhs - rhs; }

struct Literal {
    int digit = 0;
    bool operator==(const Literal&) const = default;
};

// d op d
struct BinLit {
    int lhs = 0;
    Op op = Op::Add;
    int rhs = 0;
    bool operator==(const BinLit&) const = default;
};

// d op v
struct BinVar {
    int lhs = 0;
    Op op = Op::Add;
    Var var = 'a';
    bool operator==(const BinVar&) const = default;
};

using Rhs = std::variant<Literal, BinLit, BinVar>;

struct Equation {
    Var lhs = 'a';
    Rhs rhs;
    int eq_pos = 0;

    bool operator==(const Equation&) const = default;
    std::optional<Var> dependency() const;
    bool has_operator() const { return !std::holds_alternative<Literal>(rhs); }
};

struct Instance {
    std::vector<Equation> equations;  // eq_pos -(n+1) .. -2
    Var query = 'a';                  // eq_pos -1
    int level = 0;                    // 1..5 when the layout matches a level template, else 0
    std::vector<Var> var_order;       // first appearance, left to right

    bool operator==(const Instance&) const = default;
    const Equation* definition(Var v) const;
};

struct CotChain {
    std::vector<Equation> steps;  // eq_pos 0, 1, 2, ...
    int answer = 0;
    Var answer_var = 'a';

    bool operator==(const CotChain&) const = default;
};

struct ResolutionTrace {
    std::map<Var, int> values;
    std::map<Var, int> lower_bound_eq;  // t-dagger in equation positions
    std::vector<Var> resolution_order;
};

struct ComplexityProfile {
    int steps = 0;
    int stack = 0;
    int distractors = 0;
    bool operator==(const ComplexityProfile&) const = default;
};

constexpr int kMinLevel = 1;
constexpr int kMaxLevel = 5;

// Parsing. Whitespace between symbols is ignored.
Instance parse_instance(std::string_view text);
CotChain parse_chain(std::string_view text);
Equation parse_equation(std::string_view text, int eq_pos);

// Canonical rendering: no spaces, ',' between equations, ';' before the query.
std::string render(const Equation& eq);
std::string render(const Instance& inst);
std::string render(const CotChain& chain);
std::string render_input_equations(const Instance& inst);  // without the query

// Evaluates every equation by fixpoint substitution. Values may fall outside
// 0..9; callers decide whether that is an error.
std::map<Var, int> substitute_values(const Instance& inst);

// Variables whose definitions evaluate to different values.
std::vector<Var> conflicting_assignments(const Instance& inst);

ResolutionTrace resolve_greedy(const Instance& inst);
CotChain build_gold_chain(const Instance& inst);
ComplexityProfile complexity(const Instance& inst);

// Number of operations needed to obtain v's value (its own equation plus the
// equations it transitively depends on).
int variable_steps(const Instance& inst, Var v);

// Variables on the query's dependency path, query first.
std::vector<Var> dependency_path(const Instance& inst);

// Matches the instance layout against the five level templates; 0 if none.
int detect_level(const Instance& inst);

// Literal arithmetic expressions "d op d" found in the instance's equations.
std::vector<std::string> literal_expressions(const Instance& inst);

}  // namespace cotprobe
