#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>

#include "cotprobe/eqdsl.hpp"
#include "cotprobe/rng.hpp"
#include "cotprobe/taskgen.hpp"

using namespace cotprobe;

namespace {

// Table 1 of the task description: input, output, (#Step, #Stack, #Dist).
struct TableRow {
    int level;
    const char* input;
    const char* output;
    ComplexityProfile profile;
};

const TableRow kTable[] = {
    {1, "A=1+B,B=2;A=?", "A=1+B,B=2,A=1+B,A=1+2,A=3", {1, 1, 0}},
    {2, "A=2+3,B=1+A;B=?", "B=1+A,A=2+3,A=5,B=1+A,B=1+5,B=6", {2, 0, 0}},
    {3, "A=1+B,B=2+3;A=?", "A=1+B,B=2+3,B=5,A=1+B,A=1+5,A=6", {2, 1, 0}},
    {4, "A=1+B,B=2+3,C=4+5;A=?", "A=1+B,B=2+3,B=5,A=1+B,A=1+5,A=6", {2, 1, 1}},
    {5, "A=1+B,B=2+C,C=1+2;A=?", "A=1+B,B=2+C,C=1+2,C=3,B=2+C,B=2+3,B=5,A=1+B,A=1+5,A=6", {3, 2, 0}},
};

// Brute force: try every digit assignment and keep the one satisfying all
// equations. Independent of the greedy resolver's propagation order.
std::map<Var, int> brute_force_values(const Instance& inst) {
    std::vector<Var> vars;
    for (const Equation& eq : inst.equations) {
        if (std::find(vars.begin(), vars.end(), eq.lhs) == vars.end()) vars.push_back(eq.lhs);
    }
    int combos = 1;
    for (std::size_t i = 0; i < vars.size(); ++i) combos *= 10;
    std::map<Var, int> found;
    int solutions = 0;
    for (int code = 0; code < combos; ++code) {
        std::map<Var, int> assign;
        int c = code;
        for (const Var v : vars) {
            assign[v] = c % 10;
            c /= 10;
        }
        bool ok = true;
        for (const Equation& eq : inst.equations) {
            int rhs = 0;
            if (const auto* l = std::get_if<Literal>(&eq.rhs)) rhs = l->digit;
            else if (const auto* b = std::get_if<BinLit>(&eq.rhs)) rhs = b->op == Op::Add ? b->lhs + b->rhs : b->lhs - b->rhs;
            else {
                const auto& bv = std::get<BinVar>(eq.rhs);
                rhs = bv.op == Op::Add ? bv.lhs + assign[bv.var] : bv.lhs - assign[bv.var];
            }
            if (rhs != assign[eq.lhs]) {
                ok = false;
                break;
            }
        }
        if (ok) {
            found = assign;
            ++solutions;
        }
    }
    REQUIRE(solutions == 1);
    return found;
}

// Random acyclic instance with shuffled equation order and distractors.
std::optional<Instance> random_general_instance(Rng& rng) {
    const int k = rng.uniform_int(1, 4);
    std::vector<Var> names;
    while (static_cast<int>(names.size()) < k) {
        const Var v = static_cast<Var>('a' + rng.below(26));
        if (std::find(names.begin(), names.end(), v) == names.end()) names.push_back(v);
    }
    std::vector<std::string> eqs;
    for (int i = 0; i < k; ++i) {
        std::string e{names[i], '='};
        const int kind = (i + 1 < k) ? rng.uniform_int(0, 2) : rng.uniform_int(0, 1);
        e.push_back(static_cast<char>('0' + rng.below(10)));
        if (kind >= 1) {
            e.push_back(rng.below(2) ? '+' : '-');
            if (kind == 2) e.push_back(names[rng.uniform_int(i + 1, k - 1)]);
            else e.push_back(static_cast<char>('0' + rng.below(10)));
        }
        eqs.push_back(e);
    }
    rng.shuffle(std::span(eqs));
    std::string text;
    for (std::size_t i = 0; i < eqs.size(); ++i) text += (i ? "," : "") + eqs[i];
    text += std::string(";") + names[0] + "=?";
    try {
        return parse_instance(text);
    } catch (const ValueOutOfRange&) {
        return std::nullopt;
    }
}

}  // namespace

TEST_CASE("parse_instance assigns equation positions backward from the query") {
    const Instance inst = parse_instance("A=1+B,B=2;A=?");
    REQUIRE(inst.equations.size() == 2);
    CHECK(inst.equations[0].eq_pos == -3);
    CHECK(inst.equations[1].eq_pos == -2);
    CHECK(inst.query == 'A');
    CHECK(inst.level == 1);
    CHECK(inst.var_order == std::vector<Var>{'A', 'B'});
}

TEST_CASE("parse_instance tolerates whitespace and reports errors") {
    CHECK(render(parse_instance(" a = 1 + b , b = 2 ; a = ? ")) == "a=1+b,b=2;a=?");

    const Instance single = parse_instance("A=3;A=?");
    CHECK(single.equations.size() == 1);
    CHECK(complexity(single) == ComplexityProfile{0, 0, 0});
    CHECK(single.level == 0);

    CHECK_THROWS_AS(parse_instance("A=1+B,B=2+C;A=?"), UnknownVariableReference);
    CHECK_THROWS_AS(parse_instance("A=1+B,B=2;C=?"), UnknownVariableReference);
    CHECK_THROWS_AS(parse_instance("A=1,A=2;A=?"), DuplicateAssignmentConflict);
    CHECK_THROWS_AS(parse_instance("A=9+3;A=?"), ValueOutOfRange);
    CHECK_THROWS_AS(parse_instance("A=2-5;A=?"), ValueOutOfRange);
    CHECK_THROWS_AS(parse_instance("A=1*2;A=?"), MalformedEquation);
    CHECK_THROWS_AS(parse_instance("A=12;A=?"), MalformedEquation);
    CHECK_THROWS_AS(parse_instance("A=1,B=2"), MalformedEquation);
    CHECK_THROWS_AS(parse_instance(";A=?"), MalformedEquation);
    CHECK_THROWS_AS(parse_instance("A=1;A=2"), MalformedEquation);
    // A consistent restatement is not a conflict.
    CHECK_NOTHROW(parse_instance("A=3,A=1+2;A=?"));
}

TEST_CASE("UnknownVariableReference agrees with a scan of rhs variables") {
    Rng rng(11);
    for (int i = 0; i < 500; ++i) {
        // Random text with rhs variables drawn from a slightly larger alphabet.
        std::string text;
        std::set<char> lhs;
        std::set<char> rhs_vars;
        const int n = rng.uniform_int(1, 3);
        for (int j = 0; j < n; ++j) {
            const char v = static_cast<char>('a' + j);
            const char r = static_cast<char>('a' + rng.uniform_int(0, 4));
            lhs.insert(v);
            rhs_vars.insert(r);
            text += std::string(j ? "," : "") + v + "=0+" + r;
        }
        text += ";a=?";
        const bool dangling = std::any_of(rhs_vars.begin(), rhs_vars.end(),
                                          [&](char r) { return !lhs.contains(r); });
        if (dangling) {
            CHECK_THROWS_AS(parse_instance(text), UnknownVariableReference);
        } else {
            CHECK_NOTHROW(parse_instance(text));
        }
    }
}

TEST_CASE("resolve_greedy reproduces the published lower bounds") {
    const ResolutionTrace l3 = resolve_greedy(parse_instance("A=1+B,B=2+3;A=?"));
    CHECK(l3.values == std::map<Var, int>{{'A', 6}, {'B', 5}});
    CHECK(l3.lower_bound_eq == std::map<Var, int>{{'A', -2}, {'B', -2}});

    const ResolutionTrace l2 = resolve_greedy(parse_instance("A=2+3,B=1+A;B=?"));
    CHECK(l2.lower_bound_eq == std::map<Var, int>{{'A', -3}, {'B', -2}});

    const ResolutionTrace l4 = resolve_greedy(parse_instance("A=1+B,B=2+3,C=4+5;A=?"));
    CHECK(l4.lower_bound_eq == std::map<Var, int>{{'A', -3}, {'B', -3}, {'C', -2}});
    CHECK(l4.resolution_order == std::vector<Var>{'B', 'A', 'C'});

    CHECK_THROWS_AS(resolve_greedy(parse_instance("a=1+b,b=1-a;a=?")), UnresolvableQuery);
}

TEST_CASE("gold chains match the published output column") {
    for (const TableRow& row : kTable) {
        CAPTURE(row.level);
        const Instance inst = parse_instance(row.input);
        CHECK(inst.level == row.level);
        const CotChain chain = build_gold_chain(inst);
        CHECK(render(chain) == row.output);
        CHECK(parse_chain(row.output) == chain);
        CHECK(complexity(inst) == row.profile);
    }
    CHECK(build_gold_chain(parse_instance("A=1+B,B=2+C,C=1+2;A=?")).steps.size() == 10);
}

TEST_CASE("gold chain edge cases") {
    const CotChain sub = build_gold_chain(parse_instance("A=5-2;A=?"));
    CHECK(render(sub) == "A=5-2,A=3");
    CHECK(sub.answer == resolve_greedy(parse_instance("A=5-2;A=?")).values.at('A'));

    CHECK(render(build_gold_chain(parse_instance("A=3;A=?"))) == "A=3");
    CHECK_THROWS_AS(build_gold_chain(parse_instance("A=3,A=1+2;A=?")), TemplateMismatch);
    CHECK_THROWS_AS(build_gold_chain(parse_instance("a=1+b,b=1-a;a=?")), TemplateMismatch);
}

TEST_CASE("render of a subtraction instance") {
    const Instance inst = parse_instance("a=5-b,b=3;a=?");
    CHECK(render(inst) == "a=5-b,b=3;a=?");
    CHECK(render(build_gold_chain(inst)) == "a=5-b,b=3,a=5-b,a=5-3,a=2");
}

TEST_CASE("greedy resolver agrees with brute force on random instances") {
    Rng rng(2024);
    int checked = 0;
    for (int i = 0; i < 6000; ++i) {
        const int level = 1 + i % 5;
        const Instance inst = generate_instance(level, rng);
        CHECK(resolve_greedy(inst).values == brute_force_values(inst));
        ++checked;
    }
    while (checked < 12000) {
        const auto inst = random_general_instance(rng);
        if (!inst) continue;
        const auto trace = resolve_greedy(*inst);
        const auto brute = brute_force_values(*inst);
        CHECK(trace.values == brute);
        for (const auto& [v, pos] : trace.lower_bound_eq) {
            CHECK(pos <= -2);
            CHECK(pos >= -static_cast<int>(inst->equations.size()) - 1);
        }
        ++checked;
    }
}

TEST_CASE("round trip and chain properties over generated instances") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
        const int level = 1 + i % 5;
        const Instance inst = generate_instance(level, rng);
        CHECK(parse_instance(render(inst)) == inst);

        const CotChain chain = build_gold_chain(inst);
        CHECK(parse_chain(render(chain)) == chain);

        const ResolutionTrace trace = resolve_greedy(inst);
        CHECK(chain.answer == trace.values.at(inst.query));
        CHECK(chain.answer_var == inst.query);
        // The lower bound never exceeds the chain step that states the value.
        for (const Equation& step : chain.steps) {
            if (std::holds_alternative<Literal>(step.rhs)) {
                CHECK(trace.lower_bound_eq.at(step.lhs) <= step.eq_pos);
            }
        }
        CHECK(complexity(inst) == complexity(parse_instance(kTable[level - 1].input)));
    }
}

TEST_CASE("per-variable step counts") {
    const Instance l5 = parse_instance(kTable[4].input);
    CHECK(variable_steps(l5, 'A') == 3);
    CHECK(variable_steps(l5, 'B') == 2);
    CHECK(variable_steps(l5, 'C') == 1);
    const Instance l1 = parse_instance(kTable[0].input);
    CHECK(variable_steps(l1, 'B') == 0);
    CHECK(dependency_path(parse_instance(kTable[3].input)) == std::vector<Var>{'A', 'B'});
}
