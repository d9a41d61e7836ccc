#include "cotprobe/eqdsl.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace cotprobe {

namespace {

bool is_var(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::string strip_spaces(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (const char c : text) {
        if (!std::isspace(static_cast<unsigned char>(c))) {
            out.push_back(c);
        }
    }
    return out;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = text.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.push_back(text.substr(start));
            return parts;
        }
        parts.push_back(text.substr(start, pos - start));
        start = pos + 1;
    }
}

[[noreturn]] void malformed(std::string_view what, std::string_view text) {
    throw MalformedEquation(std::string(what) + ": '" + std::string(text) + "'");
}

std::optional<int> evaluate(const Equation& eq, const std::map<Var, int>& known) {
    return std::visit(
        [&](const auto& rhs) -> std::optional<int> {
            using T = std::decay_t<decltype(rhs)>;
            if constexpr (std::is_same_v<T, Literal>) {
                return rhs.digit;
            } else if constexpr (std::is_same_v<T, BinLit>) {
                return apply(rhs.lhs, rhs.op, rhs.rhs);
            } else {
                const auto it = known.find(rhs.var);
                if (it == known.end()) {
                    return std::nullopt;
                }
                return apply(rhs.lhs, rhs.op, it->second);
            }
        },
        eq.rhs);
}

struct Substitution {
    std::map<Var, int> values;
    std::vector<Var> conflicts;
};

Substitution substitute(const Instance& inst) {
    Substitution out;
    bool changed = true;
    while (changed) {
        changed = false;
        for (const Equation& eq : inst.equations) {
            if (out.values.contains(eq.lhs)) {
                continue;
            }
            if (const auto v = evaluate(eq, out.values)) {
                out.values[eq.lhs] = *v;
                changed = true;
            }
        }
    }
    for (const Equation& eq : inst.equations) {
        const auto v = evaluate(eq, out.values);
        if (v && out.values.at(eq.lhs) != *v &&
            std::find(out.conflicts.begin(), out.conflicts.end(), eq.lhs) == out.conflicts.end()) {
            out.conflicts.push_back(eq.lhs);
        }
    }
    return out;
}

enum class Kind { Lit, DD, DV };

Kind kind_of(const Equation& eq) {
    if (std::holds_alternative<Literal>(eq.rhs)) return Kind::Lit;
    if (std::holds_alternative<BinLit>(eq.rhs)) return Kind::DD;
    return Kind::DV;
}

bool depends_on(const Equation& eq, const Equation& target) {
    const auto dep = eq.dependency();
    return dep && *dep == target.lhs;
}

}  // namespace

std::optional<Var> Equation::dependency() const {
    if (const auto* bv = std::get_if<BinVar>(&rhs)) {
        return bv->var;
    }
    return std::nullopt;
}

const Equation* Instance::definition(Var v) const {
    for (const Equation& eq : equations) {
        if (eq.lhs == v) {
            return &eq;
        }
    }
    return nullptr;
}

Equation parse_equation(std::string_view raw, int eq_pos) {
    const std::string text = strip_spaces(raw);
    if (text.size() < 3 || !is_var(text[0]) || text[1] != '=') {
        malformed("expected '<var>=...'", raw);
    }
    Equation eq;
    eq.lhs = text[0];
    eq.eq_pos = eq_pos;
    const std::string_view rhs = std::string_view(text).substr(2);
    if (!is_digit(rhs[0])) {
        malformed("right-hand side must start with a digit", raw);
    }
    const int first = rhs[0] - '0';
    if (rhs.size() == 1) {
        eq.rhs = Literal{first};
        return eq;
    }
    if (rhs.size() != 3 || (rhs[1] != '+' && rhs[1] != '-')) {
        malformed("expected 'd', 'd+d', 'd-d', 'd+v' or 'd-v'", raw);
    }
    const Op op = static_cast<Op>(rhs[1]);
    if (is_digit(rhs[2])) {
        eq.rhs = BinLit{first, op, rhs[2] - '0'};
    } else if (is_var(rhs[2])) {
        eq.rhs = BinVar{first, op, rhs[2]};
    } else {
        malformed("bad operand", raw);
    }
    return eq;
}

Instance parse_instance(std::string_view raw) {
    const std::string text = strip_spaces(raw);
    const auto halves = split(text, ';');
    if (halves.size() != 2) {
        malformed("expected exactly one ';' before the query", raw);
    }
    const std::string_view query = halves[1];
    if (query.size() != 3 || !is_var(query[0]) || query[1] != '=' || query[2] != '?') {
        malformed("query must look like '<var>=?'", raw);
    }
    if (halves[0].empty()) {
        malformed("no equations before the query", raw);
    }

    Instance inst;
    inst.query = query[0];
    const auto parts = split(halves[0], ',');
    const int n = static_cast<int>(parts.size());
    for (int i = 0; i < n; ++i) {
        inst.equations.push_back(parse_equation(parts[i], -(n + 1) + i));
    }

    std::set<Var> defined;
    for (const Equation& eq : inst.equations) {
        defined.insert(eq.lhs);
    }
    for (const Equation& eq : inst.equations) {
        if (const auto dep = eq.dependency(); dep && !defined.contains(*dep)) {
            throw UnknownVariableReference(std::string("variable '") + *dep + "' is never defined");
        }
    }
    if (!defined.contains(inst.query)) {
        throw UnknownVariableReference(std::string("query variable '") + inst.query +
                                       "' is never defined");
    }

    const Substitution sub = substitute(inst);
    if (!sub.conflicts.empty()) {
        throw DuplicateAssignmentConflict(std::string("variable '") + sub.conflicts.front() +
                                          "' is assigned inconsistent values");
    }
    for (const auto& [v, value] : sub.values) {
        if (value < 0 || value > 9) {
            throw ValueOutOfRange(std::string("variable '") + v + "' evaluates to " +
                                  std::to_string(value));
        }
    }

    for (const Equation& eq : inst.equations) {
        for (const auto v : {std::optional<Var>(eq.lhs), eq.dependency()}) {
            if (v && std::find(inst.var_order.begin(), inst.var_order.end(), *v) ==
                         inst.var_order.end()) {
                inst.var_order.push_back(*v);
            }
        }
    }
    inst.level = detect_level(inst);
    return inst;
}

CotChain parse_chain(std::string_view raw) {
    const std::string text = strip_spaces(raw);
    if (text.empty()) {
        malformed("empty chain", raw);
    }
    CotChain chain;
    int pos = 0;
    for (const auto part : split(text, ',')) {
        chain.steps.push_back(parse_equation(part, pos++));
    }
    const Equation& last = chain.steps.back();
    const auto* lit = std::get_if<Literal>(&last.rhs);
    if (lit == nullptr) {
        malformed("chain must end with '<var>=<digit>'", raw);
    }
    chain.answer = lit->digit;
    chain.answer_var = last.lhs;
    return chain;
}

std::string render(const Equation& eq) {
    std::string out{eq.lhs, '='};
    std::visit(
        [&](const auto& rhs) {
            using T = std::decay_t<decltype(rhs)>;
            if constexpr (std::is_same_v<T, Literal>) {
                out.push_back(static_cast<char>('0' + rhs.digit));
            } else if constexpr (std::is_same_v<T, BinLit>) {
                out.push_back(static_cast<char>('0' + rhs.lhs));
                out.push_back(static_cast<char>(rhs.op));
                out.push_back(static_cast<char>('0' + rhs.rhs));
            } else {
                out.push_back(static_cast<char>('0' + rhs.lhs));
                out.push_back(static_cast<char>(rhs.op));
                out.push_back(rhs.var);
            }
        },
        eq.rhs);
    return out;
}

std::string render_input_equations(const Instance& inst) {
    std::string out;
    for (std::size_t i = 0; i < inst.equations.size(); ++i) {
        if (i > 0) out.push_back(',');
        out += render(inst.equations[i]);
    }
    return out;
}

std::string render(const Instance& inst) {
    return render_input_equations(inst) + ";" + inst.query + "=?";
}

std::string render(const CotChain& chain) {
    std::string out;
    for (std::size_t i = 0; i < chain.steps.size(); ++i) {
        if (i > 0) out.push_back(',');
        out += render(chain.steps[i]);
    }
    return out;
}

std::map<Var, int> substitute_values(const Instance& inst) { return substitute(inst).values; }

std::vector<Var> conflicting_assignments(const Instance& inst) { return substitute(inst).conflicts; }

ResolutionTrace resolve_greedy(const Instance& inst) {
    ResolutionTrace trace;
    std::vector<const Equation*> pending;
    auto settle = [&](const Equation& eq, int value, int at) {
        if (trace.values.contains(eq.lhs)) {
            return false;
        }
        trace.values[eq.lhs] = value;
        trace.lower_bound_eq[eq.lhs] = at;
        trace.resolution_order.push_back(eq.lhs);
        return true;
    };

    for (const Equation& eq : inst.equations) {
        const auto value = evaluate(eq, trace.values);
        if (!value) {
            pending.push_back(&eq);
            continue;
        }
        if (!settle(eq, *value, eq.eq_pos)) {
            continue;
        }
        // Transitive closure over pending equations, all attributed to the
        // equation being ingested.
        bool changed = true;
        while (changed) {
            changed = false;
            for (auto it = pending.begin(); it != pending.end();) {
                if (const auto v = evaluate(**it, trace.values)) {
                    settle(**it, *v, eq.eq_pos);
                    it = pending.erase(it);
                    changed = true;
                } else {
                    ++it;
                }
            }
        }
    }
    if (!trace.values.contains(inst.query)) {
        throw UnresolvableQuery(std::string("query variable '") + inst.query +
                                "' cannot be determined");
    }
    return trace;
}

std::vector<Var> dependency_path(const Instance& inst) {
    std::vector<Var> path;
    std::optional<Var> cur = inst.query;
    while (cur && std::find(path.begin(), path.end(), *cur) == path.end()) {
        path.push_back(*cur);
        const Equation* def = inst.definition(*cur);
        cur = def ? def->dependency() : std::nullopt;
    }
    return path;
}

CotChain build_gold_chain(const Instance& inst) {
    std::set<Var> seen;
    for (const Equation& eq : inst.equations) {
        if (!seen.insert(eq.lhs).second) {
            throw TemplateMismatch(std::string("variable '") + eq.lhs + "' is defined twice");
        }
    }
    const std::vector<Var> path = dependency_path(inst);
    const Equation* innermost = inst.definition(path.back());
    if (innermost == nullptr) {
        throw TemplateMismatch(std::string("variable '") + path.back() + "' has no definition");
    }
    if (innermost->dependency()) {
        throw TemplateMismatch("dependency path contains a cycle");
    }
    const ResolutionTrace trace = resolve_greedy(inst);

    CotChain chain;
    auto emit = [&](Var lhs, Rhs rhs) {
        chain.steps.push_back(Equation{lhs, rhs, static_cast<int>(chain.steps.size())});
    };
    // Restate definitions from the query down to the innermost variable.
    for (const Var v : path) {
        emit(v, inst.definition(v)->rhs);
    }
    if (innermost->has_operator()) {
        emit(innermost->lhs, Literal{trace.values.at(innermost->lhs)});
    }
    // Substitute and reduce, innermost first.
    for (auto it = path.rbegin() + 1; it != path.rend(); ++it) {
        const auto& def = std::get<BinVar>(inst.definition(*it)->rhs);
        emit(*it, def);
        emit(*it, BinLit{def.lhs, def.op, trace.values.at(def.var)});
        emit(*it, Literal{trace.values.at(*it)});
    }
    chain.answer = trace.values.at(inst.query);
    chain.answer_var = inst.query;
    return chain;
}

ComplexityProfile complexity(const Instance& inst) {
    ComplexityProfile profile;
    const std::vector<Var> path = dependency_path(inst);
    for (const Var v : path) {
        if (const Equation* def = inst.definition(v); def && def->has_operator()) {
            ++profile.steps;
        }
    }
    std::map<Var, int> known;
    for (const Equation& eq : inst.equations) {
        if (const auto v = evaluate(eq, known)) {
            known.emplace(eq.lhs, *v);
        } else {
            ++profile.stack;
        }
        if (std::find(path.begin(), path.end(), eq.lhs) == path.end()) {
            ++profile.distractors;
        }
    }
    return profile;
}

int variable_steps(const Instance& inst, Var v) {
    int steps = 0;
    std::set<Var> visited;
    std::optional<Var> cur = v;
    while (cur && visited.insert(*cur).second) {
        const Equation* def = inst.definition(*cur);
        if (def == nullptr) break;
        if (def->has_operator()) ++steps;
        cur = def->dependency();
    }
    return steps;
}

int detect_level(const Instance& inst) {
    const auto& e = inst.equations;
    std::set<Var> names;
    for (const Equation& eq : e) names.insert(eq.lhs);
    if (names.size() != e.size()) return 0;

    if (e.size() == 2) {
        if (kind_of(e[0]) == Kind::DV && depends_on(e[0], e[1]) && inst.query == e[0].lhs) {
            if (kind_of(e[1]) == Kind::Lit) return 1;
            if (kind_of(e[1]) == Kind::DD) return 3;
        }
        if (kind_of(e[0]) == Kind::DD && kind_of(e[1]) == Kind::DV && depends_on(e[1], e[0]) &&
            inst.query == e[1].lhs) {
            return 2;
        }
        return 0;
    }
    if (e.size() == 3 && kind_of(e[0]) == Kind::DV && depends_on(e[0], e[1]) &&
        inst.query == e[0].lhs && kind_of(e[2]) == Kind::DD) {
        if (kind_of(e[1]) == Kind::DD) return 4;
        if (kind_of(e[1]) == Kind::DV && depends_on(e[1], e[2])) return 5;
    }
    return 0;
}

std::vector<std::string> literal_expressions(const Instance& inst) {
    std::vector<std::string> out;
    for (const Equation& eq : inst.equations) {
        if (const auto* bl = std::get_if<BinLit>(&eq.rhs)) {
            out.push_back(std::string{static_cast<char>('0' + bl->lhs), static_cast<char>(bl->op),
                                      static_cast<char>('0' + bl->rhs)});
        }
    }
    return out;
}

}  // namespace cotprobe
