#include "cotprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace cotprobe {

double max_over_layers(const AccuracyGrid& grid, int t, int variable) {
    double best = std::numeric_limits<double>::quiet_NaN();
    for (int l = 0; l < grid.layers; ++l) {
        const double a = grid.at(t, l, variable);
        if (!std::isnan(a) && (std::isnan(best) || a > best)) best = a;
    }
    return best;
}

std::optional<int> first_hit(const AccuracyGrid& grid, int variable, double tau) {
    grid.slot(grid.t_min, 0, variable);  // validates the variable
    for (int t = grid.t_min; t <= grid.t_max; ++t) {
        const double a = max_over_layers(grid, t, variable);
        if (!std::isnan(a) && a > tau) return t;
    }
    return std::nullopt;
}

int to_equation_index(const AccuracyGrid& grid, int t) { return grid.eq_of(t); }

std::pair<double, double> acc_pre_post(const AccuracyGrid& grid, int variable) {
    grid.slot(grid.t_min, 0, variable);
    double pre = std::numeric_limits<double>::quiet_NaN();
    double post = pre;
    for (int t = grid.t_min; t <= grid.t_max; ++t) {
        const double a = max_over_layers(grid, t, variable);
        if (std::isnan(a)) continue;
        double& side = t < 0 ? pre : post;
        if (std::isnan(side) || a > side) side = a;
    }
    return {pre, post};
}

const char* resolution_name(Resolution r) {
    switch (r) {
        case Resolution::PreCoT: return "pre-cot";
        case Resolution::DuringCoT: return "during-cot";
        case Resolution::Unresolved: return "unresolved";
        case Resolution::DistractorUnresolved: return "distractor-unresolved";
    }
    return "?";
}

ResolutionTimeline timeline(const AccuracyGrid& grid, const Instance& template_instance, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
    if (template_instance.level != grid.level) {
        throw ConfigError("template level " + std::to_string(template_instance.level) + " differs from grid level " +
                          std::to_string(grid.level));
    }
    if (static_cast<int>(template_instance.var_order.size()) != grid.variables) {
        throw ConfigError("template and grid disagree on the number of variables");
    }
    const ResolutionTrace trace = resolve_greedy(template_instance);
    const std::vector<Var> path = dependency_path(template_instance);
    ResolutionTimeline out;
    out.level = grid.level;
    out.tau = tau;
    for (int v = 1; v <= grid.variables; ++v) {
        VariableTimeline row;
        row.variable = v;
        row.name = template_instance.var_order[static_cast<std::size_t>(v - 1)];
        row.steps = variable_steps(template_instance, row.name);
        row.t_dagger_eq = trace.lower_bound_eq.at(row.name);
        row.tau = tau;
        row.distractor = std::find(path.begin(), path.end(), row.name) == path.end();
        row.t_star = first_hit(grid, v, tau);
        if (row.t_star) row.t_star_eq = grid.eq_of(*row.t_star);
        std::tie(row.acc_pre, row.acc_post) = acc_pre_post(grid, v);
        if (!row.t_star) {
            row.resolution = row.distractor ? Resolution::DistractorUnresolved : Resolution::Unresolved;
        } else if (*row.t_star < 0) {
            row.resolution = Resolution::PreCoT;
        } else {
            row.resolution = Resolution::DuringCoT;
        }
        row.below_lower_bound = row.t_star_eq && *row.t_star_eq < row.t_dagger_eq;
        out.variables.push_back(row);
    }
    return out;
}

namespace {

constexpr const char* kTimelineSchema = "#schema=cotprobe-timeline/1";
constexpr const char* kTimelineHeader = "level,variable,steps,t_star,t_star_eq,t_dagger_eq,acc_pre,acc_post,tau";

std::string opt_str(const std::optional<int>& v) { return v ? std::to_string(*v) : "N/A"; }

std::string acc_str(double a) {
    if (std::isnan(a)) return "N/A";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", a);
    return buf;
}

}  // namespace

void write_timeline_csv(const std::vector<ResolutionTimeline>& timelines, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingArtifact("cannot write " + path.string());
    out << kTimelineSchema << '\n' << kTimelineHeader << '\n';
    char tau[32];
    for (const ResolutionTimeline& tl : timelines) {
        std::snprintf(tau, sizeof tau, "%.2f", tl.tau);
        for (const VariableTimeline& v : tl.variables) {
            out << tl.level << ",v" << v.variable << ',' << v.steps << ',' << opt_str(v.t_star) << ','
                << opt_str(v.t_star_eq) << ',' << v.t_dagger_eq << ',' << acc_str(v.acc_pre) << ','
                << acc_str(v.acc_post) << ',' << tau << '\n';
        }
    }
}

std::vector<TimelineRow> read_timeline_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("timeline file not found: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kTimelineSchema) {
        throw SchemaError("unsupported timeline schema in " + path.string());
    }
    if (!std::getline(in, line) || line.rfind(kTimelineHeader, 0) != 0) {
        throw SchemaError("unexpected timeline header in " + path.string());
    }
    const bool has_source = line.size() > std::string(kTimelineHeader).size();
    std::vector<TimelineRow> rows;
    auto opt = [&](const std::string& s) -> std::optional<int> {
        if (s.empty() || s == "N/A") return std::nullopt;
        try {
            return std::stoi(s);
        } catch (const std::exception&) {
            throw SchemaError("bad integer '" + s + "' in " + path.string());
        }
    };
    auto num = [&](const std::string& s) {
        if (s == "N/A") return std::numeric_limits<double>::quiet_NaN();
        try {
            return std::stod(s);
        } catch (const std::exception&) {
            throw SchemaError("bad number '" + s + "' in " + path.string());
        }
    };
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != (has_source ? 10u : 9u) || f[1].size() < 2 || f[1][0] != 'v') {
            throw SchemaError("malformed timeline row: " + line);
        }
        TimelineRow r;
        r.level = static_cast<int>(num(f[0]));
        r.variable = static_cast<int>(num(f[1].substr(1)));
        r.steps = static_cast<int>(num(f[2]));
        r.t_star = opt(f[3]);
        r.t_star_eq = opt(f[4]);
        r.t_dagger_eq = static_cast<int>(num(f[5]));
        r.acc_pre = num(f[6]);
        r.acc_post = num(f[7]);
        r.tau = num(f[8]);
        if (has_source) r.source = f[9];
        rows.push_back(r);
    }
    return rows;
}

}  // namespace cotprobe
