#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cotprobe/eqdsl.hpp"
#include "cotprobe/probelab.hpp"

namespace cotprobe {

inline constexpr double kDefaultTau = 0.90;

// Max over layers at t; untrained cells are skipped (NaN if none trained).
double max_over_layers(const AccuracyGrid& grid, int t, int variable);

// Smallest t whose max-over-layers accuracy is strictly above tau.
std::optional<int> first_hit(const AccuracyGrid& grid, int variable, double tau);

int to_equation_index(const AccuracyGrid& grid, int t);  // throws OutOfRange

// (max over t < 0, max over t >= 0), over every layer. NaN when a half has no
// trained cell.
std::pair<double, double> acc_pre_post(const AccuracyGrid& grid, int variable);

enum class Resolution {
    PreCoT,        // acc_pre above tau: the value is available before the chain
    DuringCoT,     // first crosses tau inside the chain
    Unresolved,    // never crosses tau
    DistractorUnresolved,
};

const char* resolution_name(Resolution r);

struct VariableTimeline {
    int variable = 0;  // 1-based
    Var name = 'a';
    int steps = 0;
    std::optional<int> t_star;
    std::optional<int> t_star_eq;
    int t_dagger_eq = 0;
    double acc_pre = 0;
    double acc_post = 0;
    double tau = kDefaultTau;
    bool distractor = false;
    Resolution resolution = Resolution::Unresolved;
    // t_star_eq earlier than the logical lower bound; a probe artefact when set.
    bool below_lower_bound = false;
};

struct ResolutionTimeline {
    int level = 0;
    double tau = kDefaultTau;
    std::vector<VariableTimeline> variables;
};

// The template instance supplies variable names, step counts, distractors and
// lower bounds; its level must match the grid's.
ResolutionTimeline timeline(const AccuracyGrid& grid, const Instance& template_instance, double tau);

// level,variable,steps,t_star,t_star_eq,t_dagger_eq,acc_pre,acc_post,tau with
// "N/A" for missing hits. Rows for several taus may share a file.
void write_timeline_csv(const std::vector<ResolutionTimeline>& timelines, const std::filesystem::path& path);

// One parsed row; optional fields are empty for N/A or, in published
// fixtures, for values the source does not report.
struct TimelineRow {
    int level = 0;
    int variable = 0;
    int steps = 0;
    std::optional<int> t_star;
    std::optional<int> t_star_eq;
    int t_dagger_eq = 0;
    double acc_pre = 0;
    double acc_post = 0;
    double tau = 0;
    std::string source;  // optional trailing column in fixtures
};

std::vector<TimelineRow> read_timeline_csv(const std::filesystem::path& path);

}  // namespace cotprobe
