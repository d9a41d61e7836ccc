#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cotprobe/metrics.hpp"
#include "cotprobe/patching.hpp"
#include "cotprobe/probelab.hpp"

namespace cotprobe {

// Static SVG figures. Colour and y scales are fixed to [0, 1] so figures from
// different runs are comparable; output is byte-identical for identical input.

// t on x, layer on y, accuracy as intensity. Untrained cells are grey.
std::string heatmap_svg(const AccuracyGrid& grid, int variable);

// Max-over-layers accuracy against t for every variable, with equation
// boundaries ticked and tau drawn as a dashed line.
std::string line_plot_svg(const AccuracyGrid& grid, double tau = kDefaultTau);

// Per equation position: probe accuracy (max over the equation's tokens and
// all layers) above, pooled patching success per target below.
std::string pooled_panel_svg(const AccuracyGrid& grid, const std::vector<ReportRow>& patching);

// Markdown comparing our timeline rows with published ones.
std::string comparison_note(const std::vector<TimelineRow>& ours, const std::vector<TimelineRow>& published);

// Schema tag on the first line of a CSV artifact, e.g. "cotprobe-grid/1".
// Throws SchemaError for empty or untagged files.
std::string csv_schema(const std::filesystem::path& path);

// Renders every figure the inputs allow into out_dir and returns the written
// paths. Inputs are recognised by schema; unknown schemas throw SchemaError.
std::vector<std::filesystem::path> emit_report(const std::vector<std::filesystem::path>& inputs,
                                               const std::filesystem::path& published_timeline,
                                               const std::filesystem::path& out_dir, double tau = kDefaultTau);

}  // namespace cotprobe
