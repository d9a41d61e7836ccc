#include "cotprobe/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <map>

#include "cotprobe/errors.hpp"

namespace cotprobe {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

std::string colour(double a) {
    if (std::isnan(a)) return "#d9d9d9";
    a = std::clamp(a, 0.0, 1.0);
    auto mix = [&](int lo, int hi) { return static_cast<int>(std::lround(lo + (hi - lo) * a)); };
    return fmt("#%02x%02x%02x", mix(247, 8), mix(251, 48), mix(255, 107));
}

std::string open_svg(int w, int h) {
    return fmt("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\" "
               "font-family=\"sans-serif\" font-size=\"10\">\n<rect width=\"%d\" height=\"%d\" fill=\"white\"/>\n",
               w, h, w, h, w, h);
}

std::string text(double x, double y, const std::string& s, const char* anchor = "middle", const char* fill = "black") {
    return fmt("<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"%s\" fill=\"%s\">%s</text>\n", x, y, anchor, fill, s.c_str());
}

std::string eq_label(int eq) { return std::to_string(eq); }

// First t of every equation span.
std::vector<int> equation_starts(const AccuracyGrid& grid) {
    std::vector<int> out;
    for (int t = grid.t_min; t <= grid.t_max; ++t) {
        if (t == grid.t_min || grid.eq_of(t) != grid.eq_of(t - 1)) out.push_back(t);
    }
    return out;
}

// Polyline segments split at NaN values.
std::string polyline(const std::vector<std::pair<double, double>>& pts, const std::vector<bool>& valid,
                     const char* stroke, bool markers) {
    std::string out;
    std::string seg;
    int count = 0;
    auto flush = [&] {
        if (count > 1) {
            out += fmt("<polyline fill=\"none\" stroke=\"%s\" stroke-width=\"1.5\" points=\"", stroke) + seg + "\"/>\n";
        }
        seg.clear();
        count = 0;
    };
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!valid[i]) {
            flush();
            continue;
        }
        if (count) seg += ' ';
        seg += fmt("%.1f,%.1f", pts[i].first, pts[i].second);
        ++count;
        if (markers) out += fmt("<circle cx=\"%.1f\" cy=\"%.1f\" r=\"2.5\" fill=\"%s\"/>\n", pts[i].first, pts[i].second, stroke);
    }
    flush();
    return out;
}

std::string y_axis(double x0, double y0, double h, double w) {
    std::string out;
    for (int k = 0; k <= 4; ++k) {
        const double y = y0 + h - h * k / 4.0;
        out += fmt("<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#eeeeee\"/>\n", x0, y, x0 + w, y);
        out += text(x0 - 4, y + 3, fmt("%.2f", k / 4.0), "end");
    }
    out += fmt("<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"black\"/>\n", x0, y0, w, h);
    return out;
}

void write_file(const std::filesystem::path& path, const std::string& body) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << body;
    if (!out) throw MissingArtifact("cannot write " + path.string());
}

}  // namespace

std::string heatmap_svg(const AccuracyGrid& grid, int variable) {
    grid.slot(grid.t_min, 0, variable);
    const int cw = 10, ch = 16, left = 50, top = 30;
    const int w = grid.positions() * cw, h = grid.layers * ch;
    std::string s = open_svg(left + w + 90, top + h + 50);
    s += text(left + w / 2.0, 18, fmt("Level %d, v%d: probe accuracy", grid.level, variable));
    for (int t = grid.t_min; t <= grid.t_max; ++t) {
        for (int l = 0; l < grid.layers; ++l) {
            const double a = grid.at(t, l, variable);
            s += fmt("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"%s\"><title>t=%d l=%d %s</title></rect>\n",
                     left + (t - grid.t_min) * cw, top + (grid.layers - 1 - l) * ch, cw, ch, colour(a).c_str(), t, l,
                     std::isnan(a) ? "NA" : fmt("%.3f", a).c_str());
        }
    }
    for (int l = 0; l < grid.layers; ++l) s += text(left - 4, top + (grid.layers - 1 - l) * ch + ch * 0.7, std::to_string(l), "end");
    s += text(14, top + h / 2.0, "layer");
    for (int t : equation_starts(grid)) {
        const int x = left + (t - grid.t_min) * cw;
        s += fmt("<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"%s\"/>\n", x, top, x, top + h + 4,
                 t == 0 ? "#d62728" : "#888888");
        s += text(x + 2, top + h + 14, eq_label(grid.eq_of(t)), "start");
    }
    s += text(left + w / 2.0, top + h + 34, "token position (ticks: equation position, red: start of the chain)");
    const int bx = left + w + 30;
    for (int k = 0; k < 20; ++k) {
        s += fmt("<rect x=\"%d\" y=\"%.2f\" width=\"12\" height=\"%.2f\" fill=\"%s\"/>\n", bx, top + h - h * (k + 1) / 20.0,
                 h / 20.0, colour((k + 0.5) / 20.0).c_str());
    }
    s += text(bx + 16, top + 8, "1.0", "start");
    s += text(bx + 16, top + h, "0.0", "start");
    s += "</svg>\n";
    return s;
}

std::string line_plot_svg(const AccuracyGrid& grid, double tau) {
    const int cw = 8, left = 50, top = 30, h = 200;
    const int w = std::max(1, grid.positions() - 1) * cw;
    std::string s = open_svg(left + w + 100, top + h + 50);
    s += text(left + w / 2.0, 18, fmt("Level %d: max-over-layers probe accuracy", grid.level));
    s += y_axis(left, top, h, w);
    for (int t : equation_starts(grid)) {
        const double x = left + (t - grid.t_min) * cw;
        s += fmt("<line x1=\"%.1f\" y1=\"%d\" x2=\"%.1f\" y2=\"%d\" stroke=\"%s\" stroke-dasharray=\"2,2\"/>\n", x, top, x,
                 top + h, t == 0 ? "#d62728" : "#bbbbbb");
        s += text(x + 2, top + h + 14, eq_label(grid.eq_of(t)), "start");
    }
    const double ty = top + h - h * tau;
    s += fmt("<line x1=\"%d\" y1=\"%.1f\" x2=\"%d\" y2=\"%.1f\" stroke=\"black\" stroke-dasharray=\"6,3\"/>\n", left, ty,
             left + w, ty);
    s += text(left + w + 4, ty + 3, fmt("tau %.2f", tau), "start");
    for (int v = 1; v <= grid.variables; ++v) {
        std::vector<std::pair<double, double>> pts;
        std::vector<bool> valid;
        for (int t = grid.t_min; t <= grid.t_max; ++t) {
            const double a = max_over_layers(grid, t, v);
            pts.emplace_back(left + (t - grid.t_min) * cw, top + h - h * (std::isnan(a) ? 0.0 : a));
            valid.push_back(!std::isnan(a));
        }
        const char* c = kPalette[(v - 1) % 6];
        s += polyline(pts, valid, c, false);
        s += fmt("<rect x=\"%d\" y=\"%d\" width=\"10\" height=\"3\" fill=\"%s\"/>\n", left + w + 4, top + 10 + 14 * v, c);
        s += text(left + w + 18, top + 14 + 14 * v, fmt("v%d", v), "start");
    }
    s += text(left + w / 2.0, top + h + 34, "token position (ticks: equation position, red: start of the chain)");
    s += "</svg>\n";
    return s;
}

std::string pooled_panel_svg(const AccuracyGrid& grid, const std::vector<ReportRow>& patching) {
    std::vector<int> eqs;
    for (int t : equation_starts(grid)) eqs.push_back(grid.eq_of(t));
    const int cw = 40, left = 50, top = 30, h = 150, gap = 40;
    const int w = static_cast<int>(std::max<std::size_t>(1, eqs.size() - 1)) * cw;
    std::string s = open_svg(left + w + 110, top + 2 * h + gap + 50);
    s += text(left + w / 2.0, 18, fmt("Level %d: probing (top) and patching success pooled over bands (bottom)", grid.level));
    auto x_of = [&](std::size_t k) { return static_cast<double>(left + static_cast<int>(k) * cw); };

    s += y_axis(left, top, h, w);
    for (int v = 1; v <= grid.variables; ++v) {
        std::vector<std::pair<double, double>> pts;
        std::vector<bool> valid;
        for (std::size_t k = 0; k < eqs.size(); ++k) {
            double best = std::nan("");
            for (int t = grid.t_min; t <= grid.t_max; ++t) {
                if (grid.eq_of(t) != eqs[k]) continue;
                const double a = max_over_layers(grid, t, v);
                if (!std::isnan(a) && (std::isnan(best) || a > best)) best = a;
            }
            pts.emplace_back(x_of(k), top + h - h * (std::isnan(best) ? 0.0 : best));
            valid.push_back(!std::isnan(best));
        }
        const char* c = kPalette[(v - 1) % 6];
        s += polyline(pts, valid, c, true);
        s += text(left + w + 8, top + 14 * v, fmt("v%d", v), "start", c);
    }

    const int top2 = top + h + gap;
    s += y_axis(left, top2, h, w);
    std::vector<std::string> targets;
    for (const ReportRow& r : patching) {
        if (std::find(targets.begin(), targets.end(), r.target) == targets.end()) targets.push_back(r.target);
    }
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
        std::map<int, double> pooled;
        for (const ReportRow& r : patching) {
            if (r.target != targets[ti]) continue;
            auto [it, fresh] = pooled.emplace(r.grid_eq, r.success_rate);
            if (!fresh) it->second = std::max(it->second, r.success_rate);
        }
        std::vector<std::pair<double, double>> pts;
        std::vector<bool> valid;
        for (std::size_t k = 0; k < eqs.size(); ++k) {
            const auto it = pooled.find(eqs[k]);
            pts.emplace_back(x_of(k), top2 + h - h * (it == pooled.end() ? 0.0 : it->second));
            valid.push_back(it != pooled.end());
        }
        const char* c = kPalette[(ti + 3) % 6];
        s += polyline(pts, valid, c, true);
        s += text(left + w + 8, top2 + 14 * (static_cast<int>(ti) + 1), targets[ti], "start", c);
    }
    for (std::size_t k = 0; k < eqs.size(); ++k) s += text(x_of(k), top2 + h + 14, eq_label(eqs[k]));
    s += text(left + w / 2.0, top2 + h + 34, "equation position");
    s += "</svg>\n";
    return s;
}

std::string comparison_note(const std::vector<TimelineRow>& ours, const std::vector<TimelineRow>& published) {
    auto opt = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string("N/A"); };
    auto num = [](double a) { return std::isnan(a) ? std::string("N/A") : fmt("%.2f", a); };
    std::string s = "# Resolution timeline against the published model\n\n";
    s += "Published rows are the reference LLM; ours come from the toy model. Only the lower bound t_dagger_eq is "
         "expected to agree exactly.\n\n";
    s += "| level | variable | tau | t*_eq ours | t*_eq published | t_dagger_eq | pre ours | pre published | post ours | "
         "post published | mode ours | mode published |\n";
    s += "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    auto mode = [](const TimelineRow& r) -> std::string {
        if (!r.t_star_eq) return "unresolved";
        return *r.t_star_eq < 0 ? "pre-cot" : "during-cot";
    };
    int agree = 0, compared = 0;
    for (const TimelineRow& o : ours) {
        const TimelineRow* p = nullptr;
        for (const TimelineRow& q : published) {
            if (q.level == o.level && q.variable == o.variable && std::fabs(q.tau - o.tau) < 1e-9) p = &q;
        }
        if (!p) continue;
        ++compared;
        if (mode(o) == mode(*p)) ++agree;
        s += fmt("| %d | v%d | %.2f | %s | %s | %d | %s | %s | %s | %s | %s | %s |\n", o.level, o.variable, o.tau,
                 opt(o.t_star_eq).c_str(), opt(p->t_star_eq).c_str(), o.t_dagger_eq, num(o.acc_pre).c_str(),
                 num(p->acc_pre).c_str(), num(o.acc_post).c_str(), num(p->acc_post).c_str(), mode(o).c_str(),
                 mode(*p).c_str());
    }
    s += fmt("\nResolution mode agrees on %d of %d compared variables.\n", agree, compared);
    return s;
}

std::string csv_schema(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("report input not found: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("#schema=", 0) != 0) {
        throw SchemaError("no schema tag in " + path.string());
    }
    return line.substr(8);
}

std::vector<std::filesystem::path> emit_report(const std::vector<std::filesystem::path>& inputs,
                                               const std::filesystem::path& published_timeline,
                                               const std::filesystem::path& out_dir, double tau) {
    if (inputs.empty()) throw ConfigError("no report inputs");
    std::vector<std::filesystem::path> written;
    std::vector<AccuracyGrid> grids;
    std::vector<std::pair<std::string, std::vector<ReportRow>>> patches;
    std::vector<TimelineRow> timeline_rows;
    auto emit = [&](const std::string& name, const std::string& body) {
        const auto path = out_dir / name;
        write_file(path, body);
        written.push_back(path);
    };
    for (const auto& in : inputs) {
        const std::string schema = csv_schema(in);
        const std::string stem = in.stem().string();
        if (schema == "cotprobe-grid/1") {
            AccuracyGrid g = read_grid_csv(in);
            for (int v = 1; v <= g.variables; ++v) emit(stem + "_v" + std::to_string(v) + ".svg", heatmap_svg(g, v));
            emit(stem + "_line.svg", line_plot_svg(g, tau));
            grids.push_back(std::move(g));
        } else if (schema == "cotprobe-patch/1") {
            auto rows = read_report_csv(in);
            if (rows.empty()) throw SchemaError("patching report has no rows: " + in.string());
            patches.emplace_back(stem, std::move(rows));
        } else if (schema == "cotprobe-timeline/1") {
            auto rows = read_timeline_csv(in);
            if (rows.empty()) throw SchemaError("timeline has no rows: " + in.string());
            timeline_rows.insert(timeline_rows.end(), rows.begin(), rows.end());
        } else {
            throw SchemaError("unknown schema '" + schema + "' in " + in.string());
        }
    }
    for (const auto& [stem, rows] : patches) {
        for (const AccuracyGrid& g : grids) {
            if (g.level == rows.front().level) {
                emit(stem + "_panel.svg", pooled_panel_svg(g, rows));
                break;
            }
        }
    }
    if (!timeline_rows.empty() && !published_timeline.empty()) {
        emit("comparison.md", comparison_note(timeline_rows, read_timeline_csv(published_timeline)));
    }
    return written;
}

}  // namespace cotprobe
