#pragma once

// Flat-file renderers for run reports and comparison tables: CSV tables and
// static SVG charts, both derived purely from the JSON documents so every
// number prints with exactly the bytes the report itself prints.

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sprompts/config.hpp"

namespace sprompts::render {

class RenderError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct NamedFile {
    std::string name;
    std::string text;
};

namespace detail {

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

// One CSV cell from a report node. Numbers and booleans reuse the JSON
// serializer, so the CSV shows byte-for-byte what the report shows; nulls
// become empty cells; strings are escaped raw.
inline std::string csv_cell(const config::json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return csv_escape(v.get<std::string>());
    return v.dump();
}

inline std::string join_row(const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
    }
    out += '\n';
    return out;
}

inline double coord(double v) { return std::round(v * 10.0) / 10.0; }

inline std::string fnum(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    return colors[i % 8];
}

} // namespace detail

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points; // x ascending, y in [0,1]
};

// Fixed-viewport line chart with a [0,1] accuracy axis. Coordinates are
// display-only; the underlying values live in the CSV files.
inline std::string line_chart_svg(const std::string& title, const std::string& x_label,
                                  const std::vector<Series>& series) {
    if (series.empty()) throw RenderError("line_chart_svg: no series to draw");
    double xmin = 0.0, xmax = 0.0;
    bool first = true;
    for (const auto& s : series)
        for (const auto& p : s.points) {
            xmin = first ? p.first : std::min(xmin, p.first);
            xmax = first ? p.first : std::max(xmax, p.first);
            first = false;
        }
    if (first) throw RenderError("line_chart_svg: no points to draw");
    if (xmax == xmin) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    const double x0 = 64.0, x1 = 600.0, y0 = 344.0, y1 = 48.0;
    auto px = [&](double x) { return detail::coord(x0 + (x - xmin) / (xmax - xmin) * (x1 - x0)); };
    auto py = [&](double y) { return detail::coord(y0 + y * (y1 - y0)); };

    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 400\">\n"
        "<style>text{font-family:sans-serif;font-size:12px;fill:#333}</style>\n"
        "<rect width=\"640\" height=\"400\" fill=\"#ffffff\"/>\n";
    svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" +
           detail::xml_escape(title) + "</text>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = i / 5.0;
        svg += "<line x1=\"" + detail::fnum(x0) + "\" y1=\"" + detail::fnum(py(v)) + "\" x2=\"" +
               detail::fnum(x1) + "\" y2=\"" + detail::fnum(py(v)) +
               "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        svg += "<text x=\"" + detail::fnum(x0 - 10.0) + "\" y=\"" + detail::fnum(py(v) + 4.0) +
               "\" text-anchor=\"end\">" + detail::fnum(v) + "</text>\n";
    }
    svg += "<line x1=\"" + detail::fnum(x0) + "\" y1=\"" + detail::fnum(y0) + "\" x2=\"" +
           detail::fnum(x1) + "\" y2=\"" + detail::fnum(y0) + "\" stroke=\"#333333\"/>\n";
    svg += "<line x1=\"" + detail::fnum(x0) + "\" y1=\"" + detail::fnum(y0) + "\" x2=\"" +
           detail::fnum(x0) + "\" y2=\"" + detail::fnum(y1) + "\" stroke=\"#333333\"/>\n";
    const int ticks = std::min(10, std::max(1, static_cast<int>(std::lround(xmax - xmin))));
    for (int i = 0; i <= ticks; ++i) {
        const double v = xmin + (xmax - xmin) * i / ticks;
        char lab[32];
        std::snprintf(lab, sizeof(lab), "%g", v);
        svg += "<text x=\"" + detail::fnum(px(v)) + "\" y=\"" + detail::fnum(y0 + 18.0) +
               "\" text-anchor=\"middle\">" + lab + "</text>\n";
    }
    svg += "<text x=\"320\" y=\"384\" text-anchor=\"middle\">" + detail::xml_escape(x_label) +
           "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        if (s.points.empty()) continue;
        std::string pts;
        for (const auto& p : s.points) {
            if (!pts.empty()) pts += ' ';
            pts += detail::fnum(px(p.first)) + "," + detail::fnum(py(p.second));
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(detail::palette(i)) +
               "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        for (const auto& p : s.points)
            svg += "<circle cx=\"" + detail::fnum(px(p.first)) + "\" cy=\"" +
                   detail::fnum(py(p.second)) + "\" r=\"3\" fill=\"" +
                   std::string(detail::palette(i)) + "\"/>\n";
        const double ly = 48.0 + 18.0 * static_cast<double>(i);
        svg += "<rect x=\"612\" y=\"" + detail::fnum(ly - 9.0) +
               "\" width=\"10\" height=\"10\" fill=\"" + std::string(detail::palette(i)) +
               "\"/>\n";
        svg += "<text x=\"608\" y=\"" + detail::fnum(ly) + "\" text-anchor=\"end\">" +
               detail::xml_escape(s.name) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

// Categorical bar chart for comparison cells; values shown over the bars.
inline std::string bar_chart_svg(const std::string& title,
                                 const std::vector<std::pair<std::string, double>>& bars) {
    if (bars.empty()) throw RenderError("bar_chart_svg: no bars to draw");
    const double x0 = 64.0, x1 = 600.0, y0 = 344.0, y1 = 48.0;
    auto py = [&](double y) { return detail::coord(y0 + y * (y1 - y0)); };
    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 400\">\n"
        "<style>text{font-family:sans-serif;font-size:11px;fill:#333}</style>\n"
        "<rect width=\"640\" height=\"400\" fill=\"#ffffff\"/>\n";
    svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" +
           detail::xml_escape(title) + "</text>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = i / 5.0;
        svg += "<line x1=\"" + detail::fnum(x0) + "\" y1=\"" + detail::fnum(py(v)) + "\" x2=\"" +
               detail::fnum(x1) + "\" y2=\"" + detail::fnum(py(v)) +
               "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        svg += "<text x=\"" + detail::fnum(x0 - 10.0) + "\" y=\"" + detail::fnum(py(v) + 4.0) +
               "\" text-anchor=\"end\">" + detail::fnum(v) + "</text>\n";
    }
    const double slot = (x1 - x0) / static_cast<double>(bars.size());
    const double width = slot * 0.6;
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double cx = x0 + slot * (static_cast<double>(i) + 0.5);
        const double top = py(bars[i].second);
        svg += "<rect x=\"" + detail::fnum(cx - width / 2.0) + "\" y=\"" + detail::fnum(top) +
               "\" width=\"" + detail::fnum(width) + "\" height=\"" +
               detail::fnum(y0 - top) + "\" fill=\"" + std::string(detail::palette(i)) +
               "\"/>\n";
        char val[32];
        std::snprintf(val, sizeof(val), "%.3f", bars[i].second);
        svg += "<text x=\"" + detail::fnum(cx) + "\" y=\"" + detail::fnum(top - 6.0) +
               "\" text-anchor=\"middle\">" + val + "</text>\n";
        svg += "<text x=\"" + detail::fnum(cx) + "\" y=\"" + detail::fnum(y0 + 16.0) +
               "\" text-anchor=\"middle\">" + detail::xml_escape(bars[i].first) + "</text>\n";
    }
    svg += "<line x1=\"" + detail::fnum(x0) + "\" y1=\"" + detail::fnum(y0) + "\" x2=\"" +
           detail::fnum(x1) + "\" y2=\"" + detail::fnum(y0) + "\" stroke=\"#333333\"/>\n";
    svg += "</svg>\n";
    return svg;
}

// ---- CSV tables from a run report ----

inline std::vector<NamedFile> report_csvs(const config::json& report) {
    using detail::csv_cell;
    using detail::csv_escape;
    using detail::join_row;
    if (!report.is_object() || !report.contains("modes"))
        throw RenderError("report_csvs: not a run report document");
    std::vector<NamedFile> files;
    const auto& domains = report.at("stream").at("domains");

    // per-mode accuracy matrices, absent cells left empty
    for (const auto& [mode_name, mode] : report.at("modes").items()) {
        std::string text;
        std::vector<std::string> head{"session"};
        for (const auto& d : domains) head.push_back(csv_escape(d.get<std::string>()));
        text += join_row(head);
        const auto& matrix = mode.at("matrix");
        for (std::size_t l = 0; l < matrix.size(); ++l) {
            std::vector<std::string> row{std::to_string(l)};
            for (std::size_t t = 0; t < domains.size(); ++t)
                row.push_back(t < matrix[l].size() ? csv_cell(matrix[l][t]) : "");
            text += join_row(row);
        }
        files.push_back({"matrix_" + mode_name + ".csv", text});
    }

    // headline metrics, one row per mode
    {
        std::string text = join_row(
            {"mode", "task_wise_aa", "forgetting", "forgetting_defined", "task_agnostic"});
        for (const auto& [mode_name, mode] : report.at("modes").items())
            text += join_row({csv_escape(mode_name), csv_cell(mode.at("task_wise_aa")),
                              csv_cell(mode.at("forgetting")),
                              csv_cell(mode.at("forgetting_defined")),
                              csv_cell(mode.at("task_agnostic"))});
        files.push_back({"metrics.csv", text});
    }

    // running curves, one column per mode
    {
        std::vector<std::string> head{"session"};
        std::size_t rows = 0;
        for (const auto& [mode_name, mode] : report.at("modes").items()) {
            head.push_back(csv_escape(mode_name));
            if (mode.at("running_curve").is_array())
                rows = std::max(rows, mode.at("running_curve").size());
        }
        std::string text = join_row(head);
        for (std::size_t l = 0; l < rows; ++l) {
            std::vector<std::string> row{std::to_string(l)};
            for (const auto& [mode_name, mode] : report.at("modes").items()) {
                const auto& curve = mode.at("running_curve");
                row.push_back(curve.is_array() && l < curve.size() ? csv_cell(curve[l]) : "");
            }
            text += join_row(row);
        }
        files.push_back({"running_curve.csv", text});
    }

    // per-session training and accounting record
    {
        std::string text = join_row({"session", "resumed", "steps", "final_loss",
                                     "train_accuracy", "floats_added", "floats_measured",
                                     "relative_increase"});
        for (const auto& s : report.at("sessions"))
            text += join_row({csv_cell(s.at("session")), csv_cell(s.at("resumed")),
                              csv_cell(s.at("steps")), csv_cell(s.at("final_loss")),
                              csv_cell(s.at("train_accuracy")), csv_cell(s.at("floats_added")),
                              csv_cell(s.at("floats_measured")),
                              csv_cell(s.at("relative_increase"))});
        files.push_back({"sessions.csv", text});
    }

    // routing accuracy per domain with the task-wise mean
    if (!report.at("domain_id").is_null()) {
        std::string text = join_row({"domain", "accuracy"});
        const auto& per = report.at("domain_id").at("per_domain");
        for (std::size_t d = 0; d < per.size(); ++d)
            text += join_row({csv_escape(domains[d].get<std::string>()), csv_cell(per[d])});
        text += join_row({"average", csv_cell(report.at("domain_id").at("average"))});
        files.push_back({"domain_id.csv", text});
    }

    // held-out table, one row per checkpoint
    if (!report.at("ood").is_null()) {
        const auto& ood = report.at("ood");
        std::vector<std::string> head{"checkpoint"};
        for (const auto& c : ood.at("columns")) head.push_back(csv_escape(c.get<std::string>()));
        std::string text = join_row(head);
        const auto& rows = ood.at("rows");
        for (std::size_t l = 0; l < rows.size(); ++l) {
            std::vector<std::string> row{std::to_string(l)};
            for (const auto& c : rows[l]) row.push_back(csv_cell(c));
            text += join_row(row);
        }
        files.push_back({"ood.csv", text});
    }

    return files;
}

inline NamedFile ablation_csv(const config::json& table) {
    using detail::csv_cell;
    using detail::csv_escape;
    using detail::join_row;
    if (!table.is_object() || !table.contains("cells"))
        throw RenderError("ablation_csv: not a comparison-table document");
    std::string text =
        join_row({"group", "label", "ok", "aa", "forgetting", "forgetting_defined", "error"});
    for (const auto& c : table.at("cells"))
        text += join_row({csv_cell(c.at("group")), csv_cell(c.at("label")), csv_cell(c.at("ok")),
                          csv_cell(c.at("aa")), csv_cell(c.at("forgetting")),
                          csv_cell(c.at("forgetting_defined")), csv_cell(c.at("error"))});
    return {"ablation.csv", text};
}

// ---- SVG charts ----

// Accuracy curves over sessions (one line per mode) and, when the report has
// a held-out table, accuracy per checkpoint (one line per test set).
inline std::vector<NamedFile> report_svgs(const config::json& report) {
    if (!report.is_object() || !report.contains("modes"))
        throw RenderError("report_svgs: not a run report document");
    std::vector<NamedFile> files;
    {
        std::vector<Series> series;
        for (const auto& [mode_name, mode] : report.at("modes").items()) {
            const auto& curve = mode.at("running_curve");
            if (!curve.is_array()) continue;
            Series s;
            s.name = mode_name;
            for (std::size_t l = 0; l < curve.size(); ++l)
                s.points.push_back({static_cast<double>(l), curve[l].get<double>()});
            series.push_back(std::move(s));
        }
        if (!series.empty())
            files.push_back({"running_curve.svg",
                             line_chart_svg("average accuracy over sessions", "session",
                                            series)});
    }
    if (!report.at("ood").is_null()) {
        const auto& ood = report.at("ood");
        const auto& cols = ood.at("columns");
        const auto& rows = ood.at("rows");
        std::vector<Series> series;
        for (std::size_t c = 0; c < cols.size(); ++c) {
            Series s;
            s.name = cols[c].get<std::string>();
            for (std::size_t l = 0; l < rows.size(); ++l)
                if (!rows[l][c].is_null())
                    s.points.push_back({static_cast<double>(l), rows[l][c].get<double>()});
            if (!s.points.empty()) series.push_back(std::move(s));
        }
        if (!series.empty())
            files.push_back({"ood.svg", line_chart_svg("accuracy per checkpoint, free routing",
                                                       "checkpoint", series)});
    }
    return files;
}

// Sweep curves (one chart per swept quantity, x = swept value) plus a bar
// chart for the categorical mode/ablation cells.
inline std::vector<NamedFile> ablation_svgs(const config::json& table) {
    if (!table.is_object() || !table.contains("cells"))
        throw RenderError("ablation_svgs: not a comparison-table document");
    std::vector<NamedFile> files;
    const std::vector<std::string> sweep_groups{"kmeans_k", "knn_k", "L_i", "L_l"};
    for (const auto& group : sweep_groups) {
        Series s;
        s.name = group;
        for (const auto& c : table.at("cells")) {
            if (c.at("group") != group || c.at("ok") != true) continue;
            const std::string label = c.at("label").get<std::string>();
            const auto eq = label.find('=');
            if (eq == std::string::npos) continue;
            s.points.push_back(
                {std::stod(label.substr(eq + 1)), c.at("aa").get<double>()});
        }
        if (!s.points.empty())
            files.push_back({"sweep_" + group + ".svg",
                             line_chart_svg("task-wise accuracy vs " + group, group, {s})});
    }
    {
        std::vector<std::pair<std::string, double>> bars;
        for (const auto& c : table.at("cells")) {
            const std::string group = c.at("group").get<std::string>();
            if ((group == "mode" || group == "ablation") && c.at("ok") == true)
                bars.push_back({c.at("label").get<std::string>(), c.at("aa").get<double>()});
        }
        if (!bars.empty())
            files.push_back(
                {"ablation_bars.svg", bar_chart_svg("task-wise accuracy by configuration", bars)});
    }
    return files;
}

} // namespace sprompts::render
