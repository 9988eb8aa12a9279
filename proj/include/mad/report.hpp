#pragma once

// Deterministic SVG plots and markdown report assembly. Identical inputs give
// byte-identical output: numbers are printed with fixed printf formats and no
// timestamps or locale-dependent pieces are emitted.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mad/common.hpp"
#include "mad/ioutil.hpp"

namespace mad {

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::string(buf);
}

namespace svg {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> p{"#1f77b4", "#d62728", "#2ca02c",
                                          "#9467bd", "#ff7f0e", "#8c564b"};
  return p;
}

struct Canvas {
  int w, h;
  std::ostringstream body;

  Canvas(int width, int height) : w(width), h(height) {}

  void line(double x1, double y1, double x2, double y2, const std::string& color,
            double width = 1.0) {
    body << "<line x1=\"" << fmt_num(x1) << "\" y1=\"" << fmt_num(y1)
         << "\" x2=\"" << fmt_num(x2) << "\" y2=\"" << fmt_num(y2)
         << "\" stroke=\"" << color << "\" stroke-width=\"" << fmt_num(width)
         << "\"/>\n";
  }
  void rect(double x, double y, double rw, double rh, const std::string& fill,
            const std::string& stroke = "none") {
    body << "<rect x=\"" << fmt_num(x) << "\" y=\"" << fmt_num(y) << "\" width=\""
         << fmt_num(rw) << "\" height=\"" << fmt_num(rh) << "\" fill=\"" << fill
         << "\" stroke=\"" << stroke << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    body << "<circle cx=\"" << fmt_num(x) << "\" cy=\"" << fmt_num(y)
         << "\" r=\"" << fmt_num(r) << "\" fill=\"" << fill << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& color, double width = 1.5) {
    body << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\""
         << fmt_num(width) << "\" points=\"";
    for (const auto& [x, y] : pts) body << fmt_num(x) << "," << fmt_num(y) << " ";
    body << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 12,
            const std::string& anchor = "start", const std::string& color = "#222") {
    body << "<text x=\"" << fmt_num(x) << "\" y=\"" << fmt_num(y)
         << "\" font-size=\"" << size << "\" font-family=\"sans-serif\" fill=\""
         << color << "\" text-anchor=\"" << anchor << "\">" << escape(s)
         << "</text>\n";
  }

  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
        << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
        << "\">\n<rect width=\"" << w << "\" height=\"" << h
        << "\" fill=\"white\"/>\n"
        << body.str() << "</svg>\n";
    return out.str();
  }
};

}  // namespace svg

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> err;  // optional symmetric error bars
};

namespace detail {

struct AxisRange {
  double lo = 0.0, hi = 1.0;
  double to_unit(double v) const { return (v - lo) / (hi - lo); }
};

inline AxisRange axis_range(double lo, double hi) {
  if (!(lo < hi)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace detail

// Line plot with optional error bars and a legend. Points are drawn as small
// circles so single-point series stay visible.
inline std::string line_plot(const std::string& title, const std::string& xlabel,
                             const std::string& ylabel,
                             const std::vector<Series>& series, int width = 640,
                             int height = 420) {
  check(!series.empty(), errkind::kContract, "line_plot: no series");
  double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
  for (const auto& s : series) {
    check(s.x.size() == s.y.size(), errkind::kContract,
          "line_plot: x/y length mismatch in series '" + s.label + "'");
    check(s.err.empty() || s.err.size() == s.y.size(), errkind::kContract,
          "line_plot: err length mismatch in series '" + s.label + "'");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      const double e = s.err.empty() ? 0.0 : s.err[i];
      ylo = std::min(ylo, s.y[i] - e);
      yhi = std::max(yhi, s.y[i] + e);
    }
  }
  check(xlo <= xhi, errkind::kContract, "line_plot: empty series");
  const auto rx = detail::axis_range(xlo, xhi);
  const auto ry = detail::axis_range(ylo, yhi);

  const double ml = 62, mr = 16, mt = 34, mb = 46;
  const double pw = width - ml - mr, ph = height - mt - mb;
  svg::Canvas c(width, height);
  auto px = [&](double v) { return ml + rx.to_unit(v) * pw; };
  auto py = [&](double v) { return mt + (1.0 - ry.to_unit(v)) * ph; };

  c.text(width / 2.0, 20, title, 14, "middle");
  c.rect(ml, mt, pw, ph, "none", "#444");
  for (int i = 0; i <= 4; ++i) {
    const double fx = rx.lo + (rx.hi - rx.lo) * i / 4.0;
    const double fy = ry.lo + (ry.hi - ry.lo) * i / 4.0;
    c.line(px(fx), mt + ph, px(fx), mt + ph + 4, "#444");
    c.text(px(fx), mt + ph + 18, fmt_num(fx), 10, "middle");
    c.line(ml - 4, py(fy), ml, py(fy), "#444");
    c.text(ml - 7, py(fy) + 4, fmt_num(fy), 10, "end");
  }
  c.text(width / 2.0, height - 8, xlabel, 12, "middle");
  c.text(14, mt - 10, ylabel, 12, "start");

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const std::string color = svg::palette()[si % svg::palette().size()];
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < s.x.size(); ++i)
      pts.push_back({px(s.x[i]), py(s.y[i])});
    if (pts.size() > 1) c.polyline(pts, color);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      c.circle(pts[i].first, pts[i].second, 2.5, color);
      if (!s.err.empty() && s.err[i] > 0) {
        c.line(pts[i].first, py(s.y[i] - s.err[i]), pts[i].first,
               py(s.y[i] + s.err[i]), color);
        c.line(pts[i].first - 3, py(s.y[i] - s.err[i]), pts[i].first + 3,
               py(s.y[i] - s.err[i]), color);
        c.line(pts[i].first - 3, py(s.y[i] + s.err[i]), pts[i].first + 3,
               py(s.y[i] + s.err[i]), color);
      }
    }
    c.text(ml + pw - 8, mt + 16 + 14 * static_cast<double>(si), s.label, 11,
           "end", color);
  }
  return c.str();
}

// Heatmap over a dense matrix; NaN cells are drawn gray. Low values map to
// dark blue, high to warm yellow.
inline std::string heatmap(const std::string& title,
                           const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& col_labels,
                           const std::vector<std::vector<double>>& values,
                           const std::string& row_name,
                           const std::string& col_name) {
  check(!values.empty() && values.size() == row_labels.size(),
        errkind::kContract, "heatmap: row count mismatch");
  for (const auto& row : values)
    check(row.size() == col_labels.size(), errkind::kContract,
          "heatmap: column count mismatch");

  double lo = 1e300, hi = -1e300;
  for (const auto& row : values)
    for (double v : row)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!(lo <= hi)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (lo == hi) hi = lo + 1.0;

  const double cell = 56, ml = 86, mt = 46, mb = 36;
  const int width = static_cast<int>(ml + cell * col_labels.size() + 20);
  const int height = static_cast<int>(mt + cell * row_labels.size() + mb);
  svg::Canvas c(width, height);
  c.text(width / 2.0, 22, title, 14, "middle");
  for (std::size_t r = 0; r < values.size(); ++r) {
    for (std::size_t k = 0; k < values[r].size(); ++k) {
      const double v = values[r][k];
      std::string fill = "#bbbbbb";
      std::string label = "-";
      if (std::isfinite(v)) {
        const double t = (v - lo) / (hi - lo);
        const int r8 = static_cast<int>(48 + t * (245 - 48));
        const int g8 = static_cast<int>(48 + t * (215 - 48));
        const int b8 = static_cast<int>(140 + t * (66 - 140));
        char buf[8];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r8, g8, b8);
        fill = buf;
        label = fmt_num(v);
      }
      const double x = ml + cell * static_cast<double>(k);
      const double y = mt + cell * static_cast<double>(r);
      c.rect(x, y, cell - 2, cell - 2, fill, "#666");
      c.text(x + cell / 2 - 1, y + cell / 2 + 4, label, 11, "middle",
             std::isfinite(v) && (v - lo) / (hi - lo) > 0.55 ? "#222" : "#eee");
    }
    c.text(ml - 8, mt + cell * static_cast<double>(r) + cell / 2 + 4,
           row_labels[r], 11, "end");
  }
  for (std::size_t k = 0; k < col_labels.size(); ++k)
    c.text(ml + cell * static_cast<double>(k) + cell / 2 - 1, mt - 8,
           col_labels[k], 11, "middle");
  c.text(14, mt - 8, row_name, 11, "start");
  c.text(width / 2.0, height - 10, col_name, 11, "middle");
  return c.str();
}

inline std::string md_table(const std::vector<std::string>& headers,
                            const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream out;
  out << "|";
  for (const auto& h : headers) out << " " << h << " |";
  out << "\n|";
  for (std::size_t i = 0; i < headers.size(); ++i) out << " --- |";
  out << "\n";
  for (const auto& row : rows) {
    out << "|";
    for (const auto& cell : row) out << " " << cell << " |";
    out << "\n";
  }
  return out.str();
}

namespace detail {

inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
      if (ch == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    fields.push_back(cur);
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace detail

// Loss-curve plot from a training CSV (header row naming the columns).
inline std::string loss_curve_svg(const std::string& csv_text,
                                  const std::vector<std::string>& fields) {
  const auto rows = detail::parse_csv(csv_text);
  check(rows.size() >= 2, errkind::kCorrupt, "training log has no data rows");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
  check(col.count("step"), errkind::kCorrupt, "training log lacks a step column");

  std::vector<Series> series;
  for (const auto& f : fields) {
    check(col.count(f), errkind::kCorrupt, "training log lacks column '" + f + "'");
    Series s;
    s.label = f;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      s.x.push_back(std::stod(rows[r][col["step"]]));
      s.y.push_back(std::stod(rows[r][col[f]]));
    }
    series.push_back(std::move(s));
  }
  return line_plot("training losses", "step", "loss", series);
}

namespace detail {

inline std::string sanitize_name(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return out.empty() ? std::string("run") : out;
}

}  // namespace detail

// Consolidated markdown + SVG summary over run and sweep directories. Valid
// directories are rendered; invalid ones are listed in an errors section.
// Writes report.md and one SVG per plottable input into out_dir.
inline std::string emit_report(const std::vector<std::string>& run_dirs,
                               const std::string& out_dir) {
  check(!run_dirs.empty(), errkind::kContract, "emit_report: no run dirs");
  std::filesystem::create_directories(out_dir);

  std::ostringstream runs_md, sweeps_md, errors_md;
  int n_runs = 0, n_sweeps = 0, n_errors = 0;

  for (std::size_t di = 0; di < run_dirs.size(); ++di) {
    const std::string& dir = run_dirs[di];
    const std::string base =
        std::to_string(di) + "_" +
        detail::sanitize_name(std::filesystem::path(dir).filename().string());
    const std::string report_path = dir + "/report.json";
    const std::string sweep_path = dir + "/sweep_summary.csv";

    if (std::filesystem::exists(report_path)) {
      try {
        const auto rep = nlohmann::json::parse(read_text_file(report_path));
        const auto& cfg = rep.at("config");
        runs_md << "### " << dir << "\n\n";
        runs_md << "- epochs: " << cfg.value("epochs", 0)
                << ", batch: " << cfg.value("batch_size", 0)
                << ", lambda: " << fmt_num(cfg.value("lambda", 0.0))
                << ", m_views: " << cfg.value("m_views", 0)
                << ", seed: " << cfg.value("seed", 0) << "\n";
        runs_md << "- steps: " << rep.value("steps", 0) << "\n\n";

        const auto& ev = rep.at("final_eval");
        std::vector<std::vector<std::string>> rows;
        for (const auto& [dom, acc] : ev.at("per_domain").items())
          rows.push_back({dom, fmt_num(acc.get<double>())});
        rows.push_back({"overall", fmt_num(ev.at("overall").get<double>())});
        runs_md << md_table({"domain", "accuracy"}, rows) << "\n";

        const std::string log_path = dir + "/train_log.csv";
        if (std::filesystem::exists(log_path)) {
          const std::string svg =
              loss_curve_svg(read_text_file(log_path), {"l_det", "l_mad"});
          const std::string name = base + "_losses.svg";
          write_text_file(out_dir + "/" + name, svg);
          runs_md << "![losses](" << name << ")\n\n";
        }
        ++n_runs;
      } catch (const std::exception& e) {
        errors_md << "- " << dir << "/report.json: " << e.what() << "\n";
        ++n_errors;
      }
      continue;
    }

    if (std::filesystem::exists(sweep_path)) {
      try {
        const auto rows = detail::parse_csv(read_text_file(sweep_path));
        check(rows.size() >= 2 && rows[0].size() >= 7, errkind::kCorrupt,
              "sweep summary has no cells");
        sweeps_md << "### " << dir << "\n\n";
        std::vector<std::vector<std::string>> table_rows;
        std::map<std::string, std::map<std::string, double>> by_axes;
        std::set<std::string> ms, ls;
        for (std::size_t r = 1; r < rows.size(); ++r) {
          table_rows.push_back({rows[r][0], rows[r][1], rows[r][2], rows[r][3],
                                rows[r][4], rows[r][5]});
          if (!rows[r][1].empty() && !rows[r][2].empty() &&
              rows[r][3] != "0") {
            by_axes[rows[r][1]][rows[r][2]] = std::stod(rows[r][4]);
            ms.insert(rows[r][1]);
            ls.insert(rows[r][2]);
          }
        }
        sweeps_md << md_table(
                         {"cell", "m_views", "lambda", "n_ok", "mean", "std"},
                         table_rows)
                  << "\n";

        if (ms.size() >= 2 && ls.size() >= 2) {
          std::vector<std::string> row_labels(ms.begin(), ms.end());
          std::vector<std::string> col_labels(ls.begin(), ls.end());
          std::vector<std::vector<double>> values;
          for (const auto& m : row_labels) {
            std::vector<double> row;
            for (const auto& l : col_labels)
              row.push_back(by_axes.count(m) && by_axes[m].count(l)
                                ? by_axes[m][l]
                                : std::nan(""));
            values.push_back(std::move(row));
          }
          const std::string name = base + "_heatmap.svg";
          write_text_file(out_dir + "/" + name,
                          heatmap("target accuracy", row_labels, col_labels,
                                  values, "M", "lambda"));
          sweeps_md << "![heatmap](" << name << ")\n\n";
        } else if (std::filesystem::exists(dir + "/sweep_plot.svg")) {
          const std::string name = base + "_sweep.svg";
          write_text_file(out_dir + "/" + name,
                          read_text_file(dir + "/sweep_plot.svg"));
          sweeps_md << "![sweep](" << name << ")\n\n";
        }
        ++n_sweeps;
      } catch (const std::exception& e) {
        errors_md << "- " << dir << "/sweep_summary.csv: " << e.what() << "\n";
        ++n_errors;
      }
      continue;
    }

    errors_md << "- " << dir << ": no report.json or sweep_summary.csv\n";
    ++n_errors;
  }

  std::ostringstream md;
  md << "# Experiment report\n\n";
  if (n_runs > 0) md << "## Runs\n\n" << runs_md.str();
  if (n_sweeps > 0) md << "## Sweeps\n\n" << sweeps_md.str();
  if (n_errors > 0) md << "## Errors\n\n" << errors_md.str() << "\n";
  const std::string text = md.str();
  write_text_file(out_dir + "/report.md", text);
  return text;
}


}  // namespace mad
