#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "grn/error.hpp"
#include "grn/train.hpp"

namespace grn::report {

namespace fs = std::filesystem;

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot read " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double to_double(const std::string& s, const fs::path& p) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError(p.string() + ": not a number: '" + s + "'");
  }
}

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

inline std::vector<EpochStats> read_curves_csv(const fs::path& p) {
  const auto rows = detail::read_csv(p);
  if (rows.empty() || rows[0].size() != 5 || rows[0][0] != "epoch")
    throw FormatError(p.string() + ": missing curves header");
  std::vector<EpochStats> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 5) throw FormatError(p.string() + ": row " + std::to_string(r) + " has wrong arity");
    EpochStats e;
    e.epoch = static_cast<std::size_t>(detail::to_double(rows[r][0], p));
    e.train_loss = detail::to_double(rows[r][1], p);
    e.val_loss = detail::to_double(rows[r][2], p);
    e.train_acc = detail::to_double(rows[r][3], p);
    e.val_acc = detail::to_double(rows[r][4], p);
    out.push_back(e);
  }
  if (out.empty()) throw FormatError(p.string() + ": no epochs");
  return out;
}

inline Confusion read_confusion_csv(const fs::path& p) {
  const auto rows = detail::read_csv(p);
  if (rows.size() < 2) throw FormatError(p.string() + ": empty confusion matrix");
  const std::size_t L = rows[0].size() - 1;
  if (rows.size() != L + 1) throw FormatError(p.string() + ": confusion matrix is not square");
  Confusion c(L);
  for (std::size_t t = 0; t < L; ++t) {
    if (rows[t + 1].size() != L + 1) throw FormatError(p.string() + ": row " + std::to_string(t + 1) + " has wrong arity");
    for (std::size_t q = 0; q < L; ++q) {
      const double v = detail::to_double(rows[t + 1][q + 1], p);
      if (v < 0 || v != std::floor(v)) throw FormatError(p.string() + ": non-integer count '" + rows[t + 1][q + 1] + "'");
      c.counts[t * L + q] = static_cast<std::size_t>(v);
    }
  }
  return c;
}

struct Series {
  std::string name;
  std::vector<double> y;
};

// Line chart: one <polyline> per series, x = epoch index.
inline std::string line_chart_svg(const std::string& title, const std::string& ylabel, const std::vector<double>& x,
                                  const std::vector<Series>& series) {
  constexpr double W = 480, H = 320, left = 60, right = 120, top = 30, bottom = 50;
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for (const auto& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) ymin = std::min(ymin, v), ymax = std::max(ymax, v);
  if (!std::isfinite(ymin)) ymin = 0, ymax = 1;
  if (ymax - ymin < 1e-12) ymin -= 0.5, ymax += 0.5;
  const double xmin = x.empty() ? 0 : x.front(), xmax = x.size() > 1 ? x.back() : xmin + 1;
  auto px = [&](double v) { return left + (v - xmin) / (xmax - xmin) * (W - left - right); };
  auto py = [&](double v) { return H - bottom - (v - ymin) / (ymax - ymin) * (H - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  o << "<title>" << detail::esc(title) << "</title>\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << detail::esc(title)
    << "</text>\n";
  o << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\""
    << H - bottom << "\" stroke=\"black\"/>\n";
  o << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<text class=\"axis-label\" x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\" font-size=\"12\">epoch</text>\n";
  o << "<text class=\"axis-label\" x=\"16\" y=\"" << (top + H - bottom) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
    << (top + H - bottom) / 2 << ")\">" << detail::esc(ylabel) << "</text>\n";
  for (double t : {ymin, ymax})
    o << "<text x=\"" << left - 4 << "\" y=\"" << detail::num(py(t) + 4) << "\" text-anchor=\"end\" font-size=\"10\">"
      << fmt_num(t) << "</text>\n";
  for (double t : {xmin, xmax})
    o << "<text x=\"" << detail::num(px(t)) << "\" y=\"" << H - bottom + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
      << fmt_num(t) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 4];
    o << "<polyline class=\"series\" data-series=\"" << detail::esc(series[s].name) << "\" fill=\"none\" stroke=\""
      << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].y.size() && i < x.size(); ++i) {
      if (!std::isfinite(series[s].y[i])) continue;
      o << (i ? " " : "") << detail::num(px(x[i])) << ',' << detail::num(py(series[s].y[i]));
    }
    o << "\"/>\n";
    const double ly = top + 16.0 * static_cast<double>(s);
    o << "<line x1=\"" << W - right + 8 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 24 << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\"/>\n";
    o << "<text class=\"legend\" x=\"" << W - right + 28 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">"
      << detail::esc(series[s].name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string loss_curves_svg(const std::vector<EpochStats>& curves, const std::string& title) {
  std::vector<double> x;
  Series tr{"train_loss", {}}, va{"val_loss", {}};
  for (const auto& e : curves) {
    x.push_back(static_cast<double>(e.epoch));
    tr.y.push_back(e.train_loss);
    va.y.push_back(e.val_loss);
  }
  return line_chart_svg(title, "loss", x, {tr, va});
}

inline std::string accuracy_curves_svg(const std::vector<EpochStats>& curves, const std::string& title) {
  std::vector<double> x;
  Series tr{"train_acc", {}}, va{"val_acc", {}};
  for (const auto& e : curves) {
    x.push_back(static_cast<double>(e.epoch));
    tr.y.push_back(e.train_acc);
    va.y.push_back(e.val_acc);
  }
  return line_chart_svg(title, "accuracy", x, {tr, va});
}

// Heatmap shaded by row-normalized count; each cell is annotated with its raw count.
inline std::string confusion_svg(const Confusion& c, const std::string& title) {
  const double cell = 56, left = 80, top = 50;
  const double L = static_cast<double>(c.n_classes);
  const double W = left + cell * L + 20, H = top + cell * L + 40;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  o << "<title>" << detail::esc(title) << "</title>\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << detail::esc(title)
    << "</text>\n";
  o << "<text class=\"axis-label\" x=\"" << left + cell * L / 2 << "\" y=\"38\" text-anchor=\"middle\" font-size=\"12\">predicted</text>\n";
  o << "<text class=\"axis-label\" x=\"20\" y=\"" << top + cell * L / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 20 "
    << top + cell * L / 2 << ")\">true</text>\n";
  for (std::size_t t = 0; t < c.n_classes; ++t) {
    const double rs = static_cast<double>(c.row_sum(t));
    o << "<text x=\"" << left - 6 << "\" y=\"" << top + cell * (static_cast<double>(t) + 0.5) + 4
      << "\" text-anchor=\"end\" font-size=\"11\">" << t << "</text>\n";
    for (std::size_t p = 0; p < c.n_classes; ++p) {
      const auto n = c.at(t, p);
      const double frac = rs > 0 ? static_cast<double>(n) / rs : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - 0.8 * frac)));
      const double x = left + cell * static_cast<double>(p), y = top + cell * static_cast<double>(t);
      o << "<rect class=\"cell\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
        << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"#888\"/>\n";
      o << "<text class=\"count\" data-true=\"" << t << "\" data-pred=\"" << p << "\" x=\"" << x + cell / 2
        << "\" y=\"" << y + cell / 2 + 5 << "\" text-anchor=\"middle\" font-size=\"14\">" << n << "</text>\n";
    }
  }
  for (std::size_t p = 0; p < c.n_classes; ++p)
    o << "<text x=\"" << left + cell * (static_cast<double>(p) + 0.5) << "\" y=\"" << top + cell * L + 16
      << "\" text-anchor=\"middle\" font-size=\"11\">" << p << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

// Converts every fold_<k>_curves.csv / fold_<k>_confusion.csv pair in
// `results_dir` into SVGs under `out_dir`. Nothing is written unless every
// input parses. Returns the written paths.
inline std::vector<fs::path> generate_report(const fs::path& results_dir, const fs::path& out_dir) {
  if (!fs::is_directory(results_dir)) throw FormatError("results directory '" + results_dir.string() + "' does not exist");
  std::map<std::size_t, std::pair<bool, bool>> folds;  // curves present, confusion present
  for (const auto& entry : fs::directory_iterator(results_dir)) {
    const auto name = entry.path().filename().string();
    std::size_t k = 0;
    char tail[32] = {};
    if (std::sscanf(name.c_str(), "fold_%zu_%31s", &k, tail) != 2) continue;
    if (std::string(tail) == "curves.csv") folds[k].first = true;
    if (std::string(tail) == "confusion.csv") folds[k].second = true;
  }
  if (folds.empty())
    throw FormatError("no result CSVs in '" + results_dir.string() +
                      "': expected fold_<k>_curves.csv and fold_<k>_confusion.csv");
  std::vector<std::string> missing;
  for (const auto& [k, have] : folds) {
    if (!have.first) missing.push_back("fold_" + std::to_string(k) + "_curves.csv");
    if (!have.second) missing.push_back("fold_" + std::to_string(k) + "_confusion.csv");
  }
  if (!missing.empty()) {
    std::string msg = "missing result files in '" + results_dir.string() + "':";
    for (const auto& m : missing) msg += " " + m;
    throw FormatError(msg);
  }

  std::vector<std::pair<fs::path, std::string>> pending;
  for (const auto& [k, have] : folds) {
    const auto stem = "fold_" + std::to_string(k);
    const auto curves = read_curves_csv(results_dir / (stem + "_curves.csv"));
    const auto conf = read_confusion_csv(results_dir / (stem + "_confusion.csv"));
    pending.emplace_back(out_dir / (stem + "_loss.svg"), loss_curves_svg(curves, "Fold " + std::to_string(k) + " loss"));
    pending.emplace_back(out_dir / (stem + "_accuracy.svg"),
                         accuracy_curves_svg(curves, "Fold " + std::to_string(k) + " accuracy"));
    pending.emplace_back(out_dir / (stem + "_confusion.svg"),
                         confusion_svg(conf, "Fold " + std::to_string(k) + " confusion"));
  }
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& [path, body] : pending) {
    std::ofstream out(path, std::ios::binary);
    if (!(out << body)) throw FormatError("cannot write " + path.string());
    written.push_back(path);
  }
  return written;
}

}  // namespace grn::report
