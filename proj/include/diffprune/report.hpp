#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "diffprune/clustering.hpp"
#include "diffprune/error.hpp"

namespace diffprune {

// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ValidationError("cannot write " + path.string());
  return os;
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : os_(open_output(path)) {
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << '\n';
  }
  void row(std::size_t step, const std::vector<double>& values) {
    os_ << step;
    for (double v : values) os_ << ',' << fmt(v);
    os_ << '\n';
  }

 private:
  std::ofstream os_;
};

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("missing artifact: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ValidationError(where + ": bad number '" + s + "'");
  return v;
}

// Header "t,<grid...>", then one row per grid point.
inline void write_alignment_csv(const std::filesystem::path& path, const AlignmentMatrix& a) {
  std::vector<std::string> header{"t"};
  for (int t : a.grid) header.push_back(std::to_string(t));
  CsvWriter w(path, header);
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::vector<std::string> cells{std::to_string(a.grid[i])};
    for (std::size_t j = 0; j < a.size(); ++j) cells.push_back(fmt(a.at(i, j)));
    w.row(cells);
  }
}

inline AlignmentMatrix read_alignment_csv(const std::filesystem::path& path) {
  const auto rows = read_csv(path);
  require(rows.size() >= 2, "alignment csv: no data in " + path.string());
  std::vector<int> grid;
  for (std::size_t j = 1; j < rows[0].size(); ++j) grid.push_back(static_cast<int>(parse_double(rows[0][j], path.string())));
  const std::size_t n = grid.size();
  require(rows.size() == n + 1, "alignment csv: row count mismatch in " + path.string());
  std::vector<double> scores;
  for (std::size_t i = 1; i <= n; ++i) {
    require(rows[i].size() == n + 1, "alignment csv: column count mismatch in " + path.string());
    for (std::size_t j = 1; j <= n; ++j) scores.push_back(parse_double(rows[i][j], path.string()));
  }
  return AlignmentMatrix::from_scores(std::move(grid), std::move(scores));
}

// Score -1 maps to black, +1 to white.
inline unsigned char gray_level(double score) {
  return static_cast<unsigned char>(std::lround(std::clamp((score + 1.0) * 0.5, 0.0, 1.0) * 255.0));
}

inline void write_alignment_pgm(const std::filesystem::path& path, const AlignmentMatrix& a) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << "P5\n" << a.size() << ' ' << a.size() << "\n255\n";
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a.size(); ++j) os.put(static_cast<char>(gray_level(a.at(i, j))));
  }
}

inline void write_alignment_svg(const std::filesystem::path& path, const AlignmentMatrix& a) {
  const std::size_t n = a.size();
  const double cell = std::max(2.0, 400.0 / static_cast<double>(n));
  const double margin = 50.0;
  const double side = cell * static_cast<double>(n);
  auto os = open_output(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(side + margin + 20) << "\" height=\""
     << fmt(side + margin + 20) << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<g shape-rendering=\"crispEdges\">\n";
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const int g = gray_level(a.at(i, j));
      os << "<rect x=\"" << fmt(margin + cell * static_cast<double>(j)) << "\" y=\""
         << fmt(10 + cell * static_cast<double>(i)) << "\" width=\"" << fmt(cell) << "\" height=\"" << fmt(cell)
         << "\" fill=\"rgb(" << g << ',' << g << ',' << g << ")\"/>\n";
    }
  }
  os << "</g>\n";
  const std::size_t ticks = std::min<std::size_t>(n, 10);
  for (std::size_t k = 0; k < ticks; ++k) {
    const std::size_t i = ticks == 1 ? 0 : k * (n - 1) / (ticks - 1);
    const double c = cell * (static_cast<double>(i) + 0.5);
    os << "<text x=\"" << fmt(margin - 4) << "\" y=\"" << fmt(10 + c + 3) << "\" text-anchor=\"end\">" << a.grid[i]
       << "</text>\n";
    os << "<text x=\"" << fmt(margin + c) << "\" y=\"" << fmt(side + 24) << "\" text-anchor=\"middle\">" << a.grid[i]
       << "</text>\n";
  }
  os << "<text x=\"" << fmt(margin + side / 2) << "\" y=\"" << fmt(side + 40)
     << "\" text-anchor=\"middle\">timestep s</text>\n";
  os << "<text x=\"12\" y=\"" << fmt(10 + side / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 12 "
     << fmt(10 + side / 2) << ")\">timestep t</text>\n";
  os << "</svg>\n";
}

}  // namespace diffprune
