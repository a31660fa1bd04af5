#pragma once

// Ensemble CSV files: header `p0,...,p{d-1}`, one particle per row, values
// written with 17 significant digits so they read back bit-for-bit.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "p2flow/error.hpp"
#include "p2flow/measures.hpp"

namespace p2flow {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_header(std::size_t dim) {
  std::string h;
  for (std::size_t j = 0; j < dim; ++j) {
    if (j) h += ',';
    h += 'p' + std::to_string(j);
  }
  return h;
}

inline void write_points_csv(std::ostream& os, std::size_t dim, std::span<const double> flat) {
  os << csv_header(dim) << '\n';
  for (std::size_t i = 0; i < flat.size() / dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      if (j) os << ',';
      os << format_double(flat[i * dim + j]);
    }
    os << '\n';
  }
}

inline void write_ensemble_csv(std::ostream& os, const ParticleEnsemble& mu) {
  write_points_csv(os, mu.dim(), mu.positions());
}

// Returns (dim, flat coordinates). Zero data rows is allowed (empty tagged file).
inline std::pair<std::size_t, std::vector<double>> read_points_csv(std::istream& is,
                                                                   const std::string& source) {
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorCode::io, source + ": missing CSV header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::size_t dim = 0;
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) {
      if (col != "p" + std::to_string(dim)) {
        throw Error(ErrorCode::io, source + ": unexpected header column '" + col + "'");
      }
      ++dim;
    }
  }
  if (dim == 0) throw Error(ErrorCode::io, source + ": empty CSV header");
  std::vector<double> flat;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        flat.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(ErrorCode::io, source + ": bad number '" + cell + "' on line " +
                                       std::to_string(row));
      }
      ++cols;
    }
    if (cols != dim) {
      throw Error(ErrorCode::io, source + ": line " + std::to_string(row) + " has " +
                                     std::to_string(cols) + " columns, expected " +
                                     std::to_string(dim));
    }
  }
  return {dim, std::move(flat)};
}

inline ParticleEnsemble read_ensemble_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  auto [dim, flat] = read_points_csv(in, path);
  if (flat.empty()) throw Error(ErrorCode::io, path + ": ensemble needs at least one particle");
  return ParticleEnsemble(dim, std::move(flat));
}

}  // namespace p2flow
