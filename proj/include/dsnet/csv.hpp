#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dsnet/common.hpp"

namespace dsnet {

/// Plain comma-separated table with a header row. Cells are kept as strings;
/// numeric conversion happens at the point of use with row/column context.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return static_cast<int>(j);
        return -1;
    }

    int require_column(const std::string& name) const {
        const int j = column(name);
        if (j < 0) throw validation_error("csv: missing column '" + name + "'");
        return j;
    }

    double numeric(std::size_t row, int col) const {
        const std::string& cell = rows[row][static_cast<std::size_t>(col)];
        try {
            std::size_t pos = 0;
            const double v = std::stod(cell, &pos);
            if (pos != cell.size()) throw std::invalid_argument(cell);
            return v;
        } catch (const std::exception&) {
            throw validation_error("csv: non-numeric value '" + cell + "' in column '" +
                                   header[static_cast<std::size_t>(col)] + "', data row " +
                                   std::to_string(row + 1));
        }
    }

    Vec numeric_column(int col) const {
        Vec v(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) v(static_cast<Eigen::Index>(i)) = numeric(i, col);
        return v;
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline CsvTable read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw validation_error("csv: cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    bool first = true;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (first) {
            t.header = std::move(cells);
            first = false;
            continue;
        }
        if (cells.size() != t.header.size())
            throw validation_error("csv: row " + std::to_string(lineno) + " of '" + path + "' has " +
                                   std::to_string(cells.size()) + " cells, expected " +
                                   std::to_string(t.header.size()));
        t.rows.push_back(std::move(cells));
    }
    if (first) throw validation_error("csv: '" + path + "' is empty");
    return t;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_csv(const std::string& path, const CsvTable& t) {
    std::ofstream f(path);
    if (!f) throw validation_error("csv: cannot write '" + path + "'");
    for (std::size_t j = 0; j < t.header.size(); ++j) f << (j ? "," : "") << t.header[j];
    f << '\n';
    for (const auto& row : t.rows) {
        for (std::size_t j = 0; j < row.size(); ++j) f << (j ? "," : "") << row[j];
        f << '\n';
    }
}

}  // namespace dsnet
