#pragma once

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/panel.hpp"

// CSV ingestion and writing. Loaders validate hard (duplicate cells, ragged
// rows, bad numbers are errors with line numbers); unsorted dates are the one
// repairable defect and are sorted with a recorded warning. Missing cells are
// masked and stored as 0.0. Doubles are written with shortest round-trip
// formatting so save/load is bitwise faithful.

namespace mtp2 {

// $MTP2_DATA_DIR is the default data root: relative paths that do not exist
// locally are retried under it.
inline std::string resolve_data_path(const std::string& path) {
    namespace fs = std::filesystem;
    if (path.empty()) return path;
    fs::path p(path);
    if (p.is_absolute() || fs::exists(p)) return path;
    const char* root = std::getenv("MTP2_DATA_DIR");
    if (root && *root) {
        fs::path candidate = fs::path(root) / p;
        if (fs::exists(candidate)) return candidate.string();
    }
    return path;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    for (std::string& c : cells) {
        const auto b = c.find_first_not_of(" \t");
        const auto e = c.find_last_not_of(" \t");
        c = (b == std::string::npos) ? std::string() : c.substr(b, e - b + 1);
    }
    return cells;
}

inline double parse_double(const std::string& cell, const std::string& path, int line) {
    double value = 0.0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
        throw ParseError(path + ":" + std::to_string(line) + ": bad number '" + cell + "'");
    if (!std::isfinite(value))
        throw ParseError(path + ":" + std::to_string(line) + ": non-finite value");
    return value;
}

inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

struct WideTable {
    std::vector<std::string> row_ids;
    std::vector<std::string> col_ids;
    Matrix values;
    std::vector<std::uint8_t> missing;  // row-major, same shape
};

inline WideTable load_wide_csv(const std::string& resolved_path) {
    std::ifstream in(resolved_path);
    if (!in) throw IoError("cannot open " + resolved_path);
    std::string line;
    int line_no = 0;
    if (!std::getline(in, line))
        throw ParseError(resolved_path + ":1: empty file");
    ++line_no;
    std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 2)
        throw ParseError(resolved_path + ":1: header needs a date column and at least one series");

    WideTable tb;
    tb.col_ids.assign(header.begin() + 1, header.end());
    std::map<std::string, int> col_seen;
    for (const std::string& c : tb.col_ids) {
        if (c.empty()) throw ParseError(resolved_path + ":1: empty column id");
        if (col_seen.count(c)) throw DuplicateCell(resolved_path + ": column " + c + " repeats");
        col_seen[c] = 1;
    }

    std::vector<std::vector<double>> rows;
    std::vector<std::vector<std::uint8_t>> miss;
    std::map<std::string, int> row_seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw ParseError(resolved_path + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(header.size()) + " cells, got " +
                             std::to_string(cells.size()));
        if (cells[0].empty())
            throw ParseError(resolved_path + ":" + std::to_string(line_no) + ": empty date");
        if (row_seen.count(cells[0]))
            throw DuplicateCell(resolved_path + ":" + std::to_string(line_no) + ": date " +
                                cells[0] + " repeats");
        row_seen[cells[0]] = 1;
        tb.row_ids.push_back(cells[0]);
        std::vector<double> vals;
        std::vector<std::uint8_t> ms;
        for (std::size_t k = 1; k < cells.size(); ++k) {
            if (cells[k].empty()) {
                vals.push_back(0.0);
                ms.push_back(1);
            } else {
                vals.push_back(parse_double(cells[k], resolved_path, line_no));
                ms.push_back(0);
            }
        }
        rows.push_back(std::move(vals));
        miss.push_back(std::move(ms));
    }
    if (rows.empty()) throw EmptyPanel(resolved_path + ": no data rows");

    tb.values = Matrix(static_cast<int>(rows.size()), static_cast<int>(tb.col_ids.size()));
    tb.missing.assign(rows.size() * tb.col_ids.size(), 0);
    for (std::size_t t = 0; t < rows.size(); ++t)
        for (std::size_t i = 0; i < tb.col_ids.size(); ++i) {
            tb.values(static_cast<int>(t), static_cast<int>(i)) = rows[t][i];
            tb.missing[t * tb.col_ids.size() + i] = miss[t][i];
        }
    return tb;
}

// Sorts rows by date and columns by id in place; returns true if the row
// order had to be repaired.
inline bool normalize_axes(WideTable& tb) {
    std::vector<std::size_t> row_order(tb.row_ids.size());
    for (std::size_t i = 0; i < row_order.size(); ++i) row_order[i] = i;
    const bool rows_sorted = std::is_sorted(tb.row_ids.begin(), tb.row_ids.end());
    if (!rows_sorted)
        std::stable_sort(row_order.begin(), row_order.end(), [&](std::size_t a, std::size_t b) {
            return tb.row_ids[a] < tb.row_ids[b];
        });
    std::vector<std::size_t> col_order(tb.col_ids.size());
    for (std::size_t i = 0; i < col_order.size(); ++i) col_order[i] = i;
    std::stable_sort(col_order.begin(), col_order.end(), [&](std::size_t a, std::size_t b) {
        return tb.col_ids[a] < tb.col_ids[b];
    });

    WideTable out;
    out.values = Matrix(tb.values.rows(), tb.values.cols());
    out.missing.assign(tb.missing.size(), 0);
    for (std::size_t t = 0; t < row_order.size(); ++t) out.row_ids.push_back(tb.row_ids[row_order[t]]);
    for (std::size_t i = 0; i < col_order.size(); ++i) out.col_ids.push_back(tb.col_ids[col_order[i]]);
    const std::size_t n = tb.col_ids.size();
    for (std::size_t t = 0; t < row_order.size(); ++t)
        for (std::size_t i = 0; i < col_order.size(); ++i) {
            out.values(static_cast<int>(t), static_cast<int>(i)) =
                tb.values(static_cast<int>(row_order[t]), static_cast<int>(col_order[i]));
            out.missing[t * n + i] = tb.missing[row_order[t] * n + col_order[i]];
        }
    tb = std::move(out);
    return !rows_sorted;
}

} // namespace detail

// Wide format: header "date,<asset>,..."; one row per date; empty cells are
// missing. Long format: header "date,asset_id,return"; missing cells are
// absent rows. Dates end up strictly ascending, assets sorted by id.
inline ReturnsPanel load_returns(const std::string& path, const std::string& format = "wide",
                                 std::vector<std::string>* warnings = nullptr,
                                 bool log_returns = false) {
    const std::string resolved = resolve_data_path(path);
    detail::WideTable tb;
    if (format == "wide") {
        tb = detail::load_wide_csv(resolved);
    } else if (format == "long") {
        std::ifstream in(resolved);
        if (!in) throw IoError("cannot open " + resolved);
        std::string line;
        int line_no = 0;
        if (!std::getline(in, line)) throw ParseError(resolved + ":1: empty file");
        ++line_no;
        std::vector<std::string> header = detail::split_csv_line(line);
        if (header.size() != 3)
            throw ParseError(resolved + ":1: long format needs 3 columns (date, asset_id, return)");
        std::map<std::string, std::map<std::string, double>> cells;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty() || line == "\r") continue;
            std::vector<std::string> c = detail::split_csv_line(line);
            if (c.size() != 3)
                throw ParseError(resolved + ":" + std::to_string(line_no) + ": expected 3 cells");
            if (c[0].empty() || c[1].empty())
                throw ParseError(resolved + ":" + std::to_string(line_no) + ": empty key");
            if (cells[c[0]].count(c[1]))
                throw DuplicateCell(resolved + ":" + std::to_string(line_no) + ": (" + c[0] +
                                    ", " + c[1] + ") repeats");
            cells[c[0]][c[1]] = detail::parse_double(c[2], resolved, line_no);
        }
        if (cells.empty()) throw EmptyPanel(resolved + ": no data rows");
        std::map<std::string, int> asset_set;
        for (const auto& [date, row] : cells)
            for (const auto& [asset, v] : row) asset_set[asset] = 1;
        for (const auto& [date, row] : cells) tb.row_ids.push_back(date);
        for (const auto& [asset, one] : asset_set) tb.col_ids.push_back(asset);
        tb.values = Matrix(static_cast<int>(tb.row_ids.size()), static_cast<int>(tb.col_ids.size()));
        tb.missing.assign(tb.row_ids.size() * tb.col_ids.size(), 0);
        for (std::size_t t = 0; t < tb.row_ids.size(); ++t)
            for (std::size_t i = 0; i < tb.col_ids.size(); ++i) {
                const auto& row = cells[tb.row_ids[t]];
                const auto it = row.find(tb.col_ids[i]);
                if (it == row.end()) {
                    tb.missing[t * tb.col_ids.size() + i] = 1;
                } else {
                    tb.values(static_cast<int>(t), static_cast<int>(i)) = it->second;
                }
            }
    } else {
        throw UsageError("load_returns: unknown format '" + format + "'");
    }

    if (detail::normalize_axes(tb) && warnings)
        warnings->push_back("UnsortedDatesRepaired: " + path + " rows were re-sorted by date");

    ReturnsPanel p;
    p.dates = std::move(tb.row_ids);
    p.assets = std::move(tb.col_ids);
    p.returns = std::move(tb.values);
    bool any_missing = false;
    for (std::uint8_t m : tb.missing) any_missing |= (m != 0);
    if (any_missing) p.missing_mask = std::move(tb.missing);
    if (log_returns) {
        p.return_kind = "log";
        for (int t = 0; t < p.T(); ++t)
            for (int i = 0; i < p.N(); ++i) {
                if (p.is_missing(t, i)) continue;
                const double g = 1.0 + p.returns(t, i);
                if (g <= 0.0)
                    throw InvalidInput("load_returns: return <= -100% cannot be converted "
                                       "to a log return (" +
                                       p.dates[static_cast<std::size_t>(t)] + ", " +
                                       p.assets[static_cast<std::size_t>(i)] + ")");
                p.returns(t, i) = std::log(g);
            }
    }
    validate_panel(p, "load_returns");
    return p;
}

inline void save_panel(const ReturnsPanel& p, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "date";
    for (const std::string& a : p.assets) out << ',' << a;
    out << '\n';
    for (int t = 0; t < p.T(); ++t) {
        out << p.dates[static_cast<std::size_t>(t)];
        for (int i = 0; i < p.N(); ++i) {
            out << ',';
            if (!p.is_missing(t, i)) out << detail::format_double(p.returns(t, i));
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

// Market-cap series aligned to panel dates on demand.
struct CapsSeries {
    std::vector<std::string> dates;
    std::vector<std::string> assets;
    Matrix values;
    std::vector<std::uint8_t> missing;
    std::map<std::string, int> date_index;

    std::optional<double> cap(const std::string& date, int asset) const {
        const auto it = date_index.find(date);
        if (it == date_index.end()) return std::nullopt;
        const std::size_t flat =
            static_cast<std::size_t>(it->second) * assets.size() + static_cast<std::size_t>(asset);
        if (!missing.empty() && missing[flat]) return std::nullopt;
        return values(it->second, asset);
    }
};

inline CapsSeries load_caps(const std::string& path) {
    detail::WideTable tb = detail::load_wide_csv(resolve_data_path(path));
    detail::normalize_axes(tb);
    CapsSeries c;
    c.dates = std::move(tb.row_ids);
    c.assets = std::move(tb.col_ids);
    c.values = std::move(tb.values);
    c.missing = std::move(tb.missing);
    for (std::size_t t = 0; t < c.dates.size(); ++t)
        c.date_index[c.dates[t]] = static_cast<int>(t);
    return c;
}

inline FactorPanel load_factors(const std::string& path) {
    detail::WideTable tb = detail::load_wide_csv(resolve_data_path(path));
    detail::normalize_axes(tb);
    for (std::uint8_t m : tb.missing)
        if (m) throw InvalidInput("load_factors: factor series cannot have missing cells");
    FactorPanel f;
    f.dates = std::move(tb.row_ids);
    f.factor_ids = std::move(tb.col_ids);
    f.values = std::move(tb.values);
    return f;
}

struct RiskFreeSeries {
    std::vector<std::string> dates;
    Vector rates;  // per-day simple rate
    std::map<std::string, int> date_index;

    double rate(const std::string& date) const {
        const auto it = date_index.find(date);
        return it == date_index.end() ? 0.0 : rates[static_cast<std::size_t>(it->second)];
    }
};

inline RiskFreeSeries load_riskfree(const std::string& path) {
    detail::WideTable tb = detail::load_wide_csv(resolve_data_path(path));
    detail::normalize_axes(tb);
    if (tb.col_ids.size() != 1)
        throw ParseError(path + ": risk-free file needs exactly one rate column");
    for (std::uint8_t m : tb.missing)
        if (m) throw InvalidInput("load_riskfree: missing rate cells");
    RiskFreeSeries rf;
    rf.dates = std::move(tb.row_ids);
    rf.rates.resize(rf.dates.size());
    for (std::size_t t = 0; t < rf.dates.size(); ++t)
        rf.rates[t] = tb.values(static_cast<int>(t), 0);
    for (std::size_t t = 0; t < rf.dates.size(); ++t) rf.date_index[rf.dates[t]] = static_cast<int>(t);
    return rf;
}

// Directory bundle: returns.csv required; caps.csv, factors.csv,
// riskfree.csv picked up when present.
struct MarketDataBundle {
    ReturnsPanel returns;
    std::optional<CapsSeries> caps;
    std::optional<FactorPanel> factors;
    std::optional<RiskFreeSeries> riskfree;
    std::vector<std::string> warnings;
};

inline MarketDataBundle load_market_bundle(const std::string& dir, bool log_returns = false) {
    namespace fs = std::filesystem;
    const std::string resolved = resolve_data_path(dir);
    if (!fs::is_directory(resolved))
        throw IoError("data directory not found: " + dir);
    MarketDataBundle b;
    const fs::path root(resolved);
    if (!fs::exists(root / "returns.csv"))
        throw IoError("missing returns.csv in " + resolved);
    b.returns = load_returns((root / "returns.csv").string(), "wide", &b.warnings, log_returns);
    if (fs::exists(root / "caps.csv")) b.caps = load_caps((root / "caps.csv").string());
    if (fs::exists(root / "factors.csv")) b.factors = load_factors((root / "factors.csv").string());
    if (fs::exists(root / "riskfree.csv")) b.riskfree = load_riskfree((root / "riskfree.csv").string());
    return b;
}

inline void write_matrix_csv(const Matrix& m, const std::vector<std::string>& labels,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (std::size_t i = 0; i < labels.size(); ++i)
        out << (i ? "," : "") << labels[i];
    if (!labels.empty()) out << '\n';
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j)
            out << (j ? "," : "") << detail::format_double(m(i, j));
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

// Reads the format write_matrix_csv produces. A first row with any
// non-numeric cell is taken as the label header; labels (when present)
// populate *labels_out.
inline Matrix load_matrix_csv(const std::string& path,
                              std::vector<std::string>* labels_out = nullptr) {
    const std::string resolved = resolve_data_path(path);
    std::ifstream in(resolved);
    if (!in) throw IoError("cannot read " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        rows.push_back(detail::split_csv_line(line));
    }
    if (rows.empty()) throw ParseError(path + ": empty matrix file");

    std::size_t first_data = 0;
    std::vector<std::string> labels;
    const auto numeric = [](const std::string& cell) {
        try {
            detail::parse_double(cell, "", 0);
            return true;
        } catch (const ParseError&) {
            return false;
        }
    };
    bool header = false;
    for (const std::string& cell : rows[0])
        if (!numeric(cell)) header = true;
    if (header) {
        labels = rows[0];
        first_data = 1;
        if (rows.size() == 1) throw ParseError(path + ": header but no data rows");
    }

    const std::size_t cols = rows[first_data].size();
    Matrix m(static_cast<int>(rows.size() - first_data), static_cast<int>(cols));
    for (std::size_t r = first_data; r < rows.size(); ++r) {
        if (rows[r].size() != cols)
            throw ParseError(path + ":" + std::to_string(r + 1) + ": ragged row");
        for (std::size_t c = 0; c < cols; ++c)
            m(static_cast<int>(r - first_data), static_cast<int>(c)) =
                detail::parse_double(rows[r][c], path, static_cast<int>(r + 1));
    }
    if (!header && labels_out) labels_out->clear();
    if (header && labels_out) *labels_out = labels;
    return m;
}

} // namespace mtp2
