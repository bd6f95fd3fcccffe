#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/matrix.hpp"

namespace mtp2 {

// T x N panel of asset returns. Dates are strictly increasing, assets sorted
// by id, and stored values are always finite: cells flagged in missing_mask
// hold 0.0 (the estimation-only fill; performance accounting never reads a
// masked cell).
struct ReturnsPanel {
    std::vector<std::string> dates;
    std::vector<std::string> assets;
    Matrix returns;                          // T x N
    std::vector<std::uint8_t> missing_mask;  // T*N row-major; empty = complete
    std::string return_kind = "simple";      // "simple" or "log"

    int T() const { return returns.rows(); }
    int N() const { return returns.cols(); }

    bool has_missing() const {
        for (std::uint8_t m : missing_mask)
            if (m) return true;
        return false;
    }

    bool is_missing(int t, int i) const {
        if (missing_mask.empty()) return false;
        return missing_mask[static_cast<std::size_t>(t) * N() + i] != 0;
    }

    void set_missing(int t, int i) {
        if (missing_mask.empty())
            missing_mask.assign(static_cast<std::size_t>(T()) * N(), 0);
        missing_mask[static_cast<std::size_t>(t) * N() + i] = 1;
    }
};

// K factor series aligned with a returns panel by date.
struct FactorPanel {
    std::vector<std::string> dates;
    std::vector<std::string> factor_ids;
    Matrix values;  // T x K

    int T() const { return values.rows(); }
    int K() const { return values.cols(); }
};

inline void validate_panel(const ReturnsPanel& p, const std::string& op) {
    if (p.T() == 0 || p.N() == 0) throw EmptyPanel(op + ": panel is empty");
    if (static_cast<int>(p.dates.size()) != p.T())
        throw DimensionMismatch(op + ": date axis does not match rows");
    if (static_cast<int>(p.assets.size()) != p.N())
        throw DimensionMismatch(op + ": asset axis does not match columns");
    if (!p.returns.all_finite())
        throw InvalidInput(op + ": panel has non-finite entries");
}

// Rows [start, end) of the panel, all assets.
inline ReturnsPanel window(const ReturnsPanel& p, int start, int end) {
    if (start < 0 || end > p.T() || start >= end)
        throw DimensionMismatch("window: range [" + std::to_string(start) + ", " +
                                std::to_string(end) + ") out of [0, " +
                                std::to_string(p.T()) + ")");
    ReturnsPanel out;
    out.assets = p.assets;
    out.return_kind = p.return_kind;
    out.dates.assign(p.dates.begin() + start, p.dates.begin() + end);
    out.returns = Matrix(end - start, p.N());
    for (int t = start; t < end; ++t)
        for (int i = 0; i < p.N(); ++i) out.returns(t - start, i) = p.returns(t, i);
    if (!p.missing_mask.empty()) {
        out.missing_mask.assign(static_cast<std::size_t>(end - start) * p.N(), 0);
        for (int t = start; t < end; ++t)
            for (int i = 0; i < p.N(); ++i)
                if (p.is_missing(t, i)) out.set_missing(t - start, i);
    }
    return out;
}

// Column subset in the given index order.
inline ReturnsPanel select_assets(const ReturnsPanel& p, const std::vector<int>& idx) {
    ReturnsPanel out;
    out.dates = p.dates;
    out.return_kind = p.return_kind;
    out.returns = Matrix(p.T(), static_cast<int>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const int i = idx[k];
        if (i < 0 || i >= p.N())
            throw DimensionMismatch("select_assets: index out of range");
        out.assets.push_back(p.assets[static_cast<std::size_t>(i)]);
        for (int t = 0; t < p.T(); ++t)
            out.returns(t, static_cast<int>(k)) = p.returns(t, i);
    }
    if (!p.missing_mask.empty()) {
        out.missing_mask.assign(static_cast<std::size_t>(p.T()) * idx.size(), 0);
        for (int t = 0; t < p.T(); ++t)
            for (std::size_t k = 0; k < idx.size(); ++k)
                if (p.is_missing(t, idx[k])) out.set_missing(t, static_cast<int>(k));
    }
    return out;
}

inline FactorPanel window(const FactorPanel& p, int start, int end) {
    if (start < 0 || end > p.T() || start >= end)
        throw DimensionMismatch("window: factor range out of bounds");
    FactorPanel out;
    out.factor_ids = p.factor_ids;
    out.dates.assign(p.dates.begin() + start, p.dates.begin() + end);
    out.values = Matrix(end - start, p.K());
    for (int t = start; t < end; ++t)
        for (int k = 0; k < p.K(); ++k) out.values(t - start, k) = p.values(t, k);
    return out;
}

} // namespace mtp2
