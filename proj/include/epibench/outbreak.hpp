#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "epibench/csv.hpp"
#include "epibench/metrics.hpp"
#include "epibench/panel.hpp"

namespace epibench {

struct OutbreakInterval {
    std::string region;
    Date start;
    Date end; // inclusive
};

enum class AnnotationSource { computed, ingested };

/// Per region, intervals are sorted and disjoint.
struct AnnotationSet {
    std::vector<OutbreakInterval> intervals;
    AnnotationSource source = AnnotationSource::computed;

    bool contains(const std::string& region, Date d) const {
        for (const auto& iv : intervals) {
            if (iv.region == region && iv.start <= d && d <= iv.end) {
                return true;
            }
        }
        return false;
    }
};

/// OLS slope of y on 0..w-1 and its two-sided p-value under the usual t test (df = w - 2).
struct SlopeTest {
    double slope = 0.0;
    double p_value = 1.0;
};

inline SlopeTest ols_slope_test(std::span<const double> y) {
    const auto w = static_cast<double>(y.size());
    double xbar = (w - 1.0) / 2.0;
    double ybar = 0.0;
    for (double v : y) {
        ybar += v;
    }
    ybar /= w;
    double sxx = 0.0;
    double sxy = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double dx = static_cast<double>(i) - xbar;
        sxx += dx * dx;
        sxy += dx * (y[i] - ybar);
    }
    SlopeTest out;
    out.slope = sxy / sxx;
    const double intercept = ybar - out.slope * xbar;
    double sse = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = y[i] - (intercept + out.slope * static_cast<double>(i));
        sse += r * r;
    }
    const double df = w - 2.0;
    const double se = std::sqrt(sse / df / sxx);
    // Exact fits: resolution-limited residuals are treated as zero.
    const double scale = std::max(1.0, std::abs(ybar));
    if (se <= 1e-12 * scale) {
        out.p_value = std::abs(out.slope) > 1e-12 * scale ? 0.0 : 1.0;
        return out;
    }
    const double t = out.slope / se;
    boost::math::students_t dist(df);
    out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    return out;
}

namespace detail {

inline void sort_and_merge(std::vector<OutbreakInterval>& ivs) {
    std::sort(ivs.begin(), ivs.end(), [](const auto& a, const auto& b) {
        return std::tie(a.region, a.start, a.end) < std::tie(b.region, b.start, b.end);
    });
    std::vector<OutbreakInterval> merged;
    for (auto& iv : ivs) {
        if (!merged.empty() && merged.back().region == iv.region && iv.start <= merged.back().end) {
            merged.back().end = std::max(merged.back().end, iv.end);
        } else {
            merged.push_back(std::move(iv));
        }
    }
    ivs = std::move(merged);
}

} // namespace detail

/// Sliding-window log-linear trend test. Timestamp t is rising when the OLS slope of log(x + 1) over the
/// trailing window ending at t is positive with p < alpha. Maximal rising runs of at least two steps
/// become intervals. This is a stand-in detector; externally computed annotations can be loaded instead.
inline AnnotationSet annotate_rising(const PanelDataset& panel, int window, double alpha) {
    detail::require(window >= 3, "annotation window must be >= 3");
    detail::require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    if (window > panel.num_times()) {
        throw ValidationError("annotation window " + std::to_string(window) + " exceeds series length " +
                              std::to_string(panel.num_times()));
    }
    AnnotationSet out;
    out.source = AnnotationSource::computed;
    const auto T = panel.num_times();
    std::vector<double> y(static_cast<std::size_t>(window));
    for (Eigen::Index j = 0; j < panel.num_regions(); ++j) {
        std::vector<bool> rising(static_cast<std::size_t>(T), false);
        for (Eigen::Index t = window - 1; t < T; ++t) {
            bool complete = true;
            for (int k = 0; k < window; ++k) {
                const Eigen::Index row = t - window + 1 + k;
                if (panel.missing_mask()(row, j)) {
                    complete = false;
                    break;
                }
                y[static_cast<std::size_t>(k)] = std::log(std::max(panel.values()(row, j), 0.0) + 1.0);
            }
            if (!complete) {
                continue;
            }
            const auto test = ols_slope_test(y);
            rising[static_cast<std::size_t>(t)] = test.slope > 0.0 && test.p_value < alpha;
        }
        Eigen::Index t = 0;
        while (t < T) {
            if (!rising[static_cast<std::size_t>(t)]) {
                ++t;
                continue;
            }
            Eigen::Index end = t;
            while (end + 1 < T && rising[static_cast<std::size_t>(end + 1)]) {
                ++end;
            }
            if (end - t + 1 >= 2) {
                out.intervals.push_back({panel.regions()[j], panel.dates()[t], panel.dates()[end]});
            }
            t = end + 1;
        }
    }
    detail::sort_and_merge(out.intervals);
    return out;
}

inline AnnotationSet load_annotations(const std::filesystem::path& path, const PanelDataset& panel) {
    const auto table = csv::read(path, {"region", "start", "end"});
    AnnotationSet out;
    out.source = AnnotationSource::ingested;
    for (const auto& row : table.rows) {
        if (!panel.region_index(row.fields[0])) {
            throw ValidationError(table.where(row) + ": unknown region '" + row.fields[0] + "'");
        }
        Date start;
        Date end;
        try {
            start = Date::parse(row.fields[1]);
            end = Date::parse(row.fields[2]);
        } catch (const ValidationError& e) {
            throw ValidationError(table.where(row) + ": " + e.what());
        }
        if (end < start) {
            throw ValidationError(table.where(row) + ": interval end " + end.iso() + " before start " + start.iso());
        }
        if (start < panel.dates().front() || end > panel.dates().back()) {
            throw ValidationError(table.where(row) + ": interval outside panel date range");
        }
        if (!panel.index_of(start) || !panel.index_of(end)) {
            throw ValidationError(table.where(row) + ": interval endpoints must lie on the panel date axis");
        }
        out.intervals.push_back({row.fields[0], start, end});
    }
    detail::sort_and_merge(out.intervals);
    return out;
}

inline std::string annotations_csv(const AnnotationSet& set) {
    std::string out = "region,start,end\n";
    for (const auto& iv : set.intervals) {
        out += iv.region + "," + iv.start.iso() + "," + iv.end.iso() + "\n";
    }
    return out;
}

struct Stratified {
    std::vector<ForecastRecord> outbreak;
    std::vector<ForecastRecord> non_outbreak;
};

/// Membership is decided by the record's target date, inclusive at both interval ends.
inline Stratified stratify(std::span<const ForecastRecord> records, const AnnotationSet& annotations) {
    std::map<std::string, std::vector<std::pair<Date, Date>>> by_region;
    for (const auto& iv : annotations.intervals) {
        by_region[iv.region].emplace_back(iv.start, iv.end);
    }
    Stratified out;
    for (const auto& r : records) {
        bool inside = false;
        if (auto it = by_region.find(r.region); it != by_region.end()) {
            for (const auto& [s, e] : it->second) {
                if (s <= r.target && r.target <= e) {
                    inside = true;
                    break;
                }
            }
        }
        (inside ? out.outbreak : out.non_outbreak).push_back(r);
    }
    return out;
}

} // namespace epibench
