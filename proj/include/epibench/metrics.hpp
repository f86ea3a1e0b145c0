#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "epibench/dates.hpp"
#include "epibench/error.hpp"
#include "epibench/rng.hpp"

namespace epibench {

/// One (origin, horizon, region) prediction with its truth and the persistence reference.
struct ForecastRecord {
    Date origin;
    int horizon = 1;
    std::string region;
    double prediction = 0.0;
    double truth = 0.0;
    double naive_reference = 0.0;
    Date target; // origin + horizon native steps

    double error() const { return prediction - truth; }
};

struct MetricSet {
    double mse = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    double med_ae = 0.0;
    double med_se = 0.0;
    std::size_t count = 0;
};

struct FilterMask {
    std::vector<bool> keep;
    double q1 = 0.0;
    double q3 = 0.0;
    double lower_fence = 0.0;
    double upper_fence = 0.0;
    double c = 1.5;

    std::size_t kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }
};

struct IntervalEstimate {
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    int replicates = 0;
    std::uint64_t seed = 0;
};

/// Linear interpolation between order statistics, quantile q at position q * (N - 1).
inline double quantile_sorted(std::span<const double> sorted, double q) {
    detail::require(!sorted.empty(), "quantile of empty data");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return quantile_sorted(v, 0.5);
}

namespace detail {

inline void require_records(std::span<const ForecastRecord> records) {
    if (records.empty()) {
        throw ValidationError("no records");
    }
}

} // namespace detail

inline MetricSet point_metrics(std::span<const ForecastRecord> records) {
    detail::require_records(records);
    std::vector<double> abs_err;
    std::vector<double> sq_err;
    abs_err.reserve(records.size());
    sq_err.reserve(records.size());
    double sum_abs = 0.0;
    double sum_sq = 0.0;
    for (const auto& r : records) {
        const double e = r.error();
        abs_err.push_back(std::abs(e));
        sq_err.push_back(e * e);
        sum_abs += std::abs(e);
        sum_sq += e * e;
    }
    const auto n = static_cast<double>(records.size());
    MetricSet m;
    m.count = records.size();
    m.mse = sum_sq / n;
    m.mae = sum_abs / n;
    m.rmse = std::sqrt(m.mse);
    m.med_ae = median_of(std::move(abs_err));
    m.med_se = median_of(std::move(sq_err));
    return m;
}

/// keep = (truth != 0) and truth inside [q1 - c*IQR, q3 + c*IQR]. c may be +inf (zero removal only).
inline FilterMask build_filter_mask(std::span<const double> truths, double c) {
    detail::require(!truths.empty(), "filter mask needs at least one value");
    detail::require(c >= 0.0, "filter threshold c must be >= 0");
    std::vector<double> sorted(truths.begin(), truths.end());
    std::sort(sorted.begin(), sorted.end());
    FilterMask m;
    m.c = c;
    m.q1 = quantile_sorted(sorted, 0.25);
    m.q3 = quantile_sorted(sorted, 0.75);
    const double iqr = m.q3 - m.q1;
    if (std::isinf(c)) {
        m.lower_fence = -std::numeric_limits<double>::infinity();
        m.upper_fence = std::numeric_limits<double>::infinity();
    } else {
        m.lower_fence = m.q1 - c * iqr;
        m.upper_fence = m.q3 + c * iqr;
    }
    m.keep.reserve(truths.size());
    for (double y : truths) {
        m.keep.push_back(y != 0.0 && y >= m.lower_fence && y <= m.upper_fence);
    }
    return m;
}

inline FilterMask build_filter_mask(std::span<const ForecastRecord> records, double c) {
    std::vector<double> truths;
    truths.reserve(records.size());
    for (const auto& r : records) {
        truths.push_back(r.truth);
    }
    return build_filter_mask(truths, c);
}

inline std::vector<ForecastRecord> apply_mask(std::span<const ForecastRecord> records, const FilterMask& mask) {
    detail::require(mask.keep.size() == records.size(), "filter mask length does not match records");
    std::vector<ForecastRecord> kept;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (mask.keep[i]) {
            kept.push_back(records[i]);
        }
    }
    return kept;
}

inline MetricSet filtered_metrics(std::span<const ForecastRecord> records, const FilterMask& mask) {
    auto kept = apply_mask(records, mask);
    if (kept.empty()) {
        throw ValidationError("empty after filtering");
    }
    return point_metrics(kept);
}

/// Fraction of records strictly closer to the truth than the persistence reference; ties lose.
inline double win_rate(std::span<const ForecastRecord> records) {
    detail::require_records(records);
    std::size_t wins = 0;
    for (const auto& r : records) {
        if (std::abs(r.prediction - r.truth) < std::abs(r.naive_reference - r.truth)) {
            ++wins;
        }
    }
    return static_cast<double>(wins) / static_cast<double>(records.size());
}

/// Negative values mean under-prediction.
inline double mean_signed_error(std::span<const ForecastRecord> records) {
    detail::require_records(records);
    double s = 0.0;
    for (const auto& r : records) {
        s += r.error();
    }
    return s / static_cast<double>(records.size());
}

/// Pooled model RMSE over pooled persistence RMSE on the same records. 0/0 is reported as NaN.
inline double relative_rmse(std::span<const ForecastRecord> records) {
    detail::require_records(records);
    double model = 0.0;
    double naive = 0.0;
    for (const auto& r : records) {
        model += (r.prediction - r.truth) * (r.prediction - r.truth);
        naive += (r.naive_reference - r.truth) * (r.naive_reference - r.truth);
    }
    return std::sqrt(model / static_cast<double>(records.size())) /
           std::sqrt(naive / static_cast<double>(records.size()));
}

enum class Statistic { mse, mae, rmse, med_ae, med_se, win_rate, mean_signed_error, relative_rmse };

inline Statistic parse_statistic(std::string_view s) {
    static const std::map<std::string_view, Statistic> names{
        {"mse", Statistic::mse},
        {"mae", Statistic::mae},
        {"rmse", Statistic::rmse},
        {"med_ae", Statistic::med_ae},
        {"med_se", Statistic::med_se},
        {"win_rate", Statistic::win_rate},
        {"mean_signed_error", Statistic::mean_signed_error},
        {"relative_rmse", Statistic::relative_rmse},
    };
    auto it = names.find(s);
    if (it == names.end()) {
        throw ValidationError("unknown statistic '" + std::string(s) + "'");
    }
    return it->second;
}

inline std::string to_string(Statistic s) {
    switch (s) {
    case Statistic::mse: return "mse";
    case Statistic::mae: return "mae";
    case Statistic::rmse: return "rmse";
    case Statistic::med_ae: return "med_ae";
    case Statistic::med_se: return "med_se";
    case Statistic::win_rate: return "win_rate";
    case Statistic::mean_signed_error: return "mean_signed_error";
    case Statistic::relative_rmse: return "relative_rmse";
    }
    return "?";
}

inline double evaluate(Statistic s, std::span<const ForecastRecord> records) {
    switch (s) {
    case Statistic::win_rate: return win_rate(records);
    case Statistic::mean_signed_error: return mean_signed_error(records);
    case Statistic::relative_rmse: return relative_rmse(records);
    default: break;
    }
    const auto m = point_metrics(records);
    switch (s) {
    case Statistic::mse: return m.mse;
    case Statistic::mae: return m.mae;
    case Statistic::rmse: return m.rmse;
    case Statistic::med_ae: return m.med_ae;
    default: return m.med_se;
    }
}

/// Month-block percentile bootstrap. Blocks are calendar months of the target date; each replicate
/// redraws as many blocks as exist, with replacement, from a substream seeded by (seed, replicate).
inline IntervalEstimate bootstrap_by_month(std::span<const ForecastRecord> records, Statistic statistic, int replicates,
                                           std::uint64_t seed) {
    detail::require_records(records);
    detail::require(replicates >= 100, "bootstrap needs at least 100 replicates");
    std::map<long, std::vector<ForecastRecord>> by_month;
    for (const auto& r : records) {
        by_month[r.target.month_key()].push_back(r);
    }
    if (by_month.size() < 2) {
        throw ValidationError("insufficient blocks: bootstrap needs at least 2 distinct months, found " +
                              std::to_string(by_month.size()));
    }
    std::vector<const std::vector<ForecastRecord>*> blocks;
    for (const auto& [key, block] : by_month) {
        blocks.push_back(&block);
    }
    IntervalEstimate out;
    out.point = evaluate(statistic, records);
    out.replicates = replicates;
    out.seed = seed;

    std::vector<double> stats;
    stats.reserve(static_cast<std::size_t>(replicates));
    std::vector<ForecastRecord> resample;
    resample.reserve(records.size() * 2);
    for (int b = 0; b < replicates; ++b) {
        std::mt19937_64 gen(derive_seed({seed, static_cast<std::uint64_t>(b)}));
        resample.clear();
        for (std::size_t k = 0; k < blocks.size(); ++k) {
            // Plain modulo keeps the draw independent of the standard library's distribution code.
            const auto pick = static_cast<std::size_t>(gen() % blocks.size());
            resample.insert(resample.end(), blocks[pick]->begin(), blocks[pick]->end());
        }
        stats.push_back(evaluate(statistic, resample));
    }
    std::sort(stats.begin(), stats.end());
    out.lower = std::min(quantile_sorted(stats, 0.025), out.point);
    out.upper = std::max(quantile_sorted(stats, 0.975), out.point);
    return out;
}

/// Fixed-effect inverse-variance pooling; sigma_h = half-width / 1.96, floored at 1e-9.
inline IntervalEstimate meta_across_horizons(std::span<const IntervalEstimate> per_horizon) {
    detail::require(!per_horizon.empty(), "meta-analysis needs at least one horizon");
    if (per_horizon.size() == 1) {
        return per_horizon.front();
    }
    constexpr double z = 1.96;
    constexpr double sigma_floor = 1e-9;
    double sum_w = 0.0;
    double sum_wp = 0.0;
    int replicates = per_horizon.front().replicates;
    for (const auto& e : per_horizon) {
        const double sigma = std::max((e.upper - e.lower) / 2.0 / z, sigma_floor);
        const double w = 1.0 / (sigma * sigma);
        sum_w += w;
        sum_wp += w * e.point;
        replicates = std::min(replicates, e.replicates);
    }
    IntervalEstimate out;
    out.point = sum_wp / sum_w;
    const double pooled_sigma = std::sqrt(1.0 / sum_w);
    out.lower = out.point - z * pooled_sigma;
    out.upper = out.point + z * pooled_sigma;
    out.replicates = replicates;
    out.seed = per_horizon.front().seed;
    return out;
}

} // namespace epibench
