#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "epibench/csv.hpp"
#include "epibench/dates.hpp"
#include "epibench/error.hpp"

namespace epibench {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MissingMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Aligned (time x region) observation matrix. Missing cells hold NaN and are flagged in the mask.
class PanelDataset {
public:
    PanelDataset(std::vector<Date> dates, std::vector<std::string> regions, Matrix values, Frequency frequency,
                 MissingMask missing)
        : dates_(std::move(dates)), regions_(std::move(regions)), values_(std::move(values)), frequency_(frequency),
          missing_(std::move(missing)) {
        detail::require(!dates_.empty() && !regions_.empty(), "panel must have at least one date and one region");
        detail::require(values_.rows() == static_cast<Eigen::Index>(dates_.size()) &&
                            values_.cols() == static_cast<Eigen::Index>(regions_.size()),
                        "panel values shape does not match dates x regions");
        detail::require(missing_.rows() == values_.rows() && missing_.cols() == values_.cols(),
                        "panel missing mask shape does not match values");
        const long step = step_days(frequency_);
        for (std::size_t i = 1; i < dates_.size(); ++i) {
            if (dates_[i].serial() - dates_[i - 1].serial() != step) {
                throw ValidationError("date-step inconsistent with " + to_string(frequency_) + " frequency between " +
                                      dates_[i - 1].iso() + " and " + dates_[i].iso());
            }
        }
        for (Eigen::Index t = 0; t < values_.rows(); ++t) {
            for (Eigen::Index j = 0; j < values_.cols(); ++j) {
                if (missing_(t, j)) {
                    values_(t, j) = std::numeric_limits<double>::quiet_NaN();
                } else if (!std::isfinite(values_(t, j))) {
                    throw ValidationError("non-finite value at " + dates_[t].iso() + ", region " + regions_[j]);
                }
            }
        }
    }

    PanelDataset(std::vector<Date> dates, std::vector<std::string> regions, Matrix values, Frequency frequency)
        : PanelDataset(std::move(dates), std::move(regions), values, frequency,
                       MissingMask::Constant(values.rows(), values.cols(), false)) {}

    const std::vector<Date>& dates() const { return dates_; }
    const std::vector<std::string>& regions() const { return regions_; }
    const Matrix& values() const { return values_; }
    const MissingMask& missing_mask() const { return missing_; }
    Frequency frequency() const { return frequency_; }
    Eigen::Index num_times() const { return values_.rows(); }
    Eigen::Index num_regions() const { return values_.cols(); }
    std::size_t missing_count() const { return static_cast<std::size_t>(missing_.count()); }

    std::optional<Eigen::Index> index_of(Date d) const {
        auto it = std::lower_bound(dates_.begin(), dates_.end(), d);
        if (it == dates_.end() || *it != d) {
            return std::nullopt;
        }
        return static_cast<Eigen::Index>(it - dates_.begin());
    }

    std::optional<Eigen::Index> region_index(const std::string& r) const {
        auto it = std::find(regions_.begin(), regions_.end(), r);
        if (it == regions_.end()) {
            return std::nullopt;
        }
        return static_cast<Eigen::Index>(it - regions_.begin());
    }

    /// Date `steps` native steps after index t (may lie beyond the panel).
    Date date_after(Eigen::Index t, long steps) const { return dates_[t].plus_days(steps * step_days(frequency_)); }

    /// Rows [begin, end] inclusive as a new panel.
    PanelDataset slice(Eigen::Index begin, Eigen::Index end) const {
        detail::require(begin >= 0 && end < num_times() && begin <= end, "panel slice out of range");
        const Eigen::Index rows = end - begin + 1;
        return PanelDataset({dates_.begin() + begin, dates_.begin() + end + 1}, regions_,
                            values_.middleRows(begin, rows), frequency_, missing_.middleRows(begin, rows));
    }

private:
    std::vector<Date> dates_;
    std::vector<std::string> regions_;
    Matrix values_;
    Frequency frequency_;
    MissingMask missing_;
};

/// One forecast problem: lookback rows x_{t-L+1..t} and the target x_{t+h}.
struct Sample {
    Eigen::Index origin = 0;
    Date origin_date;
    int horizon = 1;
    Matrix history; // L x n
    Vector target;  // n
    Date target_date;
    int calendar_indicator = 1;

    Eigen::Index lookback() const { return history.rows(); }
    Eigen::Index num_regions() const { return history.cols(); }
    Vector last_observation() const { return history.row(history.rows() - 1).transpose(); }
};

struct DroppedSample {
    Eigen::Index origin = 0;
    int horizon = 1;
    std::string reason;
};

struct SampleSet {
    std::vector<Sample> samples;
    std::vector<DroppedSample> dropped;
};

struct PopulationVector {
    Vector populations;
};

inline PanelDataset load_panel(const std::filesystem::path& path, Frequency frequency) {
    const auto table = csv::read(path, {"date", "region", "value"});
    std::set<Date> date_set;
    std::set<std::string> region_set;
    struct Cell {
        Date date;
        std::string region;
        double value;
    };
    std::vector<Cell> cells;
    cells.reserve(table.rows.size());
    std::set<std::pair<Date, std::string>> seen;
    for (const auto& row : table.rows) {
        Date d;
        try {
            d = Date::parse(row.fields[0]);
        } catch (const ValidationError& e) {
            throw ValidationError(table.where(row) + ": " + e.what());
        }
        const std::string& region = row.fields[1];
        detail::require(!region.empty(), table.where(row) + ": empty region identifier");
        const double v = csv::number(table, row, 2);
        if (!std::isfinite(v)) {
            throw ValidationError(table.where(row) + ": non-finite value");
        }
        if (!seen.emplace(d, region).second) {
            throw ValidationError(table.where(row) + ": duplicate (date, region) pair (" + d.iso() + ", " + region + ")");
        }
        date_set.insert(d);
        region_set.insert(region);
        cells.push_back({d, region, v});
    }
    detail::require(!cells.empty(), table.source + ": no observations");
    std::vector<Date> dates(date_set.begin(), date_set.end());
    std::vector<std::string> regions(region_set.begin(), region_set.end());
    const long step = step_days(frequency);
    for (std::size_t i = 1; i < dates.size(); ++i) {
        if (dates[i].serial() - dates[i - 1].serial() != step) {
            throw ValidationError(table.source + ": date-step inconsistent with " + to_string(frequency) +
                                  " frequency between " + dates[i - 1].iso() + " and " + dates[i].iso());
        }
    }
    std::map<std::string, Eigen::Index> col;
    for (std::size_t j = 0; j < regions.size(); ++j) {
        col[regions[j]] = static_cast<Eigen::Index>(j);
    }
    const auto T = static_cast<Eigen::Index>(dates.size());
    const auto n = static_cast<Eigen::Index>(regions.size());
    Matrix values = Matrix::Constant(T, n, std::numeric_limits<double>::quiet_NaN());
    MissingMask missing = MissingMask::Constant(T, n, true);
    for (const auto& c : cells) {
        const auto t = static_cast<Eigen::Index>(
            (c.date.serial() - dates.front().serial()) / step);
        values(t, col[c.region]) = c.value;
        missing(t, col[c.region]) = false;
    }
    return PanelDataset(std::move(dates), std::move(regions), std::move(values), frequency, std::move(missing));
}

/// Long-format writer; missing cells are omitted so that load_panel reproduces the panel exactly.
inline std::string panel_csv(const PanelDataset& panel) {
    std::string out = "date,region,value\n";
    for (Eigen::Index t = 0; t < panel.num_times(); ++t) {
        const std::string d = panel.dates()[t].iso();
        for (Eigen::Index j = 0; j < panel.num_regions(); ++j) {
            if (panel.missing_mask()(t, j)) {
                continue;
            }
            out += d;
            out += ',';
            out += panel.regions()[j];
            out += ',';
            out += csv::format(panel.values()(t, j));
            out += '\n';
        }
    }
    return out;
}

inline void write_panel(const PanelDataset& panel, const std::filesystem::path& path) {
    csv::write_text(path, panel_csv(panel));
}

inline PopulationVector load_population(const std::filesystem::path& path, const std::vector<std::string>& regions) {
    const auto table = csv::read(path, {"region", "population"});
    Vector pop = Vector::Constant(static_cast<Eigen::Index>(regions.size()), std::numeric_limits<double>::quiet_NaN());
    for (const auto& row : table.rows) {
        auto it = std::find(regions.begin(), regions.end(), row.fields[0]);
        if (it == regions.end()) {
            throw ValidationError(table.where(row) + ": unknown region '" + row.fields[0] + "'");
        }
        const double p = csv::number(table, row, 1);
        if (!(p > 0.0) || !std::isfinite(p)) {
            throw ValidationError(table.where(row) + ": population must be strictly positive");
        }
        const auto j = it - regions.begin();
        if (!std::isnan(pop(j))) {
            throw ValidationError(table.where(row) + ": duplicate region '" + row.fields[0] + "'");
        }
        pop(j) = p;
    }
    for (std::size_t j = 0; j < regions.size(); ++j) {
        if (std::isnan(pop(static_cast<Eigen::Index>(j)))) {
            throw ValidationError(table.source + ": missing population for region '" + regions[j] + "'");
        }
    }
    return PopulationVector{std::move(pop)};
}

inline std::string population_csv(const PopulationVector& pop, const std::vector<std::string>& regions) {
    std::string out = "region,population\n";
    for (std::size_t j = 0; j < regions.size(); ++j) {
        out += regions[j] + "," + csv::format(pop.populations(static_cast<Eigen::Index>(j))) + "\n";
    }
    return out;
}

/// Builds one sample per origin. Origins out of bounds throw; windows touching missing cells are dropped
/// and reported.
inline SampleSet make_samples(const PanelDataset& panel, Eigen::Index lookback, int horizon,
                              std::span<const Eigen::Index> origins) {
    detail::require(lookback >= 1, "lookback must be >= 1");
    detail::require(horizon >= 1, "horizon must be >= 1");
    SampleSet out;
    out.samples.reserve(origins.size());
    const auto& X = panel.values();
    const auto& miss = panel.missing_mask();
    for (const auto t : origins) {
        if (t < lookback - 1 || t + horizon > panel.num_times() - 1) {
            throw ValidationError("origin " + std::to_string(t) + " violates window bounds (lookback " +
                                  std::to_string(lookback) + ", horizon " + std::to_string(horizon) + ", T " +
                                  std::to_string(panel.num_times()) + ")");
        }
        const Eigen::Index begin = t - lookback + 1;
        if (miss.middleRows(begin, lookback).any()) {
            out.dropped.push_back({t, horizon, "missing observation in lookback window"});
            continue;
        }
        if (miss.row(t + horizon).any()) {
            out.dropped.push_back({t, horizon, "missing observation at target"});
            continue;
        }
        Sample s;
        s.origin = t;
        s.origin_date = panel.dates()[t];
        s.horizon = horizon;
        s.history = X.middleRows(begin, lookback);
        s.target = X.row(t + horizon).transpose();
        s.target_date = panel.dates()[t + horizon];
        s.calendar_indicator = calendar_indicator(s.target_date, panel.frequency());
        out.samples.push_back(std::move(s));
    }
    return out;
}

/// ceil(train_fraction * n), robust to the representation error of the fraction.
inline std::size_t train_count(std::size_t n, double train_fraction) {
    return static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(n) - 1e-9));
}

/// First ceil(train_fraction * N) samples train, the remainder validates.
inline std::pair<std::vector<Sample>, std::vector<Sample>> chrono_split(std::vector<Sample> samples,
                                                                          double train_fraction) {
    detail::require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0, 1)");
    for (std::size_t i = 1; i < samples.size(); ++i) {
        detail::require(samples[i - 1].origin < samples[i].origin, "samples must be ordered by origin");
    }
    const auto n_train = train_count(samples.size(), train_fraction);
    if (n_train == 0 || n_train >= samples.size()) {
        throw ValidationError("window too short: " + std::to_string(samples.size()) +
                              " samples cannot be split into nonempty training and validation parts");
    }
    std::vector<Sample> validation(std::make_move_iterator(samples.begin() + static_cast<std::ptrdiff_t>(n_train)),
                                   std::make_move_iterator(samples.end()));
    samples.resize(n_train);
    return {std::move(samples), std::move(validation)};
}

} // namespace epibench
