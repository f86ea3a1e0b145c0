#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "epibench/csv.hpp"
#include "epibench/rolling.hpp"

// Text and CSV renderings of score tables: relative-RMSE and win-rate views (horizon x stratum per run)
// and a long table for plotting.
namespace epibench {

namespace detail {

inline std::string fixed3(double v) {
    if (!std::isfinite(v)) {
        return "-";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::string pad(const std::string& s, std::size_t width, bool left = false) {
    if (s.size() >= width) {
        return s;
    }
    return left ? s + std::string(width - s.size(), ' ') : std::string(width - s.size(), ' ') + s;
}

inline std::string run_label(const ScoreTable& t) { return t.dataset + " / " + t.model + " / " + t.patches; }

inline double view_value(const ScoreRow& r, const std::string& view) {
    return view == "relative_rmse" ? r.relative_rmse : r.win_rate;
}

} // namespace detail

/// One block per run: rows are horizons, columns the strata.
inline std::string render_view_text(const std::vector<ScoreTable>& tables, const std::string& view) {
    std::string out;
    const auto& strata = strata_names();
    for (const auto& t : tables) {
        out += (view == "relative_rmse" ? "RMSE relative to naive: " : "Win rate vs naive: ") + detail::run_label(t) + "\n";
        std::string header = detail::pad("horizon", 8, true);
        for (const auto& s : strata) {
            header += "  " + detail::pad(s, 12);
        }
        out += header + "\n";
        std::set<int> horizons;
        for (const auto& r : t.rows) {
            horizons.insert(r.horizon);
        }
        for (int h : horizons) {
            std::string line = detail::pad(std::to_string(h), 8, true);
            for (const auto& s : strata) {
                const auto* r = t.find(h, s);
                line += "  " + detail::pad(r ? detail::fixed3(detail::view_value(*r, view)) : "-", 12);
            }
            out += line + "\n";
        }
        for (const auto& m : t.meta) {
            if (m.statistic == view) {
                out += detail::pad("pooled", 8, true) + "  " + m.stratum + " " + detail::fixed3(m.estimate.point) + " [" +
                       detail::fixed3(m.estimate.lower) + ", " + detail::fixed3(m.estimate.upper) + "]\n";
            }
        }
        if (t.failures > 0) {
            out += "failed fits: " + std::to_string(t.failures) + "\n";
        }
        out += "\n";
    }
    return out;
}

inline std::string render_text(const std::vector<ScoreTable>& tables) {
    return render_view_text(tables, "relative_rmse") + render_view_text(tables, "win_rate");
}

/// Wide CSV: dataset,model,patches,horizon,all,outbreak,non_outbreak,filtered.
inline std::string view_csv(const std::vector<ScoreTable>& tables, const std::string& view) {
    std::string out = "dataset,model,patches,horizon";
    for (const auto& s : strata_names()) {
        out += "," + s;
    }
    out += "\n";
    for (const auto& t : tables) {
        std::set<int> horizons;
        for (const auto& r : t.rows) {
            horizons.insert(r.horizon);
        }
        for (int h : horizons) {
            out += t.dataset + "," + t.model + "," + t.patches + "," + std::to_string(h);
            for (const auto& s : strata_names()) {
                const auto* r = t.find(h, s);
                out += "," + (r ? csv::format(detail::view_value(*r, view)) : std::string("nan"));
            }
            out += "\n";
        }
    }
    return out;
}

/// Long CSV with one value per (run, horizon, stratum, metric); pooled rows use horizon "pooled".
inline std::string long_csv(const std::vector<ScoreTable>& tables) {
    std::string out = "dataset,model,patches,horizon,stratum,metric,value,lower,upper,count\n";
    const std::string nan = "nan";
    for (const auto& t : tables) {
        auto prefix = t.dataset + "," + t.model + "," + t.patches + ",";
        for (const auto& r : t.rows) {
            const auto head = prefix + std::to_string(r.horizon) + "," + r.stratum + ",";
            auto emit = [&](const std::string& name, double v) {
                auto it = r.intervals.find(name);
                out += head + name + "," + csv::format(v) + "," +
                       (it != r.intervals.end() ? csv::format(it->second.lower) : nan) + "," +
                       (it != r.intervals.end() ? csv::format(it->second.upper) : nan) + "," +
                       std::to_string(r.count) + "\n";
            };
            if (r.metrics) {
                emit("mse", r.metrics->mse);
                emit("mae", r.metrics->mae);
                emit("rmse", r.metrics->rmse);
                emit("med_ae", r.metrics->med_ae);
                emit("med_se", r.metrics->med_se);
            }
            emit("win_rate", r.win_rate);
            emit("mean_signed_error", r.mean_signed_error);
            emit("relative_rmse", r.relative_rmse);
        }
        for (const auto& m : t.meta) {
            out += prefix + "pooled," + m.stratum + "," + m.statistic + "," + csv::format(m.estimate.point) + "," +
                   csv::format(m.estimate.lower) + "," + csv::format(m.estimate.upper) + ",\n";
        }
    }
    return out;
}

} // namespace epibench
