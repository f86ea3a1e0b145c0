#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "epibench/csv.hpp"
#include "epibench/rolling.hpp"

// Task bundles: the information set handed to an out-of-process forecaster for one round.
//
//   round_NNN/manifest.json    round index, horizons (config and active), eval origins, lookback, frequency, window bounds
//   round_NNN/train_panel.csv  date,region,value rows of the training window (nothing after its end)
//   round_NNN/inputs.csv       origin,date,region,value lookback rows per eval origin (nothing after the origin)
//   round_NNN/targets.csv      origin,horizon,region,target_date,calendar_indicator rows to forecast
//   round_NNN/adjacency.csv    src,dst,weight
//   round_NNN/population.csv   region,population
//
// Forecasts come back as origin,horizon,region,prediction rows and are scored with score_external.
namespace epibench {

namespace detail {

inline std::string round_dir_name(int r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "round_%03d", r);
    return buf;
}

inline bool directory_nonempty(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir) && std::filesystem::is_directory(dir) &&
           std::filesystem::directory_iterator(dir) != std::filesystem::directory_iterator();
}

} // namespace detail

struct LeakageReport {
    std::string bundle;
    std::string latest_train_date;
    std::string window_end;
    bool inputs_ok = true;
    bool ok = true;
};

/// Re-reads a bundle and verifies that training rows end at the window end and that every input row is
/// dated no later than its origin.
inline LeakageReport check_bundle_leakage(const std::filesystem::path& bundle) {
    LeakageReport rep;
    rep.bundle = bundle.string();
    const auto manifest = nlohmann::json::parse(csv::read_text(bundle / "manifest.json"));
    const auto window_end = Date::parse(manifest.at("train_window").at(1).get<std::string>());
    rep.window_end = window_end.iso();
    const auto train = csv::read(bundle / "train_panel.csv", {"date", "region", "value"});
    Date latest = Date::from_serial(std::numeric_limits<long>::min() / 2);
    for (const auto& row : train.rows) {
        latest = std::max(latest, Date::parse(row.fields[0]));
    }
    rep.latest_train_date = train.rows.empty() ? "" : latest.iso();
    rep.ok = train.rows.empty() || latest <= window_end;
    const auto inputs = csv::read(bundle / "inputs.csv", {"origin", "date", "region", "value"});
    for (const auto& row : inputs.rows) {
        if (Date::parse(row.fields[1]) > Date::parse(row.fields[0])) {
            rep.inputs_ok = false;
        }
    }
    rep.ok = rep.ok && rep.inputs_ok;
    return rep;
}

/// Writes one bundle per round under `out_dir`. A nonempty `out_dir` is refused unless `force`, in which
/// case previous bundles are replaced. Returns the bundle directories.
inline std::vector<std::filesystem::path> export_tasks(const RunConfig& cfg, const RunInputs& in,
                                                       const std::filesystem::path& out_dir, bool force) {
    namespace fs = std::filesystem;
    if (detail::directory_nonempty(out_dir)) {
        if (!force) {
            throw ValidationError("output directory " + out_dir.string() + " is not empty (use --force to overwrite)");
        }
        for (const auto& entry : fs::directory_iterator(out_dir)) {
            const auto name = entry.path().filename().string();
            if (name.rfind("round_", 0) == 0 || name == "tasks.json") {
                fs::remove_all(entry.path());
            }
        }
    }
    const auto& panel = in.panel;
    const auto horizons = cfg.effective_horizons();
    const auto plans = plan_rounds(panel, cfg.plan, horizons);
    const auto L = cfg.plan.lookback;
    std::vector<fs::path> dirs;
    const std::string adjacency_text =
        in.adjacency ? adjacency_csv(*in.adjacency, panel.regions()) : std::string("src,dst,weight\n");
    const std::string population_text =
        in.population ? population_csv(*in.population, panel.regions()) : std::string("region,population\n");
    for (const auto& plan : plans) {
        const fs::path dir = out_dir / detail::round_dir_name(plan.round_index);
        const auto window_end_date = panel.dates()[static_cast<std::size_t>(plan.window_end)];

        const auto train = panel.slice(plan.window_begin, plan.window_end);
        if (train.dates().back() > window_end_date) {
            throw RuntimeFailure("leakage: training slice extends past the window end");
        }

        std::string inputs = "origin,date,region,value\n";
        for (auto o : plan.eval_origins) {
            const auto od = panel.dates()[static_cast<std::size_t>(o)];
            for (auto t = std::max<Eigen::Index>(0, o - L + 1); t <= o; ++t) {
                const auto d = panel.dates()[static_cast<std::size_t>(t)];
                if (d > od) {
                    throw RuntimeFailure("leakage: input row after its origin");
                }
                for (Eigen::Index j = 0; j < panel.num_regions(); ++j) {
                    if (!panel.missing_mask()(t, j)) {
                        inputs += od.iso() + "," + d.iso() + "," + panel.regions()[static_cast<std::size_t>(j)] +
                                  "," + csv::format(panel.values()(t, j)) + "\n";
                    }
                }
            }
        }

        std::string targets = "origin,horizon,region,target_date,calendar_indicator\n";
        nlohmann::json horizon_eval = nlohmann::json::object();
        for (const auto& hp : plan.horizons) {
            std::vector<std::string> od;
            for (auto o : hp.eval_origins) {
                const auto origin = panel.dates()[static_cast<std::size_t>(o)];
                const auto target = panel.date_after(o, hp.horizon);
                od.push_back(origin.iso());
                for (const auto& region : panel.regions()) {
                    targets += origin.iso() + "," + std::to_string(hp.horizon) + "," + region + "," + target.iso() +
                               "," + std::to_string(calendar_indicator(target, panel.frequency())) + "\n";
                }
            }
            horizon_eval[std::to_string(hp.horizon)] = od;
        }
        std::vector<std::string> eval_dates;
        for (auto o : plan.eval_origins) {
            eval_dates.push_back(panel.dates()[static_cast<std::size_t>(o)].iso());
        }
        std::vector<int> round_horizons;
        for (const auto& hp : plan.horizons) {
            round_horizons.push_back(hp.horizon);
        }
        const nlohmann::json manifest{
            {"dataset", cfg.dataset_id},
            {"round", plan.round_index},
            {"horizons", horizons},
            {"active_horizons", round_horizons},
            {"eval_origins", eval_dates},
            {"eval_origins_by_horizon", horizon_eval},
            {"lookback", L},
            {"frequency", to_string(panel.frequency())},
            {"train_window", {panel.dates()[static_cast<std::size_t>(plan.window_begin)].iso(), window_end_date.iso()}},
            {"train_fraction", cfg.plan.train_fraction},
            {"seed", derive_seed({cfg.seed, static_cast<std::uint64_t>(plan.round_index)})},
            {"regions", panel.regions()},
            {"files",
             {{"train_panel", "train_panel.csv"},
              {"inputs", "inputs.csv"},
              {"targets", "targets.csv"},
              {"adjacency", "adjacency.csv"},
              {"population", "population.csv"}}},
        };
        csv::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
        csv::write_text(dir / "train_panel.csv", panel_csv(train));
        csv::write_text(dir / "inputs.csv", inputs);
        csv::write_text(dir / "targets.csv", targets);
        csv::write_text(dir / "adjacency.csv", adjacency_text);
        csv::write_text(dir / "population.csv", population_text);
        const auto rep = check_bundle_leakage(dir);
        if (!rep.ok) {
            throw RuntimeFailure("leakage check failed for " + dir.string());
        }
        dirs.push_back(dir);
    }
    const nlohmann::json index{{"dataset", cfg.dataset_id},
                               {"rounds", plans.size()},
                               {"horizons", horizons},
                               {"lookback", L},
                               {"frequency", to_string(panel.frequency())}};
    csv::write_text(out_dir / "tasks.json", index.dump(2) + "\n");
    return dirs;
}

} // namespace epibench
