#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "epibench/csv.hpp"
#include "epibench/forecasters.hpp"
#include "epibench/graph.hpp"
#include "epibench/metrics.hpp"
#include "epibench/outbreak.hpp"
#include "epibench/panel.hpp"
#include "epibench/priors.hpp"
#include "epibench/rng.hpp"

namespace epibench {

// ---------------------------------------------------------------------------------------------------
// Round planning

struct HorizonPlan {
    int horizon = 1;
    Eigen::Index train_first = 0; // sample origins, inclusive
    Eigen::Index train_last = 0;
    Eigen::Index validation_first = 0;
    Eigen::Index validation_last = 0;
    std::vector<Eigen::Index> eval_origins;
};

struct RoundPlan {
    int round_index = 0;
    Eigen::Index window_begin = 0; // training window rows, inclusive
    Eigen::Index window_end = 0;
    std::vector<Eigen::Index> eval_origins; // union over horizons
    std::vector<HorizonPlan> horizons;

    const HorizonPlan* find(int h) const {
        for (const auto& hp : horizons) {
            if (hp.horizon == h) {
                return &hp;
            }
        }
        return nullptr;
    }
};

struct PlanSettings {
    Eigen::Index lookback = 12;
    Eigen::Index cadence = 8;
    Eigen::Index train_size = 100;
    double train_fraction = 0.8;
};

inline std::vector<int> default_horizons(Frequency f) {
    std::vector<int> out;
    const int hmax = f == Frequency::daily ? 28 : 4;
    for (int h = 1; h <= hmax; ++h) {
        out.push_back(h);
    }
    return out;
}

/// Rounds over a series of length T. Round r trains on rows [t0 - train_size + 1, t0] with
/// t0 = train_size - 1 + r * cadence and forecasts from origins t0 .. t0 + cadence - 1. Each horizon keeps
/// the origins whose target still lies inside the series (per-horizon headroom); rounds continue while
/// the smallest horizon has an origin left.
inline std::vector<RoundPlan> plan_rounds(Eigen::Index T, const PlanSettings& s, std::vector<int> horizons) {
    detail::require(!horizons.empty(), "at least one horizon is required");
    std::sort(horizons.begin(), horizons.end());
    detail::require(std::adjacent_find(horizons.begin(), horizons.end()) == horizons.end(), "duplicate horizon");
    detail::require(horizons.front() >= 1, "horizons must be >= 1");
    detail::require(s.lookback >= 1 && s.cadence >= 1 && s.train_size >= 1, "lookback, cadence and train_size must be >= 1");
    const int hmax = horizons.back();
    const int hmin = horizons.front();
    const Eigen::Index minimal = s.train_size + hmax;
    if (T < minimal) {
        throw ValidationError("series too short for one round: T = " + std::to_string(T) + ", minimal required T = " +
                              std::to_string(minimal) + " (train_size " + std::to_string(s.train_size) +
                              " + max horizon " + std::to_string(hmax) + ")");
    }
    std::vector<RoundPlan> plans;
    for (Eigen::Index t0 = s.train_size - 1; t0 + hmin <= T - 1; t0 += s.cadence) {
        RoundPlan rp;
        rp.round_index = static_cast<int>(plans.size());
        rp.window_begin = t0 - s.train_size + 1;
        rp.window_end = t0;
        for (int h : horizons) {
            HorizonPlan hp;
            hp.horizon = h;
            for (Eigen::Index o = t0; o < t0 + s.cadence && o + h <= T - 1; ++o) {
                hp.eval_origins.push_back(o);
            }
            if (hp.eval_origins.empty()) {
                continue;
            }
            const Eigen::Index first = rp.window_begin + s.lookback - 1;
            const Eigen::Index last = t0 - h;
            const Eigen::Index n = last - first + 1;
            const auto n_train = n > 0 ? static_cast<Eigen::Index>(train_count(static_cast<std::size_t>(n), s.train_fraction)) : 0;
            if (n <= 0 || n_train < 1 || n_train >= n) {
                throw ValidationError("window too short: horizon " + std::to_string(h) + " leaves " +
                                      std::to_string(std::max<Eigen::Index>(n, 0)) +
                                      " training samples in a window of " + std::to_string(s.train_size) +
                                      " (lookback " + std::to_string(s.lookback) + ")");
            }
            hp.train_first = first;
            hp.train_last = first + n_train - 1;
            hp.validation_first = first + n_train;
            hp.validation_last = last;
            rp.horizons.push_back(std::move(hp));
        }
        for (Eigen::Index o = t0; o < t0 + s.cadence && o + hmin <= T - 1; ++o) {
            rp.eval_origins.push_back(o);
        }
        plans.push_back(std::move(rp));
    }
    return plans;
}

inline std::vector<RoundPlan> plan_rounds(const PanelDataset& panel, const PlanSettings& s, std::vector<int> horizons) {
    if (horizons.empty()) {
        horizons = default_horizons(panel.frequency());
    }
    return plan_rounds(panel.num_times(), s, std::move(horizons));
}

namespace detail {

inline std::vector<Eigen::Index> index_range(Eigen::Index first, Eigen::Index last) {
    std::vector<Eigen::Index> out;
    for (Eigen::Index t = first; t <= last; ++t) {
        out.push_back(t);
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------------------------------
// Grid search

/// Ordered hyperparameter axes; points enumerate the cartesian product with the last axis fastest.
using Lattice = std::vector<std::pair<std::string, std::vector<double>>>;

inline std::vector<std::map<std::string, double>> lattice_points(const Lattice& grid) {
    std::vector<std::map<std::string, double>> out;
    for (const auto& [k, v] : grid) {
        detail::require(!v.empty(), "grid axis '" + k + "' has no values");
    }
    std::vector<std::size_t> idx(grid.size(), 0);
    while (true) {
        std::map<std::string, double> p;
        for (std::size_t a = 0; a < grid.size(); ++a) {
            p[grid[a].first] = grid[a].second[idx[a]];
        }
        out.push_back(std::move(p));
        std::size_t a = grid.size();
        while (a > 0) {
            --a;
            if (++idx[a] < grid[a].second.size()) {
                break;
            }
            idx[a] = 0;
            if (a == 0) {
                return out;
            }
        }
        if (grid.empty()) {
            return out;
        }
    }
}

struct TrainingSplit {
    std::vector<Sample> train;
    std::vector<Sample> validation;
    std::vector<DroppedSample> dropped;
};

inline TrainingSplit build_split(const PanelDataset& panel, const HorizonPlan& hp, Eigen::Index lookback) {
    TrainingSplit out;
    const auto tr_origins = detail::index_range(hp.train_first, hp.train_last);
    const auto va_origins = detail::index_range(hp.validation_first, hp.validation_last);
    auto tr = make_samples(panel, lookback, hp.horizon, tr_origins);
    auto va = make_samples(panel, lookback, hp.horizon, va_origins);
    out.train = std::move(tr.samples);
    out.validation = std::move(va.samples);
    out.dropped = std::move(tr.dropped);
    out.dropped.insert(out.dropped.end(), va.dropped.begin(), va.dropped.end());
    return out;
}

struct GridResult {
    ModelSpec selected;
    std::vector<std::map<std::string, double>> points;
    std::vector<double> losses; // mean validation loss over the searched horizons, +inf when training failed
    std::size_t best_index = 0;
};

/// Trains every lattice point on the first round's split and keeps the one with the lowest mean validation
/// loss over `horizons` (default: all horizons of the plan). Ties go to the earlier lattice point.
inline GridResult grid_search(const ModelSpec& spec, const Lattice& grid, const RoundPlan& first_plan,
                              const PanelDataset& panel, const ModelContext& ctx, const TrainConfig& config,
                              const PatchConfig& patches, Eigen::Index lookback, std::vector<int> horizons = {},
                              std::uint64_t seed = 0) {
    auto points = lattice_points(grid);
    detail::require(!points.empty(), "grid must be nonempty");
    GridResult out;
    out.points = points;
    out.selected = spec;
    if (points.size() == 1 && points.front().empty()) {
        out.losses = {0.0};
        return out;
    }
    if (horizons.empty()) {
        for (const auto& hp : first_plan.horizons) {
            horizons.push_back(hp.horizon);
        }
    }
    for (const auto& point : points) {
        ModelSpec candidate = spec;
        for (const auto& [k, v] : point) {
            candidate.hyperparameters[k] = v;
        }
        if (points.size() == 1) {
            out.losses.push_back(0.0);
            break;
        }
        if (!is_trainable(candidate.kind)) {
            out.losses.push_back(0.0); // nothing to tune
            continue;
        }
        double total = 0.0;
        try {
            for (int h : horizons) {
                const auto* hp = first_plan.find(h);
                detail::require(hp != nullptr, "grid horizon " + std::to_string(h) + " not in the first plan");
                candidate.horizon = h;
                auto split = build_split(panel, *hp, lookback);
                TrainConfig tc = config;
                tc.seed = derive_seed({seed, static_cast<std::uint64_t>(first_plan.round_index),
                                       static_cast<std::uint64_t>(h)});
                const auto m = train(candidate, split.train, split.validation, tc, patches, ctx);
                total += m.diagnostics.final_validation_loss * m.input_scale * m.input_scale;
            }
            total /= static_cast<double>(horizons.size());
        } catch (const RuntimeFailure&) {
            total = std::numeric_limits<double>::infinity();
        }
        out.losses.push_back(std::isfinite(total) ? total : std::numeric_limits<double>::infinity());
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.losses.size(); ++i) {
        if (out.losses[i] < out.losses[best]) {
            best = i;
        }
    }
    if (!std::isfinite(out.losses[best])) {
        std::string msg = "all grid points diverged:";
        for (std::size_t i = 0; i < points.size(); ++i) {
            msg += " [" + std::to_string(i) + "] loss=" + csv::format(out.losses[i]);
        }
        throw RuntimeFailure(msg);
    }
    out.best_index = best;
    for (const auto& [k, v] : points[best]) {
        out.selected.hyperparameters[k] = v;
    }
    return out;
}

// ---------------------------------------------------------------------------------------------------
// Run configuration

struct RunConfig {
    std::string dataset_id = "dataset";
    std::filesystem::path panel_path;
    std::filesystem::path adjacency_path;   // optional
    std::filesystem::path population_path;  // optional unless an epi-aware patch is active
    std::filesystem::path annotations_path; // optional; computed when absent
    Frequency frequency = Frequency::daily;
    ModelSpec model;
    Lattice grid;
    std::vector<int> grid_horizons;
    PatchConfig patches;
    TrainConfig training;
    std::vector<int> horizons; // empty: frequency default
    PlanSettings plan;
    std::uint64_t seed = 0;
    int annotation_window = 0; // 0: 7 daily / 4 weekly
    double annotation_alpha = 0.05;
    int bootstrap_replicates = 1000;
    std::vector<Statistic> interval_statistics{Statistic::rmse, Statistic::relative_rmse, Statistic::win_rate};
    double filter_c = 1.5;
    int workers = 1;
    std::filesystem::path output_dir = "out";

    std::vector<int> effective_horizons() const { return horizons.empty() ? default_horizons(frequency) : horizons; }
    int effective_annotation_window() const {
        return annotation_window > 0 ? annotation_window : (frequency == Frequency::daily ? 7 : 4);
    }
};

namespace detail {

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) {
        return {};
    }
    std::filesystem::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

template <typename J>
Lattice parse_lattice(const J& j) {
    Lattice grid;
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::vector<double> values;
        if (it.value().is_array()) {
            for (const auto& v : it.value()) {
                values.push_back(v.template get<double>());
            }
        } else {
            values.push_back(it.value().template get<double>());
        }
        grid.emplace_back(it.key(), std::move(values));
    }
    return grid;
}

} // namespace detail

/// Parses a run configuration document. Relative paths resolve against `base_dir`.
inline RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("run config is not valid JSON: ") + e.what());
    }
    static const std::set<std::string> known{"dataset", "model", "grid", "grid_horizons", "patches", "training",
                                             "horizons", "cadence", "train_size", "lookback", "train_fraction",
                                             "seed", "annotation", "bootstrap", "filter_c", "workers", "output_dir"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw ValidationError("run config: unknown key '" + it.key() + "'");
        }
    }
    RunConfig c;
    try {
        const auto& d = j.at("dataset");
        c.dataset_id = d.value("id", std::string("dataset"));
        c.panel_path = detail::resolve(base_dir, d.at("panel").get<std::string>());
        c.adjacency_path = detail::resolve(base_dir, d.value("adjacency", std::string()));
        c.population_path = detail::resolve(base_dir, d.value("population", std::string()));
        c.annotations_path = detail::resolve(base_dir, d.value("annotations", std::string()));
        c.frequency = parse_frequency(d.value("frequency", std::string("daily")));
        const auto& m = j.at("model");
        c.model.kind = parse_model_kind(m.at("kind").get<std::string>());
        if (m.contains("hyperparameters")) {
            for (auto it = m.at("hyperparameters").begin(); it != m.at("hyperparameters").end(); ++it) {
                c.model.hyperparameters[it.key()] = it.value().get<double>();
            }
        }
        if (j.contains("grid")) {
            c.grid = detail::parse_lattice(j.at("grid"));
        }
        if (j.contains("grid_horizons")) {
            c.grid_horizons = j.at("grid_horizons").get<std::vector<int>>();
        }
        if (j.contains("patches")) {
            c.patches = patch_config_from_json(nlohmann::json::parse(j.at("patches").dump()));
        }
        if (j.contains("training")) {
            const auto& t = j.at("training");
            c.training.epochs = t.value("epochs", c.training.epochs);
            c.training.learning_rate = t.value("learning_rate", c.training.learning_rate);
            c.training.l2 = t.value("l2", c.training.l2);
            const auto opt = t.value("optimizer", std::string("adam"));
            if (opt == "adam") {
                c.training.optimizer = Optimizer::adam;
            } else if (opt == "gd") {
                c.training.optimizer = Optimizer::gd;
            } else {
                throw ValidationError("run config: unknown optimizer '" + opt + "'");
            }
            const auto loss = t.value("loss", std::string("mse"));
            if (loss == "mse") {
                c.training.loss = LossKind::mse;
            } else if (loss == "filtered_mse") {
                c.training.loss = LossKind::filtered_mse;
            } else {
                throw ValidationError("run config: unknown loss '" + loss + "'");
            }
        }
        if (j.contains("horizons")) {
            c.horizons = j.at("horizons").get<std::vector<int>>();
        }
        c.plan.cadence = j.value("cadence", c.plan.cadence);
        c.plan.train_size = j.value("train_size", c.plan.train_size);
        c.plan.lookback = j.value("lookback", c.plan.lookback);
        c.plan.train_fraction = j.value("train_fraction", c.plan.train_fraction);
        c.seed = j.value("seed", c.seed);
        if (j.contains("annotation")) {
            c.annotation_window = j.at("annotation").value("window", 0);
            c.annotation_alpha = j.at("annotation").value("alpha", c.annotation_alpha);
        }
        if (j.contains("bootstrap")) {
            const auto& b = j.at("bootstrap");
            c.bootstrap_replicates = b.value("replicates", c.bootstrap_replicates);
            if (b.contains("statistics")) {
                c.interval_statistics.clear();
                for (const auto& s : b.at("statistics")) {
                    c.interval_statistics.push_back(parse_statistic(s.get<std::string>()));
                }
            }
        }
        c.filter_c = j.value("filter_c", c.filter_c);
        c.workers = j.value("workers", c.workers);
        c.output_dir = detail::resolve(base_dir, j.value("output_dir", std::string("out")));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("run config: ") + e.what());
    }
    c.model.validate();
    c.patches.validate();
    c.training.validate();
    detail::require(c.workers >= 1, "run config: workers must be >= 1");
    detail::require(c.bootstrap_replicates >= 100, "run config: bootstrap replicates must be >= 100");
    detail::require(c.filter_c >= 0.0, "run config: filter_c must be >= 0");
    if (c.model.kind == ModelKind::external) {
        throw ValidationError("run config: external forecasts are scored with the score command, not run");
    }
    if ((c.patches.epi || c.patches.einn) && c.population_path.empty()) {
        throw ValidationError("run config: epi-aware patches require dataset.population");
    }
    if (!c.patches.empty() && !is_trainable(c.model.kind)) {
        throw ValidationError("run config: patches apply to trainable models only (dlinear, graph_linear)");
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return parse_run_config(csv::read_text(path), base);
}

// ---------------------------------------------------------------------------------------------------
// Inputs

struct RunInputs {
    PanelDataset panel;
    std::optional<AdjacencyMatrix> adjacency;
    std::optional<MixingOperator> mixing;
    std::optional<PopulationVector> population;
    AnnotationSet annotations;
};

inline RunInputs load_inputs(const RunConfig& c) {
    auto panel = load_panel(c.panel_path, c.frequency);
    std::optional<AdjacencyMatrix> adj;
    std::optional<MixingOperator> mixing;
    if (!c.adjacency_path.empty()) {
        adj = load_adjacency(c.adjacency_path, panel.regions());
        mixing = row_normalize(*adj);
    }
    std::optional<PopulationVector> pop;
    if (!c.population_path.empty()) {
        pop = load_population(c.population_path, panel.regions());
    }
    AnnotationSet ann = c.annotations_path.empty()
                            ? annotate_rising(panel, c.effective_annotation_window(), c.annotation_alpha)
                            : load_annotations(c.annotations_path, panel);
    return {std::move(panel), std::move(adj), std::move(mixing), std::move(pop), std::move(ann)};
}

// ---------------------------------------------------------------------------------------------------
// Scoring

inline const std::vector<std::string>& strata_names() {
    static const std::vector<std::string> names{"all", "outbreak", "non_outbreak", "filtered"};
    return names;
}

struct ScoreRow {
    int horizon = 1;
    std::string stratum;
    std::size_t count = 0;
    std::optional<MetricSet> metrics;
    double win_rate = std::numeric_limits<double>::quiet_NaN();
    double mean_signed_error = std::numeric_limits<double>::quiet_NaN();
    double relative_rmse = std::numeric_limits<double>::quiet_NaN();
    std::map<std::string, IntervalEstimate> intervals;
    std::vector<std::string> notes;
};

struct MetaRow {
    std::string stratum;
    std::string statistic;
    IntervalEstimate estimate;
    std::vector<int> horizons;
};

struct ScoreTable {
    std::string dataset;
    std::string model;
    std::string patches;
    std::size_t failures = 0;
    std::vector<ScoreRow> rows;
    std::vector<MetaRow> meta;

    const ScoreRow* find(int h, const std::string& stratum) const {
        for (const auto& r : rows) {
            if (r.horizon == h && r.stratum == stratum) {
                return &r;
            }
        }
        return nullptr;
    }
};

struct ScoreOptions {
    double filter_c = 1.5;
    int replicates = 1000;
    std::vector<Statistic> statistics{Statistic::rmse, Statistic::relative_rmse, Statistic::win_rate};
    std::uint64_t seed = 0;
};

/// Records in canonical order: horizon, origin date, region position on the panel axis.
inline void sort_records(std::vector<ForecastRecord>& records, const PanelDataset& panel) {
    std::map<std::string, Eigen::Index> pos;
    for (Eigen::Index j = 0; j < panel.num_regions(); ++j) {
        pos[panel.regions()[static_cast<std::size_t>(j)]] = j;
    }
    std::stable_sort(records.begin(), records.end(), [&](const auto& a, const auto& b) {
        return std::make_tuple(a.horizon, a.origin, pos.at(a.region)) <
               std::make_tuple(b.horizon, b.origin, pos.at(b.region));
    });
}

/// Per (horizon, stratum) metrics with month-block bootstrap intervals, plus cross-horizon pooling.
inline ScoreTable score_records(std::vector<ForecastRecord> records, const PanelDataset& panel,
                                const AnnotationSet& annotations, const ScoreOptions& opt) {
    sort_records(records, panel);
    ScoreTable table;
    std::set<int> horizons;
    for (const auto& r : records) {
        horizons.insert(r.horizon);
    }
    for (int h : horizons) {
        std::vector<ForecastRecord> pool;
        for (const auto& r : records) {
            if (r.horizon == h) {
                pool.push_back(r);
            }
        }
        auto strat = stratify(pool, annotations);
        std::vector<std::vector<ForecastRecord>> sets{pool, std::move(strat.outbreak), std::move(strat.non_outbreak)};
        const auto mask = build_filter_mask(pool, opt.filter_c);
        sets.push_back(apply_mask(pool, mask));
        for (std::size_t s = 0; s < sets.size(); ++s) {
            ScoreRow row;
            row.horizon = h;
            row.stratum = strata_names()[s];
            row.count = sets[s].size();
            if (sets[s].empty()) {
                row.notes.push_back(s == 3 ? "empty after filtering" : "no records");
                table.rows.push_back(std::move(row));
                continue;
            }
            row.metrics = point_metrics(sets[s]);
            row.win_rate = win_rate(sets[s]);
            row.mean_signed_error = mean_signed_error(sets[s]);
            row.relative_rmse = relative_rmse(sets[s]);
            for (std::size_t k = 0; k < opt.statistics.size(); ++k) {
                const auto stat = opt.statistics[k];
                const auto seed = derive_seed({opt.seed, static_cast<std::uint64_t>(h), s, k});
                try {
                    row.intervals[to_string(stat)] = bootstrap_by_month(sets[s], stat, opt.replicates, seed);
                } catch (const ValidationError& e) {
                    row.notes.push_back(to_string(stat) + " interval: " + e.what());
                }
            }
            table.rows.push_back(std::move(row));
        }
    }
    for (const auto& stratum : strata_names()) {
        for (const auto stat : opt.statistics) {
            std::vector<IntervalEstimate> ests;
            MetaRow meta;
            meta.stratum = stratum;
            meta.statistic = to_string(stat);
            for (const auto& row : table.rows) {
                if (row.stratum != stratum) {
                    continue;
                }
                auto it = row.intervals.find(meta.statistic);
                if (it != row.intervals.end() && std::isfinite(it->second.point)) {
                    ests.push_back(it->second);
                    meta.horizons.push_back(row.horizon);
                }
            }
            if (ests.empty()) {
                continue;
            }
            meta.estimate = meta_across_horizons(ests);
            table.meta.push_back(std::move(meta));
        }
    }
    return table;
}

namespace detail {

inline nlohmann::json number_or_null(double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline double number_from(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json interval_json(const IntervalEstimate& e) {
    return {{"point", number_or_null(e.point)},
            {"lower", number_or_null(e.lower)},
            {"upper", number_or_null(e.upper)},
            {"replicates", e.replicates},
            {"seed", e.seed}};
}

inline IntervalEstimate interval_from(const nlohmann::json& j) {
    IntervalEstimate e;
    e.point = number_from(j.at("point"));
    e.lower = number_from(j.at("lower"));
    e.upper = number_from(j.at("upper"));
    e.replicates = j.at("replicates").get<int>();
    e.seed = j.at("seed").get<std::uint64_t>();
    return e;
}

} // namespace detail

inline nlohmann::json to_json(const ScoreTable& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) {
        nlohmann::json row{{"dataset", t.dataset}, {"model", t.model},   {"patches", t.patches},
                           {"horizon", r.horizon}, {"stratum", r.stratum}, {"count", r.count}};
        const char* names[] = {"mse", "mae", "rmse", "med_ae", "med_se"};
        const double vals[] = {r.metrics ? r.metrics->mse : NAN, r.metrics ? r.metrics->mae : NAN,
                               r.metrics ? r.metrics->rmse : NAN, r.metrics ? r.metrics->med_ae : NAN,
                               r.metrics ? r.metrics->med_se : NAN};
        for (int k = 0; k < 5; ++k) {
            row[names[k]] = detail::number_or_null(vals[k]);
        }
        row["win_rate"] = detail::number_or_null(r.win_rate);
        row["mean_signed_error"] = detail::number_or_null(r.mean_signed_error);
        row["relative_rmse"] = detail::number_or_null(r.relative_rmse);
        nlohmann::json iv = nlohmann::json::object();
        for (const auto& [k, e] : r.intervals) {
            iv[k] = detail::interval_json(e);
        }
        row["intervals"] = iv;
        row["notes"] = r.notes;
        rows.push_back(std::move(row));
    }
    nlohmann::json meta = nlohmann::json::array();
    for (const auto& m : t.meta) {
        auto e = detail::interval_json(m.estimate);
        e["stratum"] = m.stratum;
        e["statistic"] = m.statistic;
        e["horizons"] = m.horizons;
        meta.push_back(std::move(e));
    }
    return {{"dataset", t.dataset}, {"model", t.model}, {"patches", t.patches},
            {"failures", t.failures}, {"rows", rows},   {"meta", meta}};
}

inline ScoreTable score_table_from_json(const nlohmann::json& j) {
    ScoreTable t;
    try {
        t.dataset = j.at("dataset").get<std::string>();
        t.model = j.at("model").get<std::string>();
        t.patches = j.at("patches").get<std::string>();
        t.failures = j.at("failures").get<std::size_t>();
        for (const auto& r : j.at("rows")) {
            ScoreRow row;
            row.horizon = r.at("horizon").get<int>();
            row.stratum = r.at("stratum").get<std::string>();
            row.count = r.at("count").get<std::size_t>();
            if (!r.at("mse").is_null()) {
                MetricSet m;
                m.mse = r.at("mse").get<double>();
                m.mae = r.at("mae").get<double>();
                m.rmse = r.at("rmse").get<double>();
                m.med_ae = r.at("med_ae").get<double>();
                m.med_se = r.at("med_se").get<double>();
                m.count = row.count;
                row.metrics = m;
            }
            row.win_rate = detail::number_from(r.at("win_rate"));
            row.mean_signed_error = detail::number_from(r.at("mean_signed_error"));
            row.relative_rmse = detail::number_from(r.at("relative_rmse"));
            for (auto it = r.at("intervals").begin(); it != r.at("intervals").end(); ++it) {
                row.intervals[it.key()] = detail::interval_from(it.value());
            }
            row.notes = r.at("notes").get<std::vector<std::string>>();
            t.rows.push_back(std::move(row));
        }
        for (const auto& m : j.at("meta")) {
            MetaRow mr;
            mr.stratum = m.at("stratum").get<std::string>();
            mr.statistic = m.at("statistic").get<std::string>();
            mr.horizons = m.at("horizons").get<std::vector<int>>();
            mr.estimate = detail::interval_from(m);
            t.meta.push_back(std::move(mr));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("score table: ") + e.what());
    }
    return t;
}

inline std::string records_csv(const std::vector<ForecastRecord>& records) {
    std::string out = "origin,horizon,region,prediction,truth,naive_reference\n";
    for (const auto& r : records) {
        out += r.origin.iso() + "," + std::to_string(r.horizon) + "," + r.region + "," + csv::format(r.prediction) +
               "," + csv::format(r.truth) + "," + csv::format(r.naive_reference) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------------------------------
// Benchmark run

struct FitAudit {
    int round_index = 0;
    int horizon = 1;
    Eigen::Index window_end = 0;
    Eigen::Index max_index_used = -1; // latest panel row any fitted quantity touched
};

struct RunHooks {
    std::function<void(const FitAudit&)> on_fit; // called from worker threads
};

struct WorkItemResult {
    int round_index = 0;
    int horizon = 1;
    bool failed = false;
    std::string message;
    std::vector<ForecastRecord> records;
    std::size_t train_samples = 0;
    std::size_t validation_samples = 0;
    std::vector<DroppedSample> dropped_fit;
    std::vector<DroppedSample> dropped_eval;
    std::optional<TrainingDiagnostics> training;
};

struct BenchmarkRun {
    RunConfig config;
    ModelSpec selected;
    std::optional<GridResult> grid;
    std::vector<RoundPlan> plans;
    std::vector<ForecastRecord> records;
    std::vector<WorkItemResult> items; // records moved out into `records`
    ScoreTable scores;
    AnnotationSource annotation_source = AnnotationSource::computed;
    std::size_t missing_cells = 0;
    std::vector<std::size_t> missing_by_region;

    std::size_t failures() const {
        return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const auto& i) { return i.failed; }));
    }
};

namespace detail {

inline WorkItemResult run_item(const RunConfig& cfg, const ModelSpec& spec, const RunInputs& in, const ModelContext& ctx,
                               const RoundPlan& plan, const HorizonPlan& hp, const RunHooks& hooks) {
    WorkItemResult out;
    out.round_index = plan.round_index;
    out.horizon = hp.horizon;
    const auto& panel = in.panel;
    const auto L = cfg.plan.lookback;
    try {
        FitAudit audit{plan.round_index, hp.horizon, plan.window_end, -1};
        ModelSpec s = spec;
        s.horizon = hp.horizon;
        std::optional<FittedModel> model;
        if (s.kind == ModelKind::ar1) {
            const auto rows = plan.window_end - plan.window_begin + 1;
            model = fit_ar1(panel.values().middleRows(plan.window_begin, rows));
            audit.max_index_used = plan.window_end;
        } else if (is_trainable(s.kind)) {
            auto split = build_split(panel, hp, L);
            out.dropped_fit = split.dropped;
            out.train_samples = split.train.size();
            out.validation_samples = split.validation.size();
            if (split.train.empty() || split.validation.empty()) {
                throw ValidationError("no usable " + std::string(split.train.empty() ? "training" : "validation") +
                                      " samples after dropping missing windows");
            }
            for (const auto* part : {&split.train, &split.validation}) {
                for (const auto& smp : *part) {
                    audit.max_index_used = std::max(audit.max_index_used, smp.origin + smp.horizon);
                }
            }
            TrainConfig tc = cfg.training;
            tc.seed = derive_seed({cfg.seed, static_cast<std::uint64_t>(plan.round_index),
                                   static_cast<std::uint64_t>(hp.horizon)});
            model = train(s, split.train, split.validation, tc, cfg.patches, ctx);
            out.training = model->diagnostics;
        }
        if (audit.max_index_used > plan.window_end) {
            throw RuntimeFailure("prospective purity violated: fit used row " + std::to_string(audit.max_index_used) +
                                 " beyond window end " + std::to_string(plan.window_end));
        }
        if (hooks.on_fit) {
            hooks.on_fit(audit);
        }
        auto eval = make_samples(panel, L, hp.horizon, hp.eval_origins);
        out.dropped_eval = std::move(eval.dropped);
        for (const auto& smp : eval.samples) {
            Eigen::VectorXd pred;
            switch (s.kind) {
            case ModelKind::naive: pred = naive_forecast(smp); break;
            case ModelKind::ar1: pred = ar1_forecast(*model, smp.last_observation(), hp.horizon); break;
            case ModelKind::dlinear: pred = forecast_dlinear(smp, *model); break;
            case ModelKind::graph_linear:
                pred = forecast_graph_linear(smp, ctx.mixing ? *ctx.mixing : MixingOperator::identity(smp.num_regions()),
                                             *model);
                break;
            case ModelKind::external: throw ValidationError("external model cannot be run in process");
            }
            if (!pred.allFinite()) {
                throw RuntimeFailure("non-finite forecast at origin " + smp.origin_date.iso());
            }
            const Eigen::VectorXd naive = smp.last_observation();
            for (Eigen::Index j = 0; j < smp.num_regions(); ++j) {
                out.records.push_back({smp.origin_date, hp.horizon, panel.regions()[static_cast<std::size_t>(j)],
                                       pred(j), smp.target(j), naive(j), smp.target_date});
            }
        }
    } catch (const std::exception& e) {
        out.failed = true;
        out.message = e.what();
        out.records.clear();
    }
    return out;
}

} // namespace detail

inline ScoreOptions score_options(const RunConfig& cfg) {
    return {cfg.filter_c, cfg.bootstrap_replicates, cfg.interval_statistics, cfg.seed};
}

/// Plans rounds, optionally grid-searches on the first round, fits every (round, horizon) from scratch
/// on a bounded pool of workers, and scores the pooled records. Output order never depends on scheduling.
inline BenchmarkRun run_benchmark(const RunConfig& cfg, const RunInputs& in, const RunHooks& hooks = {}) {
    BenchmarkRun run;
    run.config = cfg;
    run.plans = plan_rounds(in.panel, cfg.plan, cfg.effective_horizons());
    if ((cfg.patches.epi || cfg.patches.einn) && !in.population) {
        throw ValidationError("epi-aware patches require a population file");
    }
    ModelContext ctx{in.panel.frequency(), in.mixing, in.population};
    run.selected = cfg.model;
    if (!cfg.grid.empty()) {
        run.grid = grid_search(cfg.model, cfg.grid, run.plans.front(), in.panel, ctx, cfg.training, cfg.patches,
                               cfg.plan.lookback, cfg.grid_horizons, cfg.seed);
        run.selected = run.grid->selected;
    }
    std::vector<std::pair<const RoundPlan*, const HorizonPlan*>> work;
    for (const auto& p : run.plans) {
        for (const auto& hp : p.horizons) {
            work.emplace_back(&p, &hp);
        }
    }
    run.items.resize(work.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < work.size(); i = next++) {
            run.items[i] = detail::run_item(cfg, run.selected, in, ctx, *work[i].first, *work[i].second, hooks);
        }
    };
    const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), std::max<std::size_t>(work.size(), 1));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& th : pool) {
            th.join();
        }
    }
    for (auto& item : run.items) {
        run.records.insert(run.records.end(), std::make_move_iterator(item.records.begin()),
                           std::make_move_iterator(item.records.end()));
        item.records.clear();
    }
    run.annotation_source = in.annotations.source;
    run.missing_cells = in.panel.missing_count();
    for (Eigen::Index j = 0; j < in.panel.num_regions(); ++j) {
        run.missing_by_region.push_back(static_cast<std::size_t>(in.panel.missing_mask().col(j).count()));
    }
    if (run.records.empty()) {
        throw RuntimeFailure("no forecast records were produced (" + std::to_string(run.failures()) + " failed fits)");
    }
    run.scores = score_records(run.records, in.panel, in.annotations, score_options(cfg));
    run.scores.dataset = cfg.dataset_id;
    run.scores.model = to_string(cfg.model.kind);
    run.scores.patches = cfg.patches.label();
    run.scores.failures = run.failures();
    return run;
}

// ---------------------------------------------------------------------------------------------------
// Output documents

inline nlohmann::json plans_json(const std::vector<RoundPlan>& plans, const PanelDataset& panel, const PlanSettings& s) {
    nlohmann::json rounds = nlohmann::json::array();
    auto date = [&](Eigen::Index t) { return panel.dates()[static_cast<std::size_t>(t)].iso(); };
    for (const auto& p : plans) {
        nlohmann::json hs = nlohmann::json::array();
        for (const auto& hp : p.horizons) {
            hs.push_back({{"horizon", hp.horizon},
                          {"train_origins", {hp.train_first, hp.train_last}},
                          {"validation_origins", {hp.validation_first, hp.validation_last}},
                          {"eval_origins", hp.eval_origins}});
        }
        std::vector<std::string> eval_dates;
        for (auto o : p.eval_origins) {
            eval_dates.push_back(date(o));
        }
        rounds.push_back({{"round", p.round_index},
                          {"train_window", {p.window_begin, p.window_end}},
                          {"train_window_dates", {date(p.window_begin), date(p.window_end)}},
                          {"eval_origins", p.eval_origins},
                          {"eval_origin_dates", eval_dates},
                          {"horizons", hs}});
    }
    return {{"headroom", "per-horizon"},
            {"lookback", s.lookback},
            {"cadence", s.cadence},
            {"train_size", s.train_size},
            {"train_fraction", s.train_fraction},
            {"num_times", panel.num_times()},
            {"rounds", rounds}};
}

inline nlohmann::json diagnostics_json(const BenchmarkRun& run, const PanelDataset& panel) {
    nlohmann::json items = nlohmann::json::array();
    nlohmann::json failures = nlohmann::json::array();
    std::size_t emitted = 0;
    for (const auto& it : run.items) {
        nlohmann::json j{{"round", it.round_index},
                         {"horizon", it.horizon},
                         {"status", it.failed ? "failed" : "ok"},
                         {"train_samples", it.train_samples},
                         {"validation_samples", it.validation_samples},
                         {"dropped_fit_samples", it.dropped_fit.size()},
                         {"dropped_eval_samples", it.dropped_eval.size()}};
        if (it.training) {
            j["best_epoch"] = it.training->best_epoch;
            j["epochs_run"] = it.training->epochs_run;
            j["final_train_loss"] = detail::number_or_null(it.training->final_train_loss);
            j["final_validation_loss"] = detail::number_or_null(it.training->final_validation_loss);
        }
        if (it.failed) {
            j["message"] = it.message;
            failures.push_back({{"round", it.round_index}, {"horizon", it.horizon}, {"message", it.message}});
        }
        items.push_back(std::move(j));
    }
    emitted = run.records.size();
    nlohmann::json missing = nlohmann::json::object();
    for (std::size_t j = 0; j < run.missing_by_region.size(); ++j) {
        missing[panel.regions()[j]] = run.missing_by_region[j];
    }
    nlohmann::json grid = nullptr;
    if (run.grid) {
        nlohmann::json pts = nlohmann::json::array();
        for (std::size_t i = 0; i < run.grid->points.size(); ++i) {
            pts.push_back({{"point", run.grid->points[i]}, {"validation_loss", detail::number_or_null(run.grid->losses[i])}});
        }
        grid = {{"points", pts}, {"selected_index", run.grid->best_index}};
    }
    return {{"dataset", run.config.dataset_id},
            {"model", to_string(run.selected.kind)},
            {"selected_hyperparameters", run.selected.hyperparameters},
            {"patches", to_json(run.config.patches)},
            {"seed", run.config.seed},
            {"grid_search", grid},
            {"annotation_source", run.annotation_source == AnnotationSource::computed ? "computed" : "ingested"},
            {"missing_cells", run.missing_cells},
            {"missing_by_region", missing},
            {"records", emitted},
            {"failure_count", run.failures()},
            {"failures", failures},
            {"work_items", items}};
}

inline void write_outputs(const BenchmarkRun& run, const PanelDataset& panel, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    csv::write_text(dir / "records.csv", records_csv(run.records));
    csv::write_text(dir / "scoretable.json", to_json(run.scores).dump(2) + "\n");
    csv::write_text(dir / "plans.json", plans_json(run.plans, panel, run.config.plan).dump(2) + "\n");
    csv::write_text(dir / "diagnostics.json", diagnostics_json(run, panel).dump(2) + "\n");
}

// ---------------------------------------------------------------------------------------------------
// External forecasts

/// Scores an external records file through the same pipeline. Keys must resolve against the run's plans;
/// truths and persistence references are re-derived from the panel. A `truth` column, when present, must
/// agree with the panel (tamper guard).
inline ScoreTable score_external(const std::filesystem::path& records_path, const RunConfig& cfg, const RunInputs& in) {
    const auto table = csv::read(records_path, {"origin", "horizon", "region", "prediction"}, true);
    std::optional<std::size_t> truth_col;
    for (std::size_t c = 4; c < table.header.size(); ++c) {
        if (table.header[c] == "truth") {
            truth_col = c;
        }
    }
    const auto plans = plan_rounds(in.panel, cfg.plan, cfg.effective_horizons());
    std::set<std::pair<int, Eigen::Index>> allowed;
    for (const auto& p : plans) {
        for (const auto& hp : p.horizons) {
            for (auto o : hp.eval_origins) {
                allowed.insert({hp.horizon, o});
            }
        }
    }
    const auto& panel = in.panel;
    std::vector<std::string> bad_key;
    std::vector<std::string> bad_value;
    std::vector<std::string> mismatch;
    std::set<std::tuple<int, Eigen::Index, Eigen::Index>> seen;
    std::vector<ForecastRecord> records;
    auto cap = [](std::vector<std::string>& v, std::string s) {
        if (v.size() < 50) {
            v.push_back(std::move(s));
        }
    };
    std::size_t n_bad_key = 0;
    std::size_t n_bad_value = 0;
    std::size_t n_mismatch = 0;
    for (const auto& row : table.rows) {
        const auto where = table.where(row);
        Date origin;
        int h = 0;
        try {
            origin = Date::parse(row.fields[0]);
            double hv = 0.0;
            if (!csv::parse_double(row.fields[1], hv) || hv != std::floor(hv) || hv < 1) {
                throw ValidationError("horizon '" + row.fields[1] + "' is not a positive integer");
            }
            h = static_cast<int>(hv);
        } catch (const ValidationError& e) {
            ++n_bad_key;
            cap(bad_key, where + ": " + e.what());
            continue;
        }
        const auto t = panel.index_of(origin);
        const auto j = panel.region_index(row.fields[2]);
        if (!t || !j) {
            ++n_bad_key;
            cap(bad_key, where + ": unresolvable key (" + row.fields[0] + ", " + row.fields[1] + ", " + row.fields[2] + ")");
            continue;
        }
        if (!allowed.count({h, *t})) {
            ++n_bad_key;
            cap(bad_key, where + ": origin " + row.fields[0] + " with horizon " + std::to_string(h) +
                             " is outside every plan's evaluation origins");
            continue;
        }
        if (!seen.insert({h, *t, *j}).second) {
            ++n_bad_key;
            cap(bad_key, where + ": duplicate key (" + row.fields[0] + ", " + row.fields[1] + ", " + row.fields[2] + ")");
            continue;
        }
        const auto& miss = panel.missing_mask();
        if (miss(*t, *j) || miss(*t + h, *j)) {
            ++n_bad_key;
            cap(bad_key, where + ": origin or target observation missing in the panel");
            continue;
        }
        double pred = 0.0;
        if (!csv::parse_double(row.fields[3], pred) || !std::isfinite(pred)) {
            ++n_bad_value;
            cap(bad_value, where);
            continue;
        }
        const double truth = panel.values()(*t + h, *j);
        if (truth_col) {
            double claimed = 0.0;
            if (!csv::parse_double(row.fields[*truth_col], claimed) ||
                std::abs(claimed - truth) > 1e-9 * std::max(1.0, std::abs(truth))) {
                ++n_mismatch;
                cap(mismatch, where + ": file truth '" + row.fields[*truth_col] + "' vs panel " + csv::format(truth));
                continue;
            }
        }
        records.push_back({origin, h, row.fields[2], pred, truth, panel.values()(*t, *j), panel.date_after(*t, h)});
    }
    auto join = [](const std::vector<std::string>& v, std::size_t total) {
        std::string s;
        for (const auto& x : v) {
            s += "\n  " + x;
        }
        if (total > v.size()) {
            s += "\n  ... (" + std::to_string(total - v.size()) + " more)";
        }
        return s;
    };
    if (n_mismatch > 0) {
        throw ValidationError("truth mismatch in " + std::to_string(n_mismatch) + " row(s):" + join(mismatch, n_mismatch));
    }
    if (n_bad_value > 0) {
        throw ValidationError("non-finite or non-numeric prediction in " + std::to_string(n_bad_value) +
                              " row(s):" + join(bad_value, n_bad_value));
    }
    if (n_bad_key > 0) {
        throw ValidationError("unresolvable record keys in " + std::to_string(n_bad_key) + " row(s):" +
                              join(bad_key, n_bad_key));
    }
    if (records.empty()) {
        throw ValidationError(table.source + ": no records");
    }
    auto scores = score_records(std::move(records), panel, in.annotations, score_options(cfg));
    scores.dataset = cfg.dataset_id;
    scores.model = to_string(cfg.model.kind);
    scores.patches = cfg.patches.label();
    return scores;
}

} // namespace epibench
