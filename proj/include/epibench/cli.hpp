#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "epibench/csv.hpp"
#include "epibench/graph.hpp"
#include "epibench/outbreak.hpp"
#include "epibench/panel.hpp"
#include "epibench/report.hpp"
#include "epibench/rolling.hpp"
#include "epibench/tasks.hpp"

namespace epibench {

enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_validation = 2, exit_runtime = 3 };

/// Entry point behind the `epibench` executable. Streams are injectable for tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    namespace fs = std::filesystem;
    CLI::App app{"epibench: rolling-origin benchmark for spatiotemporal epidemic forecasting"};
    app.require_subcommand(1, 1);
    app.fallthrough(false);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Validate panel, adjacency and population files");
    std::string in_panel;
    std::string in_freq = "daily";
    std::string in_adj;
    std::string in_pop;
    ingest->add_option("--panel", in_panel, "Panel CSV (date,region,value)")->required();
    ingest->add_option("--frequency", in_freq, "daily or weekly")->check(CLI::IsMember({"daily", "weekly"}));
    ingest->add_option("--adjacency", in_adj, "Edge list CSV (src,dst,weight)");
    ingest->add_option("--population", in_pop, "Population CSV (region,population)");

    // annotate
    auto* annotate = app.add_subcommand("annotate", "Compute rising-interval annotations");
    std::string an_panel;
    std::string an_freq = "daily";
    int an_window = 0;
    double an_alpha = 0.05;
    std::string an_out;
    annotate->add_option("--panel", an_panel, "Panel CSV")->required();
    annotate->add_option("--frequency", an_freq, "daily or weekly")->check(CLI::IsMember({"daily", "weekly"}));
    annotate->add_option("--window", an_window, "Sliding window (default 7 daily, 4 weekly)");
    annotate->add_option("--alpha", an_alpha, "Significance level");
    annotate->add_option("--out", an_out, "Output annotation CSV")->required();

    // run
    auto* run = app.add_subcommand("run", "Run the rolling-origin benchmark from a config file");
    std::string run_config;
    std::string run_output;
    int run_workers = 0;
    run->add_option("--config", run_config, "Run configuration JSON")->required();
    run->add_option("--output", run_output, "Override the output directory");
    run->add_option("--workers", run_workers, "Override the worker count");

    // score
    auto* score = app.add_subcommand("score", "Score an external records file through the metric pipeline");
    std::string sc_config;
    std::string sc_records;
    std::string sc_out;
    std::string sc_label;
    score->add_option("--config", sc_config, "Run configuration JSON (dataset, plans, scoring settings)")->required();
    score->add_option("--records", sc_records, "CSV with origin,horizon,region,prediction[,truth,...]")->required();
    score->add_option("--out", sc_out, "Write the score table JSON here");
    score->add_option("--model-label", sc_label, "Model name recorded in the score table");

    // export-tasks
    auto* exp = app.add_subcommand("export-tasks", "Write one task bundle per round");
    std::string ex_config;
    std::string ex_out;
    bool ex_force = false;
    exp->add_option("--config", ex_config, "Run configuration JSON")->required();
    exp->add_option("--out", ex_out, "Output directory")->required();
    exp->add_flag("--force", ex_force, "Replace existing bundles");

    // report
    auto* rep = app.add_subcommand("report", "Render score tables as text and CSV");
    std::vector<std::string> rp_scores;
    std::string rp_out;
    rep->add_option("--scores", rp_scores, "scoretable.json files")->required();
    rep->add_option("--out", rp_out, "Directory for report.txt, relative_rmse.csv, win_rate.csv, long.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return exit_usage;
    }

    try {
        if (*ingest) {
            const auto panel = load_panel(in_panel, parse_frequency(in_freq));
            out << "panel: " << panel.num_times() << " dates x " << panel.num_regions() << " regions, "
                << panel.missing_count() << " missing cells, " << panel.dates().front().iso() << " .. "
                << panel.dates().back().iso() << "\n";
            if (!in_adj.empty()) {
                const auto A = load_adjacency(in_adj, panel.regions());
                const auto P = row_normalize(A);
                out << "adjacency: " << (A.weights.array() != 0.0).count() << " edges, mixing operator "
                    << P.size() << "x" << P.size() << "\n";
            }
            if (!in_pop.empty()) {
                const auto pop = load_population(in_pop, panel.regions());
                out << "population: " << pop.populations.size() << " regions, total "
                    << csv::format(pop.populations.sum()) << "\n";
            }
        } else if (*annotate) {
            const auto f = parse_frequency(an_freq);
            const auto panel = load_panel(an_panel, f);
            const int window = an_window > 0 ? an_window : (f == Frequency::daily ? 7 : 4);
            const auto set = annotate_rising(panel, window, an_alpha);
            csv::write_text(an_out, annotations_csv(set));
            out << "annotations: " << set.intervals.size() << " intervals written to " << an_out << "\n";
        } else if (*run) {
            auto cfg = load_run_config(run_config);
            if (!run_output.empty()) {
                cfg.output_dir = run_output;
            }
            if (run_workers > 0) {
                cfg.workers = run_workers;
            }
            const auto inputs = load_inputs(cfg);
            const auto result = run_benchmark(cfg, inputs);
            write_outputs(result, inputs.panel, cfg.output_dir);
            out << "rounds: " << result.plans.size() << ", records: " << result.records.size()
                << ", failed fits: " << result.failures() << "\n";
            out << "outputs written to " << cfg.output_dir.string() << "\n";
        } else if (*score) {
            const auto cfg = load_run_config(sc_config);
            const auto inputs = load_inputs(cfg);
            auto table = score_external(sc_records, cfg, inputs);
            if (!sc_label.empty()) {
                table.model = sc_label;
            }
            const auto text = to_json(table).dump(2) + "\n";
            if (sc_out.empty()) {
                out << text;
            } else {
                csv::write_text(sc_out, text);
                out << "score table written to " << sc_out << "\n";
            }
        } else if (*exp) {
            const auto cfg = load_run_config(ex_config);
            const auto inputs = load_inputs(cfg);
            const auto dirs = export_tasks(cfg, inputs, ex_out, ex_force);
            out << dirs.size() << " task bundles written to " << ex_out << "\n";
        } else if (*rep) {
            std::vector<ScoreTable> tables;
            for (const auto& p : rp_scores) {
                nlohmann::json j;
                try {
                    j = nlohmann::json::parse(csv::read_text(p));
                } catch (const nlohmann::json::exception& e) {
                    throw ValidationError(p + ": not valid JSON: " + e.what());
                }
                tables.push_back(score_table_from_json(j));
            }
            const auto text = render_text(tables);
            out << text;
            if (!rp_out.empty()) {
                const fs::path dir(rp_out);
                csv::write_text(dir / "report.txt", text);
                csv::write_text(dir / "relative_rmse.csv", view_csv(tables, "relative_rmse"));
                csv::write_text(dir / "win_rate.csv", view_csv(tables, "win_rate"));
                csv::write_text(dir / "long.csv", long_csv(tables));
            }
        }
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << "\n";
        return exit_validation;
    } catch (const RuntimeFailure& e) {
        err << "runtime failure: " << e.what() << "\n";
        return exit_runtime;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "runtime failure: " << e.what() << "\n";
        return exit_runtime;
    } catch (const std::exception& e) {
        err << "runtime failure: " << e.what() << "\n";
        return exit_runtime;
    }
    return exit_ok;
}

} // namespace epibench
