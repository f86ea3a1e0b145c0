// Regenerates the bundled synthetic fixture under data/.
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "epibench/synthetic.hpp"

int main(int argc, char** argv) {
    namespace fs = std::filesystem;
    CLI::App app{"Write the synthetic SIR fixture (panel, adjacency, population CSVs)"};
    std::string dir = "data";
    app.add_option("dir", dir, "output directory")->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    epibench::synthetic::SirOptions opt;
    opt.regions = 4;
    opt.steps = 200;
    opt.seed = 20200106;
    const auto d = epibench::synthetic::sir_panel(opt);
    const fs::path out = dir;
    fs::create_directories(out);
    epibench::write_panel(d.panel, out / "synthetic_panel.csv");
    epibench::csv::write_text(out / "synthetic_adjacency.csv", epibench::adjacency_csv(d.adjacency, d.panel.regions()));
    epibench::csv::write_text(out / "synthetic_population.csv", epibench::population_csv(d.population, d.panel.regions()));
    std::cout << "fixture written to " << out.string() << "\n";
    return 0;
}
