#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "epibench/graph.hpp"
#include "epibench/panel.hpp"

// Generators for test fixtures and demos. Each is a pure function of its options and seed.
namespace epibench::synthetic {

struct Dataset {
    PanelDataset panel;
    AdjacencyMatrix adjacency;
    PopulationVector population;
};

inline std::vector<std::string> region_names(Eigen::Index n) {
    std::vector<std::string> out;
    for (Eigen::Index i = 0; i < n; ++i) {
        out.push_back("r" + std::to_string(i));
    }
    return out;
}

inline std::vector<Date> date_axis(Date start, Eigen::Index T, Frequency f) {
    std::vector<Date> out;
    for (Eigen::Index t = 0; t < T; ++t) {
        out.push_back(start.plus_days(t * step_days(f)));
    }
    return out;
}

/// Undirected ring with self-loops, all weights 1.
inline AdjacencyMatrix ring_adjacency(Eigen::Index n) {
    AdjacencyMatrix A{Eigen::MatrixXd::Identity(n, n)};
    if (n > 1) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto j = (i + 1) % n;
            A.weights(i, j) = 1.0;
            A.weights(j, i) = 1.0;
        }
    }
    return A;
}

struct SirOptions {
    Eigen::Index regions = 4;
    Eigen::Index steps = 200;
    Frequency frequency = Frequency::daily;
    Date start = Date::parse("2020-01-06");
    double beta_low = 0.25;
    double beta_high = 0.4;
    double gamma = 0.1;
    double waning = 0.01;     // R -> S per step, keeps waves recurring
    double noise = 0.05;      // multiplicative observation noise sd
    std::uint64_t seed = 1;
};

/// Metapopulation SIR with waning immunity observed as noisy incidence.
inline Dataset sir_panel(const SirOptions& o) {
    std::mt19937_64 gen(o.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto n = o.regions;
    auto A = ring_adjacency(n);
    const Eigen::MatrixXd P = row_normalize(A).matrix();
    Eigen::VectorXd N(n);
    Eigen::VectorXd beta(n);
    Eigen::VectorXd S(n);
    Eigen::VectorXd I(n);
    Eigen::VectorXd R = Eigen::VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        N(i) = std::round(5e4 + 4.5e5 * unif(gen));
        beta(i) = o.beta_low + (o.beta_high - o.beta_low) * unif(gen);
        I(i) = std::round(N(i) * (1e-4 + 1e-3 * unif(gen)));
        S(i) = N(i) - I(i);
    }
    const double dt = o.frequency == Frequency::daily ? 1.0 : 7.0;
    Eigen::MatrixXd X(o.steps, n);
    for (Eigen::Index t = 0; t < o.steps; ++t) {
        const Eigen::VectorXd mixed = P * I;
        for (Eigen::Index i = 0; i < n; ++i) {
            // Weekly steps integrate in daily substeps.
            double z_total = 0.0;
            const int sub = static_cast<int>(dt);
            for (int k = 0; k < sub; ++k) {
                const double z = std::min(S(i), beta(i) * S(i) / N(i) * (k == 0 ? mixed(i) : I(i)));
                const double q = o.gamma * I(i);
                const double w = o.waning * R(i);
                S(i) += w - z;
                I(i) += z - q;
                R(i) += q - w;
                z_total += z;
            }
            X(t, i) = std::max(0.0, z_total * (1.0 + o.noise * normal(gen)));
        }
    }
    return {PanelDataset(date_axis(o.start, o.steps, o.frequency), region_names(n), X, o.frequency), A,
            PopulationVector{N}};
}

struct WeekdayOptions {
    Eigen::Index regions = 3;
    Eigen::Index steps = 180;
    Date start = Date::parse("2021-01-04");
    double amplitude = 0.4;   // peak relative weekday swing
    double level_swing = 0.3; // relative amplitude of the slow level cycle
    double level_period = 120.0;
    double noise = 0.05;
    std::uint64_t seed = 2;
};

/// Smooth per-region level times a planted multiplicative weekday profile.
inline Dataset weekday_panel(const WeekdayOptions& o) {
    std::mt19937_64 gen(o.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    // Monday..Sunday; weekend reporting dip.
    const double profile[7] = {0.6, 0.3, 0.2, 0.1, 0.0, -0.5, -0.7};
    const auto n = o.regions;
    const auto dates = date_axis(o.start, o.steps, Frequency::daily);
    Eigen::VectorXd base(n);
    Eigen::VectorXd phase(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        base(i) = 100.0 + 400.0 * unif(gen);
        phase(i) = 2.0 * std::numbers::pi * unif(gen);
    }
    Eigen::MatrixXd X(o.steps, n);
    for (Eigen::Index t = 0; t < o.steps; ++t) {
        const double weekday = profile[dates[static_cast<std::size_t>(t)].iso_weekday() - 1];
        for (Eigen::Index i = 0; i < n; ++i) {
            const double level =
                base(i) * (1.0 + o.level_swing * std::sin(2.0 * std::numbers::pi * t / o.level_period + phase(i)));
            X(t, i) = level * (1.0 + o.amplitude * weekday) * (1.0 + o.noise * normal(gen));
        }
    }
    Eigen::VectorXd pop = Eigen::VectorXd::Constant(n, 1e6);
    return {PanelDataset(dates, region_names(n), X, Frequency::daily), ring_adjacency(n), PopulationVector{pop}};
}

struct LinearOptions {
    Eigen::Index regions = 5;
    Eigen::Index steps = 160;
    Date start = Date::parse("2022-01-03");
    double self_weight = 0.2;
    double mix_weight = 0.7;
    double intercept = 10.0;
    double noise = 1.0;
    std::uint64_t seed = 3;
};

/// x_{t+1} = a x_t + b (P x_t) + c + noise over a ring graph; neighbours carry most of the signal.
inline Dataset linear_mixing_panel(const LinearOptions& o) {
    std::mt19937_64 gen(o.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto n = o.regions;
    auto A = ring_adjacency(n);
    const Eigen::MatrixXd P = row_normalize(A).matrix();
    Eigen::MatrixXd X(o.steps, n);
    const double mean = o.intercept / (1.0 - o.self_weight - o.mix_weight);
    Eigen::VectorXd x(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i) = mean + 10.0 * normal(gen);
    }
    for (Eigen::Index t = 0; t < o.steps; ++t) {
        X.row(t) = x.transpose();
        Eigen::VectorXd next = o.self_weight * x + o.mix_weight * (P * x);
        for (Eigen::Index i = 0; i < n; ++i) {
            next(i) += o.intercept + o.noise * normal(gen);
        }
        x = next;
    }
    Eigen::VectorXd pop = Eigen::VectorXd::Constant(n, 1e6);
    return {PanelDataset(date_axis(o.start, o.steps, Frequency::daily), region_names(n), X, Frequency::daily), A,
            PopulationVector{pop}};
}

} // namespace epibench::synthetic
