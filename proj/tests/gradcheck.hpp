#pragma once

// Central finite-difference check of TrainingObjective gradients, shared by unit and acceptance tests.

#include <random>
#include <string>

#include "epibench/forecasters.hpp"

namespace gradcheck {

struct Outcome {
    double relative_error = 0.0; // max |g - fd| / max(max|g|, max|fd|)
    std::string worst_block;
};

inline Outcome check(const epibench::TrainingObjective& obj, const Eigen::VectorXd& theta, double eps = 1e-5) {
    Eigen::VectorXd g;
    obj.evaluate(theta, &g);
    Eigen::VectorXd fd(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        Eigen::VectorXd a = theta;
        Eigen::VectorXd b = theta;
        a(i) += eps;
        b(i) -= eps;
        fd(i) = (obj.evaluate(a).total - obj.evaluate(b).total) / (2.0 * eps);
    }
    Outcome out;
    const double denom = std::max({g.cwiseAbs().maxCoeff(), fd.cwiseAbs().maxCoeff(), 1e-300});
    Eigen::Index worst = 0;
    out.relative_error = (g - fd).cwiseAbs().maxCoeff(&worst) / denom;
    for (const auto& blk : obj.layout().blocks()) {
        if (worst >= blk.offset && worst < blk.offset + blk.size) {
            out.worst_block = blk.name;
        }
    }
    return out;
}

/// Initial parameters plus gaussian jitter so no block sits at an exact zero.
inline Eigen::VectorXd jittered_start(const epibench::TrainingObjective& obj, std::uint64_t seed, double sd = 0.1) {
    Eigen::VectorXd theta = obj.initial_parameters(seed);
    std::mt19937_64 gen(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> nd(0.0, sd);
    for (auto& v : theta) {
        v += nd(gen);
    }
    return theta;
}

} // namespace gradcheck
