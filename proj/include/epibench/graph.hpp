#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "epibench/csv.hpp"
#include "epibench/error.hpp"

namespace epibench {

/// Entry (i, j) is the relation from region j to region i.
struct AdjacencyMatrix {
    Eigen::MatrixXd weights;
};

/// Nonnegative, every row sums to one.
class MixingOperator {
public:
    MixingOperator() = default;

    /// Validates stochasticity (rows sum to 1 within 1e-12, entries >= 0).
    explicit MixingOperator(Eigen::MatrixXd m) : matrix_(std::move(m)) {
        detail::require(matrix_.rows() == matrix_.cols(), "mixing operator must be square");
        for (Eigen::Index i = 0; i < matrix_.rows(); ++i) {
            detail::require((matrix_.row(i).array() >= 0.0).all(), "mixing operator has a negative entry");
            detail::require(std::abs(matrix_.row(i).sum() - 1.0) <= 1e-12,
                            "mixing operator row " + std::to_string(i) + " does not sum to 1");
        }
    }

    static MixingOperator identity(Eigen::Index n) { return MixingOperator(Eigen::MatrixXd::Identity(n, n)); }

    const Eigen::MatrixXd& matrix() const { return matrix_; }
    Eigen::Index size() const { return matrix_.rows(); }

private:
    Eigen::MatrixXd matrix_;
};

/// Reads a directed edge list `src,dst,weight`; an edge src -> dst sets entry (dst, src).
inline AdjacencyMatrix load_adjacency(const std::filesystem::path& path, const std::vector<std::string>& regions) {
    const auto table = csv::read(path, {"src", "dst", "weight"});
    const auto n = static_cast<Eigen::Index>(regions.size());
    AdjacencyMatrix A{Eigen::MatrixXd::Zero(n, n)};
    auto index = [&](const csv::Row& row, const std::string& name) {
        auto it = std::find(regions.begin(), regions.end(), name);
        if (it == regions.end()) {
            throw ValidationError(table.where(row) + ": unknown region '" + name + "'");
        }
        return static_cast<Eigen::Index>(it - regions.begin());
    };
    for (const auto& row : table.rows) {
        const auto src = index(row, row.fields[0]);
        const auto dst = index(row, row.fields[1]);
        const double w = csv::number(table, row, 2);
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw ValidationError(table.where(row) + ": edge weight must be finite and nonnegative");
        }
        A.weights(dst, src) = w;
    }
    return A;
}

inline std::string adjacency_csv(const AdjacencyMatrix& A, const std::vector<std::string>& regions) {
    std::string out = "src,dst,weight\n";
    for (Eigen::Index dst = 0; dst < A.weights.rows(); ++dst) {
        for (Eigen::Index src = 0; src < A.weights.cols(); ++src) {
            if (A.weights(dst, src) != 0.0) {
                out += regions[src] + "," + regions[dst] + "," + csv::format(A.weights(dst, src)) + "\n";
            }
        }
    }
    return out;
}

/// Divides each nonzero row by its sum; an all-zero row becomes a self-loop.
inline MixingOperator row_normalize(const AdjacencyMatrix& A) {
    const auto& W = A.weights;
    detail::require(W.rows() == W.cols(), "adjacency must be square");
    detail::require((W.array() >= 0.0).all(), "adjacency must be nonnegative");
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(W.rows(), W.cols());
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        const double s = W.row(i).sum();
        if (s > 0.0) {
            P.row(i) = W.row(i) / s;
            // Pin the row sum to exactly 1 by absorbing rounding into the largest entry.
            Eigen::Index k = 0;
            P.row(i).maxCoeff(&k);
            P(i, k) += 1.0 - P.row(i).sum();
        } else {
            P(i, i) = 1.0;
        }
    }
    return MixingOperator(std::move(P));
}

inline Eigen::VectorXd mix(const MixingOperator& P, const Eigen::VectorXd& v) {
    if (P.size() != v.size()) {
        throw ValidationError("mix: operator is " + std::to_string(P.size()) + "x" + std::to_string(P.size()) +
                              " but vector has length " + std::to_string(v.size()));
    }
    return P.matrix() * v;
}

} // namespace epibench
