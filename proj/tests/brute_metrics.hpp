#pragma once

// Definition-level re-implementations used as oracles. Deliberately naive: O(n^2) order statistics,
// plain loops, no shared code with the library.

#include <cmath>
#include <vector>

namespace brute {

inline std::vector<double> insertion_sorted(std::vector<double> v) {
    for (std::size_t i = 1; i < v.size(); ++i) {
        for (std::size_t j = i; j > 0 && v[j - 1] > v[j]; --j) {
            std::swap(v[j - 1], v[j]);
        }
    }
    return v;
}

inline double quantile(const std::vector<double>& v, double q) {
    const auto s = insertion_sorted(v);
    const double pos = q * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= s.size()) {
        return s.back();
    }
    return s[lo] + (pos - static_cast<double>(lo)) * (s[lo + 1] - s[lo]);
}

inline double median(const std::vector<double>& v) {
    const auto s = insertion_sorted(v);
    const auto n = s.size();
    return n % 2 == 1 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
}

struct Metrics {
    double mse, mae, rmse, med_ae, med_se;
};

inline Metrics metrics(const std::vector<double>& pred, const std::vector<double>& truth) {
    std::vector<double> ae;
    std::vector<double> se;
    double sa = 0.0;
    double ss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - truth[i];
        ae.push_back(std::fabs(e));
        se.push_back(e * e);
        sa += std::fabs(e);
        ss += e * e;
    }
    const double n = static_cast<double>(pred.size());
    return {ss / n, sa / n, std::sqrt(ss / n), median(ae), median(se)};
}

inline std::vector<bool> keep_mask(const std::vector<double>& truth, double c) {
    const double q1 = quantile(truth, 0.25);
    const double q3 = quantile(truth, 0.75);
    std::vector<bool> keep;
    for (double y : truth) {
        keep.push_back(y != 0.0 && y >= q1 - c * (q3 - q1) && y <= q3 + c * (q3 - q1));
    }
    return keep;
}

inline double win_rate(const std::vector<double>& pred, const std::vector<double>& truth,
                       const std::vector<double>& naive) {
    int wins = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (std::fabs(pred[i] - truth[i]) < std::fabs(naive[i] - truth[i])) {
            ++wins;
        }
    }
    return static_cast<double>(wins) / static_cast<double>(pred.size());
}

inline double mean_signed_error(const std::vector<double>& pred, const std::vector<double>& truth) {
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        s += pred[i] - truth[i];
    }
    return s / static_cast<double>(pred.size());
}

inline double relative_rmse(const std::vector<double>& pred, const std::vector<double>& truth,
                            const std::vector<double>& naive) {
    return metrics(pred, truth).rmse / metrics(naive, truth).rmse;
}

} // namespace brute
