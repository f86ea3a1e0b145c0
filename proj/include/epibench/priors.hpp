#pragma once

// Model-agnostic epidemic priors: calendar correction (TID), filtered loss, SIR / NGM auxiliary
// regularizers and the EINN auxiliary objective. Every differentiable piece has a matching backward
// function so trainers can assemble analytic gradients without an autodiff engine.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "epibench/graph.hpp"
#include "epibench/metrics.hpp"
#include "epibench/panel.hpp"

namespace epibench {

// ---------------------------------------------------------------------------------------------------
// Configuration

enum class EpiVariant { sir_incidence, sir_percent, ngm };

inline std::string to_string(EpiVariant v) {
    switch (v) {
    case EpiVariant::sir_incidence: return "sir_incidence";
    case EpiVariant::sir_percent: return "sir_percent";
    case EpiVariant::ngm: return "ngm";
    }
    return "?";
}

struct TidConfig {
    int embed_dim = 4;
    int hidden_width = 8;
};

struct FilterConfig {
    double c = 1.5;
};

struct EpiConfig {
    EpiVariant variant = EpiVariant::sir_incidence;
    double lambda_epi = 0.1;
    double scale_s = 100.0;
    double dt = 1.0;
};

struct EinnConfig {
    double lambda_dyn = 0.1;
    double lambda_data = 0.1;
    double lambda_align = 0.1;
    int basis_degree = 3;
};

struct PatchConfig {
    std::optional<TidConfig> tid;
    std::optional<FilterConfig> filter;
    std::optional<EpiConfig> epi;
    std::optional<EinnConfig> einn;

    bool empty() const { return !tid && !filter && !epi && !einn; }

    /// `tid+filter+ngm`, or `none`.
    std::string label() const {
        std::string s;
        auto add = [&](const std::string& p) { s += (s.empty() ? "" : "+") + p; };
        if (tid) add("tid");
        if (filter) add("filter");
        if (epi) add(to_string(epi->variant));
        if (einn) add("einn");
        return s.empty() ? "none" : s;
    }

    void validate() const {
        if (tid) {
            detail::require(tid->embed_dim >= 1 && tid->hidden_width >= 1, "tid dimensions must be >= 1");
        }
        if (filter) {
            detail::require(filter->c >= 0.0, "filter c must be >= 0");
        }
        if (epi) {
            detail::require(epi->lambda_epi >= 0.0, "lambda_epi must be >= 0");
            detail::require(epi->dt > 0.0, "dt must be > 0");
            detail::require(epi->scale_s > 0.0, "scale_s must be > 0");
        }
        if (einn) {
            detail::require(einn->lambda_dyn >= 0.0 && einn->lambda_data >= 0.0 && einn->lambda_align >= 0.0,
                            "einn lambdas must be >= 0");
            detail::require(einn->basis_degree >= 1, "einn basis_degree must be >= 1");
        }
    }
};

inline nlohmann::json to_json(const PatchConfig& p) {
    nlohmann::json j = nlohmann::json::object();
    if (p.tid) {
        j["tid"] = {{"embed_dim", p.tid->embed_dim}, {"hidden_width", p.tid->hidden_width}};
    }
    if (p.filter) {
        j["filter"] = {{"c", p.filter->c}};
    }
    if (p.epi) {
        j[to_string(p.epi->variant)] = {
            {"lambda_epi", p.epi->lambda_epi}, {"scale_s", p.epi->scale_s}, {"dt", p.epi->dt}};
    }
    if (p.einn) {
        j["einn"] = {{"lambda_dyn", p.einn->lambda_dyn},
                     {"lambda_data", p.einn->lambda_data},
                     {"lambda_align", p.einn->lambda_align},
                     {"basis_degree", p.einn->basis_degree}};
    }
    return j;
}

inline PatchConfig patch_config_from_json(const nlohmann::json& j) {
    PatchConfig p;
    if (j.is_null()) {
        return p;
    }
    detail::require(j.is_object(), "patches must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        const auto& v = value.is_null() ? nlohmann::json::object() : value;
        if (key == "tid") {
            TidConfig t;
            t.embed_dim = v.value("embed_dim", t.embed_dim);
            t.hidden_width = v.value("hidden_width", t.hidden_width);
            p.tid = t;
        } else if (key == "filter") {
            FilterConfig f;
            f.c = v.value("c", f.c);
            p.filter = f;
        } else if (key == "sir_incidence" || key == "sir_percent" || key == "ngm") {
            detail::require(!p.epi, "only one epi-aware variant may be active");
            EpiConfig e;
            e.variant = key == "sir_incidence" ? EpiVariant::sir_incidence
                        : key == "sir_percent" ? EpiVariant::sir_percent
                                               : EpiVariant::ngm;
            e.lambda_epi = v.value("lambda_epi", e.lambda_epi);
            e.scale_s = v.value("scale_s", e.scale_s);
            e.dt = v.value("dt", e.dt);
            p.epi = e;
        } else if (key == "einn") {
            EinnConfig e;
            e.lambda_dyn = v.value("lambda_dyn", e.lambda_dyn);
            e.lambda_data = v.value("lambda_data", e.lambda_data);
            e.lambda_align = v.value("lambda_align", e.lambda_align);
            e.basis_degree = v.value("basis_degree", e.basis_degree);
            p.einn = e;
        } else {
            throw ValidationError("unknown patch '" + key + "'");
        }
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------------------------------
// TID: calendar-indicator embedding -> tanh MLP -> node-level additive correction

struct TidHead {
    Eigen::MatrixXd embedding; // categories x embed_dim
    Eigen::MatrixXd w1;        // hidden x embed_dim
    Eigen::VectorXd b1;        // hidden
    Eigen::MatrixXd w2;        // n x hidden
    Eigen::VectorXd b2;        // n

    static TidHead zeros(int categories, int embed_dim, int hidden, Eigen::Index n) {
        return TidHead{Eigen::MatrixXd::Zero(categories, embed_dim), Eigen::MatrixXd::Zero(hidden, embed_dim),
                       Eigen::VectorXd::Zero(hidden), Eigen::MatrixXd::Zero(n, hidden), Eigen::VectorXd::Zero(n)};
    }

    int categories() const { return static_cast<int>(embedding.rows()); }

    /// Indicators are 1-based calendar codes (ISO weekday or ISO week).
    Eigen::Index row_of(int indicator) const {
        if (indicator < 1 || indicator > categories()) {
            throw ValidationError("calendar indicator " + std::to_string(indicator) + " outside 1.." +
                                  std::to_string(categories()));
        }
        return indicator - 1;
    }
};

inline Eigen::VectorXd tid_correction(const TidHead& head, int indicator) {
    const Eigen::VectorXd e = head.embedding.row(head.row_of(indicator)).transpose();
    const Eigen::VectorXd hidden = (head.w1 * e + head.b1).array().tanh().matrix();
    return head.w2 * hidden + head.b2;
}

inline Eigen::VectorXd apply_tid(const Eigen::VectorXd& base_prediction, int indicator, const TidHead& head) {
    detail::require(head.w2.rows() == base_prediction.size(), "tid head output size does not match prediction");
    return base_prediction + tid_correction(head, indicator);
}

/// Accumulates dLoss/dhead given dLoss/dcorrection.
inline void tid_backward(const TidHead& head, int indicator, const Eigen::VectorXd& g_correction, TidHead& grad) {
    const auto row = head.row_of(indicator);
    const Eigen::VectorXd e = head.embedding.row(row).transpose();
    const Eigen::VectorXd hidden = (head.w1 * e + head.b1).array().tanh().matrix();
    grad.b2 += g_correction;
    grad.w2 += g_correction * hidden.transpose();
    const Eigen::VectorXd g_hidden = head.w2.transpose() * g_correction;
    const Eigen::VectorXd g_pre = (g_hidden.array() * (1.0 - hidden.array().square())).matrix();
    grad.b1 += g_pre;
    grad.w1 += g_pre * e.transpose();
    grad.embedding.row(row) += (head.w1.transpose() * g_pre).transpose();
}

// ---------------------------------------------------------------------------------------------------
// Filtered loss

struct FilteredLoss {
    double value = 0.0;
    Eigen::MatrixXd gradient; // d value / d predictions, zero in masked entries
    std::size_t kept = 0;
    bool all_masked = false;
};

/// MSE over target entries that pass the IQR/zero filter, fences computed over this batch's targets.
inline FilteredLoss filtered_loss(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets, double c) {
    detail::require(predictions.size() > 0, "filtered_loss: empty batch");
    detail::require(predictions.rows() == targets.rows() && predictions.cols() == targets.cols(),
                    "filtered_loss: shape mismatch");
    const auto mask = build_filter_mask(std::span<const double>(targets.data(), static_cast<std::size_t>(targets.size())), c);
    FilteredLoss out;
    out.gradient = Eigen::MatrixXd::Zero(predictions.rows(), predictions.cols());
    out.kept = mask.kept();
    if (out.kept == 0) {
        out.all_masked = true;
        return out;
    }
    const double inv = 1.0 / static_cast<double>(out.kept);
    for (Eigen::Index k = 0; k < predictions.size(); ++k) {
        if (!mask.keep[static_cast<std::size_t>(k)]) {
            continue;
        }
        const double e = predictions.data()[k] - targets.data()[k];
        out.value += e * e * inv;
        out.gradient.data()[k] = 2.0 * e * inv;
    }
    return out;
}

// ---------------------------------------------------------------------------------------------------
// Rate head: per-node summary features -> softplus -> (beta, gamma)

struct SirState {
    Eigen::VectorXd S;
    Eigen::VectorXd I;
    Eigen::VectorXd R;
};

struct EpiRates {
    Eigen::VectorXd beta;
    Eigen::VectorXd gamma;
};

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

/// Number of rate-head inputs: three history summaries plus the base forecaster's prediction.
inline constexpr int kRateFeatures = 4;

/// log1p-transformed last value, window mean and OLS window slope per node (n x 3).
inline Eigen::MatrixXd rate_history_features(const Eigen::MatrixXd& history) {
    const auto L = history.rows();
    const auto n = history.cols();
    Eigen::MatrixXd f(n, 3);
    const double xbar = static_cast<double>(L - 1) / 2.0;
    double sxx = 0.0;
    for (Eigen::Index l = 0; l < L; ++l) {
        sxx += (static_cast<double>(l) - xbar) * (static_cast<double>(l) - xbar);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd y = history.col(i).unaryExpr([](double v) { return std::log1p(std::max(v, 0.0)); });
        const double mean = y.mean();
        double sxy = 0.0;
        for (Eigen::Index l = 0; l < L; ++l) {
            sxy += (static_cast<double>(l) - xbar) * (y(l) - mean);
        }
        f(i, 0) = y(L - 1);
        f(i, 1) = mean;
        f(i, 2) = sxx > 0.0 ? sxy / sxx : 0.0;
    }
    return f;
}

struct RateHeadParams {
    Eigen::VectorXd beta_w = Eigen::VectorXd::Zero(kRateFeatures);
    double beta_b = softplus_inverse(0.3);
    Eigen::VectorXd gamma_w = Eigen::VectorXd::Zero(kRateFeatures);
    double gamma_b = softplus_inverse(0.1);
};

/// Keeps diag(gamma) - P strictly diagonally dominant when added to gamma.
inline constexpr double kNgmMargin = 1e-2;

struct RateHeadOutput {
    EpiRates rates;
    Eigen::VectorXd beta_pre;  // pre-activation
    Eigen::VectorXd gamma_pre;
    Eigen::MatrixXd features;  // n x kRateFeatures
};

/// gamma_offset is zero for the SIR variants and rowsum(P) + margin for NGM.
inline RateHeadOutput rate_head(const Eigen::MatrixXd& history_features, const Eigen::VectorXd& base_prediction,
                                const RateHeadParams& params, const Eigen::VectorXd& gamma_offset) {
    const auto n = history_features.rows();
    RateHeadOutput out;
    out.features.resize(n, kRateFeatures);
    out.features.leftCols(3) = history_features;
    out.features.col(3) = base_prediction;
    out.beta_pre = out.features * params.beta_w + Eigen::VectorXd::Constant(n, params.beta_b);
    out.gamma_pre = out.features * params.gamma_w + Eigen::VectorXd::Constant(n, params.gamma_b);
    out.rates.beta = out.beta_pre.unaryExpr([](double x) { return softplus(x); });
    out.rates.gamma = out.gamma_pre.unaryExpr([](double x) { return softplus(x); }) + gamma_offset;
    return out;
}

inline Eigen::VectorXd ngm_gamma_offset(const MixingOperator& P) {
    return (P.matrix().rowwise().sum().array() + kNgmMargin).matrix();
}

struct RateHeadGrad {
    RateHeadParams params{Eigen::VectorXd::Zero(kRateFeatures), 0.0, Eigen::VectorXd::Zero(kRateFeatures), 0.0};
    Eigen::VectorXd base_prediction; // d / d base prediction through the coupling feature
};

inline void rate_head_backward(const RateHeadOutput& fwd, const RateHeadParams& params, const Eigen::VectorXd& g_beta,
                               const Eigen::VectorXd& g_gamma, RateHeadGrad& grad) {
    const Eigen::VectorXd gb = (g_beta.array() * fwd.beta_pre.unaryExpr([](double x) { return sigmoid(x); }).array()).matrix();
    const Eigen::VectorXd gg = (g_gamma.array() * fwd.gamma_pre.unaryExpr([](double x) { return sigmoid(x); }).array()).matrix();
    grad.params.beta_w += fwd.features.transpose() * gb;
    grad.params.beta_b += gb.sum();
    grad.params.gamma_w += fwd.features.transpose() * gg;
    grad.params.gamma_b += gg.sum();
    if (grad.base_prediction.size() != gb.size()) {
        grad.base_prediction = Eigen::VectorXd::Zero(gb.size());
    }
    grad.base_prediction += gb * params.beta_w(3) + gg * params.gamma_w(3);
}

// ---------------------------------------------------------------------------------------------------
// SIR rollout (variants 1 and 2)

/// I0 = last observation clamped to [0, p], R0 = 0, S0 = p - I0.
inline SirState init_sir_states(const Eigen::MatrixXd& history, const PopulationVector& populations) {
    const auto& p = populations.populations;
    detail::require(p.size() == history.cols(), "population vector does not match regions");
    detail::require((p.array() > 0.0).all(), "populations must be positive");
    SirState s;
    s.I = history.row(history.rows() - 1).transpose().cwiseMax(0.0).cwiseMin(p);
    s.R = Eigen::VectorXd::Zero(p.size());
    s.S = p - s.I;
    return s;
}

struct SirStep {
    Eigen::VectorXd S;
    Eigen::VectorXd I;
    Eigen::VectorXd mixed; // P I
    std::vector<bool> z_clamped;
    std::vector<bool> q_clamped;
};

struct SirRollout {
    std::vector<Eigen::VectorXd> incidence; // z^(0) .. z^(h-1)
    Eigen::VectorXd r;                      // z^(h-1)
    SirState final_state;
    std::vector<SirStep> trace;
};

/// Forward Euler with flow clamping: new infections never exceed S and recoveries never exceed I,
/// so every compartment stays nonnegative and S + I + R is conserved per node.
inline SirRollout sir_rollout(const SirState& state0, const EpiRates& rates, const MixingOperator& P,
                              const PopulationVector& populations, double dt, int h) {
    if (h < 1) {
        throw ValidationError("sir_rollout: horizon must be >= 1");
    }
    detail::require(dt > 0.0, "sir_rollout: dt must be > 0");
    const auto& p = populations.populations;
    const auto n = p.size();
    detail::require(P.size() == n && state0.S.size() == n && rates.beta.size() == n && rates.gamma.size() == n,
                    "sir_rollout: dimension mismatch");
    SirRollout out;
    Eigen::VectorXd S = state0.S;
    Eigen::VectorXd I = state0.I;
    Eigen::VectorXd R = state0.R;
    out.trace.reserve(static_cast<std::size_t>(h));
    for (int tau = 0; tau < h; ++tau) {
        SirStep step;
        step.S = S;
        step.I = I;
        step.mixed = P.matrix() * I;
        step.z_clamped.assign(static_cast<std::size_t>(n), false);
        step.q_clamped.assign(static_cast<std::size_t>(n), false);
        Eigen::VectorXd z(n);
        Eigen::VectorXd q(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double zr = dt * rates.beta(i) * (S(i) / p(i)) * step.mixed(i);
            if (zr > S(i)) {
                z(i) = S(i);
                step.z_clamped[static_cast<std::size_t>(i)] = true;
            } else {
                z(i) = zr;
            }
            const double qr = dt * rates.gamma(i) * I(i);
            if (qr > I(i)) {
                q(i) = I(i);
                step.q_clamped[static_cast<std::size_t>(i)] = true;
            } else {
                q(i) = qr;
            }
        }
        S = S - z;
        I = I + z - q;
        R = R + q;
        out.incidence.push_back(z);
        out.trace.push_back(std::move(step));
    }
    out.r = out.incidence.back();
    out.final_state = SirState{S, I, R};
    return out;
}

/// Gradient of a scalar loss with respect to (beta, gamma) given dLoss/dr for r = z^(h-1).
inline EpiRates sir_rollout_backward(const SirRollout& fwd, const EpiRates& rates, const MixingOperator& P,
                                     const PopulationVector& populations, double dt, const Eigen::VectorXd& g_r) {
    const auto& p = populations.populations;
    const auto n = p.size();
    EpiRates g{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
    Eigen::VectorXd aS = Eigen::VectorXd::Zero(n); // adjoint of S after the step being reversed
    Eigen::VectorXd aI = Eigen::VectorXd::Zero(n);
    for (int tau = static_cast<int>(fwd.trace.size()) - 1; tau >= 0; --tau) {
        const auto& st = fwd.trace[static_cast<std::size_t>(tau)];
        Eigen::VectorXd gz = aI - aS;
        if (tau == static_cast<int>(fwd.trace.size()) - 1) {
            gz += g_r;
        }
        const Eigen::VectorXd gq = -aI;
        Eigen::VectorXd nS = aS;
        Eigen::VectorXd nI = aI;
        Eigen::VectorXd g_mixed = Eigen::VectorXd::Zero(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            if (st.q_clamped[k]) {
                nI(i) += gq(i);
            } else {
                nI(i) += gq(i) * dt * rates.gamma(i);
                g.gamma(i) += gq(i) * dt * st.I(i);
            }
            if (st.z_clamped[k]) {
                nS(i) += gz(i);
            } else {
                nS(i) += gz(i) * dt * rates.beta(i) * st.mixed(i) / p(i);
                g.beta(i) += gz(i) * dt * st.S(i) * st.mixed(i) / p(i);
                g_mixed(i) = gz(i) * dt * rates.beta(i) * st.S(i) / p(i);
            }
        }
        nI += P.matrix().transpose() * g_mixed;
        aS = nS;
        aI = nI;
    }
    return g;
}

/// s * r / p elementwise.
inline Eigen::VectorXd sir_percent(const Eigen::VectorXd& r, const PopulationVector& populations, double s) {
    detail::require(r.size() == populations.populations.size(), "sir_percent: dimension mismatch");
    return (s * r.array() / populations.populations.array()).matrix();
}

// ---------------------------------------------------------------------------------------------------
// NGM propagation (variant 3): r = diag(beta) (diag(gamma) - P)^{-1} x, solved without forming K

struct NgmResult {
    Eigen::VectorXd r;
    Eigen::VectorXd u; // (diag(gamma) - P)^{-1} x
    Eigen::PartialPivLU<Eigen::MatrixXd> lu;
};

inline NgmResult ngm_solve(const Eigen::VectorXd& beta, const Eigen::VectorXd& gamma, const Eigen::MatrixXd& P,
                           const Eigen::VectorXd& x) {
    const auto n = x.size();
    detail::require(beta.size() == n && gamma.size() == n && P.rows() == n && P.cols() == n,
                    "ngm_propagate: dimension mismatch");
    Eigen::MatrixXd M = -P;
    M.diagonal() += gamma;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double off = M.row(i).cwiseAbs().sum() - std::abs(M(i, i));
        if (!(M(i, i) > off)) {
            throw ValidationError("gamma too small: diag(gamma) - P is not strictly diagonally dominant at row " +
                                  std::to_string(i));
        }
    }
    NgmResult out;
    out.lu = M.partialPivLu();
    out.u = out.lu.solve(x);
    out.r = (beta.array() * out.u.array()).matrix();
    return out;
}

inline Eigen::VectorXd ngm_propagate(const EpiRates& rates, const MixingOperator& P, const Eigen::VectorXd& x_t) {
    return ngm_solve(rates.beta, rates.gamma, P.matrix(), x_t).r;
}

inline EpiRates ngm_backward(const NgmResult& fwd, const Eigen::VectorXd& beta, const Eigen::VectorXd& g_r) {
    EpiRates g;
    g.beta = (g_r.array() * fwd.u.array()).matrix();
    const Eigen::VectorXd g_u = (g_r.array() * beta.array()).matrix();
    const Eigen::VectorXd v = fwd.lu.transpose().solve(g_u);
    g.gamma = -(v.array() * fwd.u.array()).matrix();
    return g;
}

// ---------------------------------------------------------------------------------------------------
// Epi-aware regularized objective

struct TargetScale {
    enum class Kind { counts, rate } kind = Kind::counts;
    Eigen::VectorXd populations; // used by rate
    double s = 100.0;

    static TargetScale counts() { return {}; }
    static TargetScale rate(Eigen::VectorXd pop, double s) { return {Kind::rate, std::move(pop), s}; }

    Eigen::VectorXd apply(const Eigen::VectorXd& target) const {
        if (kind == Kind::counts) {
            return target;
        }
        return (s * target.array() / populations.array()).matrix();
    }
};

inline double epi_auxiliary_mse(const Eigen::VectorXd& r, const Eigen::VectorXd& target_scaled) {
    return (r - target_scaled).squaredNorm() / static_cast<double>(r.size());
}

/// base_loss + lambda * MSE(r, target'), target' the raw or population-normalized target.
inline double epi_regularized_loss(double base_loss, const Eigen::VectorXd& r, const Eigen::VectorXd& target,
                                   double lambda_epi, const TargetScale& scale) {
    detail::require(lambda_epi >= 0.0, "lambda_epi must be >= 0");
    detail::require(r.size() == target.size(), "epi_regularized_loss: dimension mismatch");
    return base_loss + lambda_epi * epi_auxiliary_mse(r, scale.apply(target));
}

// ---------------------------------------------------------------------------------------------------
// EINN: per-node polynomial latent S, I, R fractions of normalized time

struct EinnTimeModule {
    Eigen::MatrixXd s_coef; // n x (degree + 1)
    Eigen::MatrixXd i_coef;
    Eigen::MatrixXd r_coef;
    Eigen::VectorXd beta_raw; // softplus -> beta
    Eigen::VectorXd gamma_raw;
    double time_scale = 1.0; // native steps per unit of normalized time

    int degree() const { return static_cast<int>(s_coef.cols()) - 1; }
    Eigen::Index num_regions() const { return s_coef.rows(); }
};

struct PolyBasis {
    Eigen::VectorXd value; // tau^k
    Eigen::VectorXd deriv; // k tau^(k-1)
};

inline PolyBasis poly_basis(double tau, int degree) {
    PolyBasis b{Eigen::VectorXd::Zero(degree + 1), Eigen::VectorXd::Zero(degree + 1)};
    double pw = 1.0;
    for (int k = 0; k <= degree; ++k) {
        b.value(k) = pw;
        if (k + 1 <= degree) {
            b.deriv(k + 1) = static_cast<double>(k + 1) * pw;
        }
        pw *= tau;
    }
    return b;
}

struct EinnBreakdown {
    double base = 0.0;
    double dyn = 0.0;   // unweighted L_dyn
    double data = 0.0;  // unweighted mean ||r - y||^2
    double align = 0.0; // unweighted mean ||yhat - r||^2
    double total = 0.0;
};

struct EinnGrad {
    EinnTimeModule module;
    Eigen::MatrixXd predictions; // n x N
};

/// Mean squared SIR ODE residual of the latent trajectories at the given normalized times.
/// Residuals use the analytic polynomial derivative (per native step) against the SIR right-hand side.
inline double einn_dynamics_loss(const EinnTimeModule& m, std::span<const double> times, EinnGrad* grad = nullptr,
                                 double weight = 1.0) {
    if (times.empty()) {
        return 0.0;
    }
    const auto n = m.num_regions();
    const int D = m.degree();
    const double count = static_cast<double>(times.size()) * static_cast<double>(n) * 3.0;
    double total = 0.0;
    for (double tau : times) {
        const auto b = poly_basis(tau, D);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double s_raw = m.s_coef.row(i).dot(b.value);
            const double i_raw = m.i_coef.row(i).dot(b.value);
            const double s = std::max(s_raw, 0.0);
            const double inf = std::max(i_raw, 0.0);
            const double ds = m.s_coef.row(i).dot(b.deriv) / m.time_scale;
            const double di = m.i_coef.row(i).dot(b.deriv) / m.time_scale;
            const double dr = m.r_coef.row(i).dot(b.deriv) / m.time_scale;
            const double beta = softplus(m.beta_raw(i));
            const double gamma = softplus(m.gamma_raw(i));
            const double force = beta * s * inf;
            const double e1 = ds + force;
            const double e2 = di - force + gamma * inf;
            const double e3 = dr - gamma * inf;
            total += e1 * e1 + e2 * e2 + e3 * e3;
            if (grad != nullptr) {
                const double c = 2.0 * weight / count;
                const double g_force = c * (e1 - e2);
                const double g_gi = c * (e2 - e3); // d / d(gamma * inf)
                grad->module.s_coef.row(i) += (c * e1 / m.time_scale) * b.deriv.transpose();
                grad->module.i_coef.row(i) += (c * e2 / m.time_scale) * b.deriv.transpose();
                grad->module.r_coef.row(i) += (c * e3 / m.time_scale) * b.deriv.transpose();
                grad->module.beta_raw(i) += g_force * s * inf * sigmoid(m.beta_raw(i));
                grad->module.gamma_raw(i) += g_gi * inf * sigmoid(m.gamma_raw(i));
                const double g_s = g_force * beta * inf;
                const double g_i = g_force * beta * s + g_gi * gamma;
                if (s_raw > 0.0) {
                    grad->module.s_coef.row(i) += g_s * b.value.transpose();
                }
                if (i_raw > 0.0) {
                    grad->module.i_coef.row(i) += g_i * b.value.transpose();
                }
            }
        }
    }
    return total / count;
}

/// Auxiliary incidence r = p * beta * s * i at normalized time tau (counts, since s and i are fractions).
inline Eigen::VectorXd einn_incidence(const EinnTimeModule& m, double tau, const Eigen::VectorXd& populations) {
    const auto b = poly_basis(tau, m.degree());
    Eigen::VectorXd r(m.num_regions());
    for (Eigen::Index i = 0; i < m.num_regions(); ++i) {
        const double s = std::max(m.s_coef.row(i).dot(b.value), 0.0);
        const double inf = std::max(m.i_coef.row(i).dot(b.value), 0.0);
        r(i) = populations(i) * softplus(m.beta_raw(i)) * s * inf;
    }
    return r;
}

/// EINN auxiliary objective for a batch. predictions / targets are n x N, times are the normalized target
/// times of the N samples. total = base + l_dyn * L_dyn + l_data * mean||r - y||^2 + l_align * mean||yhat - r||^2.
inline EinnBreakdown einn_objective(double base_loss, const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets,
                                    std::span<const double> times, const EinnTimeModule& m,
                                    const Eigen::VectorXd& populations, const EinnConfig& weights,
                                    EinnGrad* grad = nullptr) {
    const auto N = predictions.cols();
    detail::require(targets.cols() == N && static_cast<Eigen::Index>(times.size()) == N,
                    "einn_objective: batch size mismatch");
    EinnBreakdown out;
    out.base = base_loss;
    std::set<double> distinct(times.begin(), times.end());
    std::vector<double> colloc(distinct.begin(), distinct.end());
    out.dyn = einn_dynamics_loss(m, colloc, grad, weights.lambda_dyn);
    const int D = m.degree();
    const double invN = 1.0 / static_cast<double>(N);
    for (Eigen::Index k = 0; k < N; ++k) {
        const auto b = poly_basis(times[static_cast<std::size_t>(k)], D);
        for (Eigen::Index i = 0; i < m.num_regions(); ++i) {
            const double s_raw = m.s_coef.row(i).dot(b.value);
            const double i_raw = m.i_coef.row(i).dot(b.value);
            const double s = std::max(s_raw, 0.0);
            const double inf = std::max(i_raw, 0.0);
            const double beta = softplus(m.beta_raw(i));
            const double r = populations(i) * beta * s * inf;
            const double ed = r - targets(i, k);
            const double ea = predictions(i, k) - r;
            out.data += ed * ed * invN;
            out.align += ea * ea * invN;
            if (grad != nullptr) {
                const double g_r = 2.0 * invN * (weights.lambda_data * ed - weights.lambda_align * ea);
                grad->predictions(i, k) += 2.0 * invN * weights.lambda_align * ea;
                grad->module.beta_raw(i) += g_r * populations(i) * s * inf * sigmoid(m.beta_raw(i));
                if (s_raw > 0.0) {
                    grad->module.s_coef.row(i) += g_r * populations(i) * beta * inf * b.value.transpose();
                }
                if (i_raw > 0.0) {
                    grad->module.i_coef.row(i) += g_r * populations(i) * beta * s * b.value.transpose();
                }
            }
        }
    }
    out.total = base_loss + weights.lambda_dyn * out.dyn + weights.lambda_data * out.data +
                weights.lambda_align * out.align;
    return out;
}

} // namespace epibench
