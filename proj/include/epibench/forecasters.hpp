#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "epibench/graph.hpp"
#include "epibench/panel.hpp"
#include "epibench/priors.hpp"

namespace epibench {

enum class ModelKind { naive, ar1, dlinear, graph_linear, external };

inline std::string to_string(ModelKind k) {
    switch (k) {
    case ModelKind::naive: return "naive";
    case ModelKind::ar1: return "ar1";
    case ModelKind::dlinear: return "dlinear";
    case ModelKind::graph_linear: return "graph_linear";
    case ModelKind::external: return "external";
    }
    return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
    if (s == "naive") return ModelKind::naive;
    if (s == "ar1") return ModelKind::ar1;
    if (s == "dlinear") return ModelKind::dlinear;
    if (s == "graph_linear") return ModelKind::graph_linear;
    if (s == "external") return ModelKind::external;
    throw ValidationError("unknown model kind '" + std::string(s) + "'");
}

inline bool is_trainable(ModelKind k) { return k == ModelKind::dlinear || k == ModelKind::graph_linear; }

/// Model family plus hyperparameters. Besides the kind-specific keys (`kernel` for dlinear,
/// `use_mixing` for graph_linear) the map may override training and patch settings:
/// learning_rate, epochs, l2, lambda_epi, lambda_dyn, lambda_data, lambda_align, filter_c.
struct ModelSpec {
    ModelKind kind = ModelKind::naive;
    std::map<std::string, double> hyperparameters;
    int horizon = 1;

    double get(const std::string& key, double fallback) const {
        auto it = hyperparameters.find(key);
        return it == hyperparameters.end() ? fallback : it->second;
    }

    void validate() const {
        detail::require(horizon >= 1, "model horizon must be >= 1");
        if (kind == ModelKind::dlinear) {
            auto it = hyperparameters.find("kernel");
            detail::require(it != hyperparameters.end(), "dlinear requires hyperparameter 'kernel'");
            const double k = it->second;
            detail::require(k >= 1.0 && std::floor(k) == k && static_cast<long>(k) % 2 == 1,
                            "dlinear kernel must be a positive odd integer");
        }
    }
};

enum class LossKind { mse, filtered_mse };

enum class Optimizer { adam, gd };

struct TrainConfig {
    int epochs = 500;
    double learning_rate = 0.01;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::mse;
    double l2 = 0.0;
    Optimizer optimizer = Optimizer::adam;

    void validate() const {
        detail::require(epochs >= 1, "epochs must be >= 1");
        detail::require(learning_rate > 0.0, "learning_rate must be > 0");
        detail::require(l2 >= 0.0, "l2 must be >= 0");
    }
};

/// Shared inputs a model may need beyond the samples.
struct ModelContext {
    Frequency frequency = Frequency::daily;
    std::optional<MixingOperator> mixing;
    std::optional<PopulationVector> populations;
};

// ---------------------------------------------------------------------------------------------------
// Parameter layout

struct ParamBlock {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
};

class ParameterLayout {
public:
    Eigen::Index add(const std::string& name, Eigen::Index size) {
        detail::require(!contains(name), "duplicate parameter block '" + name + "'");
        blocks_.push_back({name, total_, size});
        total_ += size;
        return blocks_.back().offset;
    }
    bool contains(const std::string& name) const {
        return std::any_of(blocks_.begin(), blocks_.end(), [&](const auto& b) { return b.name == name; });
    }
    const ParamBlock& at(const std::string& name) const {
        for (const auto& b : blocks_) {
            if (b.name == name) {
                return b;
            }
        }
        throw ValidationError("parameter block '" + name + "' not in layout");
    }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    Eigen::Index total() const { return total_; }

private:
    std::vector<ParamBlock> blocks_;
    Eigen::Index total_ = 0;
};

struct TrainingDiagnostics {
    double final_train_loss = 0.0;
    double final_validation_loss = 0.0;
    int best_epoch = 0;
    int epochs_run = 0;
    std::vector<double> train_history;      // objective before each update
    std::vector<double> validation_history; // index 0 = initial parameters
};

struct FittedModel {
    ModelSpec spec;
    ParameterLayout layout;
    Eigen::VectorXd parameters;
    PatchConfig patches;
    double input_scale = 1.0;
    Eigen::Index lookback = 0;
    Eigen::Index num_regions = 0;
    int calendar_categories = 7;
    double einn_time_origin = 0.0;
    double einn_time_span = 1.0;
    TrainingDiagnostics diagnostics;

    Eigen::VectorXd block(const std::string& name) const {
        const auto& b = layout.at(name);
        return parameters.segment(b.offset, b.size);
    }
};

// ---------------------------------------------------------------------------------------------------
// Reference forecasters

inline Eigen::VectorXd naive_forecast(const Sample& sample) {
    detail::require(sample.history.rows() >= 1, "naive_forecast: empty history");
    return sample.last_observation();
}

/// Per-region least squares x_{t+1} = c + phi x_t over the finite consecutive pairs of `series` (T x n).
inline FittedModel fit_ar1(const Eigen::MatrixXd& series) {
    const auto T = series.rows();
    const auto n = series.cols();
    FittedModel m;
    m.spec.kind = ModelKind::ar1;
    m.layout.add("intercept", n);
    m.layout.add("phi", n);
    m.parameters = Eigen::VectorXd::Zero(2 * n);
    m.num_regions = n;
    m.lookback = 1;
    for (Eigen::Index j = 0; j < n; ++j) {
        std::vector<double> x;
        std::vector<double> y;
        std::size_t observed = 0;
        for (Eigen::Index t = 0; t < T; ++t) {
            observed += std::isfinite(series(t, j)) ? 1 : 0;
            if (t + 1 < T && std::isfinite(series(t, j)) && std::isfinite(series(t + 1, j))) {
                x.push_back(series(t, j));
                y.push_back(series(t + 1, j));
            }
        }
        if (observed < 3 || x.size() < 2) {
            throw ValidationError("fit_ar1: region " + std::to_string(j) + " needs at least 3 observations");
        }
        const double k = static_cast<double>(x.size());
        double xbar = 0.0;
        double ybar = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            xbar += x[i];
            ybar += y[i];
        }
        xbar /= k;
        ybar /= k;
        double sxx = 0.0;
        double sxy = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            sxx += (x[i] - xbar) * (x[i] - xbar);
            sxy += (x[i] - xbar) * (y[i] - ybar);
        }
        double phi = 0.0;
        double c = ybar;
        if (sxx > 1e-12 * std::max(1.0, xbar * xbar) * k) {
            phi = sxy / sxx;
            c = ybar - phi * xbar;
        }
        m.parameters(j) = c;
        m.parameters(n + j) = phi;
    }
    return m;
}

/// Iterates the fitted recursion h times from the last observation.
inline Eigen::VectorXd ar1_forecast(const FittedModel& model, const Eigen::VectorXd& last, int h) {
    detail::require(model.spec.kind == ModelKind::ar1, "ar1_forecast: model is not ar1");
    detail::require(last.size() == model.num_regions, "ar1_forecast: dimension mismatch");
    const Eigen::VectorXd c = model.block("intercept");
    const Eigen::VectorXd phi = model.block("phi");
    Eigen::VectorXd x = last;
    for (int s = 0; s < h; ++s) {
        x = (c.array() + phi.array() * x.array()).matrix();
    }
    return x;
}

/// Centered moving average along time with edge replication (L x n in, L x n out).
inline Eigen::MatrixXd moving_average_trend(const Eigen::MatrixXd& history, int kernel) {
    const auto L = history.rows();
    const int half = (kernel - 1) / 2;
    Eigen::MatrixXd trend(L, history.cols());
    for (Eigen::Index l = 0; l < L; ++l) {
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(history.cols());
        for (int j = -half; j <= half; ++j) {
            acc += history.row(std::clamp<Eigen::Index>(l + j, 0, L - 1));
        }
        trend.row(l) = acc / static_cast<double>(kernel);
    }
    return trend;
}

/// Per-node linear features (n x L each) of the two branches of a trainable model.
struct LinearFeatures {
    Eigen::MatrixXd first;  // dlinear: trend, graph_linear: raw history
    Eigen::MatrixXd second; // dlinear: remainder, graph_linear: history mixed by P
};

inline LinearFeatures linear_features(const ModelSpec& spec, const Eigen::MatrixXd& history,
                                      const MixingOperator* mixing) {
    LinearFeatures f;
    if (spec.kind == ModelKind::dlinear) {
        const auto trend = moving_average_trend(history, static_cast<int>(spec.get("kernel", 7)));
        f.first = trend.transpose();
        f.second = (history - trend).transpose();
    } else {
        f.first = history.transpose();
        if (mixing != nullptr) {
            detail::require(mixing->size() == history.cols(), "mixing operator dimension does not match regions");
            f.second = mixing->matrix() * history.transpose();
        } else {
            f.second = history.transpose();
        }
    }
    return f;
}

// ---------------------------------------------------------------------------------------------------
// Composed training objective: base loss + active patch terms, with analytic gradient

struct ObjectiveValue {
    double total = 0.0;
    double base = 0.0;
    double epi = 0.0;        // weighted auxiliary term
    double einn_dyn = 0.0;   // unweighted components
    double einn_data = 0.0;
    double einn_align = 0.0;
    double l2 = 0.0;
    bool filter_all_masked = false;
};

class TrainingObjective {
public:
    /// `samples` are already divided by `scale`; populations are divided by it internally.
    TrainingObjective(ModelSpec spec, const std::vector<Sample>& samples, PatchConfig patches, const ModelContext& ctx,
                      double scale, double l2 = 0.0, std::optional<double> filter_c = std::nullopt)
        : spec_(std::move(spec)), patches_(std::move(patches)), l2_(l2) {
        detail::require(is_trainable(spec_.kind), "objective requires a trainable model kind");
        detail::require(!samples.empty(), "objective needs at least one sample");
        spec_.validate();
        patches_.validate();
        if (patches_.filter) {
            filter_c_ = patches_.filter->c;
        } else {
            filter_c_ = filter_c;
        }
        L_ = samples.front().lookback();
        n_ = samples.front().num_regions();
        categories_ = calendar_categories(ctx.frequency);
        use_mixing_ = spec_.kind == ModelKind::graph_linear && spec_.get("use_mixing", 1.0) != 0.0;
        mixing_ = ctx.mixing ? *ctx.mixing : MixingOperator::identity(n_);
        detail::require(mixing_.size() == n_, "mixing operator dimension does not match regions");
        if (patches_.epi || patches_.einn) {
            detail::require(ctx.populations.has_value(), "epi-aware patches require a population vector");
            detail::require(ctx.populations->populations.size() == n_, "population vector does not match regions");
            populations_ = ctx.populations->populations / scale;
        }
        if (patches_.epi && patches_.epi->variant == EpiVariant::ngm) {
            gamma_offset_ = ngm_gamma_offset(mixing_);
        } else {
            gamma_offset_ = Eigen::VectorXd::Zero(n_);
        }
        double tmin = std::numeric_limits<double>::infinity();
        double tmax = -std::numeric_limits<double>::infinity();
        for (const auto& s : samples) {
            detail::require(s.lookback() == L_ && s.num_regions() == n_ && s.horizon == samples.front().horizon,
                            "all samples must share lookback, regions and horizon");
            const double tt = static_cast<double>(s.origin + s.horizon);
            tmin = std::min(tmin, tt);
            tmax = std::max(tmax, tt);
        }
        time_origin_ = tmin;
        time_span_ = std::max(1.0, tmax - tmin);
        for (const auto& s : samples) {
            Prepared p;
            auto f = linear_features(spec_, s.history, use_mixing_ ? &mixing_ : nullptr);
            p.first = std::move(f.first);
            p.second = std::move(f.second);
            p.target = s.target;
            p.last = s.last_observation();
            p.indicator = s.calendar_indicator;
            p.horizon = s.horizon;
            p.tau = (static_cast<double>(s.origin + s.horizon) - time_origin_) / time_span_;
            if (patches_.epi) {
                // Summaries are scale-free: computed on the unscaled history.
                p.rate_features = rate_history_features(s.history * scale);
            }
            prepared_.push_back(std::move(p));
        }
        build_layout();
    }

    /// Overrides the EINN time normalization (used when re-evaluating a fitted model on new samples).
    void set_time_reference(double origin, double span) {
        time_origin_ = origin;
        time_span_ = span;
    }

    const ParameterLayout& layout() const { return layout_; }
    double time_origin() const { return time_origin_; }
    double time_span() const { return time_span_; }
    Eigen::Index num_samples() const { return static_cast<Eigen::Index>(prepared_.size()); }

    /// Persistence-embedded base weights; seeded random TID embeddings and hidden layer.
    Eigen::VectorXd initial_parameters(std::uint64_t seed) const {
        Eigen::VectorXd theta = Eigen::VectorXd::Zero(layout_.total());
        std::mt19937_64 gen(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        auto seg = [&](const std::string& name) { return theta.segment(layout_.at(name).offset, layout_.at(name).size); };
        seg("w_first")(L_ - 1) = 1.0;
        if (spec_.kind == ModelKind::dlinear) {
            seg("w_second")(L_ - 1) = 1.0;
        }
        if (patches_.tid) {
            for (auto& v : seg("tid_embedding")) {
                v = normal(gen);
            }
            const double s = 1.0 / std::sqrt(static_cast<double>(patches_.tid->embed_dim));
            for (auto& v : seg("tid_w1")) {
                v = s * normal(gen);
            }
        }
        if (patches_.epi) {
            const RateHeadParams defaults;
            seg("rate_beta_b")(0) = defaults.beta_b;
            seg("rate_gamma_b")(0) = defaults.gamma_b;
        }
        if (patches_.einn) {
            const int D = patches_.einn->basis_degree;
            Eigen::VectorXd mean_target = Eigen::VectorXd::Zero(n_);
            for (const auto& p : prepared_) {
                mean_target += p.target;
            }
            mean_target /= static_cast<double>(prepared_.size());
            auto s_coef = seg("einn_s");
            auto i_coef = seg("einn_i");
            for (Eigen::Index i = 0; i < n_; ++i) {
                const double frac = std::clamp(mean_target(i) / populations_(i), 1e-6, 0.5);
                i_coef(i) = frac; // column 0 of the n x (D+1) column-major block
                s_coef(i) = 1.0 - frac;
            }
            (void)D;
            seg("einn_beta").setConstant(softplus_inverse(0.3));
            seg("einn_gamma").setConstant(softplus_inverse(0.1));
        }
        return theta;
    }

    /// Base forecaster output (before TID) for prepared sample k.
    Eigen::VectorXd base_prediction(const Eigen::VectorXd& theta, Eigen::Index k) const {
        const auto& p = prepared_[static_cast<std::size_t>(k)];
        return base_output(theta, p.first, p.second);
    }

    /// Final (patched) predictions, n x N.
    Eigen::MatrixXd predictions(const Eigen::VectorXd& theta) const {
        Eigen::MatrixXd out(n_, num_samples());
        std::optional<TidHead> head;
        if (patches_.tid) {
            head = tid_head(theta);
        }
        for (Eigen::Index k = 0; k < num_samples(); ++k) {
            const auto& p = prepared_[static_cast<std::size_t>(k)];
            Eigen::VectorXd y = base_output(theta, p.first, p.second);
            if (head) {
                y += tid_correction(*head, p.indicator);
            }
            out.col(k) = y;
        }
        return out;
    }

    Eigen::MatrixXd targets() const {
        Eigen::MatrixXd Y(n_, num_samples());
        for (Eigen::Index k = 0; k < num_samples(); ++k) {
            Y.col(k) = prepared_[static_cast<std::size_t>(k)].target;
        }
        return Y;
    }

    ObjectiveValue evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr) const {
        detail::require(theta.size() == layout_.total(), "parameter vector length does not match layout");
        const auto N = num_samples();
        ObjectiveValue out;
        if (grad != nullptr) {
            grad->setZero(layout_.total());
        }
        std::optional<TidHead> head;
        if (patches_.tid) {
            head = tid_head(theta);
        }
        Eigen::MatrixXd base(n_, N);
        Eigen::MatrixXd pred(n_, N);
        for (Eigen::Index k = 0; k < N; ++k) {
            const auto& p = prepared_[static_cast<std::size_t>(k)];
            base.col(k) = base_output(theta, p.first, p.second);
            pred.col(k) = base.col(k);
            if (head) {
                pred.col(k) += tid_correction(*head, p.indicator);
            }
        }
        const Eigen::MatrixXd Y = targets();

        // dLoss/dpred and the extra dLoss/dbase through the rate-head coupling feature.
        Eigen::MatrixXd g_pred = Eigen::MatrixXd::Zero(n_, N);
        Eigen::MatrixXd g_base_extra = Eigen::MatrixXd::Zero(n_, N);

        if (filter_c_) {
            auto fl = filtered_loss(pred, Y, *filter_c_);
            out.base = fl.value;
            out.filter_all_masked = fl.all_masked;
            g_pred += fl.gradient;
        } else {
            const double inv = 1.0 / static_cast<double>(n_ * N);
            const Eigen::MatrixXd e = pred - Y;
            out.base = e.squaredNorm() * inv;
            g_pred += 2.0 * inv * e;
        }

        if (patches_.epi) {
            const auto& cfg = *patches_.epi;
            const RateHeadParams rp = rate_params(theta);
            RateHeadGrad rg;
            const double w = cfg.lambda_epi / static_cast<double>(N);
            const PopulationVector pop{populations_};
            for (Eigen::Index k = 0; k < N; ++k) {
                const auto& p = prepared_[static_cast<std::size_t>(k)];
                const auto head_out = rate_head(p.rate_features, base.col(k), rp, gamma_offset_);
                const auto& rates = head_out.rates;
                Eigen::VectorXd r;
                Eigen::VectorXd target = p.target;
                std::optional<SirRollout> roll;
                std::optional<NgmResult> ngm;
                if (cfg.variant == EpiVariant::ngm) {
                    ngm = ngm_solve(rates.beta, rates.gamma, mixing_.matrix(), p.last);
                    r = ngm->r;
                } else {
                    const Eigen::MatrixXd last_row = p.last.transpose();
                    roll = sir_rollout(init_sir_states(last_row, pop), rates, mixing_, pop, cfg.dt, p.horizon);
                    r = roll->r;
                    if (cfg.variant == EpiVariant::sir_percent) {
                        r = sir_percent(r, pop, cfg.scale_s);
                        target = sir_percent(target, pop, cfg.scale_s);
                    }
                }
                const double aux = epi_auxiliary_mse(r, target);
                out.epi += w * aux;
                if (grad != nullptr && cfg.lambda_epi != 0.0) {
                    Eigen::VectorXd g_r = (2.0 * w / static_cast<double>(n_)) * (r - target);
                    EpiRates g_rates;
                    if (ngm) {
                        g_rates = ngm_backward(*ngm, rates.beta, g_r);
                    } else {
                        if (cfg.variant == EpiVariant::sir_percent) {
                            g_r = (g_r.array() * cfg.scale_s / populations_.array()).matrix();
                        }
                        g_rates = sir_rollout_backward(*roll, rates, mixing_, pop, cfg.dt, g_r);
                    }
                    rg.base_prediction = Eigen::VectorXd::Zero(n_);
                    rate_head_backward(head_out, rp, g_rates.beta, g_rates.gamma, rg);
                    g_base_extra.col(k) += rg.base_prediction;
                }
            }
            if (grad != nullptr) {
                put(*grad, "rate_beta_w", rg.params.beta_w);
                put(*grad, "rate_gamma_w", rg.params.gamma_w);
                (*grad)(layout_.at("rate_beta_b").offset) = rg.params.beta_b;
                (*grad)(layout_.at("rate_gamma_b").offset) = rg.params.gamma_b;
            }
        }

        if (patches_.einn) {
            const auto module = einn_module(theta);
            std::vector<double> times;
            times.reserve(static_cast<std::size_t>(N));
            for (const auto& p : prepared_) {
                times.push_back(p.tau);
            }
            std::optional<EinnGrad> eg;
            if (grad != nullptr) {
                eg = zero_einn_grad(module, N);
            }
            const auto bd = einn_objective(0.0, pred, Y, times, module, populations_, *patches_.einn,
                                           eg ? &*eg : nullptr);
            out.einn_dyn = bd.dyn;
            out.einn_data = bd.data;
            out.einn_align = bd.align;
            if (eg) {
                g_pred += eg->predictions;
                put(*grad, "einn_s", eg->module.s_coef.reshaped());
                put(*grad, "einn_i", eg->module.i_coef.reshaped());
                put(*grad, "einn_r", eg->module.r_coef.reshaped());
                put(*grad, "einn_beta", eg->module.beta_raw);
                put(*grad, "einn_gamma", eg->module.gamma_raw);
            }
        }

        if (l2_ > 0.0) {
            for (const char* name : {"w_first", "w_second", "bias"}) {
                const auto& b = layout_.at(name);
                out.l2 += l2_ * theta.segment(b.offset, b.size).squaredNorm();
                if (grad != nullptr) {
                    grad->segment(b.offset, b.size) += 2.0 * l2_ * theta.segment(b.offset, b.size);
                }
            }
        }

        out.total = out.base + out.epi + out.l2;
        if (patches_.einn) {
            const auto& e = *patches_.einn;
            out.total += e.lambda_dyn * out.einn_dyn + e.lambda_data * out.einn_data + e.lambda_align * out.einn_align;
        }

        if (grad != nullptr) {
            if (head) {
                TidHead g = TidHead::zeros(head->categories(), static_cast<int>(head->embedding.cols()),
                                           static_cast<int>(head->w1.rows()), n_);
                for (Eigen::Index k = 0; k < N; ++k) {
                    tid_backward(*head, prepared_[static_cast<std::size_t>(k)].indicator, g_pred.col(k), g);
                }
                put(*grad, "tid_embedding", g.embedding.reshaped());
                put(*grad, "tid_w1", g.w1.reshaped());
                put(*grad, "tid_b1", g.b1);
                put(*grad, "tid_w2", g.w2.reshaped());
                put(*grad, "tid_b2", g.b2);
            }
            const Eigen::MatrixXd g_base = g_pred + g_base_extra;
            Eigen::VectorXd g_first = Eigen::VectorXd::Zero(L_);
            Eigen::VectorXd g_second = Eigen::VectorXd::Zero(L_);
            Eigen::VectorXd g_bias = Eigen::VectorXd::Zero(layout_.at("bias").size);
            for (Eigen::Index k = 0; k < N; ++k) {
                const auto& p = prepared_[static_cast<std::size_t>(k)];
                g_first += p.first.transpose() * g_base.col(k);
                if (spec_.kind == ModelKind::dlinear || use_mixing_) {
                    g_second += p.second.transpose() * g_base.col(k);
                }
                if (spec_.kind == ModelKind::dlinear) {
                    g_bias(0) += g_base.col(k).sum();
                } else {
                    g_bias += g_base.col(k);
                }
            }
            grad->segment(layout_.at("w_first").offset, L_) += g_first;
            grad->segment(layout_.at("w_second").offset, L_) += g_second;
            grad->segment(layout_.at("bias").offset, g_bias.size()) += g_bias;
        }
        return out;
    }

    TidHead tid_head(const Eigen::VectorXd& theta) const {
        const int E = patches_.tid->embed_dim;
        const int H = patches_.tid->hidden_width;
        return TidHead{matrix(theta, "tid_embedding", categories_, E), matrix(theta, "tid_w1", H, E),
                       vec(theta, "tid_b1"), matrix(theta, "tid_w2", n_, H), vec(theta, "tid_b2")};
    }

    RateHeadParams rate_params(const Eigen::VectorXd& theta) const {
        RateHeadParams rp;
        rp.beta_w = vec(theta, "rate_beta_w");
        rp.beta_b = theta(layout_.at("rate_beta_b").offset);
        rp.gamma_w = vec(theta, "rate_gamma_w");
        rp.gamma_b = theta(layout_.at("rate_gamma_b").offset);
        return rp;
    }

    EinnTimeModule einn_module(const Eigen::VectorXd& theta) const {
        const int cols = patches_.einn->basis_degree + 1;
        EinnTimeModule m;
        m.s_coef = matrix(theta, "einn_s", n_, cols);
        m.i_coef = matrix(theta, "einn_i", n_, cols);
        m.r_coef = matrix(theta, "einn_r", n_, cols);
        m.beta_raw = vec(theta, "einn_beta");
        m.gamma_raw = vec(theta, "einn_gamma");
        m.time_scale = time_span_;
        return m;
    }

    const PatchConfig& patches() const { return patches_; }
    const ModelSpec& spec() const { return spec_; }
    int categories() const { return categories_; }

private:
    struct Prepared {
        Eigen::MatrixXd first;
        Eigen::MatrixXd second;
        Eigen::VectorXd target;
        Eigen::VectorXd last;
        Eigen::MatrixXd rate_features;
        int indicator = 1;
        int horizon = 1;
        double tau = 0.0;
    };

    void build_layout() {
        layout_.add("w_first", L_);
        layout_.add("w_second", L_);
        layout_.add("bias", spec_.kind == ModelKind::dlinear ? 1 : n_);
        if (patches_.tid) {
            const int E = patches_.tid->embed_dim;
            const int H = patches_.tid->hidden_width;
            layout_.add("tid_embedding", categories_ * E);
            layout_.add("tid_w1", H * E);
            layout_.add("tid_b1", H);
            layout_.add("tid_w2", n_ * H);
            layout_.add("tid_b2", n_);
        }
        if (patches_.epi) {
            layout_.add("rate_beta_w", kRateFeatures);
            layout_.add("rate_beta_b", 1);
            layout_.add("rate_gamma_w", kRateFeatures);
            layout_.add("rate_gamma_b", 1);
        }
        if (patches_.einn) {
            const int cols = patches_.einn->basis_degree + 1;
            layout_.add("einn_s", n_ * cols);
            layout_.add("einn_i", n_ * cols);
            layout_.add("einn_r", n_ * cols);
            layout_.add("einn_beta", n_);
            layout_.add("einn_gamma", n_);
        }
    }

    Eigen::VectorXd base_output(const Eigen::VectorXd& theta, const Eigen::MatrixXd& first,
                                const Eigen::MatrixXd& second) const {
        const auto& bf = layout_.at("w_first");
        Eigen::VectorXd y = first * theta.segment(bf.offset, L_);
        if (spec_.kind == ModelKind::dlinear || use_mixing_) {
            y += second * theta.segment(layout_.at("w_second").offset, L_);
        }
        const auto& bb = layout_.at("bias");
        if (bb.size == 1) {
            y.array() += theta(bb.offset);
        } else {
            y += theta.segment(bb.offset, bb.size);
        }
        return y;
    }

    Eigen::VectorXd vec(const Eigen::VectorXd& theta, const std::string& name) const {
        const auto& b = layout_.at(name);
        return theta.segment(b.offset, b.size);
    }

    Eigen::MatrixXd matrix(const Eigen::VectorXd& theta, const std::string& name, Eigen::Index rows,
                           Eigen::Index cols) const {
        const auto& b = layout_.at(name);
        return Eigen::Map<const Eigen::MatrixXd>(theta.data() + b.offset, rows, cols);
    }

    template <typename Expr>
    void put(Eigen::VectorXd& grad, const std::string& name, const Expr& values) const {
        const auto& b = layout_.at(name);
        grad.segment(b.offset, b.size) += values;
    }

    EinnGrad zero_einn_grad(const EinnTimeModule& m, Eigen::Index N) const {
        EinnGrad g;
        g.module.s_coef = Eigen::MatrixXd::Zero(m.s_coef.rows(), m.s_coef.cols());
        g.module.i_coef = Eigen::MatrixXd::Zero(m.i_coef.rows(), m.i_coef.cols());
        g.module.r_coef = Eigen::MatrixXd::Zero(m.r_coef.rows(), m.r_coef.cols());
        g.module.beta_raw = Eigen::VectorXd::Zero(n_);
        g.module.gamma_raw = Eigen::VectorXd::Zero(n_);
        g.predictions = Eigen::MatrixXd::Zero(n_, N);
        return g;
    }

    ModelSpec spec_;
    PatchConfig patches_;
    double l2_ = 0.0;
    std::optional<double> filter_c_;
    Eigen::Index L_ = 0;
    Eigen::Index n_ = 0;
    int categories_ = 7;
    bool use_mixing_ = false;
    MixingOperator mixing_;
    Eigen::VectorXd populations_;
    Eigen::VectorXd gamma_offset_;
    double time_origin_ = 0.0;
    double time_span_ = 1.0;
    std::vector<Prepared> prepared_;
    ParameterLayout layout_;
};

// ---------------------------------------------------------------------------------------------------
// Full-batch gradient descent with checkpoint-best selection

struct DescentResult {
    Eigen::VectorXd best;
    TrainingDiagnostics diagnostics;
};

/// `objective(theta, grad)` returns the loss and fills the gradient; `validation(theta)` scores a
/// candidate. The parameters with the lowest validation loss (initial parameters included) are returned.
/// Adam uses the usual moment decays 0.9 / 0.999 with bias correction.
inline DescentResult gradient_descent(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& objective,
                                      const std::function<double(const Eigen::VectorXd&)>& validation,
                                      Eigen::VectorXd theta, int epochs, double learning_rate,
                                      Optimizer optimizer = Optimizer::gd) {
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    DescentResult out;
    auto& d = out.diagnostics;
    Eigen::VectorXd grad(theta.size());
    Eigen::VectorXd m1 = Eigen::VectorXd::Zero(theta.size());
    Eigen::VectorXd m2 = Eigen::VectorXd::Zero(theta.size());
    double best_val = validation(theta);
    if (!std::isfinite(best_val)) {
        throw RuntimeFailure("non-finite validation loss at epoch 0");
    }
    d.validation_history.push_back(best_val);
    out.best = theta;
    d.best_epoch = 0;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        const double loss = objective(theta, grad);
        if (!std::isfinite(loss) || !grad.allFinite()) {
            throw RuntimeFailure("non-finite loss at epoch " + std::to_string(epoch));
        }
        d.train_history.push_back(loss);
        if (optimizer == Optimizer::adam) {
            m1 = b1 * m1 + (1.0 - b1) * grad;
            m2 = b2 * m2 + (1.0 - b2) * grad.cwiseProduct(grad);
            const double c1 = 1.0 - std::pow(b1, epoch);
            const double c2 = 1.0 - std::pow(b2, epoch);
            theta.array() -= learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
        } else {
            theta -= learning_rate * grad;
        }
        const double val = validation(theta);
        if (!std::isfinite(val)) {
            throw RuntimeFailure("non-finite validation loss at epoch " + std::to_string(epoch));
        }
        d.validation_history.push_back(val);
        if (val < best_val) {
            best_val = val;
            out.best = theta;
            d.best_epoch = epoch;
        }
        d.epochs_run = epoch;
    }
    d.final_validation_loss = best_val;
    d.final_train_loss = objective(out.best, grad);
    return out;
}

// ---------------------------------------------------------------------------------------------------
// Training entry point

/// Applies hyperparameter overrides carried by the ModelSpec to the training and patch configuration.
inline std::pair<TrainConfig, PatchConfig> resolve_settings(const ModelSpec& spec, TrainConfig config,
                                                            PatchConfig patches) {
    config.learning_rate = spec.get("learning_rate", config.learning_rate);
    config.epochs = static_cast<int>(spec.get("epochs", config.epochs));
    config.l2 = spec.get("l2", config.l2);
    if (patches.epi) {
        patches.epi->lambda_epi = spec.get("lambda_epi", patches.epi->lambda_epi);
    }
    if (patches.einn) {
        patches.einn->lambda_dyn = spec.get("lambda_dyn", patches.einn->lambda_dyn);
        patches.einn->lambda_data = spec.get("lambda_data", patches.einn->lambda_data);
        patches.einn->lambda_align = spec.get("lambda_align", patches.einn->lambda_align);
    }
    if (patches.filter) {
        patches.filter->c = spec.get("filter_c", patches.filter->c);
    }
    return {config, patches};
}

inline std::vector<Sample> scale_samples(const std::vector<Sample>& samples, double scale) {
    std::vector<Sample> out = samples;
    for (auto& s : out) {
        s.history /= scale;
        s.target /= scale;
    }
    return out;
}

/// Root mean square of all training histories and targets; 1 when the data are identically zero.
inline double data_scale(const std::vector<Sample>& samples) {
    double sum = 0.0;
    double count = 0.0;
    for (const auto& s : samples) {
        sum += s.history.squaredNorm() + s.target.squaredNorm();
        count += static_cast<double>(s.history.size() + s.target.size());
    }
    const double rms = count > 0.0 ? std::sqrt(sum / count) : 0.0;
    return rms > 0.0 && std::isfinite(rms) ? rms : 1.0;
}

/// Fits a trainable model by full-batch gradient descent on the composed objective. Data are divided by
/// their RMS before fitting (populations alike) and predictions are mapped back on the way out.
inline FittedModel train(const ModelSpec& spec, const std::vector<Sample>& train_samples,
                         const std::vector<Sample>& validation_samples, const TrainConfig& base_config,
                         const PatchConfig& base_patches, const ModelContext& ctx) {
    detail::require(is_trainable(spec.kind), "train: model kind '" + to_string(spec.kind) + "' is not trainable");
    detail::require(!train_samples.empty(), "train: no training samples");
    if (validation_samples.empty()) {
        throw ValidationError("train: empty validation set");
    }
    auto [config, patches] = resolve_settings(spec, base_config, base_patches);
    config.validate();
    patches.validate();
    spec.validate();

    const double scale = data_scale(train_samples);
    const auto scaled_train = scale_samples(train_samples, scale);
    const auto scaled_val = scale_samples(validation_samples, scale);
    std::optional<double> loss_c;
    if (config.loss == LossKind::filtered_mse) {
        loss_c = FilterConfig{}.c;
    }
    TrainingObjective objective(spec, scaled_train, patches, ctx, scale, config.l2, loss_c);
    // Validation scores the forecast itself: plain MSE of patched predictions.
    PatchConfig val_patches;
    val_patches.tid = patches.tid;
    TrainingObjective val_objective(spec, scaled_val, val_patches, ctx, scale);
    auto map_to_validation = [&](const Eigen::VectorXd& theta) {
        Eigen::VectorXd v(val_objective.layout().total());
        for (const auto& b : val_objective.layout().blocks()) {
            const auto& src = objective.layout().at(b.name);
            v.segment(b.offset, b.size) = theta.segment(src.offset, src.size);
        }
        return v;
    };
    auto obj = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) {
        return objective.evaluate(theta, &grad).total;
    };
    auto val = [&](const Eigen::VectorXd& theta) {
        const Eigen::MatrixXd e = val_objective.predictions(map_to_validation(theta)) - val_objective.targets();
        return e.squaredNorm() / static_cast<double>(e.size());
    };
    auto result = gradient_descent(obj, val, objective.initial_parameters(config.seed), config.epochs,
                                   config.learning_rate, config.optimizer);

    FittedModel m;
    m.spec = spec;
    m.layout = objective.layout();
    m.parameters = std::move(result.best);
    m.patches = patches;
    m.input_scale = scale;
    m.lookback = train_samples.front().lookback();
    m.num_regions = train_samples.front().num_regions();
    m.calendar_categories = objective.categories();
    m.einn_time_origin = objective.time_origin();
    m.einn_time_span = objective.time_span();
    m.diagnostics = std::move(result.diagnostics);
    return m;
}

namespace detail {

inline Eigen::VectorXd linear_model_forecast(const Sample& sample, const MixingOperator* mixing,
                                             const FittedModel& model) {
    if (sample.lookback() != model.lookback || sample.num_regions() != model.num_regions) {
        throw ValidationError("forecast: sample shape " + std::to_string(sample.lookback()) + "x" +
                              std::to_string(sample.num_regions()) + " does not match model " +
                              std::to_string(model.lookback) + "x" + std::to_string(model.num_regions));
    }
    const bool use_second = model.spec.kind == ModelKind::dlinear || model.spec.get("use_mixing", 1.0) != 0.0;
    const Eigen::MatrixXd history = sample.history / model.input_scale;
    const auto f = linear_features(model.spec, history, use_second ? mixing : nullptr);
    Eigen::VectorXd y = f.first * model.block("w_first");
    if (use_second) {
        y += f.second * model.block("w_second");
    }
    const Eigen::VectorXd bias = model.block("bias");
    if (bias.size() == 1) {
        y.array() += bias(0);
    } else {
        y += bias;
    }
    if (model.patches.tid) {
        const int E = model.patches.tid->embed_dim;
        const int H = model.patches.tid->hidden_width;
        const auto n = model.num_regions;
        auto mat = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
            return Eigen::Map<const Eigen::MatrixXd>(model.parameters.data() + model.layout.at(name).offset, r, c);
        };
        TidHead head{mat("tid_embedding", model.calendar_categories, E), mat("tid_w1", H, E), model.block("tid_b1"),
                     mat("tid_w2", n, H), model.block("tid_b2")};
        y = apply_tid(y, sample.calendar_indicator, head);
    }
    return y * model.input_scale;
}

} // namespace detail

inline Eigen::VectorXd forecast_dlinear(const Sample& sample, const FittedModel& model) {
    detail::require(model.spec.kind == ModelKind::dlinear, "forecast_dlinear: model is not dlinear");
    return detail::linear_model_forecast(sample, nullptr, model);
}

inline Eigen::VectorXd forecast_graph_linear(const Sample& sample, const MixingOperator& P, const FittedModel& model) {
    detail::require(model.spec.kind == ModelKind::graph_linear, "forecast_graph_linear: model is not graph_linear");
    if (P.size() != sample.num_regions()) {
        throw ValidationError("forecast_graph_linear: mixing operator dimension does not match regions");
    }
    return detail::linear_model_forecast(sample, &P, model);
}

/// Builds a linear model by hand (no training), e.g. to embed persistence.
inline FittedModel make_linear_model(ModelKind kind, Eigen::Index lookback, Eigen::Index n,
                                     const Eigen::VectorXd& w_first, const Eigen::VectorXd& w_second,
                                     const Eigen::VectorXd& bias, std::map<std::string, double> hyper = {}) {
    detail::require(is_trainable(kind), "make_linear_model: kind must be dlinear or graph_linear");
    FittedModel m;
    m.spec.kind = kind;
    m.spec.hyperparameters = std::move(hyper);
    if (kind == ModelKind::dlinear && !m.spec.hyperparameters.count("kernel")) {
        m.spec.hyperparameters["kernel"] = 3;
    }
    m.layout.add("w_first", lookback);
    m.layout.add("w_second", lookback);
    m.layout.add("bias", bias.size());
    detail::require(w_first.size() == lookback && w_second.size() == lookback, "weight length must equal lookback");
    detail::require(bias.size() == (kind == ModelKind::dlinear ? 1 : n), "bias length does not match model kind");
    m.parameters.resize(m.layout.total());
    m.parameters << w_first, w_second, bias;
    m.lookback = lookback;
    m.num_regions = n;
    return m;
}

// ---------------------------------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const FittedModel& m) {
    nlohmann::json layout = nlohmann::json::array();
    for (const auto& b : m.layout.blocks()) {
        layout.push_back({{"name", b.name}, {"offset", b.offset}, {"size", b.size}});
    }
    return {
        {"kind", to_string(m.spec.kind)},
        {"horizon", m.spec.horizon},
        {"hyperparameters", m.spec.hyperparameters},
        {"patches", to_json(m.patches)},
        {"input_scale", m.input_scale},
        {"lookback", m.lookback},
        {"num_regions", m.num_regions},
        {"calendar_categories", m.calendar_categories},
        {"einn_time_origin", m.einn_time_origin},
        {"einn_time_span", m.einn_time_span},
        {"layout", layout},
        {"parameters", std::vector<double>(m.parameters.data(), m.parameters.data() + m.parameters.size())},
        {"diagnostics",
         {{"final_train_loss", m.diagnostics.final_train_loss},
          {"final_validation_loss", m.diagnostics.final_validation_loss},
          {"best_epoch", m.diagnostics.best_epoch},
          {"epochs_run", m.diagnostics.epochs_run}}},
    };
}

inline FittedModel fitted_model_from_json(const nlohmann::json& j) {
    FittedModel m;
    m.spec.kind = parse_model_kind(j.at("kind").get<std::string>());
    m.spec.horizon = j.at("horizon").get<int>();
    m.spec.hyperparameters = j.at("hyperparameters").get<std::map<std::string, double>>();
    m.patches = patch_config_from_json(j.at("patches"));
    m.input_scale = j.at("input_scale").get<double>();
    m.lookback = j.at("lookback").get<Eigen::Index>();
    m.num_regions = j.at("num_regions").get<Eigen::Index>();
    m.calendar_categories = j.at("calendar_categories").get<int>();
    m.einn_time_origin = j.value("einn_time_origin", 0.0);
    m.einn_time_span = j.value("einn_time_span", 1.0);
    for (const auto& b : j.at("layout")) {
        const auto off = m.layout.add(b.at("name").get<std::string>(), b.at("size").get<Eigen::Index>());
        detail::require(off == b.at("offset").get<Eigen::Index>(), "fitted model layout offsets are inconsistent");
    }
    const auto values = j.at("parameters").get<std::vector<double>>();
    detail::require(static_cast<Eigen::Index>(values.size()) == m.layout.total(),
                    "fitted model parameter count does not match layout");
    m.parameters = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    detail::require(m.parameters.allFinite(), "fitted model parameters must be finite");
    if (j.contains("diagnostics")) {
        const auto& d = j.at("diagnostics");
        m.diagnostics.final_train_loss = d.value("final_train_loss", 0.0);
        m.diagnostics.final_validation_loss = d.value("final_validation_loss", 0.0);
        m.diagnostics.best_epoch = d.value("best_epoch", 0);
        m.diagnostics.epochs_run = d.value("epochs_run", 0);
    }
    return m;
}

} // namespace epibench
