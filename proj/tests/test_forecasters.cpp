#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "epibench/forecasters.hpp"
#include "epibench/synthetic.hpp"
#include "gradcheck.hpp"
#include "test_support.hpp"

using namespace epibench;
using testing_support::throws_with;

namespace {

Sample sample_from(const Eigen::MatrixXd& history, int h = 1) {
    Sample s;
    s.history = history;
    s.horizon = h;
    s.target = Eigen::VectorXd::Zero(history.cols());
    return s;
}

Eigen::VectorXd last_selector(Eigen::Index L) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(L);
    w(L - 1) = 1.0;
    return w;
}

std::vector<Eigen::Index> range(Eigen::Index a, Eigen::Index b) {
    std::vector<Eigen::Index> v;
    for (Eigen::Index t = a; t <= b; ++t) {
        v.push_back(t);
    }
    return v;
}

ModelSpec spec_of(ModelKind k, int h = 1) {
    ModelSpec s;
    s.kind = k;
    s.horizon = h;
    if (k == ModelKind::dlinear) {
        s.hyperparameters["kernel"] = 3;
    }
    return s;
}

double rmse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

} // namespace

TEST(Naive, LastRowAtAnyHorizon) {
    Eigen::MatrixXd h(3, 2);
    h << 1, 2, 3, 4, 5, 7;
    EXPECT_EQ(naive_forecast(sample_from(h, 1)), Eigen::Vector2d(5, 7));
    EXPECT_EQ(naive_forecast(sample_from(h, 28)), naive_forecast(sample_from(h, 1)));
    const Eigen::MatrixXd c = Eigen::MatrixXd::Constant(12, 3, 4.5);
    EXPECT_EQ(naive_forecast(sample_from(c, 7)), Eigen::VectorXd::Constant(3, 4.5));
}

TEST(Ar1, GeometricSeries) {
    Eigen::MatrixXd s(5, 1);
    s << 1, 2, 4, 8, 16;
    const auto m = fit_ar1(s);
    EXPECT_NEAR(m.block("phi")(0), 2.0, 1e-12);
    EXPECT_NEAR(m.block("intercept")(0), 0.0, 1e-12);
    EXPECT_NEAR(ar1_forecast(m, Eigen::VectorXd::Constant(1, 16), 2)(0), 64.0, 1e-10);
}

TEST(Ar1, ConstantSeriesDegenerate) {
    const auto m = fit_ar1(Eigen::MatrixXd::Constant(10, 2, 3.0));
    EXPECT_EQ(m.block("phi"), Eigen::Vector2d::Zero());
    EXPECT_EQ(m.block("intercept"), Eigen::Vector2d(3, 3));
    for (int h : {1, 5, 28}) {
        EXPECT_EQ(ar1_forecast(m, Eigen::Vector2d(3, 3), h), Eigen::Vector2d(3, 3));
    }
}

TEST(Ar1, WhiteNoiseForecastsMean) {
    std::mt19937_64 gen(17);
    std::normal_distribution<double> nd(50.0, 4.0);
    Eigen::MatrixXd s(10000, 1);
    for (Eigen::Index t = 0; t < s.rows(); ++t) {
        s(t, 0) = nd(gen);
    }
    const auto m = fit_ar1(s);
    EXPECT_NEAR(m.block("phi")(0), 0.0, 0.1);
    const double f = ar1_forecast(m, Eigen::VectorXd::Constant(1, s(s.rows() - 1, 0)), 1)(0);
    EXPECT_NEAR(f, s.col(0).mean(), 0.1 * 4.0 * 4.0);
    EXPECT_NEAR(ar1_forecast(m, Eigen::VectorXd::Constant(1, 80.0), 30)(0), s.col(0).mean(), 0.1);
}

TEST(Ar1, TooFewObservations) {
    Eigen::MatrixXd s(2, 1);
    s << 1, 2;
    EXPECT_TRUE(throws_with([&] { fit_ar1(s); }, "at least 3"));
}

TEST(DLinear, PersistenceEmbedding) {
    std::mt19937_64 gen(4);
    std::normal_distribution<double> nd(100, 30);
    const auto m = make_linear_model(ModelKind::dlinear, 12, 3, last_selector(12), last_selector(12),
                                     Eigen::VectorXd::Zero(1));
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::MatrixXd h(12, 3);
        for (Eigen::Index k = 0; k < h.size(); ++k) {
            h.data()[k] = nd(gen);
        }
        // trend + remainder = history exactly, up to one rounding in the subtraction
        const Eigen::VectorXd f = forecast_dlinear(sample_from(h), m);
        EXPECT_LE((f - naive_forecast(sample_from(h))).cwiseAbs().maxCoeff(), 1e-12 * 200);
    }
    EXPECT_TRUE(forecast_dlinear(sample_from(Eigen::MatrixXd::Zero(12, 3)), m).isZero());
}

TEST(DLinear, DimensionMismatch) {
    const auto m = make_linear_model(ModelKind::dlinear, 12, 3, last_selector(12), last_selector(12),
                                     Eigen::VectorXd::Zero(1));
    EXPECT_THROW(forecast_dlinear(sample_from(Eigen::MatrixXd::Zero(11, 3)), m), ValidationError);
    EXPECT_THROW(forecast_dlinear(sample_from(Eigen::MatrixXd::Zero(12, 4)), m), ValidationError);
}

TEST(DLinear, NoiselessTrendDirectFit) {
    // The objective is quadratic in the parameters, so one Newton step with the exact Hessian lands on
    // the least-squares optimum.
    const Eigen::Index T = 80;
    Eigen::MatrixXd X(T, 2);
    for (Eigen::Index t = 0; t < T; ++t) {
        X(t, 0) = 10.0 + 2.0 * static_cast<double>(t);
        X(t, 1) = 300.0 - 1.5 * static_cast<double>(t);
    }
    const PanelDataset panel(synthetic::date_axis(Date::parse("2023-01-02"), T, Frequency::daily), {"a", "b"}, X,
                             Frequency::daily);
    const auto samples = make_samples(panel, 12, 1, range(11, T - 2)).samples;
    const auto spec = spec_of(ModelKind::dlinear);
    const TrainingObjective obj(spec, samples, PatchConfig{}, ModelContext{}, 1.0);
    const Eigen::Index p = obj.layout().total();
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd g0;
    obj.evaluate(theta, &g0);
    Eigen::MatrixXd H(p, p);
    for (Eigen::Index i = 0; i < p; ++i) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(p);
        e(i) = 1.0;
        Eigen::VectorXd gi;
        obj.evaluate(e, &gi);
        H.col(i) = gi - g0;
    }
    theta = -H.completeOrthogonalDecomposition().solve(g0);
    const auto blk = [&](const char* name) {
        const auto& b = obj.layout().at(name);
        return Eigen::VectorXd(theta.segment(b.offset, b.size));
    };
    const auto m = make_linear_model(ModelKind::dlinear, 12, 2, blk("w_first"), blk("w_second"), blk("bias"),
                                     spec.hyperparameters);
    Eigen::MatrixXd pred(2, static_cast<Eigen::Index>(samples.size()));
    Eigen::MatrixXd truth(2, pred.cols());
    for (std::size_t k = 0; k < samples.size(); ++k) {
        pred.col(static_cast<Eigen::Index>(k)) = forecast_dlinear(samples[k], m);
        truth.col(static_cast<Eigen::Index>(k)) = samples[k].target;
    }
    EXPECT_LT(rmse(pred, truth), 1e-6);
}

TEST(GraphLinear, NaiveEmbeddingAndIdentityFolding) {
    std::mt19937_64 gen(8);
    std::normal_distribution<double> nd(0, 10);
    const Eigen::Index n = 4;
    const auto ring = row_normalize(synthetic::ring_adjacency(n));
    const auto naive = make_linear_model(ModelKind::graph_linear, 12, n, last_selector(12), Eigen::VectorXd::Zero(12),
                                         Eigen::VectorXd::Zero(n));
    Eigen::VectorXd ws(12), wm(12), b(n);
    for (auto& v : ws) {
        v = nd(gen) / 10;
    }
    for (auto& v : wm) {
        v = nd(gen) / 10;
    }
    for (auto& v : b) {
        v = nd(gen);
    }
    const auto split = make_linear_model(ModelKind::graph_linear, 12, n, ws, wm, b);
    const auto folded =
        make_linear_model(ModelKind::graph_linear, 12, n, ws + wm, Eigen::VectorXd::Zero(12), b, {{"use_mixing", 0}});
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::MatrixXd h(12, n);
        for (Eigen::Index k = 0; k < h.size(); ++k) {
            h.data()[k] = nd(gen);
        }
        EXPECT_EQ(forecast_graph_linear(sample_from(h), ring, naive), naive_forecast(sample_from(h)));
        const Eigen::VectorXd a = forecast_graph_linear(sample_from(h), MixingOperator::identity(n), split);
        const Eigen::VectorXd c = forecast_graph_linear(sample_from(h), MixingOperator::identity(n), folded);
        EXPECT_LE((a - c).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, a.cwiseAbs().maxCoeff()));
    }
    EXPECT_THROW(forecast_graph_linear(sample_from(Eigen::MatrixXd::Zero(12, n)), MixingOperator::identity(3), naive),
                 ValidationError);
}

TEST(GraphLinear, NeighbourSignalBeatsPerNodeAr1) {
    // Node i is driven by the lagged mean of its neighbours, not by its own past.
    synthetic::LinearOptions opt;
    opt.self_weight = 0.0;
    opt.mix_weight = 0.95;
    opt.intercept = 0.0;
    const auto d = synthetic::linear_mixing_panel(opt);
    const auto P = row_normalize(d.adjacency);
    const auto& panel = d.panel;
    const auto train_s = make_samples(panel, 12, 1, range(11, 110)).samples;
    const auto val_s = make_samples(panel, 12, 1, range(111, 150)).samples;
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.epochs = 1500;
    const auto m = train(spec_of(ModelKind::graph_linear), train_s, val_s, cfg, PatchConfig{},
                         ModelContext{Frequency::daily, P, std::nullopt});
    const auto ar = fit_ar1(panel.values().topRows(112));
    Eigen::MatrixXd pg(5, static_cast<Eigen::Index>(val_s.size()));
    Eigen::MatrixXd pa(pg.rows(), pg.cols());
    Eigen::MatrixXd y(pg.rows(), pg.cols());
    for (std::size_t k = 0; k < val_s.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        pg.col(kk) = forecast_graph_linear(val_s[k], P, m);
        pa.col(kk) = ar1_forecast(ar, val_s[k].last_observation(), 1);
        y.col(kk) = val_s[k].target;
    }
    EXPECT_LT(rmse(pg, y), rmse(pa, y)) << rmse(pg, y) << " vs " << rmse(pa, y);
}

TEST(Training, ConvexOneParameterSanity) {
    auto obj = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        g = 2.0 * (x.array() - 3.0).matrix();
        return (x.array() - 3.0).square().sum();
    };
    auto val = [](const Eigen::VectorXd& x) { return (x.array() - 3.0).square().sum(); };
    const auto r = gradient_descent(obj, val, Eigen::VectorXd::Zero(1), 500, 0.1, Optimizer::gd);
    EXPECT_NEAR(r.best(0), 3.0, 1e-6);
    const auto a = gradient_descent(obj, val, Eigen::VectorXd::Zero(1), 500, 0.1, Optimizer::adam);
    EXPECT_NEAR(a.best(0), 3.0, 1e-6);
}

namespace {

struct TrainFixture {
    synthetic::Dataset d = synthetic::sir_panel({});
    std::vector<Sample> train_s;
    std::vector<Sample> val_s;
    ModelContext ctx;
    TrainFixture() {
        train_s = make_samples(d.panel, 12, 2, range(11, 80)).samples;
        val_s = make_samples(d.panel, 12, 2, range(81, 100)).samples;
        ctx = ModelContext{Frequency::daily, row_normalize(d.adjacency), d.population};
    }
};

} // namespace

TEST(Training, SameSeedBitIdentical) {
    const TrainFixture fx;
    TrainConfig cfg;
    cfg.epochs = 150;
    cfg.seed = 5;
    PatchConfig pc;
    pc.tid = TidConfig{};
    pc.epi = EpiConfig{};
    for (auto kind : {ModelKind::dlinear, ModelKind::graph_linear}) {
        const auto a = train(spec_of(kind, 2), fx.train_s, fx.val_s, cfg, pc, fx.ctx);
        const auto b = train(spec_of(kind, 2), fx.train_s, fx.val_s, cfg, pc, fx.ctx);
        EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    }
}

TEST(Training, ValidationSelection) {
    const TrainFixture fx;
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.learning_rate = 0.05;
    for (auto kind : {ModelKind::dlinear, ModelKind::graph_linear}) {
        const auto m = train(spec_of(kind, 2), fx.train_s, fx.val_s, cfg, PatchConfig{}, fx.ctx);
        const auto& hist = m.diagnostics.validation_history;
        ASSERT_EQ(hist.size(), 201u);
        for (double v : hist) {
            EXPECT_LE(m.diagnostics.final_validation_loss, v);
        }
        EXPECT_EQ(hist[static_cast<std::size_t>(m.diagnostics.best_epoch)], m.diagnostics.final_validation_loss);
    }
}

TEST(Training, GradientMatchesFiniteDifferences) {
    const TrainFixture fx;
    const double scale = data_scale(fx.train_s);
    const auto scaled = scale_samples(fx.train_s, scale);
    for (auto kind : {ModelKind::dlinear, ModelKind::graph_linear}) {
        for (double l2 : {0.0, 0.1}) {
            const TrainingObjective obj(spec_of(kind, 2), scaled, PatchConfig{}, fx.ctx, scale, l2);
            for (std::uint64_t seed = 1; seed <= 3; ++seed) {
                const auto r = gradcheck::check(obj, gradcheck::jittered_start(obj, seed));
                EXPECT_LT(r.relative_error, 1e-4) << to_string(kind) << " worst " << r.worst_block;
            }
        }
    }
}

TEST(Training, NonFiniteLossReportsEpoch) {
    const TrainFixture fx;
    TrainConfig cfg;
    cfg.optimizer = Optimizer::gd;
    cfg.learning_rate = 1e6;
    cfg.epochs = 100;
    try {
        train(spec_of(ModelKind::graph_linear, 2), fx.train_s, fx.val_s, cfg, PatchConfig{}, fx.ctx);
        FAIL() << "expected divergence";
    } catch (const RuntimeFailure& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
    }
}

TEST(Training, EmptyValidation) {
    const TrainFixture fx;
    EXPECT_TRUE(throws_with(
        [&] { train(spec_of(ModelKind::dlinear, 2), fx.train_s, {}, TrainConfig{}, PatchConfig{}, fx.ctx); },
        "empty validation"));
    EXPECT_THROW(train(spec_of(ModelKind::naive, 2), fx.train_s, fx.val_s, TrainConfig{}, PatchConfig{}, fx.ctx),
                 ValidationError);
}

TEST(Training, FittedModelJsonRoundTrip) {
    const TrainFixture fx;
    TrainConfig cfg;
    cfg.epochs = 50;
    PatchConfig pc;
    pc.tid = TidConfig{};
    const auto m = train(spec_of(ModelKind::graph_linear, 2), fx.train_s, fx.val_s, cfg, pc, fx.ctx);
    const auto back = fitted_model_from_json(nlohmann::json::parse(to_json(m).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(m).dump());
    for (const auto& s : fx.val_s) {
        EXPECT_EQ(forecast_graph_linear(s, *fx.ctx.mixing, back), forecast_graph_linear(s, *fx.ctx.mixing, m));
    }
}

TEST(ModelSpecValidation, KernelAndKind) {
    ModelSpec s;
    s.kind = ModelKind::dlinear;
    EXPECT_THROW(s.validate(), ValidationError);
    s.hyperparameters["kernel"] = 4;
    EXPECT_THROW(s.validate(), ValidationError);
    s.hyperparameters["kernel"] = 5;
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(parse_model_kind("graph_linear"), ModelKind::graph_linear);
    EXPECT_THROW(parse_model_kind("transformer"), ValidationError);
}
