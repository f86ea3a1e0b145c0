#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "epibench/panel.hpp"
#include "epibench/synthetic.hpp"
#include "test_support.hpp"

using namespace epibench;
using testing_support::TempDir;
using testing_support::throws_with;

namespace {

std::string weekly_file(int T, int n, int skip_t = -1, int skip_j = -1) {
    std::string s = "date,region,value\n";
    const auto start = Date::parse("2023-01-02");
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < n; ++j) {
            if (t == skip_t && j == skip_j) {
                continue;
            }
            s += start.plus_days(7 * t).iso() + ",reg" + std::to_string(j) + "," + std::to_string(t * 10 + j) + "\n";
        }
    }
    return s;
}

std::vector<Eigen::Index> range(Eigen::Index a, Eigen::Index b) {
    std::vector<Eigen::Index> v;
    for (auto t = a; t <= b; ++t) {
        v.push_back(t);
    }
    return v;
}

PanelDataset counting_panel(Eigen::Index T, Eigen::Index n) {
    Eigen::MatrixXd X(T, n);
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index j = 0; j < n; ++j) {
            X(t, j) = static_cast<double>(100 * t + j);
        }
    }
    return PanelDataset(synthetic::date_axis(Date::parse("2024-01-01"), T, Frequency::daily), synthetic::region_names(n),
                        X, Frequency::daily);
}

} // namespace

TEST(Dates, ParseAndFormat) {
    const auto d = Date::parse("2024-02-29");
    EXPECT_EQ(d.iso(), "2024-02-29");
    EXPECT_EQ(d.plus_days(1).iso(), "2024-03-01");
    EXPECT_THROW(Date::parse("2023-02-29"), ValidationError);
    EXPECT_THROW(Date::parse("2023-1-02"), ValidationError);
    EXPECT_THROW(Date::parse("2023/01/02"), ValidationError);
}

TEST(Dates, IsoWeekdayAndWeek) {
    EXPECT_EQ(Date::parse("2024-01-03").iso_weekday(), 3u); // Wednesday
    EXPECT_EQ(Date::parse("2024-01-07").iso_weekday(), 7u); // Sunday
    // 2021-01-03 still belongs to ISO week 53 of 2020; 2021-01-04 opens week 1.
    EXPECT_EQ(Date::parse("2021-01-03").iso_week(), 53u);
    EXPECT_EQ(Date::parse("2021-01-04").iso_week(), 1u);
    EXPECT_EQ(Date::parse("2019-12-30").iso_week(), 1u);
    EXPECT_EQ(calendar_indicator(Date::parse("2024-01-03"), Frequency::daily), 3);
    EXPECT_EQ(calendar_indicator(Date::parse("2021-01-03"), Frequency::weekly), 53);
}

TEST(LoadPanel, WeeklyFullyObserved) {
    TempDir tmp;
    const auto p = load_panel(tmp.write("p.csv", weekly_file(10, 3)), Frequency::weekly);
    EXPECT_EQ(p.num_times(), 10);
    EXPECT_EQ(p.num_regions(), 3);
    EXPECT_EQ(p.missing_count(), 0u);
    EXPECT_EQ(p.values()(4, 2), 42.0);
}

TEST(LoadPanel, SingleHoleIsMasked) {
    TempDir tmp;
    const auto p = load_panel(tmp.write("p.csv", weekly_file(10, 3, 5, 1)), Frequency::weekly);
    EXPECT_EQ(p.missing_count(), 1u);
    EXPECT_TRUE(p.missing_mask()(5, 1));
    EXPECT_TRUE(std::isnan(p.values()(5, 1)));
}

TEST(LoadPanel, SkippedDayRejected) {
    TempDir tmp;
    const auto f = tmp.write("p.csv", "date,region,value\n2024-01-01,a,1\n2024-01-02,a,2\n2024-01-04,a,3\n");
    EXPECT_TRUE(throws_with([&] { load_panel(f, Frequency::daily); }, "date-step inconsistent"));
}

TEST(LoadPanel, WeeklyFileDeclaredDailyRejected) {
    TempDir tmp;
    const auto f = tmp.write("p.csv", weekly_file(4, 1));
    EXPECT_TRUE(throws_with([&] { load_panel(f, Frequency::daily); }, "date-step inconsistent"));
}

TEST(LoadPanel, DuplicatePairNamed) {
    TempDir tmp;
    const auto f = tmp.write("p.csv", "date,region,value\n2024-01-01,a,1\n2024-01-01,a,2\n");
    EXPECT_TRUE(throws_with([&] { load_panel(f, Frequency::daily); }, "(2024-01-01, a)"));
}

TEST(LoadPanel, NonNumericValueNamesRow) {
    TempDir tmp;
    const auto f = tmp.write("p.csv", "date,region,value\n2024-01-01,a,1\n2024-01-02,a,1,5\n");
    EXPECT_THROW(load_panel(f, Frequency::daily), ValidationError);
    const auto g = tmp.write("q.csv", "date,region,value\n2024-01-01,a,1\n2024-01-02,a,abc\n");
    EXPECT_TRUE(throws_with([&] { load_panel(g, Frequency::daily); }, ":3"));
}

TEST(LoadPanel, SortsRowsAndColumns) {
    TempDir tmp;
    const auto f = tmp.write("p.csv", "date,region,value\n2024-01-02,b,4\n2024-01-01,b,3\n2024-01-02,a,2\n2024-01-01,a,1\n");
    const auto p = load_panel(f, Frequency::daily);
    EXPECT_EQ(p.regions(), (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(p.dates().front().iso(), "2024-01-01");
    EXPECT_EQ(p.values()(0, 0), 1.0);
    EXPECT_EQ(p.values()(1, 1), 4.0);
}

TEST(LoadPanel, RoundTripIsBitExact) {
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> u(0.0, 1e6);
    std::bernoulli_distribution hole(0.05);
    const Eigen::Index T = 40;
    const Eigen::Index n = 5;
    Eigen::MatrixXd X(T, n);
    MissingMask M(T, n);
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index j = 0; j < n; ++j) {
            X(t, j) = u(gen) / 7.0;
            M(t, j) = hole(gen);
        }
    }
    M.row(0).setConstant(false); // keep the date axis and every region present
    M.row(T - 1).setConstant(false);
    PanelDataset p(synthetic::date_axis(Date::parse("2022-06-01"), T, Frequency::daily), synthetic::region_names(n), X,
                   Frequency::daily, M);
    TempDir tmp;
    write_panel(p, tmp / "p.csv");
    const auto q = load_panel(tmp / "p.csv", Frequency::daily);
    ASSERT_EQ(q.num_times(), T);
    ASSERT_EQ(q.num_regions(), n);
    EXPECT_TRUE((q.missing_mask() == p.missing_mask()).all());
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (!p.missing_mask()(t, j)) {
                EXPECT_EQ(q.values()(t, j), p.values()(t, j));
            }
        }
    }
}

TEST(Population, LoadAndValidate) {
    TempDir tmp;
    const std::vector<std::string> regions{"a", "b"};
    const auto ok = load_population(tmp.write("ok.csv", "region,population\nb,20\na,10\n"), regions);
    EXPECT_EQ(ok.populations(0), 10.0);
    EXPECT_EQ(ok.populations(1), 20.0);
    EXPECT_THROW(load_population(tmp.write("z.csv", "region,population\na,0\nb,1\n"), regions), ValidationError);
    EXPECT_THROW(load_population(tmp.write("m.csv", "region,population\na,1\n"), regions), ValidationError);
    EXPECT_TRUE(throws_with([&] { load_population(tmp.write("u.csv", "region,population\na,1\nb,1\nzz,1\n"), regions); },
                            "zz"));
}

TEST(MakeSamples, IndexArithmetic) {
    const auto p = counting_panel(20, 2);
    const auto set = make_samples(p, 12, 1, range(11, 18));
    ASSERT_EQ(set.samples.size(), 8u);
    const auto& s0 = set.samples.front();
    EXPECT_EQ(s0.history.rows(), 12);
    for (Eigen::Index l = 0; l < 12; ++l) {
        EXPECT_EQ(s0.history(l, 0), 100.0 * static_cast<double>(l));
    }
    EXPECT_EQ(s0.target(1), 100.0 * 12 + 1);
    EXPECT_EQ(set.samples.back().target(0), 100.0 * 19);
}

TEST(MakeSamples, MinimalWindow) {
    const auto p = counting_panel(5, 3);
    const std::vector<Eigen::Index> o{2};
    const auto set = make_samples(p, 1, 1, o);
    ASSERT_EQ(set.samples.size(), 1u);
    EXPECT_EQ(set.samples[0].history.rows(), 1);
    EXPECT_EQ(set.samples[0].history(0, 2), 202.0);
}

TEST(MakeSamples, CalendarIndicatorFromTarget) {
    const auto p = counting_panel(20, 1); // 2024-01-01 is a Monday
    const std::vector<Eigen::Index> o{3};
    const auto s = make_samples(p, 2, 6, o).samples.at(0);
    EXPECT_EQ(s.target_date.iso(), "2024-01-10");
    EXPECT_EQ(s.calendar_indicator, 3); // Wednesday
}

TEST(MakeSamples, BoundsViolationNamesOrigin) {
    const auto p = counting_panel(20, 1);
    const std::vector<Eigen::Index> early{10};
    const std::vector<Eigen::Index> late{19};
    EXPECT_TRUE(throws_with([&] { make_samples(p, 12, 1, early); }, "origin 10"));
    EXPECT_TRUE(throws_with([&] { make_samples(p, 12, 1, late); }, "origin 19"));
}

TEST(MakeSamples, MissingWindowsDroppedAndReported) {
    auto base = counting_panel(30, 2);
    MissingMask M = MissingMask::Constant(30, 2, false);
    M(15, 1) = true;
    PanelDataset p(base.dates(), base.regions(), base.values(), Frequency::daily, M);
    const auto set = make_samples(p, 4, 2, range(3, 27));
    // Origins 15..18 see row 15 in their lookback, origin 13 targets it.
    EXPECT_EQ(set.dropped.size(), 5u);
    EXPECT_EQ(set.samples.size(), 25u - 5u);
    for (const auto& s : set.samples) {
        EXPECT_TRUE(s.history.allFinite());
        EXPECT_TRUE(s.target.allFinite());
    }
}

TEST(MakeSamples, NoLeakageProperty) {
    std::mt19937_64 gen(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::Index T = 10 + static_cast<Eigen::Index>(gen() % 60);
        const Eigen::Index L = 1 + static_cast<Eigen::Index>(gen() % 8);
        const int h = 1 + static_cast<int>(gen() % 5);
        if (T - 1 - h < L - 1) {
            continue;
        }
        const auto p = counting_panel(T, 2);
        const auto set = make_samples(p, L, h, range(L - 1, T - 1 - h));
        EXPECT_EQ(set.samples.size(), static_cast<std::size_t>(T - h - L + 1));
        for (const auto& s : set.samples) {
            ASSERT_EQ(s.history.rows(), L);
            // values encode the row index, so the latest history row must be the origin itself
            const auto latest = static_cast<Eigen::Index>(s.history.col(0).maxCoeff() / 100.0);
            EXPECT_EQ(latest, s.origin);
            EXPECT_LT(s.origin_date, s.target_date);
            EXPECT_EQ(static_cast<Eigen::Index>(s.target(0) / 100.0), s.origin + h);
        }
    }
}

TEST(ChronoSplit, EightyTwenty) {
    const auto p = counting_panel(40, 1);
    auto samples = make_samples(p, 3, 1, range(2, 11)).samples;
    const auto [tr, va] = chrono_split(samples, 0.8);
    EXPECT_EQ(tr.size(), 8u);
    EXPECT_EQ(va.size(), 2u);
    EXPECT_LT(tr.back().origin, va.front().origin);
}

TEST(ChronoSplit, CeilingRule) {
    const auto p = counting_panel(40, 1);
    auto samples = make_samples(p, 3, 1, range(2, 6)).samples;
    const auto [tr, va] = chrono_split(samples, 0.8);
    EXPECT_EQ(tr.size(), 4u);
    EXPECT_EQ(va.size(), 1u);
}

TEST(ChronoSplit, SingleSampleTooShort) {
    const auto p = counting_panel(40, 1);
    auto samples = make_samples(p, 3, 1, range(2, 2)).samples;
    EXPECT_TRUE(throws_with([&] { chrono_split(samples, 0.8); }, "window too short"));
}

TEST(ChronoSplit, PartitionProperty) {
    const auto p = counting_panel(200, 1);
    for (std::size_t N = 2; N < 60; ++N) {
        for (double f : {0.1, 0.5, 0.8, 0.9}) {
            auto samples = make_samples(p, 2, 1, range(1, static_cast<Eigen::Index>(N))).samples;
            if (static_cast<std::size_t>(std::ceil(f * static_cast<double>(N) - 1e-9)) >= N) {
                EXPECT_THROW(chrono_split(samples, f), ValidationError);
                continue;
            }
            const auto [tr, va] = chrono_split(samples, f);
            EXPECT_EQ(tr.size() + va.size(), N);
            for (std::size_t i = 0; i < tr.size(); ++i) {
                EXPECT_EQ(tr[i].origin, samples[i].origin);
            }
            for (std::size_t i = 0; i < va.size(); ++i) {
                EXPECT_EQ(va[i].origin, samples[tr.size() + i].origin);
            }
        }
    }
}
