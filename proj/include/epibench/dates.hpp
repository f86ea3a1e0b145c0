#pragma once

#include <charconv>
#include <chrono>
#include <cstdio>
#include <string>
#include <string_view>

#include "epibench/error.hpp"

namespace epibench {

enum class Frequency { daily, weekly };

inline int step_days(Frequency f) { return f == Frequency::daily ? 1 : 7; }

inline std::string to_string(Frequency f) { return f == Frequency::daily ? "daily" : "weekly"; }

inline Frequency parse_frequency(std::string_view s) {
    if (s == "daily") {
        return Frequency::daily;
    }
    if (s == "weekly") {
        return Frequency::weekly;
    }
    throw ValidationError("unknown frequency '" + std::string(s) + "' (expected daily or weekly)");
}

/// Calendar date stored as days since 1970-01-01.
class Date {
public:
    constexpr Date() = default;
    constexpr explicit Date(std::chrono::sys_days d) : days_(d.time_since_epoch().count()) {}

    static constexpr Date from_serial(long serial) {
        Date d;
        d.days_ = serial;
        return d;
    }

    /// Strict `YYYY-MM-DD`; throws ValidationError otherwise.
    static Date parse(std::string_view s) {
        auto bad = [&] { return ValidationError("invalid ISO-8601 date '" + std::string(s) + "'"); };
        if (s.size() != 10 || s[4] != '-' || s[7] != '-') {
            throw bad();
        }
        int y = 0;
        unsigned m = 0;
        unsigned d = 0;
        auto num = [&](std::string_view part, auto& out) {
            auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
            if (ec != std::errc{} || p != part.data() + part.size()) {
                throw bad();
            }
        };
        num(s.substr(0, 4), y);
        num(s.substr(5, 2), m);
        num(s.substr(8, 2), d);
        std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
        if (!ymd.ok()) {
            throw bad();
        }
        return Date(std::chrono::sys_days{ymd});
    }

    constexpr long serial() const { return days_; }
    std::chrono::sys_days sys() const { return std::chrono::sys_days{std::chrono::days{days_}}; }
    std::chrono::year_month_day ymd() const { return std::chrono::year_month_day{sys()}; }

    int year() const { return static_cast<int>(ymd().year()); }
    unsigned month() const { return static_cast<unsigned>(ymd().month()); }

    /// Monday = 1 ... Sunday = 7.
    unsigned iso_weekday() const { return std::chrono::weekday{sys()}.iso_encoding(); }

    /// ISO-8601 week number in 1..53.
    unsigned iso_week() const {
        using namespace std::chrono;
        // The ISO week belongs to the year containing its Thursday.
        const sys_days thursday = sys() + days{4 - static_cast<int>(iso_weekday())};
        const std::chrono::year y = year_month_day{thursday}.year();
        const sys_days jan1{y / January / 1};
        return static_cast<unsigned>((thursday - jan1).count() / 7 + 1);
    }

    /// Key of the calendar month, year * 12 + (month - 1).
    long month_key() const { return static_cast<long>(year()) * 12 + static_cast<long>(month()) - 1; }

    std::string iso() const {
        auto ymd_ = ymd();
        char buf[16];
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd_.year()),
                      static_cast<unsigned>(ymd_.month()), static_cast<unsigned>(ymd_.day()));
        return buf;
    }

    constexpr Date plus_days(long n) const { return from_serial(days_ + n); }

    friend constexpr auto operator<=>(const Date&, const Date&) = default;

private:
    long days_ = 0;
};

/// Calendar category for a target date: ISO weekday (1..7) for daily data, ISO week (1..53) for weekly.
inline int calendar_indicator(Date target, Frequency f) {
    return f == Frequency::daily ? static_cast<int>(target.iso_weekday()) : static_cast<int>(target.iso_week());
}

inline int calendar_categories(Frequency f) { return f == Frequency::daily ? 7 : 53; }

} // namespace epibench
