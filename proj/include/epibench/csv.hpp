#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "epibench/error.hpp"

namespace epibench::csv {

struct Row {
    std::size_t line = 0; // 1-based line number in the source file
    std::vector<std::string> fields;
};

struct Table {
    std::string source;
    std::vector<std::string> header;
    std::vector<Row> rows;

    std::string where(const Row& r) const { return source + ":" + std::to_string(r.line); }
};

inline std::vector<std::string> split(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) {
        s.remove_suffix(1);
    }
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
        s.remove_prefix(1);
    }
    return s;
}

/// Reads a comma-separated file whose header must begin with `expected` (extra trailing columns allowed
/// when `allow_extra` is set). Blank lines are skipped.
inline Table read(const std::filesystem::path& path, const std::vector<std::string>& expected, bool allow_extra = false) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open " + path.string());
    }
    Table t;
    t.source = path.string();
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view sv = trim(line);
        if (lineno == 1 && sv.size() >= 3 && static_cast<unsigned char>(sv[0]) == 0xEF) {
            sv.remove_prefix(3); // UTF-8 BOM
        }
        if (sv.empty()) {
            continue;
        }
        auto fields = split(sv);
        for (auto& f : fields) {
            f = std::string(trim(f));
        }
        if (!have_header) {
            have_header = true;
            t.header = fields;
            bool ok = allow_extra ? t.header.size() >= expected.size() : t.header.size() == expected.size();
            for (std::size_t i = 0; ok && i < expected.size(); ++i) {
                ok = t.header[i] == expected[i];
            }
            if (!ok) {
                std::string want;
                for (const auto& e : expected) {
                    want += (want.empty() ? "" : ",") + e;
                }
                throw ValidationError(t.source + ":" + std::to_string(lineno) + ": expected header '" + want + "'");
            }
            continue;
        }
        if (fields.size() != t.header.size()) {
            throw ValidationError(t.source + ":" + std::to_string(lineno) + ": expected " +
                                  std::to_string(t.header.size()) + " fields, found " + std::to_string(fields.size()));
        }
        t.rows.push_back(Row{lineno, std::move(fields)});
    }
    if (!have_header) {
        throw ValidationError(t.source + ": empty file (missing header)");
    }
    return t;
}

/// Parses a decimal real; rejects trailing garbage and thousands separators.
inline bool parse_double(std::string_view s, double& out) {
    if (s.empty()) {
        return false;
    }
    if (s.front() == '+') {
        s.remove_prefix(1);
    }
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && p == s.data() + s.size();
}

inline double number(const Table& t, const Row& r, std::size_t col) {
    double v = 0.0;
    if (!parse_double(r.fields[col], v)) {
        throw ValidationError(t.where(r) + ": non-numeric " + t.header[col] + " '" + r.fields[col] + "'");
    }
    return v;
}

/// Shortest representation that parses back to the identical double.
inline std::string format(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw RuntimeFailure("cannot write " + path.string());
    }
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace epibench::csv
