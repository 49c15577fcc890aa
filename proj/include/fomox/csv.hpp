#pragma once

#include <charconv>
#include <cstdio>
#include <string>
#include <vector>

#include "fomox/errors.hpp"

namespace fomox::csv {

// All exported floats use 17 significant digits so f64 values round-trip
// exactly through text.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

inline double parse_double(const std::string& cell, const std::string& where) {
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end)
        throw ParseError(where + ": not a number: '" + cell + "'");
    return v;
}

inline long long parse_int(const std::string& cell, const std::string& where) {
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    long long v = 0;
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end)
        throw ParseError(where + ": not an integer: '" + cell + "'");
    return v;
}

} // namespace fomox::csv
