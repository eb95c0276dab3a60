#pragma once

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "opscope/common.hpp"

namespace opscope {

/// Shortest round-trip decimal form, locale independent.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// Minimal RFC 4180 writer: header row, CRLF line ends, quoting only where
/// required. Output bytes depend only on the cell values.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : n_cols_(header.size()) {
        write_row(header);
    }

    void write_row(const std::vector<std::string>& cells) {
        if (cells.size() != n_cols_)
            throw ValidationError("csv row has " + std::to_string(cells.size()) +
                                  " cells, expected " + std::to_string(n_cols_));
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << escape(cells[i]);
        }
        out_ << "\r\n";
    }

    const std::string str() const { return out_.str(); }

private:
    static std::string escape(const std::string& s) {
        bool needs_quote = s.find_first_of(",\"\r\n") != std::string::npos;
        if (!needs_quote) return s;
        std::string q = "\"";
        for (char c : s) {
            q += c;
            if (c == '"') q += '"';
        }
        q += '"';
        return q;
    }

    std::size_t n_cols_;
    std::ostringstream out_;
};

}  // namespace opscope
