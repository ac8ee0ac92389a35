#pragma once

#include <fstream>
#include <istream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "lmmfs/errors.hpp"
#include "lmmfs/model.hpp"

namespace lmmfs::cli {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Splits comma-separated text into records. Fields may be double-quoted, with
/// "" standing for a literal quote and quoted fields spanning line breaks.
/// Unquoted fields are trimmed of surrounding blanks; blank lines are skipped.
inline std::vector<std::vector<std::string>> parse_csv_records(const std::string& text, const std::string& source) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, in_quotes = false, any = false;
    std::size_t line = 1, record_line = 1;

    std::size_t i = 0;
    if (text.compare(0, 3, "\xEF\xBB\xBF") == 0) i = 3;

    auto end_field = [&] {
        row.push_back(quoted ? field : detail::trim(field));
        field.clear();
        quoted = false;
    };
    auto end_record = [&] {
        end_field();
        const bool blank = row.size() == 1 && row.front().empty() && !any;
        if (!blank) records.push_back(std::move(row));
        row.clear();
        any = false;
    };

    for (; i < text.size(); ++i) {
        const char ch = text[i];
        if (in_quotes) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                if (ch == '\n') ++line;
                field.push_back(ch);
            }
            continue;
        }
        switch (ch) {
            case '"':
                if (!detail::trim(field).empty())
                    throw ParseError(source + " line " + std::to_string(line) + ": stray quote inside a field");
                field.clear();
                quoted = in_quotes = any = true;
                break;
            case ',':
                end_field();
                any = true;
                break;
            case '\r':
                break;
            case '\n':
                end_record();
                record_line = ++line;
                break;
            default:
                if (quoted && ch != ' ' && ch != '\t')
                    throw ParseError(source + " line " + std::to_string(line) + ": text after a closing quote");
                if (!quoted) field.push_back(ch);
                if (ch != ' ' && ch != '\t') any = true;
        }
    }
    if (in_quotes) throw ParseError(source + " line " + std::to_string(record_line) + ": unterminated quoted field");
    if (any || !field.empty()) end_record();
    return records;
}

/// Reads a table with a header row. Every record must have the header's width.
inline ObservationTable read_csv_text(const std::string& text, const std::string& source = "input") {
    auto records = parse_csv_records(text, source);
    if (records.empty()) throw ParseError(source + ": missing header row");
    std::vector<std::string> header = std::move(records.front());
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (header[j].empty()) throw ParseError(source + ": column " + std::to_string(j + 1) + " has an empty name");
        for (std::size_t k = 0; k < j; ++k)
            if (header[k] == header[j]) throw ParseError(source + ": duplicate column '" + header[j] + "'");
    }
    std::vector<std::vector<std::string>> columns(header.size());
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != header.size()) {
            throw ParseError(source + " record " + std::to_string(r + 1) + ": expected " +
                             std::to_string(header.size()) + " fields, found " + std::to_string(records[r].size()));
        }
        for (std::size_t j = 0; j < header.size(); ++j) columns[j].push_back(std::move(records[r][j]));
    }
    return {std::move(header), std::move(columns)};
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ObservationTable read_csv(const std::string& path) { return read_csv_text(read_file(path), path); }

}  // namespace lmmfs::cli
