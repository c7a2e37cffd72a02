#include "eman/csv.hpp"

#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace eman {

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return fmt::format("{:.17g}", v);
}

double parse_double(std::string_view text) {
    if (text == "nan") return std::nan("");
    if (text == "inf") return HUGE_VAL;
    if (text == "-inf") return -HUGE_VAL;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw std::invalid_argument(fmt::format("not a number: '{}'", text));
    }
    return v;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : out_(path, std::ios::trunc), columns_(header.size()), path_(path) {
    if (!out_) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
    for (const std::string& h : header) cell(h);
    end_row();
}

void CsvWriter::separator() {
    if (filled_ == columns_) throw std::logic_error(fmt::format("{}: too many cells in row", path_.string()));
    if (filled_ > 0) out_ << ',';
    ++filled_;
}

CsvWriter& CsvWriter::cell(double v) {
    separator();
    out_ << format_double(v);
    return *this;
}

CsvWriter& CsvWriter::cell(std::int64_t v) {
    separator();
    out_ << v;
    return *this;
}

CsvWriter& CsvWriter::cell(std::string_view v) {
    if (v.find_first_of(",\n\"") != std::string_view::npos) {
        throw std::invalid_argument(fmt::format("csv cell '{}' needs quoting, which is not supported", v));
    }
    separator();
    out_ << v;
    return *this;
}

void CsvWriter::end_row() {
    if (filled_ != columns_) {
        throw std::logic_error(fmt::format("{}: row has {} cells, header has {}", path_.string(), filled_, columns_));
    }
    out_ << '\n';
    out_.flush();
    filled_ = 0;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

}  // namespace

std::size_t CsvTable::column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    throw std::out_of_range(fmt::format("csv has no column '{}'", name));
}

double CsvTable::number(std::size_t row, std::string_view name) const {
    return parse_double(rows.at(row).at(column(name)));
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(fmt::format("{}: empty csv", path.string()));
    t.header = split_line(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (cells.size() != t.header.size()) {
            throw std::runtime_error(fmt::format("{}: row with {} cells, header has {}", path.string(), cells.size(),
                                                 t.header.size()));
        }
        t.rows.push_back(std::move(cells));
    }
    return t;
}

}  // namespace eman
