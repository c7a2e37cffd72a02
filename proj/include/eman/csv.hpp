#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace eman {

/// 17 significant digits: parses back to the identical double.
std::string format_double(double v);
double parse_double(std::string_view text);

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);

    CsvWriter& cell(double v);
    CsvWriter& cell(std::int64_t v);
    CsvWriter& cell(std::size_t v) { return cell(static_cast<std::int64_t>(v)); }
    CsvWriter& cell(std::string_view v);
    /// Terminates the row; throws when the cell count differs from the header.
    void end_row();

private:
    void separator();

    std::ofstream out_;
    std::size_t columns_;
    std::size_t filled_ = 0;
    std::filesystem::path path_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const;
    double number(std::size_t row, std::string_view name) const;
};

/// Plain comma-separated text without quoting.
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace eman
