#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "orbitseg/metrics.hpp"

namespace orbitseg {

struct ReportRow {
    std::string method;
    std::string dataset;
    double dice_mean = 0, dice_std = 0;
    double vs_mean = 0, vs_std = 0;
    double sensitivity = 0, specificity = 0;

    static ReportRow from_summary(std::string method, std::string dataset, const CvSummary& s);
};

inline constexpr const char* kReportHeader =
    "method,dataset,dice_mean,dice_std,vs_mean,vs_std,sensitivity,specificity";

void write_report(const std::vector<ReportRow>& rows, std::ostream& out);
void write_report(const std::vector<ReportRow>& rows, const std::filesystem::path& path);
std::vector<ReportRow> read_report(const std::filesystem::path& path);

// Human-readable "mean +- std" table.
void print_report(const std::vector<ReportRow>& rows, std::ostream& out);

}  // namespace orbitseg
