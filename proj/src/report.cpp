#include "orbitseg/report.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "orbitseg/errors.hpp"

namespace fs = std::filesystem;

namespace orbitseg {

ReportRow ReportRow::from_summary(std::string method, std::string dataset, const CvSummary& s) {
    return {std::move(method), std::move(dataset), s.dice.mean,        s.dice.std,
            s.vs.mean,         s.vs.std,           s.sensitivity.mean, s.specificity.mean};
}

namespace {

std::string fmt(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
            else if (c == '"') quoted = false;
            else cur += c;
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void write_report(const std::vector<ReportRow>& rows, std::ostream& out) {
    out << kReportHeader << '\n';
    for (const auto& r : rows)
        out << csv_field(r.method) << ',' << csv_field(r.dataset) << ',' << fmt(r.dice_mean, 4) << ','
            << fmt(r.dice_std, 4) << ',' << fmt(r.vs_mean, 4) << ',' << fmt(r.vs_std, 4) << ','
            << fmt(r.sensitivity, 6) << ',' << fmt(r.specificity, 6) << '\n';
}

void write_report(const std::vector<ReportRow>& rows, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    write_report(rows, out);
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ReportRow> read_report(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kReportHeader)
        throw FormatError(path.string() + ": missing or unexpected report header");
    std::vector<ReportRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv(line);
        if (f.size() != 8) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 8 columns");
        try {
            rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                            std::stod(f[6]), std::stod(f[7])});
        } catch (const std::logic_error&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
        }
    }
    return rows;
}

void print_report(const std::vector<ReportRow>& rows, std::ostream& out) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-14s %-12s %-18s %-18s %-11s %-11s\n", "method", "dataset", "DICE (%)", "VS (%)",
                  "sensitivity", "specificity");
    out << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-14s %-12s %7.2f +- %-7.2f %7.2f +- %-7.2f %-11.4f %-11.4f\n", r.method.c_str(),
                      r.dataset.c_str(), r.dice_mean, r.dice_std, r.vs_mean, r.vs_std, r.sensitivity, r.specificity);
        out << buf;
    }
}

}  // namespace orbitseg
