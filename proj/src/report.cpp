#include "ubench/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ubench::pipeline {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kInMetrics{"ACC@1", "ACC@5", "ECE", "NLL"};
const std::vector<std::string> kOutMetrics{"AUC", "InAsIn", "OutAsOut"};

struct RowKey {
    algo::Algorithm algorithm;
    bool spectral;
    Calibration calibration;
    std::size_t k;
    auto operator<=>(const RowKey&) const = default;
};

struct Table {
    std::string title;
    std::vector<std::string> columns;
    // row -> metric -> record
    std::map<RowKey, std::map<std::string, const EvalRecord*>> rows;
};

std::vector<std::string> row_labels(const RowKey& r) {
    return {algo::to_string(r.algorithm), r.spectral ? "spectral" : "plain", to_string(r.calibration),
            std::to_string(r.k)};
}

const std::vector<std::string> kRowHeaders{"algorithm", "spectral", "calibration", "k"};

std::string cell_text(const Table& t, const RowKey& row, const std::string& metric) {
    const auto& cells = t.rows.at(row);
    const auto it = cells.find(metric);
    return it == cells.end() ? "n/a" : format_value(it->second->mean, it->second->std);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string latex_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '_' || c == '&' || c == '%' || c == '#') out += '\\';
        out += c;
    }
    return out;
}

std::string render_text(const std::vector<Table>& tables) {
    std::ostringstream os;
    for (const auto& t : tables) {
        std::vector<std::string> headers = kRowHeaders;
        headers.insert(headers.end(), t.columns.begin(), t.columns.end());
        std::vector<std::vector<std::string>> body;
        for (const auto& [row, cells] : t.rows) {
            auto line = row_labels(row);
            for (const auto& m : t.columns) line.push_back(cell_text(t, row, m));
            body.push_back(std::move(line));
        }
        // display width: "±" occupies one column but two bytes
        auto width_of = [](const std::string& s) {
            std::size_t w = 0;
            for (unsigned char c : s)
                if ((c & 0xC0) != 0x80) ++w;
            return w;
        };
        std::vector<std::size_t> widths(headers.size());
        for (std::size_t c = 0; c < headers.size(); ++c) {
            widths[c] = width_of(headers[c]);
            for (const auto& line : body) widths[c] = std::max(widths[c], width_of(line[c]));
        }
        auto emit = [&](const std::vector<std::string>& line) {
            for (std::size_t c = 0; c < line.size(); ++c) {
                if (c) os << "  ";
                os << line[c];
                if (c + 1 < line.size()) os << std::string(widths[c] - width_of(line[c]), ' ');
            }
            os << '\n';
        };
        os << t.title << '\n';
        emit(headers);
        for (const auto& line : body) emit(line);
        os << '\n';
    }
    return os.str();
}

std::string render_csv(const std::vector<Table>& tables) {
    std::ostringstream os;
    os << "table,algorithm,spectral,calibration,k,metric,mean,std\n";
    for (const auto& t : tables)
        for (const auto& [row, cells] : t.rows)
            for (const auto& m : t.columns) {
                const auto labels = row_labels(row);
                os << csv_field(t.title);
                for (const auto& l : labels) os << ',' << csv_field(l);
                os << ',' << csv_field(m);
                const auto it = cells.find(m);
                if (it == cells.end()) {
                    os << ",n/a,n/a\n";
                } else {
                    char buf[64];
                    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", it->second->mean, it->second->std);
                    os << buf;
                }
            }
    return os.str();
}

std::string render_latex(const std::vector<Table>& tables) {
    std::ostringstream os;
    for (const auto& t : tables) {
        os << "% " << t.title << '\n';
        os << "\\begin{tabular}{llll" << std::string(t.columns.size(), 'c') << "}\n\\toprule\n";
        os << "Algorithm & Spectral & Calibration & $k$";
        for (const auto& m : t.columns) os << " & " << latex_escape(m);
        os << " \\\\\n\\midrule\n";
        std::map<algo::Algorithm, std::size_t> span;
        for (const auto& [row, cells] : t.rows) ++span[row.algorithm];
        std::optional<algo::Algorithm> current;
        for (const auto& [row, cells] : t.rows) {
            if (current != row.algorithm) {
                if (current) os << "\\midrule\n";
                os << "\\multirow{" << span[row.algorithm] << "}{*}{" << latex_escape(algo::to_string(row.algorithm))
                   << "}";
                current = row.algorithm;
            }
            os << " & " << (row.spectral ? "spectral" : "plain") << " & " << to_string(row.calibration) << " & "
               << row.k;
            for (const auto& m : t.columns) {
                const auto it = cells.find(m);
                if (it == cells.end()) {
                    os << " & n/a";
                } else {
                    char buf[96];
                    std::snprintf(buf, sizeof buf, " & $%.3f \\pm %.3f$", it->second->mean, it->second->std);
                    os << buf;
                }
            }
            os << " \\\\\n";
        }
        os << "\\bottomrule\n\\end{tabular}\n\n";
    }
    return os.str();
}

std::string footnotes(const ReportNotes& notes, ReportFormat format) {
    if (notes.failed_runs == 0 && notes.skipped_pairs == 0) return "";
    const std::string lead = format == ReportFormat::latex ? "% " : format == ReportFormat::csv ? "# " : "";
    std::string out;
    if (notes.failed_runs)
        out += lead + "note: " + std::to_string(notes.failed_runs) + " failed run(s) excluded\n";
    if (notes.skipped_pairs)
        out += lead + "note: " + std::to_string(notes.skipped_pairs) + " incompatible or unavailable pair(s) skipped\n";
    return out;
}

std::string render(const std::vector<Table>& tables, ReportFormat format, const ReportNotes& notes) {
    std::string body;
    switch (format) {
        case ReportFormat::text: body = render_text(tables); break;
        case ReportFormat::csv: body = render_csv(tables); break;
        case ReportFormat::latex: body = render_latex(tables); break;
    }
    return body + footnotes(notes, format);
}

}  // namespace

std::string to_string(ReportFormat f) {
    switch (f) {
        case ReportFormat::text: return "text";
        case ReportFormat::csv: return "csv";
        case ReportFormat::latex: return "latex";
    }
    return "text";
}

ReportFormat parse_report_format(std::string_view s) {
    if (s == "text" || s == "txt") return ReportFormat::text;
    if (s == "csv") return ReportFormat::csv;
    if (s == "latex" || s == "tex") return ReportFormat::latex;
    throw ParameterError("unknown report format '" + std::string(s) + "' (text, csv, latex)");
}

std::string format_value(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f ± %.3f", mean, std);
    return buf;
}

Report render_report(const std::vector<EvalRecord>& records, ReportFormat format, const ReportNotes& notes) {
    std::map<net::SizeTier, Table> in_tables;
    std::map<std::pair<net::SizeTier, std::string>, Table> out_tables;
    for (const auto& r : records) {
        const RowKey row{r.group.algorithm, r.group.spectral, r.group.calibration, r.group.k};
        if (r.measure.empty()) {
            auto& t = in_tables[r.group.tier];
            t.title = "in-domain, tier " + net::to_string(r.group.tier);
            t.columns = kInMetrics;
            t.rows[row][r.metric] = &r;
        } else {
            auto& t = out_tables[{r.group.tier, r.measure}];
            t.title = "out-domain, tier " + net::to_string(r.group.tier) + ", measure " + r.measure;
            t.columns = kOutMetrics;
            t.rows[row][r.metric] = &r;
        }
    }
    std::vector<Table> in, out;
    for (auto& [k, t] : in_tables) in.push_back(std::move(t));
    for (auto& [k, t] : out_tables) out.push_back(std::move(t));
    return {render(in, format, notes), render(out, format, notes)};
}

void write_reports(const fs::path& out, const std::vector<EvalRecord>& records, const ReportNotes& notes) {
    const fs::path dir = out / "report";
    fs::create_directories(dir);
    const std::pair<ReportFormat, const char*> formats[] = {
        {ReportFormat::text, "txt"}, {ReportFormat::csv, "csv"}, {ReportFormat::latex, "tex"}};
    for (const auto& [format, ext] : formats) {
        const auto report = render_report(records, format, notes);
        for (const auto& [name, text] : {std::pair{"in_domain", &report.in_domain}, {"out_domain", &report.out_domain}}) {
            const fs::path path = dir / (std::string(name) + "." + ext);
            std::ofstream os(path, std::ios::binary | std::ios::trunc);
            os << *text;
            if (!os) throw Error("failed writing " + path.string());
        }
    }
}

}  // namespace ubench::pipeline
