#include "ifcd/bench/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ifcd/bench/pope.hpp"

#ifndef IFCD_GIT_REVISION
#define IFCD_GIT_REVISION "unknown"
#endif

namespace ifcd::bench {

std::string fingerprint(const nlohmann::json& config) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string provenance() { return std::string("ifcd ") + IFCD_GIT_REVISION; }

double RunResult::at(const std::string& metric) const {
    for (const auto& [k, v] : metrics) {
        if (k == metric) {
            return v;
        }
    }
    throw BenchError("result has no metric '" + metric + "'");
}

const std::string& RunResult::label_at(const std::string& key) const {
    for (const auto& [k, v] : labels) {
        if (k == key) {
            return v;
        }
    }
    throw BenchError("result has no label '" + key + "'");
}

std::string format_number(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + "\"";
}

void add_unique(std::vector<std::string>& cols, const std::string& c) {
    if (std::find(cols.begin(), cols.end(), c) == cols.end()) {
        cols.push_back(c);
    }
}

}  // namespace

std::string results_csv(const std::vector<RunResult>& results) {
    std::vector<std::string> labels;
    std::vector<std::string> metrics;
    for (const auto& r : results) {
        for (const auto& [k, _] : r.labels) {
            add_unique(labels, k);
        }
        for (const auto& [k, _] : r.metrics) {
            add_unique(metrics, k);
        }
    }
    std::ostringstream out;
    out << "task,fingerprint,seed";
    for (const auto& c : labels) {
        out << ',' << csv_field(c);
    }
    for (const auto& c : metrics) {
        out << ',' << csv_field(c);
    }
    out << '\n';
    for (const auto& r : results) {
        out << csv_field(r.task) << ',' << r.fingerprint << ',' << r.seed;
        for (const auto& c : labels) {
            out << ',';
            for (const auto& [k, v] : r.labels) {
                if (k == c) {
                    out << csv_field(v);
                    break;
                }
            }
        }
        for (const auto& c : metrics) {
            out << ',';
            for (const auto& [k, v] : r.metrics) {
                if (k == c) {
                    out << format_number(v);
                    break;
                }
            }
        }
        out << '\n';
    }
    return out.str();
}

nlohmann::json results_json(const std::vector<RunResult>& results) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : results) {
        nlohmann::json labels = nlohmann::json::object();
        for (const auto& [k, v] : r.labels) {
            labels[k] = v;
        }
        nlohmann::json metrics = nlohmann::json::object();
        for (const auto& [k, v] : r.metrics) {
            if (std::isfinite(v)) {
                metrics[k] = v;
            } else {
                metrics[k] = format_number(v);
            }
        }
        arr.push_back({{"task", r.task},
                       {"fingerprint", r.fingerprint},
                       {"seed", r.seed},
                       {"labels", labels},
                       {"metrics", metrics},
                       {"config", r.config},
                       {"wall_clock_s", r.wall_clock_s},
                       {"provenance", r.provenance}});
    }
    return arr;
}

std::vector<CsvRow> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            row.push_back(std::move(field));
            field.clear();
            rows.push_back(std::move(row));
            row.clear();
        } else {
            field += c;
        }
    }
    if (quoted) {
        throw BenchError("csv: unterminated quote");
    }
    if (!field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    std::vector<CsvRow> out;
    if (rows.empty()) {
        return out;
    }
    const auto& header = rows.front();
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != header.size()) {
            throw BenchError("csv: row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                             " fields, header has " + std::to_string(header.size()));
        }
        CsvRow m;
        for (std::size_t c = 0; c < header.size(); ++c) {
            m[header[c]] = rows[r][c];
        }
        out.push_back(std::move(m));
    }
    return out;
}

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fmt(double v, int prec = 2) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", std::abs(v) < 1e-12 ? 0.0 : v);
    return buf;
}

}  // namespace

std::string render_svg(const Chart& chart) {
    constexpr double W = 800, H = 600, L = 80, R = 190, T = 50, B = 70;
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& s : chart.series) {
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) {
                continue;
            }
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (!std::isfinite(xmin)) {
        xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    }
    if (xmax - xmin < 1e-12) {
        xmin -= 0.5, xmax += 0.5;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5, ymax += 0.5;
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;
    const double pw = W - L - R;
    const double ph = H - T - B;
    auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * pw; };
    auto sy = [&](double y) { return T + ph - (y - ymin) / (ymax - ymin) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\" "
         "font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
    o << "<text x=\"" << fmt(L + pw / 2) << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">"
      << xml_escape(chart.title) << "</text>\n";
    o << "<line x1=\"" << fmt(L) << "\" y1=\"" << fmt(T + ph) << "\" x2=\"" << fmt(L + pw) << "\" y2=\"" << fmt(T + ph)
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << fmt(L) << "\" y1=\"" << fmt(T) << "\" x2=\"" << fmt(L) << "\" y2=\"" << fmt(T + ph)
      << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 5.0;
        const double yv = ymin + (ymax - ymin) * i / 5.0;
        o << "<line x1=\"" << fmt(sx(xv)) << "\" y1=\"" << fmt(T + ph) << "\" x2=\"" << fmt(sx(xv)) << "\" y2=\""
          << fmt(T + ph + 5) << "\" stroke=\"black\"/>\n";
        o << "<text x=\"" << fmt(sx(xv)) << "\" y=\"" << fmt(T + ph + 20) << "\" text-anchor=\"middle\">"
          << tick_label(xv) << "</text>\n";
        o << "<line x1=\"" << fmt(L - 5) << "\" y1=\"" << fmt(sy(yv)) << "\" x2=\"" << fmt(L) << "\" y2=\""
          << fmt(sy(yv)) << "\" stroke=\"black\"/>\n";
        o << "<text x=\"" << fmt(L - 8) << "\" y=\"" << fmt(sy(yv) + 4) << "\" text-anchor=\"end\">" << tick_label(yv)
          << "</text>\n";
    }
    o << "<text x=\"" << fmt(L + pw / 2) << "\" y=\"" << fmt(H - 20) << "\" text-anchor=\"middle\">"
      << xml_escape(chart.x_label) << "</text>\n";
    o << "<text x=\"20\" y=\"" << fmt(T + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
      << fmt(T + ph / 2) << ")\">" << xml_escape(chart.y_label) << "</text>\n";
    for (std::size_t i = 0; i < chart.series.size(); ++i) {
        const auto& s = chart.series[i];
        const char* color = kPalette[i % std::size(kPalette)];
        if (chart.scatter) {
            for (const auto& [x, y] : s.points) {
                o << "<circle cx=\"" << fmt(sx(x)) << "\" cy=\"" << fmt(sy(y)) << "\" r=\"3\" fill=\"" << color
                  << "\" fill-opacity=\"0.6\"/>\n";
            }
        } else {
            o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
            for (std::size_t p = 0; p < s.points.size(); ++p) {
                o << (p ? " " : "") << fmt(sx(s.points[p].first)) << ',' << fmt(sy(s.points[p].second));
            }
            o << "\"/>\n";
            for (const auto& [x, y] : s.points) {
                o << "<circle cx=\"" << fmt(sx(x)) << "\" cy=\"" << fmt(sy(y)) << "\" r=\"3\" fill=\"" << color
                  << "\"/>\n";
            }
        }
        const double ly = T + 10 + 20.0 * static_cast<double>(i);
        o << "<rect x=\"" << fmt(W - R + 15) << "\" y=\"" << fmt(ly - 9) << "\" width=\"12\" height=\"12\" fill=\""
          << color << "\"/>\n";
        o << "<text x=\"" << fmt(W - R + 32) << "\" y=\"" << fmt(ly + 2) << "\">" << xml_escape(s.name)
          << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw BenchError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw BenchError("write failed: " + path.string());
    }
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw BenchError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void emit_report(const Report& report, const std::filesystem::path& outdir) {
    std::filesystem::create_directories(outdir);
    write_text(outdir / "results.csv", results_csv(report.results));
    write_text(outdir / "results.json", results_json(report.results).dump(2) + "\n");
    for (const auto& [stem, chart] : report.charts) {
        write_text(outdir / (stem + ".svg"), render_svg(chart));
    }
    for (const auto& [name, text] : report.extra_files) {
        write_text(outdir / name, text);
    }
    nlohmann::json manifest = report.manifest;
    manifest["provenance"] = provenance();
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : report.results) {
        runs.push_back({{"task", r.task}, {"fingerprint", r.fingerprint}, {"seed", r.seed}});
    }
    manifest["runs"] = runs;
    write_text(outdir / "run_manifest.json", manifest.dump(2) + "\n");
}

}  // namespace ifcd::bench
