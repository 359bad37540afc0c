#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ifcd::bench {

/// 16 hex digits of FNV-1a over the compact JSON dump (keys sorted).
std::string fingerprint(const nlohmann::json& config);

/// Build identity baked in at configure time.
std::string provenance();

struct RunResult {
    std::string task;
    std::string fingerprint;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> labels;
    std::vector<std::pair<std::string, double>> metrics;
    nlohmann::json config;
    double wall_clock_s = 0.0;
    std::string provenance;

    void label(const std::string& key, const std::string& value) { labels.emplace_back(key, value); }
    void metric(const std::string& key, double value) { metrics.emplace_back(key, value); }
    [[nodiscard]] double at(const std::string& metric) const;
    [[nodiscard]] const std::string& label_at(const std::string& key) const;
};

/// Shortest decimal that round-trips the double.
std::string format_number(double v);

/// Columns: task, fingerprint, seed, labels (first-seen order), metrics
/// (first-seen order). Wall-clock time is left out so reruns are byte-identical.
std::string results_csv(const std::vector<RunResult>& results);
nlohmann::json results_json(const std::vector<RunResult>& results);

using CsvRow = std::map<std::string, std::string>;
std::vector<CsvRow> parse_csv(const std::string& text);

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

struct Chart {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
    bool scatter = false;
};

/// 800x600 SVG with axes, ticks, a legend and one polyline (or point cloud) per series.
std::string render_svg(const Chart& chart);

struct Report {
    std::vector<RunResult> results;
    std::map<std::string, Chart> charts;            // file stem -> chart
    std::map<std::string, std::string> extra_files;  // file name -> contents
    nlohmann::json manifest = nlohmann::json::object();
};

/// Writes results.csv, results.json, <stem>.svg, extra files and run_manifest.json.
void emit_report(const Report& report, const std::filesystem::path& outdir);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace ifcd::bench
