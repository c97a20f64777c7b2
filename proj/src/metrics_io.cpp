#include "ehrseq/metrics_io.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

using json = nlohmann::json;

namespace ehrseq {

void write_metrics_jsonl(const std::vector<MetricRecord>& records, const std::string& path,
                         const std::string& config_hash) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (const auto& r : records) {
        json j;
        j["metric"] = r.metric;
        if (r.value) j["value"] = *r.value;
        else j["value"] = nullptr;
        if (r.ci_lo) j["ci_lo"] = *r.ci_lo;
        if (r.ci_hi) j["ci_hi"] = *r.ci_hi;
        j["n"] = r.n;
        j["config_hash"] = config_hash;
        for (const auto& [k, v] : r.extra) j[k] = v;
        out << j.dump() << "\n";
    }
}

std::vector<MetricRecord> read_metrics_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open metrics file: " + path);
    std::vector<MetricRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        MetricRecord r;
        r.metric = j.at("metric").get<std::string>();
        if (!j.at("value").is_null()) r.value = j.at("value").get<double>();
        if (j.contains("ci_lo")) r.ci_lo = j.at("ci_lo").get<double>();
        if (j.contains("ci_hi")) r.ci_hi = j.at("ci_hi").get<double>();
        r.n = j.at("n").get<int64_t>();
        for (auto& [k, v] : j.items())
            if (k != "metric" && k != "value" && k != "ci_lo" && k != "ci_hi" && k != "n" &&
                v.is_string())
                r.extra[k] = v.get<std::string>();
        records.push_back(std::move(r));
    }
    return records;
}

void write_pr_curve(const std::vector<PrCurvePoint>& points, const std::string& path,
                    const std::string& config_hash) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    if (!config_hash.empty()) out << "# config_hash " << config_hash << "\n";
    out << "threshold\tprecision\trecall\n";
    for (const auto& p : points)
        out << format_double(p.threshold) << "\t" << format_double(p.precision) << "\t"
            << format_double(p.recall) << "\n";
}

std::vector<PrCurvePoint> read_pr_curve(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open PR-curve file: " + path);
    std::string line;
    bool header_seen = false;
    std::vector<PrCurvePoint> points;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            if (line != "threshold\tprecision\trecall")
                throw DataError("PR-curve file missing header: " + path);
            header_seen = true;
            continue;
        }
        PrCurvePoint p;
        if (std::sscanf(line.c_str(), "%lf\t%lf\t%lf", &p.threshold, &p.precision, &p.recall) != 3)
            throw DataError("PR-curve file bad row: " + line);
        points.push_back(p);
    }
    if (!header_seen) throw DataError("PR-curve file missing header: " + path);
    return points;
}

}  // namespace ehrseq
