#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/eval.hpp"

namespace ehrseq {

struct MetricRecord {
    std::string metric;
    std::optional<double> value;  // unset when the quantity is undefined
    std::optional<double> ci_lo;
    std::optional<double> ci_hi;
    int64_t n = 0;
    std::map<std::string, std::string> extra;
};

// line-delimited JSON; every record carries the resolved config hash
void write_metrics_jsonl(const std::vector<MetricRecord>& records, const std::string& path,
                         const std::string& config_hash);
std::vector<MetricRecord> read_metrics_jsonl(const std::string& path);

// delimited text with header: threshold, precision, recall
void write_pr_curve(const std::vector<PrCurvePoint>& points, const std::string& path,
                    const std::string& config_hash = "");
std::vector<PrCurvePoint> read_pr_curve(const std::string& path);

}  // namespace ehrseq
