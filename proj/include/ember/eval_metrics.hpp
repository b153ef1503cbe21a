// ROC analysis for binary detectors. A sample is called malicious when its
// score is >= the threshold; equal scores always move together.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ember {

struct RocPoint {
    double threshold;  // +inf for the (0, 0) origin
    double fpr;
    double tpr;

    bool operator==(const RocPoint&) const = default;
};

struct RocCurve {
    std::vector<RocPoint> points;  // thresholds strictly decreasing
    std::uint64_t positives = 0;
    std::uint64_t negatives = 0;
};

struct OperatingPoint {
    double threshold;
    double tpr;
    double fpr;  // achieved
};

class MetricsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// labels must be 0/1 with both classes present; scores must not be NaN.
RocCurve roc_curve(std::span<const double> scores, std::span<const std::int8_t> labels);

/// Trapezoidal area under the curve.
double auc(const RocCurve& curve) noexcept;

/// Best detection rate with achieved FPR <= budget. Requires 0 < budget < 1.
OperatingPoint tpr_at_fpr(const RocCurve& curve, double fpr_budget);

struct ScoreRow {
    std::string sha256;
    double score;
};

/// CSV with header "sha256,score".
void write_scores_csv(const std::filesystem::path& path, std::span<const ScoreRow> rows);
std::vector<ScoreRow> read_scores_csv(const std::filesystem::path& path);

/// {"auc": ..., "points": [{threshold, fpr, tpr}...], "budgets": {"0.001": {...}}}
std::string evaluation_report_json(const RocCurve& curve, std::span<const double> budgets);

}  // namespace ember
