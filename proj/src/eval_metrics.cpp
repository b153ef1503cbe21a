#include "ember/eval_metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace ember {

RocCurve roc_curve(std::span<const double> scores, std::span<const std::int8_t> labels) {
    if (scores.size() != labels.size()) throw MetricsError("scores and labels differ in length");
    RocCurve curve;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw MetricsError("labels must be 0 or 1");
        if (std::isnan(scores[i])) throw MetricsError("NaN score at row " + std::to_string(i));
        (labels[i] == 1 ? curve.positives : curve.negatives) += 1;
    }
    if (curve.positives == 0 || curve.negatives == 0) {
        throw MetricsError("ROC needs at least one positive and one negative");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    const double p = static_cast<double>(curve.positives);
    const double n = static_cast<double>(curve.negatives);
    curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::uint64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double threshold = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == threshold; ++i) {
            (labels[order[i]] == 1 ? tp : fp) += 1;
        }
        curve.points.push_back({threshold, static_cast<double>(fp) / n, static_cast<double>(tp) / p});
    }
    return curve;
}

double auc(const RocCurve& curve) noexcept {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
    }
    return std::clamp(area, 0.0, 1.0);
}

OperatingPoint tpr_at_fpr(const RocCurve& curve, double fpr_budget) {
    if (!(fpr_budget > 0.0 && fpr_budget < 1.0)) throw MetricsError("FPR budget must be in (0, 1)");
    if (curve.points.empty()) throw MetricsError("empty ROC curve");
    OperatingPoint best{curve.points.front().threshold, curve.points.front().tpr, curve.points.front().fpr};
    for (const auto& pt : curve.points) {
        if (pt.fpr > fpr_budget) break;
        if (pt.tpr > best.tpr) best = {pt.threshold, pt.tpr, pt.fpr};
    }
    return best;
}

namespace {

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

}  // namespace

void write_scores_csv(const std::filesystem::path& path, std::span<const ScoreRow> rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw MetricsError("cannot open " + path.string() + " for writing");
    out << "sha256,score\n";
    for (const auto& r : rows) out << r.sha256 << ',' << format_double(r.score) << '\n';
    out.close();
    if (out.fail()) throw MetricsError("write error in " + path.string());
}

std::vector<ScoreRow> read_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MetricsError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    const auto fail = [&](const std::string& why) {
        return MetricsError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (!std::getline(in, line)) throw MetricsError(path.string() + ": empty score file");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "sha256,score") throw fail("expected header \"sha256,score\"");

    std::vector<ScoreRow> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) throw fail("expected two columns");
        ScoreRow row;
        row.sha256 = line.substr(0, comma);
        const char* first = line.data() + comma + 1;
        const char* last = line.data() + line.size();
        auto [ptr, ec] = std::from_chars(first, last, row.score);
        if (ec != std::errc{} || ptr != last || std::isnan(row.score)) throw fail("bad score");
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string evaluation_report_json(const RocCurve& curve, std::span<const double> budgets) {
    using Json = nlohmann::ordered_json;
    const auto threshold_json = [](double t) { return std::isfinite(t) ? Json(t) : Json(nullptr); };
    Json j;
    j["auc"] = auc(curve);
    j["positives"] = curve.positives;
    j["negatives"] = curve.negatives;
    Json points = Json::array();
    for (const auto& pt : curve.points) {
        points.push_back(Json{{"threshold", threshold_json(pt.threshold)}, {"fpr", pt.fpr}, {"tpr", pt.tpr}});
    }
    Json by_budget = Json::object();
    for (double b : budgets) {
        const auto op = tpr_at_fpr(curve, b);
        by_budget[format_double(b)] =
            Json{{"threshold", threshold_json(op.threshold)}, {"tpr", op.tpr}, {"fpr", op.fpr}};
    }
    j["budgets"] = std::move(by_budget);
    j["points"] = std::move(points);
    return j.dump(2);
}

}  // namespace ember
