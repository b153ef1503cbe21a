#include "ember/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "ember/dataset_io.hpp"
#include "ember/eval_metrics.hpp"
#include "ember/gbdt.hpp"
#include "ember/hashing_vectorizer.hpp"
#include "ember/parallel.hpp"
#include "ember/raw_features.hpp"

namespace ember::cli {

namespace fs = std::filesystem;

namespace {

/// Problems with the invocation itself (as opposed to the data).
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

constexpr std::size_t kExtractBatchPerJob = 16;

std::optional<std::vector<std::uint8_t>> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) return std::nullopt;
    return bytes;
}

std::vector<double> parse_budgets(const std::string& text) {
    std::vector<double> budgets;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            throw UsageError("--fpr: not a number: \"" + item + "\"");
        }
        if (used != item.size() || !(v > 0.0 && v < 1.0)) {
            throw UsageError("--fpr: budgets must lie in (0, 1), got \"" + item + "\"");
        }
        budgets.push_back(v);
    }
    if (budgets.empty()) throw UsageError("--fpr: no budgets given");
    return budgets;
}

struct ExtractArgs {
    std::vector<std::string> files;
    std::string appeared;
    int label = 0;
    std::string out;
    unsigned jobs = 0;
};

int cmd_extract(const ExtractArgs& a, std::ostream& err) {
    const unsigned jobs = a.jobs > 0 ? a.jobs : default_jobs();
    JsonlWriter writer(a.out);
    int status = kExitOk;

    struct Result {
        std::optional<std::string> line;
        std::string message;
    };
    const std::size_t batch = std::max<std::size_t>(1, kExtractBatchPerJob * jobs);
    for (std::size_t first = 0; first < a.files.size(); first += batch) {
        const std::size_t count = std::min(batch, a.files.size() - first);
        std::vector<Result> results(count);
        parallel_for(count, jobs, [&](std::size_t i) {
            const fs::path path = a.files[first + i];
            auto bytes = read_file(path);
            if (!bytes) {
                results[i].message = "error: " + path.string() + ": cannot read file";
                return;
            }
            ParsedPe parsed;
            const auto raw = extract_raw(*bytes, a.appeared, a.label, &parsed);
            if (!parsed.ok()) {
                results[i].message = "warning: " + path.string() + ": PE parse " +
                                     std::string(to_string(parsed.status)) + " (" + parsed.status_reason + ")";
            }
            results[i].line = to_json_line(raw);
        });
        for (const auto& r : results) {
            if (!r.message.empty()) err << r.message << '\n';
            if (r.line) {
                writer.write_line(*r.line);
            } else {
                status = kExitData;
            }
        }
    }
    writer.close();
    return status;
}

struct VectorizeArgs {
    std::vector<std::string> inputs;
    std::string out;
    std::string labels;
    std::string ids;
    bool include_unlabeled = false;
    unsigned jobs = 0;
};

int cmd_vectorize(const VectorizeArgs& a, std::ostream& err) {
    std::vector<fs::path> shards(a.inputs.begin(), a.inputs.end());
    MatrixOptions options;
    options.include_unlabeled = a.include_unlabeled;
    options.jobs = a.jobs > 0 ? a.jobs : default_jobs();
    if (!a.ids.empty()) options.ids_path = a.ids;
    const auto rows = to_matrix(shards, a.out, a.labels, options);
    err << "wrote " << rows << " rows x " << kFeatureDim << " columns\n";
    return kExitOk;
}

int cmd_stats(const std::vector<std::string>& inputs, std::ostream& out) {
    std::vector<fs::path> shards(inputs.begin(), inputs.end());
    out << dataset_stats(shards).to_json() << '\n';
    return kExitOk;
}

struct TrainArgs {
    std::string matrix;
    std::string labels;
    std::string out;
    gbdt::TrainParams params;
    unsigned jobs = 0;
};

int cmd_train(TrainArgs a, std::ostream& err) {
    try {
        a.params.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    a.params.threads = a.jobs > 0 ? a.jobs : default_jobs();

    Matrix x = read_matrix(a.matrix);
    auto y = read_labels(a.labels);
    if (x.rows != y.size()) {
        throw DataError("row count mismatch: " + a.matrix + " has " + std::to_string(x.rows) + " rows, " + a.labels +
                        " has " + std::to_string(y.size()));
    }
    if (std::find(y.begin(), y.end(), std::int8_t{-1}) != y.end()) {
        Matrix kept;
        kept.cols = x.cols;
        std::vector<std::int8_t> kept_y;
        for (std::uint64_t i = 0; i < x.rows; ++i) {
            if (y[i] == -1) continue;
            const auto row = x.row(i);
            kept.data.insert(kept.data.end(), row.begin(), row.end());
            kept_y.push_back(y[i]);
        }
        kept.rows = kept_y.size();
        err << "skipping " << (x.rows - kept.rows) << " unlabeled rows\n";
        x = std::move(kept);
        y = std::move(kept_y);
    }

    const auto model = gbdt::train(x, y, a.params, [&](int round, double loss) {
        if (round == a.params.num_trees) err << "round " << round << " training log-loss " << loss << '\n';
    });
    gbdt::save_model(model, a.out);
    return kExitOk;
}

struct PredictArgs {
    std::string model;
    std::string matrix;
    std::string out;
    std::string ids;
};

int cmd_predict(const PredictArgs& a) {
    const auto model = gbdt::load_model(a.model);
    const auto x = read_matrix(a.matrix);
    if (x.cols != model.num_features) {
        throw DataError(a.matrix + " has " + std::to_string(x.cols) + " columns, model expects " +
                        std::to_string(model.num_features));
    }
    std::vector<std::string> ids;
    if (!a.ids.empty()) {
        std::ifstream in(a.ids);
        if (!in) throw DataError("cannot open " + a.ids);
        for (std::string line; std::getline(in, line);) {
            if (!line.empty()) ids.push_back(line);
        }
        if (ids.size() != x.rows) {
            throw DataError(a.ids + " lists " + std::to_string(ids.size()) + " ids for " + std::to_string(x.rows) +
                            " rows");
        }
    }
    std::vector<ScoreRow> rows;
    rows.reserve(x.rows);
    for (std::uint64_t i = 0; i < x.rows; ++i) {
        rows.push_back({ids.empty() ? std::to_string(i) : ids[i], gbdt::predict_proba(model, x.row(i))});
    }
    write_scores_csv(a.out, rows);
    return kExitOk;
}

struct EvaluateArgs {
    std::string scores;
    std::string labels;
    std::string fpr = "0.001,0.01";
    std::string out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
    const auto budgets = parse_budgets(a.fpr);
    const auto rows = read_scores_csv(a.scores);
    const auto labels = read_labels(a.labels);
    if (rows.size() != labels.size()) {
        throw DataError(a.scores + " has " + std::to_string(rows.size()) + " scores, " + a.labels + " has " +
                        std::to_string(labels.size()) + " labels");
    }
    std::vector<double> scores;
    std::vector<std::int8_t> y;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (labels[i] == -1) continue;
        scores.push_back(rows[i].score);
        y.push_back(labels[i]);
    }
    const auto curve = roc_curve(scores, y);
    const auto report = evaluation_report_json(curve, budgets);
    if (!a.out.empty()) {
        std::ofstream f(a.out, std::ios::trunc);
        if (!f) throw DataError("cannot open " + a.out + " for writing");
        f << report << '\n';
    }
    out << "auc " << auc(curve) << '\n';
    for (double b : budgets) {
        const auto op = tpr_at_fpr(curve, b);
        out << "fpr<=" << b << " tpr " << op.tpr << " threshold " << op.threshold << " achieved_fpr " << op.fpr
            << '\n';
    }
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Static PE feature extraction, vectorization and baseline model toolkit", "ember"};
    app.require_subcommand(1);

    ExtractArgs extract;
    auto* ex = app.add_subcommand("extract", "Extract raw features from PE files into JSON lines");
    ex->add_option("files", extract.files, "Input files")->required();
    ex->add_option("--appeared", extract.appeared, "First-seen month, YYYY-MM")
        ->required()
        ->check(CLI::Validator(
            [](std::string& v) { return valid_appeared(v) ? std::string{} : "expected YYYY-MM, got " + v; },
            "YYYY-MM"));
    ex->add_option("--label", extract.label, "1 malicious, 0 benign, -1 unlabeled")
        ->required()
        ->check(CLI::IsMember({-1, 0, 1}));
    ex->add_option("--out", extract.out, "Output JSON-lines file")->required();
    ex->add_option("--jobs", extract.jobs, "Worker threads (default: EMBER_JOBS or all cores)");

    VectorizeArgs vec;
    auto* vc = app.add_subcommand("vectorize", "Vectorize JSON lines into EMBV/EMBL matrices");
    vc->add_option("features", vec.inputs, "Input JSON-lines files")->required();
    vc->add_option("--out", vec.out, "Output EMBV feature matrix")->required();
    vc->add_option("--labels", vec.labels, "Output EMBL label file")->required();
    vc->add_option("--ids", vec.ids, "Optional output listing the sha256 of each row");
    vc->add_flag("--include-unlabeled", vec.include_unlabeled, "Keep rows labeled -1");
    vc->add_option("--jobs", vec.jobs, "Worker threads");

    std::vector<std::string> stats_inputs;
    auto* st = app.add_subcommand("stats", "Label and monthly counts of JSON-lines shards");
    st->add_option("features", stats_inputs, "Input JSON-lines files")->required();

    TrainArgs tr;
    auto* tc = app.add_subcommand("train", "Train the gradient-boosted tree baseline");
    tc->add_option("matrix", tr.matrix, "EMBV feature matrix")->required();
    tc->add_option("labels", tr.labels, "EMBL labels")->required();
    tc->add_option("--out", tr.out, "Output model JSON")->required();
    tc->add_option("--trees", tr.params.num_trees, "Boosting rounds")->capture_default_str();
    tc->add_option("--leaves", tr.params.max_leaves, "Maximum leaves per tree")->capture_default_str();
    tc->add_option("--learning-rate", tr.params.learning_rate, "Shrinkage")->capture_default_str();
    tc->add_option("--min-samples-leaf", tr.params.min_samples_leaf, "Minimum rows per leaf")->capture_default_str();
    tc->add_option("--l2", tr.params.l2_reg, "L2 regularization on leaf values")->capture_default_str();
    tc->add_option("--bins", tr.params.feature_bins, "Quantile bins per feature")->capture_default_str();
    tc->add_flag("--exact", tr.params.exact_splits, "Search every distinct value instead of quantile bins");
    tc->add_option("--jobs", tr.jobs, "Split-search threads");

    PredictArgs pr;
    auto* pc = app.add_subcommand("predict", "Score an EMBV matrix with a trained model");
    pc->add_option("model", pr.model, "Model JSON")->required();
    pc->add_option("matrix", pr.matrix, "EMBV feature matrix")->required();
    pc->add_option("--out", pr.out, "Output CSV (sha256,score)")->required();
    pc->add_option("--ids", pr.ids, "Row ids written by vectorize --ids; default is the row index");

    EvaluateArgs ev;
    auto* evc = app.add_subcommand("evaluate", "ROC AUC and detection rate at FPR budgets");
    evc->add_option("scores", ev.scores, "Score CSV")->required();
    evc->add_option("labels", ev.labels, "EMBL labels, row-aligned with the scores")->required();
    evc->add_option("--fpr", ev.fpr, "Comma-separated FPR budgets")->capture_default_str();
    evc->add_option("--out", ev.out, "Write the full JSON report here");

    auto* lc = app.add_subcommand("layout", "Print the feature-vector block layout as JSON");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUsage;
    }

    try {
        if (ex->parsed()) return cmd_extract(extract, err);
        if (vc->parsed()) return cmd_vectorize(vec, err);
        if (st->parsed()) return cmd_stats(stats_inputs, out);
        if (tc->parsed()) return cmd_train(tr, err);
        if (pc->parsed()) return cmd_predict(pr);
        if (evc->parsed()) return cmd_evaluate(ev, out);
        if (lc->parsed()) {
            out << layout_manifest_json() << '\n';
            return kExitOk;
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitUsage;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace ember::cli
