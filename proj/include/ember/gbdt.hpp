// Gradient-boosted regression trees for binary classification with the
// logistic loss. Trees are grown leaf-wise on quantile-binned features using
// second-order (gradient/hessian) statistics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ember/dataset_io.hpp"

namespace ember::gbdt {

struct TrainParams {
    int num_trees = 100;
    int max_leaves = 31;
    double learning_rate = 0.1;
    int min_samples_leaf = 20;
    double l2_reg = 0.0;
    int feature_bins = 255;
    /// Split on every distinct feature value instead of quantile bins.
    bool exact_splits = false;
    /// Split-search worker count; the model does not depend on it.
    unsigned threads = 1;

    /// Throws std::invalid_argument on out-of-range values.
    void validate() const;

    bool operator==(const TrainParams&) const = default;
};

/// Flattened tree node. Internal nodes send x[feature] <= threshold left.
struct Node {
    bool leaf = true;
    std::uint32_t feature = 0;
    double threshold = 0.0;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    double value = 0.0;

    bool operator==(const Node&) const = default;
};

/// nodes[0] is the root; children always have larger indices than parents.
struct Tree {
    std::vector<Node> nodes;

    double predict(std::span<const float> x) const noexcept;
    std::size_t leaf_count() const noexcept;
    bool operator==(const Tree&) const = default;
};

struct BoostedModel {
    std::uint32_t num_features = 0;
    double base_score = 0.0;
    std::vector<Tree> trees;
    TrainParams params;

    double margin(std::span<const float> x) const;
    bool operator==(const BoostedModel&) const = default;
};

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Called after each boosting round with the 1-based round and the training
/// log-loss of the model so far (round 0 is the prior alone).
using RoundCallback = std::function<void(int round, double log_loss)>;

/// Throws TrainError for degenerate labels ("degenerate labels") or shape
/// mismatches, std::invalid_argument for bad params.
BoostedModel train(const Matrix& x, std::span<const std::int8_t> y, const TrainParams& params,
                   const RoundCallback& on_round = {});

/// Throws std::invalid_argument on dimension mismatch.
double predict_proba(const BoostedModel& model, std::span<const float> x);

double sigmoid(double margin) noexcept;

/// Mean logistic loss of margins against 0/1 labels.
double log_loss(std::span<const double> margins, std::span<const std::int8_t> y);

class ModelFormatError : public std::runtime_error {
public:
    ModelFormatError(std::string where, std::string detail)
        : std::runtime_error((where.empty() ? std::string("model") : where) + ": " + detail),
          where_(std::move(where)),
          detail_(std::move(detail)) {}
    const std::string& where() const noexcept { return where_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    std::string where_;
    std::string detail_;
};

std::string model_to_json(const BoostedModel& model);
/// Throws ModelFormatError naming the JSON pointer of the offending value.
BoostedModel model_from_json(std::string_view text);

void save_model(const BoostedModel& model, const std::filesystem::path& path);
BoostedModel load_model(const std::filesystem::path& path);

}  // namespace ember::gbdt
