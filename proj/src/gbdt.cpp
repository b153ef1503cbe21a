#include "ember/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ember/parallel.hpp"
#include "json.hpp"

namespace ember::gbdt {

namespace {

constexpr int kMaxBins = 65535;

/// Quantized copy of the training matrix, stored column-major.
class BinnedMatrix {
public:
    BinnedMatrix(const Matrix& x, const TrainParams& params) : rows_(x.rows), cols_(x.cols) {
        codes_.resize(rows_ * cols_);
        uppers_.resize(cols_);
        const int max_bins = params.exact_splits ? kMaxBins : params.feature_bins;
        parallel_for(cols_, params.threads, [&](std::size_t f) { bin_feature(x, f, max_bins); });
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t bins(std::size_t f) const noexcept { return uppers_[f].size(); }
    float upper(std::size_t f, std::size_t b) const noexcept { return uppers_[f][b]; }
    const std::uint16_t* column(std::size_t f) const noexcept { return codes_.data() + f * rows_; }

private:
    void bin_feature(const Matrix& x, std::size_t f, int max_bins) {
        std::vector<float> values(rows_);
        for (std::size_t i = 0; i < rows_; ++i) values[i] = x.data[i * cols_ + f];
        std::vector<float> sorted = values;
        std::sort(sorted.begin(), sorted.end());

        std::vector<float> distinct = sorted;
        distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

        auto& upper = uppers_[f];
        if (distinct.size() <= static_cast<std::size_t>(max_bins)) {
            upper = std::move(distinct);
        } else {
            const std::size_t n = sorted.size();
            for (int k = 1; k < max_bins; ++k) {
                const std::size_t idx = (static_cast<std::size_t>(k) * n + max_bins - 1) / max_bins;
                upper.push_back(sorted[std::max<std::size_t>(idx, 1) - 1]);
            }
            upper.push_back(sorted.back());
            upper.erase(std::unique(upper.begin(), upper.end()), upper.end());
        }

        auto* codes = codes_.data() + f * rows_;
        for (std::size_t i = 0; i < rows_; ++i) {
            const auto it = std::lower_bound(upper.begin(), upper.end(), values[i]);
            codes[i] = static_cast<std::uint16_t>(std::min<std::size_t>(it - upper.begin(), upper.size() - 1));
        }
    }

    std::size_t rows_;
    std::size_t cols_;
    std::vector<std::uint16_t> codes_;
    std::vector<std::vector<float>> uppers_;
};

struct Split {
    double gain = 0.0;
    std::uint32_t feature = 0;
    std::uint32_t bin = 0;
    bool valid = false;
};

struct Leaf {
    std::uint32_t node = 0;
    std::vector<std::uint32_t> samples;
    double grad = 0.0;
    double hess = 0.0;
    Split best;
};

struct BinStats {
    double grad = 0.0;
    double hess = 0.0;
    std::uint32_t count = 0;
};

class TreeBuilder {
public:
    TreeBuilder(const BinnedMatrix& data, const TrainParams& params, std::span<const double> grad,
                std::span<const double> hess)
        : data_(data), params_(params), grad_(grad), hess_(hess) {}

    /// Grows one tree; leaf_of receives, per sample, the node index of its leaf.
    Tree build(std::vector<std::uint32_t>& leaf_of) {
        Tree tree;
        tree.nodes.push_back(Node{});
        std::vector<Leaf> leaves(1);
        leaves[0].samples.resize(data_.rows());
        for (std::uint32_t i = 0; i < leaves[0].samples.size(); ++i) leaves[0].samples[i] = i;
        finish_leaf(leaves[0]);

        while (leaves.size() < static_cast<std::size_t>(params_.max_leaves)) {
            std::size_t pick = leaves.size();
            for (std::size_t i = 0; i < leaves.size(); ++i) {
                if (!leaves[i].best.valid) continue;
                if (pick == leaves.size() || leaves[i].best.gain > leaves[pick].best.gain) pick = i;
            }
            if (pick == leaves.size()) break;

            Leaf parent = std::move(leaves[pick]);
            const auto split = parent.best;
            const auto* codes = data_.column(split.feature);
            Leaf left, right;
            for (auto s : parent.samples) (codes[s] <= split.bin ? left : right).samples.push_back(s);

            const auto left_node = static_cast<std::uint32_t>(tree.nodes.size());
            auto& node = tree.nodes[parent.node];
            node.leaf = false;
            node.feature = split.feature;
            node.threshold = static_cast<double>(data_.upper(split.feature, split.bin));
            node.left = left_node;
            node.right = left_node + 1;
            tree.nodes.push_back(Node{});
            tree.nodes.push_back(Node{});
            left.node = left_node;
            right.node = left_node + 1;
            finish_leaf(left);
            finish_leaf(right);
            leaves[pick] = std::move(left);
            leaves.push_back(std::move(right));
        }

        for (const auto& leaf : leaves) {
            const double denom = leaf.hess + params_.l2_reg;
            const double value = denom > 0.0 ? -leaf.grad / denom * params_.learning_rate : 0.0;
            tree.nodes[leaf.node].value = value;
            for (auto s : leaf.samples) leaf_of[s] = leaf.node;
        }
        return tree;
    }

private:
    void finish_leaf(Leaf& leaf) {
        leaf.grad = 0.0;
        leaf.hess = 0.0;
        for (auto s : leaf.samples) {
            leaf.grad += grad_[s];
            leaf.hess += hess_[s];
        }
        leaf.best = find_split(leaf);
    }

    double score(double g, double h) const noexcept { return g * g / (h + params_.l2_reg); }

    Split best_for_feature(const Leaf& leaf, std::uint32_t f, std::vector<BinStats>& hist) const {
        Split best;
        const std::size_t nbins = data_.bins(f);
        if (nbins < 2) return best;
        hist.assign(nbins, BinStats{});
        const auto* codes = data_.column(f);
        for (auto s : leaf.samples) {
            auto& b = hist[codes[s]];
            b.grad += grad_[s];
            b.hess += hess_[s];
            ++b.count;
        }
        const double parent = score(leaf.grad, leaf.hess);
        const auto min_leaf = static_cast<std::uint32_t>(params_.min_samples_leaf);
        const auto total = static_cast<std::uint32_t>(leaf.samples.size());
        double gl = 0.0, hl = 0.0;
        std::uint32_t nl = 0;
        for (std::size_t b = 0; b + 1 < nbins; ++b) {
            gl += hist[b].grad;
            hl += hist[b].hess;
            nl += hist[b].count;
            const std::uint32_t nr = total - nl;
            if (nl < min_leaf) continue;
            if (nr < min_leaf) break;
            const double gr = leaf.grad - gl;
            const double hr = leaf.hess - hl;
            if (hl + params_.l2_reg <= 0.0 || hr + params_.l2_reg <= 0.0) continue;
            const double gain = score(gl, hl) + score(gr, hr) - parent;
            if (gain > best.gain) best = Split{gain, f, static_cast<std::uint32_t>(b), true};
        }
        return best;
    }

    Split find_split(const Leaf& leaf) const {
        if (leaf.samples.size() < 2 * static_cast<std::size_t>(params_.min_samples_leaf)) return {};
        const std::size_t cols = data_.cols();
        const unsigned workers = std::max(1u, params_.threads);
        std::vector<Split> per_chunk(std::min<std::size_t>(workers, std::max<std::size_t>(cols, 1)));
        parallel_chunks(cols, workers, [&](std::size_t begin, std::size_t end, std::size_t chunk) {
            std::vector<BinStats> hist;
            Split best;
            for (std::size_t f = begin; f < end; ++f) {
                const auto s = best_for_feature(leaf, static_cast<std::uint32_t>(f), hist);
                if (s.valid && s.gain > best.gain) best = s;
            }
            per_chunk[chunk] = best;
        });
        Split best;
        for (const auto& s : per_chunk) {
            if (s.valid && s.gain > best.gain) best = s;
        }
        return best;
    }

    const BinnedMatrix& data_;
    const TrainParams& params_;
    std::span<const double> grad_;
    std::span<const double> hess_;
};

double softplus(double z) noexcept {
    return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

}  // namespace

void TrainParams::validate() const {
    if (num_trees < 1) throw std::invalid_argument("num_trees must be >= 1");
    if (max_leaves < 2) throw std::invalid_argument("max_leaves must be >= 2");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw std::invalid_argument("learning_rate must be > 0");
    }
    if (min_samples_leaf < 1) throw std::invalid_argument("min_samples_leaf must be >= 1");
    if (!(l2_reg >= 0.0) || !std::isfinite(l2_reg)) throw std::invalid_argument("l2_reg must be >= 0");
    if (feature_bins < 2 || feature_bins > kMaxBins) {
        throw std::invalid_argument("feature_bins must be in [2, 65535]");
    }
}

double Tree::predict(std::span<const float> x) const noexcept {
    std::uint32_t i = 0;
    while (!nodes[i].leaf) {
        const auto& n = nodes[i];
        i = static_cast<double>(x[n.feature]) <= n.threshold ? n.left : n.right;
    }
    return nodes[i].value;
}

std::size_t Tree::leaf_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.leaf; }));
}

double BoostedModel::margin(std::span<const float> x) const {
    if (x.size() != num_features) {
        throw std::invalid_argument("expected " + std::to_string(num_features) + " features, got " +
                                    std::to_string(x.size()));
    }
    double m = base_score;
    for (const auto& t : trees) m += t.predict(x);
    return m;
}

double sigmoid(double margin) noexcept {
    if (margin >= 0) return 1.0 / (1.0 + std::exp(-margin));
    const double e = std::exp(margin);
    return e / (1.0 + e);
}

double predict_proba(const BoostedModel& model, std::span<const float> x) {
    return sigmoid(model.margin(x));
}

double log_loss(std::span<const double> margins, std::span<const std::int8_t> y) {
    if (margins.size() != y.size() || margins.empty()) throw std::invalid_argument("log_loss: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) total += softplus(y[i] == 1 ? -margins[i] : margins[i]);
    return total / static_cast<double>(y.size());
}

BoostedModel train(const Matrix& x, std::span<const std::int8_t> y, const TrainParams& params,
                   const RoundCallback& on_round) {
    params.validate();
    if (x.data.size() != x.rows * x.cols) throw TrainError("matrix data size does not match its shape");
    if (x.rows != y.size()) {
        throw TrainError("dimension mismatch: " + std::to_string(x.rows) + " rows, " + std::to_string(y.size()) +
                         " labels");
    }
    if (x.rows < 2) throw TrainError("need at least 2 rows");
    if (x.cols == 0) throw TrainError("need at least 1 feature");
    if (x.rows > std::numeric_limits<std::uint32_t>::max()) throw TrainError("too many rows");
    std::size_t positives = 0;
    for (auto label : y) {
        if (label != 0 && label != 1) throw TrainError("labels must be 0 or 1 (exclude unlabeled rows)");
        positives += label == 1;
    }
    if (positives == 0 || positives == y.size()) throw TrainError("degenerate labels");
    for (float v : x.data) {
        if (!std::isfinite(v)) throw TrainError("non-finite feature value");
    }

    BoostedModel model;
    model.num_features = x.cols;
    model.params = params;
    const double p = std::clamp(static_cast<double>(positives) / static_cast<double>(y.size()), 1e-6, 1.0 - 1e-6);
    model.base_score = std::log(p / (1.0 - p));

    const BinnedMatrix binned(x, params);
    const std::size_t n = x.rows;
    std::vector<double> margin(n, model.base_score);
    std::vector<double> grad(n), hess(n);
    std::vector<std::uint32_t> leaf_of(n);
    if (on_round) on_round(0, log_loss(margin, y));

    for (int round = 1; round <= params.num_trees; ++round) {
        for (std::size_t i = 0; i < n; ++i) {
            const double s = sigmoid(margin[i]);
            grad[i] = s - static_cast<double>(y[i]);
            hess[i] = s * (1.0 - s);
        }
        TreeBuilder builder(binned, params, grad, hess);
        Tree tree = builder.build(leaf_of);
        for (std::size_t i = 0; i < n; ++i) margin[i] += tree.nodes[leaf_of[i]].value;
        model.trees.push_back(std::move(tree));
        if (on_round) on_round(round, log_loss(margin, y));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Model document

namespace {

using Json = nlohmann::ordered_json;

constexpr const char* kFormatName = "ember-gbdt";
constexpr int kFormatVersion = 1;

const Json& at(const Json& obj, const std::string& ptr, const char* key) {
    if (!obj.is_object()) throw ModelFormatError(ptr, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw ModelFormatError(ptr + "/" + key, "missing");
    return *it;
}

double real_at(const Json& obj, const std::string& ptr, const char* key) {
    const auto& v = at(obj, ptr, key);
    if (!v.is_number()) throw ModelFormatError(ptr + "/" + key, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ModelFormatError(ptr + "/" + key, "expected a finite number");
    return d;
}

std::uint64_t count_at(const Json& obj, const std::string& ptr, const char* key) {
    const auto& v = at(obj, ptr, key);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
    throw ModelFormatError(ptr + "/" + key, "expected a non-negative integer");
}

Tree tree_from_json(const Json& j, const std::string& ptr, std::uint32_t num_features, int max_leaves) {
    const auto& nodes = at(j, ptr, "nodes");
    const std::string nodes_ptr = ptr + "/nodes";
    if (!nodes.is_array() || nodes.empty()) throw ModelFormatError(nodes_ptr, "expected a non-empty array");
    Tree tree;
    std::vector<int> parents(nodes.size(), 0);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto node_ptr = nodes_ptr + "/" + std::to_string(i);
        const auto& nj = nodes[i];
        if (!nj.is_object()) throw ModelFormatError(node_ptr, "expected an object");
        Node node;
        if (nj.contains("value")) {
            node.leaf = true;
            node.value = real_at(nj, node_ptr, "value");
        } else {
            node.leaf = false;
            const auto feature = count_at(nj, node_ptr, "feature");
            if (feature >= num_features) {
                throw ModelFormatError(node_ptr + "/feature", "feature index out of range");
            }
            node.feature = static_cast<std::uint32_t>(feature);
            node.threshold = real_at(nj, node_ptr, "threshold");
            const auto left = count_at(nj, node_ptr, "left");
            const auto right = count_at(nj, node_ptr, "right");
            for (auto [child, name] : {std::pair{left, "left"}, std::pair{right, "right"}}) {
                if (child <= i || child >= nodes.size()) {
                    throw ModelFormatError(node_ptr + "/" + name, "child index must follow its parent");
                }
                if (++parents[child] > 1) throw ModelFormatError(node_ptr + "/" + name, "node has two parents");
            }
            node.left = static_cast<std::uint32_t>(left);
            node.right = static_cast<std::uint32_t>(right);
        }
        tree.nodes.push_back(node);
    }
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        if (parents[i] == 0) throw ModelFormatError(nodes_ptr + "/" + std::to_string(i), "unreachable node");
    }
    if (tree.leaf_count() > static_cast<std::size_t>(max_leaves)) {
        throw ModelFormatError(nodes_ptr, "more leaves than max_leaves");
    }
    return tree;
}

}  // namespace

std::string model_to_json(const BoostedModel& model) {
    Json j;
    j["format"] = kFormatName;
    j["version"] = kFormatVersion;
    j["num_features"] = model.num_features;
    j["base_score"] = model.base_score;
    const auto& p = model.params;
    j["params"] = Json{
        {"num_trees", p.num_trees},         {"max_leaves", p.max_leaves},
        {"learning_rate", p.learning_rate}, {"min_samples_leaf", p.min_samples_leaf},
        {"l2_reg", p.l2_reg},               {"feature_bins", p.feature_bins},
        {"exact_splits", p.exact_splits},
    };
    Json trees = Json::array();
    for (const auto& t : model.trees) {
        Json nodes = Json::array();
        for (const auto& n : t.nodes) {
            if (n.leaf) {
                nodes.push_back(Json{{"value", n.value}});
            } else {
                nodes.push_back(Json{{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left},
                                     {"right", n.right}});
            }
        }
        trees.push_back(Json{{"nodes", std::move(nodes)}});
    }
    j["trees"] = std::move(trees);
    return j.dump();
}

BoostedModel model_from_json(std::string_view text) {
    if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) throw ModelFormatError("", "empty document");
    Json j;
    try {
        j = Json::parse(text.begin(), text.end());
    } catch (const Json::parse_error& e) {
        throw ModelFormatError("", std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ModelFormatError("", "expected an object");
    const auto& format = at(j, "", "format");
    if (!format.is_string() || format.get<std::string>() != kFormatName) {
        throw ModelFormatError("/format", std::string("expected \"") + kFormatName + "\"");
    }
    if (count_at(j, "", "version") != static_cast<std::uint64_t>(kFormatVersion)) {
        throw ModelFormatError("/version", "unsupported version");
    }

    BoostedModel model;
    const auto features = count_at(j, "", "num_features");
    if (features == 0 || features > std::numeric_limits<std::uint32_t>::max()) {
        throw ModelFormatError("/num_features", "out of range");
    }
    model.num_features = static_cast<std::uint32_t>(features);
    model.base_score = real_at(j, "", "base_score");

    const auto& pj = at(j, "", "params");
    auto& p = model.params;
    const auto int_param = [&](const char* key) {
        const auto v = count_at(pj, "/params", key);
        if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) {
            throw ModelFormatError(std::string("/params/") + key, "out of range");
        }
        return static_cast<int>(v);
    };
    p.num_trees = int_param("num_trees");
    p.max_leaves = int_param("max_leaves");
    p.learning_rate = real_at(pj, "/params", "learning_rate");
    p.min_samples_leaf = int_param("min_samples_leaf");
    p.l2_reg = real_at(pj, "/params", "l2_reg");
    p.feature_bins = int_param("feature_bins");
    const auto& exact = at(pj, "/params", "exact_splits");
    if (!exact.is_boolean()) throw ModelFormatError("/params/exact_splits", "expected a boolean");
    p.exact_splits = exact.get<bool>();
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw ModelFormatError("/params", e.what());
    }

    const auto& trees = at(j, "", "trees");
    if (!trees.is_array()) throw ModelFormatError("/trees", "expected an array");
    for (std::size_t i = 0; i < trees.size(); ++i) {
        model.trees.push_back(tree_from_json(trees[i], "/trees/" + std::to_string(i), model.num_features,
                                             p.max_leaves));
    }
    return model;
}

void save_model(const BoostedModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out << model_to_json(model) << '\n';
    out.close();
    if (out.fail()) throw DataError("write error in " + path.string());
}

BoostedModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return model_from_json(buf.str());
    } catch (const ModelFormatError& e) {
        throw ModelFormatError(path.string() + "#" + e.where(), e.detail());
    }
}

}  // namespace ember::gbdt
