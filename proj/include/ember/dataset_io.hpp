// JSON-lines shards, dataset statistics, and the EMBV/EMBL binary matrix
// formats.
//
// EMBV (feature matrix), all integers little-endian:
//   "EMBV" | u32 version | u64 rows | u32 cols | rows*cols f32, row-major
// EMBL (labels):
//   "EMBL" | u32 version | u64 rows | rows i8

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ember/hashing_vectorizer.hpp"
#include "ember/raw_features.hpp"

namespace ember {

/// Unrecoverable dataset problem (I/O failure, bad binary header, or a bad
/// record where the caller cannot continue). The message carries the path
/// and line or sha256 context.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LineError {
    std::string message;
    std::string group;   // schema group at fault, "record" for malformed JSON
    std::string sha256;  // when the line was JSON with a sha256 string
};

struct JsonlEntry {
    std::size_t line = 0;  // 1-based
    std::variant<RawFeatures, LineError> value;

    bool ok() const noexcept { return std::holds_alternative<RawFeatures>(value); }
    const RawFeatures& record() const { return std::get<RawFeatures>(value); }
    const LineError& error() const { return std::get<LineError>(value); }
};

/// Streams records from one JSON-lines file, one line in memory at a time.
/// Blank lines are skipped; malformed lines are yielded as LineError.
class JsonlReader {
public:
    explicit JsonlReader(const std::filesystem::path& path);

    std::optional<JsonlEntry> next();
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::size_t line_ = 0;
};

class JsonlWriter {
public:
    explicit JsonlWriter(const std::filesystem::path& path);

    void write(const RawFeatures& raw);
    void write_line(const std::string& json_line);
    void close();

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

std::vector<JsonlEntry> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const RawFeatures> records);

struct LabelCounts {
    std::uint64_t malicious = 0;
    std::uint64_t benign = 0;
    std::uint64_t unlabeled = 0;

    std::uint64_t total() const noexcept { return malicious + benign + unlabeled; }
    void add(int label) noexcept;
    bool operator==(const LabelCounts&) const = default;
};

struct DatasetStats {
    std::uint64_t total = 0;
    LabelCounts labels;
    std::map<std::string, LabelCounts> months;  // sorted ascending

    void add(const RawFeatures& raw);
    std::string to_json() const;
    bool operator==(const DatasetStats&) const = default;
};

/// Throws DataError on the first unreadable file or malformed line.
DatasetStats dataset_stats(std::span<const std::filesystem::path> shards);

inline constexpr std::uint32_t kMatrixFormatVersion = 1;

struct MatrixHeader {
    std::uint64_t rows = 0;
    std::uint32_t cols = 0;
};

/// Row-major in-memory float matrix.
struct Matrix {
    std::uint64_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<float> data;

    std::span<const float> row(std::uint64_t i) const {
        return std::span<const float>(data).subspan(i * cols, cols);
    }
};

/// Streams rows into an EMBV file; the row count in the header is patched
/// on finish().
class MatrixWriter {
public:
    MatrixWriter(const std::filesystem::path& path, std::uint32_t cols);
    ~MatrixWriter();

    MatrixWriter(const MatrixWriter&) = delete;
    MatrixWriter& operator=(const MatrixWriter&) = delete;

    void append(std::span<const float> row);
    void finish();
    std::uint64_t rows() const noexcept { return rows_; }

private:
    std::filesystem::path path_;
    std::ofstream out_;
    std::uint32_t cols_;
    std::uint64_t rows_ = 0;
    bool finished_ = false;
};

class LabelWriter {
public:
    explicit LabelWriter(const std::filesystem::path& path);
    ~LabelWriter();

    LabelWriter(const LabelWriter&) = delete;
    LabelWriter& operator=(const LabelWriter&) = delete;

    void append(std::int8_t label);
    void finish();

private:
    std::filesystem::path path_;
    std::ofstream out_;
    std::uint64_t rows_ = 0;
    bool finished_ = false;
};

Matrix read_matrix(const std::filesystem::path& path);
MatrixHeader read_matrix_header(const std::filesystem::path& path);
void write_matrix(const std::filesystem::path& path, const Matrix& m);

std::vector<std::int8_t> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, std::span<const std::int8_t> labels);

struct MatrixOptions {
    bool include_unlabeled = false;
    unsigned jobs = 1;
    std::size_t batch_size = 1024;
    /// Optional sidecar listing the sha256 of each emitted row, one per line.
    std::optional<std::filesystem::path> ids_path;
};

/// Vectorizes every record of the shards into an EMBV/EMBL pair, preserving
/// input order. Returns the number of rows written. Throws DataError naming
/// the shard, line and sha256 on the first bad record.
std::uint64_t to_matrix(std::span<const std::filesystem::path> shards, const std::filesystem::path& matrix_path,
                        const std::filesystem::path& labels_path, const MatrixOptions& options = {});

}  // namespace ember
